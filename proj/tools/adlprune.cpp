#include "adlprune/commands.hpp"

int main(int argc, char** argv) { return adlprune::cli_main(argc, argv); }
