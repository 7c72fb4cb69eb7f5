#include "adlprune/rng.hpp"

#include <cmath>
#include <numbers>

namespace adlprune {

namespace {

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

RandomStream::RandomStream(std::uint64_t seed, std::string_view name)
    : key_(splitmix64(splitmix64(seed) ^ fnv1a(name))) {}

RandomStream RandomStream::child(std::string_view name) const {
  return RandomStream(splitmix64(key_ ^ fnv1a(name)));
}

std::uint64_t RandomStream::bits(std::uint64_t hi, std::uint64_t lo) const {
  std::uint64_t h = splitmix64(key_ ^ splitmix64(hi ^ 0x632be59bd9b4e019ULL));
  return splitmix64(h ^ lo);
}

double RandomStream::uniform(std::uint64_t hi, std::uint64_t lo) const {
  return (static_cast<double>(bits(hi, lo) >> 11) + 0.5) * 0x1.0p-53;
}

double RandomStream::normal(std::uint64_t hi, std::uint64_t lo) const {
  // Box-Muller on two decorrelated draws; only the cosine branch is used.
  const double u1 = uniform(hi, 2 * lo);
  const double u2 = uniform(hi, 2 * lo + 1);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace adlprune
