#pragma once

#include <cstddef>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>

namespace adlprune {

enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 1,
  kExitValidation = 2,
  kExitNumerical = 3,
};

class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Parses a threshold: any real including +-inf; NaN and junk are rejected.
double parse_threshold(const std::string& text);

struct TrainSummary {
  std::int64_t steps = 0;
  double frame_accuracy = 0.0;
  double ce = 0.0;
  double survival_rate_overall = 0.0;
};

/// Writes final.ckpt, metrics.jsonl, survival.jsonl and eval.json to out_dir.
TrainSummary cmd_train(const std::string& config_path, const std::string& out_dir, std::ostream& log);

/// Writes the pruned checkpoint plus report.csv / report.json next to it.
void cmd_prune(const std::string& ckpt_path, std::optional<double> threshold,
               const std::string& out_path, std::ostream& log);

/// Returns the max abs logit difference; exit status is decided by the caller.
double cmd_verify(const std::string& ckpt_path, const std::string& pruned_path, std::size_t batches,
                  std::ostream& log);

void cmd_report(const std::string& ckpt_path, const std::optional<std::string>& csv_path,
                std::optional<double> threshold, std::ostream& out);

/// Full command-line entry point; maps failures to exit codes.
int cli_main(int argc, char** argv);

}  // namespace adlprune
