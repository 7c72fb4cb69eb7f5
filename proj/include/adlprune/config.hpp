#pragma once

#include <cstdint>
#include <string>

#include "adlprune/conformer.hpp"
#include "adlprune/trainkit.hpp"
#include "json.hpp"

namespace adlprune {

struct LogConfig {
  std::int64_t log_interval = 50;
  std::int64_t snapshot_interval = 500;
  std::size_t eval_batches = 16;

  void validate() const;
};

/// Everything a run needs. Missing keys take the defaults below; unknown keys
/// are rejected.
struct RunConfig {
  std::uint64_t seed = 1234;
  ConformerConfig model = default_model();
  TaskConfig task;
  OptimConfig optim;
  LogConfig log;

  static ConformerConfig default_model();

  void validate() const;
};

RunConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const RunConfig& c);

/// Reads and validates a config file. A set SEED environment variable
/// replaces the seed.
RunConfig load_config(const std::string& path);

/// Applies SEED from the environment if present; returns true if it did.
bool apply_seed_override(RunConfig& c);

}  // namespace adlprune
