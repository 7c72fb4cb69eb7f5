#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>

#include "adlprune/config.hpp"
#include "adlprune/conformer.hpp"
#include "adlprune/trainkit.hpp"

namespace adlprune {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kCheckpointVersion = 1;

/// Single-file layout: 8-byte magic, u64 little-endian header length, JSON
/// header (version, step, config echo, array manifest), then the arrays as
/// little-endian f64 in manifest order.
struct Checkpoint {
  RunConfig config;
  std::int64_t step = 0;
  ConformerModel model;
  std::optional<AdamOptimizer> optimizer;  // absent for pruned checkpoints
  std::optional<double> prune_threshold;   // set for pruned checkpoints
};

std::string encode_checkpoint(const RunConfig& config, std::int64_t step, const ConformerModel& model,
                              const AdamOptimizer* optimizer = nullptr,
                              std::optional<double> prune_threshold = {});
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::string& path, const RunConfig& config, std::int64_t step,
                     const ConformerModel& model, const AdamOptimizer* optimizer = nullptr,
                     std::optional<double> prune_threshold = {});
Checkpoint load_checkpoint(const std::string& path);

/// Loads and checks that the stored config echo equals `expected`.
Checkpoint load_checkpoint(const std::string& path, const RunConfig& expected);

}  // namespace adlprune
