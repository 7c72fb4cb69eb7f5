#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "adlprune/conformer.hpp"
#include "adlprune/rng.hpp"

namespace adlprune {

struct OptimConfig {
  double base_lr = 0.05;
  std::int64_t warmup = 400;
  std::int64_t steps = 5000;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;

  void validate() const;
};

/// Transformer warm-up: base * min(t^-0.5, t * warmup^-1.5), for t >= 1.
double learning_rate(const OptimConfig& cfg, std::int64_t step);

struct Moments {
  std::vector<double> m;
  std::vector<double> v;
};

/// Adam over the model's named parameters. `step` counts completed updates.
class AdamOptimizer {
 public:
  explicit AdamOptimizer(OptimConfig cfg) : cfg_(cfg) {}

  const OptimConfig& config() const { return cfg_; }
  std::int64_t step() const { return step_; }
  void set_step(std::int64_t t) { step_ = t; }

  std::map<std::string, Moments>& moments() { return moments_; }
  const std::map<std::string, Moments>& moments() const { return moments_; }

  /// Applies one update at step `step() + 1` from the accumulated grads, then
  /// clears them. Returns the learning rate used.
  double update(ConformerModel& model);

 private:
  OptimConfig cfg_;
  std::int64_t step_ = 0;
  std::map<std::string, Moments> moments_;
};

struct TaskConfig {
  std::size_t seq_len = 32;
  std::size_t batch_size = 16;

  void validate() const;
};

struct Batch {
  Tensor features;          // [B, T, input_dim]
  std::vector<int> labels;  // B * T, row-major
};

/// Synthetic frame labelling. A frame's label is the argmax of a fixed random
/// projection of the features smoothed over a +-2 frame window.
class ToyTask {
 public:
  static constexpr std::size_t kRadius = 2;

  ToyTask(std::uint64_t seed, std::size_t input_dim, std::size_t num_classes, std::size_t seq_len);

  std::size_t input_dim() const { return input_dim_; }
  std::size_t num_classes() const { return num_classes_; }
  std::size_t seq_len() const { return seq_len_; }
  const std::vector<double>& teacher() const { return teacher_; }  // [C x input_dim]
  const std::vector<double>& kernel() const { return kernel_; }    // 2 * kRadius + 1 taps

  /// Batch number `index` of the named split ("train", "eval", ...).
  Batch generate_batch(const std::string& split, std::uint64_t index, std::size_t batch) const;

  std::vector<int> label(std::span<const double> features, std::size_t batch) const;

 private:
  std::size_t input_dim_, num_classes_, seq_len_;
  RandomStream data_;
  std::vector<double> teacher_;
  std::vector<double> kernel_;
};

/// Mean frame cross-entropy plus gamma * sum of squares over weights and
/// beta' (biases and norm gains exempt).
struct LossParts {
  Tensor total;
  Tensor ce;
  Tensor logits;
};
LossParts total_loss(ConformerModel& model, const Batch& batch, const MaskMode& mode);

double l2_penalty_value(const ConformerModel& model);

double frame_accuracy(const Tensor& logits, std::span<const int> labels);

struct StepMetrics {
  std::int64_t step = 0;
  double ce = 0.0;
  double frame_acc = 0.0;
  double c_t = 0.0;
  double lr = 0.0;
  double survival_rate_overall = 0.0;
};

/// One training update on `batch` at step opt.step() + 1. Throws
/// NumericalError if the loss is not finite.
StepMetrics train_step(ConformerModel& model, AdamOptimizer& opt, const Batch& batch);

/// Units with beta >= c_inf over all sites, evaluated at `step`.
double overall_survival(const ConformerModel& model, std::int64_t step);

struct EvalMetrics {
  double frame_accuracy = 0.0;
  double ce = 0.0;
};

/// Eval-mode metrics over `n_batches` held-out batches, masks taken at `step`.
EvalMetrics evaluate(ConformerModel& model, const ToyTask& task, std::size_t n_batches,
                     std::size_t batch_size, std::int64_t step);

}  // namespace adlprune
