#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "adlprune/rng.hpp"
#include "adlprune/tensor.hpp"

// Adaptive dropout layers: unit-wise retention probabilities sigmoid(beta_d),
// trained through a Gumbel-Sigmoid sample with a sigmoid straight-through
// backward, and pulled toward a scheduled target by plain L2 on the raw
// parameter.
namespace adlprune {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Piece-wise linear target c(t): c0 at t = 0, linear down to c_inf at
/// t = period, constant afterwards.
struct Scheduler {
  double c0 = 10.0;
  double c_inf = -2.0;
  std::int64_t period = 100000;

  void validate() const;
  double at(std::int64_t step) const;
};

double schedule_c(const Scheduler& s, std::int64_t step);

struct AdlHyper {
  double alpha = 1e-7;  // weight of the uncentered L2 on beta
  double gamma = 1e-5;  // global L2 weight, also applied to the raw parameter
  Scheduler scheduler;

  void validate() const;
  // sqrt(gamma / alpha): maps the raw parameter onto beta.
  double scale() const;
};

enum class MaskKind {
  kTrain,      // hard Gumbel-Sigmoid sample, sigmoid straight-through backward
  kSurrogate,  // forward uses sigmoid(beta + eps) itself; exact gradients
  kEval,       // deterministic: keep iff beta >= threshold
  kFixed,      // caller-provided mask, no beta gradient
};

struct MaskMode {
  MaskKind kind = MaskKind::kEval;
  std::int64_t step = 0;
  std::optional<double> threshold;  // eval only; defaults to c_inf

  static MaskMode train(std::int64_t step) { return {MaskKind::kTrain, step, {}}; }
  static MaskMode surrogate(std::int64_t step) { return {MaskKind::kSurrogate, step, {}}; }
  static MaskMode eval(std::int64_t step, std::optional<double> threshold = {}) {
    return {MaskKind::kEval, step, threshold};
  }
};

/// One draw of a site's mask for a batch. `values` is [batch x units]; for
/// train it holds H(beta + eps), for surrogate sigmoid(beta + eps).
struct MaskSample {
  MaskKind kind = MaskKind::kEval;
  std::size_t batch = 0;
  std::size_t units = 0;
  std::vector<double> noise;  // logistic eps, [batch x units]; empty if eps-free
  std::vector<double> values;
};

// Logistic(0, 1) noise via the inverse CDF, u clamped away from {0, 1}.
inline constexpr double kUniformClamp = 1e-12;
double logistic_from_uniform(double u);

/// Draws a mask for `beta` (values only, no graph). In train/surrogate mode
/// eps is indexed by (step, b, d) on `stream`, so repeated calls at the same
/// step reproduce the same sample.
MaskSample sample_mask(std::span<const double> beta, const MaskMode& mode,
                       double default_threshold, const RandomStream& stream,
                       std::size_t batch);

MaskSample fixed_mask(std::span<const double> mask, std::size_t batch);

/// y = m * x with the mask broadcast over time. x is [B, T, D] or [B, D].
/// Train: dL/dx = m * g; dL/dbeta_d = sum_{b,t} g * x * s(1 - s), with
/// s = sigmoid(beta_d + eps_{b,d}). Surrogate uses s in the forward as well.
/// `beta` is only linked into the graph for train/surrogate samples.
Tensor adl_apply(const Tensor& x, const Tensor& beta, const MaskSample& mask);

struct SurvivalStats {
  std::size_t surviving = 0;
  std::size_t total = 0;
  double rate = 0.0;
};

SurvivalStats survival_stats(std::span<const double> beta, double threshold);

class AdlSite {
 public:
  AdlSite(std::string name, std::size_t units, AdlHyper hyper,
          RandomStream stream);

  const std::string& name() const { return name_; }
  std::size_t units() const { return raw_.numel(); }
  const AdlHyper& hyper() const { return hyper_; }
  const RandomStream& stream() const { return stream_; }

  Tensor& raw() { return raw_; }
  const Tensor& raw() const { return raw_; }

  // beta = scale * raw + c(t); differentiable wrt raw.
  Tensor effective_beta(std::int64_t step) const;
  std::vector<double> beta_values(std::int64_t step) const;

  struct Draw {
    Tensor beta;
    MaskSample sample;
  };
  // Samples once per forward call; the same draw may be applied to several
  // tensors (query and value paths of an attention head).
  Draw draw(const MaskMode& mode, std::size_t batch,
            const std::vector<double>* forced = nullptr);
  Tensor apply(const Tensor& x, const Draw& draw) const;

  const std::optional<Tensor>& last_mask() const { return last_mask_; }

  SurvivalStats survival(std::int64_t step, std::optional<double> threshold = {}) const;

 private:
  std::string name_;
  Tensor raw_;
  AdlHyper hyper_;
  RandomStream stream_;
  std::optional<Tensor> last_mask_;
};

/// gamma * sum over sites of ||raw||^2. Equals uncentered_l2 by the
/// reparametrization beta = sqrt(gamma/alpha) raw + c(t).
Tensor regularization_loss(std::span<const AdlSite* const> sites);

/// alpha * sum_d (beta_d - c(t))^2, computed through effective_beta.
Tensor uncentered_l2(std::span<const AdlSite* const> sites, std::int64_t step);

}  // namespace adlprune
