#include "adlprune/adl.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "adlprune/ops.hpp"

namespace adlprune {

void Scheduler::validate() const {
  if (!std::isfinite(c0) || !std::isfinite(c_inf)) {
    throw ConfigError("scheduler: c0 and c_inf must be finite");
  }
  if (!(c_inf < c0)) {
    throw ConfigError(fmt::format("scheduler: need c_inf < c0, got c_inf={} c0={}", c_inf, c0));
  }
  if (period < 1) throw ConfigError(fmt::format("scheduler: K must be >= 1, got {}", period));
}

double Scheduler::at(std::int64_t step) const {
  if (step >= period) return c_inf;
  const double frac = static_cast<double>(step) / static_cast<double>(period);
  return std::max(frac * c_inf + (1.0 - frac) * c0, c_inf);
}

double schedule_c(const Scheduler& s, std::int64_t step) { return s.at(step); }

void AdlHyper::validate() const {
  if (!(alpha > 0.0) || !(gamma > 0.0) || !std::isfinite(alpha) || !std::isfinite(gamma)) {
    throw ConfigError(fmt::format("adl: alpha and gamma must be finite and > 0 (alpha={}, gamma={})",
                                  alpha, gamma));
  }
  const double s = std::sqrt(gamma / alpha);
  if (!std::isfinite(s) || !(s > 0.0)) {
    throw ConfigError(fmt::format("adl: sqrt(gamma/alpha) = {} is not a usable scale", s));
  }
  scheduler.validate();
}

double AdlHyper::scale() const { return std::sqrt(gamma / alpha); }

double logistic_from_uniform(double u) {
  u = std::clamp(u, kUniformClamp, 1.0 - kUniformClamp);
  return std::log(u) - std::log1p(-u);
}

MaskSample sample_mask(std::span<const double> beta, const MaskMode& mode,
                       double default_threshold, const RandomStream& stream,
                       std::size_t batch) {
  MaskSample out;
  out.kind = mode.kind;
  out.batch = batch;
  out.units = beta.size();
  const std::size_t d_count = beta.size();
  out.values.resize(batch * d_count);
  switch (mode.kind) {
    case MaskKind::kTrain:
    case MaskKind::kSurrogate: {
      out.noise.resize(batch * d_count);
      const auto step = static_cast<std::uint64_t>(mode.step);
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t d = 0; d < d_count; ++d) {
          const std::size_t i = b * d_count + d;
          const double eps = logistic_from_uniform(stream.uniform(step, i));
          out.noise[i] = eps;
          const double z = beta[d] + eps;
          out.values[i] = mode.kind == MaskKind::kTrain ? (z > 0.0 ? 1.0 : 0.0)
                                                        : ops::sigmoid(z);
        }
      }
      break;
    }
    case MaskKind::kEval: {
      const double thr = mode.threshold.value_or(default_threshold);
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t d = 0; d < d_count; ++d) {
          // Strict `<` prunes, so a unit sitting exactly on the threshold stays.
          out.values[b * d_count + d] = beta[d] < thr ? 0.0 : 1.0;
        }
      }
      break;
    }
    case MaskKind::kFixed:
      throw std::invalid_argument("sample_mask: fixed masks come from fixed_mask()");
  }
  return out;
}

MaskSample fixed_mask(std::span<const double> mask, std::size_t batch) {
  MaskSample out;
  out.kind = MaskKind::kFixed;
  out.batch = batch;
  out.units = mask.size();
  out.values.reserve(batch * mask.size());
  for (std::size_t b = 0; b < batch; ++b) {
    out.values.insert(out.values.end(), mask.begin(), mask.end());
  }
  return out;
}

Tensor adl_apply(const Tensor& x, const Tensor& beta, const MaskSample& mask) {
  if (x.rank() < 2) {
    throw ShapeError(fmt::format("adl_apply: expected [B,T,D] or [B,D], got {}",
                                 shape_str(x.shape())));
  }
  const std::size_t batch = x.dim(0);
  const std::size_t units = x.shape().back();
  if (mask.units != units || mask.batch != batch) {
    throw ShapeError(fmt::format("adl_apply: mask [{}x{}] does not match input {}",
                                 mask.batch, mask.units, shape_str(x.shape())));
  }
  const bool stochastic = mask.kind == MaskKind::kTrain || mask.kind == MaskKind::kSurrogate;
  if (stochastic && (!beta.defined() || beta.numel() != units)) {
    throw ShapeError("adl_apply: beta must hold one value per unit");
  }
  const std::size_t frames = units == 0 || batch == 0 ? 0 : x.numel() / (batch * units);

  auto xv = x.data();
  std::vector<double> y(x.numel());
  for (std::size_t b = 0; b < batch; ++b) {
    const double* m = mask.values.data() + b * units;
    for (std::size_t t = 0; t < frames; ++t) {
      const std::size_t off = (b * frames + t) * units;
      for (std::size_t d = 0; d < units; ++d) y[off + d] = m[d] * xv[off + d];
    }
  }

  std::vector<Tensor> inputs{x};
  if (stochastic) inputs.push_back(beta);
  return Tensor::record(
      x.shape(), std::move(y), std::move(inputs),
      [batch, units, frames, stochastic, values = mask.values,
       noise = mask.noise](detail::Node& self) {
        const auto& g = self.grad;
        detail::Node* xn = self.inputs[0].get();
        if (xn->requires_grad) {
          auto& gx = xn->grad_buffer();
          for (std::size_t b = 0; b < batch; ++b) {
            const double* m = values.data() + b * units;
            for (std::size_t t = 0; t < frames; ++t) {
              const std::size_t off = (b * frames + t) * units;
              for (std::size_t d = 0; d < units; ++d) gx[off + d] += m[d] * g[off + d];
            }
          }
        }
        if (!stochastic) return;
        detail::Node* bn = self.inputs[1].get();
        if (!bn->requires_grad) return;
        auto& gbeta = bn->grad_buffer();
        const auto& xd = xn->data;
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t d = 0; d < units; ++d) {
            const double s = ops::sigmoid(bn->data[d] + noise[b * units + d]);
            double acc = 0.0;
            for (std::size_t t = 0; t < frames; ++t) {
              const std::size_t i = (b * frames + t) * units + d;
              acc += g[i] * xd[i];
            }
            gbeta[d] += acc * s * (1.0 - s);
          }
        }
      },
      "adl_apply");
}

SurvivalStats survival_stats(std::span<const double> beta, double threshold) {
  SurvivalStats s;
  s.total = beta.size();
  s.surviving = static_cast<std::size_t>(
      std::count_if(beta.begin(), beta.end(), [&](double b) { return !(b < threshold); }));
  s.rate = s.total == 0 ? 0.0
                        : static_cast<double>(s.surviving) / static_cast<double>(s.total);
  return s;
}

AdlSite::AdlSite(std::string name, std::size_t units, AdlHyper hyper,
                 RandomStream stream)
    : name_(std::move(name)),
      raw_(Tensor::zeros({units}, true)),
      hyper_(hyper),
      stream_(stream) {
  hyper_.validate();
}

Tensor AdlSite::effective_beta(std::int64_t step) const {
  return ops::add_scalar(ops::scale(raw_, hyper_.scale()), hyper_.scheduler.at(step));
}

std::vector<double> AdlSite::beta_values(std::int64_t step) const {
  const double k = hyper_.scale();
  const double c = hyper_.scheduler.at(step);
  std::vector<double> out(units());
  auto r = raw_.data();
  for (std::size_t d = 0; d < out.size(); ++d) out[d] = k * r[d] + c;
  return out;
}

AdlSite::Draw AdlSite::draw(const MaskMode& mode, std::size_t batch,
                            const std::vector<double>* forced) {
  Draw out;
  if (forced != nullptr) {
    if (forced->size() != units()) {
      throw ShapeError(fmt::format("site {}: forced mask has {} entries, expected {}",
                                   name_, forced->size(), units()));
    }
    out.sample = fixed_mask(*forced, batch);
  } else {
    const bool stochastic = mode.kind == MaskKind::kTrain || mode.kind == MaskKind::kSurrogate;
    if (stochastic) out.beta = effective_beta(mode.step);
    const auto beta = beta_values(mode.step);
    out.sample = sample_mask(beta, mode, hyper_.scheduler.c_inf, stream_, batch);
  }
  last_mask_ = Tensor::from({batch, units()}, out.sample.values);
  return out;
}

Tensor AdlSite::apply(const Tensor& x, const Draw& d) const {
  return adl_apply(x, d.beta, d.sample);
}

SurvivalStats AdlSite::survival(std::int64_t step, std::optional<double> threshold) const {
  return survival_stats(beta_values(step), threshold.value_or(hyper_.scheduler.c_inf));
}

Tensor regularization_loss(std::span<const AdlSite* const> sites) {
  Tensor total = Tensor::scalar(0.0);
  for (const AdlSite* s : sites) {
    total = ops::add(total, ops::scale(ops::sum_squares(s->raw()), s->hyper().gamma));
  }
  return total;
}

Tensor uncentered_l2(std::span<const AdlSite* const> sites, std::int64_t step) {
  Tensor total = Tensor::scalar(0.0);
  for (const AdlSite* s : sites) {
    const Tensor centered =
        ops::add_scalar(s->effective_beta(step), -s->hyper().scheduler.at(step));
    total = ops::add(total, ops::scale(ops::sum_squares(centered), s->hyper().alpha));
  }
  return total;
}

}  // namespace adlprune
