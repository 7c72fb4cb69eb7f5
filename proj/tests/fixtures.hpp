#pragma once

// Shared test helpers: tiny model configs, random tensors, and an
// independent enumeration of the parameter slices owned by one unit.

#include <random>
#include <string>
#include <vector>

#include "adlprune/conformer.hpp"

namespace adlprune::testing {

inline ConformerConfig tiny_config() {
  ConformerConfig c;
  c.num_blocks = 1;
  c.model_dim = 8;
  c.num_heads = 2;
  c.ffn_hidden = 8;
  c.conv_kernel = 3;
  c.input_dim = 5;
  c.num_classes = 4;
  c.adl.alpha = 1e-7;
  c.adl.gamma = 1e-5;
  c.adl.scheduler = {10.0, -2.0, 100};
  return c;
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& gen, double scale = 1.0,
                            bool requires_grad = false) {
  std::uniform_real_distribution<double> dist(-scale, scale);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = dist(gen);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

/// Overwrites every parameter (biases, norms and raw betas included) with
/// random values so no slice is trivially zero.
inline void randomize(ConformerModel& model, std::mt19937_64& gen, double raw_scale = 0.5) {
  std::uniform_real_distribution<double> dist(-0.5, 0.5);
  for (auto& p : model.parameters()) {
    for (auto& v : p.tensor->mutable_data()) {
      switch (p.kind) {
        case ParamKind::kNormGain:
          v = 1.0 + dist(gen);
          break;
        case ParamKind::kAdlRaw:
          v = 2.0 * raw_scale * dist(gen);
          break;
        default:
          v = dist(gen);
      }
    }
  }
}

struct Slice {
  Tensor* tensor;
  bool column;  // false: row (or vector entry)
  std::size_t index;
};

/// Parameter slices that only unit `d` of a site touches. Written out by hand
/// from the block equations, separately from the pruner.
inline std::vector<Slice> unit_slices(ConformerBlock& blk, const std::string& site,
                                      std::size_t d) {
  if (site == "ffn1" || site == "ffn2") {
    FfnBlock& f = site == "ffn1" ? blk.ffn1 : blk.ffn2;
    return {{&f.w1, false, d}, {&f.b1, false, d}, {&f.w2, true, d}};
  }
  if (site.rfind("mhsa.head", 0) == 0) {
    AttentionHead& h = blk.mhsa.heads.at(std::stoul(site.substr(9)));
    return {{&h.wq, false, d}, {&h.bq, false, d}, {&h.wk, false, d}, {&h.bk, false, d},
            {&h.wv, false, d}, {&h.bv, false, d}, {&h.wo, true, d}};
  }
  if (site == "lconv") {
    LconvBlock& l = blk.lconv;
    return {{&l.wi, false, d}, {&l.wg, false, d}, {&l.bi, false, d}, {&l.bg, false, d},
            {&l.kernel, false, d}, {&l.wo, true, d}};
  }
  throw std::invalid_argument("unknown site " + site);
}

/// unit_slices minus the key bias. A key-bias entry shifts every score of a
/// query by the same amount, which the softmax cancels, so it never affects
/// the output whether or not the unit is masked.
inline std::vector<Slice> live_slices(ConformerBlock& blk, const std::string& site, std::size_t d) {
  std::vector<Slice> out;
  for (const auto& s : unit_slices(blk, site, d)) {
    bool key_bias = false;
    for (auto& h : blk.mhsa.heads) key_bias |= s.tensor == &h.bk;
    if (!key_bias) out.push_back(s);
  }
  return out;
}

inline void perturb(const Slice& s, std::mt19937_64& gen, double scale = 1.0) {
  std::normal_distribution<double> noise(0.0, scale);
  auto v = s.tensor->mutable_data();
  const auto& shape = s.tensor->shape();
  if (shape.size() == 1) {
    v[s.index] += noise(gen);
    return;
  }
  const std::size_t rows = shape[0], cols = shape[1];
  if (s.column) {
    for (std::size_t r = 0; r < rows; ++r) v[r * cols + s.index] += noise(gen);
  } else {
    for (std::size_t c = 0; c < cols; ++c) v[s.index * cols + c] += noise(gen);
  }
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace adlprune::testing
