#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "adlprune/adl.hpp"
#include "adlprune/tensor.hpp"

namespace adlprune {

struct ConformerConfig {
  std::size_t num_blocks = 2;
  std::size_t model_dim = 32;
  std::size_t num_heads = 4;
  std::size_t ffn_hidden = 64;
  std::size_t conv_kernel = 7;
  std::size_t input_dim = 16;
  std::size_t num_classes = 8;
  AdlHyper adl;

  void validate() const;
  std::size_t head_dim() const { return model_dim / num_heads; }
};

enum class ParamKind {
  kWeight,  // matrices and conv kernels; L2-regularized
  kBias,
  kNormGain,
  kAdlRaw,  // beta' of an ADL site; L2-regularized
};

/// Site-name -> mask override, applied in any mode. Used for the prunability
/// checks and for "all ones" comparisons.
using MaskOverrides = std::map<std::string, std::vector<double>>;

struct ForwardContext {
  MaskMode mode;
  const MaskOverrides* overrides = nullptr;

  const std::vector<double>* forced(const std::string& site) const;
};

struct LayerNormParams {
  Tensor gain;
  Tensor bias;
  Tensor forward(const Tensor& x) const;
};

/// y = b2 + W2 (m * swish(b1 + W1 x)); W1 is [F x D] so hidden unit d owns
/// row d of W1, entry d of b1 and column d of W2.
struct FfnBlock {
  Tensor w1, b1, w2, b2;
  std::optional<AdlSite> adl;

  std::size_t hidden() const { return w1.dim(0); }
  Tensor forward(const Tensor& x, const ForwardContext& ctx);
};

struct AttentionHead {
  Tensor wq, bq, wk, bk, wv, bv;  // [Dh x D], [Dh]
  Tensor wo;                      // [D x Dh]
  std::optional<AdlSite> adl;

  std::size_t units() const { return wq.dim(0); }
};

/// Multi-head self-attention with one mask per head, shared by the query
/// and value paths. No time masking.
struct MhsaBlock {
  std::vector<AttentionHead> heads;
  Tensor bo;
  double score_scale = 1.0;  // 1/sqrt(original head dim); survives pruning

  Tensor forward(const Tensor& x, const ForwardContext& ctx);
};

/// z = (bI + WI x) * sigmoid(bG + WG x) * m; z' = swish(depthwise(z));
/// y = bO + WO z'.
struct LconvBlock {
  Tensor wi, bi, wg, bg;
  Tensor kernel;  // [units x k]
  Tensor wo, bo;
  std::optional<AdlSite> adl;

  std::size_t units() const { return wi.dim(0); }
  Tensor forward(const Tensor& x, const ForwardContext& ctx);
};

struct ConformerBlock {
  LayerNormParams ln_ffn1, ln_mhsa, ln_lconv, ln_ffn2, ln_out;
  FfnBlock ffn1;
  MhsaBlock mhsa;
  LconvBlock lconv;
  FfnBlock ffn2;

  Tensor forward(const Tensor& x, const ForwardContext& ctx);
};

struct NamedParam {
  std::string name;
  Tensor* tensor;
  ParamKind kind;
};

class ConformerModel {
 public:
  ConformerModel(const ConformerConfig& config, std::uint64_t seed);

  const ConformerConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }
  // True once ADL sites were removed by structural pruning.
  bool pruned() const { return pruned_; }

  // features [B, T, input_dim] -> logits [B, T, num_classes].
  Tensor forward(const Tensor& features, const ForwardContext& ctx);

  std::vector<ConformerBlock>& blocks() { return blocks_; }
  const std::vector<ConformerBlock>& blocks() const { return blocks_; }

  // Stable order; names are the checkpoint keys.
  std::vector<NamedParam> parameters();
  std::vector<NamedParam> parameters() const;  // read-only use
  std::vector<AdlSite*> adl_sites();
  std::vector<const AdlSite*> adl_sites() const;

  /// Copies share tensor storage; this one does not.
  ConformerModel deep_copy() const;

  /// Drops every ADL site (the model then runs mask-free).
  void strip_adl_sites();

  /// Checks the per-site dimensions agree across the tensors that share them.
  void validate_shapes() const;

  Tensor input_w, input_b;
  Tensor head_w, head_b;

 private:
  ConformerConfig config_;
  std::uint64_t seed_;
  bool pruned_ = false;
  std::vector<ConformerBlock> blocks_;
};

// Canonical site names, e.g. "block0.ffn1", "block1.mhsa.head3".
std::string site_name(std::size_t block, const std::string& site);

}  // namespace adlprune
