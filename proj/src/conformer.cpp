#include "adlprune/conformer.hpp"

#include <cmath>

#include <fmt/format.h>

#include "adlprune/ops.hpp"

namespace adlprune {

namespace {

Tensor glorot(const RandomStream& init, const std::string& name, Shape shape) {
  const std::size_t fan_out = shape[0];
  const std::size_t fan_in = shape[1];
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  StreamCursor cur(init.child(name), 0);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = (2.0 * cur.uniform() - 1.0) * limit;
  return Tensor::from(std::move(shape), std::move(v), true);
}

Tensor zeros(std::size_t n) { return Tensor::zeros({n}, true); }

LayerNormParams make_norm(std::size_t d) {
  return {Tensor::full({d}, 1.0, true), Tensor::zeros({d}, true)};
}

[[noreturn]] void bad_shape(const std::string& what) {
  throw ShapeError("inconsistent model: " + what);
}

}  // namespace

void ConformerConfig::validate() const {
  if (num_blocks < 1 || model_dim < 1 || num_heads < 1 || ffn_hidden < 1 ||
      conv_kernel < 1 || input_dim < 1 || num_classes < 1) {
    throw ConfigError("model: all dimensions must be >= 1");
  }
  if (model_dim % num_heads != 0) {
    throw ConfigError(fmt::format("model: model_dim {} not divisible by num_heads {}",
                                  model_dim, num_heads));
  }
  if (conv_kernel % 2 == 0) {
    throw ConfigError(fmt::format("model: conv_kernel {} must be odd", conv_kernel));
  }
  adl.validate();
}

std::string site_name(std::size_t block, const std::string& site) {
  return fmt::format("block{}.{}", block, site);
}

const std::vector<double>* ForwardContext::forced(const std::string& site) const {
  if (overrides == nullptr) return nullptr;
  auto it = overrides->find(site);
  return it == overrides->end() ? nullptr : &it->second;
}

Tensor LayerNormParams::forward(const Tensor& x) const {
  return ops::layernorm(x, gain, bias);
}

Tensor FfnBlock::forward(const Tensor& x, const ForwardContext& ctx) {
  Tensor h = ops::swish(ops::linear(x, w1, b1));
  if (adl) {
    auto draw = adl->draw(ctx.mode, x.dim(0), ctx.forced(adl->name()));
    h = adl->apply(h, draw);
  }
  return ops::linear(h, w2, b2);
}

Tensor MhsaBlock::forward(const Tensor& x, const ForwardContext& ctx) {
  const std::size_t batch = x.dim(0);
  Tensor acc;
  for (auto& head : heads) {
    Tensor q = ops::linear(x, head.wq, head.bq);
    Tensor k = ops::linear(x, head.wk, head.bk);
    Tensor v = ops::linear(x, head.wv, head.bv);
    if (head.adl) {
      auto draw = head.adl->draw(ctx.mode, batch, ctx.forced(head.adl->name()));
      q = head.adl->apply(q, draw);
      v = head.adl->apply(v, draw);
    }
    Tensor scores = ops::batched_matmul(q, k, /*transpose_b=*/true);
    Tensor probs = ops::softmax_lastdim(scores, score_scale);
    Tensor context = ops::batched_matmul(probs, v);
    Tensor out = ops::linear(context, head.wo, Tensor());
    acc = acc.defined() ? ops::add(acc, out) : out;
  }
  return ops::add_bias(acc, bo);
}

Tensor LconvBlock::forward(const Tensor& x, const ForwardContext& ctx) {
  Tensor z = ops::mul(ops::linear(x, wi, bi), ops::sigmoid(ops::linear(x, wg, bg)));
  if (adl) {
    auto draw = adl->draw(ctx.mode, x.dim(0), ctx.forced(adl->name()));
    z = adl->apply(z, draw);
  }
  Tensor zc = ops::swish(ops::depthwise_conv1d(z, kernel));
  return ops::linear(zc, wo, bo);
}

Tensor ConformerBlock::forward(const Tensor& x, const ForwardContext& ctx) {
  Tensor h = ops::add(x, ops::scale(ffn1.forward(ln_ffn1.forward(x), ctx), 0.5));
  h = ops::add(h, mhsa.forward(ln_mhsa.forward(h), ctx));
  h = ops::add(h, lconv.forward(ln_lconv.forward(h), ctx));
  h = ops::add(h, ops::scale(ffn2.forward(ln_ffn2.forward(h), ctx), 0.5));
  return ln_out.forward(h);
}

ConformerModel::ConformerModel(const ConformerConfig& config, std::uint64_t seed)
    : config_(config), seed_(seed) {
  config_.validate();
  const std::size_t d = config_.model_dim;
  const std::size_t dh = config_.head_dim();
  const std::size_t f = config_.ffn_hidden;
  const std::size_t k = config_.conv_kernel;
  const RandomStream init(seed, "init");
  const RandomStream masks(seed, "mask");

  auto site = [&](const std::string& name, std::size_t units) {
    return AdlSite(name, units, config_.adl, masks.child(name));
  };

  input_w = glorot(init, "input.w", {d, config_.input_dim});
  input_b = zeros(d);
  for (std::size_t i = 0; i < config_.num_blocks; ++i) {
    ConformerBlock blk;
    blk.ln_ffn1 = make_norm(d);
    blk.ln_mhsa = make_norm(d);
    blk.ln_lconv = make_norm(d);
    blk.ln_ffn2 = make_norm(d);
    blk.ln_out = make_norm(d);

    auto make_ffn = [&](const std::string& tag) {
      const std::string base = site_name(i, tag);
      FfnBlock ffn;
      ffn.w1 = glorot(init, base + ".w1", {f, d});
      ffn.b1 = zeros(f);
      ffn.w2 = glorot(init, base + ".w2", {d, f});
      ffn.b2 = zeros(d);
      ffn.adl.emplace(site(base, f));
      return ffn;
    };
    blk.ffn1 = make_ffn("ffn1");
    blk.ffn2 = make_ffn("ffn2");

    blk.mhsa.score_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    blk.mhsa.bo = zeros(d);
    for (std::size_t h = 0; h < config_.num_heads; ++h) {
      const std::string base = site_name(i, fmt::format("mhsa.head{}", h));
      AttentionHead head;
      head.wq = glorot(init, base + ".wq", {dh, d});
      head.bq = zeros(dh);
      head.wk = glorot(init, base + ".wk", {dh, d});
      head.bk = zeros(dh);
      head.wv = glorot(init, base + ".wv", {dh, d});
      head.bv = zeros(dh);
      head.wo = glorot(init, base + ".wo", {d, dh});
      head.adl.emplace(site(base, dh));
      blk.mhsa.heads.push_back(std::move(head));
    }

    const std::string lbase = site_name(i, "lconv");
    blk.lconv.wi = glorot(init, lbase + ".wi", {d, d});
    blk.lconv.bi = zeros(d);
    blk.lconv.wg = glorot(init, lbase + ".wg", {d, d});
    blk.lconv.bg = zeros(d);
    blk.lconv.kernel = glorot(init, lbase + ".kernel", {d, k});
    blk.lconv.wo = glorot(init, lbase + ".wo", {d, d});
    blk.lconv.bo = zeros(d);
    blk.lconv.adl.emplace(site(lbase, d));

    blocks_.push_back(std::move(blk));
  }
  head_w = glorot(init, "head.w", {config_.num_classes, d});
  head_b = zeros(config_.num_classes);
}

Tensor ConformerModel::forward(const Tensor& features, const ForwardContext& ctx) {
  if (features.rank() != 3 || features.dim(2) != config_.input_dim) {
    throw ShapeError(fmt::format("model: expected features [B, T, {}], got {}",
                                 config_.input_dim, shape_str(features.shape())));
  }
  Tensor h = ops::linear(features, input_w, input_b);
  for (auto& blk : blocks_) h = blk.forward(h, ctx);
  return ops::linear(h, head_w, head_b);
}

std::vector<NamedParam> ConformerModel::parameters() {
  std::vector<NamedParam> out;
  auto add = [&](std::string name, Tensor& t, ParamKind kind) {
    out.push_back({std::move(name), &t, kind});
  };
  auto add_norm = [&](const std::string& base, LayerNormParams& ln) {
    add(base + ".gain", ln.gain, ParamKind::kNormGain);
    add(base + ".bias", ln.bias, ParamKind::kBias);
  };
  auto add_site = [&](std::optional<AdlSite>& s) {
    if (s) add(s->name() + ".adl.raw", s->raw(), ParamKind::kAdlRaw);
  };

  add("input.w", input_w, ParamKind::kWeight);
  add("input.b", input_b, ParamKind::kBias);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    auto& blk = blocks_[i];
    const auto b = [&](const std::string& s) { return site_name(i, s); };
    auto add_ffn = [&](const std::string& base, FfnBlock& ffn) {
      add(base + ".w1", ffn.w1, ParamKind::kWeight);
      add(base + ".b1", ffn.b1, ParamKind::kBias);
      add(base + ".w2", ffn.w2, ParamKind::kWeight);
      add(base + ".b2", ffn.b2, ParamKind::kBias);
      add_site(ffn.adl);
    };
    add_norm(b("ln_ffn1"), blk.ln_ffn1);
    add_ffn(b("ffn1"), blk.ffn1);
    add_norm(b("ln_mhsa"), blk.ln_mhsa);
    for (std::size_t h = 0; h < blk.mhsa.heads.size(); ++h) {
      auto& head = blk.mhsa.heads[h];
      const std::string base = b(fmt::format("mhsa.head{}", h));
      add(base + ".wq", head.wq, ParamKind::kWeight);
      add(base + ".bq", head.bq, ParamKind::kBias);
      add(base + ".wk", head.wk, ParamKind::kWeight);
      add(base + ".bk", head.bk, ParamKind::kBias);
      add(base + ".wv", head.wv, ParamKind::kWeight);
      add(base + ".bv", head.bv, ParamKind::kBias);
      add(base + ".wo", head.wo, ParamKind::kWeight);
      add_site(head.adl);
    }
    add(b("mhsa.bo"), blk.mhsa.bo, ParamKind::kBias);
    add_norm(b("ln_lconv"), blk.ln_lconv);
    const std::string lb = b("lconv");
    add(lb + ".wi", blk.lconv.wi, ParamKind::kWeight);
    add(lb + ".bi", blk.lconv.bi, ParamKind::kBias);
    add(lb + ".wg", blk.lconv.wg, ParamKind::kWeight);
    add(lb + ".bg", blk.lconv.bg, ParamKind::kBias);
    add(lb + ".kernel", blk.lconv.kernel, ParamKind::kWeight);
    add(lb + ".wo", blk.lconv.wo, ParamKind::kWeight);
    add(lb + ".bo", blk.lconv.bo, ParamKind::kBias);
    add_site(blk.lconv.adl);
    add_norm(b("ln_ffn2"), blk.ln_ffn2);
    add_ffn(b("ffn2"), blk.ffn2);
    add_norm(b("ln_out"), blk.ln_out);
  }
  add("head.w", head_w, ParamKind::kWeight);
  add("head.b", head_b, ParamKind::kBias);
  return out;
}

std::vector<NamedParam> ConformerModel::parameters() const {
  return const_cast<ConformerModel*>(this)->parameters();
}

std::vector<AdlSite*> ConformerModel::adl_sites() {
  std::vector<AdlSite*> out;
  for (auto& blk : blocks_) {
    if (blk.ffn1.adl) out.push_back(&*blk.ffn1.adl);
    for (auto& head : blk.mhsa.heads) {
      if (head.adl) out.push_back(&*head.adl);
    }
    if (blk.lconv.adl) out.push_back(&*blk.lconv.adl);
    if (blk.ffn2.adl) out.push_back(&*blk.ffn2.adl);
  }
  return out;
}

std::vector<const AdlSite*> ConformerModel::adl_sites() const {
  auto sites = const_cast<ConformerModel*>(this)->adl_sites();
  return {sites.begin(), sites.end()};
}

ConformerModel ConformerModel::deep_copy() const {
  ConformerModel copy = *this;
  for (auto& p : copy.parameters()) {
    const bool rg = p.tensor->requires_grad();
    *p.tensor = p.tensor->detach();
    p.tensor->set_requires_grad(rg);
  }
  return copy;
}

void ConformerModel::strip_adl_sites() {
  for (auto& blk : blocks_) {
    blk.ffn1.adl.reset();
    blk.ffn2.adl.reset();
    for (auto& head : blk.mhsa.heads) head.adl.reset();
    blk.lconv.adl.reset();
  }
  pruned_ = true;
}

void ConformerModel::validate_shapes() const {
  const std::size_t d = config_.model_dim;
  const std::size_t k = config_.conv_kernel;
  auto expect = [](const Tensor& t, const Shape& s, const std::string& what) {
    if (t.shape() != s) {
      bad_shape(fmt::format("{} has shape {}, expected {}", what, shape_str(t.shape()),
                            shape_str(s)));
    }
  };
  expect(input_w, {d, config_.input_dim}, "input.w");
  expect(input_b, {d}, "input.b");
  expect(head_w, {config_.num_classes, d}, "head.w");
  expect(head_b, {config_.num_classes}, "head.b");
  if (blocks_.size() != config_.num_blocks) bad_shape("block count");
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const auto& blk = blocks_[i];
    for (const auto* ln : {&blk.ln_ffn1, &blk.ln_mhsa, &blk.ln_lconv, &blk.ln_ffn2, &blk.ln_out}) {
      expect(ln->gain, {d}, site_name(i, "layernorm gain"));
      expect(ln->bias, {d}, site_name(i, "layernorm bias"));
    }
    for (const auto* ffn : {&blk.ffn1, &blk.ffn2}) {
      if (ffn->w1.rank() != 2) bad_shape(site_name(i, "ffn w1 rank"));
      const std::size_t f = ffn->w1.dim(0);
      expect(ffn->w1, {f, d}, site_name(i, "ffn w1"));
      expect(ffn->b1, {f}, site_name(i, "ffn b1"));
      expect(ffn->w2, {d, f}, site_name(i, "ffn w2"));
      expect(ffn->b2, {d}, site_name(i, "ffn b2"));
      if (ffn->adl && ffn->adl->units() != f) bad_shape(site_name(i, "ffn adl units"));
    }
    if (blk.mhsa.heads.size() != config_.num_heads) bad_shape(site_name(i, "head count"));
    for (const auto& head : blk.mhsa.heads) {
      if (head.wq.rank() != 2) bad_shape(site_name(i, "wq rank"));
      const std::size_t u = head.wq.dim(0);
      for (const auto* w : {&head.wq, &head.wk, &head.wv}) expect(*w, {u, d}, site_name(i, "qkv weight"));
      for (const auto* b : {&head.bq, &head.bk, &head.bv}) expect(*b, {u}, site_name(i, "qkv bias"));
      expect(head.wo, {d, u}, site_name(i, "head wo"));
      if (head.adl && head.adl->units() != u) bad_shape(site_name(i, "head adl units"));
    }
    expect(blk.mhsa.bo, {d}, site_name(i, "mhsa bo"));
    const auto& lc = blk.lconv;
    if (lc.wi.rank() != 2) bad_shape(site_name(i, "lconv wi rank"));
    const std::size_t u = lc.wi.dim(0);
    expect(lc.wi, {u, d}, site_name(i, "lconv wi"));
    expect(lc.wg, {u, d}, site_name(i, "lconv wg"));
    expect(lc.bi, {u}, site_name(i, "lconv bi"));
    expect(lc.bg, {u}, site_name(i, "lconv bg"));
    expect(lc.kernel, {u, k}, site_name(i, "lconv kernel"));
    expect(lc.wo, {d, u}, site_name(i, "lconv wo"));
    expect(lc.bo, {d}, site_name(i, "lconv bo"));
    if (lc.adl && lc.adl->units() != u) bad_shape(site_name(i, "lconv adl units"));
  }
}

}  // namespace adlprune
