#include "adlprune/pruner.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

namespace adlprune {

namespace {

Tensor take_rows(const Tensor& t, const std::vector<std::size_t>& keep) {
  const std::size_t cols = t.rank() == 1 ? 1 : t.dim(1);
  std::vector<double> out;
  out.reserve(keep.size() * cols);
  auto v = t.data();
  for (auto r : keep) out.insert(out.end(), v.begin() + r * cols, v.begin() + (r + 1) * cols);
  Shape shape = t.shape();
  shape[0] = keep.size();
  return Tensor::from(std::move(shape), std::move(out), true);
}

Tensor take_cols(const Tensor& t, const std::vector<std::size_t>& keep) {
  const std::size_t rows = t.dim(0), cols = t.dim(1);
  std::vector<double> out;
  out.reserve(rows * keep.size());
  auto v = t.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (auto c : keep) out.push_back(v[r * cols + c]);
  return Tensor::from({rows, keep.size()}, std::move(out), true);
}

const SiteDecision& lookup(const PruneDecision& decision, const AdlSite& site) {
  const SiteDecision* sd = decision.find(site.name());
  if (sd == nullptr) {
    throw std::invalid_argument(fmt::format("prune decision has no entry for site {}", site.name()));
  }
  if (sd->total != site.units()) {
    throw std::invalid_argument(fmt::format("prune decision for {} covers {} units, site has {}",
                                            site.name(), sd->total, site.units()));
  }
  for (std::size_t i = 0; i < sd->keep.size(); ++i) {
    if (sd->keep[i] >= sd->total || (i > 0 && sd->keep[i] <= sd->keep[i - 1])) {
      throw std::invalid_argument(
          fmt::format("prune decision for {} must hold sorted unique indices < {}", site.name(),
                      sd->total));
    }
  }
  return *sd;
}

// "block3.mhsa.head1" -> {3, "mhsa.head1"}
std::pair<std::size_t, std::string> split_site(const std::string& name) {
  const auto dot = name.find('.');
  if (name.rfind("block", 0) != 0 || dot == std::string::npos) {
    throw std::invalid_argument("malformed site name: " + name);
  }
  return {std::stoul(name.substr(5, dot - 5)), name.substr(dot + 1)};
}

}  // namespace

const SiteDecision* PruneDecision::find(const std::string& site) const {
  for (const auto& s : sites) {
    if (s.site == site) return &s;
  }
  return nullptr;
}

PruneDecision decide(const ConformerModel& model, std::int64_t step,
                     std::optional<double> threshold) {
  PruneDecision out;
  out.threshold = threshold.value_or(model.config().adl.scheduler.c_inf);
  for (const AdlSite* site : model.adl_sites()) {
    SiteDecision sd;
    sd.site = site->name();
    const auto beta = site->beta_values(step);
    sd.total = beta.size();
    for (std::size_t d = 0; d < beta.size(); ++d) {
      if (!(beta[d] < out.threshold)) sd.keep.push_back(d);
    }
    out.sites.push_back(std::move(sd));
  }
  return out;
}

ConformerModel prune_model(const ConformerModel& model, const PruneDecision& decision) {
  ConformerModel out = model.deep_copy();
  auto& src_blocks = model.blocks();
  auto& dst_blocks = out.blocks();
  for (std::size_t i = 0; i < src_blocks.size(); ++i) {
    const auto& src = src_blocks[i];
    auto& dst = dst_blocks[i];
    auto prune_ffn = [&](const FfnBlock& s, FfnBlock& d) {
      if (!s.adl) return;
      const auto& keep = lookup(decision, *s.adl).keep;
      d.w1 = take_rows(s.w1, keep);
      d.b1 = take_rows(s.b1, keep);
      d.w2 = take_cols(s.w2, keep);
    };
    prune_ffn(src.ffn1, dst.ffn1);
    prune_ffn(src.ffn2, dst.ffn2);
    for (std::size_t h = 0; h < src.mhsa.heads.size(); ++h) {
      const auto& s = src.mhsa.heads[h];
      auto& d = dst.mhsa.heads[h];
      if (!s.adl) continue;
      const auto& keep = lookup(decision, *s.adl).keep;
      d.wq = take_rows(s.wq, keep);
      d.bq = take_rows(s.bq, keep);
      d.wk = take_rows(s.wk, keep);
      d.bk = take_rows(s.bk, keep);
      d.wv = take_rows(s.wv, keep);
      d.bv = take_rows(s.bv, keep);
      d.wo = take_cols(s.wo, keep);
    }
    if (src.lconv.adl) {
      const auto& keep = lookup(decision, *src.lconv.adl).keep;
      const auto& s = src.lconv;
      auto& d = dst.lconv;
      d.wi = take_rows(s.wi, keep);
      d.bi = take_rows(s.bi, keep);
      d.wg = take_rows(s.wg, keep);
      d.bg = take_rows(s.bg, keep);
      d.kernel = take_rows(s.kernel, keep);
      d.wo = take_cols(s.wo, keep);
    }
  }
  out.strip_adl_sites();
  out.validate_shapes();
  return out;
}

ParamCount count_params(const ConformerModel& model) {
  ParamCount c;
  for (const auto& p : model.parameters()) {
    if (p.kind == ParamKind::kAdlRaw) continue;
    const std::size_t n = p.tensor->numel();
    c.total += n;
    const auto& name = p.name;
    if (name.rfind("input.", 0) == 0) {
      c.input_proj += n;
    } else if (name.rfind("head.", 0) == 0) {
      c.output_head += n;
    } else if (name.find(".ln_") != std::string::npos) {
      c.norm += n;
    } else if (name.find(".ffn") != std::string::npos) {
      c.ffn += n;
    } else if (name.find(".mhsa") != std::string::npos) {
      c.mhsa += n;
    } else if (name.find(".lconv") != std::string::npos) {
      c.lconv += n;
    } else {
      throw std::logic_error("count_params: unclassified parameter " + name);
    }
  }
  return c;
}

SiteKind site_kind(const std::string& site) {
  const auto rest = split_site(site).second;
  if (rest.rfind("ffn", 0) == 0) return SiteKind::kFfn;
  if (rest.rfind("mhsa.head", 0) == 0) return SiteKind::kMhsaHead;
  if (rest == "lconv") return SiteKind::kLconv;
  throw std::invalid_argument("unknown site kind: " + site);
}

std::size_t per_unit_cost(SiteKind kind, std::size_t model_dim, std::size_t conv_kernel) {
  switch (kind) {
    case SiteKind::kFfn:
      return 2 * model_dim + 1;
    case SiteKind::kMhsaHead:
      return 4 * model_dim + 3;
    case SiteKind::kLconv:
      return 2 * (model_dim + 1) + conv_kernel + model_dim;
  }
  return 0;
}

double verify_equivalence(ConformerModel& masked, ConformerModel& pruned, std::int64_t step,
                          double threshold, std::size_t n_batches, std::uint64_t seed,
                          std::size_t batch, std::size_t frames) {
  const std::size_t in_dim = masked.config().input_dim;
  if (pruned.config().input_dim != in_dim) {
    throw ShapeError("verify_equivalence: models disagree on input_dim");
  }
  const NoGradGuard no_grad;
  const RandomStream inputs(seed, "verify");
  const ForwardContext masked_ctx{MaskMode::eval(step, threshold)};
  const ForwardContext pruned_ctx{MaskMode::eval(step, threshold)};
  double worst = 0.0;
  for (std::size_t n = 0; n < n_batches; ++n) {
    StreamCursor cur(inputs, n);
    std::vector<double> x(batch * frames * in_dim);
    for (auto& v : x) v = cur.normal();
    const Tensor features = Tensor::from({batch, frames, in_dim}, std::move(x));
    const Tensor a = masked.forward(features, masked_ctx);
    const Tensor b = pruned.forward(features, pruned_ctx);
    if (a.shape() != b.shape()) {
      throw ShapeError(fmt::format("verify_equivalence: logits {} vs {}", shape_str(a.shape()),
                                   shape_str(b.shape())));
    }
    for (std::size_t i = 0; i < a.numel(); ++i) {
      worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
    }
  }
  return worst;
}

PruneReport make_report(const ConformerModel& model, std::int64_t step,
                        std::optional<double> threshold) {
  PruneReport r;
  r.threshold = threshold.value_or(model.config().adl.scheduler.c_inf);
  r.step = step;
  for (const AdlSite* site : model.adl_sites()) {
    const auto stats = site->survival(step, r.threshold);
    auto [block, tag] = split_site(site->name());
    r.rows.push_back({block, tag, stats.total, stats.surviving, stats.rate});
  }
  r.params_before = count_params(model).total;
  r.params_after = model.pruned() ? r.params_before
                                  : count_params(prune_model(model, decide(model, step, r.threshold))).total;
  r.reduction_ratio =
      r.params_before == 0 ? 0.0
                           : 1.0 - static_cast<double>(r.params_after) / static_cast<double>(r.params_before);
  return r;
}

std::string report_csv(const PruneReport& report) {
  std::string out = std::string(kReportCsvHeader) + "\n";
  for (const auto& row : report.rows) {
    out += fmt::format("{},{},{},{},{}\n", row.block, row.site, row.total, row.surviving, row.rate);
  }
  return out;
}

nlohmann::json report_json(const PruneReport& report) {
  nlohmann::json sites = nlohmann::json::array();
  for (const auto& row : report.rows) {
    sites.push_back({{"block", row.block},
                     {"site", row.site},
                     {"total", row.total},
                     {"surviving", row.surviving},
                     {"rate", row.rate}});
  }
  nlohmann::json j;
  // JSON has no infinities; an unbounded threshold is written as "inf"/"-inf".
  j["threshold"] = std::isfinite(report.threshold)
                       ? nlohmann::json(report.threshold)
                       : nlohmann::json(report.threshold > 0 ? "inf" : "-inf");
  j["step"] = report.step;
  j["sites"] = std::move(sites);
  j["params_before"] = report.params_before;
  j["params_after"] = report.params_after;
  j["reduction_ratio"] = report.reduction_ratio;
  return j;
}

}  // namespace adlprune
