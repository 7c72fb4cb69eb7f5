#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "adlprune/conformer.hpp"
#include "json.hpp"

namespace adlprune {

struct SiteDecision {
  std::string site;  // e.g. "block1.mhsa.head2"
  std::size_t total = 0;
  std::vector<std::size_t> keep;  // sorted, unique, < total
};

struct PruneDecision {
  double threshold = 0.0;
  std::vector<SiteDecision> sites;

  const SiteDecision* find(const std::string& site) const;
};

/// Keep unit d iff beta_d >= threshold, with beta evaluated at `step`.
/// The threshold defaults to c_inf.
PruneDecision decide(const ConformerModel& model, std::int64_t step,
                     std::optional<double> threshold = {});

/// Physically removes the dropped units' parameter slices. The result has no
/// ADL sites; a site with zero survivors collapses to its bias path.
ConformerModel prune_model(const ConformerModel& model, const PruneDecision& decision);

struct ParamCount {
  std::size_t total = 0;
  std::size_t input_proj = 0;
  std::size_t ffn = 0;
  std::size_t mhsa = 0;
  std::size_t lconv = 0;
  std::size_t norm = 0;
  std::size_t output_head = 0;
};

/// Every weight, bias, gain and kernel scalar; ADL raw parameters excluded.
ParamCount count_params(const ConformerModel& model);

enum class SiteKind { kFfn, kMhsaHead, kLconv };
SiteKind site_kind(const std::string& site);

/// Parameters owned by one unit of a site: FFN 2D+1, attention head 4D+3,
/// LConv 2(D+1)+k+D.
std::size_t per_unit_cost(SiteKind kind, std::size_t model_dim, std::size_t conv_kernel);

inline constexpr double kEquivalenceTol = 1e-9;

/// Max |logit difference| between the masked model in eval mode (at `step`,
/// `threshold`) and the pruned model on `n_batches` random batches.
double verify_equivalence(ConformerModel& masked, ConformerModel& pruned,
                          std::int64_t step, double threshold, std::size_t n_batches,
                          std::uint64_t seed, std::size_t batch = 2, std::size_t frames = 8);

struct ReportRow {
  std::size_t block = 0;
  std::string site;  // "ffn1", "mhsa.head0", ..., "lconv", "ffn2"
  std::size_t total = 0;
  std::size_t surviving = 0;
  double rate = 0.0;
};

struct PruneReport {
  double threshold = 0.0;
  std::int64_t step = 0;
  std::vector<ReportRow> rows;
  std::size_t params_before = 0;
  std::size_t params_after = 0;
  double reduction_ratio = 0.0;
};

PruneReport make_report(const ConformerModel& model, std::int64_t step,
                        std::optional<double> threshold = {});

inline constexpr const char* kReportCsvHeader = "block,site,total,surviving,rate";
std::string report_csv(const PruneReport& report);
nlohmann::json report_json(const PruneReport& report);

}  // namespace adlprune
