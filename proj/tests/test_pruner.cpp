#include <cmath>
#include <limits>
#include <random>

#include "doctest.h"
#include "fixtures.hpp"

#include "adlprune/pruner.hpp"

using namespace adlprune;
using adlprune::testing::max_abs_diff;
using adlprune::testing::random_tensor;
using adlprune::testing::randomize;
using adlprune::testing::tiny_config;

namespace {

constexpr std::int64_t kFinal = 100;  // tiny_config's K: c(t) = c_inf from here on

// Sets beta' so that beta at the final step equals `beta`.
void set_beta(AdlSite& site, const std::vector<double>& beta) {
  const double s = site.hyper().scale();
  const double c = site.hyper().scheduler.c_inf;
  auto raw = site.raw().mutable_data();
  for (std::size_t d = 0; d < beta.size(); ++d) raw[d] = (beta[d] - c) / s;
}

PruneDecision random_decision(const ConformerModel& m, std::mt19937_64& gen, double p_keep) {
  std::bernoulli_distribution keep(p_keep);
  PruneDecision out;
  out.threshold = 0.0;
  for (const AdlSite* s : m.adl_sites()) {
    SiteDecision sd{s->name(), s->units(), {}};
    for (std::size_t d = 0; d < s->units(); ++d) {
      if (keep(gen)) sd.keep.push_back(d);
    }
    out.sites.push_back(std::move(sd));
  }
  return out;
}

// Masks that mirror a decision, for comparing against the pruned model.
MaskOverrides decision_masks(const PruneDecision& dec) {
  MaskOverrides o;
  for (const auto& sd : dec.sites) {
    std::vector<double> m(sd.total, 0.0);
    for (auto d : sd.keep) m[d] = 1.0;
    o[sd.site] = std::move(m);
  }
  return o;
}

double pruned_vs_masked(ConformerModel& masked, ConformerModel& pruned, const PruneDecision& dec,
                        std::mt19937_64& gen, std::size_t batches = 5) {
  const MaskOverrides masks = decision_masks(dec);
  double worst = 0.0;
  for (std::size_t n = 0; n < batches; ++n) {
    const Tensor x = random_tensor({2, 6, masked.config().input_dim}, gen, 2.0);
    const Tensor a = masked.forward(x, {MaskMode::eval(kFinal), &masks});
    const Tensor b = pruned.forward(x, {MaskMode::eval(kFinal)});
    worst = std::max(worst, max_abs_diff(a, b));
  }
  return worst;
}

ConformerConfig single_block(std::size_t d, std::size_t f, std::size_t heads, std::size_t k) {
  ConformerConfig c = tiny_config();
  c.model_dim = d;
  c.ffn_hidden = f;
  c.num_heads = heads;
  c.conv_kernel = k;
  return c;
}

}  // namespace

TEST_CASE("decide keeps units at or above the threshold") {
  ConformerConfig c = tiny_config();
  c.ffn_hidden = 3;
  ConformerModel m(c, 1);
  AdlSite& ffn = *m.adl_sites()[0];
  set_beta(ffn, {-2.0, -2.1, 0.0});
  const PruneDecision dec = decide(m, kFinal, -2.0);
  CHECK(dec.threshold == -2.0);
  REQUIRE(dec.sites.size() == m.adl_sites().size());
  CHECK(dec.sites[0].site == "block0.ffn1");
  CHECK(dec.sites[0].keep == std::vector<std::size_t>{0, 2});

  // Default threshold is c_inf.
  CHECK(decide(m, kFinal).sites[0].keep == std::vector<std::size_t>{0, 2});

  set_beta(ffn, {10, 10, 10});
  CHECK(decide(m, kFinal).sites[0].keep.size() == 3);
  set_beta(ffn, {-100, -100, -100});
  CHECK(decide(m, kFinal).sites[0].keep.empty());
}

TEST_CASE("pruned FFN takes the surviving rows and columns") {
  ConformerModel m(single_block(8, 16, 2, 3), 2);
  PruneDecision dec = decide(m, kFinal, -1e9);  // keep everything ...
  dec.sites[0].keep = {0, 1, 2, 4, 5, 7, 9, 11, 12, 15};  // ... except in ffn1
  const ConformerModel p = prune_model(m, dec);
  const FfnBlock& f = p.blocks()[0].ffn1;
  CHECK(f.w1.shape() == Shape{10, 8});
  CHECK(f.b1.shape() == Shape{10});
  CHECK(f.w2.shape() == Shape{8, 10});
  CHECK(f.b2.shape() == Shape{8});
  CHECK(p.adl_sites().empty());
  // Row 3 of the pruned W1 is original row 4.
  const FfnBlock& src = m.blocks()[0].ffn1;
  for (std::size_t j = 0; j < 8; ++j) CHECK(f.w1.at({3, j}) == src.w1.at({4, j}));
  for (std::size_t i = 0; i < 8; ++i) CHECK(f.w2.at({i, 9}) == src.w2.at({i, 15}));
}

TEST_CASE("keep-all pruning copies every parameter") {
  ConformerModel m(tiny_config(), 3);
  std::mt19937_64 gen(1);
  randomize(m, gen);
  const ConformerModel p = prune_model(m, decide(m, kFinal, -std::numeric_limits<double>::infinity()));
  auto a = m.parameters();
  auto b = p.parameters();
  std::size_t j = 0;
  for (const auto& pa : a) {
    if (pa.kind == ParamKind::kAdlRaw) continue;
    REQUIRE(j < b.size());
    CHECK(pa.name == b[j].name);
    CHECK(max_abs_diff(*pa.tensor, *b[j].tensor) == 0.0);
    ++j;
  }
  CHECK(j == b.size());
}

TEST_CASE("prune_model rejects inconsistent decisions") {
  ConformerModel m(tiny_config(), 4);
  PruneDecision dec = decide(m, kFinal);
  PruneDecision missing = dec;
  missing.sites.pop_back();
  CHECK_THROWS_AS(prune_model(m, missing), std::invalid_argument);
  PruneDecision unsorted = dec;
  unsorted.sites[0].keep = {3, 1};
  CHECK_THROWS_AS(prune_model(m, unsorted), std::invalid_argument);
  PruneDecision out_of_range = dec;
  out_of_range.sites[0].keep = {0, 99};
  CHECK_THROWS_AS(prune_model(m, out_of_range), std::invalid_argument);
  PruneDecision wrong_total = dec;
  wrong_total.sites[0].total = 5;
  CHECK_THROWS_AS(prune_model(m, wrong_total), std::invalid_argument);
}

TEST_CASE("parameter counts per component") {
  const ParamCount c = count_params(ConformerModel(single_block(8, 16, 2, 3), 5));
  CHECK(c.ffn == 2 * 280);   // ffn1 and ffn2
  CHECK(c.mhsa == 288);
  CHECK(c.lconv == 240);
  CHECK(c.norm == 5 * 2 * 8);
  CHECK(c.input_proj == 8 * 5 + 8);
  CHECK(c.output_head == 4 * 8 + 4);
  CHECK(c.total == c.ffn + c.mhsa + c.lconv + c.norm + c.input_proj + c.output_head);
}

TEST_CASE("per-unit costs") {
  CHECK(per_unit_cost(SiteKind::kFfn, 8, 3) == 17);
  CHECK(per_unit_cost(SiteKind::kMhsaHead, 8, 3) == 35);
  CHECK(per_unit_cost(SiteKind::kLconv, 8, 3) == 18 + 3 + 8);
  CHECK(site_kind("block0.ffn2") == SiteKind::kFfn);
  CHECK(site_kind("block3.mhsa.head1") == SiteKind::kMhsaHead);
  CHECK(site_kind("block1.lconv") == SiteKind::kLconv);
  CHECK_THROWS_AS(site_kind("lconv"), std::invalid_argument);
}

TEST_CASE("random decisions: pruned model matches masked model and accounting holds") {
  ConformerConfig c = tiny_config();
  c.num_blocks = 2;
  ConformerModel m(c, 6);
  std::mt19937_64 gen(2);
  randomize(m, gen);
  const std::size_t before = count_params(m).total;
  for (int trial = 0; trial < 20; ++trial) {
    CAPTURE(trial);
    const PruneDecision dec = random_decision(m, gen, 0.15 + 0.04 * trial);
    ConformerModel p = prune_model(m, dec);
    CHECK(pruned_vs_masked(m, p, dec, gen) <= kEquivalenceTol);

    std::size_t removed = 0;
    for (const auto& sd : dec.sites) {
      removed += (sd.total - sd.keep.size()) * per_unit_cost(site_kind(sd.site), c.model_dim, c.conv_kernel);
    }
    CHECK(count_params(p).total == before - removed);
  }
}

TEST_CASE("verify_equivalence on a threshold decision, including a zero batch") {
  ConformerModel m(tiny_config(), 7);
  std::mt19937_64 gen(3);
  randomize(m, gen, 0.3);  // beta spread around c_inf
  const PruneDecision dec = decide(m, kFinal);
  ConformerModel p = prune_model(m, dec);
  CHECK(verify_equivalence(m, p, kFinal, dec.threshold, 5, 99) <= kEquivalenceTol);

  const MaskOverrides masks = decision_masks(dec);
  const Tensor zeros = Tensor::zeros({2, 4, 5});
  const Tensor a = m.forward(zeros, {MaskMode::eval(kFinal, dec.threshold)});
  const Tensor b = p.forward(zeros, {MaskMode::eval(kFinal)});
  CHECK(max_abs_diff(a, b) <= kEquivalenceTol);
}

TEST_CASE("off-by-one pruning is caught") {
  ConformerModel m(tiny_config(), 8);
  std::mt19937_64 gen(4);
  randomize(m, gen);
  PruneDecision dec = random_decision(m, gen, 0.5);
  dec.sites[0].keep = {0, 2, 4};
  ConformerModel good = prune_model(m, dec);
  CHECK(pruned_vs_masked(m, good, dec, gen) <= kEquivalenceTol);

  PruneDecision shifted = dec;
  shifted.sites[0].keep = {1, 3, 5};
  ConformerModel bad = prune_model(m, shifted);
  CHECK(pruned_vs_masked(m, bad, dec, gen) > 1e-3);
}

TEST_CASE("sites with no survivors collapse to their bias path") {
  ConformerModel m(tiny_config(), 9);
  std::mt19937_64 gen(5);
  randomize(m, gen);
  PruneDecision dec = decide(m, kFinal, std::numeric_limits<double>::infinity());
  for (const auto& sd : dec.sites) CHECK(sd.keep.empty());
  ConformerModel p = prune_model(m, dec);
  const ConformerBlock& blk = p.blocks()[0];
  CHECK(blk.ffn1.w1.shape() == Shape{0, 8});
  CHECK(blk.mhsa.heads[0].wo.shape() == Shape{8, 0});
  CHECK(blk.lconv.kernel.shape() == Shape{0, 3});
  CHECK(pruned_vs_masked(m, p, dec, gen) <= kEquivalenceTol);

  const Tensor x = random_tensor({1, 3, 8}, gen);
  const Tensor y = p.blocks()[0].ffn1.forward(x, {MaskMode::eval(0)});
  for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == blk.ffn1.b2.data()[i % 8]);
}

TEST_CASE("monotone in the threshold and idempotent") {
  ConformerModel m(tiny_config(), 10);
  std::mt19937_64 gen(6);
  randomize(m, gen, 0.3);
  std::size_t prev = 0;
  for (double thr = 2.0; thr >= -6.0; thr -= 0.25) {
    std::size_t kept = 0;
    for (const auto& sd : decide(m, kFinal, thr).sites) kept += sd.keep.size();
    CHECK(kept >= prev);
    prev = kept;
  }

  ConformerModel p = prune_model(m, decide(m, kFinal));
  ConformerModel pp = prune_model(p, decide(p, kFinal));
  auto a = p.parameters();
  auto b = pp.parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].tensor->shape() == b[i].tensor->shape());
    CHECK(max_abs_diff(*a[i].tensor, *b[i].tensor) == 0.0);
  }
}

TEST_CASE("report rows, CSV and JSON") {
  ConformerConfig c = tiny_config();
  c.ffn_hidden = 4;
  ConformerModel m(c, 11);
  set_beta(*m.adl_sites()[0], {-3.0, 1.0, 2.0, -2.0});
  const PruneReport r = make_report(m, kFinal);
  REQUIRE(r.rows.size() == m.adl_sites().size());
  CHECK(r.rows[0].block == 0);
  CHECK(r.rows[0].site == "ffn1");
  CHECK(r.rows[0].total == 4);
  CHECK(r.rows[0].surviving == 3);
  CHECK(r.rows[0].rate == 0.75);
  CHECK(r.rows[1].site == "mhsa.head0");
  CHECK(r.params_before == count_params(m).total);
  CHECK(r.params_after == r.params_before - per_unit_cost(SiteKind::kFfn, 8, 3));
  CHECK(r.reduction_ratio == doctest::Approx(1.0 - double(r.params_after) / r.params_before));

  const std::string csv = report_csv(r);
  CHECK(csv.rfind("block,site,total,surviving,rate\n0,ffn1,4,3,0.75\n0,mhsa.head0,4,4,1\n", 0) == 0);

  const auto j = report_json(r);
  CHECK(j["threshold"] == -2.0);
  CHECK(j["sites"][0]["surviving"] == 3);
  CHECK(j["params_after"] == r.params_after);

  PruneReport unbounded = r;
  unbounded.threshold = -std::numeric_limits<double>::infinity();
  CHECK(report_json(unbounded)["threshold"] == "-inf");
}
