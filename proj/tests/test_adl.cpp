#include <cmath>
#include <random>

#include "adlprune/adl.hpp"
#include "adlprune/ops.hpp"
#include "doctest.h"
#include "gradcheck.hpp"

using namespace adlprune;
using adlprune::testing::numeric_grad;
using adlprune::testing::rel_error;

namespace {

AdlHyper published_hyper() {
  AdlHyper h;
  h.alpha = 1e-7;
  h.gamma = 1e-5;
  h.scheduler = {10.0, -2.0, 100000};
  return h;
}

double empirical_keep_rate(double beta, std::size_t n, std::uint64_t seed) {
  const std::vector<double> b{beta};
  const auto s = sample_mask(b, MaskMode::train(3), -2.0, RandomStream(seed, "mc"), n);
  double kept = 0.0;
  for (double v : s.values) kept += v;
  return kept / static_cast<double>(n);
}

}  // namespace

TEST_CASE("schedule_c endpoints and midpoint") {
  const Scheduler s{10.0, -2.0, 100000};
  CHECK(schedule_c(s, 0) == 10.0);
  CHECK(schedule_c(s, 100000) == -2.0);
  CHECK(schedule_c(s, 50000) == 4.0);
  CHECK(schedule_c(s, 250000) == -2.0);
}

TEST_CASE("schedule_c is non-increasing and flat after K") {
  const Scheduler s{3.5, -1.25, 977};
  double prev = s.at(0);
  for (std::int64_t t = 1; t < 3000; ++t) {
    const double c = s.at(t);
    CHECK(c <= prev);
    if (t >= 977) CHECK(c == -1.25);
    prev = c;
  }
}

TEST_CASE("scheduler and hyperparameter validation") {
  CHECK_THROWS_AS((Scheduler{1.0, 2.0, 10}.validate()), ConfigError);
  CHECK_THROWS_AS((Scheduler{1.0, 0.0, 0}.validate()), ConfigError);
  AdlHyper h = published_hyper();
  h.alpha = 0.0;
  CHECK_THROWS_AS(h.validate(), ConfigError);
  h = published_hyper();
  h.gamma = -1e-5;
  CHECK_THROWS_AS(h.validate(), ConfigError);
  CHECK_THROWS_AS(AdlSite("s", 3, h, RandomStream(1, "x")), ConfigError);
}

TEST_CASE("effective_beta reparametrization") {
  AdlHyper h = published_hyper();
  CHECK(h.scale() == 10.0);
  AdlSite site("s", 2, h, RandomStream(1, "s"));
  site.raw().mutable_data()[1] = 0.3;
  auto beta = site.effective_beta(50000);  // c(t) = 4
  CHECK(beta.data()[0] == 4.0);
  CHECK(beta.data()[1] == doctest::Approx(7.0).epsilon(1e-15));

  backward(ops::sum(beta));
  CHECK(site.raw().grad()[0] == 10.0);
  CHECK(site.raw().grad()[1] == 10.0);
}

TEST_CASE("fresh site keeps every unit at t=0") {
  AdlSite site("s", 5, published_hyper(), RandomStream(1, "s"));
  for (double b : site.beta_values(0)) CHECK(b == 10.0);
  const auto st = site.survival(0);
  CHECK(st.rate == 1.0);
  CHECK(ops::sigmoid(10.0) > 0.9999);
}

TEST_CASE("sample_mask eval rule keeps ties") {
  const std::vector<double> beta{-3.0, -2.0, 0.0};
  const auto m = sample_mask(beta, MaskMode::eval(0, -2.0), 0.0, RandomStream(1, "e"), 2);
  CHECK(m.values == std::vector<double>{0, 1, 1, 0, 1, 1});
  CHECK(m.noise.empty());
  // Default threshold comes from the caller (c_inf).
  const auto d = sample_mask(beta, MaskMode::eval(0), -2.0, RandomStream(1, "e"), 1);
  CHECK(d.values == std::vector<double>{0, 1, 1});
}

TEST_CASE("sample_mask train saturation and binary values") {
  const std::vector<double> beta{60.0, -60.0, 0.0};
  const auto m = sample_mask(beta, MaskMode::train(0), -2.0, RandomStream(5, "t"), 1000);
  for (std::size_t b = 0; b < 1000; ++b) {
    CHECK(m.values[b * 3 + 0] == 1.0);
    CHECK(m.values[b * 3 + 1] == 0.0);
    const double v = m.values[b * 3 + 2];
    CHECK((v == 0.0 || v == 1.0));
  }
}

TEST_CASE("Monte-Carlo retention frequency matches sigmoid(beta)") {
  CHECK(std::abs(empirical_keep_rate(0.0, 100000, 11) - 0.5) <= 0.005);
  CHECK(std::abs(empirical_keep_rate(-2.0, 100000, 12) - 0.1192) <= 0.004);
  constexpr std::size_t n = 100000;
  for (double beta : {-3.0, -1.0, 0.0, 1.0, 3.0}) {
    const double p = ops::sigmoid(beta);
    const double sigma = std::sqrt(p * (1.0 - p) / n);
    CHECK(std::abs(empirical_keep_rate(beta, n, 99) - p) <= 3.0 * sigma);
  }
}

TEST_CASE("logistic noise is clamped") {
  CHECK(std::isfinite(logistic_from_uniform(0.0)));
  CHECK(std::isfinite(logistic_from_uniform(1.0)));
  CHECK(logistic_from_uniform(0.5) == 0.0);
}

TEST_CASE("masks are reproducible and eval masks are eps-free") {
  AdlSite a("block0.ffn1", 6, published_hyper(), RandomStream(77, "mask").child("block0.ffn1"));
  AdlSite b("block0.ffn1", 6, published_hyper(), RandomStream(77, "mask").child("block0.ffn1"));
  a.raw().mutable_data()[0] = -1.0;
  b.raw().mutable_data()[0] = -1.0;
  const auto da = a.draw(MaskMode::train(120000), 4);
  const auto db = b.draw(MaskMode::train(120000), 4);
  CHECK(da.sample.values == db.sample.values);
  CHECK(da.sample.noise == db.sample.noise);
  const auto dc = a.draw(MaskMode::train(120001), 4);
  CHECK(dc.sample.noise != da.sample.noise);

  const auto e1 = a.draw(MaskMode::eval(5), 3);
  const auto e2 = a.draw(MaskMode::eval(5), 3);
  CHECK(e1.sample.values == e2.sample.values);
  REQUIRE(a.last_mask().has_value());
  CHECK(a.last_mask()->shape() == Shape{3, 6});
}

TEST_CASE("adl_apply forward masking") {
  const std::vector<double> mask{1, 0, 1};
  auto y = adl_apply(Tensor::from({1, 3}, {2, 3, 4}), Tensor(), fixed_mask(mask, 1));
  CHECK(y.data()[0] == 2.0);
  CHECK(y.data()[1] == 0.0);
  CHECK(y.data()[2] == 4.0);
  CHECK_THROWS_AS(adl_apply(Tensor::zeros({1, 4}), Tensor(), fixed_mask(mask, 1)), ShapeError);
}

TEST_CASE("adl_apply straight-through beta gradient by hand") {
  // loss = y_0 with x_0 = 2 and beta_0 + eps_0 = 0, so dL/dbeta = 2 * 0.25.
  MaskSample s;
  s.kind = MaskKind::kTrain;
  s.batch = 1;
  s.units = 1;
  s.noise = {-0.7};
  s.values = {0.0};  // H(0) = 0
  auto beta = Tensor::from({1}, {0.7}, true);
  auto x = Tensor::from({1, 1}, {2.0}, true);
  backward(ops::sum(adl_apply(x, beta, s)));
  CHECK(beta.grad()[0] == doctest::Approx(0.5).epsilon(1e-15));
  // Hard mask on the input path.
  CHECK(x.grad()[0] == 0.0);
}

TEST_CASE("straight-through gradient equals FD of the sigmoid surrogate") {
  std::mt19937_64 gen(2024);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t batch = 3, frames = 4, units = 5;
    std::vector<double> xv(batch * frames * units), wv(xv.size()), bv(units);
    for (auto& v : xv) v = u(gen);
    for (auto& v : wv) v = u(gen);
    for (auto& v : bv) v = 2.0 * u(gen);
    auto x = Tensor::from({batch, frames, units}, xv);
    auto w = Tensor::from({batch, frames, units}, wv);
    auto beta = Tensor::from({units}, bv, true);
    const RandomStream stream(trial, "st");

    const auto hard = sample_mask(bv, MaskMode::train(trial), -2.0, stream, batch);
    backward(ops::sum(ops::mul(adl_apply(x, beta, hard), w)));
    std::vector<double> st(beta.grad().begin(), beta.grad().end());

    auto surrogate_loss = [&] {
      std::vector<double> cur(beta.data().begin(), beta.data().end());
      const auto soft = sample_mask(cur, MaskMode::surrogate(trial), -2.0, stream, batch);
      return ops::sum(ops::mul(adl_apply(x, Tensor::from({units}, cur), soft), w)).item();
    };
    auto fd = numeric_grad(surrogate_loss, beta);
    CHECK(rel_error(st, fd) < 1e-4);
  }
}

TEST_CASE("regularizer: plain L2 on raw equals uncentered L2 on beta") {
  AdlHyper h = published_hyper();
  AdlSite site("s", 1, h, RandomStream(1, "s"));
  site.raw().mutable_data()[0] = 2.0;
  const AdlSite* sites[] = {&site};
  for (std::int64_t t : {0, 777, 50000, 200000}) {
    auto l2 = regularization_loss(sites);
    auto r = uncentered_l2(sites, t);
    CHECK(l2.item() == doctest::Approx(4e-5).epsilon(1e-12));
    CHECK(std::abs(r.item() - 4e-5) < 1e-15);

    site.raw().zero_grad();
    backward(l2);
    const double g_l2 = site.raw().grad()[0];
    site.raw().zero_grad();
    backward(r);
    const double g_r = site.raw().grad()[0];
    CHECK(g_l2 == doctest::Approx(2.0 * h.gamma * 2.0).epsilon(1e-12));
    CHECK(std::abs(g_l2 - g_r) < 1e-10);
  }
  site.raw().mutable_data()[0] = 0.0;
  CHECK(regularization_loss(sites).item() == 0.0);
}

TEST_CASE("regularizer gradient matches finite differences") {
  AdlSite site("s", 4, published_hyper(), RandomStream(1, "s"));
  auto raw = site.raw().mutable_data();
  raw[0] = 0.3;
  raw[1] = -1.2;
  raw[2] = 0.05;
  raw[3] = 2.0;
  const AdlSite* sites[] = {&site};
  site.raw().zero_grad();
  backward(regularization_loss(sites));
  std::vector<double> g(site.raw().grad().begin(), site.raw().grad().end());
  auto fd = numeric_grad([&] { return regularization_loss(sites).item(); }, site.raw());
  CHECK(rel_error(g, fd) < 1e-4);
}

TEST_CASE("survival_stats") {
  const std::vector<double> beta{-3.0, -2.5, 5.0};
  const auto s = survival_stats(beta, -2.0);
  CHECK(s.surviving == 1);
  CHECK(s.total == 3);
  CHECK(s.rate == doctest::Approx(1.0 / 3.0));
  const std::vector<double> low{-9.0, -8.0};
  CHECK(survival_stats(low, -2.0).rate == 0.0);
}
