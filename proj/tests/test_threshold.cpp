#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "recursor/errors.hpp"
#include "recursor/rng.hpp"
#include "recursor/threshold.hpp"

using namespace recursor;

namespace {

double draw_beta(Rng& rng, double a, double b) {
  std::gamma_distribution<double> ga(a, 1.0), gb(b, 1.0);
  const double x = ga(rng.engine());
  const double y = gb(rng.engine());
  return x / (x + y);
}

// Bisection on the posterior; independent of the grid search.
double bisect_posterior(const BetaMixture& m, double zeta, double lo, double hi) {
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (posterior_agree(mid, m) >= zeta ? hi : lo) = mid;
  }
  return hi;
}

std::vector<CalibrationSample> stream(Rng& rng, std::size_t n) {
  std::vector<CalibrationSample> out;
  for (std::size_t i = 0; i < n; ++i) {
    const bool agree = rng.uniform() < 0.7;
    out.push_back({agree ? draw_beta(rng, 8, 2) : draw_beta(rng, 2, 5), agree});
  }
  return out;
}

}  // namespace

TEST_CASE("beta density values") {
  for (double x : {0.0, 0.1, 0.5, 0.93, 1.0}) CHECK(beta_pdf(x, 1, 1) == doctest::Approx(1.0));
  CHECK(beta_pdf(0.5, 2, 2) == doctest::Approx(1.5).epsilon(1e-12));
  CHECK_THROWS_AS(beta_pdf(-0.01, 2, 2), DomainError);
  CHECK_THROWS_AS(beta_pdf(1.01, 2, 2), DomainError);
  // Composite Simpson quadrature over [0, 1].
  for (auto [a, b] : {std::pair{2.0, 3.0}, std::pair{5.0, 2.0}, std::pair{1.5, 1.5}}) {
    const int n = 20000;
    const double h = 1.0 / n;
    double acc = beta_pdf(0, a, b) + beta_pdf(1, a, b);
    for (int i = 1; i < n; ++i) acc += (i % 2 ? 4.0 : 2.0) * beta_pdf(i * h, a, b);
    CHECK(std::abs(acc * h / 3.0 - 1.0) <= 1e-6);
  }
}

TEST_CASE("moment inversion") {
  auto u = beta_from_moments(0.5, 1.0 / 12.0);
  REQUIRE(u);
  CHECK(u->alpha == doctest::Approx(1.0));
  CHECK(u->beta == doctest::Approx(1.0));
  auto p = beta_from_moments(0.8, 0.01);
  REQUIRE(p);
  CHECK(p->alpha == doctest::Approx(12.0));
  CHECK(p->beta == doctest::Approx(3.0));
  CHECK_FALSE(beta_from_moments(0.5, 0.0));
  CHECK_FALSE(beta_from_moments(0.5, 0.25));
}

TEST_CASE("moment fit recovers a sampled beta") {
  Rng rng(7);
  std::vector<double> xs(10000);
  for (auto& x : xs) x = draw_beta(rng, 5, 2);
  auto fit = fit_beta(xs);
  REQUIRE(fit);
  CHECK(std::abs(fit->alpha - 5.0) <= 0.15 * 5.0);
  CHECK(std::abs(fit->beta - 2.0) <= 0.15 * 2.0);
}

TEST_CASE("degenerate classes defer the fit") {
  std::vector<CalibrationSample> one_class{{0.9, true}, {0.8, true}, {0.7, true}};
  CHECK_FALSE(fit_moments(one_class));
  std::vector<CalibrationSample> flat{{0.9, true}, {0.8, true}, {0.3, false}, {0.3, false}};
  CHECK_FALSE(fit_moments(flat));
  AdaptiveThreshold t;
  for (auto s : one_class) t.add(s.confidence, s.agree);
  CHECK_FALSE(t.refit());
  CHECK(t.lambda() == 0.9);
  CHECK(t.history() == std::vector<double>{0.9});
}

TEST_CASE("posterior fixtures") {
  BetaMixture sym{{2, 5}, {5, 2}};
  CHECK(posterior_agree(0.5, sym) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(posterior_agree(0.999, sym) > 0.999);
  // Ratio (x / (1 - x))^3 = 2/3 at posterior 0.4.
  const double r = std::cbrt(2.0 / 3.0);
  const double closed = r / (1.0 + r);
  CHECK(std::abs(bisect_posterior(sym, 0.4, 0.01, 0.99) - closed) <= 1e-6);
  for (int i = 1; i < 100; ++i) {
    const double p = posterior_agree(i / 100.0, sym);
    CHECK(p >= 0.0);
    CHECK(p <= 1.0);
  }
  CHECK_THROWS_AS(posterior_agree(0.0, sym), NumericError);
}

TEST_CASE("threshold search") {
  BetaMixture sym{{2, 5}, {5, 2}};
  auto est = estimate_threshold(sym, 0.4);
  CHECK(est.reached);
  const double oracle = bisect_posterior(sym, 0.4, 0.01, 0.99);
  CHECK(std::abs(est.lambda - oracle) <= kThresholdGrid);

  BetaMixture split{{2, 30}, {30, 2}};
  auto s = estimate_threshold(split, 0.4);
  CHECK(s.lambda > 0.2);
  CHECK(s.lambda < 0.8);

  // Agree mass entirely left of the disagree mass: zeta is only met at x = 0 if at all.
  BetaMixture inverted{{30, 2}, {2, 30}};
  auto inv = estimate_threshold(inverted, 0.4);
  CHECK(inv.lambda < 0.5);

  double prev = 0.0;
  for (double z = 0.05; z < 1.0; z += 0.05) {
    auto e = estimate_threshold(sym, z);
    CHECK(e.lambda >= prev);
    prev = e.lambda;
  }
}

TEST_CASE("unreachable posterior returns one with a warning") {
  // Identical components pin the posterior at 0.5.
  BetaMixture m{{3, 4}, {3, 4}};
  auto est = estimate_threshold(m, 0.6);
  CHECK_FALSE(est.reached);
  CHECK(est.lambda == 1.0);
}

TEST_CASE("calibration defaults and small-sample stability") {
  AdaptiveThreshold t;
  CHECK(t.config().zeta == 0.4);
  CHECK(t.config().initial == 0.9);
  CHECK(t.config().calibration_fraction == 0.03);
  CHECK(t.calibration_sequences(100) == 3);
  CHECK(t.calibration_sequences(10) == 1);

  Rng rng(11);
  auto all = stream(rng, 20000);
  AdaptiveThreshold full, part;
  for (std::size_t i = 0; i < all.size(); ++i) {
    full.add(all[i].confidence, all[i].agree);
    if (i < all.size() * 3 / 100) part.add(all[i].confidence, all[i].agree);
  }
  REQUIRE(full.refit());
  REQUIRE(part.refit());
  CHECK(std::abs(full.lambda() - part.lambda()) <= 0.05);
  CHECK(full.mixture()->agree.alpha > 0);
  CHECK_THROWS_AS(AdaptiveThreshold(AdaptiveThresholdConfig{1.5, 0.9, 0.03}), ConfigError);
}
