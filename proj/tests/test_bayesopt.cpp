// GP surrogate math against a naive linear-algebra oracle, expected
// improvement, and the sequential minimizer's bookkeeping.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>
#include <stdexcept>
#include <vector>

#include "entsel/bayesopt.hpp"
#include "entsel/normal.hpp"
#include "entsel/rng.hpp"

using namespace entsel;
namespace fs = std::filesystem;

namespace {

// Posterior oracle via explicit matrix inversion (Gauss-Jordan), nothing
// shared with the Cholesky path under test.
struct NaivePosterior {
  double mean = 0.0;
  double variance = 0.0;
};

std::vector<double> gauss_jordan_solve(std::vector<double> a, std::vector<double> b,
                                       std::size_t n) {
  // Solves A z = b for symmetric positive definite A (row-major), returning z.
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t pivot = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::fabs(a[r * n + col]) > std::fabs(a[pivot * n + col])) pivot = r;
    for (std::size_t c = 0; c < n; ++c) std::swap(a[col * n + c], a[pivot * n + c]);
    std::swap(b[col], b[pivot]);
    const double d = a[col * n + col];
    for (std::size_t c = 0; c < n; ++c) a[col * n + c] /= d;
    b[col] /= d;
    for (std::size_t r = 0; r < n; ++r) {
      if (r == col) continue;
      const double f = a[r * n + col];
      if (f == 0.0) continue;
      for (std::size_t c = 0; c < n; ++c) a[r * n + c] -= f * a[col * n + c];
      b[r] -= f * b[col];
    }
  }
  return b;
}

NaivePosterior naive_posterior(const std::vector<double>& x, const std::vector<double>& y,
                               double ell, double sf2, double sn2, double at) {
  // Works on raw targets (standardize = false in the surrogate under test).
  const std::size_t n = x.size();
  std::vector<double> k(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      k[i * n + j] = matern52(std::fabs(x[i] - x[j]), ell, sf2);
      if (i == j) k[i * n + j] += sn2;
    }
  std::vector<double> kstar(n);
  for (std::size_t i = 0; i < n; ++i)
    kstar[i] = matern52(std::fabs(at - x[i]), ell, sf2);

  const std::vector<double> alpha = gauss_jordan_solve(k, y, n);
  const std::vector<double> kinv_kstar = gauss_jordan_solve(k, kstar, n);
  NaivePosterior p;
  for (std::size_t i = 0; i < n; ++i) p.mean += kstar[i] * alpha[i];
  double quad = 0.0;
  for (std::size_t i = 0; i < n; ++i) quad += kstar[i] * kinv_kstar[i];
  p.variance = std::max(sf2 - quad, 0.0);
  return p;
}

double quadratic(double x) { return (x - 0.7) * (x - 0.7); }

}  // namespace

TEST_CASE("matern 5/2 kernel shape") {
  CHECK(matern52(0.0, 0.5, 2.0) == 2.0);  // variance at zero distance
  // Monotone decreasing in distance.
  double prev = matern52(0.0, 0.5, 1.0);
  for (double r = 0.05; r < 3.0; r += 0.05) {
    const double v = matern52(r, 0.5, 1.0);
    CHECK(v < prev);
    CHECK(v > 0.0);
    prev = v;
  }
  // Hand-evaluated point: r = l, s = sqrt(5).
  const double s = std::sqrt(5.0);
  const double expect = (1.0 + s + s * s / 3.0) * std::exp(-s);
  CHECK(matern52(0.5, 0.5, 1.0) == doctest::Approx(expect).epsilon(1e-14));
}

TEST_CASE("posterior matches the naive-inverse oracle") {
  Rng rng(2024);
  for (int rep = 0; rep < 12; ++rep) {
    const std::size_t n = 2 + rng.uniform_index(9);
    std::vector<double> x, y;
    std::set<int> used;
    for (std::size_t i = 0; i < n; ++i) {
      int slot;
      do {
        slot = static_cast<int>(rng.uniform_index(1000));
      } while (!used.insert(slot).second);  // distinct inputs keep K well posed
      x.push_back(static_cast<double>(slot) / 999.0);
      y.push_back(rng.normal(0.0, 2.0));
    }
    const double ell = 0.05 + 0.4 * rng.uniform();
    const double sf2 = 0.5 + 2.0 * rng.uniform();
    const double sn2 = 1e-6 + 1e-4 * rng.uniform();
    const GpSurrogate gp(x, y, ell, sf2, sn2, /*standardize=*/false);
    for (double at : {0.0, 0.17, 0.5, 0.83, 1.0}) {
      const auto got = gp.posterior(at);
      const auto want = naive_posterior(x, y, ell, sf2, sn2, at);
      CHECK(std::fabs(got.mean - want.mean) <= 1e-8);
      CHECK(std::fabs(got.variance - want.variance) <= 1e-8);
    }
  }
}

TEST_CASE("standardization round-trips the target units") {
  const std::vector<double> x{0.1, 0.4, 0.6, 0.9};
  const std::vector<double> y{10.0, 12.0, 11.0, 13.0};
  const GpSurrogate gp(x, y, 0.3, 1.0, 1e-8, true);
  // Near-noiseless interpolation recovers the training targets.
  for (std::size_t i = 0; i < x.size(); ++i)
    CHECK(gp.posterior(x[i]).mean == doctest::Approx(y[i]).epsilon(1e-3 / 12.0));
  CHECK(gp.target_mean() == doctest::Approx(11.5));
  // Population standard deviation of {10,12,11,13}.
  CHECK(gp.target_scale() == doctest::Approx(std::sqrt(1.25)).epsilon(1e-12));
}

TEST_CASE("all-equal targets give a flat posterior") {
  const GpSurrogate gp({0.2, 0.8}, {3.5, 3.5}, 0.3, 1.0, 1e-8, true);
  for (double at : {0.0, 0.3, 0.55, 1.0})
    CHECK(gp.posterior(at).mean == doctest::Approx(3.5).epsilon(1e-12));
  CHECK(gp.target_scale() == 1.0);  // scale division skipped when sd = 0
}

TEST_CASE("far from the data the posterior reverts to the prior") {
  const GpSurrogate gp({0.0, 0.05}, {1.0, -1.0}, 0.02, 2.0, 1e-8, false);
  const auto far = gp.posterior_standardized(1.0);
  CHECK(std::fabs(far.mean) <= 1e-6);
  CHECK(far.variance == doctest::Approx(2.0).epsilon(1e-6));
}

TEST_CASE("fitted hyperparameters come from the default grid") {
  Rng rng(5);
  std::vector<double> x, y;
  for (int i = 0; i <= 12; ++i) {
    x.push_back(static_cast<double>(i) / 12.0);
    y.push_back(std::sin(2.0 * x.back()) + 0.01 * rng.normal(0.0, 1.0));
  }
  const GpSurrogate gp = gp_fit(x, y);
  const GpHyperGrid grid = GpHyperGrid::defaults();
  CHECK(std::find(grid.length_scales.begin(), grid.length_scales.end(),
                  gp.length_scale()) != grid.length_scales.end());
  CHECK(std::find(grid.signal_variances.begin(), grid.signal_variances.end(),
                  gp.signal_variance()) != grid.signal_variances.end());
  CHECK(std::find(grid.noise_variances.begin(), grid.noise_variances.end(),
                  gp.noise_variance()) != grid.noise_variances.end());
  CHECK(grid.length_scales.size() == 21);
  CHECK(grid.signal_variances.size() == 3);
  CHECK(grid.noise_variances.size() == 3);
  // A smooth low-noise curve should interpolate well.
  for (std::size_t i = 0; i < x.size(); ++i)
    CHECK(std::fabs(gp.posterior(x[i]).mean - y[i]) < 0.05);

  CHECK_THROWS_AS(gp_fit({0.1, -0.5}, {1.0, 2.0}), std::invalid_argument);
}

TEST_CASE("expected improvement closed form") {
  // sigma = 0 collapses to the hinge on the improvement.
  CHECK(expected_improvement(1.0, 0.0, 2.0, 0.0) == 1.0);
  CHECK(expected_improvement(2.0, 0.0, 1.0, 0.0) == 0.0);
  CHECK(expected_improvement(1.0, 0.0, 2.0, 0.5) == 0.5);

  // z = (best - mean - xi) / sigma = 1: EI = Phi(1) + phi(1).
  const double want = normal_cdf(1.0) + normal_pdf(1.0);
  CHECK(want == doctest::Approx(1.0833154705876862).epsilon(1e-10 / 1.08));
  CHECK(expected_improvement(1.0, 1.0, 2.0, 0.0) ==
        doctest::Approx(1.0833154705876862).epsilon(1e-6 / 1.08));

  // Deep in the no-improvement regime EI approaches (but stays above) 0.
  const double tiny = expected_improvement(5.0, 0.5, 1.0, 0.0);
  CHECK(tiny >= 0.0);
  CHECK(tiny < 1e-8);

  CHECK_THROWS_AS(expected_improvement(0.0, -1.0, 0.0, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(expected_improvement(0.0, 1.0, 0.0, -0.1), std::invalid_argument);
}

TEST_CASE("minimizer spends exactly the budget inside the bounds") {
  SearchSpace space;
  BoConfig cfg;
  cfg.total_calls = 23;
  cfg.random_starts = 6;
  cfg.seed = 31;
  std::size_t calls = 0;
  const OptimizationTrace trace = minimize(
      [&](double x) {
        ++calls;
        return quadratic(x);
      },
      space, cfg);
  CHECK(calls == 23);
  REQUIRE(trace.entries.size() == 23);
  for (std::size_t i = 0; i < trace.entries.size(); ++i) {
    const TraceEntry& e = trace.entries[i];
    CHECK(e.call == i + 1);
    CHECK(e.x >= space.lower);
    CHECK(e.x <= space.upper);
    CHECK(e.phase == (e.call <= 6 ? CallPhase::random : CallPhase::guided));
    CHECK(!e.failed);
  }
  CHECK(trace.best_call >= 1);
  CHECK(trace.best_y == quadratic(trace.best_x));
  // The optimum of (x - 0.7)^2 over [0.5, 0.9] is interior; with guided
  // calls available the minimizer should land close.
  CHECK(std::fabs(trace.best_x - 0.7) <= 0.02);
}

TEST_CASE("minimizer is deterministic in the seed") {
  SearchSpace space;
  BoConfig cfg;
  cfg.total_calls = 12;
  cfg.random_starts = 4;
  cfg.seed = 9;
  const auto run = [&] { return minimize(quadratic, space, cfg); };
  const OptimizationTrace a = run();
  const OptimizationTrace b = run();
  REQUIRE(a.entries.size() == b.entries.size());
  for (std::size_t i = 0; i < a.entries.size(); ++i) {
    CHECK(a.entries[i].x == b.entries[i].x);
    CHECK(a.entries[i].y == b.entries[i].y);
  }
  CHECK(a.best_x == b.best_x);

  BoConfig other = cfg;
  other.seed = 10;
  const OptimizationTrace c = minimize(quadratic, space, other);
  bool any_diff = false;
  for (std::size_t i = 0; i < c.entries.size() && !any_diff; ++i)
    any_diff = c.entries[i].x != a.entries[i].x;
  CHECK(any_diff);
}

TEST_CASE("quadratic objective is located across seeds") {
  SearchSpace space;
  BoConfig cfg;
  cfg.total_calls = 25;
  cfg.random_starts = 8;
  int good = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    cfg.seed = seed;
    const OptimizationTrace t = minimize(quadratic, space, cfg);
    if (std::fabs(t.best_x - 0.7) <= 0.02) ++good;
  }
  CHECK(good >= 19);
}

TEST_CASE("failed calls are recorded with the worst observed value") {
  SearchSpace space;
  BoConfig cfg;
  cfg.total_calls = 10;
  cfg.random_starts = 5;
  cfg.seed = 3;
  std::size_t call_no = 0;
  const OptimizationTrace trace = minimize(
      [&](double x) -> double {
        ++call_no;
        if (call_no == 2 || call_no == 4) throw std::runtime_error("boom");
        return quadratic(x);
      },
      space, cfg);
  REQUIRE(trace.entries.size() == 10);
  double worst_success = -1.0;
  for (const auto& e : trace.entries)
    if (!e.failed) worst_success = std::max(worst_success, e.y);
  CHECK(trace.entries[1].failed);
  CHECK(trace.entries[3].failed);
  for (const auto& e : trace.entries)
    if (e.failed) {
      CHECK(e.y <= worst_success);
      CHECK(!e.is_best_so_far);
    }
  CHECK(!trace.entries[trace.best_call - 1].failed);
}

TEST_CASE("three consecutive failures abort") {
  SearchSpace space;
  BoConfig cfg;
  cfg.total_calls = 10;
  cfg.random_starts = 5;
  cfg.seed = 1;
  std::size_t call_no = 0;
  try {
    minimize(
        [&](double) -> double {
          ++call_no;
          if (call_no >= 3) throw std::runtime_error("boom");
          return 1.0 + static_cast<double>(call_no);
        },
        space, cfg);
    FAIL("expected abort");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("call 5") != std::string::npos);
  }
}

TEST_CASE("duplicate proposals are redirected, spending the full budget") {
  // A flat objective makes every guided EI tie at the same point, forcing
  // the duplicate guard each round; x values must still be distinct.
  SearchSpace space;
  BoConfig cfg;
  cfg.total_calls = 14;
  cfg.random_starts = 4;
  cfg.seed = 17;
  const OptimizationTrace trace = minimize([](double) { return 1.0; }, space, cfg);
  CHECK(trace.entries.size() == 14);
  for (std::size_t i = 0; i < trace.entries.size(); ++i)
    for (std::size_t j = i + 1; j < trace.entries.size(); ++j)
      CHECK(std::fabs(trace.entries[i].x - trace.entries[j].x) > 0.0);
}

TEST_CASE("trace CSV round trip") {
  SearchSpace space;
  BoConfig cfg;
  cfg.total_calls = 9;
  cfg.random_starts = 3;
  cfg.seed = 21;
  const OptimizationTrace trace = minimize(quadratic, space, cfg);
  const fs::path p = fs::temp_directory_path() / "entsel_bayesopt_trace.csv";
  save_trace_csv(trace, p);
  const OptimizationTrace r = load_trace_csv(p);
  REQUIRE(r.entries.size() == trace.entries.size());
  for (std::size_t i = 0; i < trace.entries.size(); ++i) {
    CHECK(r.entries[i].call == trace.entries[i].call);
    CHECK(r.entries[i].phase == trace.entries[i].phase);
    CHECK(r.entries[i].x == trace.entries[i].x);
    CHECK(r.entries[i].y == trace.entries[i].y);
    CHECK(r.entries[i].is_best_so_far == trace.entries[i].is_best_so_far);
  }
  CHECK(r.best_x == trace.best_x);
  CHECK(r.best_y == trace.best_y);
  CHECK(r.best_call == trace.best_call);
  fs::remove(p);
}

TEST_CASE("minimizer validates its configuration") {
  SearchSpace space;
  BoConfig cfg;
  cfg.total_calls = 0;
  CHECK_THROWS_AS(minimize(quadratic, space, cfg), std::invalid_argument);
  cfg = BoConfig{};
  cfg.random_starts = cfg.total_calls + 1;
  CHECK_THROWS_AS(minimize(quadratic, space, cfg), std::invalid_argument);
  SearchSpace bad;
  bad.lower = 0.9;
  bad.upper = 0.5;
  cfg = BoConfig{};
  CHECK_THROWS_AS(minimize(quadratic, bad, cfg), std::invalid_argument);
}
