// Thresholded confusion counts, derived metrics, exact binomial intervals,
// and the recall Z-test.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "entsel/metrics.hpp"
#include "entsel/rng.hpp"

using namespace entsel;

namespace {

// Naive counting oracle.
ConfusionMatrix ref_confusion(const std::vector<double>& probs,
                              const std::vector<int>& labels, double t) {
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const bool pos = probs[i] >= t;
    if (labels[i] == 1)
      (pos ? cm.tp : cm.fn)++;
    else
      (pos ? cm.fp : cm.tn)++;
  }
  return cm;
}

double ref_f_or_zero(const ConfusionMatrix& cm) {
  const double denom_p = static_cast<double>(cm.tp + cm.fp);
  const double denom_r = static_cast<double>(cm.tp + cm.fn);
  if (denom_p == 0.0 || denom_r == 0.0) return 0.0;
  const double p = static_cast<double>(cm.tp) / denom_p;
  const double r = static_cast<double>(cm.tp) / denom_r;
  if (p + r == 0.0) return 0.0;
  return 2.0 * p * r / (p + r);
}

// Exhaustive threshold search over the documented candidate set.
double ref_best_threshold(const std::vector<double>& probs,
                          const std::vector<int>& labels) {
  std::vector<double> cands = probs;
  cands.push_back(0.0);
  cands.push_back(1.0);
  std::sort(cands.begin(), cands.end());
  cands.erase(std::unique(cands.begin(), cands.end()), cands.end());
  double best_f = -1.0, best_t = 0.0;
  for (const double t : cands) {
    const double f = ref_f_or_zero(ref_confusion(probs, labels, t));
    if (f > best_f) {  // strict: ties keep the smallest threshold
      best_f = f;
      best_t = t;
    }
  }
  return best_t;
}

// Binomial tail oracle on long doubles with Pascal-triangle coefficients —
// no logs, no lgamma, nothing shared with the production code path.
std::vector<std::vector<long double>> pascal(int n_max) {
  std::vector<std::vector<long double>> c(static_cast<std::size_t>(n_max) + 1);
  for (int n = 0; n <= n_max; ++n) {
    c[static_cast<std::size_t>(n)].assign(static_cast<std::size_t>(n) + 1, 1.0L);
    for (int k = 1; k < n; ++k)
      c[static_cast<std::size_t>(n)][static_cast<std::size_t>(k)] =
          c[static_cast<std::size_t>(n) - 1][static_cast<std::size_t>(k) - 1] +
          c[static_cast<std::size_t>(n) - 1][static_cast<std::size_t>(k)];
  }
  return c;
}

long double tail_ge(const std::vector<std::vector<long double>>& c, int k, int n,
                    long double p) {
  long double acc = 0.0L;
  for (int i = k; i <= n; ++i)
    acc += c[static_cast<std::size_t>(n)][static_cast<std::size_t>(i)] *
           std::pow(p, static_cast<long double>(i)) *
           std::pow(1.0L - p, static_cast<long double>(n - i));
  return acc;
}

long double tail_le(const std::vector<std::vector<long double>>& c, int k, int n,
                    long double p) {
  long double acc = 0.0L;
  for (int i = 0; i <= k; ++i)
    acc += c[static_cast<std::size_t>(n)][static_cast<std::size_t>(i)] *
           std::pow(p, static_cast<long double>(i)) *
           std::pow(1.0L - p, static_cast<long double>(n - i));
  return acc;
}

std::pair<double, double> ref_clopper_pearson(
    const std::vector<std::vector<long double>>& c, int k, int n, double alpha) {
  const long double half = static_cast<long double>(alpha) / 2.0L;
  long double lo = 0.0L;
  if (k > 0) {
    long double a = 0.0L, b = 1.0L;
    for (int it = 0; it < 200; ++it) {
      const long double mid = 0.5L * (a + b);
      (tail_ge(c, k, n, mid) < half ? a : b) = mid;
    }
    lo = 0.5L * (a + b);
  }
  long double hi = 1.0L;
  if (k < n) {
    long double a = 0.0L, b = 1.0L;
    for (int it = 0; it < 200; ++it) {
      const long double mid = 0.5L * (a + b);
      (tail_le(c, k, n, mid) > half ? a : b) = mid;
    }
    hi = 0.5L * (a + b);
  }
  return {static_cast<double>(lo), static_cast<double>(hi)};
}

}  // namespace

TEST_CASE("confusion counts match the counting oracle") {
  Rng rng(91);
  for (int rep = 0; rep < 50; ++rep) {
    const std::size_t n = 1 + rng.uniform_index(40);
    std::vector<double> probs(n);
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
      // Quantized so thresholds collide with probabilities regularly.
      probs[i] = static_cast<double>(rng.uniform_index(11)) / 10.0;
      labels[i] = rng.uniform() < 0.5 ? 0 : 1;
    }
    const double t = static_cast<double>(rng.uniform_index(11)) / 10.0;
    const ConfusionMatrix got = confusion_at_threshold(probs, labels, t);
    const ConfusionMatrix want = ref_confusion(probs, labels, t);
    CHECK(got.tp == want.tp);
    CHECK(got.fp == want.fp);
    CHECK(got.tn == want.tn);
    CHECK(got.fn == want.fn);
    CHECK(got.tp + got.fp + got.tn + got.fn == static_cast<std::int64_t>(n));
  }
  CHECK_THROWS_AS(confusion_at_threshold({0.5}, {2}, 0.5), std::invalid_argument);
  CHECK_THROWS_AS(confusion_at_threshold({1.5}, {1}, 0.5), std::invalid_argument);
  CHECK_THROWS_AS(confusion_at_threshold({}, {}, 0.5), std::invalid_argument);
}

TEST_CASE("boundary probabilities predict positive") {
  const ConfusionMatrix cm = confusion_at_threshold({0.3, 0.3}, {1, 0}, 0.3);
  CHECK(cm.tp == 1);  // p == t counts as positive
  CHECK(cm.fp == 1);
}

TEST_CASE("max-F threshold matches exhaustive search") {
  Rng rng(1213);
  for (int rep = 0; rep < 60; ++rep) {
    const std::size_t n = 6 + rng.uniform_index(30);
    std::vector<double> probs(n);
    std::vector<int> labels(n);
    bool has0 = false, has1 = false;
    for (std::size_t i = 0; i < n; ++i) {
      probs[i] = static_cast<double>(rng.uniform_index(7)) / 6.0;
      labels[i] = rng.uniform() < 0.45 ? 1 : 0;
      (labels[i] == 1 ? has1 : has0) = true;
    }
    if (!has0 || !has1) continue;
    const double got = select_threshold_max_f(probs, labels);
    const double want = ref_best_threshold(probs, labels);
    CHECK(got == want);
  }
  CHECK_THROWS_AS(select_threshold_max_f({0.2, 0.7}, {1, 1}), std::invalid_argument);
}

TEST_CASE("derived metrics against hand computations") {
  ConfusionMatrix cm;
  cm.tp = 30;
  cm.fp = 10;
  cm.tn = 40;
  cm.fn = 20;
  CHECK(precision(cm).value == doctest::Approx(0.75));
  CHECK(recall(cm).value == doctest::Approx(0.6));
  CHECK(specificity(cm).value == doctest::Approx(0.8));
  CHECK(balanced_accuracy(cm).value == doctest::Approx(0.7));
  CHECK(f_score(cm).value == doctest::Approx(2.0 * 0.75 * 0.6 / 1.35));
  const double mcc_want =
      (30.0 * 40.0 - 10.0 * 20.0) /
      std::sqrt((30.0 + 10.0) * (30.0 + 20.0) * (40.0 + 10.0) * (40.0 + 20.0));
  CHECK(mcc(cm).value == doctest::Approx(mcc_want).epsilon(1e-12));
  CHECK(!recall(cm).degenerate);
}

TEST_CASE("published-style summary arithmetic reproduces") {
  // Balanced accuracy from sensitivity/specificity and F from
  // precision/recall, checked against independently reported roundings.
  CHECK(balanced_accuracy_from(0.6597, 0.7668) ==
        doctest::Approx(0.7132).epsilon(5e-4));
  CHECK(balanced_accuracy_from(0.6597, 0.7668) ==
        doctest::Approx(0.71325).epsilon(1e-10));
  CHECK(f_score_from(0.7077, 0.6597) == doctest::Approx(0.6829).epsilon(5e-4));
}

TEST_CASE("degenerate denominators flag instead of dividing by zero") {
  ConfusionMatrix cm;  // everything zero
  CHECK(precision(cm).degenerate);
  CHECK(recall(cm).degenerate);
  CHECK(specificity(cm).degenerate);
  CHECK(balanced_accuracy(cm).degenerate);
  CHECK(f_score(cm).degenerate);
  CHECK(precision(cm).value == 0.0);

  cm.tn = 5;  // no positives anywhere
  CHECK(recall(cm).degenerate);
  CHECK(!specificity(cm).degenerate);
  CHECK(mcc(cm).value == 0.0);  // zero marginal convention
}

TEST_CASE("mcc is zero for a chance-level classifier") {
  ConfusionMatrix cm;
  cm.tp = 25;
  cm.fp = 25;
  cm.tn = 25;
  cm.fn = 25;
  CHECK(mcc(cm).value == 0.0);
}

TEST_CASE("evaluate_at_threshold bundles counts and metrics") {
  const std::vector<double> probs{0.9, 0.8, 0.4, 0.3, 0.6, 0.2};
  const std::vector<int> labels{1, 1, 1, 0, 0, 0};
  const MetricReport rep = evaluate_at_threshold(probs, labels, 0.5);
  CHECK(rep.threshold == 0.5);
  CHECK(rep.counts.tp == 2);
  CHECK(rep.counts.fn == 1);
  CHECK(rep.counts.fp == 1);
  CHECK(rep.counts.tn == 2);
  CHECK(rep.recall.value == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("binomial interval endpoints for boundary counts") {
  // Closed form for k = 0: upper = 1 - (alpha/2)^(1/n).  The production
  // bisection stops at an interval width of 1e-10, so compare to that
  // resolution, not beyond it.
  const double upper_0_10 = 0.30849710781876083;
  const auto zero = clopper_pearson(0, 10);
  CHECK(zero.first == 0.0);
  CHECK(std::fabs(zero.second - upper_0_10) <= 1e-9);
  const auto full = clopper_pearson(10, 10);
  CHECK(std::fabs(full.first - (1.0 - upper_0_10)) <= 1e-9);
  CHECK(full.second == 1.0);

  CHECK_THROWS_AS(clopper_pearson(1, 0), std::invalid_argument);
  CHECK_THROWS_AS(clopper_pearson(5, 4), std::invalid_argument);
  CHECK_THROWS_AS(clopper_pearson(1, 4, 1.5), std::invalid_argument);
}

TEST_CASE("binomial intervals match the long-double tail oracle") {
  const auto c = pascal(50);
  for (int n : {1, 2, 3, 5, 8, 13, 21, 34, 50}) {
    for (int k = 0; k <= n; ++k) {
      const auto got = clopper_pearson(k, n);
      const auto want = ref_clopper_pearson(c, k, n, 0.05);
      CHECK(std::fabs(got.first - want.first) <= 1e-8);
      CHECK(std::fabs(got.second - want.second) <= 1e-8);
      // The interval brackets the point estimate.
      const double phat = static_cast<double>(k) / static_cast<double>(n);
      CHECK(got.first <= phat + 1e-12);
      CHECK(got.second >= phat - 1e-12);
    }
  }
  // A different confidence level changes the bounds consistently.
  const auto tight = clopper_pearson(8, 20, 0.01);
  const auto loose = clopper_pearson(8, 20, 0.10);
  CHECK(tight.first < loose.first);
  CHECK(tight.second > loose.second);
  const auto want = ref_clopper_pearson(c, 8, 20, 0.01);
  CHECK(std::fabs(tight.first - want.first) <= 1e-8);
  CHECK(std::fabs(tight.second - want.second) <= 1e-8);
}

TEST_CASE("recall comparison reproduces published Z statistics") {
  {
    const RecallComparison rc = compare_recall(0.2589, {0.2255, 0.2923}, 0.3185,
                                               {0.2830, 0.3540});
    CHECK(rc.z == doctest::Approx(2.3966).epsilon(0.001 / 2.3966));
    CHECK(rc.p == doctest::Approx(0.0165).epsilon(0.0005 / 0.0165));
    CHECK(rc.significant);
    CHECK(rc.delta == doctest::Approx(0.3185 - 0.2589).epsilon(1e-12));
  }
  {
    const RecallComparison rc = compare_recall(0.6675, {0.6625, 0.6725}, 0.7300,
                                               {0.7253, 0.7347});
    CHECK(rc.z == doctest::Approx(17.8514).epsilon(0.01 / 17.8514));
    CHECK(rc.p < 1e-6);
    CHECK(rc.significant);
  }
  {
    // Wide overlapping intervals: same direction, no significance.
    const RecallComparison rc =
        compare_recall(0.50, {0.30, 0.70}, 0.55, {0.35, 0.75});
    CHECK(rc.z > 0.0);
    CHECK(!rc.significant);
    CHECK(rc.p > 0.05);
  }
}

TEST_CASE("identical inputs give z zero and p one") {
  const RecallComparison rc = compare_recall(0.5, {0.4, 0.6}, 0.5, {0.4, 0.6});
  CHECK(rc.z == 0.0);
  CHECK(rc.p == 1.0);
  CHECK(!rc.significant);
}

TEST_CASE("recall comparison validates its inputs") {
  // Point estimate outside its interval.
  CHECK_THROWS_AS(compare_recall(0.9, {0.4, 0.6}, 0.5, {0.4, 0.6}),
                  std::invalid_argument);
  // Inverted interval.
  CHECK_THROWS_AS(compare_recall(0.5, {0.6, 0.4}, 0.5, {0.4, 0.6}),
                  std::invalid_argument);
  // Zero-width intervals leave the test statistic undefined.
  CHECK_THROWS_AS(compare_recall(0.5, {0.5, 0.5}, 0.6, {0.6, 0.6}),
                  std::runtime_error);
}
