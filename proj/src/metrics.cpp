#include "entsel/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "entsel/normal.hpp"

namespace entsel {

namespace {

void check_predictions(const std::vector<double>& probs, const std::vector<int>& labels) {
  if (probs.size() != labels.size())
    throw std::invalid_argument("metrics: probs and labels differ in length");
  if (probs.empty()) throw std::invalid_argument("metrics: empty prediction set");
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (!(probs[i] >= 0.0 && probs[i] <= 1.0))
      throw std::invalid_argument("metrics: probability outside [0, 1] at index " +
                                  std::to_string(i));
    if (labels[i] != 0 && labels[i] != 1)
      throw std::invalid_argument("metrics: label must be 0 or 1 at index " +
                                  std::to_string(i));
  }
}

MetricValue ratio(std::int64_t num, std::int64_t den) {
  if (den == 0) return {0.0, true};
  return {static_cast<double>(num) / static_cast<double>(den), false};
}

}  // namespace

ConfusionMatrix confusion_at_threshold(const std::vector<double>& probs,
                                       const std::vector<int>& labels,
                                       double threshold) {
  check_predictions(probs, labels);
  if (!std::isfinite(threshold))
    throw std::invalid_argument("metrics: non-finite threshold");
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const bool predicted = probs[i] >= threshold;
    if (labels[i] == 1)
      predicted ? ++cm.tp : ++cm.fn;
    else
      predicted ? ++cm.fp : ++cm.tn;
  }
  return cm;
}

double select_threshold_max_f(const std::vector<double>& probs,
                              const std::vector<int>& labels) {
  check_predictions(probs, labels);
  const bool any_pos = std::find(labels.begin(), labels.end(), 1) != labels.end();
  const bool any_neg = std::find(labels.begin(), labels.end(), 0) != labels.end();
  if (!any_pos || !any_neg)
    throw std::invalid_argument("select_threshold_max_f: needs both classes present");

  std::vector<double> candidates = probs;
  candidates.push_back(0.0);
  candidates.push_back(1.0);
  std::sort(candidates.begin(), candidates.end());
  candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());

  double best_t = candidates.front();
  double best_f = -1.0;
  for (const double t : candidates) {
    const double f = f_score(confusion_at_threshold(probs, labels, t)).value;
    if (f > best_f) {  // ascending scan, so ties keep the smallest threshold
      best_f = f;
      best_t = t;
    }
  }
  return best_t;
}

MetricValue precision(const ConfusionMatrix& cm) { return ratio(cm.tp, cm.tp + cm.fp); }
MetricValue recall(const ConfusionMatrix& cm) { return ratio(cm.tp, cm.tp + cm.fn); }
MetricValue specificity(const ConfusionMatrix& cm) { return ratio(cm.tn, cm.tn + cm.fp); }

MetricValue balanced_accuracy(const ConfusionMatrix& cm) {
  const MetricValue r = recall(cm);
  const MetricValue s = specificity(cm);
  if (r.degenerate || s.degenerate) return {0.0, true};
  return {balanced_accuracy_from(r.value, s.value), false};
}

MetricValue f_score(const ConfusionMatrix& cm) {
  const MetricValue p = precision(cm);
  const MetricValue r = recall(cm);
  if (p.degenerate || r.degenerate || p.value + r.value == 0.0) return {0.0, true};
  return {f_score_from(p.value, r.value), false};
}

MetricValue mcc(const ConfusionMatrix& cm) {
  const double s1 = static_cast<double>(cm.tp + cm.fp);
  const double s2 = static_cast<double>(cm.tp + cm.fn);
  const double s3 = static_cast<double>(cm.tn + cm.fp);
  const double s4 = static_cast<double>(cm.tn + cm.fn);
  if (s1 == 0.0 || s2 == 0.0 || s3 == 0.0 || s4 == 0.0) return {0.0, true};
  const double num = static_cast<double>(cm.tp) * static_cast<double>(cm.tn) -
                     static_cast<double>(cm.fp) * static_cast<double>(cm.fn);
  return {num / std::sqrt(s1 * s2 * s3 * s4), false};
}

double balanced_accuracy_from(double recall, double specificity) {
  return 0.5 * (recall + specificity);
}

double f_score_from(double precision, double recall) {
  return 2.0 * precision * recall / (precision + recall);
}

MetricReport evaluate_at_threshold(const std::vector<double>& probs,
                                   const std::vector<int>& labels,
                                   double threshold) {
  MetricReport rep;
  rep.threshold = threshold;
  rep.counts = confusion_at_threshold(probs, labels, threshold);
  rep.balanced_accuracy = balanced_accuracy(rep.counts);
  rep.precision = precision(rep.counts);
  rep.recall = recall(rep.counts);
  rep.specificity = specificity(rep.counts);
  rep.f_score = f_score(rep.counts);
  rep.mcc = mcc(rep.counts);
  return rep;
}

// ---------------------------------------------------------------------------
// Exact binomial interval

namespace {

double log_binom_coeff(std::int64_t n, std::int64_t k) {
  return std::lgamma(static_cast<double>(n) + 1.0) -
         std::lgamma(static_cast<double>(k) + 1.0) -
         std::lgamma(static_cast<double>(n - k) + 1.0);
}

// log P[X >= k] for X ~ Binomial(n, p), via log-sum-exp over the pmf terms.
double log_upper_tail(std::int64_t k, std::int64_t n, double p) {
  const double lp = std::log(p);
  const double lq = std::log1p(-p);
  double max_term = -1e300;
  std::vector<double> terms;
  terms.reserve(static_cast<std::size_t>(n - k + 1));
  for (std::int64_t i = k; i <= n; ++i) {
    const double t = log_binom_coeff(n, i) + static_cast<double>(i) * lp +
                     static_cast<double>(n - i) * lq;
    terms.push_back(t);
    max_term = std::max(max_term, t);
  }
  double acc = 0.0;
  for (const double t : terms) acc += std::exp(t - max_term);
  return max_term + std::log(acc);
}

double log_lower_tail(std::int64_t k, std::int64_t n, double p) {
  const double lp = std::log(p);
  const double lq = std::log1p(-p);
  double max_term = -1e300;
  std::vector<double> terms;
  terms.reserve(static_cast<std::size_t>(k + 1));
  for (std::int64_t i = 0; i <= k; ++i) {
    const double t = log_binom_coeff(n, i) + static_cast<double>(i) * lp +
                     static_cast<double>(n - i) * lq;
    terms.push_back(t);
    max_term = std::max(max_term, t);
  }
  double acc = 0.0;
  for (const double t : terms) acc += std::exp(t - max_term);
  return max_term + std::log(acc);
}

}  // namespace

std::pair<double, double> clopper_pearson(std::int64_t k, std::int64_t n, double alpha) {
  if (n <= 0) throw std::invalid_argument("clopper_pearson: n must be positive");
  if (k < 0 || k > n) throw std::invalid_argument("clopper_pearson: k outside [0, n]");
  if (!(alpha > 0.0 && alpha < 1.0))
    throw std::invalid_argument("clopper_pearson: alpha outside (0, 1)");
  const double log_half_alpha = std::log(alpha / 2.0);
  constexpr double kTol = 1e-10;

  double lower = 0.0;
  if (k > 0) {
    // P[X >= k] grows with p; the lower bound is the p where it equals alpha/2.
    double lo = 0.0, hi = 1.0;
    while (hi - lo > kTol) {
      const double mid = 0.5 * (lo + hi);
      (log_upper_tail(k, n, mid) < log_half_alpha ? lo : hi) = mid;
    }
    lower = 0.5 * (lo + hi);
  }

  double upper = 1.0;
  if (k < n) {
    // P[X <= k] shrinks with p; the upper bound is the p where it equals alpha/2.
    double lo = 0.0, hi = 1.0;
    while (hi - lo > kTol) {
      const double mid = 0.5 * (lo + hi);
      (log_lower_tail(k, n, mid) > log_half_alpha ? lo : hi) = mid;
    }
    upper = 0.5 * (lo + hi);
  }
  return {lower, upper};
}

RecallComparison compare_recall(double recall1, std::pair<double, double> ci1,
                                double recall2, std::pair<double, double> ci2) {
  const auto check = [](double point, const std::pair<double, double>& ci, const char* who) {
    if (!(ci.first <= point && point <= ci.second))
      throw std::invalid_argument(std::string("compare_recall: ") + who +
                                  " interval does not bracket its point estimate");
  };
  check(recall1, ci1, "first");
  check(recall2, ci2, "second");

  RecallComparison out;
  out.recall1 = recall1;
  out.recall2 = recall2;
  out.ci1_lower = ci1.first;
  out.ci1_upper = ci1.second;
  out.ci2_lower = ci2.first;
  out.ci2_upper = ci2.second;
  out.se1 = (ci1.second - ci1.first) / (2.0 * 1.96);
  out.se2 = (ci2.second - ci2.first) / (2.0 * 1.96);
  out.delta = recall2 - recall1;
  out.delta_se = std::sqrt(out.se1 * out.se1 + out.se2 * out.se2);
  if (out.delta_se <= 0.0)
    throw std::runtime_error(
        "compare_recall: both intervals are degenerate, Z is undefined");
  out.z = out.delta / out.delta_se;
  out.p = two_sided_p(out.z);
  out.significant = out.p < 0.05;
  return out;
}

}  // namespace entsel
