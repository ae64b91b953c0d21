#pragma once

#include <cstdint>
#include <utility>
#include <vector>

namespace entsel {

struct ConfusionMatrix {
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  std::int64_t tn = 0;
  std::int64_t fn = 0;
  std::int64_t total() const { return tp + fp + tn + fn; }
};

// Positive prediction iff p(abnormal) >= threshold.
ConfusionMatrix confusion_at_threshold(const std::vector<double>& probs,
                                       const std::vector<int>& labels,
                                       double threshold);

// Smallest threshold (among the distinct predicted probabilities plus {0, 1})
// that maximizes the F-score on the given predictions.
double select_threshold_max_f(const std::vector<double>& probs,
                              const std::vector<int>& labels);

// A ratio with an undefined denominator carries value 0 and the degenerate
// flag instead of NaN.
struct MetricValue {
  double value = 0.0;
  bool degenerate = false;
};

MetricValue precision(const ConfusionMatrix& cm);
MetricValue recall(const ConfusionMatrix& cm);         // sensitivity
MetricValue specificity(const ConfusionMatrix& cm);
MetricValue balanced_accuracy(const ConfusionMatrix& cm);
MetricValue f_score(const ConfusionMatrix& cm);
MetricValue mcc(const ConfusionMatrix& cm);

// Pure arithmetic helpers on already-computed rates.
double balanced_accuracy_from(double recall, double specificity);
double f_score_from(double precision, double recall);

struct MetricReport {
  double threshold = 0.5;
  ConfusionMatrix counts;
  MetricValue balanced_accuracy, precision, recall, specificity, f_score, mcc;
};

MetricReport evaluate_at_threshold(const std::vector<double>& probs,
                                   const std::vector<int>& labels,
                                   double threshold);

// Exact (Clopper-Pearson) two-sided binomial confidence interval for k
// successes in n trials; bounds solved by bisection on the log-space
// binomial tails to 1e-10.  Lower bound is 0 when k = 0, upper is 1 when
// k = n.
std::pair<double, double> clopper_pearson(std::int64_t k, std::int64_t n,
                                          double alpha = 0.05);

// Z-test on two proportions whose standard errors are recovered from
// confidence-interval widths: SE = (upper - lower) / (2 * 1.96).
struct RecallComparison {
  double recall1 = 0.0, recall2 = 0.0;
  double ci1_lower = 0.0, ci1_upper = 0.0;
  double ci2_lower = 0.0, ci2_upper = 0.0;
  double se1 = 0.0, se2 = 0.0;
  double delta = 0.0;     // recall2 - recall1
  double delta_se = 0.0;  // sqrt(se1^2 + se2^2)
  double z = 0.0;
  double p = 1.0;  // two-sided
  bool significant = false;  // p < 0.05
};

RecallComparison compare_recall(double recall1, std::pair<double, double> ci1,
                                double recall2, std::pair<double, double> ci2);

}  // namespace entsel
