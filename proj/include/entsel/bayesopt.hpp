#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

namespace entsel {

struct SearchSpace {
  double lower = 0.5;
  double upper = 0.9;
};

struct BoConfig {
  std::size_t total_calls = 50;    // random starts count toward this budget
  std::size_t random_starts = 15;
  std::uint64_t seed = 0;
  double xi = 0.01;  // exploration margin, in standardized target units
  std::size_t candidate_grid_size = 1001;
};

struct GpHyperGrid {
  std::vector<double> length_scales;     // of the normalized [0,1] domain
  std::vector<double> signal_variances;  // of the standardized targets
  std::vector<double> noise_variances;   // idem
  // 21 log-spaced length scales in [1e-2, 1e1]; sigma_f^2 in {0.25, 1, 4};
  // sigma_n^2 in {1e-8, 1e-4, 1e-2}.
  static GpHyperGrid defaults();
};

// Matern nu=5/2 covariance as a function of distance r >= 0.
double matern52(double r, double length_scale, double signal_variance);

// One-dimensional GP regressor with a Matern 5/2 kernel.  Inputs are
// expected in [0, 1]; targets are mean-centered and variance-scaled
// internally unless standardize is false (the scale division is skipped when
// all targets are equal).  The noisy covariance K + sigma_n^2 I is Cholesky
// factored, with jitter escalation (x10 per retry up to 1e-4) before giving
// up.
class GpSurrogate {
 public:
  GpSurrogate(std::vector<double> x, std::vector<double> y, double length_scale,
              double signal_variance, double noise_variance, bool standardize = true);

  struct Posterior {
    double mean = 0.0;
    double variance = 0.0;  // latent (noise-free), clamped at 0
  };

  Posterior posterior(double x) const;               // original target units
  Posterior posterior_standardized(double x) const;  // internal units

  double log_marginal_likelihood() const { return lml_; }
  double length_scale() const { return length_scale_; }
  double signal_variance() const { return signal_variance_; }
  double noise_variance() const { return noise_variance_; }
  double target_mean() const { return y_mean_; }
  double target_scale() const { return y_scale_; }
  std::size_t size() const { return x_.size(); }

 private:
  std::vector<double> x_;
  std::vector<double> y_;  // standardized
  double y_mean_ = 0.0, y_scale_ = 1.0;
  double length_scale_, signal_variance_, noise_variance_;
  std::vector<double> chol_;   // lower-triangular factor, row-major n x n
  std::vector<double> alpha_;  // (K + sigma_n^2 I)^{-1} y
  double lml_ = 0.0;
};

// Grid search over the hyperparameter grid, maximizing log marginal
// likelihood (ties keep the earlier cell).  All-equal targets short-circuit
// to a flat surrogate with sigma_f^2 = 1.
GpSurrogate gp_fit(const std::vector<double>& x, const std::vector<double>& y,
                   const GpHyperGrid& grid = GpHyperGrid::defaults());

// Expected improvement for minimization, given a posterior mean/stddev, the
// best observed objective value, and an exploration margin.
double expected_improvement(double mean, double stddev, double best_y, double xi);
double expected_improvement(const GpSurrogate& surrogate, double x, double best_y,
                            double xi);

enum class CallPhase { random, guided };

struct TraceEntry {
  std::size_t call = 0;  // 1-based
  CallPhase phase = CallPhase::random;
  double x = 0.0;
  double y = 0.0;  // substituted with the worst observed value on failure
  bool failed = false;
  bool is_best_so_far = false;
  // Hyperparameters of the surrogate that proposed this call (0 for random).
  double gp_length_scale = 0.0, gp_signal_variance = 0.0, gp_noise_variance = 0.0;
};

struct OptimizationTrace {
  std::vector<TraceEntry> entries;
  double best_x = 0.0;
  double best_y = 0.0;
  std::size_t best_call = 0;
};

// Sequential model-based minimization of a 1-D objective: `random_starts`
// seeded uniform draws, then EI-guided proposals from a freshly fitted GP,
// spending exactly `total_calls` objective evaluations.  EI is maximized
// over an even grid plus the midpoints of the sorted prior points; a
// proposal within 1e-6 of an earlier x is swapped for the grid point of
// maximal posterior variance.  Failed calls (exception or non-finite value)
// enter the record with the worst observed objective; three consecutive
// failures abort.
OptimizationTrace minimize(const std::function<double(double)>& objective,
                           const SearchSpace& space, const BoConfig& config);

// CSV schema: call,phase,proportion,objective,is_best_so_far.
void save_trace_csv(const OptimizationTrace& trace, const std::filesystem::path& path);
OptimizationTrace load_trace_csv(const std::filesystem::path& path);

}  // namespace entsel
