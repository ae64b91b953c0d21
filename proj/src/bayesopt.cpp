#include "entsel/bayesopt.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>

#include "entsel/format.hpp"
#include "entsel/normal.hpp"
#include "entsel/rng.hpp"

namespace entsel {

namespace {

constexpr double kTwoPi = 6.283185307179586;

// Plain dense Cholesky, lower-triangular, row-major.  Returns false when a
// pivot is not positive (matrix not positive definite at this jitter).
bool cholesky(std::vector<double>& a, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double s = a[i * n + j];
      for (std::size_t k = 0; k < j; ++k) s -= a[i * n + k] * a[j * n + k];
      if (i == j) {
        if (s <= 0.0) return false;
        a[i * n + i] = std::sqrt(s);
      } else {
        a[i * n + j] = s / a[j * n + j];
      }
    }
    for (std::size_t j = i + 1; j < n; ++j) a[i * n + j] = 0.0;
  }
  return true;
}

void forward_solve(const std::vector<double>& l, std::size_t n, std::vector<double>& b) {
  for (std::size_t i = 0; i < n; ++i) {
    double s = b[i];
    for (std::size_t k = 0; k < i; ++k) s -= l[i * n + k] * b[k];
    b[i] = s / l[i * n + i];
  }
}

void backward_solve(const std::vector<double>& l, std::size_t n, std::vector<double>& b) {
  for (std::size_t i = n; i-- > 0;) {
    double s = b[i];
    for (std::size_t k = i + 1; k < n; ++k) s -= l[k * n + i] * b[k];
    b[i] = s / l[i * n + i];
  }
}

}  // namespace

double matern52(double r, double length_scale, double signal_variance) {
  if (r < 0.0) throw std::invalid_argument("matern52: negative distance");
  if (!(length_scale > 0.0) || !(signal_variance > 0.0))
    throw std::invalid_argument("matern52: scales must be positive");
  const double s = std::sqrt(5.0) * r / length_scale;
  return signal_variance * (1.0 + s + s * s / 3.0) * std::exp(-s);
}

GpHyperGrid GpHyperGrid::defaults() {
  GpHyperGrid g;
  g.length_scales.resize(21);
  for (int i = 0; i < 21; ++i)
    g.length_scales[static_cast<std::size_t>(i)] =
        std::pow(10.0, -2.0 + 3.0 * static_cast<double>(i) / 20.0);
  g.signal_variances = {0.25, 1.0, 4.0};
  g.noise_variances = {1e-8, 1e-4, 1e-2};
  return g;
}

GpSurrogate::GpSurrogate(std::vector<double> x, std::vector<double> y,
                         double length_scale, double signal_variance,
                         double noise_variance, bool standardize)
    : x_(std::move(x)),
      y_(std::move(y)),
      length_scale_(length_scale),
      signal_variance_(signal_variance),
      noise_variance_(noise_variance) {
  const std::size_t n = x_.size();
  if (n == 0 || y_.size() != n)
    throw std::invalid_argument("GpSurrogate: x and y must be non-empty and equal-length");
  for (std::size_t i = 0; i < n; ++i)
    if (!std::isfinite(x_[i]) || !std::isfinite(y_[i]))
      throw std::invalid_argument("GpSurrogate: non-finite input");
  if (!(length_scale_ > 0.0) || !(signal_variance_ > 0.0) || noise_variance_ < 0.0)
    throw std::invalid_argument("GpSurrogate: bad hyperparameters");

  if (standardize) {
    for (const double v : y_) y_mean_ += v;
    y_mean_ /= static_cast<double>(n);
    double ss = 0.0;
    for (double& v : y_) {
      v -= y_mean_;
      ss += v * v;
    }
    const double sd = std::sqrt(ss / static_cast<double>(n));
    y_scale_ = sd > 0.0 ? sd : 1.0;  // all-equal targets: center only
    if (sd > 0.0)
      for (double& v : y_) v /= y_scale_;
  }

  // K + sigma_n^2 I, Cholesky factored with escalating jitter.
  std::vector<double> base(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      base[i * n + j] =
          matern52(std::fabs(x_[i] - x_[j]), length_scale_, signal_variance_) +
          (i == j ? noise_variance_ : 0.0);
  double jitter = 0.0;
  while (true) {
    chol_ = base;
    if (jitter > 0.0)
      for (std::size_t i = 0; i < n; ++i) chol_[i * n + i] += jitter;
    if (cholesky(chol_, n)) break;
    jitter = jitter == 0.0 ? 1e-10 : jitter * 10.0;
    if (jitter > 1e-4)
      throw std::runtime_error(
          "GpSurrogate: covariance not positive definite even with jitter 1e-4");
  }

  alpha_ = y_;
  forward_solve(chol_, n, alpha_);
  double quad = 0.0;  // y^T K^{-1} y accumulated as |L^{-1} y|^2
  for (const double v : alpha_) quad += v * v;
  backward_solve(chol_, n, alpha_);

  double log_det_half = 0.0;  // sum of log diagonal = 0.5 * log det K
  for (std::size_t i = 0; i < n; ++i) log_det_half += std::log(chol_[i * n + i]);
  lml_ = -0.5 * quad - log_det_half -
         0.5 * static_cast<double>(n) * std::log(kTwoPi);
}

GpSurrogate::Posterior GpSurrogate::posterior_standardized(double x) const {
  const std::size_t n = x_.size();
  std::vector<double> kstar(n);
  for (std::size_t i = 0; i < n; ++i)
    kstar[i] = matern52(std::fabs(x - x_[i]), length_scale_, signal_variance_);
  Posterior post;
  for (std::size_t i = 0; i < n; ++i) post.mean += kstar[i] * alpha_[i];
  forward_solve(chol_, n, kstar);
  double reduction = 0.0;
  for (const double v : kstar) reduction += v * v;
  post.variance = std::max(signal_variance_ - reduction, 0.0);
  return post;
}

GpSurrogate::Posterior GpSurrogate::posterior(double x) const {
  Posterior post = posterior_standardized(x);
  post.mean = y_mean_ + y_scale_ * post.mean;
  post.variance *= y_scale_ * y_scale_;
  return post;
}

GpSurrogate gp_fit(const std::vector<double>& x, const std::vector<double>& y,
                   const GpHyperGrid& grid) {
  if (x.empty() || x.size() != y.size())
    throw std::invalid_argument("gp_fit: x and y must be non-empty and equal-length");
  for (const double xi : x)
    if (!(xi >= -1e-9 && xi <= 1.0 + 1e-9))
      throw std::invalid_argument("gp_fit: inputs must be normalized to [0, 1]");
  if (grid.length_scales.empty() || grid.signal_variances.empty() ||
      grid.noise_variances.empty())
    throw std::invalid_argument("gp_fit: empty hyperparameter grid");

  const bool all_equal =
      std::all_of(y.begin(), y.end(), [&](double v) { return v == y.front(); });
  if (all_equal) {
    // Degenerate targets carry no scale information; pin sigma_f^2 = 1.
    const double mid_ell = grid.length_scales[grid.length_scales.size() / 2];
    return GpSurrogate(x, y, mid_ell, 1.0, grid.noise_variances.front(), true);
  }

  bool have_best = false;
  double best_lml = 0.0;
  GpSurrogate best({0.0}, {0.0}, 1.0, 1.0, 1e-8, false);  // placeholder
  for (const double ell : grid.length_scales) {
    for (const double sf2 : grid.signal_variances) {
      for (const double sn2 : grid.noise_variances) {
        try {
          GpSurrogate cand(x, y, ell, sf2, sn2, true);
          const double lml = cand.log_marginal_likelihood();
          if (!std::isfinite(lml)) continue;
          if (!have_best || lml > best_lml) {  // ties keep the earlier cell
            best = std::move(cand);
            best_lml = lml;
            have_best = true;
          }
        } catch (const std::runtime_error&) {
          continue;  // this cell is numerically infeasible
        }
      }
    }
  }
  if (!have_best) throw std::runtime_error("gp_fit: no feasible hyperparameter cell");
  return best;
}

double expected_improvement(double mean, double stddev, double best_y, double xi) {
  if (stddev < 0.0) throw std::invalid_argument("expected_improvement: negative stddev");
  if (xi < 0.0) throw std::invalid_argument("expected_improvement: negative xi");
  const double gain = best_y - mean - xi;
  if (stddev == 0.0) return gain > 0.0 ? gain : 0.0;
  const double z = gain / stddev;
  const double ei = gain * normal_cdf(z) + stddev * normal_pdf(z);
  return ei > 0.0 ? ei : 0.0;
}

double expected_improvement(const GpSurrogate& surrogate, double x, double best_y,
                            double xi) {
  const auto post = surrogate.posterior(x);
  return expected_improvement(post.mean, std::sqrt(post.variance), best_y, xi);
}

// ---------------------------------------------------------------------------
// Sequential minimization loop

OptimizationTrace minimize(const std::function<double(double)>& objective,
                           const SearchSpace& space, const BoConfig& config) {
  if (!(space.lower < space.upper))
    throw std::invalid_argument("minimize: search space is empty");
  if (config.total_calls == 0)
    throw std::invalid_argument("minimize: total_calls must be positive");
  if (config.random_starts == 0 || config.random_starts > config.total_calls)
    throw std::invalid_argument(
        "minimize: random_starts must be in [1, total_calls]");
  if (config.candidate_grid_size < 2)
    throw std::invalid_argument("minimize: candidate grid needs at least 2 points");
  if (config.xi < 0.0) throw std::invalid_argument("minimize: negative xi");

  Rng rng(config.seed);
  const double width = space.upper - space.lower;
  const auto from_unit = [&](double u) { return space.lower + u * width; };

  OptimizationTrace trace;
  std::vector<double> xs, ys;            // all recorded calls (normalized x)
  std::vector<std::size_t> pending;      // failed calls awaiting a worst value
  bool have_best = false;
  double worst_y = 0.0;
  std::size_t consecutive_failures = 0;

  for (std::size_t call = 1; call <= config.total_calls; ++call) {
    const bool random_phase = call <= config.random_starts;
    TraceEntry entry;
    entry.call = call;
    entry.phase = random_phase ? CallPhase::random : CallPhase::guided;

    double x_unit;
    if (random_phase || !have_best) {
      // No incumbent means nothing to improve on — fall back to a random draw
      // (only possible while early calls keep failing).
      x_unit = rng.uniform();
    } else {
      const GpSurrogate fit = gp_fit(xs, ys);
      entry.gp_length_scale = fit.length_scale();
      entry.gp_signal_variance = fit.signal_variance();
      entry.gp_noise_variance = fit.noise_variance();
      const double best_std = (trace.best_y - fit.target_mean()) / fit.target_scale();

      // Candidates: an even grid over [0, 1] plus midpoints of the sorted
      // prior points, scanned in ascending order so ties pick the lowest x.
      std::vector<double> candidates;
      candidates.reserve(config.candidate_grid_size + xs.size());
      for (std::size_t i = 0; i < config.candidate_grid_size; ++i)
        candidates.push_back(static_cast<double>(i) /
                             static_cast<double>(config.candidate_grid_size - 1));
      {
        std::vector<double> sorted_x = xs;
        std::sort(sorted_x.begin(), sorted_x.end());
        for (std::size_t i = 1; i < sorted_x.size(); ++i)
          if (sorted_x[i] > sorted_x[i - 1])
            candidates.push_back(0.5 * (sorted_x[i] + sorted_x[i - 1]));
      }
      std::sort(candidates.begin(), candidates.end());

      double best_ei = -1.0;
      x_unit = candidates.front();
      for (const double c : candidates) {
        const auto post = fit.posterior_standardized(c);
        const double ei = expected_improvement(post.mean, std::sqrt(post.variance),
                                               best_std, config.xi);
        if (ei > best_ei) {
          best_ei = ei;
          x_unit = c;
        }
      }

      // A proposal that merely re-samples a known point is swapped for the
      // grid point we know least about.
      const double x_orig = from_unit(x_unit);
      bool duplicate = false;
      for (const double prev : xs)
        if (std::fabs(x_orig - from_unit(prev)) < 1e-6) {
          duplicate = true;
          break;
        }
      if (duplicate) {
        double best_var = -1.0;
        for (std::size_t i = 0; i < config.candidate_grid_size; ++i) {
          const double c = static_cast<double>(i) /
                           static_cast<double>(config.candidate_grid_size - 1);
          const double var = fit.posterior_standardized(c).variance;
          if (var > best_var) {
            best_var = var;
            x_unit = c;
          }
        }
      }
    }

    entry.x = from_unit(x_unit);
    double y = 0.0;
    bool failed = false;
    try {
      y = objective(entry.x);
      if (!std::isfinite(y)) failed = true;
    } catch (const std::exception&) {
      failed = true;
    }

    if (failed) {
      ++consecutive_failures;
      if (consecutive_failures >= 3)
        throw std::runtime_error("minimize: 3 consecutive objective failures at call " +
                                 std::to_string(call));
      entry.failed = true;
      if (have_best) {
        entry.y = worst_y;
      } else {
        pending.push_back(trace.entries.size());  // patched at first success
        entry.y = 0.0;
      }
    } else {
      consecutive_failures = 0;
      entry.y = y;
      if (!have_best) {
        have_best = true;
        worst_y = y;
        trace.best_x = entry.x;
        trace.best_y = y;
        trace.best_call = call;
        entry.is_best_so_far = true;
        for (const std::size_t idx : pending) {
          trace.entries[idx].y = worst_y;
          ys[idx] = worst_y;
        }
        pending.clear();
      } else {
        worst_y = std::max(worst_y, y);
        if (y < trace.best_y) {
          trace.best_x = entry.x;
          trace.best_y = y;
          trace.best_call = call;
          entry.is_best_so_far = true;
        }
      }
    }

    xs.push_back(x_unit);
    ys.push_back(entry.y);
    trace.entries.push_back(entry);
  }

  if (!have_best)
    throw std::runtime_error("minimize: every objective evaluation failed");
  return trace;
}

void save_trace_csv(const OptimizationTrace& trace, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_trace_csv: cannot open " + path.string());
  out << "call,phase,proportion,objective,is_best_so_far\n";
  for (const auto& e : trace.entries)
    out << e.call << "," << (e.phase == CallPhase::random ? "random" : "guided") << ","
        << g17(e.x) << "," << g17(e.y) << "," << (e.is_best_so_far ? 1 : 0) << "\n";
  if (!out) throw std::runtime_error("save_trace_csv: write failed for " + path.string());
}

OptimizationTrace load_trace_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_trace_csv: cannot open " + path.string());
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line) || line != "call,phase,proportion,objective,is_best_so_far")
    throw std::runtime_error("load_trace_csv: bad header in " + path.string());
  ++line_no;
  OptimizationTrace trace;
  bool have_best = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = "load_trace_csv: row " + std::to_string(line_no);
    const auto fields = split_fields(line);
    if (fields.size() != 5) throw std::runtime_error(where + ": expected 5 fields");
    TraceEntry e;
    e.call = parse_u64(fields[0], where);
    if (e.call != trace.entries.size() + 1)
      throw std::runtime_error(where + ": calls out of order");
    if (fields[1] == "random")
      e.phase = CallPhase::random;
    else if (fields[1] == "guided")
      e.phase = CallPhase::guided;
    else
      throw std::runtime_error(where + ": unknown phase '" + fields[1] + "'");
    e.x = parse_double(fields[2], where);
    e.y = parse_double(fields[3], where);
    if (fields[4] == "1")
      e.is_best_so_far = true;
    else if (fields[4] != "0")
      throw std::runtime_error(where + ": is_best_so_far must be 0 or 1");
    if (e.is_best_so_far) {
      trace.best_x = e.x;
      trace.best_y = e.y;
      trace.best_call = e.call;
      have_best = true;
    }
    trace.entries.push_back(e);
  }
  if (!have_best || trace.entries.empty())
    throw std::runtime_error("load_trace_csv: trace has no best entry");
  return trace;
}

}  // namespace entsel
