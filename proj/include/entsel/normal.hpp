#pragma once

#include <cmath>

namespace entsel {

// Standard normal CDF via erfc: accurate in both tails.
inline double normal_cdf(double x) {
  return 0.5 * std::erfc(-x / 1.4142135623730951);
}

inline double normal_pdf(double x) {
  return std::exp(-0.5 * x * x) / 2.5066282746310002;  // sqrt(2*pi)
}

// Two-sided tail probability of |Z| under the standard normal,
// 2 * (1 - Phi(|z|)) computed without cancellation.
inline double two_sided_p(double z) {
  return std::erfc(std::fabs(z) / 1.4142135623730951);
}

}  // namespace entsel
