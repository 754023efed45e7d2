#pragma once

// Central finite differences, used as the independent oracle for every
// analytic gradient in the test suites.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

namespace diffprune::testing {

inline constexpr double kFdStep = 1e-5;

/// d f / d x_i for every coordinate of x, by (f(x + h e_i) - f(x - h e_i)) / 2h.
/// x is perturbed in place and restored.
template <class F>
std::vector<double> central_diff(std::span<double> x, F&& f, double h = kFdStep) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double fp = f();
    x[i] = orig - h;
    const double fm = f();
    x[i] = orig;
    out[i] = (fp - fm) / (2.0 * h);
  }
  return out;
}

/// max_i |a_i - b_i| / max(max|a|, max|b|, 1e-6): relative to the gradient's
/// own scale so that near-zero coordinates do not amplify rounding noise.
/// The floor covers gradients that are exactly zero (e.g. key biases under
/// softmax), where the difference quotient is pure rounding.
inline double rel_error(std::span<const double> a, std::span<const double> b) {
  double diff = 0.0;
  double scale = 1e-6;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max({scale, std::abs(a[i]), std::abs(b[i])});
  }
  return diff / scale;
}

}  // namespace diffprune::testing
