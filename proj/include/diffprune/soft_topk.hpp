#pragma once

// Budgeted soft top-K: alpha_i = sigmoid(s_i / tau - b) with the offset b
// solved so that sum(alpha) == K. Gradients come from implicit
// differentiation of the budget constraint, so the backward pass is the exact
// derivative of what the forward pass computed.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "diffprune/autodiff.hpp"
#include "diffprune/error.hpp"

namespace diffprune {

struct RetentionWeights {
  std::vector<double> alpha;
  std::size_t budget_k = 0;
  double threshold_b = 0.0;

  double mass() const { return std::accumulate(alpha.begin(), alpha.end(), 0.0); }
};

namespace detail {

inline void check_scores(std::span<const double> s) {
  for (double v : s) {
    if (!std::isfinite(v)) throw NumericError("score vector contains a non-finite entry");
  }
}

inline double budget_residual(std::span<const double> z, double b, double k) {
  double acc = 0.0;
  for (double zi : z) acc += ad::detail::stable_sigmoid(zi - b);
  return acc - k;
}

}  // namespace detail

inline constexpr double kBisectionMargin = 40.0;
inline constexpr int kBisectionMaxIter = 200;
inline constexpr double kBudgetTolerance = 1e-8;
inline constexpr double kSaturationFloor = 1e-12;

inline RetentionWeights soft_topk_forward(std::span<const double> s, std::size_t k, double tau) {
  const std::size_t n = s.size();
  if (k < 1 || k >= n) {
    throw ConfigError("soft_topk: budget K=" + std::to_string(k) + " outside [1, " +
                      std::to_string(n) + ")");
  }
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("soft_topk: temperature must be > 0");
  detail::check_scores(s);

  std::vector<double> z(n);
  for (std::size_t i = 0; i < n; ++i) z[i] = s[i] / tau;
  const auto [zmin, zmax] = std::minmax_element(z.begin(), z.end());
  const double kd = static_cast<double>(k);

  // residual(b) is strictly decreasing in b: positive at lo, negative at hi.
  double lo = *zmin - kBisectionMargin;
  double hi = *zmax + kBisectionMargin;
  double f_lo = detail::budget_residual(z, lo, kd);
  double f_hi = detail::budget_residual(z, hi, kd);
  if (!(f_lo > 0.0 && f_hi < 0.0)) throw NumericError("soft_topk: bisection bracket does not contain the root");

  // Run to bracket collapse rather than a loose residual so that finite
  // differences through the solve see a smooth function.
  for (int it = 0; it < kBisectionMaxIter; ++it) {
    const double mid = lo + 0.5 * (hi - lo);
    if (mid <= lo || mid >= hi) break;
    const double f_mid = detail::budget_residual(z, mid, kd);
    if (f_mid == 0.0) {
      lo = hi = mid;
      f_lo = f_hi = 0.0;
      break;
    }
    if (f_mid > 0.0) {
      lo = mid;
      f_lo = f_mid;
    } else {
      hi = mid;
      f_hi = f_mid;
    }
  }
  const double b = std::abs(f_lo) <= std::abs(f_hi) ? lo : hi;

  RetentionWeights w;
  w.budget_k = k;
  w.threshold_b = b;
  w.alpha.resize(n);
  for (std::size_t i = 0; i < n; ++i) w.alpha[i] = ad::detail::stable_sigmoid(z[i] - b);
  if (std::abs(w.mass() - kd) > kBudgetTolerance) {
    throw NumericError("soft_topk: budget violated, |sum(alpha) - K| = " + std::to_string(std::abs(w.mass() - kd)));
  }
  return w;
}

/// dL/ds from dL/dalpha. With g_i = alpha_i (1 - alpha_i) and G = sum g:
///   dL/ds_i = g_i (u_i - sum_j u_j g_j / G) / tau
inline std::vector<double> soft_topk_backward(const RetentionWeights& w, std::span<const double> upstream,
                                              double tau) {
  const std::size_t n = w.alpha.size();
  if (upstream.size() != n) throw ShapeError("soft_topk_backward: upstream length mismatch");
  std::vector<double> g(n);
  double big_g = 0.0;
  double ug = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    g[i] = w.alpha[i] * (1.0 - w.alpha[i]);
    big_g += g[i];
    ug += upstream[i] * g[i];
  }
  std::vector<double> ds(n, 0.0);
  if (big_g < kSaturationFloor) return ds;
  const double mean_u = ug / big_g;
  for (std::size_t i = 0; i < n; ++i) ds[i] = g[i] * (upstream[i] - mean_u) / tau;
  return ds;
}

/// Indices of the K largest scores, ties broken towards the lower index,
/// returned in ascending index order.
inline std::vector<std::size_t> topk_indices(std::span<const double> s, std::size_t k) {
  if (k < 1 || k > s.size()) {
    throw ConfigError("top-K: budget K=" + std::to_string(k) + " outside [1, " + std::to_string(s.size()) + "]");
  }
  detail::check_scores(s);
  std::vector<std::size_t> order(s.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

inline std::vector<double> hard_topk_mask(std::span<const double> s, std::size_t k) {
  std::vector<double> m(s.size(), 0.0);
  for (std::size_t i : topk_indices(s, k)) m[i] = 1.0;
  return m;
}

struct TemperatureSchedule {
  double tau_start = 2.0;
  double tau_end = 0.1;
  std::size_t total_steps = 2000;

  void validate() const {
    if (!(tau_end > 0.0) || !(tau_start >= tau_end)) {
      throw ConfigError("temperature schedule needs tau_start >= tau_end > 0");
    }
    if (total_steps == 0) throw ConfigError("temperature schedule needs total_steps > 0");
  }
};

/// Cosine annealing, held at tau_end after total_steps.
inline double tau_at(const TemperatureSchedule& sch, std::size_t step) {
  const double t = static_cast<double>(std::min(step, sch.total_steps)) / static_cast<double>(sch.total_steps);
  return sch.tau_end + 0.5 * (sch.tau_start - sch.tau_end) * (1.0 + std::cos(std::numbers::pi * t));
}

/// Soft top-K as a tape node. `scores` must be a vector of length N; the
/// output is the length-N retention vector. If `out` is given it receives
/// the solved weights (for budget auditing).
inline ad::NodeId soft_topk(ad::Graph& g, ad::NodeId scores, std::size_t k, double tau,
                            RetentionWeights* out = nullptr) {
  auto scope = g.scope("soft_topk");
  RetentionWeights solved;
  auto node = g.custom(
      "soft_topk", {scores},
      [&](std::span<const Tensor* const> in) {
        const Tensor& s = *in[0];
        if (s.rank() != 1) throw ShapeError("soft_topk expects a score vector, got " + shape_str(s.shape()));
        solved = soft_topk_forward(s.data(), k, tau);
        return Tensor::vector(solved.alpha);
      },
      [k, tau](std::span<const Tensor* const>, const Tensor& alpha, const Tensor& up) {
        RetentionWeights w{alpha.storage(), k, 0.0};
        return std::vector<Tensor>{Tensor::vector(soft_topk_backward(w, up.data(), tau))};
      });
  if (out) *out = std::move(solved);
  return node;
}

}  // namespace diffprune
