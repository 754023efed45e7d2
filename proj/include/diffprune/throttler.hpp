#pragma once

// Token throttles: the operators that sit between retention scores and the
// downstream model. vp-noise and scale-gate consume soft retention weights;
// gumbel-ste is the hard-mask/straight-through baseline; hard-gather is the
// deployed inference path and never appears on a training tape.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "diffprune/autodiff.hpp"
#include "diffprune/error.hpp"
#include "diffprune/rng.hpp"
#include "diffprune/soft_topk.hpp"
#include "diffprune/tensor.hpp"

namespace diffprune {

enum class ThrottleKind { vp_noise, scale_gate, gumbel_ste, hard_gather };

inline std::string_view to_string(ThrottleKind k) {
  switch (k) {
    case ThrottleKind::vp_noise: return "vp-noise";
    case ThrottleKind::scale_gate: return "scale-gate";
    case ThrottleKind::gumbel_ste: return "gumbel-ste";
    case ThrottleKind::hard_gather: return "hard-gather";
  }
  return "?";
}

inline ThrottleKind parse_throttle_kind(std::string_view s) {
  for (auto k : {ThrottleKind::vp_noise, ThrottleKind::scale_gate, ThrottleKind::gumbel_ste,
                 ThrottleKind::hard_gather}) {
    if (s == to_string(k)) return k;
  }
  throw ConfigError("unknown throttle kind '" + std::string(s) +
                    "' (expected vp-noise, scale-gate, gumbel-ste or hard-gather)");
}

/// I.i.d. standard normal noise for one N x d token sequence.
struct NoiseSample {
  Tensor eps;
  std::uint64_t seed = 0;

  static NoiseSample draw(std::size_t n, std::size_t d, std::uint64_t seed) {
    return NoiseSample{randn(Shape{n, d}, seed), seed};
  }
};

// Clamp applied to alpha inside the vp-noise derivative only; the forward
// value uses alpha as given so the endpoints are exact.
inline constexpr double kAlphaGradClamp = 1e-6;

namespace detail {

inline void check_tokens_alpha(const Tensor& x, const Tensor& alpha, std::string_view op) {
  if (x.rank() != 2) throw ShapeError(std::string(op) + ": tokens must be N x d, got " + shape_str(x.shape()));
  if (alpha.numel() != x.rows()) {
    throw ShapeError(std::string(op) + ": " + std::to_string(alpha.numel()) + " weights for " +
                     std::to_string(x.rows()) + " tokens");
  }
}

}  // namespace detail

/// x~_i = sqrt(a_i) x_i + sqrt(1 - a_i) eps_i, differentiable in x and alpha.
inline ad::NodeId vp_noise(ad::Graph& g, ad::NodeId x, ad::NodeId alpha, const NoiseSample& noise) {
  auto scope = g.scope("throttler");
  const Tensor& X = g.value(x);
  detail::check_tokens_alpha(X, g.value(alpha), "vp_noise");
  if (noise.eps.shape() != X.shape()) {
    throw ShapeError("vp_noise: noise " + shape_str(noise.eps.shape()) + " vs tokens " + shape_str(X.shape()));
  }
  const Tensor* eps = &noise.eps;
  return g.custom(
      "vp_noise", {x, alpha},
      [eps](std::span<const Tensor* const> in) {
        const Tensor& X = *in[0];
        const Tensor& A = *in[1];
        const std::size_t d = X.cols();
        Tensor out(X.shape());
        for (std::size_t i = 0; i < X.rows(); ++i) {
          if (A[i] < -1e-12 || A[i] > 1.0 + 1e-12) throw NumericError("vp_noise: alpha outside [0, 1]");
          const double a = std::clamp(A[i], 0.0, 1.0);
          const double keep = std::sqrt(a);
          const double mix = std::sqrt(1.0 - a);
          for (std::size_t j = 0; j < d; ++j) out(i, j) = keep * X(i, j) + mix * (*eps)(i, j);
        }
        return out;
      },
      [eps = noise.eps](std::span<const Tensor* const> in, const Tensor&, const Tensor& up) {
        const Tensor& X = *in[0];
        const Tensor& A = *in[1];
        const std::size_t d = X.cols();
        Tensor dx(X.shape());
        Tensor da(A.shape());
        for (std::size_t i = 0; i < X.rows(); ++i) {
          const double a = std::clamp(A[i], 0.0, 1.0);
          const double keep = std::sqrt(a);
          const double ac = std::clamp(A[i], kAlphaGradClamp, 1.0 - kAlphaGradClamp);
          const double dkeep = 0.5 / std::sqrt(ac);
          const double dmix = -0.5 / std::sqrt(1.0 - ac);
          double acc = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            dx(i, j) = keep * up(i, j);
            acc += up(i, j) * (X(i, j) * dkeep + eps(i, j) * dmix);
          }
          da[i] = acc;
        }
        return std::vector<Tensor>{std::move(dx), std::move(da)};
      });
}

/// x~_i = alpha_i x_i.
inline ad::NodeId scale_gate(ad::Graph& g, ad::NodeId x, ad::NodeId alpha) {
  auto scope = g.scope("throttler");
  const Tensor& X = g.value(x);
  detail::check_tokens_alpha(X, g.value(alpha), "scale_gate");
  auto col = g.reshape(alpha, Shape{X.rows(), 1});
  return g.mul(x, col);
}

/// Standard Gumbel(0, 1) draws via -log(-log u), u clamped away from {0, 1}.
inline std::vector<double> gumbel_sample(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<double> g(n);
  for (auto& v : g) {
    const double u = std::clamp(unif(rng), 1e-12, 1.0 - 1e-12);
    v = -std::log(-std::log(u));
  }
  return g;
}

/// Hard top-K of (s + gumbel) in the forward pass; the backward pass hands
/// dL/dm straight to s (identity surrogate Jacobian). The output is
/// x * broadcast(m), so the sequence length is unchanged.
inline ad::NodeId gumbel_ste(ad::Graph& g, ad::NodeId x, ad::NodeId scores, std::size_t k,
                             std::span<const double> gumbel) {
  auto scope = g.scope("throttler");
  const Tensor& X = g.value(x);
  const Tensor& S = g.value(scores);
  detail::check_tokens_alpha(X, S, "gumbel_ste");
  if (gumbel.size() != S.numel()) throw ShapeError("gumbel_ste: gumbel sample length mismatch");
  std::vector<double> perturbed(gumbel.begin(), gumbel.end());
  auto mask = g.custom(
      "gumbel_topk_ste", {scores},
      [&](std::span<const Tensor* const> in) {
        for (std::size_t i = 0; i < perturbed.size(); ++i) perturbed[i] += (*in[0])[i];
        return Tensor(in[0]->shape(), hard_topk_mask(perturbed, k));
      },
      [](std::span<const Tensor* const>, const Tensor&, const Tensor& up) {
        return std::vector<Tensor>{up};
      });
  auto col = g.reshape(mask, Shape{X.rows(), 1});
  return g.mul(x, col);
}

inline ad::NodeId gumbel_ste(ad::Graph& g, ad::NodeId x, ad::NodeId scores, std::size_t k, std::uint64_t seed) {
  const auto gumbel = gumbel_sample(g.value(scores).numel(), seed);
  return gumbel_ste(g, x, scores, k, gumbel);
}

struct GatheredTokens {
  Tensor tokens;
  std::vector<std::size_t> positions;
};

/// The K top-scored tokens in original order, with their original positions.
inline GatheredTokens hard_gather(const Tensor& x, std::span<const double> s, std::size_t k) {
  if (x.rank() != 2 || x.rows() != s.size()) {
    throw ShapeError("hard_gather: " + std::to_string(s.size()) + " scores for tokens " + shape_str(x.shape()));
  }
  GatheredTokens out;
  out.positions = topk_indices(s, k);
  out.tokens = Tensor(Shape{k, x.cols()});
  for (std::size_t r = 0; r < k; ++r) {
    std::copy_n(x.row(out.positions[r]).begin(), x.cols(), out.tokens.row(r).begin());
  }
  return out;
}

struct VarianceAudit {
  double variance = 0.0;
  double standard_error = 0.0;
  std::size_t samples = 0;
};

/// Empirical variance of vp-noise outputs for unit-variance inputs at a fixed
/// alpha; `trials` tokens of dimension `d`. The standard error is the
/// plug-in estimate sqrt((m4 - var^2) / n).
inline VarianceAudit variance_audit(double alpha, std::size_t trials, std::size_t d, std::uint64_t seed) {
  if (alpha < 0.0 || alpha > 1.0) throw ConfigError("variance_audit: alpha outside [0, 1]");
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t n = trials * d;
  std::vector<double> y(n);
  const double keep = std::sqrt(alpha);
  const double mix = std::sqrt(1.0 - alpha);
  for (auto& v : y) {
    const double x = normal(rng);
    const double e = normal(rng);
    v = keep * x + mix * e;
  }
  double mu = 0.0;
  for (double v : y) mu += v;
  mu /= static_cast<double>(n);
  double m2 = 0.0;
  double m4 = 0.0;
  for (double v : y) {
    const double c = (v - mu) * (v - mu);
    m2 += c;
    m4 += c * c;
  }
  m2 /= static_cast<double>(n);
  m4 /= static_cast<double>(n);
  VarianceAudit a;
  a.samples = n;
  a.variance = m2 * static_cast<double>(n) / static_cast<double>(n - 1);
  a.standard_error = std::sqrt(std::max(m4 - m2 * m2, 0.0) / static_cast<double>(n));
  return a;
}

}  // namespace diffprune
