#pragma once

// Gradient-quality probes for comparing throttles on a shared checkpoint:
// cross-batch gradient coherence, filter-normalized 2-D loss slices and the
// stepwise loss variation along one slice axis.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "diffprune/autodiff.hpp"
#include "diffprune/error.hpp"
#include "diffprune/models.hpp"
#include "diffprune/optim.hpp"
#include "diffprune/pipeline.hpp"
#include "diffprune/rng.hpp"
#include "diffprune/task.hpp"

namespace diffprune {

// ---------------------------------------------------------------------------
// Coherence

enum class CoherenceMetric { pairwise, to_mean };

inline std::string_view to_string(CoherenceMetric m) { return m == CoherenceMetric::pairwise ? "pairwise" : "to-mean"; }

inline CoherenceMetric parse_coherence_metric(std::string_view s) {
  if (s == "pairwise") return CoherenceMetric::pairwise;
  if (s == "to-mean") return CoherenceMetric::to_mean;
  throw ConfigError("unknown coherence metric '" + std::string(s) + "' (expected pairwise or to-mean)");
}

struct CoherencePair {
  std::size_t i = 0;
  std::size_t j = 0;  // for to-mean, j == i
  double cosine = 0.0;
};

struct CoherenceReport {
  CoherenceMetric metric = CoherenceMetric::pairwise;
  std::vector<CoherencePair> pairs;
  double mean = 0.0;
  double stddev = 0.0;
  std::size_t batches = 0;   // usable gradients
  std::size_t excluded = 0;  // zero-gradient batches
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

/// Cosine similarity clamped to [-1, 1]. sqrt(|a|^2 |b|^2) rather than
/// |a| |b| so that identical vectors give exactly 1.
inline double cosine(std::span<const double> a, std::span<const double> b) {
  const double c = dot(a, b) / std::sqrt(dot(a, a) * dot(b, b));
  return std::clamp(c, -1.0, 1.0);
}

/// Coherence of a set of flattened gradients. Zero gradients have no
/// direction; they are dropped and counted.
inline CoherenceReport coherence_from_gradients(const std::vector<std::vector<double>>& grads,
                                                CoherenceMetric metric = CoherenceMetric::pairwise) {
  CoherenceReport r;
  r.metric = metric;
  std::vector<std::size_t> usable;
  for (std::size_t b = 0; b < grads.size(); ++b) {
    if (grads[b].size() != grads.front().size()) throw ShapeError("coherence: gradient length mismatch");
    if (dot(grads[b], grads[b]) > 0.0) {
      usable.push_back(b);
    } else {
      ++r.excluded;
    }
  }
  r.batches = usable.size();
  if (usable.size() < 2) {
    throw NumericError("coherence needs at least two non-zero gradients, got " + std::to_string(usable.size()));
  }
  if (metric == CoherenceMetric::pairwise) {
    for (std::size_t a = 0; a < usable.size(); ++a) {
      for (std::size_t b = a + 1; b < usable.size(); ++b) {
        r.pairs.push_back({usable[a], usable[b], cosine(grads[usable[a]], grads[usable[b]])});
      }
    }
  } else {
    std::vector<double> mean_dir(grads.front().size(), 0.0);
    for (auto b : usable) {
      const double inv = 1.0 / std::sqrt(dot(grads[b], grads[b]));
      for (std::size_t k = 0; k < mean_dir.size(); ++k) mean_dir[k] += grads[b][k] * inv;
    }
    for (auto b : usable) r.pairs.push_back({b, b, cosine(grads[b], mean_dir)});
  }
  for (const auto& p : r.pairs) r.mean += p.cosine;
  r.mean /= static_cast<double>(r.pairs.size());
  for (const auto& p : r.pairs) r.stddev += (p.cosine - r.mean) * (p.cosine - r.mean);
  r.stddev = std::sqrt(r.stddev / static_cast<double>(r.pairs.size()));
  return r;
}

inline std::vector<double> flatten_grads(std::span<Param* const> params) {
  std::vector<double> out;
  for (const auto* p : params) out.insert(out.end(), p->grad.data().begin(), p->grad.data().end());
  return out;
}

/// Fixed inputs of a probe: which batches, which frozen noise.
struct ProbeData {
  SyntheticTask task;
  std::size_t batch_size = 32;
  std::uint64_t data_seed = 0;   // batch b uses derive_seed(data_seed, {b})
  std::uint64_t noise_seed = 0;  // vp-noise eps, frozen per batch
  std::uint64_t gumbel_seed = 0; // Gumbel draws, frozen per batch

  Batch batch(std::size_t b) const { return gen_batch(task, batch_size, derive_seed(data_seed, {b})); }
};

/// Scorer-parameter gradient of the mean loss on each of `batches` batches.
/// `same_batch` repeats batch 0 (and its noise) as a sanity case.
inline std::vector<std::vector<double>> scorer_gradients(const PrunerModels& m, const PathOptions& opt,
                                                         const ProbeData& data, std::size_t batches,
                                                         bool same_batch = false) {
  auto params = collect_params(*m.scorer);
  std::vector<std::vector<double>> out;
  for (std::size_t b = 0; b < batches; ++b) {
    const std::size_t id = same_batch ? 0 : b;
    zero_grads(params);
    if (m.denoiser) {
      auto dp = collect_params(*m.denoiser);
      zero_grads(dp);
    }
    batch_pass(m, opt, data.batch(id), data.noise_seed, data.gumbel_seed, id, true);
    out.push_back(flatten_grads(params));
  }
  zero_grads(params);
  return out;
}

inline CoherenceReport grad_coherence(const PrunerModels& m, const PathOptions& opt, const ProbeData& data,
                                      std::size_t batches, CoherenceMetric metric = CoherenceMetric::pairwise) {
  if (batches < 2) throw ConfigError("coherence: need at least 2 batches");
  return coherence_from_gradients(scorer_gradients(m, opt, data, batches), metric);
}

// ---------------------------------------------------------------------------
// Loss landscape

using Direction = std::vector<Tensor>;  // one tensor per parameter, same shapes

inline Direction random_direction(std::span<Param* const> params, std::uint64_t seed) {
  Rng rng(seed);
  Direction d;
  for (const auto* p : params) d.push_back(randn(p->value.shape(), rng));
  return d;
}

/// Rescales `d` so each output unit of every matrix has the norm of the
/// corresponding unit of theta. Weights are stored [in, out], so an output
/// unit is a column. Vectors are rescaled as a whole. Units whose theta norm
/// is zero get a zero direction.
inline Direction filter_normalize(std::span<Param* const> theta, const Direction& d) {
  if (theta.size() != d.size()) throw ShapeError("filter_normalize: parameter count mismatch");
  Direction out;
  for (std::size_t k = 0; k < theta.size(); ++k) {
    const Tensor& t = theta[k]->value;
    if (d[k].shape() != t.shape()) throw ShapeError("filter_normalize: shape mismatch for " + theta[k]->name);
    Tensor r = d[k];
    auto rescale = [&](auto&& indices) {
      double tn = 0.0;
      double dn = 0.0;
      for (std::size_t i : indices) {
        tn += t[i] * t[i];
        dn += r[i] * r[i];
      }
      const double s = (tn == 0.0 || dn == 0.0) ? 0.0 : std::sqrt(tn) / std::sqrt(dn);
      for (std::size_t i : indices) r[i] *= s;
    };
    if (t.rank() == 2) {
      const std::size_t rows = t.rows();
      const std::size_t cols = t.cols();
      std::vector<std::size_t> idx(rows);
      for (std::size_t c = 0; c < cols; ++c) {
        for (std::size_t i = 0; i < rows; ++i) idx[i] = i * cols + c;
        rescale(idx);
      }
    } else {
      std::vector<std::size_t> idx(t.numel());
      std::iota(idx.begin(), idx.end(), std::size_t{0});
      rescale(idx);
    }
    out.push_back(std::move(r));
  }
  return out;
}

struct LandscapeSlice {
  std::size_t radius = 0;
  std::vector<double> grid;  // (2R+1) x (2R+1), row index = beta1, column = beta2
  double center_loss = 0.0;  // L(theta) evaluated directly
  std::size_t nonfinite = 0;

  std::size_t side() const { return 2 * radius + 1; }
  double at(std::size_t i1, std::size_t i2) const { return grid[i1 * side() + i2]; }
  double beta(std::size_t i) const {
    return (static_cast<double>(i) - static_cast<double>(radius)) / static_cast<double>(radius);
  }
};

/// L(theta + b1 d1 + b2 d2) on the uniform grid over [-1, 1]^2. `loss` must
/// be deterministic (fixed batch, frozen noise). Parameters are restored
/// bit-exactly afterwards.
inline LandscapeSlice landscape_slice(std::span<Param* const> params, const Direction& d1, const Direction& d2,
                                      std::size_t radius, const std::function<double()>& loss) {
  if (radius < 2) throw ConfigError("landscape: radius must be >= 2");
  if (d1.size() != params.size() || d2.size() != params.size()) {
    throw ShapeError("landscape: direction does not match parameters");
  }
  std::vector<Tensor> origin;
  for (const auto* p : params) origin.push_back(p->value);

  LandscapeSlice s;
  s.radius = radius;
  s.center_loss = loss();
  s.grid.resize(s.side() * s.side());
  for (std::size_t i1 = 0; i1 < s.side(); ++i1) {
    for (std::size_t i2 = 0; i2 < s.side(); ++i2) {
      const double b1 = s.beta(i1);
      const double b2 = s.beta(i2);
      for (std::size_t k = 0; k < params.size(); ++k) {
        auto& v = params[k]->value;
        for (std::size_t e = 0; e < v.numel(); ++e) v[e] = origin[k][e] + b1 * d1[k][e] + b2 * d2[k][e];
      }
      double l = std::numeric_limits<double>::quiet_NaN();
      try {
        l = loss();
      } catch (const NumericError&) {
      }
      if (!std::isfinite(l)) ++s.nonfinite;
      s.grid[i1 * s.side() + i2] = l;
    }
  }
  for (std::size_t k = 0; k < params.size(); ++k) params[k]->value = origin[k];
  return s;
}

struct StepVariationReport {
  std::vector<double> steps;  // |L(b_{i+1}) - L(b_i)|, NaN where a cell is non-finite
  double mean = 0.0;
  std::size_t excluded = 0;
};

/// Absolute consecutive differences along the beta2 axis at row `row`
/// (a beta1 index). Pairs touching a non-finite cell are excluded.
inline StepVariationReport step_variation(const LandscapeSlice& s, std::size_t row) {
  if (row >= s.side()) throw ConfigError("step_variation: row outside the grid");
  StepVariationReport r;
  std::size_t used = 0;
  for (std::size_t j = 0; j + 1 < s.side(); ++j) {
    const double a = s.at(row, j);
    const double b = s.at(row, j + 1);
    if (std::isfinite(a) && std::isfinite(b)) {
      r.steps.push_back(std::abs(b - a));
      r.mean += std::abs(b - a);
      ++used;
    } else {
      r.steps.push_back(std::numeric_limits<double>::quiet_NaN());
      ++r.excluded;
    }
  }
  r.mean = used ? r.mean / static_cast<double>(used) : 0.0;
  return r;
}

/// Landscape of the mean path loss on one batch with frozen noise, over the
/// scorer parameters only.
inline LandscapeSlice path_landscape(const PrunerModels& m, const PathOptions& opt, const ProbeData& data,
                                     std::size_t radius, std::uint64_t direction_seed) {
  auto params = collect_params(*m.scorer);
  const auto d1 = filter_normalize(params, random_direction(params, derive_seed(direction_seed, {1})));
  const auto d2 = filter_normalize(params, random_direction(params, derive_seed(direction_seed, {2})));
  const Batch batch = data.batch(0);
  return landscape_slice(params, d1, d2, radius, [&] {
    return batch_pass(m, opt, batch, data.noise_seed, data.gumbel_seed, 0, false).loss;
  });
}

}  // namespace diffprune
