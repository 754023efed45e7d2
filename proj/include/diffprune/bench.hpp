#pragma once

// Micro-benchmark of the pruner alone: the deployed path (scorer + hard
// gather) against the training-time path (scorer + soft top-K + vp-noise +
// denoiser) on one random sequence of N tokens.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "diffprune/autodiff.hpp"
#include "diffprune/error.hpp"
#include "diffprune/models.hpp"
#include "diffprune/rng.hpp"
#include "diffprune/soft_topk.hpp"
#include "diffprune/throttler.hpp"

namespace diffprune {

struct LatencyStats {
  std::vector<double> samples_ms;
  double median_ms = 0.0;
  double p95_ms = 0.0;
  double mean_ms = 0.0;
};

/// Median averages the two middle samples; p95 is the nearest-rank value.
inline LatencyStats latency_stats(std::vector<double> ms) {
  if (ms.empty()) throw ConfigError("latency_stats: no samples");
  LatencyStats s;
  s.samples_ms = ms;
  std::sort(ms.begin(), ms.end());
  const std::size_t n = ms.size();
  s.median_ms = n % 2 ? ms[n / 2] : 0.5 * (ms[n / 2 - 1] + ms[n / 2]);
  const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(n)));
  s.p95_ms = ms[std::max<std::size_t>(rank, 1) - 1];
  for (double v : ms) s.mean_ms += v;
  s.mean_ms /= static_cast<double>(n);
  return s;
}

struct BenchOptions {
  std::size_t n = 576;
  std::size_t k = 64;
  std::size_t trials = 30;
  std::size_t warmup = 3;
  double tau = 2.0;
  std::uint64_t seed = 0;
};

struct BenchReport {
  BenchOptions options;
  LatencyStats inference;
  LatencyStats training;
  std::map<std::string, std::size_t> inference_ops;  // graph nodes per scope
  std::map<std::string, std::size_t> training_ops;

  /// No node of the deployed graph belongs to a train-only module.
  bool inference_excludes_train_only() const {
    for (const char* s : {"soft_topk", "throttler", "denoiser"}) {
      auto it = inference_ops.find(s);
      if (it != inference_ops.end() && it->second != 0) return false;
    }
    return inference_ops.count("scorer") && inference_ops.count("gather");
  }
  double speedup() const { return training.median_ms / inference.median_ms; }
};

inline std::map<std::string, std::size_t> inference_pass(ad::Graph& g, Scorer& scorer, const Tensor& tokens,
                                                         std::size_t k) {
  auto x = g.constant(tokens);
  const auto scores = g.value(scorer(g, x)).storage();
  const auto keep = hard_gather(tokens, scores, k);
  {
    auto scope = g.scope("gather");
    g.gather_rows(x, keep.positions);
  }
  return g.scope_counts();
}

inline std::map<std::string, std::size_t> training_pass(ad::Graph& g, Scorer& scorer, Denoiser& denoiser,
                                                        const Tensor& tokens, std::size_t k, double tau,
                                                        std::uint64_t noise_seed) {
  auto x = g.constant(tokens);
  auto alpha = soft_topk(g, scorer(g, x), k, tau);
  const auto eps = NoiseSample::draw(tokens.rows(), tokens.cols(), noise_seed);
  denoiser(g, vp_noise(g, x, alpha, eps));
  return g.scope_counts();
}

/// Alternates one inference and one training trial so that slow drift in
/// machine load hits both paths alike. Warm-up trials are discarded.
inline BenchReport bench_pruner(Scorer& scorer, Denoiser& denoiser, const BenchOptions& opt) {
  if (opt.trials < 10) throw ConfigError("bench.trials must be >= 10, got " + std::to_string(opt.trials));
  if (opt.k < 1 || opt.k >= opt.n) {
    throw ConfigError("bench.k must be in [1, n), got k=" + std::to_string(opt.k) + " n=" + std::to_string(opt.n));
  }
  const Tensor tokens = randn(Shape{opt.n, scorer.config.input_dim}, derive_seed(opt.seed, {0}));
  BenchReport rep;
  rep.options = opt;
  std::vector<double> inf_ms, train_ms;
  using clock = std::chrono::steady_clock;
  for (std::size_t t = 0; t < opt.warmup + opt.trials; ++t) {
    auto t0 = clock::now();
    {
      ad::Graph g(ad::Graph::GradMode::disabled);
      rep.inference_ops = inference_pass(g, scorer, tokens, opt.k);
    }
    auto t1 = clock::now();
    {
      ad::Graph g(ad::Graph::GradMode::enabled);
      rep.training_ops = training_pass(g, scorer, denoiser, tokens, opt.k, opt.tau, derive_seed(opt.seed, {1, t}));
    }
    auto t2 = clock::now();
    if (t >= opt.warmup) {
      inf_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
      train_ms.push_back(std::chrono::duration<double, std::milli>(t2 - t1).count());
    }
  }
  rep.inference = latency_stats(std::move(inf_ms));
  rep.training = latency_stats(std::move(train_ms));
  return rep;
}

}  // namespace diffprune
