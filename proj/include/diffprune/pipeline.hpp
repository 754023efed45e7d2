#pragma once

// Per-sequence forward graphs for the training path
//   scorer -> soft top-K -> throttle -> denoiser -> frozen downstream -> CE
// the straight-through baseline
//   scorer -> gumbel top-K mask (STE) -> frozen downstream -> CE
// and the deployed inference path
//   scorer -> hard gather -> frozen downstream.

#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "diffprune/autodiff.hpp"
#include "diffprune/models.hpp"
#include "diffprune/rng.hpp"
#include "diffprune/soft_topk.hpp"
#include "diffprune/task.hpp"
#include "diffprune/throttler.hpp"

namespace diffprune {

struct PrunerModels {
  Scorer* scorer = nullptr;
  Denoiser* denoiser = nullptr;  // may be null when the path skips it
  DownstreamModel* downstream = nullptr;
};

struct PathOptions {
  ThrottleKind kind = ThrottleKind::vp_noise;
  std::size_t k = 8;
  double tau = 1.0;
  bool use_denoiser = true;
};

/// Stochastic inputs of one forward pass. Fixing these freezes the pass.
struct SampleNoise {
  std::uint64_t noise_seed = 0;
  std::uint64_t gumbel_seed = 0;
  bool zero_noise = false;  // test hook: eps = 0 and gumbel = 0
};

struct SampleTrace {
  NodeId scores;
  NodeId throttled;
  NodeId logits;
  NodeId loss;
  std::optional<RetentionWeights> weights;
};

inline std::vector<std::size_t> all_positions(std::size_t n) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  return p;
}

/// Builds the training-time loss for one sequence on `g`.
inline SampleTrace training_path(ad::Graph& g, const PrunerModels& m, const PathOptions& opt, const Tensor& tokens,
                                 std::size_t label, const SampleNoise& noise) {
  SampleTrace tr;
  const std::size_t n = tokens.rows();
  auto x = g.constant(tokens);
  tr.scores = (*m.scorer)(g, x);
  switch (opt.kind) {
    case ThrottleKind::vp_noise:
    case ThrottleKind::scale_gate: {
      RetentionWeights w;
      auto alpha = soft_topk(g, tr.scores, opt.k, opt.tau, &w);
      tr.weights = std::move(w);
      if (opt.kind == ThrottleKind::vp_noise) {
        NoiseSample eps = noise.zero_noise ? NoiseSample{Tensor(tokens.shape()), 0}
                                           : NoiseSample::draw(n, tokens.cols(), noise.noise_seed);
        tr.throttled = vp_noise(g, x, alpha, eps);
      } else {
        tr.throttled = scale_gate(g, x, alpha);
      }
      break;
    }
    case ThrottleKind::gumbel_ste: {
      const auto gumbel = noise.zero_noise ? std::vector<double>(n, 0.0) : gumbel_sample(n, noise.gumbel_seed);
      tr.throttled = gumbel_ste(g, x, tr.scores, opt.k, gumbel);
      break;
    }
    case ThrottleKind::hard_gather:
      throw ConfigError("hard-gather is inference-only and cannot appear on a training tape");
  }
  auto h = tr.throttled;
  if (opt.use_denoiser && m.denoiser != nullptr) h = (*m.denoiser)(g, h);
  const auto pos = all_positions(n);
  tr.logits = (*m.downstream)(g, h, pos);
  tr.loss = g.cross_entropy(tr.logits, label);
  return tr;
}

struct DeployedTrace {
  NodeId logits;
  std::vector<std::size_t> kept;
};

/// Inference path for externally supplied scores: gather the top-K tokens
/// (original order and positions) and run the frozen downstream model.
inline DeployedTrace deployed_path(ad::Graph& g, DownstreamModel& downstream, const Tensor& tokens,
                                   std::span<const double> scores, std::size_t k) {
  DeployedTrace tr;
  auto gathered = hard_gather(tokens, scores, k);
  tr.kept = gathered.positions;
  NodeId x;
  {
    auto scope = g.scope("gather");
    x = g.gather_rows(g.constant(tokens), gathered.positions);
  }
  tr.logits = downstream(g, x, tr.kept);
  return tr;
}

/// Full deployed path with the learned scorer on the same tape.
inline DeployedTrace deployed_path(ad::Graph& g, Scorer& scorer, DownstreamModel& downstream, const Tensor& tokens,
                                   std::size_t k) {
  auto s = scorer(g, g.constant(tokens));
  const auto scores = g.value(s).storage();
  return deployed_path(g, downstream, tokens, scores, k);
}

inline std::size_t argmax_row(const Tensor& logits) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.numel(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return best;
}

/// Seeds of sample `i` at optimizer step `step`.
inline SampleNoise sample_noise(std::uint64_t noise_seed, std::uint64_t gumbel_seed, std::uint64_t step,
                                std::uint64_t i) {
  return SampleNoise{derive_seed(noise_seed, {step, i}), derive_seed(gumbel_seed, {step, i}), false};
}

struct BatchPass {
  double loss = 0.0;  // mean over the batch
  std::size_t correct = 0;
  std::optional<RetentionWeights> first_weights;
};

/// Mean training-path loss over a batch. With `backward`, parameter
/// gradients of the batch-mean loss are accumulated into Param::grad.
inline BatchPass batch_pass(const PrunerModels& m, const PathOptions& opt, const Batch& batch,
                            std::uint64_t noise_seed, std::uint64_t gumbel_seed, std::uint64_t step, bool backward,
                            bool zero_noise = false) {
  BatchPass out;
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    ad::Graph g(backward ? ad::Graph::GradMode::enabled : ad::Graph::GradMode::disabled);
    auto noise = sample_noise(noise_seed, gumbel_seed, step, i);
    noise.zero_noise = zero_noise;
    auto tr = training_path(g, m, opt, batch.sequences[i], batch.labels[i], noise);
    out.loss += g.value(tr.loss).item() * inv_b;
    out.correct += argmax_row(g.value(tr.logits)) == batch.labels[i] ? 1 : 0;
    if (i == 0 && tr.weights) out.first_weights = tr.weights;
    if (backward) g.backward(tr.loss, inv_b);
  }
  return out;
}

}  // namespace diffprune
