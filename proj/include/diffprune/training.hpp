#pragma once

// Downstream pretraining, joint scorer/denoiser optimization under the
// annealed temperature schedule, and evaluation of the deployed pruner.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "diffprune/autodiff.hpp"
#include "diffprune/error.hpp"
#include "diffprune/models.hpp"
#include "diffprune/optim.hpp"
#include "diffprune/pipeline.hpp"
#include "diffprune/rng.hpp"
#include "diffprune/soft_topk.hpp"
#include "diffprune/task.hpp"

namespace diffprune {

/// Every random draw in a run derives from one of these.
struct Seeds {
  std::uint64_t data = 1;
  std::uint64_t init = 2;
  std::uint64_t noise = 3;
  std::uint64_t gumbel = 4;
  std::uint64_t directions = 5;
};

// Sub-streams of the data seed; training, validation and test never overlap.
inline std::uint64_t train_batch_seed(const Seeds& s, std::size_t step) { return derive_seed(s.data, {1, step}); }
inline std::uint64_t val_batch_seed(const Seeds& s, std::size_t i) { return derive_seed(s.data, {2, i}); }
inline std::uint64_t test_batch_seed(const Seeds& s, std::size_t i) { return derive_seed(s.data, {3, i}); }
inline std::uint64_t pretrain_batch_seed(const Seeds& s, std::size_t step) { return derive_seed(s.data, {4, step}); }

/// Raised when training hits a non-finite value or breaks the budget
/// invariant. Parameters are left at their last good values.
struct TrainingAborted : NumericError {
  std::size_t step;
  TrainingAborted(const std::string& what, std::size_t at) : NumericError(what), step(at) {}
};

// ---------------------------------------------------------------------------
// Evaluation of the deployed (hard top-K) pruner

struct EvalMetrics {
  double accuracy = 0.0;
  double signal_recall = 0.0;
  double loss = 0.0;
  std::size_t samples = 0;
};

/// Produces per-token scores for one sequence; may put nodes on `g`.
using ScoreFn = std::function<std::vector<double>(ad::Graph& g, const Tensor& tokens,
                                                  const std::vector<std::size_t>& signal)>;

inline ScoreFn learned_scorer(Scorer& scorer) {
  return [&scorer](ad::Graph& g, const Tensor& tokens, const std::vector<std::size_t>&) {
    return g.value(scorer(g, g.constant(tokens))).storage();
  };
}

/// Control: i.i.d. uniform scores.
inline ScoreFn random_scorer(std::uint64_t seed) {
  auto rng = std::make_shared<Rng>(seed);
  return [rng](ad::Graph&, const Tensor& tokens, const std::vector<std::size_t>&) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> s(tokens.rows());
    for (auto& v : s) v = u(*rng);
    return s;
  };
}

/// Test hook: +1 on ground-truth signal tokens, -1 elsewhere.
inline ScoreFn oracle_scorer() {
  return [](ad::Graph&, const Tensor& tokens, const std::vector<std::size_t>& signal) {
    std::vector<double> s(tokens.rows(), -1.0);
    for (auto i : signal) s[i] = 1.0;
    return s;
  };
}

inline double signal_recall(const std::vector<std::size_t>& kept, const std::vector<std::size_t>& signal) {
  const std::size_t denom = std::min(kept.size(), signal.size());
  if (denom == 0) return 1.0;
  std::size_t hit = 0;
  for (auto i : kept) hit += std::binary_search(signal.begin(), signal.end(), i) ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(denom);
}

/// Inference path: scores -> hard gather of K tokens -> frozen downstream.
/// `batch_seed(i)` picks the i-th evaluation batch.
inline EvalMetrics eval_pruner(const ScoreFn& score, DownstreamModel& downstream, const SyntheticTask& task,
                               std::size_t k, std::size_t batches, std::size_t batch_size,
                               const std::function<std::uint64_t(std::size_t)>& batch_seed) {
  if (k < 1 || k > task.n_tokens) {
    throw ConfigError("eval: K=" + std::to_string(k) + " outside [1, " + std::to_string(task.n_tokens) + "]");
  }
  EvalMetrics m;
  for (std::size_t b = 0; b < batches; ++b) {
    const Batch batch = gen_batch(task, batch_size, batch_seed(b));
    for (std::size_t i = 0; i < batch.size(); ++i) {
      ad::Graph g(ad::Graph::GradMode::disabled);
      const auto scores = score(g, batch.sequences[i], batch.signal[i]);
      auto tr = deployed_path(g, downstream, batch.sequences[i], scores, k);
      const Tensor& logits = g.value(tr.logits);
      m.accuracy += argmax_row(logits) == batch.labels[i] ? 1.0 : 0.0;
      m.loss += g.value(g.cross_entropy(tr.logits, batch.labels[i])).item();
      m.signal_recall += signal_recall(tr.kept, batch.signal[i]);
      ++m.samples;
    }
  }
  const double n = static_cast<double>(std::max<std::size_t>(m.samples, 1));
  m.accuracy /= n;
  m.loss /= n;
  m.signal_recall /= n;
  return m;
}

// ---------------------------------------------------------------------------
// Downstream pretraining

struct PretrainConfig {
  double lr = 1e-3;
  std::size_t batch = 32;
  std::size_t max_steps = 3000;
  double target_accuracy = 0.95;
  double abort_accuracy = 0.80;
  std::size_t window = 10;  // batches in the running train-accuracy window
};

struct PretrainResult {
  DownstreamModel model;
  double train_accuracy = 0.0;
  std::size_t steps = 0;
};

/// Trains the downstream classifier on clean full-token sequences until the
/// running train accuracy reaches the target (or the step cap), then freezes it.
inline PretrainResult pretrain_downstream(const SyntheticTask& task, const DownstreamConfig& cfg,
                                          const PretrainConfig& pc, const Seeds& seeds) {
  task.validate();
  Rng rng(derive_seed(seeds.init, {0}));
  PretrainResult out{DownstreamModel(cfg, rng), 0.0, 0};
  auto params = collect_params(out.model);
  AdamW opt(params, {.weight_decay = 0.0});
  std::vector<double> window;
  const auto pos = all_positions(task.n_tokens);
  for (std::size_t step = 0; step < pc.max_steps; ++step) {
    zero_grads(params);
    const Batch batch = gen_batch(task, pc.batch, pretrain_batch_seed(seeds, step));
    std::size_t correct = 0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      ad::Graph g;
      auto logits = out.model(g, g.constant(batch.sequences[i]), pos);
      auto loss = g.cross_entropy(logits, batch.labels[i]);
      correct += argmax_row(g.value(logits)) == batch.labels[i] ? 1 : 0;
      g.backward(loss, 1.0 / static_cast<double>(batch.size()));
    }
    clip_grad_norm(params, 1.0);
    opt.step(pc.lr);
    window.push_back(static_cast<double>(correct) / static_cast<double>(batch.size()));
    if (window.size() > pc.window) window.erase(window.begin());
    out.steps = step + 1;
    out.train_accuracy = std::accumulate(window.begin(), window.end(), 0.0) / static_cast<double>(window.size());
    if (window.size() == pc.window && out.train_accuracy >= pc.target_accuracy) break;
  }
  if (out.train_accuracy < pc.abort_accuracy) {
    throw ConfigError("downstream pretraining reached only " + std::to_string(out.train_accuracy * 100.0) +
                      "% train accuracy after " + std::to_string(out.steps) +
                      " steps; the synthetic task is too hard for this configuration");
  }
  out.model.freeze();
  return out;
}

// ---------------------------------------------------------------------------
// Pruner training

struct TrainConfig {
  ThrottleKind throttle = ThrottleKind::vp_noise;
  std::size_t k = 8;
  double lr = 2e-4;
  std::size_t batch = 32;
  std::size_t steps = 2000;
  TemperatureSchedule tau{2.0, 0.1, 2000};
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  bool use_denoiser = true;
  bool denoiser_with_gumbel = false;  // ablation: keep the denoiser on the STE path
  bool early_stopping = true;
  std::size_t eval_every = 100;
  std::size_t patience = 5;
  std::size_t val_batches = 4;
  std::size_t budget_check_every = 50;

  void validate(const SyntheticTask& task) const {
    if (throttle == ThrottleKind::hard_gather) throw ConfigError("train.throttle: hard-gather is inference-only");
    if (k < 1 || k >= task.n_tokens) {
      throw ConfigError("train.k: budget " + std::to_string(k) + " outside [1, " + std::to_string(task.n_tokens) + ")");
    }
    if (!(lr >= 0.0)) throw ConfigError("train.lr must be >= 0");
    if (batch == 0) throw ConfigError("train.batch must be positive");
    if (steps == 0) throw ConfigError("train.steps must be positive");
    if (!(clip_norm > 0.0)) throw ConfigError("train.clip_norm must be > 0");
    if (eval_every == 0 || patience == 0 || val_batches == 0) {
      throw ConfigError("train: eval_every, patience and val_batches must be positive");
    }
    tau.validate();
  }

  bool path_uses_denoiser() const {
    return throttle == ThrottleKind::gumbel_ste ? denoiser_with_gumbel : use_denoiser;
  }

  PathOptions path(double t) const { return PathOptions{throttle, k, t, path_uses_denoiser()}; }
};

struct StepRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double tau = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;
};

struct EvalRecord {
  std::size_t step = 0;
  double val_loss = 0.0;
  double accuracy = 0.0;
  double signal_recall = 0.0;
};

struct RunRecord {
  std::vector<StepRecord> steps;
  std::vector<EvalRecord> evals;
  bool early_stopped = false;
  std::size_t best_step = 0;
};

/// Trainable side of the pipeline.
struct Pruner {
  Scorer scorer;
  Denoiser denoiser;

  template <class F>
  void for_each_param(F&& f) {
    scorer.for_each_param(f);
    denoiser.for_each_param(f);
  }
};

inline Pruner make_pruner(const ScorerConfig& sc, const DenoiserConfig& dc, const Seeds& seeds) {
  Rng srng(derive_seed(seeds.init, {1}));
  Rng drng(derive_seed(seeds.init, {2}));
  return Pruner{Scorer(sc, srng), Denoiser(dc, drng)};
}

using StepCallback = std::function<void(const StepRecord&)>;

/// Jointly optimizes scorer and denoiser through the configured training path
/// with the downstream model frozen.
inline RunRecord train_pruner(const TrainConfig& cfg, const SyntheticTask& task, DownstreamModel& downstream,
                              Pruner& pruner, const Seeds& seeds, const StepCallback& on_step = {}) {
  cfg.validate(task);
  if (!downstream.frozen) throw ConfigError("train_pruner requires a frozen downstream model");
  auto params = collect_params(pruner);
  AdamW opt(params, {.weight_decay = cfg.weight_decay});
  PrunerModels models{&pruner.scorer, &pruner.denoiser, &downstream};

  RunRecord rec;
  double best_val = std::numeric_limits<double>::infinity();
  std::vector<Tensor> best_params;
  std::size_t bad_evals = 0;
  auto snapshot = [&] {
    best_params.clear();
    for (auto* p : params) best_params.push_back(p->value);
  };

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const double tau = tau_at(cfg.tau, step);
    const double lr = cosine_lr(cfg.lr, step, cfg.steps);
    zero_grads(params);
    const Batch batch = gen_batch(task, cfg.batch, train_batch_seed(seeds, step));
    BatchPass pass;
    try {
      pass = batch_pass(models, cfg.path(tau), batch, seeds.noise, seeds.gumbel, step, true);
    } catch (const NumericError& e) {
      throw TrainingAborted(std::string("step ") + std::to_string(step) + ": " + e.what(), step);
    }
    if (!std::isfinite(pass.loss)) throw TrainingAborted("non-finite loss at step " + std::to_string(step), step);
    if (step % cfg.budget_check_every == 0 && pass.first_weights) {
      const double drift = std::abs(pass.first_weights->mass() - static_cast<double>(cfg.k));
      if (drift > kBudgetTolerance) {
        throw TrainingAborted("budget violated at step " + std::to_string(step), step);
      }
    }
    const double gnorm = clip_grad_norm(params, cfg.clip_norm);
    if (!std::isfinite(gnorm)) throw TrainingAborted("non-finite gradient at step " + std::to_string(step), step);
    opt.step(lr);

    StepRecord sr{step, pass.loss, tau, gnorm, lr};
    rec.steps.push_back(sr);
    if (on_step) on_step(sr);

    if (cfg.early_stopping && (step + 1) % cfg.eval_every == 0) {
      auto m = eval_pruner(learned_scorer(pruner.scorer), downstream, task, cfg.k, cfg.val_batches, cfg.batch,
                           [&](std::size_t i) { return val_batch_seed(seeds, i); });
      rec.evals.push_back({step + 1, m.loss, m.accuracy, m.signal_recall});
      if (m.loss < best_val) {
        best_val = m.loss;
        rec.best_step = step + 1;
        bad_evals = 0;
        snapshot();
      } else if (++bad_evals >= cfg.patience) {
        rec.early_stopped = true;
        for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best_params[i];
        break;
      }
    }
  }
  return rec;
}

}  // namespace diffprune
