#pragma once

// Synthetic token-classification task with known informative tokens.
// Each sequence has `signal_count` tokens drawn around its class prototype;
// the remaining tokens are standard-normal distractors.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "diffprune/error.hpp"
#include "diffprune/rng.hpp"
#include "diffprune/tensor.hpp"

namespace diffprune {

struct SyntheticTask {
  std::size_t n_tokens = 64;
  std::size_t dim = 32;
  std::size_t classes = 8;
  std::size_t signal_count = 8;
  double signal_snr = 4.0;  // signal noise variance is 1 / snr
  std::uint64_t seed = 0;   // prototypes

  void validate() const {
    if (n_tokens == 0 || dim == 0) throw ConfigError("task: n_tokens and dim must be positive");
    if (classes < 2) throw ConfigError("task: classes must be >= 2");
    if (signal_count > n_tokens) {
      throw ConfigError("task: signal_count " + std::to_string(signal_count) + " exceeds n_tokens " +
                        std::to_string(n_tokens));
    }
    if (!(signal_snr > 0.0)) throw ConfigError("task: signal_snr must be > 0");
  }

  /// One prototype row per class, [classes, dim].
  Tensor prototypes() const { return randn(Shape{classes, dim}, derive_seed(seed, {0x70726f746fULL})); }
};

struct Batch {
  std::vector<Tensor> sequences;                   // each [n_tokens, dim]
  std::vector<std::size_t> labels;
  std::vector<std::vector<std::size_t>> signal;    // sorted ground-truth indices

  std::size_t size() const { return sequences.size(); }
};

inline Batch gen_batch(const SyntheticTask& task, std::size_t batch, std::uint64_t seed) {
  task.validate();
  const Tensor protos = task.prototypes();
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> pick_class(0, task.classes - 1);
  const double signal_std = std::isinf(task.signal_snr) ? 0.0 : 1.0 / std::sqrt(task.signal_snr);

  Batch out;
  std::vector<std::size_t> order(task.n_tokens);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t label = pick_class(rng);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::size_t> signal(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(task.signal_count));
    std::sort(signal.begin(), signal.end());

    Tensor x(Shape{task.n_tokens, task.dim});
    std::vector<bool> is_signal(task.n_tokens, false);
    for (auto i : signal) is_signal[i] = true;
    for (std::size_t i = 0; i < task.n_tokens; ++i) {
      for (std::size_t j = 0; j < task.dim; ++j) {
        const double z = normal(rng);
        x(i, j) = is_signal[i] ? protos(label, j) + signal_std * z : z;
      }
    }
    out.sequences.push_back(std::move(x));
    out.labels.push_back(label);
    out.signal.push_back(std::move(signal));
  }
  return out;
}

/// Nearest-prototype classifier applied to the mean of the ground-truth
/// signal tokens. Upper reference for what the signal tokens alone determine.
inline std::size_t oracle_classify(const SyntheticTask& task, const Tensor& seq, const std::vector<std::size_t>& signal) {
  const Tensor protos = task.prototypes();
  std::vector<double> mean(task.dim, 0.0);
  for (auto i : signal) {
    for (std::size_t j = 0; j < task.dim; ++j) mean[j] += seq(i, j) / static_cast<double>(signal.size());
  }
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < task.classes; ++c) {
    double d = 0.0;
    for (std::size_t j = 0; j < task.dim; ++j) d += (mean[j] - protos(c, j)) * (mean[j] - protos(c, j));
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

}  // namespace diffprune
