// Smallest end-to-end use of the library: pretrain a frozen classifier on a
// small synthetic task, train a pruner through soft top-K + vp-noise, then
// deploy it with hard top-K and compare against random token selection.
//
//   ./minimal_pipeline [steps]

#include <cstdlib>
#include <iostream>

#include "diffprune/training.hpp"

int main(int argc, char** argv) {
  using namespace diffprune;
  const std::size_t steps = argc > 1 ? std::strtoul(argv[1], nullptr, 10) : 300;

  SyntheticTask task{32, 16, 4, 4, 4.0, 11};  // 32 tokens, 4 of them carry the label
  Seeds seeds;
  DownstreamConfig down{16, 32, 4, 1, 32, task.classes, task.n_tokens};
  auto pre = pretrain_downstream(task, down, PretrainConfig{}, seeds);
  std::cout << "downstream: " << pre.steps << " pretraining steps, train accuracy " << pre.train_accuracy << "\n";

  Pruner pruner = make_pruner(ScorerConfig{16, 32, 4, 1, 64}, DenoiserConfig{16, 4, 32}, seeds);
  TrainConfig tc;
  tc.k = task.signal_count;
  tc.steps = steps;
  tc.tau = {2.0, 0.2, steps};
  tc.lr = 1e-3;
  tc.early_stopping = false;
  train_pruner(tc, task, pre.model, pruner, seeds, [](const StepRecord& s) {
    if (s.step % 50 == 0) std::cout << "step " << s.step << " loss " << s.loss << " tau " << s.tau << "\n";
  });

  auto test = [&](std::size_t i) { return test_batch_seed(seeds, i); };
  const auto learned = eval_pruner(learned_scorer(pruner.scorer), pre.model, task, tc.k, 8, 32, test);
  const auto random = eval_pruner(random_scorer(9), pre.model, task, tc.k, 8, 32, test);
  std::cout << "keep " << tc.k << " of " << task.n_tokens << " tokens\n"
            << "  learned scorer: accuracy " << learned.accuracy << ", signal recall " << learned.signal_recall << "\n"
            << "  random scorer:  accuracy " << random.accuracy << ", signal recall " << random.signal_recall << "\n";
}
