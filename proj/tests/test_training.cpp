#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <map>
#include <vector>

#include "diffprune/training.hpp"

namespace {

using namespace diffprune;

struct TinyRun {
  SyntheticTask task{16, 8, 4, 2, 4.0, 1};
  Seeds seeds;
  ScorerConfig sc{8, 16, 2, 1, 16};
  DenoiserConfig dc{8, 2, 16, AttentionMask::identity, true};
  DownstreamConfig down{8, 16, 2, 1, 16, 4, 16};
  TrainConfig tc;
  DownstreamModel downstream = [this] {
    Rng rng(7);
    DownstreamModel m(down, rng);
    m.freeze();
    return m;
  }();
  Pruner pruner = make_pruner(sc, dc, seeds);

  TinyRun() {
    tc.k = 2;
    tc.batch = 4;
    tc.steps = 12;
    tc.tau = {2.0, 0.5, 12};
    tc.eval_every = 4;
    tc.val_batches = 1;
    tc.lr = 1e-2;
  }

  std::vector<Tensor> values() {
    std::vector<Tensor> out;
    for (auto* p : collect_params(pruner)) out.push_back(p->value);
    return out;
  }

  RunRecord run(const StepCallback& cb = {}) { return train_pruner(tc, task, downstream, pruner, seeds, cb); }
};

std::vector<double> losses(const RunRecord& r) {
  std::vector<double> out;
  for (const auto& s : r.steps) out.push_back(s.loss);
  return out;
}

TEST(Training, IdenticalConfigsGiveIdenticalRuns) {
  for (auto kind : {ThrottleKind::vp_noise, ThrottleKind::gumbel_ste}) {
    TinyRun a, b;
    a.tc.throttle = b.tc.throttle = kind;
    auto ra = a.run();
    auto rb = b.run();
    EXPECT_EQ(losses(ra), losses(rb));
    EXPECT_EQ(a.values(), b.values());
  }
}

TEST(Training, ZeroLearningRateLeavesParametersUnchanged) {
  TinyRun r;
  r.tc.lr = 0.0;
  const auto before = r.values();
  r.run();
  EXPECT_EQ(r.values(), before);
}

TEST(Training, DownstreamStaysFrozen) {
  TinyRun r;
  const auto before = param_checksum(r.downstream);
  r.run();
  EXPECT_EQ(param_checksum(r.downstream), before);
  TinyRun u;
  Rng rng(1);
  DownstreamModel live(u.down, rng);
  EXPECT_THROW(train_pruner(u.tc, u.task, live, u.pruner, u.seeds), ConfigError);
}

TEST(Training, TemperatureFollowsSchedule) {
  TinyRun r;
  r.tc.early_stopping = false;
  auto rec = r.run();
  ASSERT_EQ(rec.steps.size(), r.tc.steps);
  for (const auto& s : rec.steps) {
    EXPECT_EQ(s.tau, tau_at(r.tc.tau, s.step));
    EXPECT_EQ(s.lr, cosine_lr(r.tc.lr, s.step, r.tc.steps));
    EXPECT_TRUE(std::isfinite(s.grad_norm));
  }
}

TEST(Training, EarlyStoppingRestoresBestParameters) {
  TinyRun r;
  r.tc.steps = 60;
  r.tc.eval_every = 2;
  r.tc.patience = 1;
  r.tc.lr = 5e-2;
  std::map<std::size_t, std::vector<Tensor>> after;  // params after `step + 1` updates
  auto rec = r.run([&](const StepRecord& s) { after[s.step + 1] = r.values(); });
  ASSERT_TRUE(rec.early_stopped) << "patience 1 at a high learning rate should trigger";
  ASSERT_GT(rec.best_step, 0u);
  EXPECT_EQ(r.values(), after.at(rec.best_step));
  EXPECT_LT(rec.steps.size(), r.tc.steps);
}

TEST(Training, NonFiniteParameterAbortsAtFirstStep) {
  TinyRun r;
  collect_params(r.pruner.scorer).front()->value[0] = std::numeric_limits<double>::quiet_NaN();
  try {
    r.run();
    FAIL() << "expected TrainingAborted";
  } catch (const TrainingAborted& e) {
    EXPECT_EQ(e.step, 0u);
  }
}

TEST(Training, RejectsBadConfigs) {
  TinyRun r;
  r.tc.throttle = ThrottleKind::hard_gather;
  EXPECT_THROW(r.run(), ConfigError);
  TinyRun z;
  z.tc.k = 16;
  EXPECT_THROW(z.run(), ConfigError);
}

TEST(Eval, OracleScorerRecallsEverySignalToken) {
  TinyRun r;
  auto m = eval_pruner(oracle_scorer(), r.downstream, r.task, 2, 4, 8, [](std::size_t i) { return 100 + i; });
  EXPECT_EQ(m.signal_recall, 1.0);
  EXPECT_EQ(m.samples, 32u);
}

TEST(Eval, RandomScorerRecallIsKeepFraction) {
  // Expected recall of a uniformly random K-subset is K / N.
  TinyRun r;
  const std::size_t k = 8;
  auto m = eval_pruner(random_scorer(3), r.downstream, r.task, k, 40, 16, [](std::size_t i) { return 200 + i; });
  const double p = 0.5;
  // Per-sample recall is hypergeometric / 2; its sd is below 0.5, so 3 SE over 640 samples < 0.06.
  EXPECT_NEAR(m.signal_recall, p, 3.0 * 0.5 / std::sqrt(static_cast<double>(m.samples)));
}

TEST(Eval, FullBudgetEqualsUnprunedModel) {
  TinyRun r;
  const std::size_t n = r.task.n_tokens;
  auto m = eval_pruner(random_scorer(5), r.downstream, r.task, n, 2, 8, [](std::size_t i) { return 300 + i; });
  double correct = 0.0;
  for (std::size_t b = 0; b < 2; ++b) {
    const Batch batch = gen_batch(r.task, 8, 300 + b);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      ad::Graph g(ad::Graph::GradMode::disabled);
      auto logits = r.downstream(g, g.constant(batch.sequences[i]), all_positions(n));
      correct += argmax_row(g.value(logits)) == batch.labels[i] ? 1.0 : 0.0;
    }
  }
  EXPECT_EQ(m.accuracy, correct / 16.0);
  EXPECT_EQ(m.signal_recall, 1.0);
  EXPECT_THROW(eval_pruner(oracle_scorer(), r.downstream, r.task, n + 1, 1, 1, [](std::size_t) { return 0; }),
               ConfigError);
}

TEST(Eval, SignalRecallExamples) {
  EXPECT_EQ(signal_recall({0, 1, 2}, {1, 2}), 1.0);
  EXPECT_EQ(signal_recall({0}, {1, 2}), 0.0);
  EXPECT_EQ(signal_recall({1, 5}, {1, 2, 3}), 0.5);
}

TEST(Pretrain, DefaultTaskReachesTarget) {
  SyntheticTask task;
  auto res = pretrain_downstream(task, DownstreamConfig{}, PretrainConfig{}, Seeds{});
  EXPECT_GE(res.train_accuracy, 0.95);
  EXPECT_TRUE(res.model.frozen);
  // Clean full-token accuracy on unseen batches, deployed path at K = N.
  auto m = eval_pruner(oracle_scorer(), res.model, task, task.n_tokens, 4, 32,
                       [](std::size_t i) { return test_batch_seed(Seeds{}, i); });
  EXPECT_GE(m.accuracy, 0.9);
}

TEST(Pretrain, HopelessTaskIsRejected) {
  SyntheticTask task{16, 8, 4, 2, 1e-6, 1};  // signal drowned in noise
  PretrainConfig pc;
  pc.max_steps = 20;
  EXPECT_THROW(pretrain_downstream(task, DownstreamConfig{8, 16, 2, 1, 16, 4, 16}, pc, Seeds{}), ConfigError);
}

}  // namespace
