#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>
#include <vector>

#include "diffprune/checkpoint.hpp"
#include "diffprune/models.hpp"
#include "diffprune/pipeline.hpp"
#include "diffprune/rng.hpp"
#include "fd_oracle.hpp"

namespace {

using namespace diffprune;
using diffprune::testing::central_diff;
using diffprune::testing::rel_error;

ScorerConfig small_scorer() { return ScorerConfig{8, 16, 2, 2, 24}; }

std::vector<double> score(Scorer& s, const Tensor& x) {
  ad::Graph g(ad::Graph::GradMode::disabled);
  return g.value(s(g, g.constant(x))).storage();
}

Tensor denoise(Denoiser& d, const Tensor& x) {
  ad::Graph g(ad::Graph::GradMode::disabled);
  return g.value(d(g, g.constant(x)));
}

TEST(Scorer, IdenticalTokensGetIdenticalScores) {
  Rng rng(1);
  Scorer s(small_scorer(), rng);
  auto x = randn(Shape{6, 8}, 2);
  std::copy_n(x.row(1).begin(), 8, x.row(4).begin());
  auto out = score(s, x);
  EXPECT_NEAR(out[1], out[4], 1e-13);
}

TEST(Scorer, PermutationEquivariant) {
  Rng rng(3);
  Scorer s(small_scorer(), rng);
  for (int c = 0; c < 10; ++c) {
    auto x = randn(Shape{9, 8}, rng);
    std::vector<std::size_t> perm(9);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor px(x.shape());
    for (std::size_t i = 0; i < 9; ++i) std::copy_n(x.row(perm[i]).begin(), 8, px.row(i).begin());
    auto a = score(s, x);
    auto b = score(s, px);
    for (std::size_t i = 0; i < 9; ++i) EXPECT_NEAR(b[i], a[perm[i]], 1e-12);
  }
}

TEST(Scorer, RejectsWrongInputWidth) {
  Rng rng(4);
  Scorer s(small_scorer(), rng);
  ad::Graph g;
  EXPECT_THROW(s(g, g.constant(Tensor(Shape{4, 7}))), ShapeError);
  EXPECT_THROW(Scorer(ScorerConfig{8, 10, 4, 2, 16}, rng), ConfigError);
}

TEST(Scorer, WeightGradientMatchesFiniteDifferences) {
  Rng rng(5);
  Scorer s(small_scorer(), rng);
  auto x = randn(Shape{5, 8}, 6);
  auto loss = [&] {
    ad::Graph g;
    return g.value(g.sum(s(g, g.constant(x)))).item();
  };
  {
    ad::Graph g;
    g.backward(g.sum(s(g, g.constant(x))));
  }
  // Compared as one flattened vector: key biases have an exactly zero
  // gradient (softmax ignores a per-query shift), so a per-tensor relative
  // error would only measure rounding.
  std::vector<double> analytic, numeric;
  for (auto* p : collect_params(s)) {
    analytic.insert(analytic.end(), p->grad.data().begin(), p->grad.data().end());
    const auto fd = central_diff(p->value.data(), loss);
    numeric.insert(numeric.end(), fd.begin(), fd.end());
  }
  EXPECT_LT(rel_error(analytic, numeric), 1e-5);
}

TEST(ParamCount, ScorerMatchesFormula) {
  Rng rng(7);
  for (auto cfg : {ScorerConfig{}, small_scorer(), ScorerConfig{32, 128, 8, 3, 256}}) {
    Scorer s(cfg, rng);
    EXPECT_EQ(count_trainable(s), scorer_param_formula(cfg));
  }
  // Hand count for the desk default: d=32, h=64, f=128, two blocks.
  // in_proj 32*64+64; per block 4*64 + 4*64*64 + 4*64 + 2*64*128 + 128 + 64; ln_f 128; head 65.
  EXPECT_EQ(scorer_param_formula(ScorerConfig{}), 2112u + 2u * 33472u + 128u + 65u);
}

TEST(ParamCount, DoublingHiddenRoughlyQuadruplesSquareWeights) {
  auto square = [](std::size_t h) {
    ScorerConfig c{32, h, 4, 2, 2 * h};
    return scorer_param_formula(c);
  };
  const double ratio = static_cast<double>(square(256)) / static_cast<double>(square(128));
  EXPECT_GT(ratio, 3.8);
  EXPECT_LT(ratio, 4.0);
}

TEST(ParamCount, FreezingDownstreamLeavesPrunerCountAlone) {
  Rng rng(8);
  Scorer s(small_scorer(), rng);
  DownstreamModel m(DownstreamConfig{8, 16, 2, 1, 16, 4, 32}, rng);
  const auto before = count_trainable(s);
  m.freeze();
  EXPECT_EQ(count_trainable(s), before);
  EXPECT_EQ(count_trainable(m), 0u);
}

class DenoiserMask : public ::testing::TestWithParam<bool> {};

TEST_P(DenoiserMask, IdentityModeIsDiagonal) {
  Rng rng(9);
  DenoiserConfig cfg{8, 2, 16, AttentionMask::identity, GetParam()};
  Denoiser d(cfg, rng);
  for (int c = 0; c < 20; ++c) {
    auto x = randn(Shape{7, 8}, rng);
    const auto base = denoise(d, x);
    const std::size_t j = static_cast<std::size_t>(c) % 7;
    auto moved = x;
    moved(j, static_cast<std::size_t>(c) % 8) += 0.5;
    const auto out = denoise(d, moved);
    for (std::size_t i = 0; i < 7; ++i) {
      if (i == j) continue;
      for (std::size_t k = 0; k < 8; ++k) ASSERT_EQ(out(i, k), base(i, k)) << "token " << i << " moved " << j;
    }
  }
}

INSTANTIATE_TEST_SUITE_P(ZeroInit, DenoiserMask, ::testing::Bool());

TEST(Denoiser, IdentityModeEqualsPerTokenProcessing) {
  Rng rng(10);
  Denoiser d(DenoiserConfig{8, 2, 16, AttentionMask::identity, false}, rng);
  auto x = randn(Shape{6, 8}, 11);
  const auto batch = denoise(d, x);
  for (std::size_t i = 0; i < 6; ++i) {
    Tensor one(Shape{1, 8});
    std::copy_n(x.row(i).begin(), 8, one.row(0).begin());
    const auto single = denoise(d, one);
    for (std::size_t k = 0; k < 8; ++k) EXPECT_NEAR(single(0, k), batch(i, k), 1e-13);
  }
}

TEST(Denoiser, FullModeMixesTokens) {
  Rng rng(12);
  Denoiser d(DenoiserConfig{8, 2, 16, AttentionMask::full, false}, rng);
  auto x = randn(Shape{6, 8}, 13);
  const auto base = denoise(d, x);
  auto moved = x;
  moved(2, 0) += 0.5;
  moved(2, 5) -= 0.3;
  const auto out = denoise(d, moved);
  double change = 0.0;
  for (std::size_t k = 0; k < 8; ++k) change = std::max(change, std::abs(out(0, k) - base(0, k)));
  EXPECT_GT(change, 1e-6);
}

TEST(Denoiser, ZeroInitIsIdentity) {
  Rng rng(14);
  Denoiser d(DenoiserConfig{8, 2, 16, AttentionMask::identity, true}, rng);
  auto x = randn(Shape{5, 8}, 15);
  EXPECT_EQ(denoise(d, x), x);
}

TEST(Downstream, FrozenParamsReceiveNoGradient) {
  Rng rng(16);
  DownstreamModel m(DownstreamConfig{8, 16, 2, 1, 16, 4, 32}, rng);
  m.freeze();
  ad::Graph g;
  auto x = g.variable(randn(Shape{5, 8}, 17));
  auto logits = m(g, x, all_positions(5));
  EXPECT_EQ(g.value(logits).shape(), (Shape{1, 4}));
  g.backward(g.cross_entropy(logits, 1));
  for (auto* p : collect_params(m)) EXPECT_EQ(p->grad.squared_norm(), 0.0) << p->name;
  EXPECT_GT(g.grad(x)->squared_norm(), 0.0);
}

TEST(Downstream, RejectsBadPositions) {
  Rng rng(18);
  DownstreamModel m(DownstreamConfig{8, 16, 2, 1, 16, 4, 8}, rng);
  ad::Graph g;
  auto x = g.constant(randn(Shape{3, 8}, 1));
  EXPECT_THROW(m(g, x, std::vector<std::size_t>{0, 1}), ShapeError);
  EXPECT_THROW(m(g, x, std::vector<std::size_t>{0, 1, 8}), ShapeError);
}

// Full training path: scorer -> soft top-K -> vp-noise -> denoiser -> frozen
// classifier -> cross-entropy, with the noise sample held fixed.
struct SmallPipeline {
  Rng rng{21};
  Scorer scorer{small_scorer(), rng};
  Denoiser denoiser{DenoiserConfig{8, 2, 16, AttentionMask::identity, false}, rng};
  DownstreamModel downstream{DownstreamConfig{8, 16, 2, 1, 16, 4, 16}, rng};
  Tensor tokens = randn(Shape{10, 8}, 22);

  SmallPipeline() { downstream.freeze(); }

  double loss(ThrottleKind kind, bool backward) {
    ad::Graph g(backward ? ad::Graph::GradMode::enabled : ad::Graph::GradMode::disabled);
    PrunerModels m{&scorer, &denoiser, &downstream};
    PathOptions opt{kind, 4, 0.8, kind != ThrottleKind::gumbel_ste};
    auto tr = training_path(g, m, opt, tokens, 2, SampleNoise{123, 456, false});
    if (backward) g.backward(tr.loss);
    return g.value(tr.loss).item();
  }
};

TEST(Pipeline, EndToEndGradientMatchesFiniteDifferences) {
  for (auto kind : {ThrottleKind::vp_noise, ThrottleKind::scale_gate}) {
    SmallPipeline p;
    p.loss(kind, true);
    std::vector<Param*> params = collect_params(p.scorer);
    for (auto* q : collect_params(p.denoiser)) params.push_back(q);
    for (auto* q : params) {
      const auto analytic = q->grad.storage();
      const auto numeric = central_diff(q->value.data(), [&] { return p.loss(kind, false); });
      EXPECT_LT(rel_error(analytic, numeric), 1e-4) << to_string(kind) << " " << q->name;
    }
  }
}

TEST(Pipeline, GumbelPathSkipsDenoiserAndHardGatherIsRejected) {
  SmallPipeline p;
  ad::Graph g;
  PrunerModels m{&p.scorer, &p.denoiser, &p.downstream};
  training_path(g, m, PathOptions{ThrottleKind::gumbel_ste, 4, 1.0, false}, p.tokens, 0, SampleNoise{1, 2, false});
  EXPECT_EQ(g.count_in_scope("denoiser"), 0u);
  EXPECT_EQ(g.count_in_scope("soft_topk"), 0u);
  EXPECT_GT(g.count_in_scope("throttler"), 0u);
  ad::Graph h;
  EXPECT_THROW(training_path(h, m, PathOptions{ThrottleKind::hard_gather, 4, 1.0, true}, p.tokens, 0, {}), ConfigError);
}

TEST(Pipeline, DeployedGraphHasNoThrottleOrDenoiser) {
  SmallPipeline p;
  ad::Graph g(ad::Graph::GradMode::disabled);
  auto tr = deployed_path(g, p.scorer, p.downstream, p.tokens, 4);
  EXPECT_EQ(tr.kept.size(), 4u);
  EXPECT_EQ(g.count_in_scope("throttler"), 0u);
  EXPECT_EQ(g.count_in_scope("denoiser"), 0u);
  EXPECT_EQ(g.count_in_scope("soft_topk"), 0u);
  EXPECT_GT(g.count_in_scope("scorer"), 0u);
  EXPECT_EQ(g.count_in_scope("gather"), 2u);  // token constant + gather
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Rng rng(30);
  Scorer s(small_scorer(), rng);
  Denoiser d(DenoiserConfig{8, 2, 16, AttentionMask::identity, false}, rng);
  auto params = collect_params(s);
  for (auto* q : collect_params(d)) params.push_back(q);
  // Awkward values survive too.
  params[0]->value[0] = -0.0;
  params[0]->value[1] = 5e-324;
  params[0]->value[2] = 1.0 / 3.0;

  CheckpointMeta meta;
  meta.config = {{"name", "unit"}, {"k", 4}};
  meta.config_hash = "00ff";
  meta.step = 17;
  meta.seed = 99;
  const auto dir = std::filesystem::temp_directory_path() / "diffprune_ckpt_test";
  std::filesystem::create_directories(dir);
  save_checkpoint(dir / "a.bin", meta, params);
  const auto ck = load_checkpoint(dir / "a.bin");
  EXPECT_EQ(ck.meta.config, meta.config);
  EXPECT_EQ(ck.meta.config_hash, "00ff");
  EXPECT_EQ(ck.meta.step, 17u);
  EXPECT_EQ(ck.meta.seed, 99u);
  ASSERT_EQ(ck.names.size(), params.size());

  Rng other(31);
  Scorer s2(small_scorer(), other);
  Denoiser d2(DenoiserConfig{8, 2, 16, AttentionMask::identity, false}, other);
  auto params2 = collect_params(s2);
  for (auto* q : collect_params(d2)) params2.push_back(q);
  restore_params(ck, params2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto a = params[i]->value.data();
    const auto b = params2[i]->value.data();
    ASSERT_EQ(std::memcmp(a.data(), b.data(), a.size_bytes()), 0) << params[i]->name;
  }
  EXPECT_TRUE(std::signbit(params2[0]->value[0]));

  save_checkpoint(dir / "b.bin", meta, params2);
  EXPECT_EQ(read_file(dir / "a.bin"), read_file(dir / "b.bin"));
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, CorruptFilesAreRejected) {
  Rng rng(32);
  Scorer s(small_scorer(), rng);
  auto params = collect_params(s);
  const auto bytes = encode_checkpoint(CheckpointMeta{}, params);
  EXPECT_NO_THROW(decode_checkpoint(bytes));
  EXPECT_THROW(decode_checkpoint("nope"), IoError);
  EXPECT_THROW(decode_checkpoint(std::string("XXCKPT01") + bytes.substr(8)), IoError);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 8)), IoError);
  EXPECT_THROW(decode_checkpoint(bytes + "x"), IoError);
  auto broken = bytes;
  broken[20] = '#';
  EXPECT_THROW(decode_checkpoint(broken), IoError);
  EXPECT_THROW(load_checkpoint("/nonexistent/ckpt.bin"), IoError);

  Rng other(33);
  Scorer wider(ScorerConfig{8, 32, 2, 2, 24}, other);
  auto wp = collect_params(wider);
  EXPECT_THROW(restore_params(decode_checkpoint(bytes), wp), IoError);
}

}  // namespace
