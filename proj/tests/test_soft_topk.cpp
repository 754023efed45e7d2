#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "diffprune/autodiff.hpp"
#include "diffprune/rng.hpp"
#include "diffprune/soft_topk.hpp"
#include "fd_oracle.hpp"

namespace {

using namespace diffprune;
using diffprune::testing::central_diff;
using diffprune::testing::rel_error;

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Independent top-K oracle: full sort by (score desc, index asc).
std::vector<double> sort_oracle_mask(const std::vector<double>& s, std::size_t k) {
  std::vector<std::pair<double, std::size_t>> v;
  for (std::size_t i = 0; i < s.size(); ++i) v.emplace_back(-s[i], i);
  std::sort(v.begin(), v.end());
  std::vector<double> m(s.size(), 0.0);
  for (std::size_t r = 0; r < k; ++r) m[v[r].second] = 1.0;
  return m;
}

std::vector<double> random_scores(Rng& rng, std::size_t n, double scale) {
  std::normal_distribution<double> d(0.0, scale);
  std::vector<double> s(n);
  for (auto& x : s) x = d(rng);
  return s;
}

// Scores with all pairwise gaps >= gap, in random order.
std::vector<double> gapped_scores(Rng& rng, std::size_t n, double gap) {
  std::vector<double> s(n);
  std::uniform_real_distribution<double> extra(0.0, 0.5);
  double acc = 0.0;
  for (auto& x : s) {
    x = acc;
    acc += gap + extra(rng);
  }
  std::shuffle(s.begin(), s.end(), rng);
  return s;
}

TEST(SoftTopK, EqualScoresGiveUniformWeights) {
  for (double tau : {0.01, 0.5, 1.0, 3.0}) {
    auto w = soft_topk_forward(std::vector<double>{1.5, 1.5, 1.5, 1.5}, 2, tau);
    for (double a : w.alpha) EXPECT_NEAR(a, 0.5, 1e-12);
  }
}

TEST(SoftTopK, SaturatedPair) {
  auto w = soft_topk_forward(std::vector<double>{10.0, -10.0}, 1, 0.1);
  EXPECT_NEAR(w.alpha[0], 1.0, 1e-8);
  EXPECT_NEAR(w.alpha[1], 0.0, 1e-8);
}

TEST(SoftTopK, TwoTokenClosedForm) {
  // N=2, K=1: sigma(x) + sigma(-x) = 1 forces b to the midpoint of z.
  auto w = soft_topk_forward(std::vector<double>{1.0, 0.0}, 1, 1.0);
  EXPECT_NEAR(w.threshold_b, 0.5, 1e-12);
  EXPECT_NEAR(w.alpha[0], sigmoid(0.5), 1e-12);
  EXPECT_NEAR(w.alpha[1], sigmoid(-0.5), 1e-12);
  EXPECT_NEAR(w.alpha[0], 0.62246, 1e-5);
  EXPECT_NEAR(w.alpha[1], 0.37754, 1e-5);

  Rng rng(11);
  std::normal_distribution<double> d(0.0, 2.0);
  for (int c = 0; c < 50; ++c) {
    const double tau = 0.1 + std::abs(d(rng));
    std::vector<double> s{d(rng), d(rng)};
    auto v = soft_topk_forward(s, 1, tau);
    EXPECT_NEAR(v.threshold_b, 0.5 * (s[0] + s[1]) / tau, 1e-9);
  }
}

TEST(SoftTopK, RejectsBadArguments) {
  const std::vector<double> s{1.0, 2.0, 3.0};
  EXPECT_THROW(soft_topk_forward(s, 0, 1.0), ConfigError);
  EXPECT_THROW(soft_topk_forward(s, 3, 1.0), ConfigError);
  EXPECT_THROW(soft_topk_forward(s, 1, 0.0), ConfigError);
  EXPECT_THROW(soft_topk_forward(s, 1, -1.0), ConfigError);
  EXPECT_THROW(soft_topk_forward(std::vector<double>{1.0, NAN, 0.0}, 1, 1.0), NumericError);
}

TEST(SoftTopK, BudgetConservedOnRandomInputs) {
  Rng rng(2024);
  std::uniform_int_distribution<std::size_t> nd(2, 200);
  std::uniform_real_distribution<double> logtau(std::log(1e-3), std::log(10.0));
  std::uniform_real_distribution<double> scale(0.01, 20.0);
  for (int c = 0; c < 1000; ++c) {
    const std::size_t n = nd(rng);
    std::uniform_int_distribution<std::size_t> kd(1, n - 1);
    const std::size_t k = kd(rng);
    const double tau = std::exp(logtau(rng));
    auto s = random_scores(rng, n, scale(rng));
    auto w = soft_topk_forward(s, k, tau);
    ASSERT_LE(std::abs(w.mass() - static_cast<double>(k)), 1e-8) << "case " << c;
    for (double a : w.alpha) {
      ASSERT_GE(a, 0.0);
      ASSERT_LE(a, 1.0);
    }
    // Order consistency: a higher score never gets a lower weight.
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (s[i] > s[j]) ASSERT_GE(w.alpha[i], w.alpha[j]) << "case " << c;
      }
    }
  }
}

TEST(SoftTopK, LowTemperatureMatchesHardMask) {
  Rng rng(7);
  std::uniform_int_distribution<std::size_t> nd(2, 100);
  for (int c = 0; c < 100; ++c) {
    const std::size_t n = nd(rng);
    std::uniform_int_distribution<std::size_t> kd(1, n - 1);
    const std::size_t k = kd(rng);
    auto s = gapped_scores(rng, n, 0.5);
    auto w = soft_topk_forward(s, k, 1e-3);
    auto m = hard_topk_mask(s, k);
    for (std::size_t i = 0; i < n; ++i) ASSERT_LT(std::abs(w.alpha[i] - m[i]), 1e-3);
  }
}

TEST(SoftTopK, RaisingOneScoreNeverLowersItsWeight) {
  Rng rng(8);
  std::uniform_real_distribution<double> bump(1e-4, 2.0);
  for (int c = 0; c < 300; ++c) {
    auto s = random_scores(rng, 12, 1.5);
    const std::size_t i = static_cast<std::size_t>(c) % s.size();
    auto before = soft_topk_forward(s, 4, 0.5);
    s[i] += bump(rng);
    auto after = soft_topk_forward(s, 4, 0.5);
    EXPECT_GE(after.alpha[i], before.alpha[i] - 1e-15);
  }
}

TEST(SoftTopK, BackwardExamples) {
  auto sat = soft_topk_forward(std::vector<double>{10.0, -10.0}, 1, 0.1);
  for (double v : soft_topk_backward(sat, std::vector<double>{0.3, -2.0}, 0.1)) EXPECT_NEAR(v, 0.0, 1e-12);

  auto flat = soft_topk_forward(std::vector<double>{2.0, 2.0, 2.0, 2.0}, 2, 0.8);
  for (double v : soft_topk_backward(flat, std::vector<double>{1.0, 1.0, 1.0, 1.0}, 0.8)) EXPECT_EQ(v, 0.0);

  // Gradient components always sum to zero (the budget is fixed).
  Rng rng(3);
  auto s = random_scores(rng, 10, 1.0);
  auto u = random_scores(rng, 10, 1.0);
  auto w = soft_topk_forward(s, 3, 0.7);
  auto ds = soft_topk_backward(w, u, 0.7);
  EXPECT_NEAR(std::accumulate(ds.begin(), ds.end(), 0.0), 0.0, 1e-12);
  EXPECT_THROW(soft_topk_backward(w, std::vector<double>(3, 1.0), 0.7), ShapeError);
}

TEST(SoftTopK, BackwardMatchesFiniteDifferences) {
  Rng rng(99);
  std::uniform_int_distribution<std::size_t> nd(3, 24);
  std::uniform_real_distribution<double> taud(0.05, 2.0);
  int near_saturated = 0;
  for (int c = 0; c < 200; ++c) {
    const std::size_t n = c == 0 ? 8 : nd(rng);
    const std::size_t k = c == 0 ? 3 : std::uniform_int_distribution<std::size_t>(1, n - 1)(rng);
    const double tau = c == 0 ? 0.7 : taud(rng);
    // Every fourth case stretches the scores so several weights saturate.
    auto s = random_scores(rng, n, c % 4 == 0 ? 3.0 : 1.0);
    auto u = random_scores(rng, n, 1.0);
    auto w = soft_topk_forward(s, k, tau);
    if (std::any_of(w.alpha.begin(), w.alpha.end(), [](double a) { return a < 1e-6 || a > 1 - 1e-6; })) {
      ++near_saturated;
    }
    const auto analytic = soft_topk_backward(w, u, tau);
    auto loss = [&] {
      auto v = soft_topk_forward(s, k, tau);
      return std::inner_product(u.begin(), u.end(), v.alpha.begin(), 0.0);
    };
    const auto numeric = central_diff(std::span<double>(s), loss, diffprune::testing::kFdStep * tau);
    ASSERT_LT(rel_error(analytic, numeric), 1e-5) << "case " << c << " n=" << n << " k=" << k << " tau=" << tau;
  }
  EXPECT_GT(near_saturated, 10);
}

TEST(SoftTopK, TapeNodeMatchesDirectCall) {
  Rng rng(5);
  auto s = random_scores(rng, 9, 1.0);
  ad::Graph g;
  RetentionWeights w;
  auto sid = g.variable(Tensor::vector(s));
  auto a = soft_topk(g, sid, 4, 0.6, &w);
  auto loss = g.sum(g.mul(a, g.constant(Tensor::vector(std::vector<double>(s.rbegin(), s.rend())))));
  g.backward(loss);
  auto direct = soft_topk_forward(s, 4, 0.6);
  EXPECT_EQ(g.value(a).storage(), direct.alpha);
  EXPECT_EQ(w.alpha, direct.alpha);
  auto expect = soft_topk_backward(direct, std::vector<double>(s.rbegin(), s.rend()), 0.6);
  EXPECT_EQ(g.grad(sid)->storage(), expect);
  EXPECT_EQ(g.count_in_scope("soft_topk"), 1u);
  EXPECT_THROW(soft_topk(g, g.constant(Tensor(Shape{2, 2})), 1, 1.0), ShapeError);
}

TEST(HardTopK, Examples) {
  EXPECT_EQ(hard_topk_mask(std::vector<double>{3, 1, 2}, 2), (std::vector<double>{1, 0, 1}));
  EXPECT_EQ(hard_topk_mask(std::vector<double>{5, 5, 5}, 1), (std::vector<double>{1, 0, 0}));
  EXPECT_EQ(hard_topk_mask(std::vector<double>{5, 5, 5}, 3), (std::vector<double>{1, 1, 1}));
  EXPECT_THROW(hard_topk_mask(std::vector<double>{1, 2}, 0), ConfigError);
  EXPECT_THROW(hard_topk_mask(std::vector<double>{1, 2}, 3), ConfigError);
}

TEST(HardTopK, AgreesWithSortOracle) {
  Rng rng(20);
  for (int c = 0; c < 200; ++c) {
    auto s = random_scores(rng, 20, 1.0);
    // Quantize some cases so ties actually occur.
    if (c % 2) {
      for (auto& x : s) x = std::round(x * 2.0);
    }
    EXPECT_EQ(hard_topk_mask(s, 7), sort_oracle_mask(s, 7)) << "case " << c;
  }
}

TEST(HardTopK, PiecewiseConstantUnderSubGapPerturbation) {
  Rng rng(21);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  for (int c = 0; c < 200; ++c) {
    auto s = random_scores(rng, 16, 1.0);
    const std::size_t k = 5;
    auto sorted = s;
    std::sort(sorted.begin(), sorted.end(), std::greater<>());
    const double gap = sorted[k - 1] - sorted[k];
    const auto base = hard_topk_mask(s, k);
    auto p = s;
    for (auto& x : p) x += 0.499 * gap * unit(rng);
    EXPECT_EQ(hard_topk_mask(p, k), base);
  }
}

TEST(Temperature, ScheduleExamples) {
  TemperatureSchedule sch;
  EXPECT_DOUBLE_EQ(tau_at(sch, 0), 2.0);
  EXPECT_NEAR(tau_at(sch, 2000), 0.1, 1e-15);
  EXPECT_NEAR(tau_at(sch, 1000), 1.05, 1e-12);
  EXPECT_NEAR(tau_at(sch, 5000), 0.1, 1e-15);
  double prev = tau_at(sch, 0);
  for (std::size_t t = 1; t <= 2100; ++t) {
    const double cur = tau_at(sch, t);
    ASSERT_LE(cur, prev);
    ASSERT_GT(cur, 0.0);
    prev = cur;
  }
}

TEST(Temperature, ValidateRejectsBadSchedules) {
  EXPECT_THROW((TemperatureSchedule{0.1, 2.0, 10}.validate()), ConfigError);
  EXPECT_THROW((TemperatureSchedule{2.0, 0.0, 10}.validate()), ConfigError);
  EXPECT_THROW((TemperatureSchedule{2.0, 0.1, 0}.validate()), ConfigError);
  EXPECT_NO_THROW(TemperatureSchedule{}.validate());
}

}  // namespace
