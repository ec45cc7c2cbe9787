#include <gtest/gtest.h>

#include <cmath>

#include "ccps/perturbation.hpp"
#include "ccps/softmax.hpp"
#include "test_support.hpp"

namespace ccps {
namespace {

using testing::random_head;
using testing::random_vector;
using testing::two_token_head;

// Loss recomputed from scratch as log1p(sum_{v != t} exp(z_v - z_t)), which
// keeps full relative precision when P(t) is close to 1.
double naive_loss(const BasicLMHead<double>& W, const std::vector<double>& h, std::size_t t) {
  std::vector<double> gap(W.vocab_size);
  for (std::size_t v = 0; v < W.vocab_size; ++v) {
    gap[v] = W.has_bias() ? W.bias[v] - W.bias[t] : 0.0;
    for (std::size_t j = 0; j < W.hidden_dim; ++j)
      gap[v] += (W.weights[v * W.hidden_dim + j] - W.weights[t * W.hidden_dim + j]) * h[j];
  }
  double m = 0.0;
  for (std::size_t v = 0; v < W.vocab_size; ++v)
    if (v != t) m = std::max(m, gap[v]);
  if (m > 0.0) {
    double s = std::exp(-m);
    for (std::size_t v = 0; v < W.vocab_size; ++v)
      if (v != t) s += std::exp(gap[v] - m);
    return m + std::log(s);
  }
  double s = 0.0;
  for (std::size_t v = 0; v < W.vocab_size; ++v)
    if (v != t) s += std::exp(gap[v]);
  return std::log1p(s);
}

double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max({scale, std::abs(a[i]), std::abs(b[i])});
  }
  return scale < 1e-12 ? diff : diff / scale;
}

double norm(std::span<const float> x) {
  double s = 0.0;
  for (float v : x) s += static_cast<double>(v) * v;
  return std::sqrt(s);
}

TEST(Logits, ZeroStateWithoutBiasGivesZeroLogits) {
  SplitMix64 rng(1);
  const auto head = random_head<float>(rng, 9, 5);
  const std::vector<float> h(5, 0.0f);
  for (float z : compute_logits(head, std::span<const float>(h))) EXPECT_EQ(z, 0.0f);
}

TEST(Logits, TwoTokenExample) {
  const auto head = two_token_head<float>();
  const std::vector<float> h{3.0f};
  const auto z = compute_logits(head, std::span<const float>(h));
  ASSERT_EQ(z.size(), 2u);
  EXPECT_EQ(z[0], 3.0f);
  EXPECT_EQ(z[1], -3.0f);
}

TEST(Logits, MatchesNaiveMatmul) {
  SplitMix64 rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const auto head = random_head<float>(rng, 6, 4, 1.0, trial % 2 == 0);
    const auto h = random_vector<float>(rng, 4, 2.0);
    const auto z = compute_logits(head, std::span<const float>(h));
    for (std::size_t v = 0; v < 6; ++v) {
      double expect = head.has_bias() ? head.bias[v] : 0.0;
      for (std::size_t j = 0; j < 4; ++j) expect += static_cast<double>(head.weights[v * 4 + j]) * h[j];
      EXPECT_NEAR(z[v], expect, 1e-6);
    }
  }
}

TEST(Logits, DimensionMismatchThrows) {
  SplitMix64 rng(3);
  const auto head = random_head<float>(rng, 6, 4);
  const std::vector<float> h(3, 1.0f);
  EXPECT_THROW(compute_logits(head, std::span<const float>(h)), ValidationError);
  const std::vector<float> ok(4, 1.0f);
  EXPECT_THROW(compute_jacobian(head, std::span<const float>(ok), 6), ValidationError);
}

TEST(Jacobian, NearOneHotDistributionGivesZeroGradient) {
  // Z = (100, 0, 10, -5): the target leads every other logit by at least 90.
  BasicLMHead<float> head{4, 2, {1, 0, 0, 0, 0.1f, 0, -0.05f, 0}, {}};
  const std::vector<float> h{100.0f, 7.0f};
  const auto g = compute_jacobian(head, std::span<const float>(h), 0);
  for (float j : g.jacobian) EXPECT_LT(std::abs(j), 1e-30f);
  EXPECT_LT(g.loss, 1e-30);
  EXPECT_GE(g.loss, 0.0);
}

TEST(Jacobian, TwoTokenAnalyticOracle) {
  const auto head = two_token_head<double>();
  const std::vector<double> h{3.0};
  const auto g = compute_jacobian(head, std::span<const double>(h), 0);
  const double p1 = 1.0 / (1.0 + std::exp(6.0));  // sigma(-6)
  ASSERT_EQ(g.jacobian.size(), 1u);
  EXPECT_NEAR(g.jacobian[0], -2.0 * p1, 1e-15);
  EXPECT_NEAR(g.loss, std::log1p(std::exp(-6.0)), 1e-15);  // -log sigma(6)
}

TEST(Jacobian, MatchesCentralFiniteDifferences) {
  SplitMix64 rng(4);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t V = 2 + rng.below(40), d = 1 + rng.below(16);
    const auto head = random_head<double>(rng, V, d, 1.0, trial % 3 == 0);
    auto h = random_vector<double>(rng, d, 1.5);
    const auto t = static_cast<std::uint32_t>(rng.below(V));
    const auto g = compute_jacobian(head, std::span<const double>(h), t);
    EXPECT_NEAR(g.loss, naive_loss(head, h, t), 1e-12);
    std::vector<double> fd(d);
    const double step = 1e-4;
    for (std::size_t j = 0; j < d; ++j) {
      const double orig = h[j];
      h[j] = orig + step;
      const double up = naive_loss(head, h, t);
      h[j] = orig - step;
      const double down = naive_loss(head, h, t);
      h[j] = orig;
      fd[j] = (up - down) / (2 * step);
    }
    worst = std::max(worst, relative_error(g.jacobian, fd));
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(Jacobian, EqualsTransposedResidualForm) {
  SplitMix64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto head = random_head<double>(rng, 12, 6, 1.0, true);
    const auto h = random_vector<double>(rng, 6);
    const auto t = static_cast<std::uint32_t>(rng.below(12));
    const auto g = compute_jacobian(head, std::span<const double>(h), t);
    const auto p = softmax(std::span<const double>(compute_logits(head, std::span<const double>(h))));
    for (std::size_t j = 0; j < 6; ++j) {
      double expect = 0.0;
      for (std::size_t v = 0; v < 12; ++v) expect += head.weights[v * 6 + j] * (p[v] - (v == t ? 1.0 : 0.0));
      EXPECT_NEAR(g.jacobian[j], expect, 1e-13);
    }
  }
}

TEST(Perturb, DefaultScheduleAndSentinel) {
  PerturbationConfig cfg;
  EXPECT_EQ(cfg.eps_max, 20.0);
  EXPECT_EQ(cfg.steps, 5u);
  const double expected[] = {4, 8, 12, 16, 20};
  for (std::size_t s = 1; s <= 5; ++s) EXPECT_EQ(cfg.epsilon(s), expected[s - 1]);
  EXPECT_EQ(cfg.flip_sentinel(), 24.0);

  const auto traj = perturb(two_token_head<float>(), std::span<const float>(std::vector<float>{3.0f}), 0);
  ASSERT_EQ(traj.steps(), 5u);
  for (std::size_t s = 0; s < 5; ++s) EXPECT_EQ(traj.epsilons[s], expected[s]);

  EXPECT_THROW((PerturbationConfig{0.0, 5}.validate()), ValidationError);
  EXPECT_THROW((PerturbationConfig{20.0, 0}.validate()), ValidationError);
}

TEST(Perturb, ZeroJacobianLeavesEveryStepUnchanged) {
  // Identical rows: softmax is uniform and every residual direction cancels.
  BasicLMHead<float> head{3, 2, {0.5f, -1.0f, 0.5f, -1.0f, 0.5f, -1.0f}, {}};
  const std::vector<float> h{0.3f, 2.0f};
  const auto traj = perturb(head, std::span<const float>(h), 1);
  EXPECT_TRUE(traj.zero_direction());
  EXPECT_EQ(traj.jacobian_norm, 0.0);
  for (std::size_t s = 0; s < traj.steps(); ++s) {
    for (std::size_t j = 0; j < 2; ++j) EXPECT_EQ(traj.hidden(s)[j], traj.h0[j]);
    for (std::size_t v = 0; v < 3; ++v) EXPECT_EQ(traj.logits(s)[v], traj.z0[v]);
  }
}

TEST(Perturb, TwoTokenLogProbabilityStrictlyDecreases) {
  const auto traj = perturb(two_token_head<float>(), std::span<const float>(std::vector<float>{3.0f}), 0);
  EXPECT_EQ(traj.direction[0], -1.0f);
  double prev = traj.z0[0] - log_sum_exp(std::span<const float>(traj.z0));
  const float expected_h[] = {-1, -5, -9, -13, -17};
  for (std::size_t s = 0; s < 5; ++s) {
    EXPECT_EQ(traj.hidden(s)[0], expected_h[s]);
    // Closed form: log P(t0) = -log(1 + exp(-2h)).
    const double h = expected_h[s];
    const double lp = traj.logits(s)[0] - log_sum_exp(traj.logits(s));
    EXPECT_NEAR(lp, -std::log1p(std::exp(-2.0 * h)), 1e-5);
    EXPECT_LT(lp, prev);
    prev = lp;
  }
}

TEST(Perturb, DirectionIsAdversarial) {
  SplitMix64 rng(6);
  int checked = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const auto head = random_head<double>(rng, 2 + rng.below(30), 1 + rng.below(10));
    const auto h = random_vector<double>(rng, head.hidden_dim);
    const auto t = static_cast<std::uint32_t>(rng.below(head.vocab_size));
    const auto traj = perturb(head, std::span<const double>(h), t);
    if (traj.jacobian_norm <= 1e-8) continue;
    double n2 = 0.0;
    for (double d : traj.direction) n2 += d * d;
    EXPECT_NEAR(std::sqrt(n2), 1.0, 1e-5);
    std::vector<double> moved(h);
    for (std::size_t j = 0; j < h.size(); ++j) moved[j] += 1e-3 * traj.direction[j];
    EXPECT_GT(naive_loss(head, moved, t), naive_loss(head, h, t));
    ++checked;
  }
  EXPECT_GT(checked, 150);
}

TEST(Perturb, StepGeometry) {
  SplitMix64 rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    const auto head = random_head<float>(rng, 2 + rng.below(50), 1 + rng.below(32));
    const auto h = random_vector<float>(rng, head.hidden_dim, 2.0);
    const auto t = static_cast<std::uint32_t>(rng.below(head.vocab_size));
    PerturbationConfig cfg{1.0 + 30.0 * rng.uniform(), 1 + rng.below(8)};
    const auto traj = perturb(head, std::span<const float>(h), t, cfg);
    ASSERT_FALSE(traj.zero_direction());
    EXPECT_NEAR(norm(traj.direction), 1.0, 1e-5);
    std::vector<float> prev(h);
    for (std::size_t s = 0; s < traj.steps(); ++s) {
      std::vector<float> delta(h.size()), step(h.size());
      for (std::size_t j = 0; j < h.size(); ++j) {
        delta[j] = traj.hidden(s)[j] - h[j];
        step[j] = traj.hidden(s)[j] - prev[j];
      }
      EXPECT_NEAR(norm(delta), traj.epsilons[s], 1e-5 * traj.epsilons[s]);
      // Each increment is parallel to d: |<step, d>| == |step|.
      double dot = 0.0;
      for (std::size_t j = 0; j < h.size(); ++j) dot += static_cast<double>(step[j]) * traj.direction[j];
      EXPECT_NEAR(dot, norm(step), 1e-4 * (1.0 + norm(step)));
      const auto z = compute_logits(head, traj.hidden(s));
      for (std::size_t v = 0; v < z.size(); ++v) EXPECT_EQ(z[v], traj.logits(s)[v]);
      prev.assign(traj.hidden(s).begin(), traj.hidden(s).end());
    }
  }
}

TEST(Perturb, LargeLogitsStayFinite) {
  SplitMix64 rng(8);
  for (double scale : {1e2, 1e3, 1e4}) {
    for (int trial = 0; trial < 20; ++trial) {
      auto head = random_head<float>(rng, 16, 4);
      for (auto& w : head.weights) w = static_cast<float>(w / 3.0 * scale);
      const auto h = random_vector<float>(rng, 4);
      const auto t = static_cast<std::uint32_t>(rng.below(16));
      const auto traj = perturb(head, std::span<const float>(h), t);
      EXPECT_TRUE(std::isfinite(traj.loss));
      EXPECT_TRUE(std::isfinite(traj.jacobian_norm));
      for (float v : traj.jacobian) EXPECT_TRUE(std::isfinite(v));
      for (float v : traj.zs) EXPECT_TRUE(std::isfinite(v));
      const double lse = log_sum_exp(std::span<const float>(traj.z0));
      EXPECT_TRUE(std::isfinite(lse));
      for (double p : softmax(std::span<const float>(traj.z0))) EXPECT_TRUE(std::isfinite(p));
    }
  }
}

}  // namespace
}  // namespace ccps
