// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "drclf/optimizer.hpp"
#include "oracles.hpp"

namespace drclf {
namespace {

Matrix<double> random_batch(std::size_t n, std::size_t d, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, scale);
  Matrix<double> x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = normal(rng);
  return x;
}

/// Randomizes every trainable tensor and the running statistics so the
/// gradient check does not sit on the special init values.
void perturb(MlpParams<double>& p, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.5);
  p.weights.for_each([&](auto& t) {
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] += normal(rng);
  });
  for (auto& r : p.running) {
    for (Eigen::Index i = 0; i < r.mean.size(); ++i) {
      r.mean(i) = normal(rng);
      r.var(i) = 0.5 + std::abs(normal(rng));
    }
  }
}

TEST(InitParams, DeterministicPerSeed) {
  const auto a = init_params<double>({16, 8, 8, 1}, 42);
  const auto b = init_params<double>({16, 8, 8, 1}, 42);
  const auto c = init_params<double>({16, 8, 8, 1}, 43);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
}

TEST(InitParams, BatchNormAndRunningStatsStartAtIdentity) {
  const auto p = init_params<float>({768, 768, 768, 1}, 1);
  p.validate();
  for (std::size_t l = 0; l < 2; ++l) {
    EXPECT_TRUE(p.weights.layers[l].scale.isOnes());
    EXPECT_TRUE(p.weights.layers[l].shift.isZero());
    EXPECT_TRUE(p.weights.layers[l].bias.isZero());
    EXPECT_TRUE(p.running[l].mean.isZero());
    EXPECT_TRUE(p.running[l].var.isOnes());
  }
  EXPECT_EQ(p.weights.layers[2].weight.rows(), 1);
  EXPECT_EQ(p.weights.layers[2].weight.cols(), 768);
  EXPECT_EQ(p.weights.layers[2].scale.size(), 0);
}

TEST(InitParams, HeVariance) {
  const auto p = init_params<double>({768, 768, 768, 1}, 7);
  const auto& w = p.weights.layers[0].weight;
  const double m = w.mean();
  const double var = (w.array() - m).square().mean();
  EXPECT_NEAR(var, 2.0 / 768.0, 0.1 * 2.0 / 768.0);
}

TEST(InitParams, RejectsBadDims) {
  EXPECT_THROW(init_params<double>({16, 0, 8, 1}, 0), Error);
  EXPECT_THROW(init_params<double>({16, 8, 8, 2}, 0), Error);
  EXPECT_THROW(init_params<double>({1}, 0), Error);
}

TEST(Forward, ZeroNetworkGivesZeroLogits) {
  auto p = init_params<double>({6, 5, 5, 1}, 1);
  p.weights.for_each([](auto& t) { t.setZero(); });
  const auto c = forward(p, random_batch(4, 6, 1), Mode::eval);
  EXPECT_TRUE(c.logits.isZero());
}

TEST(Forward, EvalModeIgnoresDropout) {
  const auto p = init_params<double>({6, 5, 5, 1}, 2);
  const auto x = random_batch(8, 6, 2);
  Rng rng(1);
  const auto masks = draw_dropout_masks<double>(p.dims, 8, 0.5, rng);
  EXPECT_EQ(forward(p, x, Mode::eval, masks).logits, forward(p, x, Mode::eval).logits);
}

TEST(Forward, TrainModeNormalizesWithBatchStatistics) {
  auto p = init_params<double>({6, 5, 5, 1}, 3);
  perturb(p, 3);
  const auto c = forward(p, random_batch(32, 6, 3, 3.0), Mode::train);
  for (const auto& h : c.hidden) {
    const Eigen::RowVectorXd mean = h.normalized.colwise().mean();
    const Eigen::RowVectorXd var = (h.normalized.rowwise() - mean).array().square().colwise().mean();
    for (Eigen::Index j = 0; j < mean.size(); ++j) {
      EXPECT_NEAR(mean(j), 0.0, 1e-12);
      // eps = 1e-5 in the denominator shrinks the variance slightly below 1.
      const double bv = h.batch_var(j);
      EXPECT_NEAR(var(j), bv / (bv + 1e-5), 1e-12);
      EXPECT_NEAR(var(j), 1.0, 1e-4);
    }
    EXPECT_GE(h.activated.minCoeff(), 0.0);
  }
}

TEST(Forward, TrainEqualsEvalWhenRunningStatsMatchBatch) {
  auto p = init_params<double>({6, 5, 5, 1}, 4);
  perturb(p, 4);
  const auto x = random_batch(16, 6, 4);
  const auto train = forward(p, x, Mode::train);
  for (std::size_t l = 0; l < p.running.size(); ++l) {
    p.running[l].mean = train.hidden[l].batch_mean;
    p.running[l].var = train.hidden[l].batch_var;
  }
  const auto eval = forward(p, x, Mode::eval);
  EXPECT_LE((train.logits - eval.logits).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Forward, EvalIsPure) {
  const auto p = init_params<double>({6, 5, 5, 1}, 5);
  const auto before = p;
  const auto x = random_batch(3, 6, 5);
  const auto a = forward(p, x, Mode::eval);
  const auto b = forward(p, x, Mode::eval);
  EXPECT_EQ(a.logits, b.logits);
  EXPECT_EQ(p, before);
}

TEST(Forward, Errors) {
  const auto p = init_params<double>({6, 5, 5, 1}, 6);
  try {
    forward(p, random_batch(1, 6, 1), Mode::train);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::TrainBatchTooSmall);
  }
  try {
    forward(p, random_batch(4, 7, 1), Mode::eval);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DimensionMismatch);
  }
  // A single sample is fine in eval mode.
  EXPECT_NO_THROW(forward(p, random_batch(1, 6, 1), Mode::eval));
}

TEST(DropoutMasks, EntriesAreZeroOrInverseKeepRate) {
  Rng rng(9);
  const auto masks = draw_dropout_masks<double>({6, 50, 50, 1}, 40, 0.3, rng);
  ASSERT_EQ(masks.layers.size(), 2u);
  std::size_t zeros = 0, total = 0;
  for (const auto& m : masks.layers) {
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const double v = m.data()[i];
      EXPECT_TRUE(v == 0.0 || v == 1.0 / 0.7);
      zeros += v == 0.0;
      ++total;
    }
  }
  EXPECT_NEAR(static_cast<double>(zeros) / total, 0.3, 0.03);
  EXPECT_TRUE(draw_dropout_masks<double>({6, 5, 5, 1}, 4, 0.0, rng).empty());
  EXPECT_THROW(draw_dropout_masks<double>({6, 5, 5, 1}, 4, 1.0, rng), Error);
}

TEST(UpdateRunningStats, MomentumAverage) {
  auto p = init_params<double>({6, 5, 5, 1}, 10);
  const auto c = forward(p, random_batch(8, 6, 10), Mode::train);
  update_running_stats(p, c);
  const auto& h = c.hidden[0];
  for (Eigen::Index j = 0; j < 5; ++j) {
    EXPECT_DOUBLE_EQ(p.running[0].mean(j), 0.1 * h.batch_mean(j));
    EXPECT_NEAR(p.running[0].var(j), 0.9 + 0.1 * h.batch_var(j) * 8.0 / 7.0, 1e-15);
  }
  EXPECT_THROW(update_running_stats(p, forward(p, random_batch(8, 6, 10), Mode::eval)), Error);
}

TEST(Backward, ZeroUpstreamGivesZeroGradients) {
  const auto p = init_params<double>({6, 5, 5, 1}, 11);
  const auto c = forward(p, random_batch(8, 6, 11), Mode::train);
  const auto g = backward(p, c, Vector<double>(Vector<double>::Zero(8)));
  for (double v : oracle::flatten(g)) EXPECT_EQ(v, 0.0);
}

TEST(Backward, LinearInUpstreamGradient) {
  auto p = init_params<double>({6, 5, 5, 1}, 12);
  perturb(p, 12);
  const auto c = forward(p, random_batch(8, 6, 12), Mode::train);
  const Vector<double> d = Vector<double>::LinSpaced(8, -1, 1);
  const auto g1 = oracle::flatten(backward(p, c, d));
  const auto g2 = oracle::flatten(backward(p, c, Vector<double>(2 * d)));
  for (std::size_t i = 0; i < g1.size(); ++i) EXPECT_DOUBLE_EQ(g2[i], 2 * g1[i]);
}

TEST(Backward, StaleCacheRejected) {
  const auto p = init_params<double>({6, 5, 5, 1}, 13);
  const auto other = init_params<double>({6, 4, 4, 1}, 13);
  const auto c = forward(p, random_batch(8, 6, 13), Mode::train);
  EXPECT_THROW(backward(other, c, Vector<double>(Vector<double>::Zero(8))), Error);
  EXPECT_THROW(backward(p, c, Vector<double>(Vector<double>::Zero(7))), Error);
  EXPECT_THROW(backward(p, forward(p, random_batch(8, 6, 13), Mode::eval), Vector<double>(Vector<double>::Zero(8))), Error);
}

// Loss = sum_i w_i * bce(z_i, y_i) with fixed weights; backward receives
// w_i * (sigmoid(z_i) - y_i).
void check_gradient(std::uint64_t seed, bool with_dropout) {
  auto p = init_params<double>({6, 5, 5, 1}, seed);
  perturb(p, seed);
  const auto x = random_batch(8, 6, seed + 1000);
  std::vector<double> y(8), w(8);
  std::mt19937_64 rng(seed);
  for (int i = 0; i < 8; ++i) {
    y[i] = i % 2;
    w[i] = std::uniform_real_distribution<double>(0.1, 1.0)(rng);
  }
  Rng mask_rng(seed);
  const auto masks = with_dropout ? draw_dropout_masks<double>(p.dims, 8, 0.3, mask_rng) : DropoutMasks<double>{};

  auto loss = [&](const MlpParams<double>& q) {
    const auto c = forward(q, x, Mode::train, masks);
    double total = 0;
    for (int i = 0; i < 8; ++i) total += w[i] * oracle::bce_reference(c.logits(i), y[i]);
    return total;
  };
  const auto c = forward(p, x, Mode::train, masks);
  Vector<double> dlogits(8);
  for (int i = 0; i < 8; ++i) dlogits(i) = w[i] * (1.0 / (1.0 + std::exp(-c.logits(i))) - y[i]);
  const auto analytic = oracle::flatten(backward(p, c, dlogits));
  const auto numeric = oracle::finite_difference_gradient(p, loss);
  ASSERT_EQ(analytic.size(), numeric.size());
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    EXPECT_LE(oracle::relative_error(analytic[i], numeric[i]), 1e-4)
        << "seed " << seed << " entry " << i << ": " << analytic[i] << " vs " << numeric[i];
  }
}

TEST(Backward, MatchesFiniteDifferences) { check_gradient(21, false); }
TEST(Backward, MatchesFiniteDifferencesWithDropoutMask) { check_gradient(22, true); }
TEST(Backward, MatchesFiniteDifferencesOnRandomNetworks) {
  for (std::uint64_t s = 100; s < 110; ++s) check_gradient(s, s % 2 == 0);
}

TrainedModel constant_logit_model(double logit) {
  TrainedModel m;
  m.params = init_params<float>({4, 3, 3, 1}, 0);
  m.params.weights.layers[2].weight.setZero();
  m.params.weights.layers[2].bias(0) = static_cast<float>(logit);
  m.feature_dim = 4;
  return m;
}

TEST(PredictProba, LogisticOfLogit) {
  const auto x = random_batch(5, 4, 30);
  for (double p : predict_proba(constant_logit_model(0.0), x)) EXPECT_EQ(p, 0.5);
  for (double p : predict_proba(constant_logit_model(-30.0), x)) {
    EXPECT_LT(p, 1e-12);
    EXPECT_GT(p, 0.0);
  }
  for (double p : predict_proba(constant_logit_model(-1000.0), x)) EXPECT_GT(p, 0.0);
  for (double p : predict_proba(constant_logit_model(1000.0), x)) EXPECT_LT(p, 1.0);
}

TEST(PredictProba, RepeatableAndDimensionChecked) {
  TrainedModel m;
  m.params = init_params<float>({4, 3, 3, 1}, 31);
  m.feature_dim = 4;
  const auto x = random_batch(6, 4, 31);
  EXPECT_EQ(predict_proba(m, x), predict_proba(m, x));
  EXPECT_THROW(predict_proba(m, random_batch(6, 5, 31)), Error);
}

}  // namespace
}  // namespace drclf
