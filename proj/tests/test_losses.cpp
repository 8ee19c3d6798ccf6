#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <random>

#include "stv/losses.hpp"
#include "test_util.hpp"

using namespace stv;
using namespace stv::losses;
using stv::ad::Tape;
using stv::ad::Var;
using stv::test::random_tensor;
using stv::test::tape_fn;

namespace {

EmbeddingBatch random_unit_batch(std::size_t n, std::size_t d, std::vector<int> labels,
                                 std::uint64_t seed) {
  EmbeddingBatch b;
  b.embeddings = random_tensor({n, d}, seed);
  for (std::size_t r = 0; r < n; ++r) {
    double sq = 0.0;
    for (std::size_t i = 0; i < d; ++i) sq += b.embeddings.data[r * d + i] *
                                              b.embeddings.data[r * d + i];
    const double norm = std::sqrt(sq);
    for (std::size_t i = 0; i < d; ++i) b.embeddings.data[r * d + i] /= norm;
  }
  b.labels = std::move(labels);
  return b;
}

double sqdist(const Tensor& e, std::size_t a, std::size_t b) {
  const std::size_t d = e.shape[1];
  double s = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    const double diff = e.data[a * d + i] - e.data[b * d + i];
    s += diff * diff;
  }
  return s;
}

// direct-summation oracle for the hinge triplet loss
double triplet_oracle(const std::vector<IndexTriplet>& tr, const EmbeddingBatch& b,
                      double alpha) {
  double s = 0.0;
  for (const auto& t : tr) {
    const double v = sqdist(b.embeddings, t.anchor, t.positive) -
                     sqdist(b.embeddings, t.anchor, t.negative) + alpha;
    s += v > 0.0 ? v : 0.0;
  }
  return s / (2.0 * static_cast<double>(tr.size()));
}

// brute-force nearest-mean oracle for the mean-distance regularizer
double mean_oracle(const EmbeddingBatch& b, double beta) {
  const std::size_t d = b.dim();
  std::map<int, std::vector<std::size_t>> part;
  for (std::size_t i = 0; i < b.size(); ++i) part[b.labels[i]].push_back(i);
  std::vector<std::vector<double>> means;
  for (auto& [cls, members] : part) {
    std::vector<double> mu(d, 0.0);
    for (std::size_t i : members)
      for (std::size_t k = 0; k < d; ++k) mu[k] += b.embeddings.data[i * d + k];
    for (double& v : mu) v /= static_cast<double>(members.size());
    means.push_back(mu);
  }
  double total = 0.0;
  std::size_t violations = 0;
  for (std::size_t c = 0; c < means.size(); ++c) {
    double best = 1e300;
    for (std::size_t j = 0; j < means.size(); ++j) {
      if (j == c) continue;
      double sq = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = means[c][k] - means[j][k];
        sq += diff * diff;
      }
      best = std::min(best, sq);
    }
    const double v = beta - best;
    if (v > 0.0) {
      total += v;
      ++violations;
    }
  }
  return violations == 0 ? 0.0 : total / (2.0 * static_cast<double>(violations));
}

// direct oracle for the std regularizer
double std_oracle(const EmbeddingBatch& b, double gamma) {
  const std::size_t d = b.dim();
  std::map<int, std::vector<std::size_t>> part;
  for (std::size_t i = 0; i < b.size(); ++i) part[b.labels[i]].push_back(i);
  double total = 0.0;
  std::size_t violations = 0;
  for (auto& [cls, members] : part) {
    std::vector<double> mu(d, 0.0);
    for (std::size_t i : members)
      for (std::size_t k = 0; k < d; ++k) mu[k] += b.embeddings.data[i * d + k];
    for (double& v : mu) v /= static_cast<double>(members.size());
    double ss = 0.0;
    for (std::size_t i : members)
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = b.embeddings.data[i * d + k] - mu[k];
        ss += diff * diff;
      }
    const double sigma = std::sqrt(ss / static_cast<double>(members.size()));
    if (sigma < gamma) {
      total += gamma - sigma;
      ++violations;
    }
  }
  return violations == 0 ? 0.0 : total / static_cast<double>(violations);
}

}  // namespace

TEST(LossConfig, Validation) {
  LossConfig ok;
  ok.validate();
  LossConfig bad = ok;
  bad.alpha_triplet = -0.1;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = ok;
  bad.delta1 = 0.0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = ok;
  bad.gamma_std = 0.7;  // >= beta_mean with both regularizers active
  EXPECT_THROW(bad.validate(), ConfigError);
  bad.delta3 = 0.0;  // std term inactive: ordering no longer enforced
  bad.validate();
}

TEST(EmbeddingBatchType, InvariantChecks) {
  auto b = random_unit_batch(3, 4, {0, 0, 1}, 1);
  b.validate();
  b.embeddings.data[0] *= 2.0;
  EXPECT_THROW(b.validate(), DomainError);
  b = random_unit_batch(3, 4, {0, 0}, 2);
  EXPECT_THROW(b.validate(), ShapeError);
}

TEST(TripletLoss, OrthogonalNegativeIsSatisfied) {
  // a == p, n orthogonal to a: term = [0 - 2 + 0.2]_+ = 0
  EmbeddingBatch b;
  b.embeddings = Tensor::from({2, 2}, {1, 0, 0, 1});
  b.labels = {0, 1};
  LossConfig cfg;
  cfg.alpha_triplet = 0.2;
  EXPECT_DOUBLE_EQ(triplet_loss_value({{0, 0, 1}}, b, cfg), 0.0);
}

TEST(TripletLoss, DegenerateTripletGivesHalfAlpha) {
  EmbeddingBatch b;
  b.embeddings = Tensor::from({1, 2}, {1, 0});
  b.labels = {0};
  LossConfig cfg;
  cfg.alpha_triplet = 0.2;
  EXPECT_DOUBLE_EQ(triplet_loss_value({{0, 0, 0}}, b, cfg), 0.1);
}

TEST(TripletLoss, MatchesDirectSummationOracle) {
  auto b = random_unit_batch(12, 8, {0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3}, 3);
  std::mt19937_64 rng(4);
  std::vector<IndexTriplet> tr;
  for (int i = 0; i < 16; ++i) {
    std::size_t cls = rng() % 4;
    std::size_t a = cls * 3 + rng() % 3, p = cls * 3 + rng() % 3;
    std::size_t n = ((cls + 1 + rng() % 3) % 4) * 3 + rng() % 3;
    tr.push_back({a, p, n});
  }
  LossConfig cfg;
  EXPECT_NEAR(triplet_loss_value(tr, b, cfg), triplet_oracle(tr, b, cfg.alpha_triplet),
              1e-12);
}

TEST(TripletLoss, GradientFiniteDifference) {
  auto b = random_unit_batch(6, 5, {0, 0, 0, 1, 1, 1}, 5);
  std::vector<IndexTriplet> tr = {{0, 1, 3}, {1, 2, 4}, {3, 4, 0}, {4, 5, 2}};
  LossConfig cfg;
  auto f = tape_fn([&](Tape& t, const std::vector<Var>& p) {
    return triplet_loss(t, p[0], tr, cfg);
  });
  EXPECT_LT(ad::finite_difference_check(f, {b.embeddings}, 1e-5), 1e-6);
}

TEST(TripletLoss, Errors) {
  auto b = random_unit_batch(3, 4, {0, 0, 1}, 6);
  LossConfig cfg;
  EXPECT_THROW(triplet_loss_value({}, b, cfg), DomainError);
  EXPECT_THROW(triplet_loss_value({{0, 1, 7}}, b, cfg), DomainError);
}

TEST(TripletLoss, ZeroIffAllTripletsSatisfied) {
  auto b = random_unit_batch(8, 6, {0, 0, 0, 0, 1, 1, 1, 1}, 7);
  LossConfig cfg;
  std::vector<IndexTriplet> tr = {{0, 1, 4}, {1, 2, 5}, {2, 3, 6}};
  const double loss = triplet_loss_value(tr, b, cfg);
  bool all_satisfied = true;
  for (const auto& t : tr)
    all_satisfied = all_satisfied &&
                    sqdist(b.embeddings, t.anchor, t.positive) + cfg.alpha_triplet <=
                        sqdist(b.embeddings, t.anchor, t.negative);
  EXPECT_EQ(loss == 0.0, all_satisfied);
}

TEST(MeanDistanceLoss, IdenticalMeansTrivialValue) {
  // two classes with identical means: per-class term beta, P = 2, L = beta/2
  EmbeddingBatch b;
  b.embeddings = Tensor::from({4, 2}, {1, 0, -1, 0, 0, 1, 0, -1});
  b.labels = {0, 0, 1, 1};  // both class means are the origin
  LossConfig cfg;
  cfg.beta_mean = 0.5;
  EXPECT_NEAR(mean_distance_loss_value(b, cfg), 0.25, 1e-15);
}

TEST(MeanDistanceLoss, SatisfiedConstraintGivesZero) {
  EmbeddingBatch b;
  b.embeddings = Tensor::from({2, 2}, {1, 0, 0, 1});  // squared distance 2
  b.labels = {0, 1};
  LossConfig cfg;
  cfg.beta_mean = 0.5;
  EXPECT_DOUBLE_EQ(mean_distance_loss_value(b, cfg), 0.0);
}

TEST(MeanDistanceLoss, MatchesBruteForceOracle) {
  for (std::uint64_t seed = 10; seed < 20; ++seed) {
    auto b = random_unit_batch(9, 6, {0, 0, 0, 1, 1, 1, 2, 2, 2}, seed);
    LossConfig cfg;
    cfg.beta_mean = 1.2;  // tight enough to create violations on random data
    EXPECT_NEAR(mean_distance_loss_value(b, cfg), mean_oracle(b, cfg.beta_mean), 1e-12);
  }
}

TEST(MeanDistanceLoss, SingleClassRejected) {
  auto b = random_unit_batch(3, 4, {0, 0, 0}, 11);
  LossConfig cfg;
  EXPECT_THROW(mean_distance_loss_value(b, cfg), DomainError);
}

TEST(MeanDistanceLoss, GradientFiniteDifference) {
  auto b = random_unit_batch(9, 5, {0, 0, 0, 1, 1, 1, 2, 2, 2}, 12);
  LossConfig cfg;
  cfg.beta_mean = 1.2;
  auto f = tape_fn([&](Tape& t, const std::vector<Var>& p) {
    return mean_distance_loss(t, p[0], b.labels, cfg);
  });
  EXPECT_LT(ad::finite_difference_check(f, {b.embeddings}, 1e-5), 1e-6);
}

TEST(StdDevLoss, ZeroSpreadClassGivesGamma) {
  EmbeddingBatch b;
  b.embeddings = Tensor::from({2, 2}, {1, 0, 1, 0});
  b.labels = {0, 0};
  LossConfig cfg;
  cfg.gamma_std = 0.1;
  EXPECT_DOUBLE_EQ(std_dev_loss_value(b, cfg), 0.1);
}

TEST(StdDevLoss, WideClassContributesNothing) {
  EmbeddingBatch b;
  b.embeddings = Tensor::from({2, 2}, {1, 0, -1, 0});  // sigma = 1
  b.labels = {0, 0};
  LossConfig cfg;
  cfg.gamma_std = 0.2;
  EXPECT_DOUBLE_EQ(std_dev_loss_value(b, cfg), 0.0);
}

TEST(StdDevLoss, MatchesDirectOracle) {
  for (std::uint64_t seed = 30; seed < 40; ++seed) {
    auto b = random_unit_batch(8, 6, {0, 0, 0, 0, 1, 1, 1, 1}, seed);
    LossConfig cfg;
    cfg.gamma_std = 0.9;  // random unit vectors have sigma well below 1
    EXPECT_NEAR(std_dev_loss_value(b, cfg), std_oracle(b, cfg.gamma_std), 1e-12);
  }
}

TEST(StdDevLoss, AutodiffMatchesAnalyticGradient) {
  for (std::uint64_t seed = 40; seed < 50; ++seed) {
    auto b = random_unit_batch(10, 8, {0, 0, 0, 0, 0, 1, 1, 1, 1, 1}, seed);
    LossConfig cfg;
    cfg.gamma_std = 0.9;
    Tensor autodiff_grad;
    std_dev_loss_value(b, cfg, &autodiff_grad);
    Tensor analytic = std_dev_loss_grad_analytic(b, cfg);
    ASSERT_EQ(autodiff_grad.shape, analytic.shape);
    for (std::size_t i = 0; i < analytic.numel(); ++i)
      EXPECT_NEAR(autodiff_grad.data[i], analytic.data[i], 1e-8);
  }
}

TEST(StdDevLoss, GradientFiniteDifference) {
  // 3-class batch away from the sigma == gamma kink
  auto b = random_unit_batch(9, 6, {0, 0, 0, 1, 1, 1, 2, 2, 2}, 51);
  LossConfig cfg;
  cfg.gamma_std = 0.9;
  auto f = tape_fn([&](Tape& t, const std::vector<Var>& p) {
    return std_dev_loss(t, p[0], b.labels, cfg);
  });
  EXPECT_LT(ad::finite_difference_check(f, {b.embeddings}, 1e-5), 1e-6);
}

TEST(StdDevAnalytic, NoViolationsGivesZero) {
  EmbeddingBatch b;
  b.embeddings = Tensor::from({2, 2}, {1, 0, -1, 0});
  b.labels = {0, 0};
  LossConfig cfg;
  cfg.gamma_std = 0.2;
  Tensor g = std_dev_loss_grad_analytic(b, cfg);
  for (double v : g.data) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(StdDevAnalytic, SymmetricSamplesGetOppositeGradients) {
  EmbeddingBatch b;
  const double c = std::sqrt(0.5);
  b.embeddings = Tensor::from({2, 2}, {c, c, c - 0.01, c + 0.01});
  // renormalize second row
  double norm = std::hypot(b.embeddings.data[2], b.embeddings.data[3]);
  b.embeddings.data[2] /= norm;
  b.embeddings.data[3] /= norm;
  b.labels = {0, 0};
  LossConfig cfg;
  cfg.gamma_std = 0.5;
  Tensor g = std_dev_loss_grad_analytic(b, cfg);
  EXPECT_NEAR(g.data[0], -g.data[2], 1e-12);
  EXPECT_NEAR(g.data[1], -g.data[3], 1e-12);
}

TEST(StdDevAnalytic, SingularGradientRejected) {
  EmbeddingBatch b;
  b.embeddings = Tensor::from({2, 2}, {1, 0, 1, 0});
  b.labels = {0, 0};
  LossConfig cfg;
  cfg.gamma_std = 0.1;
  EXPECT_THROW(std_dev_loss_grad_analytic(b, cfg), DomainError);
}

TEST(HaarNetLoss, ReducesToTripletLoss) {
  auto b = random_unit_batch(6, 5, {0, 0, 0, 1, 1, 1}, 60);
  std::vector<IndexTriplet> tr = {{0, 1, 3}, {4, 5, 2}};
  LossConfig cfg;
  cfg.delta2 = 0.0;
  cfg.delta3 = 0.0;
  EXPECT_DOUBLE_EQ(haarnet_loss_value(tr, b, cfg), triplet_loss_value(tr, b, cfg));
}

TEST(HaarNetLoss, ZeroWhenAllConstraintsSatisfied) {
  // two tight, well-separated clusters
  EmbeddingBatch b;
  b.embeddings = Tensor::from({4, 2}, {1, 0, 1, 0, 0, 1, 0, 1});
  b.labels = {0, 0, 1, 1};
  LossConfig cfg;
  cfg.alpha_triplet = 0.2;
  cfg.beta_mean = 0.5;   // squared mean distance is 2
  cfg.gamma_std = 0.0;   // sigma = 0 is not a violation of sigma > 0 under max(0, -sigma)
  std::vector<IndexTriplet> tr = {{0, 1, 2}, {2, 3, 0}};
  EXPECT_DOUBLE_EQ(haarnet_loss_value(tr, b, cfg), 0.0);
}

TEST(HaarNetLoss, WeightedSumOfIndependentTerms) {
  auto b = random_unit_batch(9, 6, {0, 0, 0, 1, 1, 1, 2, 2, 2}, 61);
  std::vector<IndexTriplet> tr = {{0, 1, 3}, {3, 4, 6}, {6, 7, 0}, {1, 2, 4}};
  LossConfig cfg;
  cfg.delta1 = 1.0;
  cfg.delta2 = 0.5;
  cfg.delta3 = 0.25;
  cfg.beta_mean = 1.2;
  cfg.gamma_std = 0.9;
  const double expect = cfg.delta1 * triplet_loss_value(tr, b, cfg) +
                        cfg.delta2 * mean_distance_loss_value(b, cfg) +
                        cfg.delta3 * std_dev_loss_value(b, cfg);
  EXPECT_NEAR(haarnet_loss_value(tr, b, cfg), expect, 1e-12);
}

TEST(HaarNetLoss, MonotoneInDeltaWeights) {
  auto b = random_unit_batch(9, 6, {0, 0, 0, 1, 1, 1, 2, 2, 2}, 62);
  std::vector<IndexTriplet> tr = {{0, 1, 3}, {3, 4, 6}};
  LossConfig cfg;
  cfg.beta_mean = 1.2;
  cfg.gamma_std = 0.9;
  const double base = haarnet_loss_value(tr, b, cfg);
  EXPECT_GE(base, 0.0);
  LossConfig more = cfg;
  more.delta2 = cfg.delta2 * 2.0;
  EXPECT_GE(haarnet_loss_value(tr, b, more), base);
  more = cfg;
  more.delta3 = cfg.delta3 * 2.0;
  EXPECT_GE(haarnet_loss_value(tr, b, more), base);
}

TEST(MdrTl, ForcesDeltaThreeToZero) {
  auto b = random_unit_batch(9, 6, {0, 0, 0, 1, 1, 1, 2, 2, 2}, 63);
  std::vector<IndexTriplet> tr = {{0, 1, 3}, {3, 4, 6}};
  LossConfig cfg;
  cfg.delta3 = 7.0;  // ignored by MDR-TL
  cfg.beta_mean = 1.2;
  cfg.gamma_std = 0.9;
  LossConfig no3 = cfg;
  no3.delta3 = 0.0;
  EXPECT_EQ(mdr_tl_value(tr, b, cfg), haarnet_loss_value(tr, b, no3));
}

TEST(MdrTl, SmallBetaDisablesRegularizer) {
  auto b = random_unit_batch(6, 4, {0, 0, 0, 1, 1, 1}, 64);
  std::vector<IndexTriplet> tr = {{0, 1, 3}};
  // oracle: smallest inter-mean squared distance over class pairs
  double mu0[4] = {}, mu1[4] = {};
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 4; ++k) {
      mu0[k] += b.embeddings.data[static_cast<std::size_t>(i * 4 + k)] / 3.0;
      mu1[k] += b.embeddings.data[static_cast<std::size_t>((i + 3) * 4 + k)] / 3.0;
    }
  double min_sq = 0.0;
  for (int k = 0; k < 4; ++k) min_sq += (mu0[k] - mu1[k]) * (mu0[k] - mu1[k]);
  LossConfig cfg;
  cfg.delta1 = 1.0;
  cfg.delta2 = 1.0;
  cfg.beta_mean = min_sq * 0.5;  // below the minimum: no violation possible
  EXPECT_DOUBLE_EQ(mdr_tl_value(tr, b, cfg),
                   cfg.delta1 * triplet_loss_value(tr, b, cfg));
}

TEST(CcmTripletLoss, ClosedFormValues) {
  EXPECT_NEAR(ccm_triplet_loss({{1, 0, 0}}).data[0], 0.0, 1e-12);
  EXPECT_NEAR(ccm_triplet_loss({{0, 1, 1}}).data[0], std::sqrt(3.0), 1e-12);
  EXPECT_NEAR(ccm_triplet_loss({{1, 0, 0}, {0, 1, 1}}).data[0], std::sqrt(3.0) / 2.0, 1e-12);
}

TEST(CcmTripletLoss, RangeInvariant) {
  std::mt19937_64 rng(65);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<ScoreTriple> scores;
    for (int i = 0; i < 5; ++i) scores.push_back({u(rng), u(rng), u(rng)});
    const double v = ccm_triplet_loss(scores).data[0];
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, std::sqrt(3.0) + 1e-12);
  }
}

TEST(CcmTripletLoss, Errors) {
  EXPECT_THROW(ccm_triplet_loss(std::vector<ScoreTriple>{}), DomainError);
  EXPECT_THROW(ccm_triplet_loss({{1.5, 0, 0}}), DomainError);
}

TEST(CcmTripletLoss, MatchesHandOracleAndGradient) {
  std::mt19937_64 rng(66);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  Tensor tp({6}), tn({6}), np({6});
  for (std::size_t i = 0; i < 6; ++i) {
    tp.data[i] = u(rng);
    tn.data[i] = u(rng);
    np.data[i] = u(rng);
  }
  double oracle = 0.0;
  for (std::size_t i = 0; i < 6; ++i)
    oracle += std::sqrt((1 - tp.data[i]) * (1 - tp.data[i]) + tn.data[i] * tn.data[i] +
                        np.data[i] * np.data[i]);
  oracle /= 6.0;
  Tape t;
  Var loss = ccm_triplet_loss(t, t.leaf(tp), t.leaf(tn), t.leaf(np));
  EXPECT_NEAR(t.value(loss).data[0], oracle, 1e-12);

  auto f = tape_fn([](Tape& tt, const std::vector<Var>& p) {
    return ccm_triplet_loss(tt, p[0], p[1], p[2]);
  });
  EXPECT_LT(ad::finite_difference_check(f, {tp, tn, np}, 1e-5), 1e-6);
}

TEST(TMaskMse, ZeroForPerfectReconstruction) {
  auto mask = data::make_tmask(8, 8, {}, 1.0, 0.25);
  Tensor x = random_tensor({8, 8}, 70);
  Tape t;
  Var loss = weighted_tmask_mse(t, t.leaf(x), t.leaf(x), mask);
  EXPECT_DOUBLE_EQ(t.value(loss).data[0], 0.0);
}

TEST(TMaskMse, ZeroBetaIgnoresOutsidePixels) {
  auto mask = data::make_tmask(8, 8, {}, 1.0, 0.0);
  Tensor x = random_tensor({8, 8}, 71);
  Tensor y = random_tensor({8, 8}, 72);
  Tape t1;
  const double before = t1.value(weighted_tmask_mse(t1, t1.leaf(y), t1.leaf(x), mask)).data[0];
  // find a pixel outside T and perturb it
  Tensor y2 = y;
  bool found = false;
  for (std::size_t r = 0; r < 8 && !found; ++r)
    for (std::size_t c = 0; c < 8 && !found; ++c)
      if (!mask.in_t(r, c)) {
        y2.data[r * 8 + c] += 10.0;
        found = true;
      }
  ASSERT_TRUE(found);
  Tape t2;
  const double after = t2.value(weighted_tmask_mse(t2, t2.leaf(y2), t2.leaf(x), mask)).data[0];
  EXPECT_DOUBLE_EQ(before, after);
}

TEST(TMaskMse, MatchesDoubleLoopOracleAndGradient) {
  auto mask = data::make_tmask(8, 8, {}, 1.0, 0.25);
  Tensor x = random_tensor({8, 8}, 73);
  Tensor y = random_tensor({8, 8}, 74);
  double oracle = 0.0;
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 8; ++c) {
      const double tau = mask.in_t(r, c) ? 1.0 : 0.25;
      const double diff = x.data[r * 8 + c] - y.data[r * 8 + c];
      oracle += tau * diff * diff;
    }
  Tape t;
  Tensor yg = y;
  yg.requires_grad = true;
  Var recon = t.leaf(yg);
  Var loss = weighted_tmask_mse(t, recon, t.leaf(x), mask);
  EXPECT_NEAR(t.value(loss).data[0], oracle, 1e-12);
  t.backward(loss);
  // gradient w.r.t. reconstruction is 2 * tau * (recon - target)
  for (std::size_t i = 0; i < 64; ++i)
    EXPECT_NEAR(t.grad(recon)[i], 2.0 * mask.grid.data[i] * (y.data[i] - x.data[i]), 1e-12);
}

TEST(TMaskMse, EqualWeightsReduceToScaledSse) {
  auto mask = data::make_tmask(6, 6, {}, 0.7, 0.7);
  Tensor x = random_tensor({6, 6}, 75);
  Tensor y = random_tensor({6, 6}, 76);
  double sse = 0.0;
  for (std::size_t i = 0; i < 36; ++i) sse += (x.data[i] - y.data[i]) * (x.data[i] - y.data[i]);
  Tape t;
  Var loss = weighted_tmask_mse(t, t.leaf(y), t.leaf(x), mask);
  EXPECT_NEAR(t.value(loss).data[0], 0.7 * sse, 1e-12);
}

TEST(TMaskMse, ShapeMismatchRejected) {
  auto mask = data::make_tmask(8, 8, {}, 1.0, 0.25);
  Tape t;
  EXPECT_THROW(
      weighted_tmask_mse(t, t.leaf(Tensor({8, 8})), t.leaf(Tensor({8, 7})), mask),
      ShapeError);
  EXPECT_THROW(
      weighted_tmask_mse(t, t.leaf(Tensor({7, 7})), t.leaf(Tensor({7, 7})), mask),
      ShapeError);
}

TEST(SoftmaxCrossEntropy, UniformLogitsGiveLogTwo) {
  Tape t;
  Var loss = softmax_cross_entropy(t, t.leaf(Tensor({3, 2})), {0, 1, 0});
  EXPECT_NEAR(t.value(loss).data[0], std::log(2.0), 1e-12);
}

TEST(SoftmaxCrossEntropy, MonotoneInCorrectLogit) {
  double prev = 1e300;
  for (double logit = 0.0; logit < 3.0; logit += 0.5) {
    Tape t;
    Tensor l({1, 2});
    l.data = {logit, 0.0};
    Var loss = softmax_cross_entropy(t, t.leaf(l), {0});
    EXPECT_LT(t.value(loss).data[0], prev);
    prev = t.value(loss).data[0];
  }
}

TEST(SoftmaxCrossEntropy, MatchesDirectOracle) {
  Tensor logits = random_tensor({4, 3}, 77, -2.0, 2.0);
  std::vector<int> labels = {2, 0, 1, 1};
  double oracle = 0.0;
  for (std::size_t r = 0; r < 4; ++r) {
    double z = 0.0;
    for (std::size_t c = 0; c < 3; ++c) z += std::exp(logits.data[r * 3 + c]);
    oracle -= std::log(std::exp(logits.data[r * 3 + static_cast<std::size_t>(labels[r])]) / z);
  }
  oracle /= 4.0;
  Tape t;
  Var loss = softmax_cross_entropy(t, t.leaf(logits), labels);
  EXPECT_NEAR(t.value(loss).data[0], oracle, 1e-12);

  auto f = tape_fn([&](Tape& tt, const std::vector<Var>& p) {
    return softmax_cross_entropy(tt, p[0], labels);
  });
  EXPECT_LT(ad::finite_difference_check(f, {logits}, 1e-5), 1e-6);
}

TEST(SoftmaxCrossEntropy, LabelOutOfRange) {
  Tape t;
  EXPECT_THROW(softmax_cross_entropy(t, t.leaf(Tensor({2, 3})), {0, 3}), DomainError);
}

// Applying a common orthogonal rotation to all embeddings leaves the
// distance-based losses unchanged.
TEST(LossProperties, OrthogonalRotationInvariance) {
  const std::size_t d = 5;
  auto b = random_unit_batch(9, d, {0, 0, 0, 1, 1, 1, 2, 2, 2}, 80);
  // Gram-Schmidt on a random matrix -> orthogonal Q
  Tensor q = random_tensor({d, d}, 81);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      double dot = 0.0;
      for (std::size_t k = 0; k < d; ++k) dot += q.data[i * d + k] * q.data[j * d + k];
      for (std::size_t k = 0; k < d; ++k) q.data[i * d + k] -= dot * q.data[j * d + k];
    }
    double norm = 0.0;
    for (std::size_t k = 0; k < d; ++k) norm += q.data[i * d + k] * q.data[i * d + k];
    norm = std::sqrt(norm);
    for (std::size_t k = 0; k < d; ++k) q.data[i * d + k] /= norm;
  }
  EmbeddingBatch rotated = b;
  for (std::size_t r = 0; r < b.size(); ++r)
    for (std::size_t i = 0; i < d; ++i) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += q.data[i * d + k] * b.embeddings.data[r * d + k];
      rotated.embeddings.data[r * d + i] = s;
    }
  std::vector<IndexTriplet> tr = {{0, 1, 3}, {3, 4, 6}, {6, 7, 1}};
  LossConfig cfg;
  cfg.beta_mean = 1.2;
  cfg.gamma_std = 0.9;
  EXPECT_NEAR(triplet_loss_value(tr, b, cfg), triplet_loss_value(tr, rotated, cfg), 1e-9);
  EXPECT_NEAR(mean_distance_loss_value(b, cfg), mean_distance_loss_value(rotated, cfg), 1e-9);
  EXPECT_NEAR(std_dev_loss_value(b, cfg), std_dev_loss_value(rotated, cfg), 1e-9);
}
