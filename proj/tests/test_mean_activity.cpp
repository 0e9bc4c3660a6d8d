#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "bmc/mean_activity.hpp"
#include "support/oracles.hpp"

using namespace bmc;

namespace {

MeanActivityState random_state(int m, int J, int q, RngStream& rng) {
  MeanActivityState s;
  s.lambda = Eigen::MatrixXd(m, q);
  s.eta = Eigen::MatrixXd(J, q);
  for (int i = 0; i < m; ++i)
    for (int l = 0; l < q; ++l) s.lambda(i, l) = rng.normal();
  for (int j = 0; j < J; ++j)
    for (int l = 0; l < q; ++l) s.eta(j, l) = rng.normal();
  s.xi = 0.2;
  s.z = Eigen::MatrixXd::Zero(m, J);
  s.gamma = IndicatorMatrix::Zero(m, J);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < J; ++j) s.gamma(i, j) = rng.bernoulli(0.5) ? 1 : 0;
  s.phi = Eigen::MatrixXd::Ones(m, q);
  s.zeta = Eigen::VectorXd::Constant(q, 1.5);
  s.tau = Eigen::VectorXd::Zero(q);
  s.recompute_tau();
  update_z(s, rng);
  return s;
}

}  // namespace

TEST(ActivityProbability, Values) {
  MeanActivityState s;
  s.lambda = Eigen::MatrixXd::Zero(1, 1);
  s.eta = Eigen::MatrixXd::Zero(1, 1);
  s.xi = 0.0;
  EXPECT_DOUBLE_EQ(activity_probability(s)(0, 0), 0.5);
  s.xi = 1.147;
  EXPECT_NEAR(activity_probability(s)(0, 0), 0.874, 5e-4);
  s.xi = 0.0;
  s.lambda(0, 0) = 1.0;
  double prev = 0.0;
  for (double e = -3.0; e <= 3.0; e += 0.5) {
    s.eta(0, 0) = e;
    const double p = activity_probability(s)(0, 0);
    EXPECT_GT(p, prev);
    prev = p;
  }
}

TEST(UpdateZ, TruncatedMeanAndSign) {
  RngStream rng(1, 0);
  MeanActivityState s;
  s.lambda = Eigen::MatrixXd::Zero(1, 1);
  s.eta = Eigen::MatrixXd::Zero(1, 1);
  s.z = Eigen::MatrixXd::Zero(1, 1);
  s.gamma = IndicatorMatrix::Ones(1, 1);
  double sum = 0.0;
  const int n = 200000;
  for (int k = 0; k < n; ++k) {
    update_z(s, rng);
    ASSERT_GT(s.z(0, 0), 0.0);
    sum += s.z(0, 0);
  }
  EXPECT_NEAR(sum / n, std::sqrt(2.0 / std::numbers::pi), 0.005);

  s.gamma(0, 0) = 0;
  s.xi = -5.0;
  sum = 0.0;
  for (int k = 0; k < n; ++k) {
    update_z(s, rng);
    ASSERT_LT(s.z(0, 0), 0.0);
    sum += s.z(0, 0);
  }
  EXPECT_NEAR(sum / n, -5.0, 0.01);
}

TEST(UpdateZ, SignConsistencyEverywhere) {
  RngStream rng(2, 0);
  MeanActivityState s = random_state(6, 9, 3, rng);
  update_z(s, rng);
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 9; ++j) EXPECT_EQ(s.z(i, j) > 0.0, s.gamma(i, j) == 1);
}

TEST(CollapsedGamma, OracleMarginalization) { EXPECT_LT(oracle::collapsed_gamma_error(), 1e-6); }

TEST(CollapsedGamma, MissingCellsUsePriorAndZeroPrior) {
  RngStream rng(3, 0);
  IndicatorMatrix g = IndicatorMatrix::Zero(1, 2);
  Eigen::MatrixXd prob(1, 2);
  prob << 0.3, 0.0;
  Eigen::MatrixXd bf(1, 2);
  bf << std::numeric_limits<double>::quiet_NaN(), 50.0;
  int ones = 0;
  const int n = 100000;
  for (int k = 0; k < n; ++k) {
    update_gamma_given_bf(g, prob, bf, rng);
    ones += g(0, 0);
    ASSERT_EQ(g(0, 1), 0);
  }
  EXPECT_NEAR(static_cast<double>(ones) / n, 0.3, 0.005);
  EXPECT_DOUBLE_EQ(activation_probability(0.3, std::numeric_limits<double>::quiet_NaN()), 0.3);
}

TEST(CollapsedGamma, LogDomainIsStable) {
  EXPECT_DOUBLE_EQ(activation_probability(0.5, 5000.0), 1.0);
  EXPECT_DOUBLE_EQ(activation_probability(0.5, -5000.0), 0.0);
}

TEST(Lambda, NoDataLimitIsPrior) {
  RngStream rng(4, 0);
  MeanActivityState s = random_state(1, 3, 2, rng);
  s.eta.setZero();
  s.phi << 2.0, 0.5;
  s.tau = Eigen::Vector2d(1.0, 3.0);
  const CanonicalGaussian g = lambda_conditional(s, Eigen::Vector2d(0.3, 0.0), Eigen::MatrixXd::Zero(1, 3), CellMask(3, 1), 0);
  EXPECT_LT(g.mean().cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_NEAR(g.covariance()(0, 0), 0.5, 1e-15);
  EXPECT_NEAR(g.covariance()(1, 1), 1.0 / 1.5, 1e-15);
}

TEST(Lambda, CovarianceIsPositiveDefinite) {
  RngStream rng(5, 0);
  for (int rep = 0; rep < 20; ++rep) {
    MeanActivityState s = random_state(4, 7, 3, rng);
    Eigen::MatrixXd u = Eigen::MatrixXd::Random(4, 7);
    CellMask latent(28, 1);
    for (int k = 0; k < 28; k += 3) latent[k] = 0;
    for (int i = 0; i < 4; ++i) {
      const CanonicalGaussian g = lambda_conditional(s, Eigen::Vector2d(0.1, -0.8), u, latent, i);
      const Eigen::MatrixXd cov = g.covariance();
      EXPECT_LT((cov - cov.transpose()).cwiseAbs().maxCoeff(), 1e-12);
      EXPECT_EQ(Eigen::LLT<Eigen::MatrixXd>(cov).info(), Eigen::Success);
    }
  }
}

TEST(Eta, PriorLimitAndAlphaOneZeroIgnoresU) {
  RngStream rng(6, 0);
  MeanActivityState s = random_state(3, 2, 2, rng);
  Eigen::MatrixXd u = Eigen::MatrixXd::Random(3, 2);
  const CanonicalGaussian g1 = eta_conditional(s, Eigen::Vector2d(0.4, 0.0), u, CellMask(6, 1), 1);
  const CanonicalGaussian g2 = eta_conditional(s, Eigen::Vector2d(-1.0, 0.0), Eigen::MatrixXd::Zero(3, 2), CellMask(6, 1), 1);
  EXPECT_LT((g1.mean() - g2.mean()).cwiseAbs().maxCoeff(), 1e-14);
  s.lambda.setZero();
  const CanonicalGaussian g0 = eta_conditional(s, Eigen::Vector2d(0.4, 0.7), u, CellMask(6, 1), 0);
  EXPECT_LT((g0.covariance() - Eigen::MatrixXd::Identity(2, 2)).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LT(g0.mean().cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Xi, ConditionalCases) {
  MeanActivityState s;
  s.lambda = Eigen::MatrixXd::Zero(1, 1);
  s.eta = Eigen::MatrixXd::Zero(1, 1);
  s.z = Eigen::MatrixXd::Constant(1, 1, 2.0);
  MeanActivityHyper h;
  const CanonicalGaussian g = xi_conditional(s, h, CellMask{1});
  EXPECT_DOUBLE_EQ(g.mean()(0), 1.0);
  EXPECT_DOUBLE_EQ(g.covariance()(0, 0), 0.5);
  h.mu_xi = 0.7;
  h.var_xi = 3.0;
  const CanonicalGaussian none = xi_conditional(s, h, CellMask{0});
  EXPECT_NEAR(none.mean()(0), 0.7, 1e-15);
  EXPECT_NEAR(none.covariance()(0, 0), 3.0, 1e-15);
}

TEST(ScalarConjugate, HandAlgebra) { EXPECT_LT(oracle::scalar_conjugate_error(), 1e-10); }

TEST(Mgp, ConditionalsMatchJointDensity) { EXPECT_LT(oracle::mgp_conditional_error(), 1e-10); }

TEST(Mgp, ZeroLoadingsGivePriorLikePhi) {
  RngStream rng(7, 0);
  MeanActivityState s = random_state(2, 2, 2, rng);
  s.lambda.setZero();
  MeanActivityHyper h;
  const GammaConditional g = mgp_phi_conditional(s, h, 1, 1);
  EXPECT_DOUBLE_EQ(g.shape, h.nu / 2.0 + 0.5);
  EXPECT_DOUBLE_EQ(g.rate, h.nu / 2.0);
}

TEST(Mgp, TauInvariantAfterUpdate) {
  RngStream rng(8, 0);
  MeanActivityState s = random_state(5, 4, 4, rng);
  MeanActivityHyper h;
  for (int rep = 0; rep < 50; ++rep) {
    update_mgp(s, h, rng);
    double prod = 1.0;
    for (int l = 0; l < 4; ++l) {
      prod *= s.zeta(l);
      EXPECT_NEAR(s.tau(l), prod, 1e-12 * prod);
      EXPECT_GT(s.zeta(l), 0.0);
    }
    EXPECT_GT(s.phi.minCoeff(), 0.0);
  }
}

TEST(FactorBlock, PriorOnlyChainReproducesPrior) {
  // No data and unit shrinkage: the (gamma, z, Lambda, eta, xi) updates target the
  // prior, under which z - xi has variance q + 1 and xi ~ N(mu_xi, var_xi).
  RngStream rng(9, 0);
  const int m = 3, J = 2, q = 2;
  MeanActivityHyper h;
  h.q = q;
  h.mu_xi = 0.4;
  h.var_xi = 2.0;
  MeanActivityState s = random_state(m, J, q, rng);
  s.phi.setOnes();
  s.zeta.setOnes();
  s.recompute_tau();
  const CellMask latent(m * J, 1);
  const Eigen::MatrixXd u = Eigen::MatrixXd::Zero(m, J);
  const Eigen::MatrixXd no_bf = Eigen::MatrixXd::Constant(m, J, std::numeric_limits<double>::quiet_NaN());
  double z2 = 0.0, xi1 = 0.0, xi2 = 0.0;
  const int n = 200000;
  for (int it = 0; it < n + 1000; ++it) {
    update_lambda(s, Eigen::Vector2d::Zero(), u, latent, rng);
    update_eta(s, Eigen::Vector2d::Zero(), u, latent, rng);
    update_xi(s, h, latent, rng);
    update_gamma_given_bf(s.gamma, activity_probability(s), no_bf, rng);
    update_z(s, rng);
    if (it < 1000) continue;
    z2 += (s.z(0, 0) - s.xi) * (s.z(0, 0) - s.xi) / n;
    xi1 += s.xi / n;
    xi2 += s.xi * s.xi / n;
  }
  EXPECT_NEAR(z2, q + 1.0, 0.15);
  EXPECT_NEAR(xi1, h.mu_xi, 0.1);
  EXPECT_NEAR(xi2 - xi1 * xi1, h.var_xi, 0.2);
}
