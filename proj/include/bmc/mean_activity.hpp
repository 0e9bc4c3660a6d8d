#pragma once

// Probit latent-factor model for the mean-effect indicators with a
// multiplicative gamma process prior on the loadings.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "bmc/curve_noise.hpp"
#include "bmc/data_model.hpp"
#include "bmc/stochastic.hpp"

namespace bmc {

using IndicatorMatrix = Eigen::MatrixXi;

struct MeanActivityHyper {
  int q = 5;
  double nu = 3.0;
  double a1 = 2.1;
  double a2 = 3.1;
  double mu_xi = 0.0;
  double var_xi = 1.0;
};

struct MeanActivityState {
  Eigen::MatrixXd lambda;     // m x q, rows are chemical loadings
  Eigen::MatrixXd eta;        // J x q, rows are endpoint factors
  double xi = 0.0;
  Eigen::MatrixXd z;          // m x J probit augmentation
  IndicatorMatrix gamma;      // m x J
  Eigen::MatrixXd phi;        // m x q local precisions
  Eigen::VectorXd zeta;       // q
  Eigen::VectorXd tau;        // q, cumulative products of zeta

  int m() const { return static_cast<int>(lambda.rows()); }
  int J() const { return static_cast<int>(eta.rows()); }
  int q() const { return static_cast<int>(lambda.cols()); }

  void recompute_tau() {
    double prod = 1.0;
    for (Eigen::Index l = 0; l < zeta.size(); ++l) {
      prod *= zeta(l);
      tau(l) = prod;
    }
  }
};

/// M = Lambda eta', entry (i, j) is lambda_i' eta_j.
inline Eigen::MatrixXd factor_products(const MeanActivityState& s) { return s.lambda * s.eta.transpose(); }

/// pi_ij = Phi(xi + lambda_i' eta_j).
inline Eigen::MatrixXd activity_probability(const MeanActivityState& s) {
  return (factor_products(s).array() + s.xi).unaryExpr([](double v) { return normal_cdf(v); });
}

/// Redraw an augmentation matrix so that sign(aug_ij) agrees with ind_ij.
inline void draw_augmentation(Eigen::MatrixXd& aug, const Eigen::MatrixXd& mean, const IndicatorMatrix& ind,
                              RngStream& rng) {
  for (Eigen::Index j = 0; j < aug.cols(); ++j)
    for (Eigen::Index i = 0; i < aug.rows(); ++i)
      aug(i, j) = ind(i, j) == 1 ? sample_truncated_normal(mean(i, j), 1.0, 0.0, kInf, rng)
                                 : sample_truncated_normal(mean(i, j), 1.0, -kInf, 0.0, rng);
}

/// z_ij ~ TN(xi + lambda_i' eta_j, 1) on the side given by gamma_ij, for every cell.
inline void update_z(MeanActivityState& s, RngStream& rng) {
  const Eigen::MatrixXd mean = factor_products(s).array() + s.xi;
  draw_augmentation(s.z, mean, s.gamma, rng);
}

/// Pr(gamma = 1 | rest) = r1 / (r1 + r0) with r1 = pi BF, r0 = 1 - pi, evaluated in logs.
/// `log_bf` is NaN for cells without observations, which then draw from the prior alone.
inline double activation_probability(double pi, double log_bf) {
  if (std::isnan(log_bf) || pi <= 0.0 || pi >= 1.0) return pi;
  const double log_odds = std::log(pi) - std::log1p(-pi) + log_bf;
  return 1.0 / (1.0 + std::exp(-log_odds));
}

inline void update_gamma_given_bf(IndicatorMatrix& gamma, const Eigen::MatrixXd& prob, const Eigen::MatrixXd& log_bf,
                                  RngStream& rng) {
  for (Eigen::Index j = 0; j < gamma.cols(); ++j) {
    for (Eigen::Index i = 0; i < gamma.rows(); ++i) {
      gamma(i, j) = rng.uniform() < activation_probability(prob(i, j), log_bf(i, j)) ? 1 : 0;
    }
  }
}

/// Collapsed log Bayes factor per observed cell (NaN for missing cells).
inline Eigen::MatrixXd activity_log_bayes_factors(const std::vector<std::optional<CellDesign>>& designs,
                                                  const std::vector<WeightedMoments>& moments,
                                                  const CurveState& curve, int m, int J) {
  Eigen::MatrixXd out = Eigen::MatrixXd::Constant(m, J, std::numeric_limits<double>::quiet_NaN());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < J; ++j) {
      const std::size_t k = static_cast<std::size_t>(i) * J + j;
      if (!designs[k]) continue;
      out(i, j) = log_activity_bayes_factor(moments[k], curve.precision[j], curve.log_det_precision[j],
                                            curve.noise_var(j));
    }
  return out;
}

/// Step for gamma with the spline coefficients integrated out.
inline void update_gamma_collapsed(MeanActivityState& s, const CurveState& curve,
                                   const std::vector<std::optional<CellDesign>>& designs,
                                   const std::vector<WeightedMoments>& moments, RngStream& rng) {
  const Eigen::MatrixXd bf = activity_log_bayes_factors(designs, moments, curve, s.m(), s.J());
  update_gamma_given_bf(s.gamma, activity_probability(s), bf, rng);
}

/// lambda_i | rest: precision D_i^{-1} + (1 + a1^2) eta' eta, linear term
/// eta' z~_i + a1 eta' u_i - a0 a1 eta' 1, over the cells of row i in `latent`.
inline CanonicalGaussian lambda_conditional(const MeanActivityState& s, const Eigen::Vector2d& alpha,
                                            const Eigen::MatrixXd& u, const CellMask& latent, int i) {
  const int q = s.q();
  const double a0 = alpha(0), a1 = alpha(1);
  const double w = 1.0 + a1 * a1;
  CanonicalGaussian g{Eigen::MatrixXd::Zero(q, q), Eigen::VectorXd::Zero(q)};
  for (int j = 0; j < s.J(); ++j) {
    if (!latent[static_cast<std::size_t>(i) * s.J() + j]) continue;
    const auto e = s.eta.row(j).transpose();
    g.precision.selfadjointView<Eigen::Lower>().rankUpdate(e, w);
    g.b += (s.z(i, j) - s.xi + a1 * (u(i, j) - a0)) * e;
  }
  g.precision = g.precision.selfadjointView<Eigen::Lower>();
  for (int l = 0; l < q; ++l) g.precision(l, l) += s.phi(i, l) * s.tau(l);
  return g;
}

/// eta_j | rest: precision I + (1 + a1^2) Lambda' Lambda, linear term
/// Lambda' z~_j + a1 Lambda' u_j - a0 a1 Lambda' 1, over the cells of column j in `latent`.
inline CanonicalGaussian eta_conditional(const MeanActivityState& s, const Eigen::Vector2d& alpha,
                                         const Eigen::MatrixXd& u, const CellMask& latent, int j) {
  const int q = s.q();
  const double a0 = alpha(0), a1 = alpha(1);
  const double w = 1.0 + a1 * a1;
  CanonicalGaussian g{Eigen::MatrixXd::Zero(q, q), Eigen::VectorXd::Zero(q)};
  for (int i = 0; i < s.m(); ++i) {
    if (!latent[static_cast<std::size_t>(i) * s.J() + j]) continue;
    const auto lam = s.lambda.row(i).transpose();
    g.precision.selfadjointView<Eigen::Lower>().rankUpdate(lam, w);
    g.b += (s.z(i, j) - s.xi + a1 * (u(i, j) - a0)) * lam;
  }
  g.precision = g.precision.selfadjointView<Eigen::Lower>();
  g.precision.diagonal().array() += 1.0;
  return g;
}

inline void update_lambda(MeanActivityState& s, const Eigen::Vector2d& alpha, const Eigen::MatrixXd& u,
                          const CellMask& latent, RngStream& rng) {
  for (int i = 0; i < s.m(); ++i)
    s.lambda.row(i) = sample_canonical(lambda_conditional(s, alpha, u, latent, i), rng).transpose();
}

inline void update_eta(MeanActivityState& s, const Eigen::Vector2d& alpha, const Eigen::MatrixXd& u,
                       const CellMask& latent, RngStream& rng) {
  for (int j = 0; j < s.J(); ++j)
    s.eta.row(j) = sample_canonical(eta_conditional(s, alpha, u, latent, j), rng).transpose();
}

/// xi | rest ~ N(V (mu/s2 + sum(z - lambda'eta)), V), V = (1/s2 + N)^{-1}, N = cells in `latent`.
inline CanonicalGaussian xi_conditional(const MeanActivityState& s, const MeanActivityHyper& hyper,
                                        const CellMask& latent) {
  const Eigen::MatrixXd mp = factor_products(s);
  double n = 0.0, sum = 0.0;
  for (int i = 0; i < s.m(); ++i)
    for (int j = 0; j < s.J(); ++j)
      if (latent[static_cast<std::size_t>(i) * s.J() + j]) {
        n += 1.0;
        sum += s.z(i, j) - mp(i, j);
      }
  CanonicalGaussian g{Eigen::MatrixXd::Constant(1, 1, 1.0 / hyper.var_xi + n),
                      Eigen::VectorXd::Constant(1, hyper.mu_xi / hyper.var_xi + sum)};
  return g;
}

inline void update_xi(MeanActivityState& s, const MeanActivityHyper& hyper, const CellMask& latent, RngStream& rng) {
  const CanonicalGaussian g = xi_conditional(s, hyper, latent);
  const double var = 1.0 / g.precision(0, 0);
  s.xi = var * g.b(0) + std::sqrt(var) * rng.normal();
}

/// phi_il | rest ~ Gamma((nu + 1)/2, (nu + tau_l lambda_il^2)/2).
inline GammaConditional mgp_phi_conditional(const MeanActivityState& s, const MeanActivityHyper& hyper, int i, int l) {
  const double lam = s.lambda(i, l);
  return {0.5 * (hyper.nu + 1.0), 0.5 * (hyper.nu + s.tau(l) * lam * lam)};
}

/// zeta_h | rest ~ Gamma(a + m(q - h)/2, 1 + 1/2 sum_{l >= h} tau_l^(h) sum_i phi_il lambda_il^2)
/// with h 0-based, a = a1 for the first column and a2 otherwise, and tau_l^(h) = tau_l / zeta_h.
inline GammaConditional mgp_zeta_conditional(const MeanActivityState& s, const MeanActivityHyper& hyper, int h) {
  const int m = s.m(), q = s.q();
  double rate = 1.0;
  for (int l = h; l < q; ++l)
    rate += 0.5 * (s.tau(l) / s.zeta(h)) * (s.phi.col(l).array() * s.lambda.col(l).array().square()).sum();
  return {(h == 0 ? hyper.a1 : hyper.a2) + 0.5 * m * (q - h), rate};
}

/// Conjugate updates of the local precisions phi and the column multipliers zeta;
/// tau is recomputed after each zeta_h so later columns see the fresh products.
inline void update_mgp(MeanActivityState& s, const MeanActivityHyper& hyper, RngStream& rng) {
  for (int i = 0; i < s.m(); ++i)
    for (int l = 0; l < s.q(); ++l) {
      const GammaConditional g = mgp_phi_conditional(s, hyper, i, l);
      s.phi(i, l) = rng.gamma(g.shape, g.rate);
    }
  for (int h = 0; h < s.q(); ++h) {
    const GammaConditional g = mgp_zeta_conditional(s, hyper, h);
    s.zeta(h) = rng.gamma(g.shape, g.rate);
    s.recompute_tau();
  }
}

}  // namespace bmc
