#pragma once

// Spline coefficients, endpoint covariances and endpoint noise variances.

#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "bmc/errors.hpp"
#include "bmc/spline_basis.hpp"
#include "bmc/stochastic.hpp"

namespace bmc {

struct CurveState {
  std::vector<Eigen::VectorXd> beta;       // per cell, row-major
  std::vector<Eigen::MatrixXd> sigma;      // Sigma_j
  std::vector<Eigen::MatrixXd> precision;  // Sigma_j^{-1}
  std::vector<double> log_det_precision;
  Eigen::VectorXd noise_var;               // sigma_j^2

  void set_precision(int j, Eigen::MatrixXd omega) {
    omega = 0.5 * (omega + omega.transpose());
    Eigen::LLT<Eigen::MatrixXd> llt(omega);
    if (llt.info() != Eigen::Success) throw decomposition_error("endpoint precision is not positive definite");
    log_det_precision[j] = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    sigma[j] = llt.solve(Eigen::MatrixXd::Identity(omega.rows(), omega.cols()));
    precision[j] = std::move(omega);
  }
};

struct CurveHyper {
  double a = 9.0;       // Wishart degrees of freedom, p + 2 by default
  Eigen::MatrixXd R;    // Wishart scale is R^{-1}
  double nu0 = 1.0;
  double sigma0_sq = 1.0;
};

/// Cross products of a cell's design after dividing rows by exp(x * delta / 2).
struct WeightedMoments {
  Eigen::MatrixXd xtx;
  Eigen::VectorXd xty;
  double yty = 0.0;
  double delta = 0.0;
};

inline WeightedMoments weighted_moments(const CellDesign& d, double delta) {
  WeightedMoments w;
  w.delta = delta;
  const int p = d.p();
  w.xtx = Eigen::MatrixXd::Zero(p, p);
  w.xty = Eigen::VectorXd::Zero(p);
  for (int l = 0; l < d.levels(); ++l) {
    const double wt = std::exp(-d.level_dose(l) * delta);
    const auto row = d.level_basis.row(l);
    w.xtx.selfadjointView<Eigen::Lower>().rankUpdate(row.transpose(), wt * d.count(l));
    w.xty += (wt * d.sum_y(l)) * row.transpose();
    w.yty += wt * d.sum_y2(l);
  }
  w.xtx = w.xtx.selfadjointView<Eigen::Lower>();
  return w;
}

/// Posterior precision and its Cholesky factor for a cell's coefficients.
struct CoefficientPosterior {
  Eigen::LLT<Eigen::MatrixXd> llt;
  Eigen::VectorXd b;  // X'y / sigma^2
};

inline CoefficientPosterior coefficient_posterior(const WeightedMoments& w, const Eigen::MatrixXd& precision,
                                                  double sigma2) {
  CoefficientPosterior post;
  post.llt.compute(precision + w.xtx / sigma2);
  if (post.llt.info() != Eigen::Success) throw decomposition_error("coefficient posterior precision is not positive definite");
  post.b = w.xty / sigma2;
  return post;
}

/// log of p(y | gamma = 1) / p(y | gamma = 0) with the spline coefficients integrated out:
///   -1/2 log|Sigma X'X / s2 + I| + 1/2 (X'y/s2)' (X'X/s2 + Sigma^{-1})^{-1} (X'y/s2).
inline double log_activity_bayes_factor(const WeightedMoments& w, const Eigen::MatrixXd& precision,
                                        double log_det_precision, double sigma2) {
  const CoefficientPosterior post = coefficient_posterior(w, precision, sigma2);
  const double log_det_post = 2.0 * post.llt.matrixLLT().diagonal().array().log().sum();
  const Eigen::VectorXd half = post.llt.matrixL().solve(post.b);
  return -0.5 * (log_det_post - log_det_precision) + 0.5 * half.squaredNorm();
}

/// beta ~ N((Sigma^{-1} + X'X/s2)^{-1} X'y/s2, (Sigma^{-1} + X'X/s2)^{-1}).
inline Eigen::VectorXd update_beta(const WeightedMoments& w, const Eigen::MatrixXd& precision, double sigma2,
                                   RngStream& rng) {
  const CoefficientPosterior post = coefficient_posterior(w, precision, sigma2);
  return sample_mvn_canonical(post.b, post.llt, rng);
}

/// Prior draw beta ~ N(0, Sigma_j).
inline Eigen::VectorXd sample_beta_prior(const Eigen::MatrixXd& precision, RngStream& rng) {
  return sample_mvn_precision(Eigen::VectorXd::Zero(precision.rows()), precision, rng);
}

/// Sigma_j^{-1} ~ Wishart(a + n, (R + sum beta beta')^{-1}) over the supplied coefficients.
inline Eigen::MatrixXd sample_endpoint_precision(std::span<const Eigen::VectorXd* const> betas,
                                                 const CurveHyper& hyper, RngStream& rng) {
  Eigen::MatrixXd s = hyper.R;
  for (const Eigen::VectorXd* b : betas) s.selfadjointView<Eigen::Lower>().rankUpdate(*b);
  s = s.selfadjointView<Eigen::Lower>();
  Eigen::LLT<Eigen::MatrixXd> llt(s);
  if (llt.info() != Eigen::Success) throw decomposition_error("Wishart posterior scale is not positive definite");
  const Eigen::MatrixXd scale = llt.solve(Eigen::MatrixXd::Identity(s.rows(), s.cols()));
  return sample_wishart(hyper.a + static_cast<double>(betas.size()), 0.5 * (scale + scale.transpose()), rng);
}

inline void update_sigma_endpoint(int j, CurveState& state, std::span<const Eigen::VectorXd* const> betas,
                                  const CurveHyper& hyper, RngStream& rng) {
  state.set_precision(j, sample_endpoint_precision(betas, hyper, rng));
}

/// Weighted residual sum of squares of y - gamma X beta.
inline double weighted_rss(const WeightedMoments& w, const Eigen::VectorXd* beta) {
  if (beta == nullptr) return w.yty;
  return std::max(0.0, w.yty - 2.0 * beta->dot(w.xty) + beta->dot(w.xtx * *beta));
}

/// Sufficient statistics for one endpoint's noise variance.
struct NoiseSuffStats {
  double n = 0.0;
  double rss = 0.0;
};

/// 1/sigma_j^2 | rest ~ Gamma((nu0 + n)/2, (nu0 sigma0^2 + rss)/2).
inline GammaConditional noise_precision_conditional(const NoiseSuffStats& s, const CurveHyper& hyper) {
  return {0.5 * (hyper.nu0 + s.n), 0.5 * (hyper.nu0 * hyper.sigma0_sq + s.rss)};
}

/// Draws 1/sigma_j^2 and returns sigma_j^2.
inline double update_noise_var(const NoiseSuffStats& s, const CurveHyper& hyper, RngStream& rng) {
  const GammaConditional g = noise_precision_conditional(s, hyper);
  return 1.0 / rng.gamma(g.shape, g.rate);
}

/// gamma-free curve values on a dose grid: centered basis times beta.
inline Eigen::VectorXd fitted_curve(const Eigen::VectorXd& beta, std::span<const double> grid, const CellDesign& d) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(grid.size()));
  for (std::size_t k = 0; k < grid.size(); ++k) out(static_cast<Eigen::Index>(k)) = d.row(grid[k]).dot(beta);
  return out;
}

inline constexpr int kKappaGridPoints = 101;

inline std::vector<double> dose_grid(const CellDesign& d, int points = kKappaGridPoints) {
  const double lo = d.level_dose.minCoeff();
  const double hi = d.level_dose.maxCoeff();
  std::vector<double> g(static_cast<std::size_t>(points));
  for (int k = 0; k < points; ++k)
    g[k] = points == 1 ? lo : lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(points - 1);
  return g;
}

/// kappa = gamma * 1(max of the fitted curve over the cell's dose span > cutoff).
inline int kappa_indicator(int gamma, const Eigen::VectorXd& beta, const CellDesign& d, double cutoff) {
  if (gamma == 0) return 0;
  const auto grid = dose_grid(d);
  return fitted_curve(beta, grid, d).maxCoeff() > cutoff ? 1 : 0;
}

}  // namespace bmc
