#pragma once

// Heteroscedasticity block: variance-effect indicators t, log-linear slopes
// delta, their probit augmentation u and the coefficients alpha.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "bmc/curve_noise.hpp"
#include "bmc/data_model.hpp"
#include "bmc/mean_activity.hpp"
#include "bmc/spline_basis.hpp"
#include "bmc/stochastic.hpp"

namespace bmc {

struct AlphaPrior {
  Eigen::Vector2d mean = Eigen::Vector2d::Zero();
  Eigen::Matrix2d cov = Eigen::Matrix2d::Identity();
};

struct VarActivityState {
  Eigen::Vector2d alpha = Eigen::Vector2d::Zero();
  Eigen::MatrixXd u;        // m x J
  IndicatorMatrix t;        // m x J
  Eigen::MatrixXd delta;    // m x J, zero wherever t == 0
  double v_delta = 1.0;
};

/// alpha | U ~ N(V* mu*, V*), V* = (V^{-1} + W'W)^{-1}, mu* = V^{-1} mu + W' vec(U), W = [1 | vec(M)].
inline CanonicalGaussian alpha_conditional(const Eigen::MatrixXd& u, const Eigen::MatrixXd& factor_prod,
                                           const CellMask& latent, const AlphaPrior& prior) {
  const Eigen::Matrix2d prior_prec = prior.cov.inverse();
  Eigen::Matrix2d prec = prior_prec;
  Eigen::Vector2d b = prior_prec * prior.mean;
  const auto J = factor_prod.cols();
  for (Eigen::Index i = 0; i < factor_prod.rows(); ++i)
    for (Eigen::Index j = 0; j < J; ++j) {
      if (!latent[static_cast<std::size_t>(i * J + j)]) continue;
      const double mij = factor_prod(i, j);
      prec(0, 0) += 1.0;
      prec(0, 1) += mij;
      prec(1, 1) += mij * mij;
      b(0) += u(i, j);
      b(1) += mij * u(i, j);
    }
  prec(1, 0) = prec(0, 1);
  return {Eigen::MatrixXd(prec), Eigen::VectorXd(b)};
}

inline void update_alpha(VarActivityState& s, const Eigen::MatrixXd& factor_prod, const CellMask& latent,
                         const AlphaPrior& prior, RngStream& rng) {
  s.alpha = sample_canonical(alpha_conditional(s.u, factor_prod, latent, prior), rng);
}

inline Eigen::MatrixXd variance_linear_predictor(const Eigen::Vector2d& alpha, const Eigen::MatrixXd& factor_prod) {
  return (alpha(0) + alpha(1) * factor_prod.array()).matrix();
}

/// u_ij ~ TN(alpha0 + alpha1 lambda_i' eta_j, 1) on the side given by t_ij.
inline void update_u(VarActivityState& s, const Eigen::MatrixXd& factor_prod, RngStream& rng) {
  draw_augmentation(s.u, variance_linear_predictor(s.alpha, factor_prod), s.t, rng);
}

/// Divide responses and basis rows by exp(x delta / 2).
struct ReweightedCell {
  Eigen::VectorXd y;
  Eigen::MatrixXd x;
};

inline ReweightedCell reweight_cell(const CellData& cell, const BasisMatrix& basis, double delta) {
  ReweightedCell out;
  const auto K = static_cast<Eigen::Index>(cell.size());
  out.y.resize(K);
  out.x = basis.values;
  for (Eigen::Index k = 0; k < K; ++k) {
    const double f = std::exp(cell.observations[k].log10_dose * delta / 2.0);
    out.y(k) = cell.observations[k].response / f;
    out.x.row(k) /= f;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Joint Metropolis move for (t, delta)

struct TDeltaProposal {
  double df = 4.0;
  double scale = 0.2;
  double flip_fraction = 0.1;
  /// Include the proposal density for moves that switch delta between the
  /// spike and the slab, making the kernel reversible.
  bool dimension_correction = true;
};

/// What the Metropolis ratio for one cell needs besides (t, delta).
struct TDeltaCellContext {
  const CellDesign* design = nullptr;
  Eigen::VectorXd level_rss;  // unweighted sum over level of (y - gamma x'beta)^2
  double sigma2 = 1.0;
  double log_prob_t1 = 0.0;   // log Pr(t = 1) under the prior
  double log_prob_t0 = 0.0;
  double v_delta = 1.0;
};

inline Eigen::VectorXd level_residual_ss(const CellDesign& d, const Eigen::VectorXd* beta) {
  Eigen::VectorXd rss = d.sum_y2;
  if (beta == nullptr) return rss;
  const Eigen::VectorXd f = d.level_basis * *beta;
  for (int l = 0; l < d.levels(); ++l)
    rss(l) = std::max(0.0, d.sum_y2(l) - 2.0 * f(l) * d.sum_y(l) + d.count(l) * f(l) * f(l));
  return rss;
}

/// Gaussian log likelihood of the residuals under slope delta, up to a delta-free constant.
inline double heteroscedastic_log_lik(const TDeltaCellContext& c, double delta) {
  const CellDesign& d = *c.design;
  double ll = 0.0;
  for (int l = 0; l < d.levels(); ++l) {
    const double x = d.level_dose(l);
    ll += -0.5 * d.count(l) * x * delta - 0.5 * std::exp(-x * delta) * c.level_rss(l) / c.sigma2;
  }
  return ll;
}

inline double spike_slab_log_prior(const TDeltaCellContext& c, int t, double delta) {
  return t == 1 ? c.log_prob_t1 + log_normal_pdf(delta, 0.0, c.v_delta) : c.log_prob_t0;
}

/// log r for moving (t_c, delta_c) -> (t_p, delta_p).
inline double t_delta_log_ratio(const TDeltaCellContext& c, int t_cur, double delta_cur, int t_prop,
                                double delta_prop, const TDeltaProposal& prop) {
  double lr = heteroscedastic_log_lik(c, delta_prop) - heteroscedastic_log_lik(c, delta_cur) +
              spike_slab_log_prior(c, t_prop, delta_prop) - spike_slab_log_prior(c, t_cur, delta_cur);
  if (prop.dimension_correction) {
    if (t_cur == 0 && t_prop == 1) lr -= log_student_t_pdf(delta_prop, prop.df, 0.0, prop.scale);
    if (t_cur == 1 && t_prop == 0) lr += log_student_t_pdf(delta_cur, prop.df, 0.0, prop.scale);
  }
  return lr;
}

struct AcceptanceCount {
  long proposed = 0;
  long accepted = 0;

  double rate() const { return proposed == 0 ? 0.0 : static_cast<double>(accepted) / static_cast<double>(proposed); }
  AcceptanceCount& operator+=(const AcceptanceCount& o) {
    proposed += o.proposed;
    accepted += o.accepted;
    return *this;
  }
};

/// One Metropolis step on (t_ij, delta_ij) for one cell, given whether the
/// cell was picked for a flip. Returns whether the move was accepted; the
/// identity proposal (t stays 0) counts as neither proposed nor accepted.
inline bool t_delta_cell_step(const TDeltaCellContext& c, int& t, double& delta, bool flip,
                              const TDeltaProposal& prop, RngStream& rng, AcceptanceCount& count) {
  const int t_prop = flip ? 1 - t : t;
  if (t_prop == 0 && t == 0) return false;
  double delta_prop = 0.0;
  if (t_prop == 1) {
    const double center = t == 1 ? delta : 0.0;
    delta_prop = center + prop.scale * rng.student_t(prop.df);
  }
  ++count.proposed;
  const double lr = t_delta_log_ratio(c, t, delta, t_prop, delta_prop, prop);
  if (std::log(rng.uniform()) < lr) {
    t = t_prop;
    delta = delta_prop;
    ++count.accepted;
    return true;
  }
  return false;
}

/// Pick how many and which observed cells of an endpoint to flip.
inline std::vector<char> choose_flips(const std::vector<int>& eligible, double flip_fraction, RngStream& rng) {
  std::vector<char> flip(eligible.size(), 0);
  if (eligible.empty()) return flip;
  const int max_flips = std::max(1, static_cast<int>(std::ceil(flip_fraction * static_cast<double>(eligible.size()))));
  const int n_flip = rng.uniform_int(1, std::min<int>(max_flips, static_cast<int>(eligible.size())));
  std::vector<int> order(eligible.size());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = static_cast<int>(k);
  for (int k = 0; k < n_flip; ++k) {
    const int pick = rng.uniform_int(k, static_cast<int>(order.size()) - 1);
    std::swap(order[k], order[pick]);
    flip[order[k]] = 1;
  }
  return flip;
}

// ---------------------------------------------------------------------------
// Slab variance

struct VDeltaEstimate {
  double value = 1.0;
  double proxy_range = 0.0;
  int proxy_count = 0;
  bool fallback = false;  // no cell had two replicated doses
};

/// Slab variance: (range of per-cell slope proxies)^2 / 4, floored at the
/// sample variance of all responses. A proxy is the OLS slope of
/// 2 log(sample SD at dose) on dose within a cell.
inline VDeltaEstimate compute_v_delta(const Dataset& data) {
  double sum = 0.0, sum2 = 0.0, n = 0.0;
  for (const auto& c : data.cells())
    for (const auto& o : c.observations) {
      sum += o.response;
      sum2 += o.response * o.response;
      n += 1.0;
    }
  const double var = n > 1.0 ? (sum2 - sum * sum / n) / (n - 1.0) : 1.0;

  std::vector<double> proxies;
  for (const auto& c : data.cells()) {
    if (c.size() < 4) continue;
    std::vector<Observation> obs = c.observations;
    std::sort(obs.begin(), obs.end(), [](const Observation& a, const Observation& b) { return a.log10_dose < b.log10_dose; });
    std::vector<double> xs, ys;
    for (std::size_t a = 0; a < obs.size();) {
      std::size_t b = a;
      double s = 0.0, s2 = 0.0;
      while (b < obs.size() && obs[b].log10_dose == obs[a].log10_dose) {
        s += obs[b].response;
        s2 += obs[b].response * obs[b].response;
        ++b;
      }
      const double k = static_cast<double>(b - a);
      if (k >= 2.0) {
        const double v = (s2 - s * s / k) / (k - 1.0);
        if (v > 0.0) {
          xs.push_back(obs[a].log10_dose);
          ys.push_back(std::log(v));  // 2 log SD
        }
      }
      a = b;
    }
    if (xs.size() < 2) continue;
    const double xm = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
    const double ym = std::accumulate(ys.begin(), ys.end(), 0.0) / static_cast<double>(ys.size());
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t k = 0; k < xs.size(); ++k) {
      sxy += (xs[k] - xm) * (ys[k] - ym);
      sxx += (xs[k] - xm) * (xs[k] - xm);
    }
    if (sxx > 0.0) proxies.push_back(sxy / sxx);
  }

  VDeltaEstimate est;
  est.proxy_count = static_cast<int>(proxies.size());
  if (proxies.empty()) {
    est.fallback = true;
    est.value = var;
    return est;
  }
  const auto [lo, hi] = std::minmax_element(proxies.begin(), proxies.end());
  est.proxy_range = *hi - *lo;
  est.value = std::max(est.proxy_range * est.proxy_range / 4.0, var);
  return est;
}

}  // namespace bmc
