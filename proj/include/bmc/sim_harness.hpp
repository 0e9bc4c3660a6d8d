#pragma once

// Simulation generators with known truth, and the metrics used to score fits
// against them (AUC, RMSE, false positives, predictive coverage).

#include <algorithm>
#include <limits>
#include <optional>
#include <cmath>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

#include "bmc/data_model.hpp"
#include "bmc/errors.hpp"
#include "bmc/mean_activity.hpp"
#include "bmc/sampler.hpp"
#include "bmc/spline_basis.hpp"
#include "bmc/stochastic.hpp"
#include "bmc/summaries.hpp"

namespace bmc::sim {

inline const std::vector<double>& standard_doses() {
  static const std::vector<double> d{0.301, 0.477, 0.602, 0.845, 1.000, 1.301, 1.602, 2.000};
  return d;
}

enum class CurveKind { none, rise_fall, increasing, decreasing, zipll };

inline const char* to_string(CurveKind k) {
  switch (k) {
    case CurveKind::none: return "none";
    case CurveKind::rise_fall: return "rise_fall";
    case CurveKind::increasing: return "increasing";
    case CurveKind::decreasing: return "decreasing";
    case CurveKind::zipll: return "zipll";
  }
  return "none";
}

/// A true mean curve: an uncentered cubic spline on the standard-dose knots, or a ZIPLL curve.
struct TrueCurve {
  CurveKind kind = CurveKind::none;
  Eigen::VectorXd coef;               // spline kinds
  double top = 0.0, slope = 0.0, ac50 = 0.0;  // zipll: t, w, a (concentration scale)

  double operator()(double log10_dose) const {
    switch (kind) {
      case CurveKind::none: return 0.0;
      case CurveKind::zipll: {
        const double x = std::pow(10.0, log10_dose);
        return top - top / (1.0 + std::exp(slope * (std::log(x) - std::log(ac50))));
      }
      default: {
        static const KnotVector knots = knots_from_doses(standard_doses());
        return bspline_row(log10_dose, knots).dot(coef);
      }
    }
  }
};

struct SimulationTruth {
  int scenario = 0;
  IndicatorMatrix gamma, t;
  Eigen::MatrixXd delta;
  Eigen::MatrixXd lambda, eta;
  double xi = 0.0;
  Eigen::Vector2d alpha = Eigen::Vector2d::Zero();
  Eigen::VectorXd sigma2;              // per endpoint
  std::vector<TrueCurve> curves;       // row-major; kind none where gamma = 0
  nlohmann::json generator;            // hyperparameters and choices used

  int m() const { return static_cast<int>(gamma.rows()); }
  int J() const { return static_cast<int>(gamma.cols()); }
  double mean(int i, int j, double dose) const {
    return gamma(i, j) ? curves[static_cast<std::size_t>(i) * J() + j](dose) : 0.0;
  }
};

struct SimulatedData {
  Dataset data;       // every cell observed
  CellMask held_out;  // cells to hide from the fit
  SimulationTruth truth;

  Dataset training() const { return data.without_cells(held_out); }
};

// ---------------------------------------------------------------------------
// Generator pieces

struct FactorDraw {
  Eigen::MatrixXd lambda, eta;
};

/// Lambda from the multiplicative gamma process, eta standard normal.
inline FactorDraw draw_factors(int m, int J, int q, double nu, double a1, double a2, RngStream& rng) {
  FactorDraw f;
  Eigen::VectorXd tau(q);
  double prod = 1.0;
  for (int l = 0; l < q; ++l) {
    prod *= rng.gamma(l == 0 ? a1 : a2, 1.0);
    tau(l) = prod;
  }
  f.lambda.resize(m, q);
  for (int i = 0; i < m; ++i)
    for (int l = 0; l < q; ++l) f.lambda(i, l) = rng.normal() / std::sqrt(rng.gamma(nu / 2.0, nu / 2.0) * tau(l));
  f.eta.resize(J, q);
  for (int j = 0; j < J; ++j)
    for (int l = 0; l < q; ++l) f.eta(j, l) = rng.normal();
  return f;
}

/// Correlation matrix of Lambda Lambda' + I.
inline Eigen::MatrixXd factor_correlation(const Eigen::MatrixXd& lambda) {
  const auto m = lambda.rows();
  const Eigen::MatrixXd cov = lambda * lambda.transpose() + Eigen::MatrixXd::Identity(m, m);
  const Eigen::VectorXd inv_sd = cov.diagonal().array().rsqrt();
  return inv_sd.asDiagonal() * cov * inv_sd.asDiagonal();
}

inline double median_abs_offdiag(const Eigen::MatrixXd& c) {
  std::vector<double> v;
  for (Eigen::Index i = 0; i < c.rows(); ++i)
    for (Eigen::Index k = i + 1; k < c.cols(); ++k) v.push_back(std::abs(c(i, k)));
  std::sort(v.begin(), v.end());
  return v.empty() ? 0.0 : quantile_sorted(v, 0.5);
}

struct CurveAmplitude {
  double lo = 1.0;
  double hi = 3.0;
};

/// Random spline curve of one of the three shape families, zero at the lowest dose.
inline TrueCurve draw_spline_curve(RngStream& rng, const CurveAmplitude& amp) {
  TrueCurve c;
  const int family = rng.uniform_int(0, 2);
  const double a = amp.lo + (amp.hi - amp.lo) * rng.uniform();
  Eigen::VectorXd coef(7);
  if (family == 0) {
    c.kind = CurveKind::rise_fall;
    const double shape[7] = {0.0, 0.15, 0.5, 0.9, 1.0, 0.7, 0.3};
    for (int k = 0; k < 7; ++k) coef(k) = shape[k] + (k == 0 ? 0.0 : 0.1 * (rng.uniform() - 0.5));
    coef /= coef.maxCoeff();
  } else {
    c.kind = family == 1 ? CurveKind::increasing : CurveKind::decreasing;
    coef(0) = 0.0;
    for (int k = 1; k < 7; ++k) coef(k) = coef(k - 1) + 0.1 + rng.uniform();
    coef /= coef(6);
    if (family == 2) coef = -coef;
  }
  c.coef = a * coef;
  return c;
}

struct FactorScenario {
  int m = 0, J = 0, q = 2, reps = 3;
  double nu = 3.0, a1 = 2.1, a2 = 3.1;
  double xi = 0.0;
  Eigen::Vector2d alpha = Eigen::Vector2d(-0.1, 1.2);
  double delta_mean = 1.5, delta_sd = 0.1;
  double precision_shape = 2.5, precision_rate = 0.25;
  CurveAmplitude amplitude;
};

/// Latent structure, indicators, slopes and endpoint variances from the factor model.
inline SimulationTruth draw_factor_truth(const FactorScenario& sc, RngStream& rng) {
  SimulationTruth tr;
  const FactorDraw f = draw_factors(sc.m, sc.J, sc.q, sc.nu, sc.a1, sc.a2, rng);
  tr.lambda = f.lambda;
  tr.eta = f.eta;
  tr.xi = sc.xi;
  tr.alpha = sc.alpha;
  tr.gamma.resize(sc.m, sc.J);
  tr.t.resize(sc.m, sc.J);
  tr.delta = Eigen::MatrixXd::Zero(sc.m, sc.J);
  const Eigen::MatrixXd mij = f.lambda * f.eta.transpose();
  for (int i = 0; i < sc.m; ++i)
    for (int j = 0; j < sc.J; ++j) {
      tr.gamma(i, j) = sc.xi + mij(i, j) + rng.normal() > 0.0 ? 1 : 0;
      tr.t(i, j) = sc.alpha(0) + sc.alpha(1) * mij(i, j) + rng.normal() > 0.0 ? 1 : 0;
    }
  tr.sigma2.resize(sc.J);
  for (int j = 0; j < sc.J; ++j) tr.sigma2(j) = 1.0 / rng.gamma(sc.precision_shape, sc.precision_rate);
  tr.generator = {{"m", sc.m},
                  {"J", sc.J},
                  {"q", sc.q},
                  {"reps", sc.reps},
                  {"nu", sc.nu},
                  {"a1", sc.a1},
                  {"a2", sc.a2},
                  {"xi", sc.xi},
                  {"alpha", {sc.alpha(0), sc.alpha(1)}},
                  {"delta_mean", sc.delta_mean},
                  {"delta_sd", sc.delta_sd},
                  {"precision_gamma", {sc.precision_shape, sc.precision_rate}},
                  {"curve_amplitude", {sc.amplitude.lo, sc.amplitude.hi}}};
  return tr;
}

/// Curves for active cells, slopes for heteroscedastic cells, then the observations.
inline Dataset realize(SimulationTruth& tr, const FactorScenario& sc, RngStream& rng) {
  const int m = tr.m(), J = tr.J();
  tr.curves.assign(static_cast<std::size_t>(m) * J, TrueCurve{});
  std::vector<std::string> chems, ends;
  for (int i = 0; i < m; ++i) chems.push_back("chem" + std::to_string(i + 1));
  for (int j = 0; j < J; ++j) ends.push_back("assay" + std::to_string(j + 1));
  std::vector<CellData> cells;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < J; ++j) {
      const std::size_t k = static_cast<std::size_t>(i) * J + j;
      if (tr.gamma(i, j)) tr.curves[k] = draw_spline_curve(rng, sc.amplitude);
      tr.delta(i, j) = tr.t(i, j) ? sc.delta_mean + sc.delta_sd * rng.normal() : 0.0;
      CellData c{i, j, {}};
      const double sd = std::sqrt(tr.sigma2(j));
      for (int r = 0; r < sc.reps; ++r)
        for (double x : standard_doses())
          c.observations.push_back({x, tr.mean(i, j, x) + std::exp(x * tr.delta(i, j) / 2.0) * sd * rng.normal()});
      cells.push_back(std::move(c));
    }
  return Dataset(chems, ends, std::move(cells));
}

/// Uniformly chosen round(fraction * m J) cells.
inline CellMask random_mask(int m, int J, double fraction, RngStream& rng) {
  const int n = m * J;
  const auto hold = static_cast<int>(std::llround(fraction * n));
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  CellMask mask(static_cast<std::size_t>(n), 0);
  for (int k = 0; k < hold; ++k) {
    std::swap(order[k], order[rng.uniform_int(k, n - 1)]);
    mask[order[k]] = 1;
  }
  return mask;
}

// ---------------------------------------------------------------------------
// Scenarios

/// Simulation 1: data from the model itself, q = 2 true factors.
inline SimulatedData generate_sim1(int m, int J, int reps, double holdout_fraction, RngStream& rng) {
  if (m < 1 || J < 1 || reps < 1) throw invalid_argument("sim1: m, J and reps must be positive");
  FactorScenario sc;
  sc.m = m;
  sc.J = J;
  sc.reps = reps;
  SimulatedData out;
  out.truth = draw_factor_truth(sc, rng);
  out.truth.scenario = 1;
  out.data = realize(out.truth, sc, rng);
  out.held_out = random_mask(m, J, holdout_fraction, rng);
  return out;
}

/// Simulation 2: ZIPLL curves, one observation per dose, homoscedastic noise sd 0.1.
inline SimulatedData generate_sim2_zipll(int m, int J, RngStream& rng, double holdout_fraction = 0.1) {
  if (m < 1 || J < 1) throw invalid_argument("sim2: m and J must be positive");
  SimulatedData out;
  SimulationTruth& tr = out.truth;
  tr.scenario = 2;
  tr.gamma.resize(m, J);
  tr.t = IndicatorMatrix::Zero(m, J);
  tr.delta = Eigen::MatrixXd::Zero(m, J);
  tr.sigma2 = Eigen::VectorXd::Constant(J, 0.01);
  tr.curves.assign(static_cast<std::size_t>(m) * J, TrueCurve{});
  const double max_conc = std::pow(10.0, standard_doses().back());
  std::vector<std::string> chems, ends;
  for (int i = 0; i < m; ++i) chems.push_back("chem" + std::to_string(i + 1));
  for (int j = 0; j < J; ++j) ends.push_back("assay" + std::to_string(j + 1));
  std::vector<CellData> cells;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < J; ++j) {
      const std::size_t k = static_cast<std::size_t>(i) * J + j;
      tr.gamma(i, j) = rng.bernoulli(0.5) ? 1 : 0;
      if (tr.gamma(i, j)) {
        TrueCurve& c = tr.curves[k];
        c.kind = CurveKind::zipll;
        c.top = 10.0 * rng.uniform();
        c.slope = 1.0 + 7.0 * rng.uniform();
        c.ac50 = max_conc;
      }
      CellData cell{i, j, {}};
      for (double x : standard_doses()) cell.observations.push_back({x, tr.mean(i, j, x) + 0.1 * rng.normal()});
      cells.push_back(std::move(cell));
    }
  tr.generator = {{"m", m}, {"J", J}, {"noise_sd", 0.1}, {"top", {0.0, 10.0}}, {"slope", {1.0, 8.0}},
                  {"bottom", 0.0}, {"ac50", "max concentration"}, {"dose_scale", "concentration = 10^log10_dose"}};
  out.data = Dataset(chems, ends, std::move(cells));
  out.held_out = random_mask(m, J, holdout_fraction, rng);
  return out;
}

inline constexpr int kSim3Active = 20;
inline constexpr int kSim3Heteroscedastic = 18;

/// Simulation 3: m = 5, growing J, positives fixed at the first 20 (gamma) and
/// 18 (t) cells of the leading 5 x 5 block in row-major order.
inline SimulatedData generate_sim3_multiplicity(int J, RngStream& rng) {
  if (J < 5) throw invalid_argument("sim3: J must be at least 5 to place the fixed positives");
  FactorScenario sc;
  sc.m = 5;
  sc.J = J;
  sc.q = 5;
  sc.reps = 5;
  sc.xi = 0.8;
  sc.alpha = Eigen::Vector2d(0.3, 1.0);
  sc.delta_mean = 1.0;
  // The curves, slopes and variances of the leading block come from a stream that
  // does not depend on J, so the fixed positives are identical across J.
  RngStream block_rng = rng.split(5);
  FactorScenario block = sc;
  block.J = 5;
  SimulationTruth head = draw_factor_truth(block, block_rng);
  SimulationTruth tr = draw_factor_truth(sc, rng);
  tr.scenario = 3;
  tr.gamma.setZero();
  tr.t.setZero();
  for (int k = 0; k < kSim3Active; ++k) tr.gamma(k / 5, k % 5) = 1;
  for (int k = 0; k < kSim3Heteroscedastic; ++k) tr.t(k / 5, k % 5) = 1;
  tr.sigma2.head(5) = head.sigma2;
  tr.generator["fixed_positives"] = {{"gamma", kSim3Active}, {"t", kSim3Heteroscedastic}, {"rule", "row-major in leading 5x5 block"}};

  // Realize the leading block from block_rng, the rest from rng.
  SimulatedData out;
  const int m = 5;
  tr.curves.assign(static_cast<std::size_t>(m) * J, TrueCurve{});
  std::vector<std::string> chems, ends;
  for (int i = 0; i < m; ++i) chems.push_back("chem" + std::to_string(i + 1));
  for (int j = 0; j < J; ++j) ends.push_back("assay" + std::to_string(j + 1));
  std::vector<CellData> cells(static_cast<std::size_t>(m) * J);
  for (int pass = 0; pass < 2; ++pass)
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < J; ++j) {
        const bool in_block = j < 5;
        if (in_block != (pass == 0)) continue;
        RngStream& r = in_block ? block_rng : rng;
        const std::size_t k = static_cast<std::size_t>(i) * J + j;
        if (tr.gamma(i, j)) tr.curves[k] = draw_spline_curve(r, sc.amplitude);
        tr.delta(i, j) = tr.t(i, j) ? sc.delta_mean + sc.delta_sd * r.normal() : 0.0;
        CellData c{i, j, {}};
        const double sd = std::sqrt(tr.sigma2(j));
        for (int rep = 0; rep < sc.reps; ++rep)
          for (double x : standard_doses())
            c.observations.push_back({x, tr.mean(i, j, x) + std::exp(x * tr.delta(i, j) / 2.0) * sd * r.normal()});
        cells[k] = std::move(c);
      }
  out.data = Dataset(chems, ends, std::move(cells));
  out.held_out.assign(static_cast<std::size_t>(m) * J, 0);
  out.truth = std::move(tr);
  return out;
}

enum class CorrelationRegime { high_corr, weak_corr };

inline const char* to_string(CorrelationRegime r) { return r == CorrelationRegime::high_corr ? "high_corr" : "weak_corr"; }

/// Simulation 4: m = 30, J = 10, five replicates, strongly or weakly correlated chemicals.
inline SimulatedData generate_sim4(CorrelationRegime regime, double missing_fraction, RngStream& rng) {
  if (!(missing_fraction >= 0.0 && missing_fraction < 1.0)) throw invalid_argument("sim4: missing fraction must lie in [0, 1)");
  FactorScenario sc;
  sc.m = 30;
  sc.J = 10;
  sc.reps = 5;
  sc.xi = 0.8;
  sc.alpha = Eigen::Vector2d(0.3, 1.0);
  sc.delta_mean = 1.0;
  sc.q = regime == CorrelationRegime::high_corr ? 1 : 10;
  sc.nu = regime == CorrelationRegime::high_corr ? 0.1 : 0.3;
  SimulatedData out;
  out.truth = draw_factor_truth(sc, rng);
  out.truth.scenario = 4;
  out.truth.generator["regime"] = to_string(regime);
  out.truth.generator["missing_fraction"] = missing_fraction;
  out.data = realize(out.truth, sc, rng);
  out.held_out = random_mask(sc.m, sc.J, missing_fraction, rng);
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

/// Mann-Whitney AUC with ties counted one half.
inline double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw invalid_argument("auc: scores and labels differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(n);
  for (std::size_t a = 0; a < n;) {
    std::size_t b = a;
    while (b < n && scores[order[b]] == scores[order[a]]) ++b;
    const double r = (static_cast<double>(a + b) + 1.0) / 2.0;  // average of 1-based ranks a+1..b
    for (std::size_t k = a; k < b; ++k) rank[order[k]] = r;
    a = b;
  }
  double pos = 0.0, rank_sum = 0.0;
  for (std::size_t k = 0; k < n; ++k)
    if (labels[k]) {
      pos += 1.0;
      rank_sum += rank[k];
    }
  const double neg = static_cast<double>(n) - pos;
  if (pos == 0.0 || neg == 0.0) throw undefined_auc_error("auc needs both classes");
  return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

inline double rmse(const std::vector<double>& fitted, const std::vector<double>& truth) {
  if (fitted.size() != truth.size()) throw invalid_argument("rmse: length mismatch");
  if (fitted.empty()) throw empty_input_error("rmse: no points");
  double s = 0.0;
  for (std::size_t k = 0; k < fitted.size(); ++k) s += (fitted[k] - truth[k]) * (fitted[k] - truth[k]);
  return std::sqrt(s / static_cast<double>(fitted.size()));
}

inline int false_positives(const Eigen::MatrixXd& prob, const IndicatorMatrix& truth, double cutoff) {
  if (prob.rows() != truth.rows() || prob.cols() != truth.cols()) throw invalid_argument("false_positives: shape mismatch");
  int n = 0;
  for (Eigen::Index i = 0; i < prob.rows(); ++i)
    for (Eigen::Index j = 0; j < prob.cols(); ++j) n += prob(i, j) > cutoff && truth(i, j) == 0;
  return n;
}

/// AUC over cells selected by `use` (row-major); NaN when a class is absent.
inline double masked_auc(const Eigen::MatrixXd& prob, const IndicatorMatrix& truth, const CellMask& use) {
  std::vector<double> s;
  std::vector<int> l;
  for (Eigen::Index i = 0; i < prob.rows(); ++i)
    for (Eigen::Index j = 0; j < prob.cols(); ++j)
      if (use[static_cast<std::size_t>(i * prob.cols() + j)]) {
        s.push_back(prob(i, j));
        l.push_back(truth(i, j));
      }
  try {
    return auc(s, l);
  } catch (const undefined_auc_error&) {
    return std::numeric_limits<double>::quiet_NaN();
  }
}

/// Raw-scale posterior-mean fitted values and true means at every observation of the fitted cells.
struct FitPoints {
  std::vector<double> fitted, truth, dose;
  std::vector<int> cell;  // row-major index
};

inline FitPoints fit_points(const std::vector<Draw>& draws, const FitProblem& pb, const Dataset& normalized,
                            const std::vector<NormalizationRecord>& records, const SimulationTruth& truth) {
  const std::vector<Eigen::VectorXd> level_mean = posterior_level_means(draws, pb);
  FitPoints p;
  for (std::size_t k = 0; k < pb.designs.size(); ++k) {
    if (!pb.designs[k]) continue;
    const CellDesign& d = *pb.designs[k];
    const int i = static_cast<int>(k) / pb.J, j = static_cast<int>(k) % pb.J;
    const auto& obs = normalized.cells()[k].observations;
    for (std::size_t o = 0; o < obs.size(); ++o) {
      p.fitted.push_back(records[k].invert(level_mean[k](d.obs_level[o])));
      p.truth.push_back(truth.mean(i, j, obs[o].log10_dose));
      p.dose.push_back(obs[o].log10_dose);
      p.cell.push_back(static_cast<int>(k));
    }
  }
  return p;
}

/// Fraction of observations inside their pointwise 95% posterior predictive interval.
inline double predictive_coverage(const std::vector<Draw>& draws, const FitProblem& pb, const Dataset& normalized,
                                  RngStream& rng, const IndicatorMatrix* only_t = nullptr) {
  double inside = 0.0, total = 0.0;
  std::vector<double> buf(draws.size());
  for (std::size_t k = 0; k < pb.designs.size(); ++k) {
    if (!pb.designs[k]) continue;
    const CellDesign& d = *pb.designs[k];
    const int i = static_cast<int>(k) / pb.J, j = static_cast<int>(k) % pb.J;
    if (only_t && (*only_t)(i, j) == 0) continue;
    std::vector<double> lo(d.levels()), hi(d.levels());
    for (int l = 0; l < d.levels(); ++l) {
      const double x = d.level_dose(l);
      for (std::size_t s = 0; s < draws.size(); ++s) {
        const Draw& dr = draws[s];
        const double f = dr.gamma(i, j) ? d.level_basis.row(l).dot(dr.beta[k]) : 0.0;
        buf[s] = f + std::exp(x * dr.delta(i, j) / 2.0) * std::sqrt(dr.noise_var(j)) * rng.normal();
      }
      std::sort(buf.begin(), buf.end());
      lo[l] = quantile_sorted(buf, 0.025);
      hi[l] = quantile_sorted(buf, 0.975);
    }
    const auto& obs = normalized.cells()[k].observations;
    for (std::size_t o = 0; o < obs.size(); ++o) {
      const int l = d.obs_level[o];
      inside += obs[o].response >= lo[l] && obs[o].response <= hi[l];
      total += 1.0;
    }
  }
  return total > 0.0 ? inside / total : std::numeric_limits<double>::quiet_NaN();
}

/// Correlation between dose and |posterior mean normalized residual| pooled over
/// the selected cells, where the residual of a draw is (y - gamma f(x)) / exp(x delta / 2).
inline double normalized_residual_dose_correlation(const std::vector<Draw>& draws, const FitProblem& pb,
                                                   const Dataset& normalized, const IndicatorMatrix& select) {
  std::vector<double> xs, rs;
  for (std::size_t k = 0; k < pb.designs.size(); ++k) {
    if (!pb.designs[k]) continue;
    const CellDesign& d = *pb.designs[k];
    const int i = static_cast<int>(k) / pb.J, j = static_cast<int>(k) % pb.J;
    if (select(i, j) == 0) continue;
    const auto& obs = normalized.cells()[k].observations;
    std::vector<double> r(obs.size(), 0.0);
    for (const Draw& dr : draws) {
      const Eigen::VectorXd f = dr.gamma(i, j) ? Eigen::VectorXd(d.level_basis * dr.beta[k]) : Eigen::VectorXd::Zero(d.levels());
      for (std::size_t o = 0; o < obs.size(); ++o)
        r[o] += (obs[o].response - f(d.obs_level[o])) / std::exp(obs[o].log10_dose * dr.delta(i, j) / 2.0);
    }
    for (std::size_t o = 0; o < obs.size(); ++o) {
      xs.push_back(obs[o].log10_dose);
      rs.push_back(std::abs(r[o] / static_cast<double>(draws.size())));
    }
  }
  const auto n = static_cast<double>(xs.size());
  if (n < 3) return std::numeric_limits<double>::quiet_NaN();
  const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n, mr = std::accumulate(rs.begin(), rs.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    sxy += (xs[k] - mx) * (rs[k] - mr);
    sxx += (xs[k] - mx) * (xs[k] - mx);
    syy += (rs[k] - mr) * (rs[k] - mr);
  }
  return sxy / std::sqrt(sxx * syy);
}

struct Metrics {
  double rmse = 0.0;
  double rmse_zero = 0.0;  // the all-zero predictor
  double auc_in_gamma = 0.0, auc_in_t = 0.0, auc_in_union = 0.0;
  double auc_out_gamma = 0.0, auc_out_t = 0.0, auc_out_union = 0.0;
  int fp_gamma = 0, fp_t = 0;
  double xi_mean = 0.0, alpha0_mean = 0.0;
  int held_out = 0;
};

/// Score a fit of the training data (held-out cells missing) against the truth.
inline Metrics evaluate(const std::vector<Draw>& draws, const FitProblem& pb, const Dataset& normalized,
                        const std::vector<NormalizationRecord>& records, const SimulationTruth& truth,
                        const CellMask& held_out, double fp_cutoff = 0.5) {
  const ActivitySummary s = activity_summary(draws, pb, {}, held_out);
  Metrics mt;
  const FitPoints p = fit_points(draws, pb, normalized, records, truth);
  mt.rmse = rmse(p.fitted, p.truth);
  mt.rmse_zero = rmse(std::vector<double>(p.truth.size(), 0.0), p.truth);
  IndicatorMatrix union_truth = truth.gamma.cwiseMax(truth.t);
  CellMask in_sample = s.observed;
  mt.auc_in_gamma = masked_auc(s.p_gamma, truth.gamma, in_sample);
  mt.auc_in_t = masked_auc(s.p_t, truth.t, in_sample);
  mt.auc_in_union = masked_auc(s.p_union, union_truth, in_sample);
  mt.auc_out_gamma = masked_auc(s.p_gamma, truth.gamma, held_out);
  mt.auc_out_t = masked_auc(s.p_t, truth.t, held_out);
  mt.auc_out_union = masked_auc(s.p_union, union_truth, held_out);
  mt.fp_gamma = false_positives(s.p_gamma, truth.gamma, fp_cutoff);
  mt.fp_t = false_positives(s.p_t, truth.t, fp_cutoff);
  for (const Draw& d : draws) {
    mt.xi_mean += d.xi / static_cast<double>(draws.size());
    mt.alpha0_mean += d.alpha(0) / static_cast<double>(draws.size());
  }
  mt.held_out = static_cast<int>(std::count(held_out.begin(), held_out.end(), 1));
  return mt;
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json indicator_json(const IndicatorMatrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    nlohmann::json r = nlohmann::json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) r.push_back(m(i, j));
    rows.push_back(r);
  }
  return rows;
}

inline nlohmann::json real_json(const Eigen::MatrixXd& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    nlohmann::json r = nlohmann::json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) r.push_back(m(i, j));
    rows.push_back(r);
  }
  return rows;
}

inline nlohmann::json truth_to_json(const SimulationTruth& tr) {
  nlohmann::json j;
  j["scenario"] = tr.scenario;
  j["generator"] = tr.generator;
  j["gamma"] = indicator_json(tr.gamma);
  j["t"] = indicator_json(tr.t);
  j["delta"] = real_json(tr.delta);
  j["xi"] = tr.xi;
  j["alpha"] = {tr.alpha(0), tr.alpha(1)};
  j["sigma2"] = std::vector<double>(tr.sigma2.data(), tr.sigma2.data() + tr.sigma2.size());
  if (tr.lambda.size() > 0) {
    j["lambda"] = real_json(tr.lambda);
    j["eta"] = real_json(tr.eta);
  }
  j["doses"] = standard_doses();
  nlohmann::json curves = nlohmann::json::array();
  for (int i = 0; i < tr.m(); ++i)
    for (int jj = 0; jj < tr.J(); ++jj) {
      const TrueCurve& c = tr.curves[static_cast<std::size_t>(i) * tr.J() + jj];
      if (!tr.gamma(i, jj)) continue;
      nlohmann::json e{{"chemical", i}, {"endpoint", jj}, {"kind", to_string(c.kind)}};
      if (c.kind == CurveKind::zipll) {
        e["top"] = c.top;
        e["slope"] = c.slope;
        e["ac50"] = c.ac50;
      } else {
        e["coef"] = std::vector<double>(c.coef.data(), c.coef.data() + c.coef.size());
      }
      std::vector<double> mean;
      for (double x : standard_doses()) mean.push_back(c(x));
      e["mean_at_doses"] = mean;
      curves.push_back(e);
    }
  j["curves"] = curves;
  return j;
}

inline IndicatorMatrix indicator_from_json(const nlohmann::json& j) {
  const auto m = static_cast<Eigen::Index>(j.size());
  const auto J = m > 0 ? static_cast<Eigen::Index>(j.at(0).size()) : 0;
  IndicatorMatrix out(m, J);
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index k = 0; k < J; ++k) out(i, k) = j.at(i).at(k).get<int>();
  return out;
}

inline Eigen::MatrixXd real_from_json(const nlohmann::json& j) {
  const auto m = static_cast<Eigen::Index>(j.size());
  const auto J = m > 0 ? static_cast<Eigen::Index>(j.at(0).size()) : 0;
  Eigen::MatrixXd out(m, J);
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index k = 0; k < J; ++k) out(i, k) = j.at(i).at(k).get<double>();
  return out;
}

inline SimulationTruth truth_from_json(const nlohmann::json& j) {
  SimulationTruth tr;
  tr.scenario = j.value("scenario", 0);
  tr.generator = j.value("generator", nlohmann::json::object());
  tr.gamma = indicator_from_json(j.at("gamma"));
  tr.t = indicator_from_json(j.at("t"));
  tr.delta = real_from_json(j.at("delta"));
  tr.xi = j.value("xi", 0.0);
  const auto a = j.value("alpha", std::vector<double>{0.0, 0.0});
  tr.alpha = Eigen::Vector2d(a.at(0), a.at(1));
  const auto s2 = j.at("sigma2").get<std::vector<double>>();
  tr.sigma2 = Eigen::Map<const Eigen::VectorXd>(s2.data(), static_cast<Eigen::Index>(s2.size()));
  if (j.contains("lambda")) {
    tr.lambda = real_from_json(j.at("lambda"));
    tr.eta = real_from_json(j.at("eta"));
  }
  tr.curves.assign(static_cast<std::size_t>(tr.m()) * tr.J(), TrueCurve{});
  for (const auto& e : j.at("curves")) {
    TrueCurve c;
    const std::string kind = e.at("kind");
    if (kind == "zipll") {
      c.kind = CurveKind::zipll;
      c.top = e.at("top");
      c.slope = e.at("slope");
      c.ac50 = e.at("ac50");
    } else {
      c.kind = kind == "rise_fall" ? CurveKind::rise_fall : kind == "increasing" ? CurveKind::increasing : CurveKind::decreasing;
      const auto coef = e.at("coef").get<std::vector<double>>();
      c.coef = Eigen::Map<const Eigen::VectorXd>(coef.data(), static_cast<Eigen::Index>(coef.size()));
    }
    tr.curves[static_cast<std::size_t>(e.at("chemical").get<int>()) * tr.J() + e.at("endpoint").get<int>()] = c;
  }
  return tr;
}

inline nlohmann::json metrics_to_json(const Metrics& m) {
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  return {{"rmse", num(m.rmse)},
          {"rmse_zero_predictor", num(m.rmse_zero)},
          {"auc_in", {{"gamma", num(m.auc_in_gamma)}, {"t", num(m.auc_in_t)}, {"union", num(m.auc_in_union)}}},
          {"auc_out", {{"gamma", num(m.auc_out_gamma)}, {"t", num(m.auc_out_t)}, {"union", num(m.auc_out_union)}}},
          {"false_positives", {{"gamma", m.fp_gamma}, {"t", m.fp_t}, {"cutoff", 0.5}}},
          {"posterior_mean", {{"xi", num(m.xi_mean)}, {"alpha0", num(m.alpha0_mean)}}},
          {"held_out_cells", m.held_out}};
}

}  // namespace bmc::sim
