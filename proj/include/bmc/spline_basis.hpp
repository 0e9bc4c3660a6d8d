#pragma once

// Cubic B-spline designs over log10 dose.

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "bmc/data_model.hpp"
#include "bmc/errors.hpp"

namespace bmc {

inline constexpr int kSplineOrder = 4;  // cubic

/// Sorted distinct breakpoints: boundary knots at the ends, interior knots between.
struct KnotVector {
  std::vector<double> values;

  double lo() const { return values.front(); }
  double hi() const { return values.back(); }
  int interior_count() const { return static_cast<int>(values.size()) - 2; }
  /// Basis dimension p for the cubic order.
  int dimension() const { return interior_count() + kSplineOrder; }
};

/// Linear-interpolation (type 7) sample quantile of sorted data.
inline double quantile_sorted(std::span<const double> sorted, double prob) {
  const double h = prob * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

/// Knots at the minimum, the three quartiles and the maximum of the doses.
inline KnotVector knots_from_doses(std::span<const double> doses) {
  std::vector<double> sorted(doses.begin(), doses.end());
  std::sort(sorted.begin(), sorted.end());
  if (sorted.empty() || sorted.front() == sorted.back())
    throw degenerate_design_error("knot placement needs at least two distinct doses");
  KnotVector k;
  k.values = {sorted.front(), quantile_sorted(sorted, 0.25), quantile_sorted(sorted, 0.5),
              quantile_sorted(sorted, 0.75), sorted.back()};
  k.values.erase(std::unique(k.values.begin(), k.values.end()), k.values.end());
  return k;
}

/// Row of the (uncentered) cubic B-spline basis at x; entries are nonnegative and sum to one.
inline Eigen::RowVectorXd bspline_row(double x, const KnotVector& knots) {
  constexpr double kSlack = 1e-12;
  const double lo = knots.lo(), hi = knots.hi();
  if (x < lo - kSlack * (1.0 + std::abs(lo)) || x > hi + kSlack * (1.0 + std::abs(hi)))
    throw extrapolation_error("dose " + std::to_string(x) + " outside knot span [" + std::to_string(lo) +
                              ", " + std::to_string(hi) + "]");
  x = std::clamp(x, lo, hi);

  // Clamped knot sequence: boundary knots repeated to full multiplicity.
  std::vector<double> t;
  t.insert(t.end(), kSplineOrder - 1, lo);
  t.insert(t.end(), knots.values.begin(), knots.values.end());
  t.insert(t.end(), kSplineOrder - 1, hi);
  const int p = knots.dimension();
  constexpr int degree = kSplineOrder - 1;

  int span = p - 1;
  if (x < hi) {
    span = static_cast<int>(std::upper_bound(t.begin(), t.end(), x) - t.begin()) - 1;
    span = std::clamp(span, degree, p - 1);
  }

  std::array<double, kSplineOrder> n{}, left{}, right{};
  n[0] = 1.0;
  for (int j = 1; j <= degree; ++j) {
    left[j] = x - t[span + 1 - j];
    right[j] = t[span + j] - x;
    double saved = 0.0;
    for (int r = 0; r < j; ++r) {
      const double tmp = n[r] / (right[r + 1] + left[j - r]);
      n[r] = saved + right[r + 1] * tmp;
      saved = left[j - r] * tmp;
    }
    n[j] = saved;
  }
  Eigen::RowVectorXd row = Eigen::RowVectorXd::Zero(p);
  for (int r = 0; r <= degree; ++r) row(span - degree + r) = n[r];
  return row;
}

struct BasisMatrix {
  Eigen::MatrixXd values;
  bool centered = false;

  Eigen::Index rows() const { return values.rows(); }
  Eigen::Index cols() const { return values.cols(); }
};

inline BasisMatrix basis_matrix(std::span<const double> doses, const KnotVector& knots) {
  BasisMatrix b;
  b.values.resize(static_cast<Eigen::Index>(doses.size()), knots.dimension());
  for (std::size_t k = 0; k < doses.size(); ++k) b.values.row(static_cast<Eigen::Index>(k)) = bspline_row(doses[k], knots);
  return b;
}

inline Eigen::RowVectorXd column_means(const BasisMatrix& basis) {
  if (basis.rows() == 0) return Eigen::RowVectorXd::Zero(basis.cols());
  return basis.values.colwise().mean();
}

/// Subtract column means, removing the intercept direction from the column space.
inline BasisMatrix center_columns(const BasisMatrix& basis) {
  if (basis.centered) throw invalid_argument("basis is already centered");
  BasisMatrix out = basis;
  if (out.rows() > 0) out.values.rowwise() -= column_means(basis);
  out.centered = true;
  return out;
}

inline constexpr double kOlsRidge = 1e-6;

/// Least-squares spline coefficients; a 1e-6 ridge replaces plain OLS when
/// the normal matrix is singular (always the case for a centered basis).
inline Eigen::VectorXd ols_coefficients(std::span<const double> responses, const BasisMatrix& basis) {
  if (responses.empty()) throw empty_input_error("OLS needs at least one observation");
  const Eigen::Map<const Eigen::VectorXd> y(responses.data(), static_cast<Eigen::Index>(responses.size()));
  const Eigen::MatrixXd xtx = basis.values.transpose() * basis.values;
  const Eigen::VectorXd xty = basis.values.transpose() * y;
  Eigen::FullPivLU<Eigen::MatrixXd> lu(xtx);
  lu.setThreshold(1e-10);
  if (lu.isInvertible()) return lu.solve(xty);
  const Eigen::MatrixXd ridged = xtx + kOlsRidge * Eigen::MatrixXd::Identity(xtx.rows(), xtx.cols());
  return ridged.ldlt().solve(xty);
}

inline Eigen::VectorXd ols_coefficients(const CellData& cell, const BasisMatrix& basis) {
  std::vector<double> y;
  y.reserve(cell.size());
  for (const auto& o : cell.observations) y.push_back(o.response);
  return ols_coefficients(std::span<const double>(y), basis);
}

// ---------------------------------------------------------------------------
// Per-cell designs

/// A cell's centered design, compressed to one row per distinct dose.
///
/// Every quantity the sampler needs (weighted cross products, residual sums)
/// is a function of the per-level counts, response sums and sums of squares.
struct CellDesign {
  int chemical = 0;
  int endpoint = 0;
  KnotVector knots;
  Eigen::RowVectorXd column_mean;  // subtracted from raw basis rows
  Eigen::VectorXd level_dose;      // distinct doses
  Eigen::MatrixXd level_basis;     // centered basis row per level
  Eigen::VectorXd count;           // observations per level
  Eigen::VectorXd sum_y;
  Eigen::VectorXd sum_y2;
  std::vector<int> obs_level;      // level of each observation, in input order

  int levels() const { return static_cast<int>(level_dose.size()); }
  int p() const { return static_cast<int>(level_basis.cols()); }
  double total_count() const { return count.sum(); }

  /// Centered basis evaluated anywhere in the knot span.
  Eigen::RowVectorXd row(double dose) const { return bspline_row(dose, knots) - column_mean; }
};

inline constexpr int kMinCellDistinctDoses = 5;

/// Per-cell knots when the cell has enough distinct doses to place five distinct
/// knots, otherwise the endpoint-wide knots.
inline KnotVector cell_knots(const CellData& cell, const std::optional<KnotVector>& endpoint_knots) {
  std::vector<double> doses;
  for (const auto& o : cell.observations) doses.push_back(o.log10_dose);
  std::vector<double> distinct = doses;
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  if (static_cast<int>(distinct.size()) >= kMinCellDistinctDoses) {
    KnotVector k = knots_from_doses(doses);
    if (k.values.size() == 5) return k;
  }
  if (!endpoint_knots)
    throw degenerate_design_error("endpoint has too few distinct doses for a cubic spline design");
  return *endpoint_knots;
}

inline CellDesign build_cell_design(const CellData& cell, const KnotVector& knots) {
  if (cell.missing()) throw empty_input_error("cannot build a design for a missing cell");
  CellDesign d;
  d.chemical = cell.chemical_index;
  d.endpoint = cell.endpoint_index;
  d.knots = knots;

  std::vector<double> doses;
  for (const auto& o : cell.observations) doses.push_back(o.log10_dose);
  const BasisMatrix raw = basis_matrix(doses, knots);
  d.column_mean = column_means(raw);

  std::vector<double> levels = doses;
  std::sort(levels.begin(), levels.end());
  levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
  const auto L = static_cast<Eigen::Index>(levels.size());
  d.level_dose = Eigen::Map<const Eigen::VectorXd>(levels.data(), L);
  d.level_basis.resize(L, knots.dimension());
  for (Eigen::Index l = 0; l < L; ++l) d.level_basis.row(l) = bspline_row(levels[l], knots) - d.column_mean;
  d.count = Eigen::VectorXd::Zero(L);
  d.sum_y = Eigen::VectorXd::Zero(L);
  d.sum_y2 = Eigen::VectorXd::Zero(L);
  for (const auto& o : cell.observations) {
    const auto l = std::lower_bound(levels.begin(), levels.end(), o.log10_dose) - levels.begin();
    d.obs_level.push_back(static_cast<int>(l));
    d.count(l) += 1.0;
    d.sum_y(l) += o.response;
    d.sum_y2(l) += o.response * o.response;
  }
  return d;
}

/// Endpoint-wide knots from the union of the endpoint's observed doses, if usable.
inline std::optional<KnotVector> endpoint_knots(const Dataset& data, int j) {
  std::vector<double> doses;
  for (int i = 0; i < data.m(); ++i)
    for (const auto& o : data.cell(i, j).observations) doses.push_back(o.log10_dose);
  if (doses.empty()) return std::nullopt;
  try {
    KnotVector k = knots_from_doses(doses);
    if (k.values.size() == 5) return k;
  } catch (const degenerate_design_error&) {
  }
  return std::nullopt;
}

/// Designs for every observed cell (nullopt for missing cells), row-major.
inline std::vector<std::optional<CellDesign>> build_designs(const Dataset& data) {
  std::vector<std::optional<KnotVector>> ek(static_cast<std::size_t>(data.J()));
  for (int j = 0; j < data.J(); ++j) ek[j] = endpoint_knots(data, j);
  std::vector<std::optional<CellDesign>> out(data.cell_count());
  for (std::size_t k = 0; k < data.cell_count(); ++k) {
    const CellData& c = data.cells()[k];
    if (c.missing()) continue;
    out[k] = build_cell_design(c, cell_knots(c, ek[c.endpoint_index]));
  }
  return out;
}

/// Centered design rows for every observation of the cell, in input order.
inline BasisMatrix expanded_basis(const CellDesign& d) {
  BasisMatrix b;
  b.values.resize(static_cast<Eigen::Index>(d.obs_level.size()), d.p());
  for (std::size_t k = 0; k < d.obs_level.size(); ++k)
    b.values.row(static_cast<Eigen::Index>(k)) = d.level_basis.row(d.obs_level[k]);
  b.centered = true;
  return b;
}

/// Prior scale for the endpoint covariances: sample covariance (divisor n - 1)
/// of per-cell OLS coefficients on the centered basis, ridged to positive
/// definiteness when needed.
inline Eigen::MatrixXd empirical_R(const std::vector<Eigen::VectorXd>& coefficients) {
  if (coefficients.size() < 2) throw insufficient_data_error("empirical R needs at least two usable cells");
  const auto p = coefficients.front().size();
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(p);
  for (const auto& b : coefficients) mean += b;
  mean /= static_cast<double>(coefficients.size());
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(p, p);
  for (const auto& b : coefficients) cov += (b - mean) * (b - mean).transpose();
  cov /= static_cast<double>(coefficients.size() - 1);
  cov = 0.5 * (cov + cov.transpose());

  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov, Eigen::EigenvaluesOnly);
  const double min_eig = eig.eigenvalues().minCoeff();
  const double mean_diag = cov.diagonal().mean();
  if (llt.info() == Eigen::Success && min_eig > 1e-10 * std::max(mean_diag, 1e-300)) return cov;
  double eps = 1e-6 * mean_diag;
  if (!(eps > 0.0)) eps = 1e-6;
  cov += eps * Eigen::MatrixXd::Identity(p, p);
  // A strongly negative eigenvalue from rounding still needs lifting.
  if (min_eig < 0.0) cov += (-min_eig) * Eigen::MatrixXd::Identity(p, p);
  return cov;
}

inline Eigen::MatrixXd empirical_R(const Dataset& data) {
  const auto designs = build_designs(data);
  std::vector<Eigen::VectorXd> coefs;
  for (std::size_t k = 0; k < designs.size(); ++k) {
    if (!designs[k]) continue;
    coefs.push_back(ols_coefficients(data.cells()[k], expanded_basis(*designs[k])));
  }
  return empirical_R(coefs);
}

}  // namespace bmc
