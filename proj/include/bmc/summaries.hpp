#pragma once

// Posterior summaries of saved draws: activity probabilities, rankings, curve
// bands, chemical correlations and hold-out predictions, plus their CSV forms.
// Draws from several chains are summarized by simply concatenating them.

#include <algorithm>
#include <cmath>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "bmc/data_model.hpp"
#include "bmc/errors.hpp"
#include "bmc/sampler.hpp"
#include "bmc/spline_basis.hpp"

namespace bmc {

struct ActivitySummary {
  int m = 0;
  int J = 0;
  Eigen::MatrixXd p_gamma, p_t, p_kappa, p_union, p_kappa_union;
  CellMask observed;  // had data during fitting
  CellMask held_out;  // masked by the caller's hold-out split

  std::size_t index(int i, int j) const { return static_cast<std::size_t>(i) * J + j; }
};

/// Per-cell cutoffs on the normalized scale (row-major); nullopt where the endpoint has none.
inline std::vector<std::optional<double>> cell_cutoffs(const Dataset& normalized,
                                                       const std::vector<NormalizationRecord>& records) {
  std::vector<std::optional<double>> out(normalized.cell_count());
  for (int i = 0; i < normalized.m(); ++i)
    for (int j = 0; j < normalized.J(); ++j) out[normalized.index(i, j)] = normalized_cutoff(normalized, records, i, j);
  return out;
}

/// kappa for one draw. Without a cutoff, or without data (no curve to gate), kappa = gamma.
inline int draw_kappa(const FitProblem& pb, const Draw& d, const std::vector<std::optional<double>>& cutoffs, int i,
                      int j) {
  const std::size_t k = pb.index(i, j);
  const int g = d.gamma(i, j);
  if (g == 0 || !pb.observed(k) || cutoffs.empty() || !cutoffs[k]) return g;
  return kappa_indicator(g, d.beta[k], *pb.designs[k], *cutoffs[k]);
}

inline ActivitySummary activity_summary(const std::vector<Draw>& draws, const FitProblem& pb,
                                        const std::vector<std::optional<double>>& cutoffs = {},
                                        const CellMask& held_out = {}) {
  if (draws.empty()) throw empty_input_error("no saved draws to summarize");
  ActivitySummary s;
  s.m = pb.m;
  s.J = pb.J;
  for (Eigen::MatrixXd* p : {&s.p_gamma, &s.p_t, &s.p_kappa, &s.p_union, &s.p_kappa_union}) p->setZero(pb.m, pb.J);
  s.observed.assign(pb.designs.size(), 0);
  for (std::size_t k = 0; k < pb.designs.size(); ++k) s.observed[k] = pb.observed(k) ? 1 : 0;
  s.held_out = held_out.empty() ? CellMask(pb.designs.size(), 0) : held_out;

  const double w = 1.0 / static_cast<double>(draws.size());
  for (const Draw& d : draws)
    for (int i = 0; i < pb.m; ++i)
      for (int j = 0; j < pb.J; ++j) {
        const int g = d.gamma(i, j), t = d.t(i, j);
        const int kap = draw_kappa(pb, d, cutoffs, i, j);
        s.p_gamma(i, j) += w * g;
        s.p_t(i, j) += w * t;
        s.p_kappa(i, j) += w * kap;
        s.p_union(i, j) += w * (g | t);
        s.p_kappa_union(i, j) += w * (kap | t);
      }
  return s;
}

struct RankEntry {
  int index = 0;
  double score = 0.0;
  int count = 0;  // cells averaged
};

inline void sort_ranking(std::vector<RankEntry>& r) {
  std::stable_sort(r.begin(), r.end(), [](const RankEntry& a, const RankEntry& b) {
    if (a.count == 0 || b.count == 0) return a.count > b.count;
    if (a.score != b.score) return a.score > b.score;
    return a.index < b.index;
  });
}

/// Chemicals by mean Pr(kappa = 1 or t = 1) over endpoints; chemicals with no eligible endpoint go last.
inline std::vector<RankEntry> chemical_ranking(const ActivitySummary& s, bool include_predictions = false) {
  std::vector<RankEntry> r;
  for (int i = 0; i < s.m; ++i) {
    RankEntry e{i, 0.0, 0};
    for (int j = 0; j < s.J; ++j) {
      if (!include_predictions && !s.observed[s.index(i, j)]) continue;
      e.score += s.p_kappa_union(i, j);
      ++e.count;
    }
    if (e.count > 0) e.score /= e.count;
    r.push_back(e);
  }
  sort_ranking(r);
  return r;
}

inline constexpr double kActivationThreshold = 0.9;

/// Endpoints by mean Pr(gamma = 1 or t = 1) over the given chemicals, keeping scores >= threshold.
inline std::vector<RankEntry> endpoint_activation_list(const ActivitySummary& s, const std::vector<int>& chemicals,
                                                       double threshold = kActivationThreshold) {
  if (chemicals.empty()) throw invalid_argument("endpoint activation list needs at least one chemical");
  std::vector<RankEntry> r;
  for (int j = 0; j < s.J; ++j) {
    RankEntry e{j, 0.0, 0};
    for (int i : chemicals) {
      if (i < 0 || i >= s.m) throw invalid_argument("chemical index out of range");
      e.score += s.p_union(i, j);
      ++e.count;
    }
    e.score /= e.count;
    if (e.score >= threshold) r.push_back(e);
  }
  sort_ranking(r);
  return r;
}

struct CurveBands {
  std::vector<double> grid;
  Eigen::VectorXd mean, ci_lo, ci_hi, ppi_lo, ppi_hi;
};

/// Pointwise posterior mean, 95% credible band of gamma f(x) and 95% predictive band
/// of gamma f(x) + exp(x delta / 2) sigma_j eps, on the normalized scale.
inline CurveBands curve_bands(const std::vector<Draw>& draws, const FitProblem& pb, int i, int j,
                              const std::vector<double>& grid, RngStream& rng) {
  if (draws.empty()) throw empty_input_error("no saved draws for curve bands");
  const std::size_t k = pb.index(i, j);
  if (!pb.observed(k)) throw invalid_argument("curve bands need an observed cell");
  const CellDesign& d = *pb.designs[k];
  const auto G = static_cast<Eigen::Index>(grid.size());
  const auto n = draws.size();
  Eigen::MatrixXd f(G, static_cast<Eigen::Index>(n)), y(G, static_cast<Eigen::Index>(n));
  for (std::size_t s = 0; s < n; ++s) {
    const Draw& dr = draws[s];
    const Eigen::VectorXd fs =
        dr.gamma(i, j) == 1 ? fitted_curve(dr.beta[k], grid, d) : Eigen::VectorXd(Eigen::VectorXd::Zero(G));
    const double sd = std::sqrt(dr.noise_var(j));
    for (Eigen::Index g = 0; g < G; ++g) {
      f(g, static_cast<Eigen::Index>(s)) = fs(g);
      y(g, static_cast<Eigen::Index>(s)) = fs(g) + std::exp(grid[g] * dr.delta(i, j) / 2.0) * sd * rng.normal();
    }
  }
  CurveBands b;
  b.grid = grid;
  b.mean = f.rowwise().mean();
  for (Eigen::VectorXd* v : {&b.ci_lo, &b.ci_hi, &b.ppi_lo, &b.ppi_hi}) v->resize(G);
  std::vector<double> buf(n);
  auto band = [&](const Eigen::MatrixXd& m, Eigen::Index g, double& lo, double& hi) {
    for (std::size_t s = 0; s < n; ++s) buf[s] = m(g, static_cast<Eigen::Index>(s));
    std::sort(buf.begin(), buf.end());
    lo = quantile_sorted(buf, 0.025);
    hi = quantile_sorted(buf, 0.975);
  };
  for (Eigen::Index g = 0; g < G; ++g) {
    band(f, g, b.ci_lo(g), b.ci_hi(g));
    band(y, g, b.ppi_lo(g), b.ppi_hi(g));
  }
  return b;
}

/// Map bands back to the raw response scale of the cell.
inline CurveBands to_raw_scale(CurveBands b, const NormalizationRecord& rec) {
  for (Eigen::VectorXd* v : {&b.mean, &b.ci_lo, &b.ci_hi, &b.ppi_lo, &b.ppi_hi})
    *v = (v->array() * rec.scale + rec.location).matrix();
  return b;
}

/// Posterior mean of gamma f at each dose level of every observed cell (normalized scale).
inline std::vector<Eigen::VectorXd> posterior_level_means(const std::vector<Draw>& draws, const FitProblem& pb) {
  if (draws.empty()) throw empty_input_error("no saved draws");
  std::vector<Eigen::VectorXd> out(pb.designs.size());
  for (std::size_t k = 0; k < pb.designs.size(); ++k) {
    if (!pb.designs[k]) continue;
    out[k] = Eigen::VectorXd::Zero(pb.designs[k]->levels());
    const int i = static_cast<int>(k) / pb.J, j = static_cast<int>(k) % pb.J;
    for (const Draw& d : draws)
      if (d.gamma(i, j) == 1) out[k] += pb.designs[k]->level_basis * d.beta[k];
    out[k] /= static_cast<double>(draws.size());
  }
  return out;
}

/// Average over draws of the correlation matrix of Lambda Lambda' + I.
inline Eigen::MatrixXd chemical_correlation(const std::vector<Draw>& draws) {
  if (draws.empty()) throw empty_input_error("no saved draws");
  const auto m = draws.front().gamma.rows();
  Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(m, m);
  for (const Draw& d : draws) {
    if (d.lambda.size() == 0) throw unsupported_variant_error("chemical correlation needs factor-model draws");
    const Eigen::MatrixXd cov = d.lambda * d.lambda.transpose() + Eigen::MatrixXd::Identity(m, m);
    const Eigen::VectorXd inv_sd = cov.diagonal().array().rsqrt();
    acc += inv_sd.asDiagonal() * cov * inv_sd.asDiagonal();
  }
  return acc / static_cast<double>(draws.size());
}

struct CellPrediction {
  int chemical = 0;
  int endpoint = 0;
  double p_gamma = 0.0;
  double p_t = 0.0;
  double p_union = 0.0;
};

/// Posterior activity of cells that were masked (had no data) during fitting.
inline std::vector<CellPrediction> predict_cells(const ActivitySummary& s, const CellMask& mask) {
  if (mask.size() != s.observed.size()) throw invalid_mask_error("mask does not match the fitted grid");
  std::vector<CellPrediction> out;
  for (int i = 0; i < s.m; ++i)
    for (int j = 0; j < s.J; ++j) {
      const std::size_t k = s.index(i, j);
      if (!mask[k]) continue;
      if (s.observed[k])
        throw invalid_mask_error("masked cell (" + std::to_string(i) + ", " + std::to_string(j) + ") had data during fitting");
      out.push_back({i, j, s.p_gamma(i, j), s.p_t(i, j), s.p_union(i, j)});
    }
  return out;
}

// ---------------------------------------------------------------------------
// CSV writers

inline void write_activity_probs(const ActivitySummary& s, const Dataset& data, std::ostream& out) {
  out << "chemical,endpoint,p_gamma,p_t,p_kappa,p_union,p_kappa_union,held_out\n";
  for (int i = 0; i < s.m; ++i)
    for (int j = 0; j < s.J; ++j)
      out << csv::quote(data.chemical_names()[i]) << ',' << csv::quote(data.endpoint_names()[j]) << ','
          << csv::format_double(s.p_gamma(i, j)) << ',' << csv::format_double(s.p_t(i, j)) << ','
          << csv::format_double(s.p_kappa(i, j)) << ',' << csv::format_double(s.p_union(i, j)) << ','
          << csv::format_double(s.p_kappa_union(i, j)) << ',' << (s.held_out[s.index(i, j)] ? 1 : 0) << '\n';
}

inline void write_rankings(const std::vector<RankEntry>& r, const Dataset& data, std::ostream& out) {
  out << "rank,chemical,score,endpoints\n";
  int rank = 1;
  for (const RankEntry& e : r)
    out << rank++ << ',' << csv::quote(data.chemical_names()[e.index]) << ','
        << (e.count > 0 ? csv::format_double(e.score) : std::string("NA")) << ',' << e.count << '\n';
}

inline void write_activation_list(const std::vector<RankEntry>& r, const Dataset& data, std::ostream& out) {
  out << "rank,endpoint,score,chemicals\n";
  int rank = 1;
  for (const RankEntry& e : r)
    out << rank++ << ',' << csv::quote(data.endpoint_names()[e.index]) << ',' << csv::format_double(e.score) << ','
        << e.count << '\n';
}

inline void write_correlation(const Eigen::MatrixXd& c, const Dataset& data, std::ostream& out) {
  out << "chemical";
  for (const auto& n : data.chemical_names()) out << ',' << csv::quote(n);
  out << '\n';
  for (Eigen::Index i = 0; i < c.rows(); ++i) {
    out << csv::quote(data.chemical_names()[i]);
    for (Eigen::Index j = 0; j < c.cols(); ++j) out << ',' << csv::format_double(c(i, j));
    out << '\n';
  }
}

inline void write_curve(const CurveBands& b, std::ostream& out) {
  out << "grid,mean,ci_lo,ci_hi,ppi_lo,ppi_hi\n";
  for (std::size_t g = 0; g < b.grid.size(); ++g) {
    const auto e = static_cast<Eigen::Index>(g);
    out << csv::format_double(b.grid[g]) << ',' << csv::format_double(b.mean(e)) << ',' << csv::format_double(b.ci_lo(e))
        << ',' << csv::format_double(b.ci_hi(e)) << ',' << csv::format_double(b.ppi_lo(e)) << ','
        << csv::format_double(b.ppi_hi(e)) << '\n';
  }
}

inline void write_predictions(const std::vector<CellPrediction>& p, const Dataset& data, std::ostream& out) {
  out << "chemical,endpoint,p_gamma,p_t,p_union\n";
  for (const CellPrediction& c : p)
    out << csv::quote(data.chemical_names()[c.chemical]) << ',' << csv::quote(data.endpoint_names()[c.endpoint]) << ','
        << csv::format_double(c.p_gamma) << ',' << csv::format_double(c.p_t) << ',' << csv::format_double(c.p_union)
        << '\n';
}

}  // namespace bmc
