#pragma once

// Partially collapsed Gibbs sampler with a Metropolis step for (t, delta).
//
// Sweep order:
//   alpha | U
//   (t, delta) | everything but U          (Metropolis, U integrated out)
//   U | t
//   reweight the data by exp(-x delta / 2)
//   lambda, eta, xi | Z, U
//   gamma | everything but Z and beta      (both integrated out)
//   Z | gamma
//   phi, zeta | Lambda
//   beta | gamma = 1
//   Sigma_j | beta
//   sigma_j^2 | beta, gamma
// Each augmentation is redrawn right after the indicator it was integrated
// out of, so sign(z) = gamma and sign(u) = t hold at the end of every sweep.

#include <cmath>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Dense>

#include "bmc/config.hpp"
#include "bmc/curve_noise.hpp"
#include "bmc/data_model.hpp"
#include "bmc/errors.hpp"
#include "bmc/mean_activity.hpp"
#include "bmc/spline_basis.hpp"
#include "bmc/stochastic.hpp"
#include "bmc/variance_activity.hpp"

namespace bmc {

/// Everything the sampler reads but never changes: designs and resolved hyperparameters.
struct FitProblem {
  int m = 0;
  int J = 0;
  int p = 0;
  std::vector<std::optional<CellDesign>> designs;  // row-major, nullopt when missing
  CellMask latent;                                 // cells whose z/u enter the factor updates
  std::vector<std::vector<int>> endpoint_cells;    // observed chemicals per endpoint
  CurveHyper curve;
  double v_delta = 1.0;
  VDeltaEstimate v_delta_estimate;

  std::size_t index(int i, int j) const { return static_cast<std::size_t>(i) * J + j; }
  bool observed(std::size_t k) const { return designs[k].has_value(); }
};

inline double response_sample_variance(const Dataset& data) {
  double s = 0.0, s2 = 0.0, n = 0.0;
  for (const auto& c : data.cells())
    for (const auto& o : c.observations) {
      s += o.response;
      s2 += o.response * o.response;
      n += 1.0;
    }
  if (n < 2.0) return 1.0;
  const double v = (s2 - s * s / n) / (n - 1.0);
  return v > 0.0 ? v : 1.0;
}

inline void finish_problem(FitProblem& pb, const Config& config) {
  pb.latent.assign(static_cast<std::size_t>(pb.m) * pb.J, 1);
  if (config.latent_cells == LatentCells::observed)
    for (std::size_t k = 0; k < pb.latent.size(); ++k) pb.latent[k] = pb.observed(k) ? 1 : 0;
  pb.endpoint_cells.assign(static_cast<std::size_t>(pb.J), {});
  for (int i = 0; i < pb.m; ++i)
    for (int j = 0; j < pb.J; ++j)
      if (pb.observed(pb.index(i, j))) pb.endpoint_cells[j].push_back(i);
}

/// Build designs and resolve data-driven hyperparameters for a normalized dataset.
inline FitProblem prepare_problem(const Dataset& normalized, const Config& config) {
  config.validate();
  FitProblem pb;
  pb.m = normalized.m();
  pb.J = normalized.J();
  if (normalized.observed_count() == 0) throw empty_input_error("dataset has no observed cells");
  pb.designs = build_designs(normalized);
  for (const auto& d : pb.designs) {
    if (!d) continue;
    if (pb.p == 0) pb.p = d->p();
    if (d->p() != pb.p) throw degenerate_design_error("cells disagree on spline dimension");
  }

  pb.curve.a = config.curve.wishart_df.value_or(pb.p + 2.0);
  if (config.curve.R) {
    pb.curve.R = *config.curve.R;
    if (pb.curve.R.rows() != pb.p || pb.curve.R.cols() != pb.p)
      throw invalid_argument("config: R must be p x p with p = " + std::to_string(pb.p));
  } else {
    std::vector<Eigen::VectorXd> coefs;
    for (std::size_t k = 0; k < pb.designs.size(); ++k)
      if (pb.designs[k]) coefs.push_back(ols_coefficients(normalized.cells()[k], expanded_basis(*pb.designs[k])));
    pb.curve.R = empirical_R(coefs);
  }
  if (!(pb.curve.a > pb.p - 1.0)) throw invalid_argument("config: Wishart df must exceed p - 1");
  pb.curve.nu0 = config.curve.nu0;
  pb.curve.sigma0_sq = config.curve.sigma0_sq.value_or(response_sample_variance(normalized));
  pb.v_delta_estimate = compute_v_delta(normalized);
  pb.v_delta = config.v_delta.value_or(pb.v_delta_estimate.value);
  finish_problem(pb, config);
  return pb;
}

struct SamplerState {
  MeanActivityState mean;
  VarActivityState var;
  CurveState curve;
  Eigen::VectorXd variant_pi;  // size 1, m or J under the simpler priors
  double pi_t = 0.5;
  std::vector<WeightedMoments> moments;  // per observed cell, for the current delta
};

/// Recompute weighted moments for every observed cell.
inline void reset_moments(const FitProblem& pb, SamplerState& s) {
  s.moments.assign(pb.designs.size(), WeightedMoments{});
  for (std::size_t k = 0; k < pb.designs.size(); ++k)
    if (pb.designs[k]) s.moments[k] = weighted_moments(*pb.designs[k], s.var.delta(static_cast<Eigen::Index>(k) / pb.J, static_cast<Eigen::Index>(k) % pb.J));
}

/// Starting point: ridge-OLS coefficients, pooled residual variances, prior-centred
/// Sigma_j and small random factors; indicators start at gamma ~ Bernoulli(1/2), t = 0.
inline SamplerState init_state(const FitProblem& pb, const Config& config, RngStream& rng) {
  const int m = pb.m, J = pb.J, p = pb.p, q = config.mean.q;
  SamplerState s;

  s.curve.beta.assign(pb.designs.size(), Eigen::VectorXd::Zero(p));
  s.curve.sigma.assign(J, Eigen::MatrixXd());
  s.curve.precision.assign(J, Eigen::MatrixXd());
  s.curve.log_det_precision.assign(J, 0.0);
  s.curve.noise_var = Eigen::VectorXd::Constant(J, pb.curve.sigma0_sq);

  std::vector<double> rss(J, 0.0), dof(J, 0.0);
  for (std::size_t k = 0; k < pb.designs.size(); ++k) {
    if (!pb.designs[k]) continue;
    const CellDesign& d = *pb.designs[k];
    const WeightedMoments w = weighted_moments(d, 0.0);
    const Eigen::MatrixXd ridged = w.xtx + kOlsRidge * Eigen::MatrixXd::Identity(p, p);
    s.curve.beta[k] = ridged.ldlt().solve(w.xty);
    rss[d.endpoint] += weighted_rss(w, &s.curve.beta[k]);
    dof[d.endpoint] += std::max(0.0, d.total_count() - p);
  }
  for (int j = 0; j < J; ++j)
    if (dof[j] > 0.0 && rss[j] > 0.0) s.curve.noise_var(j) = rss[j] / dof[j];

  const Eigen::MatrixXd sigma0 = pb.curve.a > p + 1.0 ? Eigen::MatrixXd(pb.curve.R / (pb.curve.a - p - 1.0)) : pb.curve.R;
  const Eigen::MatrixXd omega0 = sigma0.llt().solve(Eigen::MatrixXd::Identity(p, p));
  for (int j = 0; j < J; ++j) s.curve.set_precision(j, omega0);

  MeanActivityState& ma = s.mean;
  ma.lambda.resize(m, q);
  ma.eta.resize(J, q);
  for (int i = 0; i < m; ++i)
    for (int l = 0; l < q; ++l) ma.lambda(i, l) = 0.2 * rng.normal();
  for (int j = 0; j < J; ++j)
    for (int l = 0; l < q; ++l) ma.eta(j, l) = 0.2 * rng.normal();
  ma.xi = config.mean.mu_xi;
  ma.phi = Eigen::MatrixXd::Ones(m, q);
  ma.zeta = Eigen::VectorXd::Ones(q);
  ma.tau = Eigen::VectorXd::Ones(q);
  ma.gamma.resize(m, J);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < J; ++j) ma.gamma(i, j) = rng.bernoulli(0.5) ? 1 : 0;
  ma.z = Eigen::MatrixXd::Zero(m, J);

  VarActivityState& va = s.var;
  va.alpha = config.alpha.mean;
  va.t = IndicatorMatrix::Zero(m, J);
  va.delta = Eigen::MatrixXd::Zero(m, J);
  va.u = Eigen::MatrixXd::Zero(m, J);
  va.v_delta = pb.v_delta;

  if (config.variant == PriorVariant::factor) {
    update_z(ma, rng);
    update_u(va, factor_products(ma), rng);
  } else {
    ma.lambda.setZero();
    ma.eta.setZero();
  }
  switch (config.variant) {
    case PriorVariant::bmc0: s.variant_pi = Eigen::VectorXd::Constant(1, 0.5); break;
    case PriorVariant::bmc_i: s.variant_pi = Eigen::VectorXd::Constant(m, 0.5); break;
    case PriorVariant::bmc_j: s.variant_pi = Eigen::VectorXd::Constant(J, 0.5); break;
    case PriorVariant::factor: break;
  }
  reset_moments(pb, s);
  return s;
}

/// Simpler priors for gamma: conjugate Beta(1, 1) updates of a global, per-chemical or
/// per-endpoint activity probability, plus the global variance-effect probability.
/// Returns the m x J matrix of prior activity probabilities for the gamma step.
inline Eigen::MatrixXd update_variant_priors(SamplerState& s, const Config& config, RngStream& rng) {
  const IndicatorMatrix& g = s.mean.gamma;
  const auto m = g.rows(), J = g.cols();
  Eigen::MatrixXd prob(m, J);
  switch (config.variant) {
    case PriorVariant::bmc0: {
      const double ones = g.sum();
      s.variant_pi(0) = rng.beta(1.0 + ones, 1.0 + static_cast<double>(m * J) - ones);
      prob.setConstant(s.variant_pi(0));
      break;
    }
    case PriorVariant::bmc_i:
      for (Eigen::Index i = 0; i < m; ++i) {
        const double ones = g.row(i).sum();
        s.variant_pi(i) = rng.beta(1.0 + ones, 1.0 + static_cast<double>(J) - ones);
        prob.row(i).setConstant(s.variant_pi(i));
      }
      break;
    case PriorVariant::bmc_j:
      for (Eigen::Index j = 0; j < J; ++j) {
        const double ones = g.col(j).sum();
        s.variant_pi(j) = rng.beta(1.0 + ones, 1.0 + static_cast<double>(m) - ones);
        prob.col(j).setConstant(s.variant_pi(j));
      }
      break;
    case PriorVariant::factor:
      throw unsupported_variant_error("variant priors requested for the factor model");
  }
  return prob;
}

/// pi_t ~ Beta(1 + sum t, 1 + N - sum t).
inline void update_variance_effect_probability(SamplerState& s, RngStream& rng) {
  const double ones = s.var.t.sum();
  s.pi_t = rng.beta(1.0 + ones, 1.0 + static_cast<double>(s.var.t.size()) - ones);
}

struct SweepStats {
  AcceptanceCount t_delta;
};

namespace detail {

[[noreturn]] inline void abort_chain(const std::string& what, const SamplerState& s, int i, int j) {
  std::ostringstream os;
  os << "chain aborted: " << what;
  if (i >= 0) os << " at cell (" << i << ", " << j << ")";
  os << "; xi=" << s.mean.xi << " alpha=(" << s.var.alpha(0) << ", " << s.var.alpha(1) << ")";
  if (j >= 0 && j < s.curve.noise_var.size()) os << " sigma2_j=" << s.curve.noise_var(j);
  if (i >= 0 && j >= 0) os << " delta=" << s.var.delta(i, j) << " t=" << s.var.t(i, j) << " gamma=" << s.mean.gamma(i, j);
  throw chain_abort(os.str());
}

}  // namespace detail

/// Variance block: alpha, (t, delta), U, then refresh weighted moments.
inline void variance_block(const FitProblem& pb, const Config& config, SamplerState& s, const Eigen::MatrixXd& fp,
                           RngStream& rng, SweepStats& stats) {
  const bool factor = config.variant == PriorVariant::factor;
  if (factor) update_alpha(s.var, fp, pb.latent, config.alpha, rng);

  Eigen::MatrixXd lin;
  if (factor) lin = variance_linear_predictor(s.var.alpha, fp);
  auto log_probs = [&](int i, int j) -> std::pair<double, double> {
    if (factor) return {log_normal_cdf(lin(i, j)), log_normal_cdf(-lin(i, j))};
    return {std::log(s.pi_t), std::log1p(-s.pi_t)};
  };

  TDeltaCellContext ctx;
  ctx.v_delta = pb.v_delta;
  for (int j = 0; j < pb.J; ++j) {
    const auto& cells = pb.endpoint_cells[j];
    const auto flips = choose_flips(cells, config.mh.flip_fraction, rng);
    ctx.sigma2 = s.curve.noise_var(j);
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const int i = cells[c];
      const std::size_t k = pb.index(i, j);
      ctx.design = &*pb.designs[k];
      ctx.level_rss = level_residual_ss(*ctx.design, s.mean.gamma(i, j) == 1 ? &s.curve.beta[k] : nullptr);
      std::tie(ctx.log_prob_t1, ctx.log_prob_t0) = log_probs(i, j);
      int t = s.var.t(i, j);
      double delta = s.var.delta(i, j);
      t_delta_cell_step(ctx, t, delta, flips[c] != 0, config.mh, rng, stats.t_delta);
      s.var.t(i, j) = t;
      s.var.delta(i, j) = delta;
    }
  }
  // Cells without data draw (t, delta) from their prior exactly.
  for (int i = 0; i < pb.m; ++i)
    for (int j = 0; j < pb.J; ++j) {
      if (pb.observed(pb.index(i, j))) continue;
      const double p1 = std::exp(log_probs(i, j).first);
      const bool t = rng.uniform() < p1;
      s.var.t(i, j) = t ? 1 : 0;
      s.var.delta(i, j) = t ? std::sqrt(pb.v_delta) * rng.normal() : 0.0;
    }

  if (factor) update_u(s.var, fp, rng);
  else update_variance_effect_probability(s, rng);

  for (std::size_t k = 0; k < pb.designs.size(); ++k) {
    if (!pb.designs[k]) continue;
    const double delta = s.var.delta(static_cast<Eigen::Index>(k) / pb.J, static_cast<Eigen::Index>(k) % pb.J);
    if (s.moments[k].delta != delta || s.moments[k].xtx.size() == 0) s.moments[k] = weighted_moments(*pb.designs[k], delta);
  }
}

/// Mean block: factor updates (or the simpler priors), collapsed gamma, Z, MGP.
inline void mean_block(const FitProblem& pb, const Config& config, SamplerState& s, RngStream& rng) {
  const bool factor = config.variant == PriorVariant::factor;
  Eigen::MatrixXd prob;
  if (factor) {
    update_lambda(s.mean, s.var.alpha, s.var.u, pb.latent, rng);
    update_eta(s.mean, s.var.alpha, s.var.u, pb.latent, rng);
    update_xi(s.mean, config.mean, pb.latent, rng);
    prob = activity_probability(s.mean);
  } else {
    prob = update_variant_priors(s, config, rng);
  }

  const Eigen::MatrixXd bf = activity_log_bayes_factors(pb.designs, s.moments, s.curve, pb.m, pb.J);
  for (int i = 0; i < pb.m; ++i)
    for (int j = 0; j < pb.J; ++j)
      if (pb.observed(pb.index(i, j)) && !std::isfinite(bf(i, j)))
        detail::abort_chain("non-finite collapsed log likelihood ratio", s, i, j);
  update_gamma_given_bf(s.mean.gamma, prob, bf, rng);

  if (factor) {
    update_z(s.mean, rng);
    update_mgp(s.mean, config.mean, rng);
  }
}

/// Curve block: beta for active cells, Sigma_j, sigma_j^2.
inline void curve_block(const FitProblem& pb, const Config& config, SamplerState& s, RngStream& rng) {
  const bool count_all = config.sigma_count == SigmaCount::all;
  for (int i = 0; i < pb.m; ++i)
    for (int j = 0; j < pb.J; ++j) {
      const std::size_t k = pb.index(i, j);
      if (pb.observed(k) && s.mean.gamma(i, j) == 1)
        s.curve.beta[k] = update_beta(s.moments[k], s.curve.precision[j], s.curve.noise_var(j), rng);
      else if (count_all)
        s.curve.beta[k] = sample_beta_prior(s.curve.precision[j], rng);
    }

  std::vector<const Eigen::VectorXd*> betas;
  for (int j = 0; j < pb.J; ++j) {
    betas.clear();
    for (int i = 0; i < pb.m; ++i) {
      const std::size_t k = pb.index(i, j);
      if (count_all || (pb.observed(k) && s.mean.gamma(i, j) == 1)) betas.push_back(&s.curve.beta[k]);
    }
    update_sigma_endpoint(j, s.curve, betas, pb.curve, rng);
  }

  for (int j = 0; j < pb.J; ++j) {
    NoiseSuffStats ss;
    for (int i : pb.endpoint_cells[j]) {
      const std::size_t k = pb.index(i, j);
      ss.n += pb.designs[k]->total_count();
      ss.rss += weighted_rss(s.moments[k], s.mean.gamma(i, j) == 1 ? &s.curve.beta[k] : nullptr);
    }
    const double v = update_noise_var(ss, pb.curve, rng);
    if (!(std::isfinite(v) && v > 0.0)) detail::abort_chain("non-finite endpoint noise variance", s, -1, j);
    s.curve.noise_var(j) = v;
  }
}

/// One full sweep of the sampler.
inline SweepStats sweep(const FitProblem& pb, const Config& config, SamplerState& s, RngStream& rng) {
  SweepStats stats;
  const Eigen::MatrixXd fp = config.variant == PriorVariant::factor ? factor_products(s.mean)
                                                                    : Eigen::MatrixXd::Zero(pb.m, pb.J);
  variance_block(pb, config, s, fp, rng, stats);
  mean_block(pb, config, s, rng);
  curve_block(pb, config, s, rng);
  if (!std::isfinite(s.mean.xi) || !s.var.alpha.allFinite()) detail::abort_chain("non-finite global parameter", s, -1, -1);
  return stats;
}

// ---------------------------------------------------------------------------
// Chains

/// One saved draw of every summarized quantity.
struct Draw {
  int chain = 0;
  int iteration = 0;
  double xi = 0.0;
  Eigen::Vector2d alpha = Eigen::Vector2d::Zero();
  IndicatorMatrix gamma;
  IndicatorMatrix t;
  Eigen::MatrixXd delta;
  Eigen::MatrixXd lambda;  // empty for the simpler priors
  Eigen::MatrixXd eta;
  Eigen::VectorXd noise_var;
  Eigen::VectorXd sigma_trace;          // trace of Sigma_j
  std::vector<Eigen::VectorXd> beta;    // per cell; empty unless observed and gamma = 1
  Eigen::VectorXd variant_pi;
  double pi_t = 0.0;
};

inline Draw snapshot(const FitProblem& pb, const Config& config, const SamplerState& s, int chain, int iteration) {
  Draw d;
  d.chain = chain;
  d.iteration = iteration;
  d.xi = s.mean.xi;
  d.alpha = s.var.alpha;
  d.gamma = s.mean.gamma;
  d.t = s.var.t;
  d.delta = s.var.delta;
  if (config.variant == PriorVariant::factor) {
    d.lambda = s.mean.lambda;
    d.eta = s.mean.eta;
  }
  d.noise_var = s.curve.noise_var;
  d.sigma_trace.resize(pb.J);
  for (int j = 0; j < pb.J; ++j) d.sigma_trace(j) = s.curve.sigma[j].trace();
  d.beta.assign(pb.designs.size(), Eigen::VectorXd());
  for (std::size_t k = 0; k < pb.designs.size(); ++k)
    if (pb.observed(k) && s.mean.gamma(static_cast<Eigen::Index>(k) / pb.J, static_cast<Eigen::Index>(k) % pb.J) == 1)
      d.beta[k] = s.curve.beta[k];
  d.variant_pi = s.variant_pi;
  d.pi_t = s.pi_t;
  return d;
}

class DrawSink {
 public:
  virtual ~DrawSink() = default;
  virtual void write(const Draw& draw) = 0;
};

struct ChainOutput {
  Config config;
  int m = 0;
  int J = 0;
  int p = 0;
  std::vector<Draw> draws;
  AcceptanceCount t_delta;
  double v_delta = 0.0;
  std::vector<std::string> warnings;
};

class MemorySink : public DrawSink {
 public:
  explicit MemorySink(std::vector<Draw>& out) : out_(out) {}
  void write(const Draw& draw) override { out_.push_back(draw); }

 private:
  std::vector<Draw>& out_;
};

inline constexpr double kAcceptanceLow = 0.05;
inline constexpr double kAcceptanceHigh = 0.8;

using ProgressCallback = std::function<void(int iteration)>;

/// Run one chain, streaming thinned post-burn-in draws into `sink`. The
/// returned output carries metadata only; its draws stay empty.
inline ChainOutput run_chain(const FitProblem& pb, const Config& config, RngStream& rng, DrawSink& sink,
                             int chain_id = 0, const ProgressCallback& progress = {}) {
  config.validate();
  ChainOutput out;
  out.config = config;
  out.m = pb.m;
  out.J = pb.J;
  out.p = pb.p;
  out.v_delta = pb.v_delta;
  if (pb.v_delta_estimate.fallback && !config.v_delta)
    out.warnings.push_back("no cell has replicated doses; v_delta falls back to the response sample variance");

  SamplerState s = init_state(pb, config, rng);
  const Schedule& sched = config.schedule;
  for (int it = 1; it <= sched.iterations; ++it) {
    const SweepStats st = sweep(pb, config, s, rng);
    out.t_delta += st.t_delta;
    if (it > sched.burnin && (it - sched.burnin) % sched.thin == 0) sink.write(snapshot(pb, config, s, chain_id, it));
    if (progress) progress(it);
  }
  const double rate = out.t_delta.rate();
  if (out.t_delta.proposed > 0 && (rate <= kAcceptanceLow || rate >= kAcceptanceHigh)) {
    std::ostringstream os;
    os << "(t, delta) acceptance rate " << rate << " outside (" << kAcceptanceLow << ", " << kAcceptanceHigh
       << "); consider tuning mh.delta_scale";
    out.warnings.push_back(os.str());
  }
  return out;
}

/// Run one chain keeping all draws in memory.
inline ChainOutput run_chain(const FitProblem& pb, const Config& config, RngStream& rng, int chain_id = 0) {
  std::vector<Draw> draws;
  MemorySink sink(draws);
  ChainOutput out = run_chain(pb, config, rng, sink, chain_id);
  out.draws = std::move(draws);
  return out;
}

inline ChainOutput run_chain(const Dataset& normalized, const Config& config) {
  const FitProblem pb = prepare_problem(normalized, config);
  RngStream rng(config.seed, 0);
  return run_chain(pb, config, rng);
}

}  // namespace bmc
