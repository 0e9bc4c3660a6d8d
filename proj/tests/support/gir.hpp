#pragma once

// Joint-distribution check on a tiny instance: independent draws from the prior
// against a successive-conditional chain that alternates "simulate data given
// parameters" with one sampler sweep. Both have the prior as their marginal.

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "bmc/sampler.hpp"

namespace bmc::gir {

struct Moment {
  std::string name;
  double prior_mean = 0.0;
  double prior_se = 0.0;
  double chain_mean = 0.0;
  double chain_se = 0.0;

  double z() const { return (chain_mean - prior_mean) / std::sqrt(prior_se * prior_se + chain_se * chain_se); }
};

inline constexpr int kM = 3, kJ = 4, kQ = 2;

inline Config tiny_config() {
  Config c;
  c.mean.q = kQ;
  c.curve.R = Eigen::MatrixXd::Identity(7, 7);
  c.curve.nu0 = 20.0;
  c.curve.sigma0_sq = 0.5;
  c.v_delta = 1.0;
  c.schedule = {2, 1, 1};
  return c;
}

/// 3 x 4 grid, six distinct doses per cell, one missing cell.
inline Dataset tiny_dataset() {
  const std::vector<double> doses{0.0, 0.4, 0.8, 1.2, 1.6, 2.0};
  std::vector<CellData> cells;
  for (int i = 0; i < kM; ++i)
    for (int j = 0; j < kJ; ++j) {
      CellData c{i, j, {}};
      if (!(i == 0 && j == 0))
        for (double x : doses) c.observations.push_back({x, 0.1 * (i - j) + x});
      cells.push_back(c);
    }
  return Dataset({"a", "b", "c"}, {"e1", "e2", "e3", "e4"}, cells);
}

struct Quantities {
  double xi, alpha0, sigma1, gamma_mean, t_mean, delta_sq;
};

inline Quantities prior_draw(const Config& c, RngStream& rng) {
  const MeanActivityHyper& h = c.mean;
  Eigen::VectorXd tau(kQ);
  double prod = 1.0;
  for (int l = 0; l < kQ; ++l) {
    prod *= rng.gamma(l == 0 ? h.a1 : h.a2, 1.0);
    tau(l) = prod;
  }
  Eigen::MatrixXd lambda(kM, kQ), eta(kJ, kQ);
  for (int i = 0; i < kM; ++i)
    for (int l = 0; l < kQ; ++l) lambda(i, l) = rng.normal() / std::sqrt(rng.gamma(h.nu / 2.0, h.nu / 2.0) * tau(l));
  for (int j = 0; j < kJ; ++j)
    for (int l = 0; l < kQ; ++l) eta(j, l) = rng.normal();
  const double xi = h.mu_xi + std::sqrt(h.var_xi) * rng.normal();
  const Eigen::Vector2d alpha = c.alpha.mean + c.alpha.cov.llt().matrixL() * Eigen::Vector2d(rng.normal(), rng.normal());
  double ones = 0.0, t_ones = 0.0, d2 = 0.0;
  for (int i = 0; i < kM; ++i)
    for (int j = 0; j < kJ; ++j) {
      const double mij = lambda.row(i).dot(eta.row(j));
      ones += xi + mij + rng.normal() > 0.0 ? 1.0 : 0.0;
      if (alpha(0) + alpha(1) * mij + rng.normal() > 0.0) {
        t_ones += 1.0;
        const double d = std::sqrt(*c.v_delta) * rng.normal();
        d2 += d * d;
      }
    }
  const double sigma1 = 1.0 / rng.gamma(c.curve.nu0 / 2.0, c.curve.nu0 * *c.curve.sigma0_sq / 2.0);
  const double n = kM * kJ;
  return {xi, alpha(0), sigma1, ones / n, t_ones / n, d2 / n};
}

/// Replace every observed cell's responses with a draw from the likelihood at state s.
inline void regenerate_data(FitProblem& pb, const SamplerState& s, RngStream& rng) {
  for (int i = 0; i < pb.m; ++i)
    for (int j = 0; j < pb.J; ++j) {
      auto& d = pb.designs[pb.index(i, j)];
      if (!d) continue;
      const bool active = s.mean.gamma(i, j) == 1;
      for (int l = 0; l < d->levels(); ++l) {
        const double f = active ? d->level_basis.row(l).dot(s.curve.beta[pb.index(i, j)]) : 0.0;
        const double sd = std::sqrt(s.curve.noise_var(j) * std::exp(d->level_dose(l) * s.var.delta(i, j)));
        double sy = 0.0, sy2 = 0.0;
        for (int r = 0; r < static_cast<int>(d->count(l)); ++r) {
          const double y = f + sd * rng.normal();
          sy += y;
          sy2 += y * y;
        }
        d->sum_y(l) = sy;
        d->sum_y2(l) = sy2;
      }
    }
}

inline void mean_and_se(const std::vector<double>& x, int batches, double& mean, double& se) {
  const int n = static_cast<int>(x.size()), b = n / batches;
  mean = 0.0;
  for (double v : x) mean += v / n;
  double ss = 0.0;
  for (int k = 0; k < batches; ++k) {
    double bm = 0.0;
    for (int r = 0; r < b; ++r) bm += x[static_cast<std::size_t>(k * b + r)] / b;
    ss += (bm - mean) * (bm - mean);
  }
  se = std::sqrt(ss / (batches - 1.0) / batches);
}

/// The first four moments are the required ones; mean(T) and mean(delta^2)
/// additionally exercise the Metropolis step.
inline std::vector<Moment> run(int draws, std::uint64_t seed, const Config& config = tiny_config()) {
  FitProblem pb = prepare_problem(tiny_dataset(), config);
  RngStream prior_rng(seed, 1), chain_rng(seed, 2);

  std::vector<std::vector<double>> prior(6), chain(6);
  for (int k = 0; k < draws; ++k) {
    const Quantities q = prior_draw(config, prior_rng);
    for (auto [v, x] : {std::pair{0, q.xi}, {1, q.alpha0}, {2, q.sigma1}, {3, q.gamma_mean}, {4, q.t_mean}, {5, q.delta_sq}})
      prior[v].push_back(x);
  }

  SamplerState s = init_state(pb, config, chain_rng);
  const int warmup = 500;
  for (int k = 0; k < draws + warmup; ++k) {
    regenerate_data(pb, s, chain_rng);
    reset_moments(pb, s);
    sweep(pb, config, s, chain_rng);
    if (k < warmup) continue;
    chain[0].push_back(s.mean.xi);
    chain[1].push_back(s.var.alpha(0));
    chain[2].push_back(s.curve.noise_var(0));
    chain[3].push_back(s.mean.gamma.cast<double>().mean());
    chain[4].push_back(s.var.t.cast<double>().mean());
    chain[5].push_back(s.var.delta.array().square().mean());
  }

  const char* names[] = {"xi", "alpha0", "sigma1_sq", "mean_gamma", "mean_t", "mean_delta_sq"};
  std::vector<Moment> out;
  for (int v = 0; v < 6; ++v) {
    Moment mo;
    mo.name = names[v];
    mean_and_se(prior[v], draws, mo.prior_mean, mo.prior_se);
    mean_and_se(chain[v], 50, mo.chain_mean, mo.chain_se);
    out.push_back(mo);
  }
  return out;
}

}  // namespace bmc::gir
