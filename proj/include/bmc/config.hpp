#pragma once

// Run configuration and its JSON form. Every field has a default, so an empty
// JSON object is a complete configuration.

#include <cstdint>
#include <fstream>
#include <optional>
#include <string>

#include <Eigen/Dense>

#include "json.hpp"

#include "bmc/data_model.hpp"
#include "bmc/errors.hpp"
#include "bmc/mean_activity.hpp"
#include "bmc/variance_activity.hpp"

namespace bmc {

enum class PriorVariant { factor, bmc0, bmc_i, bmc_j };
enum class LatentCells { all, observed };
enum class SigmaCount { active, all };

struct Schedule {
  int iterations = 20000;
  int burnin = 10000;
  int thin = 10;

  int saved() const { return (iterations - burnin) / thin; }
};

struct CurveConfig {
  std::optional<double> wishart_df;        // default p + 2
  std::optional<Eigen::MatrixXd> R;        // default: empirical covariance of OLS fits
  double nu0 = 1.0;
  std::optional<double> sigma0_sq;         // default: sample variance of responses
};

struct Config {
  MeanActivityHyper mean;
  AlphaPrior alpha;
  CurveConfig curve;
  std::optional<double> v_delta;           // default: range rule
  TDeltaProposal mh;
  Schedule schedule;
  PriorVariant variant = PriorVariant::factor;
  LatentCells latent_cells = LatentCells::all;
  SigmaCount sigma_count = SigmaCount::active;
  NormalizationMode normalization = NormalizationMode::endpoint;
  std::uint64_t seed = 1;
  int chains = 1;

  void validate() const {
    if (mean.q < 1) throw invalid_argument("config: q must be at least 1");
    if (schedule.thin < 1) throw invalid_argument("config: thin must be at least 1");
    if (schedule.burnin < 0 || schedule.burnin >= schedule.iterations)
      throw invalid_argument("config: burnin must be below iterations");
    if (!(mean.var_xi > 0.0)) throw invalid_argument("config: xi prior variance must be positive");
    if (!(curve.nu0 > 0.0)) throw invalid_argument("config: nu0 must be positive");
    if (curve.sigma0_sq && !(*curve.sigma0_sq > 0.0)) throw invalid_argument("config: sigma0_sq must be positive");
    if (v_delta && !(*v_delta > 0.0)) throw invalid_argument("config: v_delta must be positive");
    if (!(mh.scale > 0.0) || !(mh.df > 0.0)) throw invalid_argument("config: bad delta proposal");
    if (!(mh.flip_fraction > 0.0)) throw invalid_argument("config: flip_fraction must be positive");
    Eigen::LLT<Eigen::Matrix2d> llt(alpha.cov);
    if (llt.info() != Eigen::Success) throw invalid_argument("config: alpha prior covariance must be positive definite");
    if (chains < 1) throw invalid_argument("config: chains must be at least 1");
  }
};

inline const char* to_string(PriorVariant v) {
  switch (v) {
    case PriorVariant::factor: return "factor";
    case PriorVariant::bmc0: return "bmc0";
    case PriorVariant::bmc_i: return "bmc_i";
    case PriorVariant::bmc_j: return "bmc_j";
  }
  return "factor";
}

inline PriorVariant parse_variant(const std::string& s) {
  if (s == "factor" || s == "bmc") return PriorVariant::factor;
  if (s == "bmc0") return PriorVariant::bmc0;
  if (s == "bmc_i" || s == "bmci") return PriorVariant::bmc_i;
  if (s == "bmc_j" || s == "bmcj") return PriorVariant::bmc_j;
  throw invalid_argument("unknown prior variant '" + s + "'");
}

using json = nlohmann::json;

namespace detail {

inline json matrix_to_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(row);
  }
  return rows;
}

inline Eigen::MatrixXd matrix_from_json(const json& j) {
  if (!j.is_array() || j.empty()) throw invalid_argument("config: expected a non-empty matrix");
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = static_cast<Eigen::Index>(j.at(0).size());
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    if (static_cast<Eigen::Index>(j.at(r).size()) != cols) throw invalid_argument("config: ragged matrix");
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = j.at(r).at(c).get<double>();
  }
  return m;
}

template <class T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key) && !j.at(key).is_null()) out = j.at(key).get<T>();
}

}  // namespace detail

inline json config_to_json(const Config& c) {
  json j;
  j["q"] = c.mean.q;
  j["mgp"] = {{"nu", c.mean.nu}, {"a1", c.mean.a1}, {"a2", c.mean.a2}};
  j["xi_prior"] = {{"mean", c.mean.mu_xi}, {"var", c.mean.var_xi}};
  j["alpha_prior"] = {{"mean", {c.alpha.mean(0), c.alpha.mean(1)}},
                      {"cov", detail::matrix_to_json(c.alpha.cov)}};
  json curve;
  curve["wishart_df"] = c.curve.wishart_df ? json(*c.curve.wishart_df) : json("p+2");
  curve["R"] = c.curve.R ? detail::matrix_to_json(*c.curve.R) : json("empirical");
  curve["nu0"] = c.curve.nu0;
  curve["sigma0_sq"] = c.curve.sigma0_sq ? json(*c.curve.sigma0_sq) : json("sample_variance");
  j["curve"] = curve;
  j["v_delta"] = c.v_delta ? json(*c.v_delta) : json("range_rule");
  j["mh"] = {{"flip_fraction", c.mh.flip_fraction},
             {"delta_scale", c.mh.scale},
             {"delta_df", c.mh.df},
             {"dimension_correction", c.mh.dimension_correction}};
  j["schedule"] = {{"iterations", c.schedule.iterations}, {"burnin", c.schedule.burnin}, {"thin", c.schedule.thin}};
  j["prior_variant"] = to_string(c.variant);
  j["latent_cells"] = c.latent_cells == LatentCells::all ? "all" : "observed";
  j["sigma_count"] = c.sigma_count == SigmaCount::active ? "active" : "all";
  j["normalization"] = c.normalization == NormalizationMode::cell ? "cell" : "endpoint";
  j["seed"] = c.seed;
  j["chains"] = c.chains;
  return j;
}

inline Config config_from_json(const json& j) {
  Config c;
  if (!j.is_object()) throw invalid_argument("config: top level must be a JSON object");
  detail::read_opt(j, "q", c.mean.q);
  if (j.contains("mgp")) {
    const json& g = j.at("mgp");
    detail::read_opt(g, "nu", c.mean.nu);
    detail::read_opt(g, "a1", c.mean.a1);
    detail::read_opt(g, "a2", c.mean.a2);
  }
  if (j.contains("xi_prior")) {
    detail::read_opt(j.at("xi_prior"), "mean", c.mean.mu_xi);
    detail::read_opt(j.at("xi_prior"), "var", c.mean.var_xi);
  }
  if (j.contains("alpha_prior")) {
    const json& a = j.at("alpha_prior");
    if (a.contains("mean")) c.alpha.mean = Eigen::Vector2d(a.at("mean").at(0).get<double>(), a.at("mean").at(1).get<double>());
    if (a.contains("cov")) c.alpha.cov = detail::matrix_from_json(a.at("cov"));
  }
  if (j.contains("curve")) {
    const json& cv = j.at("curve");
    if (cv.contains("wishart_df") && cv.at("wishart_df").is_number()) c.curve.wishart_df = cv.at("wishart_df").get<double>();
    if (cv.contains("R") && cv.at("R").is_array()) c.curve.R = detail::matrix_from_json(cv.at("R"));
    detail::read_opt(cv, "nu0", c.curve.nu0);
    if (cv.contains("sigma0_sq") && cv.at("sigma0_sq").is_number()) c.curve.sigma0_sq = cv.at("sigma0_sq").get<double>();
  }
  if (j.contains("v_delta") && j.at("v_delta").is_number()) c.v_delta = j.at("v_delta").get<double>();
  if (j.contains("mh")) {
    const json& h = j.at("mh");
    detail::read_opt(h, "flip_fraction", c.mh.flip_fraction);
    detail::read_opt(h, "delta_scale", c.mh.scale);
    detail::read_opt(h, "delta_df", c.mh.df);
    detail::read_opt(h, "dimension_correction", c.mh.dimension_correction);
  }
  if (j.contains("schedule")) {
    const json& s = j.at("schedule");
    detail::read_opt(s, "iterations", c.schedule.iterations);
    detail::read_opt(s, "burnin", c.schedule.burnin);
    detail::read_opt(s, "thin", c.schedule.thin);
  }
  if (j.contains("prior_variant")) c.variant = parse_variant(j.at("prior_variant").get<std::string>());
  if (j.contains("latent_cells")) {
    const auto s = j.at("latent_cells").get<std::string>();
    if (s == "all") c.latent_cells = LatentCells::all;
    else if (s == "observed") c.latent_cells = LatentCells::observed;
    else throw invalid_argument("config: latent_cells must be 'all' or 'observed'");
  }
  if (j.contains("sigma_count")) {
    const auto s = j.at("sigma_count").get<std::string>();
    if (s == "active") c.sigma_count = SigmaCount::active;
    else if (s == "all") c.sigma_count = SigmaCount::all;
    else throw invalid_argument("config: sigma_count must be 'active' or 'all'");
  }
  if (j.contains("normalization")) {
    const auto s = j.at("normalization").get<std::string>();
    if (s == "cell") c.normalization = NormalizationMode::cell;
    else if (s == "endpoint") c.normalization = NormalizationMode::endpoint;
    else throw invalid_argument("config: normalization must be 'cell' or 'endpoint'");
  }
  detail::read_opt(j, "seed", c.seed);
  detail::read_opt(j, "chains", c.chains);
  c.validate();
  return c;
}

inline Config load_config(const std::string& path) {
  if (path.empty()) return Config{};
  std::ifstream in(path);
  if (!in) throw invalid_argument("cannot open config " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw invalid_argument(std::string("config: ") + e.what());
  }
  try {
    return config_from_json(j);
  } catch (const json::exception& e) {
    throw invalid_argument(std::string("config: ") + e.what());
  }
}

}  // namespace bmc
