#pragma once

// Seeded random-variate kernels used by the sampler.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>

#include <Eigen/Dense>
#include <boost/math/special_functions/erf.hpp>

#include "bmc/errors.hpp"

namespace bmc {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

/// Standard normal CDF.
inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

/// Upper tail 1 - Phi(x), accurate for large positive x.
inline double normal_ccdf(double x) { return 0.5 * std::erfc(x / std::sqrt(2.0)); }

inline double normal_quantile(double p) {
  return -std::sqrt(2.0) * boost::math::erfc_inv(2.0 * p);
}

/// log Phi(x) without underflow for very negative x.
inline double log_normal_cdf(double x) {
  if (x > -30.0) return std::log(normal_cdf(x));
  // Asymptotic expansion of the Mills ratio.
  const double x2 = x * x;
  return -0.5 * x2 - std::log(-x) - 0.5 * std::log(2.0 * std::numbers::pi) +
         std::log1p(-1.0 / x2 + 3.0 / (x2 * x2));
}

inline double log_normal_pdf(double x, double mean, double var) {
  const double d = x - mean;
  return -0.5 * std::log(2.0 * std::numbers::pi * var) - 0.5 * d * d / var;
}

/// Log density of a location-scale Student-t.
inline double log_student_t_pdf(double x, double df, double location, double scale) {
  const double z = (x - location) / scale;
  return std::lgamma(0.5 * (df + 1.0)) - std::lgamma(0.5 * df) - 0.5 * std::log(df * std::numbers::pi) -
         std::log(scale) - 0.5 * (df + 1.0) * std::log1p(z * z / df);
}

/// A reproducible variate stream identified by (seed, stream_id).
///
/// Streams are values: copy one to fork its exact future, or `split` to get an
/// independent child stream. Do not share one stream between two threads.
class RngStream {
 public:
  using engine_type = std::mt19937_64;

  RngStream(std::uint64_t seed, std::uint64_t stream_id) : seed_(seed), stream_id_(stream_id) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream_id),
                      static_cast<std::uint32_t>(stream_id >> 32), 0x9e3779b9u};
    engine_.seed(seq);
  }

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream_id() const noexcept { return stream_id_; }

  RngStream split(std::uint64_t child) const {
    return RngStream(seed_ ^ (0xd1b54a32d192ed03ULL * (stream_id_ + 1)), child);
  }

  engine_type& engine() noexcept { return engine_; }

  /// Uniform on the open interval (0, 1).
  double uniform() {
    double u;
    do {
      u = std::generate_canonical<double, 53>(engine_);
    } while (u <= 0.0);
    return u;
  }

  double normal() { return normal_(engine_); }

  /// Gamma with shape/rate parameterization.
  double gamma(double shape, double rate) {
    std::gamma_distribution<double> g(shape, 1.0 / rate);
    return g(engine_);
  }

  double beta(double a, double b) {
    const double x = gamma(a, 1.0);
    const double y = gamma(b, 1.0);
    return x / (x + y);
  }

  double student_t(double df) {
    std::student_t_distribution<double> t(df);
    return t(engine_);
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Uniform integer in [lo, hi].
  int uniform_int(int lo, int hi) {
    std::uniform_int_distribution<int> d(lo, hi);
    return d(engine_);
  }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_id_;
  engine_type engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

namespace detail {

// Standard normal restricted to [a, b] with a >= 4 (far right tail).
inline double right_tail_normal(double a, double b, RngStream& rng) {
  const double width = b - a;
  if (std::isfinite(b) && width * a < 1.0) {
    // Narrow window: uniform proposal, envelope at a.
    for (;;) {
      const double z = a + width * rng.uniform();
      if (std::log(rng.uniform()) <= 0.5 * (a * a - z * z)) return z;
    }
  }
  // Exponential proposal with optimal rate.
  const double rate = 0.5 * (a + std::sqrt(a * a + 4.0));
  for (;;) {
    const double z = a - std::log(rng.uniform()) / rate;
    if (z > b) continue;
    const double d = z - rate;
    if (std::log(rng.uniform()) <= -0.5 * d * d) return z;
  }
}

inline double standard_truncated_normal(double a, double b, RngStream& rng) {
  constexpr double kTailSwitch = 4.0;
  if (a >= kTailSwitch) return right_tail_normal(a, b, rng);
  if (b <= -kTailSwitch) return -right_tail_normal(-b, -a, rng);
  const double u = rng.uniform();
  double z;
  if (a > 0.0) {
    const double qa = normal_ccdf(a);
    const double qb = normal_ccdf(b);
    const double q = qa - u * (qa - qb);
    z = std::sqrt(2.0) * boost::math::erfc_inv(2.0 * q);
  } else {
    const double pa = normal_cdf(a);
    const double pb = normal_cdf(b);
    z = normal_quantile(pa + u * (pb - pa));
  }
  return std::clamp(z, a, b);
}

}  // namespace detail

/// Exact draw from N(mu, sigma^2) truncated to (lower, upper).
/// Body draws use the inverse CDF; beyond 4 standard deviations an
/// exponential-rejection sampler keeps far-tail draws exact and fast.
inline double sample_truncated_normal(double mu, double sigma, double lower, double upper,
                                      RngStream& rng) {
  if (!(lower < upper)) throw invalid_argument("truncated normal: lower must be below upper");
  if (!(sigma > 0.0)) throw invalid_argument("truncated normal: sigma must be positive");
  const double a = (lower - mu) / sigma;
  const double b = (upper - mu) / sigma;
  return mu + sigma * detail::standard_truncated_normal(a, b, rng);
}

/// Wishart draw with E[W] = df * scale (Bartlett decomposition).
inline Eigen::MatrixXd sample_wishart(double df, const Eigen::MatrixXd& scale, RngStream& rng) {
  const auto p = scale.rows();
  if (scale.cols() != p) throw invalid_argument("wishart: scale must be square");
  if (!(df > static_cast<double>(p) - 1.0))
    throw invalid_argument("wishart: degrees of freedom must exceed p - 1");
  Eigen::LLT<Eigen::MatrixXd> llt(scale);
  if (llt.info() != Eigen::Success) throw decomposition_error("wishart: scale is not positive definite");
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(p, p);
  for (Eigen::Index i = 0; i < p; ++i) {
    a(i, i) = std::sqrt(rng.gamma(0.5 * (df - static_cast<double>(i)), 0.5));
    for (Eigen::Index j = 0; j < i; ++j) a(i, j) = rng.normal();
  }
  const Eigen::MatrixXd la = llt.matrixL() * a;
  Eigen::MatrixXd w = la * la.transpose();
  return 0.5 * (w + w.transpose());
}

/// Gaussian full conditional in canonical form: precision P and linear term b,
/// i.e. N(P^{-1} b, P^{-1}).
struct CanonicalGaussian {
  Eigen::MatrixXd precision;
  Eigen::VectorXd b;

  Eigen::VectorXd mean() const { return precision.llt().solve(b); }
  Eigen::MatrixXd covariance() const {
    return precision.llt().solve(Eigen::MatrixXd::Identity(precision.rows(), precision.cols()));
  }
};

/// Gamma full conditional, shape / rate.
struct GammaConditional {
  double shape = 1.0;
  double rate = 1.0;
};

/// Draw x ~ N(P^{-1} b, P^{-1}) given the Cholesky factor of the precision P.
inline Eigen::VectorXd sample_mvn_canonical(const Eigen::VectorXd& b,
                                            const Eigen::LLT<Eigen::MatrixXd>& precision_llt,
                                            RngStream& rng) {
  const auto n = b.size();
  Eigen::VectorXd z(n);
  for (Eigen::Index k = 0; k < n; ++k) z(k) = rng.normal();
  const Eigen::VectorXd mean = precision_llt.solve(b);
  return mean + precision_llt.matrixU().solve(z);
}

/// Draw from N(mean, precision^{-1}) without forming the covariance.
inline Eigen::VectorXd sample_canonical(const CanonicalGaussian& g, RngStream& rng) {
  Eigen::LLT<Eigen::MatrixXd> llt(g.precision);
  if (llt.info() != Eigen::Success) throw decomposition_error("conditional precision is not positive definite");
  return sample_mvn_canonical(g.b, llt, rng);
}

inline Eigen::VectorXd sample_mvn_precision(const Eigen::VectorXd& mean,
                                            const Eigen::MatrixXd& precision, RngStream& rng) {
  Eigen::LLT<Eigen::MatrixXd> llt(precision);
  if (llt.info() != Eigen::Success) throw decomposition_error("mvn: precision is not positive definite");
  Eigen::VectorXd z(mean.size());
  for (Eigen::Index k = 0; k < mean.size(); ++k) z(k) = rng.normal();
  return mean + llt.matrixU().solve(z);
}

}  // namespace bmc
