#pragma once

// Chain directories: streamed draw tables plus the metadata needed to rebuild
// the fit problem.
//
//   config.json          config snapshot
//   data.csv             input data (before the hold-out mask)
//   mask.csv             held-out cells
//   cutoffs.csv          efficacy cutoffs, when given
//   normalization.csv    per-cell location and scale
//   acceptance.json      written last; its presence marks a complete run
//   draws/*.csv          one table per saved quantity, one row per draw
//                        (beta.csv is long: one row per coefficient)

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "bmc/config.hpp"
#include "bmc/data_model.hpp"
#include "bmc/errors.hpp"
#include "bmc/sampler.hpp"

namespace bmc::io {

namespace fs = std::filesystem;

inline void write_text(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw invalid_argument("cannot write " + path.string());
    out << text;
  }
  fs::rename(tmp, path);
}

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw incomplete_chain_error("missing " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

namespace detail {

inline std::string cell_columns(int m, int J) {
  std::string h;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < J; ++j) h += "," + std::to_string(i) + "_" + std::to_string(j);
  return h;
}

inline std::string index_columns(int n) {
  std::string h;
  for (int k = 0; k < n; ++k) h += "," + std::to_string(k);
  return h;
}

template <class M>
void put_row(std::ostream& out, const Draw& d, const M& values) {
  out << d.chain << ',' << d.iteration;
  for (Eigen::Index i = 0; i < values.rows(); ++i)
    for (Eigen::Index j = 0; j < values.cols(); ++j) out << ',' << csv::format_double(static_cast<double>(values(i, j)));
  out << '\n';
}

}  // namespace detail

/// Streams one chain's draws into `<dir>/<quantity>.csv<suffix>`.
class CsvDrawSink : public DrawSink {
 public:
  CsvDrawSink(const fs::path& dir, int m, int J, int q, PriorVariant variant, std::size_t variant_size,
              const std::string& suffix = "")
      : m_(m), J_(J) {
    fs::create_directories(dir);
    auto open = [&](const char* name, const std::string& header) {
      auto f = std::make_unique<std::ofstream>(dir / (std::string(name) + ".csv" + suffix), std::ios::binary);
      if (!*f) throw invalid_argument("cannot write draws in " + dir.string());
      *f << header << '\n';
      return f;
    };
    scalars_ = open("scalars", "chain,iteration,xi,alpha0,alpha1,pi_t");
    gamma_ = open("gamma", "chain,iteration" + detail::cell_columns(m, J));
    t_ = open("t", "chain,iteration" + detail::cell_columns(m, J));
    delta_ = open("delta", "chain,iteration" + detail::cell_columns(m, J));
    noise_ = open("noise_var", "chain,iteration" + detail::index_columns(J));
    sigma_ = open("sigma_trace", "chain,iteration" + detail::index_columns(J));
    beta_ = open("beta", "chain,iteration,chemical,endpoint,k,value");
    if (variant == PriorVariant::factor) {
      lambda_ = open("lambda", "chain,iteration" + detail::cell_columns(m, q));
      eta_ = open("eta", "chain,iteration" + detail::cell_columns(J, q));
    } else {
      variant_pi_ = open("variant_pi", "chain,iteration" + detail::index_columns(static_cast<int>(variant_size)));
    }
  }

  void write(const Draw& d) override {
    *scalars_ << d.chain << ',' << d.iteration << ',' << csv::format_double(d.xi) << ','
              << csv::format_double(d.alpha(0)) << ',' << csv::format_double(d.alpha(1)) << ','
              << csv::format_double(d.pi_t) << '\n';
    detail::put_row(*gamma_, d, d.gamma);
    detail::put_row(*t_, d, d.t);
    detail::put_row(*delta_, d, d.delta);
    detail::put_row(*noise_, d, d.noise_var.transpose());
    detail::put_row(*sigma_, d, d.sigma_trace.transpose());
    if (lambda_) {
      detail::put_row(*lambda_, d, d.lambda);
      detail::put_row(*eta_, d, d.eta);
    }
    if (variant_pi_) detail::put_row(*variant_pi_, d, d.variant_pi.transpose());
    for (std::size_t k = 0; k < d.beta.size(); ++k)
      for (Eigen::Index c = 0; c < d.beta[k].size(); ++c)
        *beta_ << d.chain << ',' << d.iteration << ',' << k / J_ << ',' << k % J_ << ',' << c << ','
               << csv::format_double(d.beta[k](c)) << '\n';
    for (auto* f : {scalars_.get(), gamma_.get(), t_.get(), delta_.get(), noise_.get(), sigma_.get(), beta_.get()})
      if (!*f) throw error("write failed while streaming draws");
  }

 private:
  int m_, J_;
  std::unique_ptr<std::ofstream> scalars_, gamma_, t_, delta_, noise_, sigma_, beta_, lambda_, eta_, variant_pi_;
};

inline const std::vector<std::string>& draw_tables() {
  static const std::vector<std::string> names{"scalars", "gamma",  "t",   "delta",     "noise_var",
                                              "sigma_trace", "beta", "lambda", "eta", "variant_pi"};
  return names;
}

/// Concatenate `<name>.csv.part<c>` for c < chains into `<name>.csv` (one header) and remove the parts.
inline void merge_parts(const fs::path& draws_dir, int chains) {
  for (const std::string& name : draw_tables()) {
    const fs::path first = draws_dir / (name + ".csv.part0");
    if (!fs::exists(first)) continue;
    std::ofstream out(draws_dir / (name + ".csv"), std::ios::binary);
    for (int c = 0; c < chains; ++c) {
      const fs::path part = draws_dir / (name + ".csv.part" + std::to_string(c));
      std::ifstream in(part, std::ios::binary);
      std::string line;
      bool header = true;
      while (std::getline(in, line)) {
        if (header && c > 0) {
          header = false;
          continue;
        }
        header = false;
        out << line << '\n';
      }
      in.close();
      fs::remove(part);
    }
  }
}

inline std::size_t variant_pi_size(PriorVariant v, int m, int J) {
  switch (v) {
    case PriorVariant::bmc0: return 1;
    case PriorVariant::bmc_i: return static_cast<std::size_t>(m);
    case PriorVariant::bmc_j: return static_cast<std::size_t>(J);
    default: return 0;
  }
}

struct RunResult {
  std::vector<ChainOutput> chains;  // metadata only
};

/// Run `config.chains` chains, `threads` at a time, streaming into `<dir>/draws`.
/// Chain c uses RNG stream (config.seed, c).
inline RunResult run_chains_to_dir(const FitProblem& pb, const Config& config, const fs::path& dir, int threads = 1) {
  const fs::path draws_dir = dir / "draws";
  fs::create_directories(draws_dir);
  const int n = config.chains;
  RunResult res;
  res.chains.resize(static_cast<std::size_t>(n));
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n));
  auto run_one = [&](int c) {
    try {
      CsvDrawSink sink(draws_dir, pb.m, pb.J, config.mean.q, config.variant, variant_pi_size(config.variant, pb.m, pb.J),
                       ".part" + std::to_string(c));
      RngStream rng(config.seed, static_cast<std::uint64_t>(c));
      res.chains[static_cast<std::size_t>(c)] = run_chain(pb, config, rng, sink, c);
    } catch (...) {
      errors[static_cast<std::size_t>(c)] = std::current_exception();
    }
  };
  const int width = std::max(1, std::min(threads, n));
  for (int start = 0; start < n; start += width) {
    std::vector<std::thread> pool;
    for (int c = start; c < std::min(n, start + width); ++c) {
      if (width == 1) run_one(c);
      else pool.emplace_back(run_one, c);
    }
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  merge_parts(draws_dir, n);
  return res;
}

inline nlohmann::json acceptance_json(const RunResult& r) {
  nlohmann::json chains = nlohmann::json::array();
  AcceptanceCount total;
  for (std::size_t c = 0; c < r.chains.size(); ++c) {
    const ChainOutput& o = r.chains[c];
    total += o.t_delta;
    chains.push_back({{"chain", c},
                      {"t_delta_proposed", o.t_delta.proposed},
                      {"t_delta_accepted", o.t_delta.accepted},
                      {"t_delta_rate", o.t_delta.rate()},
                      {"v_delta", o.v_delta},
                      {"warnings", o.warnings}});
  }
  return {{"chains", chains}, {"t_delta_rate", total.rate()}};
}

inline void write_normalization(const Dataset& data, const std::vector<NormalizationRecord>& records, std::ostream& out) {
  out << "chemical,assay_endpoint,location,scale\n";
  for (int i = 0; i < data.m(); ++i)
    for (int j = 0; j < data.J(); ++j) {
      if (data.cell(i, j).missing()) continue;
      const NormalizationRecord& r = records[data.index(i, j)];
      out << csv::quote(data.chemical_names()[i]) << ',' << csv::quote(data.endpoint_names()[j]) << ','
          << csv::format_double(r.location) << ',' << csv::format_double(r.scale) << '\n';
    }
}

/// Inputs of a run, copied into the chain directory before sampling starts.
inline void write_inputs(const fs::path& dir, const Config& config, const Dataset& raw, const CellMask& mask,
                         const Normalized& normalized) {
  fs::create_directories(dir);
  write_text(dir / "config.json", config_to_json(config).dump(2) + "\n");
  std::ostringstream data, m, cut, norm;
  write_csv(raw, data);
  write_text(dir / "data.csv", data.str());
  write_mask(raw, mask, m);
  write_text(dir / "mask.csv", m.str());
  if (std::any_of(raw.cutoffs().begin(), raw.cutoffs().end(), [](const auto& c) { return c.has_value(); })) {
    write_cutoffs(raw, cut);
    write_text(dir / "cutoffs.csv", cut.str());
  }
  write_normalization(normalized.data, normalized.records, norm);
  write_text(dir / "normalization.csv", norm.str());
}

struct ChainDir {
  Config config;
  Dataset raw;        // full input, cutoffs attached
  CellMask held_out;
  Normalized normalized;  // of the masked data
  FitProblem problem;
  std::vector<Draw> draws;
  nlohmann::json acceptance;
};

namespace detail {

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;
};

inline Table read_table(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw incomplete_chain_error("missing " + path.string());
  Table t;
  std::string line;
  if (!std::getline(in, line)) throw incomplete_chain_error("empty " + path.string());
  t.header = csv::split(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    row.reserve(t.header.size());
    const char* p = line.c_str();
    char* end = nullptr;
    for (;;) {
      row.push_back(std::strtod(p, &end));
      if (end == p) throw incomplete_chain_error("malformed row in " + path.string());
      if (*end != ',') break;
      p = end + 1;
    }
    if (row.size() != t.header.size()) throw incomplete_chain_error("truncated row in " + path.string());
    t.rows.push_back(std::move(row));
  }
  return t;
}

inline void check_rows(const Table& t, std::size_t n, const std::string& name) {
  if (t.rows.size() != n) throw incomplete_chain_error("draw table " + name + " has " + std::to_string(t.rows.size()) +
                                                       " rows, expected " + std::to_string(n));
}

template <class M>
void fill(M& out, const std::vector<double>& row, Eigen::Index rows, Eigen::Index cols) {
  out.resize(rows, cols);
  if (static_cast<Eigen::Index>(row.size()) != rows * cols + 2) throw incomplete_chain_error("draw table has wrong width");
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j)
      out(i, j) = static_cast<typename M::Scalar>(row[static_cast<std::size_t>(2 + i * cols + j)]);
}

}  // namespace detail

inline std::vector<Draw> load_draws(const fs::path& draws_dir, int m, int J, const Config& config) {
  const detail::Table sc = detail::read_table(draws_dir / "scalars.csv");
  const std::size_t n = sc.rows.size();
  std::vector<Draw> draws(n);
  for (std::size_t s = 0; s < n; ++s) {
    const auto& r = sc.rows[s];
    draws[s].chain = static_cast<int>(r[0]);
    draws[s].iteration = static_cast<int>(r[1]);
    draws[s].xi = r[2];
    draws[s].alpha = Eigen::Vector2d(r[3], r[4]);
    draws[s].pi_t = r[5];
    draws[s].beta.assign(static_cast<std::size_t>(m) * J, Eigen::VectorXd());
  }
  auto load = [&](const char* name, auto member, Eigen::Index rows, Eigen::Index cols) {
    const detail::Table t = detail::read_table(draws_dir / (std::string(name) + ".csv"));
    detail::check_rows(t, n, name);
    for (std::size_t s = 0; s < n; ++s) detail::fill(draws[s].*member, t.rows[s], rows, cols);
  };
  load("gamma", &Draw::gamma, m, J);
  load("t", &Draw::t, m, J);
  load("delta", &Draw::delta, m, J);
  load("noise_var", &Draw::noise_var, J, 1);
  load("sigma_trace", &Draw::sigma_trace, J, 1);
  if (config.variant == PriorVariant::factor) {
    load("lambda", &Draw::lambda, m, config.mean.q);
    load("eta", &Draw::eta, J, config.mean.q);
  } else {
    load("variant_pi", &Draw::variant_pi, static_cast<Eigen::Index>(variant_pi_size(config.variant, m, J)), 1);
  }

  // beta rows arrive grouped by draw in draw order.
  const detail::Table bt = detail::read_table(draws_dir / "beta.csv");
  std::size_t s = 0;
  std::vector<std::vector<double>> pending;
  for (const auto& r : bt.rows) {
    while (s < n && !(draws[s].chain == static_cast<int>(r[0]) && draws[s].iteration == static_cast<int>(r[1]))) ++s;
    if (s == n) throw incomplete_chain_error("beta.csv refers to an unknown draw");
    const auto k = static_cast<std::size_t>(r[2]) * J + static_cast<std::size_t>(r[3]);
    const auto c = static_cast<Eigen::Index>(r[4]);
    Eigen::VectorXd& b = draws[s].beta[k];
    if (b.size() <= c) b.conservativeResize(c + 1);
    b(c) = r[5];
  }
  return draws;
}

/// Normalize and mask raw data the way a fit does.
inline Normalized fit_input(const Dataset& raw, const CellMask& held_out, const Config& config) {
  return normalize_cells(raw.without_cells(held_out), config.normalization);
}

inline ChainDir load_chain_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw incomplete_chain_error("no chain directory at " + dir.string());
  if (!fs::exists(dir / "acceptance.json")) throw incomplete_chain_error("run did not finish: acceptance.json missing");
  ChainDir cd;
  cd.config = config_from_json(nlohmann::json::parse(read_text(dir / "config.json")));
  {
    std::istringstream in(read_text(dir / "data.csv"));
    cd.raw = ingest_csv(in);
  }
  if (fs::exists(dir / "cutoffs.csv")) {
    std::istringstream in(read_text(dir / "cutoffs.csv"));
    cd.raw = read_cutoffs(cd.raw, in);
  }
  {
    std::istringstream in(read_text(dir / "mask.csv"));
    cd.held_out = read_mask(cd.raw, in);
  }
  cd.normalized = fit_input(cd.raw, cd.held_out, cd.config);
  cd.problem = prepare_problem(cd.normalized.data, cd.config);
  cd.draws = load_draws(dir / "draws", cd.raw.m(), cd.raw.J(), cd.config);
  if (cd.draws.empty()) throw incomplete_chain_error("chain directory has no saved draws");
  cd.acceptance = nlohmann::json::parse(read_text(dir / "acceptance.json"));
  return cd;
}

}  // namespace bmc::io
