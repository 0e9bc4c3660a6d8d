// bmc: simulate, fit, summarize, evaluate, predict.
//
// Exit codes: 0 success, 2 usage or input error, 3 runtime or numerical failure.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include "CLI11.hpp"
#include "json.hpp"

#include "bmc/chain_io.hpp"
#include "bmc/config.hpp"
#include "bmc/sim_harness.hpp"
#include "bmc/summaries.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace bmc;

namespace {

constexpr const char* kVersion = "0.1.0";
constexpr int kUsage = 2;
constexpr int kRuntime = 3;

struct usage_error : bmc::error {
  using bmc::error::error;
};

std::string sha256_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw usage_error("cannot open " + p.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    if (in.gcount() > 0) EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream os;
  for (unsigned int k = 0; k < len; ++k) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[k]);
  return os.str();
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

class Manifest {
 public:
  Manifest(std::string command, const std::vector<std::string>& args) {
    j_["command"] = std::move(command);
    j_["args"] = args;
    j_["tool_version"] = kVersion;
    j_["started_at"] = utc_now();
    j_["inputs"] = json::array();
    j_["status"] = "started";
  }
  void input(const std::string& role, const std::string& path) {
    if (path.empty()) return;
    j_["inputs"].push_back({{"role", role}, {"path", path}, {"sha256", sha256_file(path)}, {"bytes", fs::file_size(path)}});
  }
  void set(const std::string& key, json v) { j_[key] = std::move(v); }
  void write(const fs::path& dir) const { io::write_text(dir / "manifest.json", j_.dump(2) + "\n"); }
  void finish(const fs::path& dir, const std::string& status) {
    j_["status"] = status;
    j_["finished_at"] = utc_now();
    write(dir);
  }

 private:
  json j_;
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw usage_error("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  io::write_text(path, text);
}

Dataset load_data(const std::string& data_path, const std::string& cutoffs_path) {
  std::istringstream in(read_file(data_path));
  Dataset d = ingest_csv(in);
  if (!cutoffs_path.empty()) {
    std::istringstream c(read_file(cutoffs_path));
    d = read_cutoffs(d, c);
  }
  return d;
}

/// "chem:endpoint" pairs, comma separated.
CellMask parse_cells(const Dataset& d, const std::vector<std::string>& specs) {
  CellMask mask(d.cell_count(), 0);
  for (const std::string& s : specs) {
    const auto colon = s.rfind(':');
    if (colon == std::string::npos) throw usage_error("cell '" + s + "' is not chemical:endpoint");
    const int i = d.chemical_index(s.substr(0, colon));
    const int j = d.endpoint_index(s.substr(colon + 1));
    if (i < 0 || j < 0) throw usage_error("unknown cell '" + s + "'");
    mask[d.index(i, j)] = 1;
  }
  return mask;
}

std::string file_stem(std::string s) {
  for (char& c : s)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '.') c = '_';
  return s;
}

int default_threads() {
  if (const char* v = std::getenv("BMC_THREADS")) {
    const int n = std::atoi(v);
    if (n > 0) return n;
  }
  return 1;
}

// ---------------------------------------------------------------------------

struct SimulateArgs {
  int scenario = 0;
  std::uint64_t seed = 1;
  std::string out, config;
  int m = -1, J = -1, reps = -1;
  double holdout = -1.0;
  std::string regime = "high_corr";
};

int cmd_simulate(const SimulateArgs& a, const std::vector<std::string>& argv) {
  if (a.scenario < 1 || a.scenario > 4) throw usage_error("scenario must be 1, 2, 3 or 4");
  json gen = a.config.empty() ? json::object() : json::parse(read_file(a.config));
  auto pick = [&](int flag, const char* key, int def) { return flag >= 0 ? flag : gen.value(key, def); };
  RngStream rng(a.seed, 1000 + static_cast<std::uint64_t>(a.scenario));
  sim::SimulatedData s;
  switch (a.scenario) {
    case 1:
      s = sim::generate_sim1(pick(a.m, "m", 30), pick(a.J, "J", 150), pick(a.reps, "reps", 3),
                             a.holdout >= 0 ? a.holdout : gen.value("holdout", 0.05), rng);
      break;
    case 2:
      s = sim::generate_sim2_zipll(pick(a.m, "m", 15), pick(a.J, "J", 15), rng,
                                   a.holdout >= 0 ? a.holdout : gen.value("holdout", 0.1));
      break;
    case 3:
      s = sim::generate_sim3_multiplicity(pick(a.J, "J", 5), rng);
      break;
    case 4: {
      const std::string regime = gen.value("regime", a.regime);
      if (regime != "high_corr" && regime != "weak_corr") throw usage_error("regime must be high_corr or weak_corr");
      s = sim::generate_sim4(regime == "high_corr" ? sim::CorrelationRegime::high_corr : sim::CorrelationRegime::weak_corr,
                             a.holdout >= 0 ? a.holdout : gen.value("missing_fraction", 0.5), rng);
      break;
    }
  }
  const fs::path out(a.out);
  fs::create_directories(out);
  Manifest man("simulate", argv);
  man.input("config", a.config);
  man.set("seed", a.seed);
  man.set("scenario", a.scenario);
  man.write(out);
  std::ostringstream data, mask;
  write_csv(s.data, data);
  write_mask(s.data, s.held_out, mask);
  io::write_text(out / "data.csv", data.str());
  io::write_text(out / "mask.csv", mask.str());
  io::write_text(out / "truth.json", sim::truth_to_json(s.truth).dump(2) + "\n");
  man.finish(out, "complete");
  std::cout << "simulated scenario " << a.scenario << ": " << s.data.m() << " x " << s.data.J() << " cells, "
            << std::count(s.held_out.begin(), s.held_out.end(), 1) << " held out\n";
  return 0;
}

struct FitArgs {
  std::string data, config, out, mask, cutoffs, variant;
  std::optional<std::uint64_t> seed;
  std::optional<int> chains, iterations, burnin, thin;
  int threads = default_threads();
};

int cmd_fit(const FitArgs& a, const std::vector<std::string>& argv) {
  Config config = load_config(a.config);
  if (a.seed) config.seed = *a.seed;
  if (a.chains) config.chains = *a.chains;
  if (a.iterations) config.schedule.iterations = *a.iterations;
  if (a.burnin) config.schedule.burnin = *a.burnin;
  if (a.thin) config.schedule.thin = *a.thin;
  if (!a.variant.empty()) config.variant = parse_variant(a.variant);
  if (config.chains < 1) throw usage_error("chains must be at least 1");
  config.validate();

  const Dataset raw = load_data(a.data, a.cutoffs);
  CellMask mask(raw.cell_count(), 0);
  if (!a.mask.empty()) {
    std::istringstream in(read_file(a.mask));
    mask = read_mask(raw, in);
  }
  const Normalized norm = io::fit_input(raw, mask, config);
  const FitProblem pb = prepare_problem(norm.data, config);

  const fs::path out(a.out);
  fs::create_directories(out);
  Manifest man("fit", argv);
  man.input("data", a.data);
  man.input("config", a.config);
  man.input("mask", a.mask);
  man.input("cutoffs", a.cutoffs);
  man.set("seed", config.seed);
  man.write(out);
  fs::remove(out / "acceptance.json");
  fs::remove_all(out / "draws");
  io::write_inputs(out, config, raw, mask, norm);
  try {
    const io::RunResult res = io::run_chains_to_dir(pb, config, out, a.threads);
    for (const ChainOutput& c : res.chains)
      for (const std::string& w : c.warnings) std::cerr << "warning: " << w << '\n';
    io::write_text(out / "acceptance.json", io::acceptance_json(res).dump(2) + "\n");
    man.finish(out, "complete");
    std::cout << "fit " << config.chains << " chain(s), "
              << config.chains * ((config.schedule.iterations - config.schedule.burnin) / config.schedule.thin)
              << " saved draws; (t, delta) acceptance " << io::acceptance_json(res)["t_delta_rate"].get<double>() << '\n';
  } catch (const chain_abort& e) {
    io::write_text(out / "abort.txt", std::string(e.what()) + "\n");
    man.finish(out, "aborted");
    throw;
  }
  return 0;
}

struct SummarizeArgs {
  std::string chain, out;
  std::vector<std::string> cells, chemicals;
  bool all_curves = false;
  double threshold = kActivationThreshold;
  int grid_points = kKappaGridPoints;
};

int cmd_summarize(const SummarizeArgs& a, const std::vector<std::string>& argv) {
  const io::ChainDir cd = io::load_chain_dir(a.chain);
  const Dataset& data = cd.raw;
  const auto cutoffs = cell_cutoffs(cd.normalized.data, cd.normalized.records);
  const ActivitySummary s = activity_summary(cd.draws, cd.problem, cutoffs, cd.held_out);

  CellMask curve_cells = a.all_curves ? cd.normalized.data.observed_mask() : parse_cells(data, a.cells);
  std::vector<int> chems;
  for (const std::string& c : a.chemicals) {
    const int i = data.chemical_index(c);
    if (i < 0) throw usage_error("unknown chemical '" + c + "'");
    chems.push_back(i);
  }

  const fs::path out(a.out);
  fs::create_directories(out);
  Manifest man("summarize", argv);
  man.set("chain_dir", a.chain);
  man.write(out);

  std::ostringstream probs, rank, rank_all;
  write_activity_probs(s, data, probs);
  write_file(out / "activity_probs.csv", probs.str());
  write_rankings(chemical_ranking(s), data, rank);
  write_file(out / "rankings.csv", rank.str());
  write_rankings(chemical_ranking(s, true), data, rank_all);
  write_file(out / "rankings_with_predictions.csv", rank_all.str());
  if (!chems.empty()) {
    std::ostringstream act;
    write_activation_list(endpoint_activation_list(s, chems, a.threshold), data, act);
    write_file(out / "activation_list.csv", act.str());
  }
  if (cd.config.variant == PriorVariant::factor) {
    std::ostringstream corr;
    write_correlation(chemical_correlation(cd.draws), data, corr);
    write_file(out / "correlation.csv", corr.str());
  }
  if (std::count(cd.held_out.begin(), cd.held_out.end(), 1) > 0) {
    std::ostringstream pred;
    write_predictions(predict_cells(s, cd.held_out), data, pred);
    write_file(out / "predictions.csv", pred.str());
  }
  RngStream rng(cd.config.seed, 0xC0FFEE);
  for (int i = 0; i < data.m(); ++i)
    for (int j = 0; j < data.J(); ++j) {
      const std::size_t k = data.index(i, j);
      if (!curve_cells[k]) continue;
      if (!cd.problem.observed(k))
        throw usage_error("no curve for " + data.chemical_names()[i] + ":" + data.endpoint_names()[j] + " (no data)");
      const CellDesign& d = *cd.problem.designs[k];
      const CurveBands b = to_raw_scale(curve_bands(cd.draws, cd.problem, i, j, dose_grid(d, a.grid_points), rng),
                                        cd.normalized.records[k]);
      std::ostringstream c;
      write_curve(b, c);
      write_file(out / "curves" / (file_stem(data.chemical_names()[i]) + "__" + file_stem(data.endpoint_names()[j]) + ".csv"),
                 c.str());
    }
  man.finish(out, "complete");
  return 0;
}

int cmd_evaluate(const std::string& chain, const std::string& truth_path, const std::string& out_path) {
  if (!fs::exists(truth_path)) throw usage_error("truth file " + truth_path + " not found");
  const sim::SimulationTruth truth = sim::truth_from_json(json::parse(read_file(truth_path)));
  const io::ChainDir cd = io::load_chain_dir(chain);
  if (truth.m() != cd.raw.m() || truth.J() != cd.raw.J() || static_cast<int>(truth.curves.size()) != truth.m() * truth.J())
    throw usage_error("truth is " + std::to_string(truth.m()) + " x " + std::to_string(truth.J()) + " but the chain is " +
                      std::to_string(cd.raw.m()) + " x " + std::to_string(cd.raw.J()));
  const sim::Metrics m = sim::evaluate(cd.draws, cd.problem, cd.normalized.data, cd.normalized.records, truth, cd.held_out);
  write_file(out_path, sim::metrics_to_json(m).dump(2) + "\n");
  std::cout << sim::metrics_to_json(m).dump() << '\n';
  return 0;
}

int cmd_predict(const std::string& chain, const std::string& out_path, const std::vector<std::string>& cells) {
  const io::ChainDir cd = io::load_chain_dir(chain);
  const ActivitySummary s = activity_summary(cd.draws, cd.problem, {}, cd.held_out);
  const CellMask mask = cells.empty() ? cd.held_out : parse_cells(cd.raw, cells);
  std::ostringstream pred;
  write_predictions(predict_cells(s, mask), cd.raw, pred);
  write_file(out_path, pred.str());
  return 0;
}

template <class F>
int guarded(F&& f) {
  try {
    return f();
  } catch (const usage_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const parse_error& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return kUsage;
  } catch (const incomplete_chain_error& e) {
    std::cerr << "incomplete chain directory: " << e.what() << '\n';
    return kRuntime;
  } catch (const chain_abort& e) {
    std::cerr << "chain aborted: " << e.what() << '\n';
    return kRuntime;
  } catch (const bmc::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const empty_input_error& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return kUsage;
  } catch (const invalid_mask_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const json::exception& e) {
    std::cerr << "json error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << '\n';
    return kRuntime;
  }
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::string> args(argv, argv + argc);
  CLI::App app{"Bayesian matrix completion for sparse dose-response screens"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  SimulateArgs sa;
  auto* sim_cmd = app.add_subcommand("simulate", "generate a simulated dataset with known truth");
  sim_cmd->add_option("--scenario", sa.scenario, "1 model-based, 2 ZIPLL, 3 multiplicity, 4 correlation")->required();
  sim_cmd->add_option("--seed", sa.seed, "random seed");
  sim_cmd->add_option("--out", sa.out, "output directory")->required();
  sim_cmd->add_option("--config", sa.config, "JSON with generator settings (m, J, reps, holdout, regime, missing_fraction)");
  sim_cmd->add_option("--m", sa.m, "chemicals");
  sim_cmd->add_option("--J", sa.J, "assay endpoints");
  sim_cmd->add_option("--reps", sa.reps, "replicates per dose (scenario 1)");
  sim_cmd->add_option("--holdout", sa.holdout, "fraction of cells held out (missing fraction for scenario 4)");
  sim_cmd->add_option("--regime", sa.regime, "scenario 4: high_corr or weak_corr");

  FitArgs fa;
  auto* fit_cmd = app.add_subcommand("fit", "run the sampler and write a chain directory");
  fit_cmd->add_option("--data", fa.data, "long-format CSV")->required();
  fit_cmd->add_option("--config", fa.config, "JSON config; omitted fields take defaults");
  fit_cmd->add_option("--out", fa.out, "chain directory")->required();
  fit_cmd->add_option("--mask", fa.mask, "CSV of cells to hold out");
  fit_cmd->add_option("--cutoffs", fa.cutoffs, "CSV of endpoint efficacy cutoffs");
  fit_cmd->add_option("--seed", fa.seed);
  fit_cmd->add_option("--chains", fa.chains);
  fit_cmd->add_option("--variant", fa.variant, "factor, bmc0, bmc_i or bmc_j");
  fit_cmd->add_option("--iterations", fa.iterations);
  fit_cmd->add_option("--burnin", fa.burnin);
  fit_cmd->add_option("--thin", fa.thin);
  fit_cmd->add_option("--threads", fa.threads, "chains run concurrently (default $BMC_THREADS or 1)");

  SummarizeArgs ua;
  auto* sum_cmd = app.add_subcommand("summarize", "activity probabilities, rankings, curves");
  sum_cmd->add_option("--chain", ua.chain, "chain directory")->required();
  sum_cmd->add_option("--out", ua.out, "output directory")->required();
  sum_cmd->add_option("--cells", ua.cells, "chemical:endpoint cells to draw curves for")->delimiter(',');
  sum_cmd->add_flag("--all-curves", ua.all_curves, "curves for every observed cell");
  sum_cmd->add_option("--chemicals", ua.chemicals, "chemicals for the endpoint activation list")->delimiter(',');
  sum_cmd->add_option("--threshold", ua.threshold, "activation list probability threshold");
  sum_cmd->add_option("--grid-points", ua.grid_points, "dose grid size for curves")->check(CLI::Range(2, 100000));

  std::string ev_chain, ev_truth, ev_out = "metrics.json";
  auto* eval_cmd = app.add_subcommand("evaluate", "score a simulated fit against its truth");
  eval_cmd->add_option("--chain", ev_chain)->required();
  eval_cmd->add_option("--truth", ev_truth)->required();
  eval_cmd->add_option("--out", ev_out, "metrics JSON path");

  std::string pr_chain, pr_out = "predictions.csv";
  std::vector<std::string> pr_cells;
  auto* pred_cmd = app.add_subcommand("predict", "activity probabilities for cells without data");
  pred_cmd->add_option("--chain", pr_chain)->required();
  pred_cmd->add_option("--out", pr_out);
  pred_cmd->add_option("--cells", pr_cells, "chemical:endpoint cells (default: the held-out mask)")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  if (*sim_cmd) return guarded([&] { return cmd_simulate(sa, args); });
  if (*fit_cmd) return guarded([&] { return cmd_fit(fa, args); });
  if (*sum_cmd) return guarded([&] { return cmd_summarize(ua, args); });
  if (*eval_cmd) return guarded([&] { return cmd_evaluate(ev_chain, ev_truth, ev_out); });
  if (*pred_cmd) return guarded([&] { return cmd_predict(pr_chain, pr_out, pr_cells); });
  return kUsage;
}
