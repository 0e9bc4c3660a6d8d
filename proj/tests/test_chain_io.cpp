#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "bmc/chain_io.hpp"
#include "bmc/sim_harness.hpp"

using namespace bmc;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("bmc_chain_io_" + name);
  fs::remove_all(p);
  return p;
}

struct FitRun {
  Dataset raw;
  CellMask mask;
  Config config;
  Normalized norm;
  FitProblem pb;
};

FitRun make_run(PriorVariant variant = PriorVariant::factor, int chains = 1) {
  RngStream rng(5, 0);
  sim::SimulatedData s = sim::generate_sim1(4, 5, 2, 0.1, rng);
  FitRun r;
  std::vector<std::optional<double>> cut(5);
  cut[1] = 0.4;
  r.raw = s.data.with_cutoffs(cut);
  r.mask = s.held_out;
  r.config.schedule = {60, 20, 4};
  r.config.variant = variant;
  r.config.chains = chains;
  r.config.seed = 99;
  r.norm = io::fit_input(r.raw, r.mask, r.config);
  r.pb = prepare_problem(r.norm.data, r.config);
  return r;
}

void write_dir(const FitRun& r, const fs::path& dir, int threads = 1) {
  io::write_inputs(dir, r.config, r.raw, r.mask, r.norm);
  const io::RunResult res = io::run_chains_to_dir(r.pb, r.config, dir, threads);
  io::write_text(dir / "acceptance.json", io::acceptance_json(res).dump(2));
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void expect_same(const Draw& a, const Draw& b) {
  EXPECT_EQ(a.chain, b.chain);
  EXPECT_EQ(a.iteration, b.iteration);
  EXPECT_EQ(a.xi, b.xi);
  EXPECT_EQ(a.alpha, b.alpha);
  EXPECT_EQ(a.gamma, b.gamma);
  EXPECT_EQ(a.t, b.t);
  EXPECT_EQ(a.delta, b.delta);
  EXPECT_EQ(a.lambda, b.lambda);
  EXPECT_EQ(a.eta, b.eta);
  EXPECT_EQ(a.noise_var, b.noise_var);
  EXPECT_EQ(a.sigma_trace, b.sigma_trace);
  ASSERT_EQ(a.beta.size(), b.beta.size());
  for (std::size_t k = 0; k < a.beta.size(); ++k) EXPECT_EQ(a.beta[k], b.beta[k]);
}

}  // namespace

TEST(ChainDir, DrawsRoundTripExactly) {
  const FitRun r = make_run();
  const fs::path dir = scratch("roundtrip");
  write_dir(r, dir);

  RngStream rng(r.config.seed, 0);
  const ChainOutput mem = run_chain(r.pb, r.config, rng);
  const io::ChainDir cd = io::load_chain_dir(dir);
  ASSERT_EQ(cd.draws.size(), 10u);
  ASSERT_EQ(mem.draws.size(), cd.draws.size());
  for (std::size_t s = 0; s < mem.draws.size(); ++s) expect_same(mem.draws[s], cd.draws[s]);

  EXPECT_EQ(cd.held_out, r.mask);
  EXPECT_EQ(cd.raw.cutoffs()[1], 0.4);
  EXPECT_EQ(cd.problem.v_delta, r.pb.v_delta);
  EXPECT_TRUE(cd.problem.curve.R.isApprox(r.pb.curve.R, 0.0));
  EXPECT_EQ(cd.config.schedule.iterations, 60);
  for (const char* f : {"config.json", "data.csv", "mask.csv", "cutoffs.csv", "normalization.csv", "acceptance.json"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  EXPECT_FALSE(fs::exists(dir / "draws" / "variant_pi.csv"));
}

TEST(ChainDir, BetaIsLongFormatForActiveObservedCells) {
  const FitRun r = make_run();
  const fs::path dir = scratch("beta");
  write_dir(r, dir);
  const io::ChainDir cd = io::load_chain_dir(dir);
  std::size_t expected = 0;
  for (const Draw& d : cd.draws)
    for (std::size_t k = 0; k < d.beta.size(); ++k) {
      const bool active = d.gamma(static_cast<Eigen::Index>(k) / 5, static_cast<Eigen::Index>(k) % 5) == 1;
      EXPECT_EQ(d.beta[k].size() > 0, active && cd.problem.observed(k));
      expected += static_cast<std::size_t>(d.beta[k].size());
    }
  std::ifstream in(dir / "draws" / "beta.csv");
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "chain,iteration,chemical,endpoint,k,value");
  std::size_t rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, expected);
}

TEST(ChainDir, NormalizationFileListsObservedCells) {
  const FitRun r = make_run();
  const fs::path dir = scratch("norm");
  write_dir(r, dir);
  const std::string text = slurp(dir / "normalization.csv");
  const auto lines = std::count(text.begin(), text.end(), '\n');
  EXPECT_EQ(static_cast<std::size_t>(lines), 1 + r.norm.data.observed_count());
  EXPECT_EQ(text.substr(0, text.find('\n')), "chemical,assay_endpoint,location,scale");
}

TEST(ChainDir, ChainsMergeWithProvenance) {
  const FitRun r = make_run(PriorVariant::factor, 3);
  const fs::path one = scratch("chains1"), two = scratch("chains2");
  write_dir(r, one, 1);
  write_dir(r, two, 2);
  for (const std::string name : {"scalars", "gamma", "beta", "lambda"})
    EXPECT_EQ(slurp(one / "draws" / (name + ".csv")), slurp(two / "draws" / (name + ".csv"))) << name;
  for (const auto& e : fs::directory_iterator(one / "draws")) EXPECT_EQ(e.path().extension(), ".csv");

  const io::ChainDir cd = io::load_chain_dir(one);
  ASSERT_EQ(cd.draws.size(), 30u);
  EXPECT_EQ(cd.draws[0].chain, 0);
  EXPECT_EQ(cd.draws[10].chain, 1);
  EXPECT_EQ(cd.draws[29].chain, 2);
  EXPECT_NE(cd.draws[0].xi, cd.draws[10].xi);
  EXPECT_EQ(cd.acceptance["chains"].size(), 3u);
}

TEST(ChainDir, VariantWritesPiInsteadOfFactors) {
  const FitRun r = make_run(PriorVariant::bmc_j);
  const fs::path dir = scratch("variant");
  write_dir(r, dir);
  EXPECT_FALSE(fs::exists(dir / "draws" / "lambda.csv"));
  EXPECT_FALSE(fs::exists(dir / "draws" / "eta.csv"));
  const io::ChainDir cd = io::load_chain_dir(dir);
  EXPECT_EQ(cd.draws[0].variant_pi.size(), 5);
  EXPECT_EQ(cd.draws[0].lambda.size(), 0);
}

TEST(ChainDir, IncompleteDirectoriesAreRejected) {
  const FitRun r = make_run();
  const fs::path dir = scratch("partial");
  write_dir(r, dir);

  fs::rename(dir / "acceptance.json", dir / "acceptance.bak");
  EXPECT_THROW(io::load_chain_dir(dir), incomplete_chain_error);
  fs::rename(dir / "acceptance.bak", dir / "acceptance.json");

  std::string gamma = slurp(dir / "draws" / "gamma.csv");
  gamma.resize(gamma.rfind('\n', gamma.size() - 2) + 1);  // drop the last row
  io::write_text(dir / "draws" / "gamma.csv", gamma);
  EXPECT_THROW(io::load_chain_dir(dir), incomplete_chain_error);

  gamma.resize(gamma.size() - 5);  // cut a row in half
  io::write_text(dir / "draws" / "gamma.csv", gamma);
  EXPECT_THROW(io::load_chain_dir(dir), incomplete_chain_error);

  EXPECT_THROW(io::load_chain_dir(scratch("nothing")), incomplete_chain_error);
}
