#include <algorithm>
#include <cmath>
#include <sstream>
#include <vector>

#include <gtest/gtest.h>

#include "bmc/summaries.hpp"

using namespace bmc;

namespace {

const std::vector<double> kDoses{0.301, 0.477, 0.602, 0.845, 1.000, 1.301, 1.602, 2.000};

// m x J grid, every cell observed except (0, J-1); two replicates at the eight doses.
Normalized toy_data(int m, int J) {
  RngStream rng(3, 0);
  std::vector<std::string> chems, ends;
  for (int i = 0; i < m; ++i) chems.push_back("c" + std::to_string(i));
  for (int j = 0; j < J; ++j) ends.push_back("e" + std::to_string(j));
  std::vector<CellData> cells;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < J; ++j) {
      CellData c{i, j, {}};
      if (!(i == 0 && j == J - 1))
        for (int r = 0; r < 2; ++r)
          for (double x : kDoses) c.observations.push_back({x, x * (i + 1) + rng.normal()});
      cells.push_back(c);
    }
  std::vector<std::optional<double>> cut(static_cast<std::size_t>(J));
  cut[0] = 0.5;
  return normalize_cells(Dataset(chems, ends, cells, cut));
}

struct Fixture {
  Normalized norm;
  FitProblem pb;
  Fixture(int m = 3, int J = 4) : norm(toy_data(m, J)) {
    Config c;
    pb = prepare_problem(norm.data, c);
  }

  Draw draw(const IndicatorMatrix& g, const IndicatorMatrix& t, const Eigen::VectorXd& beta) const {
    Draw d;
    d.gamma = g;
    d.t = t;
    d.delta = Eigen::MatrixXd::Zero(pb.m, pb.J);
    d.lambda = Eigen::MatrixXd::Zero(pb.m, 2);
    d.noise_var = Eigen::VectorXd::Ones(pb.J);
    d.beta.assign(pb.designs.size(), Eigen::VectorXd());
    for (std::size_t k = 0; k < pb.designs.size(); ++k)
      if (pb.observed(k) && g(static_cast<Eigen::Index>(k) / pb.J, static_cast<Eigen::Index>(k) % pb.J)) d.beta[k] = beta;
    return d;
  }
};

Eigen::VectorXd rising_beta() {
  Eigen::VectorXd b(7);
  b << -1.0, -0.6, -0.2, 0.2, 0.6, 1.0, 1.4;
  return b;
}

}  // namespace

TEST(ActivitySummary, DegenerateChain) {
  Fixture f;
  const IndicatorMatrix ones = IndicatorMatrix::Ones(f.pb.m, f.pb.J), zeros = IndicatorMatrix::Zero(f.pb.m, f.pb.J);
  const std::vector<Draw> draws(5, f.draw(ones, zeros, rising_beta()));
  const ActivitySummary s = activity_summary(draws, f.pb);
  EXPECT_EQ(s.p_union, Eigen::MatrixXd::Ones(f.pb.m, f.pb.J));
  EXPECT_EQ(s.p_t, Eigen::MatrixXd::Zero(f.pb.m, f.pb.J));
}

TEST(ActivitySummary, UnionIsPerDraw) {
  Fixture f;
  const IndicatorMatrix ones = IndicatorMatrix::Ones(f.pb.m, f.pb.J), zeros = IndicatorMatrix::Zero(f.pb.m, f.pb.J);
  std::vector<Draw> draws;
  for (int k = 0; k < 6; ++k)
    draws.push_back(k % 2 == 0 ? f.draw(ones, zeros, rising_beta()) : f.draw(zeros, ones, rising_beta()));
  const ActivitySummary s = activity_summary(draws, f.pb);
  EXPECT_DOUBLE_EQ(s.p_union(1, 1), 1.0);
  EXPECT_DOUBLE_EQ(s.p_gamma(1, 1), 0.5);
  EXPECT_DOUBLE_EQ(s.p_t(1, 1), 0.5);
}

TEST(ActivitySummary, MatchesEnumerationOnRandomChain) {
  Fixture f;
  RngStream rng(1, 0);
  std::vector<Draw> draws;
  for (int k = 0; k < 10; ++k) {
    IndicatorMatrix g(f.pb.m, f.pb.J), t(f.pb.m, f.pb.J);
    for (int i = 0; i < f.pb.m; ++i)
      for (int j = 0; j < f.pb.J; ++j) {
        g(i, j) = rng.bernoulli(0.4);
        t(i, j) = rng.bernoulli(0.3);
      }
    draws.push_back(f.draw(g, t, rising_beta()));
  }
  const auto cut = cell_cutoffs(f.norm.data, f.norm.records);
  const ActivitySummary s = activity_summary(draws, f.pb, cut);
  for (int i = 0; i < f.pb.m; ++i)
    for (int j = 0; j < f.pb.J; ++j) {
      int u = 0, g = 0, t = 0;
      for (const Draw& d : draws) {
        u += d.gamma(i, j) || d.t(i, j);
        g += d.gamma(i, j);
        t += d.t(i, j);
      }
      EXPECT_DOUBLE_EQ(s.p_union(i, j), u / 10.0);
      EXPECT_LE(s.p_kappa(i, j), s.p_gamma(i, j));
      EXPECT_GE(s.p_union(i, j) + 1e-15, std::max(s.p_gamma(i, j), s.p_t(i, j)));
      EXPECT_LE(s.p_kappa_union(i, j), s.p_union(i, j) + 1e-15);
    }
}

TEST(ActivitySummary, KappaGatesOnTheNormalizedCutoff) {
  Fixture f;
  const IndicatorMatrix ones = IndicatorMatrix::Ones(f.pb.m, f.pb.J), zeros = IndicatorMatrix::Zero(f.pb.m, f.pb.J);
  const Draw d = f.draw(ones, zeros, rising_beta());
  auto cut = cell_cutoffs(f.norm.data, f.norm.records);
  const std::size_t k = f.pb.index(1, 0);
  ASSERT_TRUE(cut[k].has_value());
  EXPECT_NEAR(*cut[k], f.norm.records[k].apply(0.5), 1e-15);
  const double mx = fitted_curve(rising_beta(), dose_grid(*f.pb.designs[k]), *f.pb.designs[k]).maxCoeff();
  cut[k] = mx + 0.01;
  EXPECT_DOUBLE_EQ(activity_summary({d}, f.pb, cut).p_kappa(1, 0), 0.0);
  cut[k] = mx - 0.01;
  EXPECT_DOUBLE_EQ(activity_summary({d}, f.pb, cut).p_kappa(1, 0), 1.0);
  // Endpoints without cutoffs, and cells without data, keep kappa = gamma.
  EXPECT_DOUBLE_EQ(activity_summary({d}, f.pb, cut).p_kappa(1, 1), 1.0);
  EXPECT_DOUBLE_EQ(activity_summary({d}, f.pb, cut).p_kappa(0, f.pb.J - 1), 1.0);
}

TEST(ActivitySummary, EmptyChainThrows) {
  Fixture f;
  EXPECT_THROW(activity_summary({}, f.pb), empty_input_error);
}

TEST(Ranking, SingleAndTwoChemicals) {
  ActivitySummary s;
  s.m = 1;
  s.J = 2;
  s.p_kappa_union = Eigen::MatrixXd::Constant(1, 2, 0.4);
  s.observed = {1, 1};
  EXPECT_EQ(chemical_ranking(s).front().index, 0);
  s.m = 2;
  s.p_kappa_union.resize(2, 2);
  s.p_kappa_union << 0.2, 0.2, 0.9, 0.9;
  s.observed = {1, 1, 1, 1};
  const auto r = chemical_ranking(s);
  EXPECT_EQ(r[0].index, 1);
  EXPECT_DOUBLE_EQ(r[0].score, 0.9);
  EXPECT_EQ(r[1].index, 0);
}

TEST(Ranking, AveragesObservedEndpointsAndBreaksTiesByIndex) {
  ActivitySummary s;
  s.m = 3;
  s.J = 2;
  s.p_kappa_union.resize(3, 2);
  s.p_kappa_union << 0.5, 1.0, 0.5, 0.5, 0.5, 0.5;
  s.observed = {1, 0, 1, 1, 1, 1};
  auto r = chemical_ranking(s);
  EXPECT_EQ(r[0].index, 0);
  EXPECT_EQ(r[0].count, 1);
  EXPECT_EQ(r[1].index, 1);
  EXPECT_EQ(r[2].index, 2);
  r = chemical_ranking(s, true);
  EXPECT_DOUBLE_EQ(r[0].score, 0.75);
}

TEST(EndpointList, ThresholdAndBruteForceSort) {
  ActivitySummary s;
  s.m = 5;
  s.J = 10;
  RngStream rng(2, 0);
  s.p_union.resize(5, 10);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 10; ++j) s.p_union(i, j) = rng.uniform();
  EXPECT_TRUE(endpoint_activation_list(s, {0, 1}, 1.01).empty());
  const std::vector<int> top{0, 2, 4};
  const auto r = endpoint_activation_list(s, top, 0.0);
  ASSERT_EQ(r.size(), 10u);
  std::vector<std::pair<double, int>> brute;
  for (int j = 0; j < 10; ++j) brute.push_back({-(s.p_union(0, j) + s.p_union(2, j) + s.p_union(4, j)) / 3.0, j});
  std::sort(brute.begin(), brute.end());
  for (int k = 0; k < 10; ++k) EXPECT_EQ(r[k].index, brute[k].second);
  const auto filtered = endpoint_activation_list(s, top, 0.5);
  for (const auto& e : filtered) EXPECT_GE(e.score, 0.5);
  EXPECT_THROW(endpoint_activation_list(s, {}, 0.5), invalid_argument);
}

TEST(EndpointList, SingleChemicalSingleEndpoint) {
  ActivitySummary s;
  s.m = 1;
  s.J = 1;
  s.p_union = Eigen::MatrixXd::Constant(1, 1, 0.95);
  const auto r = endpoint_activation_list(s, {0});
  ASSERT_EQ(r.size(), 1u);
  EXPECT_EQ(r[0].index, 0);
}

TEST(CurveBands, InactiveCellIsFlatZero) {
  Fixture f;
  RngStream rng(4, 0);
  const IndicatorMatrix zeros = IndicatorMatrix::Zero(f.pb.m, f.pb.J);
  const std::vector<Draw> draws(50, f.draw(zeros, zeros, rising_beta()));
  const auto grid = dose_grid(*f.pb.designs[f.pb.index(1, 1)], 11);
  const CurveBands b = curve_bands(draws, f.pb, 1, 1, grid, rng);
  EXPECT_EQ(b.mean.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ((b.ci_hi - b.ci_lo).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_THROW(curve_bands(draws, f.pb, 0, f.pb.J - 1, grid, rng), invalid_argument);
}

TEST(CurveBands, HomoscedasticWidthAndNesting) {
  Fixture f;
  RngStream rng(5, 0);
  const IndicatorMatrix ones = IndicatorMatrix::Ones(f.pb.m, f.pb.J), zeros = IndicatorMatrix::Zero(f.pb.m, f.pb.J);
  std::vector<Draw> draws;
  for (int k = 0; k < 4000; ++k) {
    Eigen::VectorXd b = rising_beta();
    b *= 1.0 + 0.1 * rng.normal();
    draws.push_back(f.draw(ones, zeros, b));
  }
  const auto grid = dose_grid(*f.pb.designs[f.pb.index(1, 1)], 21);
  const CurveBands b = curve_bands(draws, f.pb, 1, 1, grid, rng);
  const Eigen::VectorXd width = b.ppi_hi - b.ppi_lo;
  // Noise sd 1 dominates; the 95% predictive width is about 2 * 1.96.
  EXPECT_LT(width.maxCoeff() - width.minCoeff(), 0.5);
  EXPECT_NEAR(width.mean(), 3.92, 0.3);
  for (int g = 0; g < 21; ++g) {
    EXPECT_LE(b.ppi_lo(g), b.ci_lo(g));
    EXPECT_GE(b.ppi_hi(g), b.ci_hi(g));
    EXPECT_LE(b.ci_lo(g), b.mean(g));
    EXPECT_GE(b.ci_hi(g), b.mean(g));
  }
  const CurveBands raw = to_raw_scale(b, NormalizationRecord{2.0, 3.0});
  EXPECT_NEAR(raw.mean(4), 2.0 + 3.0 * b.mean(4), 1e-12);
}

TEST(Correlation, IdentityRankOneAndVariantError) {
  Fixture f;
  const IndicatorMatrix zeros = IndicatorMatrix::Zero(f.pb.m, f.pb.J);
  Draw d = f.draw(zeros, zeros, rising_beta());
  EXPECT_LT((chemical_correlation({d}) - Eigen::MatrixXd::Identity(f.pb.m, f.pb.m)).cwiseAbs().maxCoeff(), 1e-15);
  d.lambda.setZero();
  d.lambda.col(0).setOnes();
  const Eigen::MatrixXd c = chemical_correlation({d});
  EXPECT_NEAR(c(0, 1), 0.5, 1e-15);
  EXPECT_NEAR(c(1, 1), 1.0, 1e-15);
  d.lambda.resize(0, 0);
  EXPECT_THROW(chemical_correlation({d}), unsupported_variant_error);
}

TEST(Predict, MaskedCellsAndInvalidMask) {
  Fixture f;
  const IndicatorMatrix ones = IndicatorMatrix::Ones(f.pb.m, f.pb.J), zeros = IndicatorMatrix::Zero(f.pb.m, f.pb.J);
  const ActivitySummary s = activity_summary({f.draw(ones, zeros, rising_beta()), f.draw(ones, ones, rising_beta())}, f.pb);
  CellMask mask(f.pb.designs.size(), 0);
  mask[f.pb.index(0, f.pb.J - 1)] = 1;
  const auto p = predict_cells(s, mask);
  ASSERT_EQ(p.size(), 1u);
  EXPECT_DOUBLE_EQ(p[0].p_gamma, 1.0);
  EXPECT_DOUBLE_EQ(p[0].p_t, 0.5);
  EXPECT_DOUBLE_EQ(p[0].p_union, 1.0);
  mask[f.pb.index(1, 1)] = 1;
  EXPECT_THROW(predict_cells(s, mask), invalid_mask_error);
  EXPECT_THROW(predict_cells(s, CellMask(3, 0)), invalid_mask_error);
}

TEST(Writers, ActivityProbsAndCurves) {
  Fixture f;
  RngStream rng(6, 0);
  const IndicatorMatrix ones = IndicatorMatrix::Ones(f.pb.m, f.pb.J), zeros = IndicatorMatrix::Zero(f.pb.m, f.pb.J);
  const std::vector<Draw> draws(3, f.draw(ones, zeros, rising_beta()));
  const ActivitySummary s = activity_summary(draws, f.pb);
  std::ostringstream a, r, c, cv;
  auto lines = [](const std::ostringstream& os) {
    const std::string text = os.str();
    return std::count(text.begin(), text.end(), '\n');
  };
  write_activity_probs(s, f.norm.data, a);
  EXPECT_EQ(a.str().substr(0, a.str().find('\n')), "chemical,endpoint,p_gamma,p_t,p_kappa,p_union,p_kappa_union,held_out");
  EXPECT_EQ(lines(a), 1 + f.pb.m * f.pb.J);
  write_rankings(chemical_ranking(s), f.norm.data, r);
  EXPECT_EQ(lines(r), 1 + f.pb.m);
  write_correlation(chemical_correlation(draws), f.norm.data, c);
  EXPECT_EQ(lines(c), 1 + f.pb.m);
  write_curve(curve_bands(draws, f.pb, 1, 1, {0.5, 1.0}, rng), cv);
  EXPECT_EQ(cv.str().substr(0, cv.str().find('\n')), "grid,mean,ci_lo,ci_hi,ppi_lo,ppi_hi");
}
