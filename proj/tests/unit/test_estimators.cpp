#include <gtest/gtest.h>

#include <functional>
#include <random>

#include "stratavar/estimators.hpp"

using namespace stratavar;

namespace {

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected an error";
  return ErrorKind::ParseError;
}

Observed observed(const std::vector<std::vector<std::uint8_t>>& z, const std::vector<std::vector<double>>& r) {
  return Observed{Assignment{z}, r};
}

Eigen::VectorXd vec(std::initializer_list<double> v) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

// Squared HC3 standard error of the first coefficient, via the normal
// equations and the sandwich formula.
double hc3_first_coefficient(const Eigen::MatrixXd& X, const Eigen::VectorXd& y) {
  const Eigen::MatrixXd xtx_inv = (X.transpose() * X).inverse();
  const Eigen::VectorXd beta = xtx_inv * X.transpose() * y;
  const Eigen::VectorXd e = y - X * beta;
  Eigen::MatrixXd meat = Eigen::MatrixXd::Zero(X.cols(), X.cols());
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    const double h = X.row(i) * xtx_inv * X.row(i).transpose();
    const double s = e(i) / (1.0 - h);
    meat += s * s * X.row(i).transpose() * X.row(i);
  }
  return (xtx_inv * meat * xtx_inv)(0, 0);
}

struct RandomExperiment {
  BlockDesign design;
  Observed data;
};

RandomExperiment random_experiment(std::mt19937_64& rng, bool equal_sizes, int covariates, int min_blocks = 6) {
  std::uniform_int_distribution<int> nb(min_blocks, min_blocks + 8);
  std::uniform_int_distribution<int> ns(2, 5);
  std::normal_distribution<double> nd(0.0, 2.0);
  const int B = nb(rng);
  const int common = ns(rng);
  std::vector<Block> blocks;
  Observed obs;
  for (int i = 0; i < B; ++i) {
    const int n = equal_sizes ? common : ns(rng);
    const int n1 = std::uniform_int_distribution<int>(1, n - 1)(rng);
    Block b{"b" + std::to_string(i), n, n1, {}};
    std::vector<double> x(static_cast<std::size_t>(covariates));
    for (auto& v : x) v = nd(rng);
    if (covariates > 0) b.covariates.assign(static_cast<std::size_t>(n), x);
    std::vector<std::uint8_t> z(static_cast<std::size_t>(n), 0);
    for (int j = 0; j < n1; ++j) z[static_cast<std::size_t>(j)] = 1;
    std::shuffle(z.begin(), z.end(), rng);
    std::vector<double> r;
    for (int j = 0; j < n; ++j) r.push_back(nd(rng) + 3.0 * z[static_cast<std::size_t>(j)]);
    blocks.push_back(b);
    obs.assignment.z.push_back(z);
    obs.responses.push_back(r);
  }
  return {validate_design(blocks), obs};
}

}  // namespace

TEST(BlockEffects, HandExamples) {
  const auto d = make_design({{2, 1}, {4, 2}, {3, 1}});
  const auto e = block_effects(d, observed({{1, 0}, {1, 0, 1, 0}, {0, 1, 0}}, {{5, 3}, {4, 1, 6, 3}, {2, 7, 4}}));
  EXPECT_DOUBLE_EQ(e.tau_hat(0), 2.0);
  EXPECT_DOUBLE_EQ(e.tau_hat(1), 3.0);
  EXPECT_DOUBLE_EQ(*e.s2_treated[1], 2.0);
  EXPECT_DOUBLE_EQ(*e.s2_control[1], 2.0);
  EXPECT_DOUBLE_EQ(e.tau_hat(2), 4.0);
  EXPECT_FALSE(e.s2_treated[2].has_value());
  EXPECT_DOUBLE_EQ(*e.s2_control[2], 2.0);
  for (Eigen::Index i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(e.tau_hat(i), e.treated_means(i) - e.control_means(i));
}

TEST(EstimateAte, WeightedMean) {
  const auto d = make_design({{2, 1}, {3, 1}});
  EXPECT_NEAR(estimate_ate(vec({2, 5}), weight_vector(d)), 3.8, 1e-14);
  const auto eq = make_design({{2, 1}, {2, 1}, {2, 1}});
  EXPECT_NEAR(estimate_ate(vec({1, 2, 6}), weight_vector(eq)), 3.0, 1e-14);
}

TEST(Paired, HandExamples) {
  const auto d = make_design({{2, 1}, {2, 1}});
  const auto e = block_effects(d, observed({{1, 0}, {1, 0}}, {{1, 0}, {3, 0}}));
  EXPECT_NEAR(var_paired_classical(e, weight_vector(d)), 1.0, 1e-14);
  const auto c = block_effects(d, observed({{1, 0}, {0, 1}}, {{2, 0}, {1, 3}}));
  EXPECT_NEAR(var_paired_classical(c, weight_vector(d)), 0.0, 1e-14);
}

TEST(Paired, RefusesUnequalBlocks) {
  const auto d = make_design({{2, 1}, {3, 1}, {2, 1}});
  const auto e = block_effects(d, observed({{1, 0}, {1, 0, 0}, {1, 0}}, {{1, 0}, {3, 0, 0}, {2, 2}}));
  EXPECT_EQ(kind_of([&] { var_paired_classical(e, weight_vector(d)); }), ErrorKind::UnequalBlocks);
}

TEST(Coarse, HandExampleAndNotCoarse) {
  const auto d = make_design({{4, 2}, {4, 2}});
  const auto e = block_effects(d, observed({{1, 0, 1, 0}, {1, 0, 1, 0}}, {{4, 1, 6, 3}, {4, 1, 6, 3}}));
  // Each block contributes w^2 (2/2 + 2/2) = 2; sum over B^2 = 4/4.
  EXPECT_NEAR(var_coarse_classical(e, weight_vector(d)), 1.0, 1e-14);
  const auto f = make_design({{4, 2}, {2, 1}});
  const auto ef = block_effects(f, observed({{1, 0, 1, 0}, {1, 0}}, {{4, 1, 6, 3}, {1, 0}}));
  EXPECT_EQ(kind_of([&] { var_coarse_classical(ef, weight_vector(f)); }), ErrorKind::NotCoarse);
}

TEST(ProjectionEstimators, TwoPairHandValues) {
  const auto d = make_design({{2, 1}, {2, 1}});
  const QMatrix q = build_q1(d);
  const Eigen::VectorXd w = weight_vector(d);
  const Eigen::VectorXd tau = vec({1, 3});
  EXPECT_NEAR(var_s1(tau, w, q), 1.0, 1e-14);
  EXPECT_NEAR(var_s2(tau, w, q), 2.0, 1e-14);
  EXPECT_NEAR(var_s3(tau, w, q), 1.0, 1e-14);
}

TEST(ProjectionEstimators, ConstantEffectsGiveZero) {
  const auto d = make_design({{3, 1}, {3, 2}, {3, 1}, {3, 1}});
  const QMatrix q = build_q1(d);
  const Eigen::VectorXd w = weight_vector(d);
  const Eigen::VectorXd tau = Eigen::VectorXd::Constant(4, 2.5);
  EXPECT_NEAR(var_s1(tau, w, q), 0.0, 1e-14);
  EXPECT_NEAR(var_s2(tau, w, q), 0.0, 1e-14);
  EXPECT_NEAR(var_s3(tau, w, q), 0.0, 1e-14);
}

TEST(ProjectionEstimators, S1WithQ1EqualsPairedFormOnEqualSizes) {
  std::mt19937_64 rng(101);
  for (int rep = 0; rep < 200; ++rep) {
    const auto ex = random_experiment(rng, true, 0);
    const auto e = block_effects(ex.design, ex.data);
    const Eigen::VectorXd w = weight_vector(ex.design);
    const double B = static_cast<double>(e.num_blocks());
    const double closed = (e.tau_hat.array() - e.tau_hat.mean()).square().sum() / (B * (B - 1.0));
    EXPECT_NEAR(var_s1(e, w, build_q1(ex.design)), closed, 1e-10 * closed);
  }
}

TEST(ProjectionEstimators, S2MatchesHc3Intercept) {
  std::mt19937_64 rng(202);
  for (int rep = 0; rep < 100; ++rep) {
    const auto ex = random_experiment(rng, rep % 2 == 0, 2, 12);
    const QMatrix q2 = build_q2(ex.design, 1);
    const auto e = block_effects(ex.design, ex.data);
    const Eigen::VectorXd w = weight_vector(ex.design);
    const Eigen::VectorXd y = (w.array() * e.tau_hat.array()).matrix();
    const double hc3 = hc3_first_coefficient(q2.values, y);
    EXPECT_NEAR(var_s2(e, w, q2), hc3, 1e-8 * hc3);
  }
}

TEST(ProjectionEstimators, OrderingsAndNonnegativity) {
  std::mt19937_64 rng(303);
  for (int rep = 0; rep < 300; ++rep) {
    const auto ex = random_experiment(rng, rep % 3 != 0, 1);
    const auto e = block_effects(ex.design, ex.data);
    const Eigen::VectorXd w = weight_vector(ex.design);
    for (const QMatrix& q : {build_q1(ex.design), build_q2(ex.design, 1)}) {
      const double s1 = var_s1(e, w, q);
      const double s2 = var_s2(e, w, q);
      const double s3 = var_s3(e, w, q);
      EXPECT_GE(s1, 0.0);
      EXPECT_GE(s3, 0.0);
      EXPECT_LE(s3, s2 * (1.0 + 1e-12));
      if (ex.design.equal_block_sizes() && q.kind == QKind::Q1) EXPECT_GE(s2, s1 * (1.0 - 1e-12));
    }
  }
}

TEST(ProjectionEstimators, ScaleEquivariance) {
  std::mt19937_64 rng(404);
  const auto ex = random_experiment(rng, false, 1);
  Observed scaled = ex.data;
  for (auto& r : scaled.responses)
    for (auto& v : r) v *= -2.5;
  const auto e = block_effects(ex.design, ex.data);
  const auto es = block_effects(ex.design, scaled);
  const Eigen::VectorXd w = weight_vector(ex.design);
  const QMatrix q = build_q2(ex.design, 1);
  EXPECT_NEAR(estimate_ate(es, w), -2.5 * estimate_ate(e, w), 1e-12);
  EXPECT_NEAR(var_s1(es, w, q), 6.25 * var_s1(e, w, q), 1e-10);
  EXPECT_NEAR(var_s2(es, w, q), 6.25 * var_s2(e, w, q), 1e-10);
  EXPECT_NEAR(var_s3(es, w, q), 6.25 * var_s3(e, w, q), 1e-10);
}

TEST(ConfidenceInterval, Examples) {
  const auto zero = confidence_interval(3.0, 0.0, 0.05);
  EXPECT_DOUBLE_EQ(zero.first, 3.0);
  EXPECT_DOUBLE_EQ(zero.second, 3.0);
  const auto ci = confidence_interval(13.4, 4.2 * 4.2, 0.05);
  EXPECT_NEAR(ci.first, 5.17, 0.005);
  EXPECT_NEAR(ci.second, 21.63, 0.005);
  const auto narrow = confidence_interval(13.4, 4.2 * 4.2, 0.32);
  EXPECT_LT(narrow.second - narrow.first, ci.second - ci.first);
  EXPECT_EQ(kind_of([] { confidence_interval(0.0, 1.0, 1.0); }), ErrorKind::InvalidAlpha);
  EXPECT_EQ(kind_of([] { confidence_interval(0.0, 1.0, 0.0); }), ErrorKind::InvalidAlpha);
}

TEST(Analyze, ReportsAndCompatibility) {
  const auto d = make_design({{2, 1}, {2, 1}, {2, 1}});
  const Observed data = observed({{1, 0}, {0, 1}, {1, 0}}, {{3, 1}, {0, 4}, {5, 5}});
  AnalysisOptions opts;
  opts.estimators = {"s1", "s2", "s3", "paired"};
  const auto rep = analyze(d, data, build_q1(d), opts);
  EXPECT_NEAR(rep.delta_hat, 2.0, 1e-14);
  EXPECT_NEAR(rep.estimates.at("s1"), rep.estimates.at("paired"), 1e-12);
  EXPECT_EQ(rep.design_class, "fine");
  for (const auto& [name, ci] : rep.ci) EXPECT_NEAR((ci.first + ci.second) / 2.0, rep.delta_hat, 1e-12);

  AnalysisOptions coarse;
  coarse.estimators = {"coarse"};
  EXPECT_EQ(kind_of([&] { analyze(d, data, build_q1(d), coarse); }), ErrorKind::IncompatibleEstimator);

  const auto cd = make_design({{4, 2}, {4, 2}, {4, 2}});
  const Observed cdata = observed({{1, 1, 0, 0}, {1, 0, 1, 0}, {0, 0, 1, 1}}, {{1, 2, 3, 4}, {2, 2, 3, 1}, {0, 1, 5, 2}});
  AnalysisOptions paired;
  paired.estimators = {"paired"};
  EXPECT_EQ(kind_of([&] { analyze(cd, cdata, build_q1(cd), paired); }), ErrorKind::IncompatibleEstimator);
  AnalysisOptions unknown;
  unknown.estimators = {"hc0"};
  EXPECT_EQ(kind_of([&] { analyze(cd, cdata, build_q1(cd), unknown); }), ErrorKind::IncompatibleEstimator);
  EXPECT_NO_THROW(analyze(cd, cdata, build_q1(cd), coarse));
}

TEST(Analyze, S3OnUnequalSizesWarns) {
  const auto d = make_design({{2, 1}, {3, 1}, {2, 1}, {3, 1}});
  const Observed data = observed({{1, 0}, {1, 0, 0}, {0, 1}, {0, 0, 1}}, {{3, 1}, {0, 4, 1}, {5, 5}, {1, 2, 9}});
  AnalysisOptions opts;
  opts.estimators = {"s3"};
  const auto rep = analyze(d, data, build_q1(d), opts);
  ASSERT_FALSE(rep.warnings.empty());
  EXPECT_NE(rep.warnings.back().find("unequal"), std::string::npos);
}
