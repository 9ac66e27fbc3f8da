#include <gtest/gtest.h>

#include <algorithm>
#include <functional>
#include <random>

#include "stratavar/oracle.hpp"

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

// Independent enumeration: recursive product of per-block std::next_permutation
// orderings, sharing no code with the library's AssignmentSpace.
void for_each_assignment(const BlockDesign& d, const std::function<void(const Assignment&)>& fn) {
  Assignment a;
  a.z.resize(d.num_blocks());
  std::function<void(std::size_t)> rec = [&](std::size_t i) {
    if (i == d.num_blocks()) {
      fn(a);
      return;
    }
    const auto& b = d.block(i);
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(b.n), 0);
    std::fill(mask.end() - b.n_treated, mask.end(), 1);
    do {
      a.z[i] = mask;
      rec(i + 1);
    } while (std::next_permutation(mask.begin(), mask.end()));
  };
  rec(0);
}

struct Moments {
  double mean = 0.0;
  double var = 0.0;
};

Moments enumerate_moments(const PotentialWorld& world, const Statistic& s) {
  std::vector<double> vals;
  for_each_assignment(world.design, [&](const Assignment& a) { vals.push_back(s(world.design, realize(world, a))); });
  Moments m;
  for (double v : vals) m.mean += v;
  m.mean /= static_cast<double>(vals.size());
  for (double v : vals) m.var += (v - m.mean) * (v - m.mean);
  m.var /= static_cast<double>(vals.size());
  return m;
}

double delta_hat(const BlockDesign& d, const Observed& o) {
  return estimate_ate(block_effects(d, o), weight_vector(d));
}

PotentialWorld random_world(std::mt19937_64& rng, const std::vector<std::pair<int, int>>& sizes) {
  std::normal_distribution<double> nd(0.0, 1.5);
  const auto d = make_design(sizes);
  std::vector<std::vector<double>> r1(d.num_blocks());
  std::vector<std::vector<double>> r0(d.num_blocks());
  for (std::size_t i = 0; i < d.num_blocks(); ++i) {
    const double shift = nd(rng);
    for (int j = 0; j < d.block(i).n; ++j) {
      r0[i].push_back(nd(rng));
      r1[i].push_back(r0[i].back() + 1.0 + shift + 0.7 * nd(rng));
    }
  }
  return make_world(d, r1, r0);
}

// 80 units on x = 0.25, 0.25, 0.5, 0.5, ..., 10, 10 grouped consecutively,
// r1 = 100 + 30x + eps, r0 = 20x + eps with one eps ~ N(0, 100) per unit.
CateModel grid(int per_block) {
  std::vector<double> x;
  for (int k = 1; k <= 40; ++k) x.insert(x.end(), {0.25 * k, 0.25 * k});
  std::vector<Block> blocks;
  std::vector<std::vector<double>> f1;
  std::vector<std::vector<double>> f0;
  for (std::size_t start = 0; start < x.size(); start += static_cast<std::size_t>(per_block)) {
    Block b{"g" + std::to_string(start), per_block, per_block / 2, {}};
    std::vector<double> a1;
    std::vector<double> a0;
    for (int j = 0; j < per_block; ++j) {
      const double xv = x[start + static_cast<std::size_t>(j)];
      b.covariates.push_back({xv});
      a1.push_back(100.0 + 30.0 * xv);
      a0.push_back(20.0 * xv);
    }
    blocks.push_back(b);
    f1.push_back(a1);
    f0.push_back(a0);
  }
  const auto d = validate_design(blocks);
  return make_cate_model(d, f1, f0, std::vector<NoiseCov>(d.num_blocks(), NoiseCov{100.0, 100.0, 100.0}));
}

}  // namespace

TEST(Sate, Examples) {
  const auto d = make_design({{2, 1}, {3, 1}});
  EXPECT_DOUBLE_EQ(sate(make_world(d, {{1, 1}, {2, 2, 2}}, {{1, 1}, {2, 2, 2}})), 0.0);
  EXPECT_DOUBLE_EQ(sate(make_world(d, {{3, 2}, {2, 5, 2}}, {{1, 0}, {0, 3, 0}})), 2.0);
  EXPECT_NEAR(sate(make_world(d, {{1, 1}, {4, 4, 4}}, {{0, 0}, {0, 0, 0}})), 2.8, 1e-14);
  const auto m = make_cate_model(d, {{1, 1}, {4, 4, 4}}, {{0, 0}, {0, 0, 0}}, {NoiseCov{1, 1, 0}, NoiseCov{1, 1, 0}});
  EXPECT_NEAR(cate(m), 2.8, 1e-14);
}

TEST(TrueVariance, PairExample) {
  const auto d = make_design({{2, 1}, {2, 1}});
  const auto w = make_world(d, {{1, 3}, {2, 2}}, {{0, 0}, {0, 0}});
  EXPECT_NEAR(true_block_variance(w, 0), 1.0, 1e-14);
  EXPECT_NEAR(true_block_variance(w, 1), 0.0, 1e-14);
  EXPECT_NEAR(true_ate_variance(w), 0.25, 1e-14);
  EXPECT_NEAR(enumerate_moments(w, delta_hat).var, 0.25, 1e-14);
}

TEST(TrueVariance, QuartetGridBlock) {
  const auto quartets = grid(4);
  const BlockMoments m = cate_moments(quartets);
  // f-part of the first quartet, x = (.25, .25, .5, .5), enumerated over its 6 splits.
  const PotentialWorld first{make_design({{4, 2}, {2, 1}}),
                             {{107.5, 107.5, 115, 115}, {0, 0}},
                             {{5, 5, 10, 10}, {0, 0}}};
  const double f_part = enumerate_moments(first, [](const BlockDesign& d, const Observed& o) {
    return block_effects(d, o).tau_hat(0);
  }).var;
  EXPECT_NEAR(m.variance(0), f_part + 100.0, 1e-10);
  EXPECT_NEAR(m.variance(0), 113.02, 0.005);
  EXPECT_NEAR(cate_variance(quartets), 5.65, 0.005);
  EXPECT_NEAR(cate_variance(grid(2)), 5.00, 1e-12);
}

TEST(TrueVariance, MatchesEnumerationOnRandomWorlds) {
  std::mt19937_64 rng(1);
  for (int rep = 0; rep < 30; ++rep) {
    const auto w = random_world(rng, {{2, 1}, {3, 1}, {4, 2}, {3, 2}});
    const Moments dm = enumerate_moments(w, delta_hat);
    EXPECT_NEAR(dm.mean, sate(w), 1e-12);
    EXPECT_NEAR(dm.var, true_ate_variance(w), 1e-10 * std::max(1.0, dm.var));
  }
}

TEST(BiasS1, PairsInterceptOnlyMatchesPairedBias) {
  const auto pairs = grid(2);
  const auto q = build_q_custom(Eigen::MatrixXd::Ones(40, 1));
  const double bias = expected_bias_s1(pairs, q);
  EXPECT_NEAR(bias, 21.354, 0.0005);
  EXPECT_NEAR(bias, expected_bias_paired(cate_moments(pairs)), 1e-12);
  // Closed form with f-bar = 100 + 10x: 100 * sum (x - mean)^2 / (B (B - 1)).
  double ss = 0.0;
  for (int k = 1; k <= 40; ++k) ss += (0.25 * k - 5.125) * (0.25 * k - 5.125);
  EXPECT_NEAR(ss, 333.125, 1e-10);
  EXPECT_NEAR(bias, 100.0 * ss / (40.0 * 39.0), 1e-10);
}

TEST(BiasS1, ConstantEffectsGiveZero) {
  const auto d = make_design({{3, 1}, {3, 1}, {3, 2}, {3, 1}});
  const auto w = make_world(d, {{2, 3, 4}, {5, 6, 7}, {1, 1, 1}, {0, 2, 4}}, {{0, 1, 2}, {3, 4, 5}, {-1, -1, -1}, {-2, 0, 2}});
  EXPECT_NEAR(expected_bias_s1(w, build_q1(d)), 0.0, 1e-14);
  const auto s2 = expected_bias_s2(w, build_q1(d));
  EXPECT_NEAR(s2.quadratic, 0.0, 1e-14);
}

TEST(BiasS2, ZeroWithinBlockVarianceAndConstantMeans) {
  const auto d = make_design({{2, 1}, {2, 1}, {2, 1}});
  const auto w = make_world(d, {{3, 3}, {3, 3}, {3, 3}}, {{1, 1}, {1, 1}, {1, 1}});
  const auto e = expected_bias_s2(w, build_q1(d));
  EXPECT_NEAR(e.inflation, 0.0, 1e-14);
  EXPECT_NEAR(e.quadratic, 0.0, 1e-14);
}

TEST(Table2Cells, PairsProjectionEstimators) {
  const auto pairs = grid(2);
  const BlockMoments m = cate_moments(pairs);
  const Eigen::VectorXd w = weight_vector(pairs.design);
  const Eigen::MatrixXd x = block_covariate_means(pairs.design);
  const Eigen::MatrixXd bx = x.array().unaryExpr([](double v) { return std::exp(v / 3.0); }).matrix();
  const QMatrix qx = build_q2(pairs.design, x);
  const QMatrix qb = build_q2(pairs.design, bx);
  const QMatrix qb3 = build_q2(pairs.design, bx, 3);
  EXPECT_NEAR(expected_s1(m, w, qx).expectation, 5.09, 0.005);
  // Published cells are rounded; 5.2661 prints as 5.26 in the table.
  EXPECT_NEAR(expected_s2(m, w, qx).expectation, 5.26, 0.01);
  EXPECT_NEAR(m.variance.mean() / 40.0 + expected_bias_s3(pairs, qx), 5.00, 1e-10);
  EXPECT_NEAR(expected_s1(m, w, qb).expectation, 7.12, 0.005);
  EXPECT_NEAR(expected_s2(m, w, qb3).expectation, 6.06, 0.005);
  EXPECT_NEAR(cate_variance(pairs) + expected_bias_s3(pairs, qb3), 5.24, 0.005);
  // The general S3 expectation agrees with the homoskedastic shortcut.
  EXPECT_NEAR(expected_s3(m, w, qb3).expectation, cate_variance(pairs) + expected_bias_s3(pairs, qb3), 1e-10);
}

TEST(BiasS3, Preconditions) {
  const auto unequal = make_design({{2, 1}, {3, 1}, {2, 1}, {3, 1}});
  const auto m = make_cate_model(unequal, {{1, 1}, {1, 1, 1}, {1, 1}, {1, 1, 1}}, {{0, 0}, {0, 0, 0}, {0, 0}, {0, 0, 0}},
                                 std::vector<NoiseCov>(4, NoiseCov{1, 1, 0}));
  EXPECT_EQ(kind_of([&] { expected_bias_s3(m, build_q1(unequal)); }), ErrorKind::PreconditionViolated);
  const auto equal = make_design({{2, 1}, {2, 1}, {2, 1}});
  const auto het = make_cate_model(equal, {{1, 1}, {1, 1}, {1, 1}}, {{0, 0}, {0, 0}, {0, 0}},
                                   {NoiseCov{1, 1, 0}, NoiseCov{2, 1, 0}, NoiseCov{1, 1, 0}});
  EXPECT_EQ(kind_of([&] { expected_bias_s3(het, build_q1(equal)); }), ErrorKind::PreconditionViolated);
  const auto flat = make_cate_model(equal, {{4, 4}, {4, 4}, {4, 4}}, {{1, 1}, {1, 1}, {1, 1}},
                                    std::vector<NoiseCov>(3, NoiseCov{1, 1, 0}));
  EXPECT_NEAR(expected_bias_s3(flat, build_q1(equal)), 0.0, 1e-14);
}

TEST(BiasScs, QuartetGridAndScaling) {
  const auto quartets = grid(4);
  const double bias = expected_bias_scs(quartets);
  EXPECT_NEAR(bias, 20.0 * (25.0 / 48.0) / 400.0, 1e-12);
  EXPECT_NEAR(cate_variance(quartets) + bias, 5.68, 0.005);

  const auto d = make_design({{4, 2}, {4, 2}});
  const auto additive = make_world(d, {{3, 4, 5, 6}, {1, 1, 2, 2}}, {{1, 2, 3, 4}, {0, 0, 1, 1}});
  EXPECT_NEAR(expected_bias_scs(additive), 0.0, 1e-14);
  const auto w1 = make_world(d, {{1, 4, 2, 7}, {3, 0, 1, 1}}, {{0, 0, 0, 0}, {0, 0, 0, 0}});
  const auto w2 = make_world(d, {{2, 8, 4, 14}, {6, 0, 2, 2}}, {{0, 0, 0, 0}, {0, 0, 0, 0}});
  EXPECT_NEAR(expected_bias_scs(w2), 4.0 * expected_bias_scs(w1), 1e-12);
  EXPECT_EQ(kind_of([] { expected_bias_scs(make_world(make_design({{2, 1}, {4, 2}}), {{1, 2}, {1, 2, 3, 4}},
                                                         {{0, 0}, {0, 0, 0, 0}})); }),
            ErrorKind::NotCoarse);
}

TEST(BruteForce, DeltaHatIsUnbiased) {
  std::mt19937_64 rng(2);
  const auto w = random_world(rng, {{2, 1}, {3, 2}, {4, 1}});
  EXPECT_NEAR(brute_force_expectation(w, delta_hat), sate(w), 1e-12);
}

TEST(BruteForce, S1OnThreePairs) {
  std::mt19937_64 rng(3);
  const auto w = random_world(rng, {{2, 1}, {2, 1}, {2, 1}});
  const QMatrix q = build_q1(w.design);
  const Statistic s1 = [&](const BlockDesign& d, const Observed& o) {
    return var_s1(block_effects(d, o), weight_vector(d), q);
  };
  const double brute = brute_force_expectation(w, s1);
  EXPECT_NEAR(brute, enumerate_moments(w, s1).mean, 1e-12);
  EXPECT_NEAR(brute, true_ate_variance(w) + expected_bias_s1(w, q), 1e-10 * brute);
}

TEST(BruteForce, CoarseOnTwoQuartets) {
  std::mt19937_64 rng(4);
  const auto w = random_world(rng, {{4, 2}, {4, 2}});
  const Statistic scs = [](const BlockDesign& d, const Observed& o) {
    return var_coarse_classical(block_effects(d, o), weight_vector(d));
  };
  const double brute = brute_force_expectation(w, scs);
  EXPECT_NEAR(brute, true_ate_variance(w) + expected_bias_scs(w), 1e-10 * brute);
}

TEST(BruteForce, SpaceTooLarge) {
  std::vector<std::pair<int, int>> sizes(15, {2, 1});
  std::mt19937_64 rng(5);
  const auto w = random_world(rng, sizes);
  EXPECT_EQ(kind_of([&] { brute_force_expectation(w, delta_hat); }), ErrorKind::SpaceTooLarge);
}

TEST(BruteForce, ThreadCountDoesNotChangeResult) {
  std::mt19937_64 rng(6);
  const auto w = random_world(rng, {{3, 1}, {4, 2}, {3, 2}, {2, 1}});
  const QMatrix q = build_q1(w.design);
  const Statistic s2 = [&](const BlockDesign& d, const Observed& o) {
    return var_s2(block_effects(d, o), weight_vector(d), q);
  };
  EXPECT_EQ(brute_force_expectation(w, s2, kBruteForceCap, 1), brute_force_expectation(w, s2, kBruteForceCap, 3));
}

TEST(BruteForce, ProjectionEstimatorsOnRandomWorldsWithCovariates) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int rep = 0; rep < 20; ++rep) {
    const auto w = random_world(rng, {{2, 1}, {3, 1}, {2, 1}, {4, 2}, {3, 2}, {2, 1}});
    Eigen::MatrixXd x(6, 1);
    for (Eigen::Index i = 0; i < 6; ++i) x(i, 0) = u(rng);
    const QMatrix q = build_q2(w.design, x);
    const auto stats = brute_force_expectations(
        w, {[&](const BlockDesign& d, const Observed& o) { return var_s1(block_effects(d, o), weight_vector(d), q); },
            [&](const BlockDesign& d, const Observed& o) { return var_s2(block_effects(d, o), weight_vector(d), q); },
            [&](const BlockDesign& d, const Observed& o) { return var_s3(block_effects(d, o), weight_vector(d), q); }});
    const BlockMoments m = world_moments(w);
    const Eigen::VectorXd wv = weight_vector(w.design);
    EXPECT_NEAR(stats[0], expected_s1(m, wv, q).expectation, 1e-9 * stats[0]);
    EXPECT_NEAR(stats[1], expected_s2(m, wv, q).expectation, 1e-9 * stats[1]);
    EXPECT_NEAR(stats[2], expected_s3(m, wv, q).expectation, 1e-9 * stats[2]);
    EXPECT_GE(stats[0], true_ate_variance(w) - 1e-12);
    EXPECT_GE(stats[1], true_ate_variance(w) - 1e-12);
  }
}

TEST(DrawWorld, NoiseCovarianceIsRespected) {
  const auto d = make_design({{2, 1}, {2, 1}});
  const auto model = make_cate_model(d, {{0, 0}, {0, 0}}, {{0, 0}, {0, 0}},
                                     std::vector<NoiseCov>(2, NoiseCov{4.0, 1.0, 1.5}));
  std::mt19937_64 rng(8);
  double s11 = 0.0;
  double s00 = 0.0;
  double s10 = 0.0;
  const int draws = 50'000;
  for (int k = 0; k < draws; ++k) {
    const auto w = draw_world(model, rng);
    s11 += w.r1[0][0] * w.r1[0][0];
    s00 += w.r0[0][0] * w.r0[0][0];
    s10 += w.r1[0][0] * w.r0[0][0];
  }
  EXPECT_NEAR(s11 / draws, 4.0, 0.1);
  EXPECT_NEAR(s00 / draws, 1.0, 0.03);
  EXPECT_NEAR(s10 / draws, 1.5, 0.05);
}

TEST(LimitDiagnostics, OrthogonalAndAlignedEffects) {
  std::vector<std::pair<int, int>> sizes(6, {2, 1});
  const auto d = make_design(sizes);
  Eigen::MatrixXd x(6, 1);
  x << 1, 2, 3, 4, 5, 6;
  // Constant effects are orthogonal to the centered covariate.
  std::vector<std::vector<double>> r0(6, {0.0, 0.0});
  std::vector<std::vector<double>> flat(6, {2.0, 2.0});
  const auto w0 = make_world(d, flat, r0);
  const Assignment a = sample_assignment(d, 1);
  EXPECT_NEAR(empirical_limit_diagnostics(w0, x, build_q1(d), a).beta_quadform, 0.0, 1e-14);
  // Effects linear in x: the projection reproduces the centered effects.
  std::vector<std::vector<double>> lin;
  for (int i = 0; i < 6; ++i) lin.push_back({3.0 * (i + 1), 3.0 * (i + 1)});
  const auto w1 = make_world(d, lin, r0);
  double between = 0.0;
  for (int i = 0; i < 6; ++i) between += std::pow(3.0 * (i + 1) - 10.5, 2);
  EXPECT_NEAR(empirical_limit_diagnostics(w1, x, build_q1(d), a).beta_quadform, between / 6.0, 1e-10);
}

TEST(TraceIdentity, HomoskedasticEqualSizes) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> nd;
  for (int rep = 0; rep < 20; ++rep) {
    const int B = 12;
    Eigen::MatrixXd v(B, 3);
    for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = nd(rng);
    const QMatrix q = build_q_custom(v);
    const auto psi = psi_matrices(q);
    const double nu = 2.5;
    const Eigen::MatrixXd R = Eigen::MatrixXd::Identity(B, B) - q.hat;
    const double tr = (nu * R * psi.psi_tilde.asDiagonal() * R).trace();
    EXPECT_NEAR(tr, B * nu, 1e-9);
  }
}
