#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "stratavar/design.hpp"
#include "stratavar/estimators.hpp"
#include "stratavar/hettest.hpp"
#include "stratavar/oracle.hpp"
#include "stratavar/parallel.hpp"
#include "stratavar/projection.hpp"

namespace stratavar {

// ---------------------------------------------------------------------------
// Friedman-style generative model with block-level covariates.
// ---------------------------------------------------------------------------

struct FriedmanConfig {
  int blocks = 100;
  double a = 2.0;  ///< treatment scale on the response surface
  double b = 2.0;  ///< noise scale on the treated arm
  std::uint64_t seed = 1;
  double triplet_fraction = 0.4;
  int covariate_dim = 10;
  double signal_scale = 1.0;  ///< 0 gives a noise-only world
};

/// 10 sin(pi x1 x2) + 20 (x3 - 1/2)^2 + 10 exp(x4) + 5 (x5 - 1/2)^3
inline double friedman_surface(const Eigen::Ref<const Eigen::RowVectorXd>& x) {
  return 10.0 * std::sin(std::numbers::pi * x(0) * x(1)) + 20.0 * (x(2) - 0.5) * (x(2) - 0.5) +
         10.0 * std::exp(x(3)) + 5.0 * std::pow(x(4) - 0.5, 3);
}

/// The four transformed covariates of the correctly specified surface.
inline Eigen::MatrixXd friedman_transformed(const Eigen::MatrixXd& x) {
  Eigen::MatrixXd out(x.rows(), 4);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    out(i, 0) = std::sin(std::numbers::pi * x(i, 0) * x(i, 1));
    out(i, 1) = (x(i, 2) - 0.5) * (x(i, 2) - 0.5);
    out(i, 2) = std::exp(x(i, 3));
    out(i, 3) = std::pow(x(i, 4) - 0.5, 3);
  }
  return out;
}

/// round(fraction * B) triplets followed by pairs. Triplets alternate one and
/// two treated units; every unit carries its block's covariate vector.
inline BlockDesign friedman_design(const Eigen::MatrixXd& x, double triplet_fraction) {
  const auto B = static_cast<int>(x.rows());
  const int triplets = static_cast<int>(std::lround(triplet_fraction * B));
  std::vector<Block> blocks;
  blocks.reserve(static_cast<std::size_t>(B));
  for (int i = 0; i < B; ++i) {
    const bool triplet = i < triplets;
    Block b;
    b.id = (triplet ? "t" : "p") + std::to_string(i + 1);
    b.n = triplet ? 3 : 2;
    b.n_treated = triplet ? 1 + (i % 2) : 1;
    std::vector<double> xi(x.cols());
    for (Eigen::Index k = 0; k < x.cols(); ++k) xi[static_cast<std::size_t>(k)] = x(i, k);
    b.covariates.assign(static_cast<std::size_t>(b.n), xi);
    blocks.push_back(std::move(b));
  }
  return validate_design(std::move(blocks));
}

struct FriedmanWorld {
  PotentialWorld world;
  CateModel model;
  Eigen::MatrixXd x;  ///< B x covariate_dim block-level covariates
};

/// One draw: covariates iid U[0,1], then one noise draw per unit added to
/// both arms (scaled by b on the treated arm).
template <typename Rng>
FriedmanWorld friedman_world(const FriedmanConfig& cfg, Rng& rng) {
  if (cfg.blocks < 5) throw Error(ErrorKind::TooFewBlocks, "the Friedman model needs at least 5 blocks");
  if (cfg.covariate_dim < 5) throw Error(ErrorKind::DimensionMismatch, "the Friedman surface uses 5 covariates");
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd x(cfg.blocks, cfg.covariate_dim);
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index k = 0; k < x.cols(); ++k) x(i, k) = unif(rng);
  BlockDesign design = friedman_design(x, cfg.triplet_fraction);

  std::vector<std::vector<double>> f1(design.num_blocks());
  std::vector<std::vector<double>> f0(design.num_blocks());
  std::vector<std::vector<double>> r1(design.num_blocks());
  std::vector<std::vector<double>> r0(design.num_blocks());
  std::vector<NoiseCov> noise(design.num_blocks(), NoiseCov{cfg.b * cfg.b, 1.0, cfg.b});
  for (std::size_t i = 0; i < design.num_blocks(); ++i) {
    const double f = cfg.signal_scale * friedman_surface(x.row(static_cast<Eigen::Index>(i)));
    const int n = design.block(i).n;
    f1[i].assign(static_cast<std::size_t>(n), cfg.a * f);
    f0[i].assign(static_cast<std::size_t>(n), f);
    for (int j = 0; j < n; ++j) {
      const double eps = normal(rng);
      r1[i].push_back(cfg.a * f + cfg.b * eps);
      r0[i].push_back(f + eps);
    }
  }
  FriedmanWorld out{PotentialWorld{design, std::move(r1), std::move(r0)},
                    CateModel{design, std::move(f1), std::move(f0), std::move(noise)}, std::move(x)};
  return out;
}

inline FriedmanWorld friedman_world(const FriedmanConfig& cfg) {
  std::mt19937_64 rng(cfg.seed);
  return friedman_world(cfg, rng);
}

/// How Q is formed from the block-level covariates.
enum class QSpec { None, Correct, Incorrect };

inline const char* to_string(QSpec s) {
  switch (s) {
    case QSpec::None: return "none";
    case QSpec::Correct: return "correct";
    case QSpec::Incorrect: return "incorrect";
  }
  return "unknown";
}

inline constexpr std::array<QSpec, 3> kAllQSpecs{QSpec::None, QSpec::Correct, QSpec::Incorrect};

/// None: Q1 only. Correct: Q1 plus weighted transformed covariates.
/// Incorrect: Q1 plus the weighted raw covariates.
inline QMatrix q_for_spec(const BlockDesign& design, const Eigen::MatrixXd& x, QSpec spec) {
  switch (spec) {
    case QSpec::None: return build_q1(design);
    case QSpec::Correct: return build_q2(design, friedman_transformed(x));
    case QSpec::Incorrect: return build_q2(design, x);
  }
  return build_q1(design);
}

/// Monte Carlo mean with its standard error.
struct McSummary {
  double mean = 0.0;
  double se = 0.0;
  std::size_t reps = 0;
};

inline McSummary summarize(const std::vector<double>& v) {
  McSummary s;
  s.reps = v.size();
  if (v.empty()) return s;
  double sum = 0.0;
  for (double x : v) sum += x;
  s.mean = sum / static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.se = std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
  }
  return s;
}

/// Sample variance of v, with a delta-method standard error.
inline McSummary summarize_variance(const std::vector<double>& v) {
  McSummary s;
  s.reps = v.size();
  if (v.size() < 2) return s;
  const double n = static_cast<double>(v.size());
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= n;
  double m2 = 0.0;
  double m4 = 0.0;
  for (double x : v) {
    const double d = (x - mean) * (x - mean);
    m2 += d;
    m4 += d * d;
  }
  s.mean = m2 / (n - 1.0);
  const double pop_m2 = m2 / n;
  s.se = std::sqrt(std::max(0.0, (m4 / n - pop_m2 * pop_m2) / n));
  return s;
}

// ---------------------------------------------------------------------------
// Variance-estimator expectations under repeated covariate draws.
// ---------------------------------------------------------------------------

struct Table1Config {
  std::size_t reps = 10'000;
  std::uint64_t seed = 7;
  int blocks = 100;
  double a = 2.0;
  double b = 2.0;
  double signal_scale = 1.0;
  unsigned threads = 1;
};

/// One replicate's raw values.
struct Table1Replicate {
  std::array<std::array<double, 3>, 3> estimates{};  ///< [estimator S1..S3][QSpec]
  double delta_hat = 0.0;
  double sate = 0.0;
  double cate = 0.0;
  double var_given_finite = 0.0;
  double var_given_covariates = 0.0;
};

struct Table1Result {
  std::array<std::array<McSummary, 3>, 3> cells{};  ///< [estimator S1..S3][QSpec]
  McSummary var_given_finite;      ///< mean of var(Delta-hat | F, Z)
  McSummary var_given_covariates;  ///< mean of var(Delta-hat | C, Z)
  McSummary var_unconditional;     ///< empirical var(Delta-hat | Z)
  McSummary delta_hat;
  McSummary sate;
  std::vector<Table1Replicate> raw;
};

inline Table1Replicate table1_replicate(const Table1Config& cfg, std::size_t rep) {
  auto rng = replicate_engine(cfg.seed, rep);
  FriedmanConfig fc;
  fc.blocks = cfg.blocks;
  fc.a = cfg.a;
  fc.b = cfg.b;
  fc.signal_scale = cfg.signal_scale;
  const FriedmanWorld fw = friedman_world(fc, rng);
  const auto& design = fw.world.design;
  const Assignment z = sample_assignment(design, rng);
  const BlockEffects e = block_effects(design, realize(fw.world, z));
  const Eigen::VectorXd w = weight_vector(design);

  Table1Replicate out;
  for (std::size_t s = 0; s < kAllQSpecs.size(); ++s) {
    const QMatrix q = q_for_spec(design, fw.x, kAllQSpecs[s]);
    out.estimates[0][s] = var_s1(e, w, q);
    out.estimates[1][s] = var_s2(e, w, q);
    out.estimates[2][s] = var_s3(e, w, q);
  }
  out.delta_hat = estimate_ate(e, w);
  out.sate = stratavar::sate(fw.world);
  out.cate = stratavar::cate(fw.model);
  out.var_given_finite = true_ate_variance(fw.world);
  out.var_given_covariates = cate_variance(fw.model);
  return out;
}

/// Draws a fresh world and one assignment per replicate, then averages every
/// estimator and the three variance targets.
inline Table1Result run_table1(const Table1Config& cfg, bool keep_raw = false) {
  std::vector<Table1Replicate> reps(cfg.reps);
  parallel_for(cfg.reps, cfg.threads, [&](std::size_t r) { reps[r] = table1_replicate(cfg, r); });

  Table1Result res;
  std::vector<double> buf(cfg.reps);
  auto column = [&](auto getter) {
    for (std::size_t r = 0; r < cfg.reps; ++r) buf[r] = getter(reps[r]);
    return buf;
  };
  for (std::size_t l = 0; l < 3; ++l)
    for (std::size_t s = 0; s < 3; ++s)
      res.cells[l][s] = summarize(column([&](const Table1Replicate& x) { return x.estimates[l][s]; }));
  res.var_given_finite = summarize(column([](const Table1Replicate& x) { return x.var_given_finite; }));
  res.var_given_covariates = summarize(column([](const Table1Replicate& x) { return x.var_given_covariates; }));
  res.delta_hat = summarize(column([](const Table1Replicate& x) { return x.delta_hat; }));
  res.sate = summarize(column([](const Table1Replicate& x) { return x.sate; }));
  res.var_unconditional = summarize_variance(column([](const Table1Replicate& x) { return x.delta_hat; }));
  if (keep_raw) res.raw = std::move(reps);
  return res;
}

// ---------------------------------------------------------------------------
// Covariate-using estimators against the unconditional variance.
// ---------------------------------------------------------------------------

struct PateDemoRow {
  QSpec spec = QSpec::None;
  McSummary s1;
  double gap = 0.0;     ///< mean S1 minus empirical var(Delta-hat | Z)
  double gap_se = 0.0;  ///< combined Monte Carlo standard error of the gap
  bool anticonservative = false;
};

struct PateDemoReport {
  McSummary var_unconditional;
  std::vector<PateDemoRow> rows;
};

/// Flags a spec as anticonservative when its mean S1 falls below the
/// empirical unconditional variance by more than 3 standard errors.
inline PateDemoReport pate_demo(std::size_t reps, std::uint64_t seed, double signal_scale = 1.0,
                                unsigned threads = 1) {
  Table1Config cfg;
  cfg.reps = reps;
  cfg.seed = seed;
  cfg.signal_scale = signal_scale;
  cfg.threads = threads;
  const Table1Result t = run_table1(cfg);
  PateDemoReport rep;
  rep.var_unconditional = t.var_unconditional;
  for (std::size_t s = 0; s < kAllQSpecs.size(); ++s) {
    PateDemoRow row;
    row.spec = kAllQSpecs[s];
    row.s1 = t.cells[0][s];
    row.gap = row.s1.mean - t.var_unconditional.mean;
    row.gap_se = std::sqrt(row.s1.se * row.s1.se + t.var_unconditional.se * t.var_unconditional.se);
    row.anticonservative = row.gap < -3.0 * row.gap_se;
    rep.rows.push_back(row);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Power of the additivity test.
// ---------------------------------------------------------------------------

struct PowerConfig {
  std::vector<double> a_grid{1.0, 1.1, 1.2, 1.3, 1.4, 1.5};
  std::size_t reps = 1000;
  std::uint64_t draws = 999;
  std::uint64_t seed = 11;
  int blocks = 20;
  double b = 1.0;
  double alpha = 0.05;
  unsigned threads = 1;
};

struct PowerRow {
  double a = 0.0;
  QSpec spec = QSpec::Correct;
  std::size_t rejections = 0;
  std::size_t reps = 0;
  double rate = 0.0;
  double se = 0.0;
};

/// Rejection rates per (a, Q spec). Both specs see the same worlds and
/// assignments within a replicate.
inline std::vector<PowerRow> run_power_curve(const PowerConfig& cfg) {
  std::vector<PowerRow> rows;
  for (std::size_t g = 0; g < cfg.a_grid.size(); ++g) {
    const double a = cfg.a_grid[g];
    std::vector<std::array<std::uint8_t, 2>> reject(cfg.reps);
    parallel_for(cfg.reps, cfg.threads, [&](std::size_t r) {
      auto rng = replicate_engine(derive_seed(cfg.seed, g), r);
      FriedmanConfig fc;
      fc.blocks = cfg.blocks;
      fc.a = a;
      fc.b = cfg.b;
      const FriedmanWorld fw = friedman_world(fc, rng);
      const Assignment z = sample_assignment(fw.world.design, rng);
      const Observed obs = realize(fw.world, z);
      const QMatrix q1 = build_q1(fw.world.design);
      const std::array<QSpec, 2> specs{QSpec::Correct, QSpec::Incorrect};
      for (std::size_t s = 0; s < 2; ++s) {
        const QMatrix q2 = q_for_spec(fw.world.design, fw.x, specs[s]);
        const HetTestResult t = permutation_test(fw.world.design, obs, q1, q2, cfg.draws, derive_seed(cfg.seed ^ 0x5eedULL, r * 2 + s + g * 1'000'003ULL));
        reject[r][s] = t.p_value <= cfg.alpha ? 1 : 0;
      }
    });
    for (std::size_t s = 0; s < 2; ++s) {
      PowerRow row;
      row.a = a;
      row.spec = s == 0 ? QSpec::Correct : QSpec::Incorrect;
      row.reps = cfg.reps;
      for (const auto& rj : reject) row.rejections += rj[s];
      row.rate = static_cast<double>(row.rejections) / static_cast<double>(cfg.reps);
      row.se = std::sqrt(row.rate * (1.0 - row.rate) / static_cast<double>(cfg.reps));
      rows.push_back(row);
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Pairs against quartets: closed-form expectations on a fixed covariate grid.
// ---------------------------------------------------------------------------

struct Table2Row {
  std::string label;
  double s1 = 0.0;
  double s2 = 0.0;
  double s3 = 0.0;
};

struct Table2Report {
  double pairs_variance = 0.0;
  double paired_expectation = 0.0;
  double paired_bias = 0.0;
  double quartets_variance = 0.0;
  double coarse_expectation = 0.0;
  double coarse_bias = 0.0;
  std::vector<Table2Row> rows;
};

/// x = 0.25, 0.25, 0.5, 0.5, ..., 10, 10 with r1 = 100 + 30x + eps,
/// r0 = 20x + eps and eps ~ N(0, 10^2) shared by both arms of a unit.
inline CateModel grid_model(int units_per_block) {
  const int units = 80;
  const int B = units / units_per_block;
  std::vector<Block> blocks;
  std::vector<std::vector<double>> f1(static_cast<std::size_t>(B));
  std::vector<std::vector<double>> f0(static_cast<std::size_t>(B));
  for (int i = 0; i < B; ++i) {
    Block b;
    b.id = "g" + std::to_string(i + 1);
    b.n = units_per_block;
    b.n_treated = units_per_block / 2;
    for (int j = 0; j < units_per_block; ++j) {
      const int unit = i * units_per_block + j;
      const double x = 0.25 * (unit / 2 + 1);
      b.covariates.push_back({x});
      f1[static_cast<std::size_t>(i)].push_back(100.0 + 30.0 * x);
      f0[static_cast<std::size_t>(i)].push_back(20.0 * x);
    }
    blocks.push_back(std::move(b));
  }
  BlockDesign design = validate_design(std::move(blocks));
  std::vector<NoiseCov> noise(static_cast<std::size_t>(B), NoiseCov{100.0, 100.0, 100.0});
  return make_cate_model(std::move(design), std::move(f1), std::move(f0), std::move(noise));
}

inline Table2Report pairs_quartets_study() {
  Table2Report rep;
  const CateModel pairs = grid_model(2);
  const CateModel quartets = grid_model(4);
  const BlockMoments pm = cate_moments(pairs);
  const BlockMoments qm = cate_moments(quartets);
  const Eigen::VectorXd wp = weight_vector(pairs.design);
  const Eigen::VectorXd wq = weight_vector(quartets.design);

  rep.pairs_variance = ate_variance(pm, wp);
  rep.paired_bias = expected_bias_paired(pm);
  rep.paired_expectation = rep.pairs_variance + rep.paired_bias;
  rep.quartets_variance = ate_variance(qm, wq);
  rep.coarse_bias = expected_bias_scs(qm, wq);
  rep.coarse_expectation = rep.quartets_variance + rep.coarse_bias;

  const Eigen::MatrixXd x = block_covariate_means(pairs.design);
  const Eigen::MatrixXd bx = x.array().unaryExpr([](double v) { return std::exp(v / 3.0); }).matrix();
  struct Spec {
    const char* label;
    const Eigen::MatrixXd* cov;
    int degree;
  };
  const std::array<Spec, 4> specs{Spec{"Correct, Linear", &x, 1}, Spec{"Incorrect, Linear", &bx, 1},
                                  Spec{"Correct, Cubic", &x, 3}, Spec{"Incorrect, Cubic", &bx, 3}};
  for (const auto& s : specs) {
    const QMatrix q = build_q2(pairs.design, *s.cov, s.degree);
    Table2Row row;
    row.label = s.label;
    row.s1 = expected_s1(pm, wp, q).expectation;
    row.s2 = expected_s2(pm, wp, q).expectation;
    row.s3 = rep.pairs_variance + expected_bias_s3(pairs, q);
    rep.rows.push_back(row);
  }
  return rep;
}

}  // namespace stratavar
