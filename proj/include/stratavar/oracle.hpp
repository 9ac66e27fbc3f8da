#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "stratavar/design.hpp"
#include "stratavar/error.hpp"
#include "stratavar/estimators.hpp"
#include "stratavar/parallel.hpp"
#include "stratavar/projection.hpp"

namespace stratavar {

/// Full potential-outcome schedule (r1, r0) for every unit.
struct PotentialWorld {
  BlockDesign design;
  std::vector<std::vector<double>> r1;
  std::vector<std::vector<double>> r0;
};

/// Within-block noise covariance of (eps1, eps0).
struct NoiseCov {
  double var_treated = 0.0;
  double var_control = 0.0;
  double covariance = 0.0;
};

/// Conditional model: r = f(x) + eps, covariates held fixed.
struct CateModel {
  BlockDesign design;
  std::vector<std::vector<double>> f1;
  std::vector<std::vector<double>> f0;
  std::vector<NoiseCov> noise;
};

namespace detail {

inline void check_schedule(const BlockDesign& d, const std::vector<std::vector<double>>& a,
                           const std::vector<std::vector<double>>& b) {
  if (a.size() != d.num_blocks() || b.size() != d.num_blocks())
    throw Error(ErrorKind::DimensionMismatch, "schedule block count does not match design");
  for (std::size_t i = 0; i < d.num_blocks(); ++i)
    if (a[i].size() != static_cast<std::size_t>(d.block(i).n) || b[i].size() != static_cast<std::size_t>(d.block(i).n))
      throw Error(ErrorKind::DimensionMismatch, "schedule shape mismatch in block '" + d.block(i).id + "'");
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

/// Divisor n-1 (population-of-units variance used by the randomization theory).
inline double spread(const std::vector<double>& v) {
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return ss / static_cast<double>(v.size() - 1);
}

inline std::vector<double> difference(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> out(a.size());
  for (std::size_t j = 0; j < a.size(); ++j) out[j] = a[j] - b[j];
  return out;
}

}  // namespace detail

inline PotentialWorld make_world(BlockDesign design, std::vector<std::vector<double>> r1,
                                 std::vector<std::vector<double>> r0) {
  detail::check_schedule(design, r1, r0);
  return PotentialWorld{std::move(design), std::move(r1), std::move(r0)};
}

inline CateModel make_cate_model(BlockDesign design, std::vector<std::vector<double>> f1,
                                 std::vector<std::vector<double>> f0, std::vector<NoiseCov> noise) {
  detail::check_schedule(design, f1, f0);
  if (noise.size() != design.num_blocks())
    throw Error(ErrorKind::DimensionMismatch, "need one noise covariance per block");
  return CateModel{std::move(design), std::move(f1), std::move(f0), std::move(noise)};
}

/// Observed responses R_ij = Z_ij r1_ij + (1 - Z_ij) r0_ij.
inline Observed realize(const PotentialWorld& world, const Assignment& a) {
  Observed obs{a, {}};
  obs.responses.resize(world.design.num_blocks());
  for (std::size_t i = 0; i < world.design.num_blocks(); ++i) {
    obs.responses[i].resize(a.z[i].size());
    for (std::size_t j = 0; j < a.z[i].size(); ++j) obs.responses[i][j] = a.z[i][j] ? world.r1[i][j] : world.r0[i][j];
  }
  return obs;
}

/// Draws one finite population from the conditional model (bivariate normal noise).
template <typename Rng>
PotentialWorld draw_world(const CateModel& model, Rng& rng) {
  std::normal_distribution<double> std_normal(0.0, 1.0);
  PotentialWorld w{model.design, model.f1, model.f0};
  for (std::size_t i = 0; i < model.design.num_blocks(); ++i) {
    const auto& s = model.noise[i];
    const double sd1 = std::sqrt(s.var_treated);
    const double rho_part = sd1 > 0.0 ? s.covariance / sd1 : 0.0;
    const double resid = std::sqrt(std::max(0.0, s.var_control - rho_part * rho_part));
    for (std::size_t j = 0; j < w.r1[i].size(); ++j) {
      const double u = std_normal(rng);
      const double v = std_normal(rng);
      w.r1[i][j] += sd1 * u;
      w.r0[i][j] += rho_part * u + resid * v;
    }
  }
  return w;
}

/// Per-block first and second moments that drive every closed-form expectation.
/// mean_effect: tau-bar (SATE) or f-bar (CATE); variance: var(tau_hat_i);
/// effect_spread: within-block variance of unit effects (divisor n-1).
struct BlockMoments {
  Eigen::VectorXd mean_effect;
  Eigen::VectorXd variance;
  Eigen::VectorXd effect_spread;
  std::vector<int> n;
  std::vector<int> n_treated;
  std::vector<int> n_control;

  Eigen::Index num_blocks() const noexcept { return mean_effect.size(); }
};

/// sigma1^2/n1 + sigma0^2/n0 - sigma_tau^2/n for block i.
inline double true_block_variance(const PotentialWorld& world, std::size_t i) {
  const auto& b = world.design.block(i);
  const double s1 = detail::spread(world.r1[i]);
  const double s0 = detail::spread(world.r0[i]);
  const double st = detail::spread(detail::difference(world.r1[i], world.r0[i]));
  return s1 / b.n_treated + s0 / b.n_control() - st / b.n;
}

inline BlockMoments world_moments(const PotentialWorld& world) {
  const auto B = static_cast<Eigen::Index>(world.design.num_blocks());
  BlockMoments m;
  m.mean_effect.resize(B);
  m.variance.resize(B);
  m.effect_spread.resize(B);
  for (Eigen::Index i = 0; i < B; ++i) {
    const auto k = static_cast<std::size_t>(i);
    const auto tau = detail::difference(world.r1[k], world.r0[k]);
    m.mean_effect(i) = detail::mean_of(tau);
    m.variance(i) = true_block_variance(world, k);
    m.effect_spread(i) = detail::spread(tau);
    const auto& b = world.design.block(k);
    m.n.push_back(b.n);
    m.n_treated.push_back(b.n_treated);
    m.n_control.push_back(b.n_control());
  }
  return m;
}

/// var(tau_hat_i | C, Z): finite-population variance of the f-part plus the
/// noise contribution eps1 var / n1 + eps0 var / n0.
inline BlockMoments cate_moments(const CateModel& model) {
  const PotentialWorld f_world{model.design, model.f1, model.f0};
  BlockMoments m = world_moments(f_world);
  for (Eigen::Index i = 0; i < m.num_blocks(); ++i) {
    const auto k = static_cast<std::size_t>(i);
    m.variance(i) += model.noise[k].var_treated / m.n_treated[k] + model.noise[k].var_control / m.n_control[k];
  }
  return m;
}

/// SATE: N^{-1} sum_ij tau_ij.
inline double sate(const PotentialWorld& world) {
  double total = 0.0;
  for (std::size_t i = 0; i < world.design.num_blocks(); ++i)
    for (std::size_t j = 0; j < world.r1[i].size(); ++j) total += world.r1[i][j] - world.r0[i][j];
  return total / world.design.num_units();
}

/// CATE: N^{-1} sum_ij (f1_ij - f0_ij).
inline double cate(const CateModel& model) {
  return sate(PotentialWorld{model.design, model.f1, model.f0});
}

/// (1/B^2) sum w_i^2 var(tau_hat_i).
inline double ate_variance(const BlockMoments& m, const Eigen::VectorXd& w) {
  const double B = static_cast<double>(m.num_blocks());
  return (w.array().square() * m.variance.array()).sum() / (B * B);
}

inline double true_ate_variance(const PotentialWorld& world) {
  return ate_variance(world_moments(world), weight_vector(world.design));
}

inline double cate_variance(const CateModel& model) {
  return ate_variance(cate_moments(model), weight_vector(model.design));
}

/// Expectation of a variance estimator split into its parts.
/// expectation = variance + bias; for S2, bias = inflation + quadratic.
struct ExpectedEstimator {
  double expectation = 0.0;
  double variance = 0.0;
  double bias = 0.0;
  double inflation = 0.0;
  double quadratic = 0.0;
};

/// E[S1(Q)]: bias B^{-2} g^T W (I-H) W g with g_i = mean_i / sqrt(1 - h_ii).
inline ExpectedEstimator expected_s1(const BlockMoments& m, const Eigen::VectorXd& w, const QMatrix& q) {
  const double B = static_cast<double>(m.num_blocks());
  ExpectedEstimator e;
  e.variance = ate_variance(m, w);
  const Eigen::VectorXd wg = (w.array() * m.mean_effect.array() / (1.0 - q.leverages.array()).sqrt()).matrix();
  e.quadratic = q.residual(wg).squaredNorm() / (B * B);
  e.bias = e.quadratic;
  e.expectation = e.variance + e.bias;
  return e;
}

/// E[S2(Q)]: variance-inflation term from off-diagonal leverages plus the
/// Psi-weighted residual quadratic form in the mean effects.
inline ExpectedEstimator expected_s2(const BlockMoments& m, const Eigen::VectorXd& w, const QMatrix& q) {
  const auto Bn = m.num_blocks();
  const double B = static_cast<double>(Bn);
  const auto psi = psi_matrices(q);
  ExpectedEstimator e;
  e.variance = ate_variance(m, w);
  double inflation = 0.0;
  for (Eigen::Index i = 0; i < Bn; ++i) {
    double off = 0.0;
    for (Eigen::Index j = 0; j < Bn; ++j)
      if (j != i) off += q.hat(i, j) * q.hat(i, j) * psi.psi(j);
    inflation += w(i) * w(i) * m.variance(i) * off;
  }
  e.inflation = inflation / (B * B);
  const Eigen::VectorXd r = q.residual((w.array() * m.mean_effect.array()).matrix());
  e.quadratic = (r.array().square() * psi.psi.array()).sum() / (B * B);
  e.bias = e.inflation + e.quadratic;
  e.expectation = e.variance + e.bias;
  return e;
}

/// E[S3(Q)] for arbitrary designs: E[tau^T A tau] = tr(A Cov) + mean^T A mean
/// with A = W (I-H) Psi~ (I-H) W.
inline ExpectedEstimator expected_s3(const BlockMoments& m, const Eigen::VectorXd& w, const QMatrix& q) {
  const auto Bn = m.num_blocks();
  const double B = static_cast<double>(Bn);
  const auto psi = psi_matrices(q);
  ExpectedEstimator e;
  e.variance = ate_variance(m, w);
  double trace = 0.0;
  for (Eigen::Index i = 0; i < Bn; ++i) {
    double diag = 0.0;
    for (Eigen::Index j = 0; j < Bn; ++j) {
      const double r = (i == j ? 1.0 : 0.0) - q.hat(i, j);
      diag += r * r * psi.psi_tilde(j);
    }
    trace += w(i) * w(i) * m.variance(i) * diag;
  }
  const Eigen::VectorXd r = q.residual((w.array() * m.mean_effect.array()).matrix());
  e.quadratic = (r.array().square() * psi.psi_tilde.array()).sum() / (B * B);
  e.inflation = trace / (B * B) - e.variance;
  e.bias = e.inflation + e.quadratic;
  e.expectation = e.variance + e.bias;
  return e;
}

inline double expected_bias_s1(const PotentialWorld& world, const QMatrix& q) {
  return expected_s1(world_moments(world), weight_vector(world.design), q).bias;
}
inline double expected_bias_s1(const CateModel& model, const QMatrix& q) {
  return expected_s1(cate_moments(model), weight_vector(model.design), q).bias;
}
inline ExpectedEstimator expected_bias_s2(const PotentialWorld& world, const QMatrix& q) {
  return expected_s2(world_moments(world), weight_vector(world.design), q);
}
inline ExpectedEstimator expected_bias_s2(const CateModel& model, const QMatrix& q) {
  return expected_s2(cate_moments(model), weight_vector(model.design), q);
}

/// Bias of S3(Q) under equal block sizes and homoskedastic block variances:
/// B^{-2} f^T (I-H) Psi~ (I-H) f.
inline double expected_bias_s3(const CateModel& model, const QMatrix& q) {
  if (!model.design.equal_block_sizes())
    throw Error(ErrorKind::PreconditionViolated, "S3 bias formula needs equal block sizes");
  const BlockMoments m = cate_moments(model);
  const double v0 = m.variance(0);
  if ((m.variance.array() - v0).abs().maxCoeff() > 1e-9 * std::max(1.0, std::abs(v0)))
    throw Error(ErrorKind::PreconditionViolated, "S3 bias formula needs homoskedastic block variances");
  const double B = static_cast<double>(m.num_blocks());
  const auto psi = psi_matrices(q);
  const Eigen::VectorXd r = q.residual(m.mean_effect);
  return (r.array().square() * psi.psi_tilde.array()).sum() / (B * B);
}

/// Bias of the coarse estimator: (1/B^2) sum w_i^2 sigma_tau_i^2 / n_i.
inline double expected_bias_scs(const BlockMoments& m, const Eigen::VectorXd& w) {
  const double B = static_cast<double>(m.num_blocks());
  double total = 0.0;
  for (Eigen::Index i = 0; i < m.num_blocks(); ++i) {
    const auto k = static_cast<std::size_t>(i);
    if (m.n_treated[k] < 2 || m.n_control[k] < 2)
      throw Error(ErrorKind::NotCoarse, "coarse bias needs two units per arm in block " + std::to_string(i));
    total += w(i) * w(i) * m.effect_spread(i) / m.n[k];
  }
  return total / (B * B);
}

inline double expected_bias_scs(const PotentialWorld& world) {
  return expected_bias_scs(world_moments(world), weight_vector(world.design));
}
inline double expected_bias_scs(const CateModel& model) {
  return expected_bias_scs(cate_moments(model), weight_vector(model.design));
}

/// Bias of the paired estimator: sum (mean_i - mean)^2 / (B (B-1)).
inline double expected_bias_paired(const BlockMoments& m) {
  const double B = static_cast<double>(m.num_blocks());
  const double mean = m.mean_effect.mean();
  return (m.mean_effect.array() - mean).square().sum() / (B * (B - 1.0));
}

using Statistic = std::function<double(const BlockDesign&, const Observed&)>;

inline constexpr std::uint64_t kBruteForceCap = 10'000;

/// Exact average of `statistic` over Omega. Values are summed in index order
/// so the result does not depend on the thread count.
inline double brute_force_expectation(const PotentialWorld& world, const Statistic& statistic,
                                      std::uint64_t cap = kBruteForceCap, unsigned threads = 1) {
  const AssignmentSpace space(world.design, cap);
  std::vector<double> values(static_cast<std::size_t>(space.size()));
  parallel_for(values.size(), threads, [&](std::size_t k) {
    values[k] = statistic(world.design, realize(world, space.at(k)));
  });
  double total = 0.0;
  for (double v : values) total += v;
  return total / static_cast<double>(values.size());
}

/// Several statistics from one enumeration pass.
inline std::vector<double> brute_force_expectations(const PotentialWorld& world, const std::vector<Statistic>& stats,
                                                    std::uint64_t cap = kBruteForceCap) {
  const AssignmentSpace space(world.design, cap);
  std::vector<double> totals(stats.size(), 0.0);
  for (std::uint64_t k = 0; k < space.size(); ++k) {
    const Observed obs = realize(world, space.at(k));
    for (std::size_t s = 0; s < stats.size(); ++s) totals[s] += stats[s](world.design, obs);
  }
  for (double& t : totals) t /= static_cast<double>(space.size());
  return totals;
}

struct LimitDiagnostics {
  double beta_quadform = 0.0;
  double s1_minus_s2_gap = 0.0;
};

/// Finite-B analogues of the covariate-adjustment gain: B^{-1} (W tau)^T H_M (W tau)
/// from the true block effects, and B (S1(Q1) - S1(Q2)) on a realized assignment.
inline LimitDiagnostics empirical_limit_diagnostics(const PotentialWorld& world, const Eigen::MatrixXd& xbar,
                                                    const QMatrix& q1, const Assignment& assignment) {
  const QMatrix q2 = build_q2(world.design, xbar);
  const Eigen::VectorXd w = weight_vector(world.design);
  const BlockMoments m = world_moments(world);
  const double B = static_cast<double>(m.num_blocks());
  const Eigen::VectorXd wt = (w.array() * m.mean_effect.array()).matrix();
  // H_M = H_Q2 - H_Q1 because M is orthogonal to Q1.
  const Eigen::VectorXd proj_m = q1.residual(wt) - q2.residual(wt);
  LimitDiagnostics d;
  d.beta_quadform = proj_m.squaredNorm() / B;
  const BlockEffects e = block_effects(world.design, realize(world, assignment));
  d.s1_minus_s2_gap = B * (var_s1(e, w, q1) - var_s1(e, w, q2));
  return d;
}

}  // namespace stratavar
