#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "stratavar/design.hpp"
#include "stratavar/error.hpp"
#include "stratavar/estimators.hpp"
#include "stratavar/parallel.hpp"
#include "stratavar/projection.hpp"

namespace stratavar {

struct HetTestResult {
  double f_observed = 0.0;
  double p_value = 1.0;
  std::uint64_t draws_used = 0;
  bool exact = false;
  int numerator_df = 0;
  int denominator_df = 0;
  bool zero_denominator = false;
  std::vector<std::string> warnings;
};

inline constexpr double kTieTolerance = 1e-10;

/// Partial F statistic comparing the fit of W tau_hat on Q1 with the fit on
/// Q2 = [Q1, M]. Precomputes the two projections once so it can be
/// evaluated for many assignments.
class FStatistic {
 public:
  FStatistic(const QMatrix& q1, const QMatrix& q2) : q2_basis_(q2.basis) {
    const Eigen::Index B = q2.num_blocks();
    if (q1.num_blocks() != B) throw Error(ErrorKind::BadQPair, "Q1 and Q2 have different row counts");
    if (q2.added_covariate_rank < 1 || q2.base_columns != q1.values.cols())
      throw Error(ErrorKind::BadQPair, "Q2 must extend Q1 by at least one covariate column");
    const Eigen::MatrixXd m = q2.covariate_block();
    const Eigen::MatrixXd cross = q1.values.transpose() * m;
    const double scale = q1.values.norm() * m.norm();
    if (cross.cwiseAbs().maxCoeff() > 1e-8 * scale)
      throw Error(ErrorKind::BadQPair, "covariate block of Q2 is not orthogonal to Q1");
    if (q2.rank >= B) throw Error(ErrorKind::TooManyColumns, "B must exceed rank(Q2)");
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(m);
    m_basis_ = qr.householderQ() * Eigen::MatrixXd::Identity(B, m.cols());
    numerator_df_ = q2.added_covariate_rank;
    denominator_df_ = static_cast<int>(B) - q2.rank;
  }

  int numerator_df() const noexcept { return numerator_df_; }
  int denominator_df() const noexcept { return denominator_df_; }

  /// F for weighted effects W tau_hat. +inf when only the denominator
  /// vanishes, 0 when both do.
  double operator()(const Eigen::VectorXd& weighted_tau) const {
    const double scale = weighted_tau.squaredNorm();
    const double num = (m_basis_.transpose() * weighted_tau).squaredNorm();
    const double den = (weighted_tau - q2_basis_ * (q2_basis_.transpose() * weighted_tau)).squaredNorm();
    if (den <= 1e-24 * std::max(scale, 1e-300)) {
      return num <= 1e-24 * std::max(scale, 1e-300) ? 0.0 : std::numeric_limits<double>::infinity();
    }
    return num / den * static_cast<double>(denominator_df_) / static_cast<double>(numerator_df_);
  }

  bool denominator_vanishes(const Eigen::VectorXd& weighted_tau) const {
    const double scale = weighted_tau.squaredNorm();
    const double den = (weighted_tau - q2_basis_ * (q2_basis_.transpose() * weighted_tau)).squaredNorm();
    return den <= 1e-24 * std::max(scale, 1e-300);
  }

 private:
  Eigen::MatrixXd m_basis_;
  Eigen::MatrixXd q2_basis_;
  int numerator_df_ = 0;
  int denominator_df_ = 0;
};

inline double f_statistic(const Eigen::VectorXd& tau_hat, const Eigen::VectorXd& w, const QMatrix& q1,
                          const QMatrix& q2) {
  const FStatistic f(q1, q2);
  const Eigen::VectorXd wt = (w.array() * tau_hat.array()).matrix();
  if (f.denominator_vanishes(wt))
    throw Error(ErrorKind::ZeroDenominator, "residual sum of squares after Q2 is zero");
  return f(wt);
}

inline double f_statistic(const BlockEffects& effects, const Eigen::VectorXd& w, const QMatrix& q1,
                          const QMatrix& q2) {
  return f_statistic(effects.tau_hat, w, q1, q2);
}

inline constexpr std::uint64_t kDefaultMaxDraws = 1'000'000;

/// Randomization test of additivity. Responses are imputed under the null
/// with zero effect (r1 = r0 = R); the reference distribution is the full
/// assignment space when it fits within max_draws, otherwise max_draws
/// uniform draws with the add-one p-value.
inline HetTestResult permutation_test(const BlockDesign& design, const Observed& data, const QMatrix& q1,
                                      const QMatrix& q2, std::uint64_t max_draws = kDefaultMaxDraws,
                                      std::uint64_t seed = 0, unsigned threads = 1) {
  check_observed(design, data);
  const FStatistic fstat(q1, q2);
  const Eigen::VectorXd w = weight_vector(design);
  const std::size_t B = design.num_blocks();

  // Per-block treated-sum for every subset, from the imputed schedule.
  std::vector<std::vector<double>> treated_sum(B);
  std::vector<double> block_total(B, 0.0);
  std::vector<std::vector<std::vector<std::uint8_t>>> subsets(B);
  for (std::size_t i = 0; i < B; ++i) {
    const auto& b = design.block(i);
    subsets[i] = detail::subsets_lex(b.n, b.n_treated);
    for (double r : data.responses[i]) block_total[i] += r;
    for (const auto& mask : subsets[i]) {
      double s = 0.0;
      for (std::size_t j = 0; j < mask.size(); ++j)
        if (mask[j]) s += data.responses[i][j];
      treated_sum[i].push_back(s);
    }
  }
  auto weighted_tau = [&](const std::vector<std::size_t>& digits) {
    Eigen::VectorXd wt(static_cast<Eigen::Index>(B));
    for (std::size_t i = 0; i < B; ++i) {
      const auto& b = design.block(i);
      const double t = treated_sum[i][digits[i]];
      wt(static_cast<Eigen::Index>(i)) = w(static_cast<Eigen::Index>(i)) * (t / b.n_treated - (block_total[i] - t) / b.n_control());
    }
    return wt;
  };

  // Observed statistic through the same arithmetic path as the reference draws.
  std::vector<std::size_t> observed_digits(B);
  for (std::size_t i = 0; i < B; ++i) {
    for (std::size_t k = 0; k < subsets[i].size(); ++k)
      if (subsets[i][k] == data.assignment.z[i]) observed_digits[i] = k;
  }

  HetTestResult res;
  res.numerator_df = fstat.numerator_df();
  res.denominator_df = fstat.denominator_df();
  const Eigen::VectorXd wt_obs = weighted_tau(observed_digits);
  const double space = assignment_space_size(design);
  res.exact = space <= static_cast<double>(max_draws);
  res.draws_used = res.exact ? static_cast<std::uint64_t>(space) : max_draws;

  if (fstat.denominator_vanishes(wt_obs)) {
    res.zero_denominator = true;
    res.f_observed = std::numeric_limits<double>::infinity();
    res.p_value = 1.0 / (static_cast<double>(res.draws_used) + 1.0);
    res.warnings.push_back("residual sum of squares after Q2 is zero; reporting the smallest attainable p-value");
    return res;
  }
  const double t = fstat(wt_obs);
  res.f_observed = t;
  const double threshold = t - kTieTolerance * std::max(1.0, std::abs(t));

  std::vector<std::uint8_t> hit(static_cast<std::size_t>(res.draws_used), 0);
  if (res.exact) {
    std::vector<std::size_t> radix(B);
    for (std::size_t i = 0; i < B; ++i) radix[i] = subsets[i].size();
    parallel_for(hit.size(), threads, [&](std::size_t k) {
      std::vector<std::size_t> digits(B);
      std::uint64_t index = k;
      for (std::size_t i = B; i-- > 0;) {
        digits[i] = static_cast<std::size_t>(index % radix[i]);
        index /= radix[i];
      }
      hit[k] = fstat(weighted_tau(digits)) >= threshold ? 1 : 0;
    });
  } else {
    parallel_for(hit.size(), threads, [&](std::size_t k) {
      SplitMix64 rng(derive_seed(seed, k));
      std::vector<std::size_t> digits(B);
      for (std::size_t i = 0; i < B; ++i) {
        std::uniform_int_distribution<std::size_t> pick(0, subsets[i].size() - 1);
        digits[i] = pick(rng);
      }
      hit[k] = fstat(weighted_tau(digits)) >= threshold ? 1 : 0;
    });
  }
  std::uint64_t count = 0;
  for (auto h : hit) count += h;
  const double draws = static_cast<double>(res.draws_used);
  res.p_value = res.exact ? static_cast<double>(count) / draws : (1.0 + static_cast<double>(count)) / (1.0 + draws);
  return res;
}

}  // namespace stratavar
