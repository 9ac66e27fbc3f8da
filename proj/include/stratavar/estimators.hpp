#pragma once

#include <Eigen/Dense>
#include <boost/math/distributions/normal.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "stratavar/design.hpp"
#include "stratavar/error.hpp"
#include "stratavar/projection.hpp"

namespace stratavar {

/// Per-block observed differences in means and within-arm sample variances.
struct BlockEffects {
  Eigen::VectorXd tau_hat;
  Eigen::VectorXd treated_means;
  Eigen::VectorXd control_means;
  std::vector<std::optional<double>> s2_treated;
  std::vector<std::optional<double>> s2_control;
  std::vector<int> n_treated;
  std::vector<int> n_control;

  Eigen::Index num_blocks() const noexcept { return tau_hat.size(); }
};

namespace detail {

inline std::optional<double> sample_variance(const std::vector<double>& v) {
  if (v.size() < 2) return std::nullopt;
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return ss / static_cast<double>(v.size() - 1);
}

inline double clamp_variance(double v) { return v < 0.0 ? 0.0 : v; }

}  // namespace detail

inline BlockEffects block_effects(const BlockDesign& design, const Observed& data) {
  check_observed(design, data);
  const auto B = static_cast<Eigen::Index>(design.num_blocks());
  BlockEffects e;
  e.tau_hat.resize(B);
  e.treated_means.resize(B);
  e.control_means.resize(B);
  std::vector<double> treated;
  std::vector<double> control;
  for (Eigen::Index i = 0; i < B; ++i) {
    const auto& z = data.assignment.z[static_cast<std::size_t>(i)];
    const auto& r = data.responses[static_cast<std::size_t>(i)];
    treated.clear();
    control.clear();
    for (std::size_t j = 0; j < z.size(); ++j) (z[j] ? treated : control).push_back(r[j]);
    double m1 = 0.0;
    double m0 = 0.0;
    for (double x : treated) m1 += x;
    for (double x : control) m0 += x;
    m1 /= static_cast<double>(treated.size());
    m0 /= static_cast<double>(control.size());
    e.treated_means(i) = m1;
    e.control_means(i) = m0;
    e.tau_hat(i) = m1 - m0;
    e.s2_treated.push_back(detail::sample_variance(treated));
    e.s2_control.push_back(detail::sample_variance(control));
    e.n_treated.push_back(static_cast<int>(treated.size()));
    e.n_control.push_back(static_cast<int>(control.size()));
  }
  return e;
}

/// Delta-hat = B^{-1} sum_i w_i tau_hat_i.
inline double estimate_ate(const Eigen::VectorXd& tau_hat, const Eigen::VectorXd& w) {
  return w.dot(tau_hat) / static_cast<double>(tau_hat.size());
}

inline double estimate_ate(const BlockEffects& effects, const Eigen::VectorXd& w) {
  return estimate_ate(effects.tau_hat, w);
}

/// Classical matched-pairs estimator; requires equal block weights.
inline double var_paired_classical(const BlockEffects& effects, const Eigen::VectorXd& w) {
  const double B = static_cast<double>(effects.num_blocks());
  if ((w.array() - w(0)).abs().maxCoeff() > 1e-12 * std::abs(w(0)))
    throw Error(ErrorKind::UnequalBlocks, "the paired estimator needs equal block sizes");
  const double mean = effects.tau_hat.mean();
  return detail::clamp_variance((effects.tau_hat.array() - mean).square().sum() / (B * (B - 1.0)));
}

/// Classical coarse-stratification estimator; every block needs two units per arm.
inline double var_coarse_classical(const BlockEffects& effects, const Eigen::VectorXd& w) {
  const auto B = effects.num_blocks();
  double total = 0.0;
  for (Eigen::Index i = 0; i < B; ++i) {
    const auto& s1 = effects.s2_treated[static_cast<std::size_t>(i)];
    const auto& s0 = effects.s2_control[static_cast<std::size_t>(i)];
    if (!s1 || !s0)
      throw Error(ErrorKind::NotCoarse,
                  "block " + std::to_string(i) + " has a single unit in one arm; its sample variance is undefined");
    total += w(i) * w(i) *
             (*s1 / effects.n_treated[static_cast<std::size_t>(i)] + *s0 / effects.n_control[static_cast<std::size_t>(i)]);
  }
  return detail::clamp_variance(total / (static_cast<double>(B) * static_cast<double>(B)));
}

namespace detail {

inline void check_q(const QMatrix& q, Eigen::Index B) {
  if (q.num_blocks() != B)
    throw Error(ErrorKind::DimensionMismatch, "Q has " + std::to_string(q.num_blocks()) + " rows, expected " +
                                                  std::to_string(B));
  if (q.leverages.maxCoeff() >= 1.0 - kLeverageOneTolerance)
    throw Error(ErrorKind::LeverageOne, "a block has leverage 1 under Q");
}

}  // namespace detail

/// S1(Q) = B^{-2} y^T W (I - H_Q) W y with y_i = tau_hat_i / sqrt(1 - h_ii).
inline double var_s1(const Eigen::VectorXd& tau_hat, const Eigen::VectorXd& w, const QMatrix& q) {
  detail::check_q(q, tau_hat.size());
  const double B = static_cast<double>(tau_hat.size());
  const Eigen::VectorXd wy = (w.array() * tau_hat.array() / (1.0 - q.leverages.array()).sqrt()).matrix();
  return detail::clamp_variance(q.residual(wy).squaredNorm() / (B * B));
}

/// S2(Q) = B^{-2} tau^T W (I - H) Psi (I - H) W tau.
inline double var_s2(const Eigen::VectorXd& tau_hat, const Eigen::VectorXd& w, const QMatrix& q) {
  detail::check_q(q, tau_hat.size());
  const double B = static_cast<double>(tau_hat.size());
  const Eigen::VectorXd r = q.residual((w.array() * tau_hat.array()).matrix());
  return detail::clamp_variance((r.array() / (1.0 - q.leverages.array())).square().sum() / (B * B));
}

/// S3(Q) = B^{-2} tau^T W (I - H) Psi~ (I - H) W tau. Conservative in
/// expectation only for equal block sizes with homoskedastic block effects.
inline double var_s3(const Eigen::VectorXd& tau_hat, const Eigen::VectorXd& w, const QMatrix& q) {
  detail::check_q(q, tau_hat.size());
  const double B = static_cast<double>(tau_hat.size());
  const Eigen::VectorXd r = q.residual((w.array() * tau_hat.array()).matrix());
  return detail::clamp_variance((r.array().square() / (1.0 - q.leverages.array())).sum() / (B * B));
}

inline double var_s1(const BlockEffects& e, const Eigen::VectorXd& w, const QMatrix& q) { return var_s1(e.tau_hat, w, q); }
inline double var_s2(const BlockEffects& e, const Eigen::VectorXd& w, const QMatrix& q) { return var_s2(e.tau_hat, w, q); }
inline double var_s3(const BlockEffects& e, const Eigen::VectorXd& w, const QMatrix& q) { return var_s3(e.tau_hat, w, q); }

/// Normal-approximation interval delta_hat +/- z_{1-alpha/2} sqrt(s2).
inline std::pair<double, double> confidence_interval(double delta_hat, double s2, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw Error(ErrorKind::InvalidAlpha, "alpha must lie in (0, 1)");
  if (s2 < 0.0) throw Error(ErrorKind::PreconditionViolated, "variance must be nonnegative");
  const double z = boost::math::quantile(boost::math::normal_distribution<double>(), 1.0 - alpha / 2.0);
  const double half = z * std::sqrt(s2);
  return {delta_hat - half, delta_hat + half};
}

/// Names accepted in AnalysisOptions::estimators.
inline const std::set<std::string>& known_estimators() {
  static const std::set<std::string> names{"s1", "s2", "s3", "paired", "coarse"};
  return names;
}

struct AnalysisOptions {
  std::vector<std::string> estimators{"s1", "s2"};
  double alpha = 0.05;
};

struct VarianceReport {
  double delta_hat = 0.0;
  std::map<std::string, double> estimates;
  std::map<std::string, std::pair<double, double>> ci;
  double alpha = 0.05;
  std::string q_description;
  std::vector<std::string> q_columns;
  std::vector<std::string> q_dropped;
  int q_rank = 0;
  std::string design_class;
  std::size_t num_blocks = 0;
  int num_units = 0;
  std::vector<std::string> warnings;
};

/// Runs the requested estimators on one experiment. Incompatible estimator
/// requests throw IncompatibleEstimator.
inline VarianceReport analyze(const BlockDesign& design, const Observed& data, const QMatrix& q,
                              const AnalysisOptions& options) {
  VarianceReport rep;
  rep.alpha = options.alpha;
  rep.num_blocks = design.num_blocks();
  rep.num_units = design.num_units();
  rep.design_class = to_string(design.design_class());
  rep.q_description = to_string(q.kind);
  rep.q_columns = q.column_labels;
  rep.q_dropped = q.dropped_columns;
  rep.q_rank = q.rank;
  rep.warnings = q.warnings;

  const BlockEffects effects = block_effects(design, data);
  const Eigen::VectorXd w = weight_vector(design);
  rep.delta_hat = estimate_ate(effects, w);

  for (const auto& name : options.estimators) {
    if (!known_estimators().count(name))
      throw Error(ErrorKind::IncompatibleEstimator, "unknown estimator '" + name + "'");
    double value = 0.0;
    if (name == "s1") {
      value = var_s1(effects, w, q);
    } else if (name == "s2") {
      value = var_s2(effects, w, q);
    } else if (name == "s3") {
      if (!design.equal_block_sizes())
        rep.warnings.push_back("s3 is not guaranteed conservative with unequal block sizes");
      else
        rep.warnings.push_back("s3 is conservative in expectation only under homoskedastic block effects");
      value = var_s3(effects, w, q);
    } else if (name == "paired") {
      if (design.design_class() != DesignClass::Fine || !design.equal_block_sizes())
        throw Error(ErrorKind::IncompatibleEstimator, "the paired estimator needs a fine design with equal block sizes");
      if (!design.all_pairs())
        rep.warnings.push_back("paired estimator applied to equal-size non-pair blocks; equals s1 under Q1");
      value = var_paired_classical(effects, w);
    } else {
      if (design.design_class() != DesignClass::Coarse)
        throw Error(ErrorKind::IncompatibleEstimator, "the coarse estimator needs two units per arm in every block");
      value = var_coarse_classical(effects, w);
    }
    rep.estimates[name] = value;
    rep.ci[name] = confidence_interval(rep.delta_hat, value, options.alpha);
  }
  return rep;
}

}  // namespace stratavar
