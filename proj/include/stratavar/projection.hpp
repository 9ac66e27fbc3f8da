#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "stratavar/design.hpp"
#include "stratavar/error.hpp"

namespace stratavar {

enum class QKind { Q1, Q2, Custom };

inline const char* to_string(QKind k) {
  switch (k) {
    case QKind::Q1: return "Q1";
    case QKind::Q2: return "Q2";
    case QKind::Custom: return "custom";
  }
  return "unknown";
}

inline constexpr double kRankTolerance = 1e-10;
inline constexpr double kLeverageOneTolerance = 1e-10;

/// Fixed B x L design matrix together with its projection quantities.
///
/// `basis` is an orthonormal basis of col(values); the hat matrix is
/// basis * basis^T. For kind Q2 the first `base_columns` columns are Q1 and
/// the remainder are the orthogonalized covariate block M.
struct QMatrix {
  Eigen::MatrixXd values;
  QKind kind = QKind::Custom;
  int rank = 0;
  Eigen::VectorXd leverages;
  Eigen::MatrixXd hat;
  Eigen::MatrixXd basis;
  int added_covariate_rank = 0;
  int base_columns = 0;
  std::vector<std::string> column_labels;
  std::vector<std::string> dropped_columns;
  std::vector<std::string> warnings;

  Eigen::Index num_blocks() const noexcept { return values.rows(); }

  /// (I - H_Q) v
  Eigen::VectorXd residual(const Eigen::VectorXd& v) const { return v - basis * (basis.transpose() * v); }

  /// Orthogonalized covariate block M (empty unless kind == Q2).
  Eigen::MatrixXd covariate_block() const { return values.rightCols(values.cols() - base_columns); }
};

/// Diagonals of Psi_Q = diag(1/(1-h)^2) and Psi~_Q = diag(1/(1-h)).
struct PsiMatrices {
  Eigen::VectorXd psi;
  Eigen::VectorXd psi_tilde;
};

inline PsiMatrices psi_matrices(const QMatrix& q) {
  PsiMatrices p;
  p.psi_tilde = (1.0 - q.leverages.array()).inverse().matrix();
  p.psi = p.psi_tilde.array().square().matrix();
  return p;
}

/// Hat matrix and leverages of a full-column-rank matrix.
inline std::pair<Eigen::MatrixXd, Eigen::VectorXd> hat_and_leverage(const Eigen::MatrixXd& values) {
  const Eigen::Index B = values.rows();
  const Eigen::Index L = values.cols();
  if (L == 0 || L >= B)
    throw Error(ErrorKind::TooManyColumns, "need 0 < L < B, got L=" + std::to_string(L) + ", B=" + std::to_string(B));
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> pivoted(values);
  pivoted.setThreshold(kRankTolerance);
  if (pivoted.rank() < L)
    throw Error(ErrorKind::RankDeficient,
                "matrix has rank " + std::to_string(pivoted.rank()) + " < " + std::to_string(L) + " columns");
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(values);
  const Eigen::MatrixXd basis = qr.householderQ() * Eigen::MatrixXd::Identity(B, L);
  Eigen::MatrixXd hat = basis * basis.transpose();
  Eigen::VectorXd h = basis.rowwise().squaredNorm();
  for (Eigen::Index i = 0; i < B; ++i)
    if (h(i) >= 1.0 - kLeverageOneTolerance)
      throw Error(ErrorKind::LeverageOne, "block " + std::to_string(i) + " has leverage " + std::to_string(h(i)));
  return {std::move(hat), std::move(h)};
}

namespace detail {

/// Greedy order-preserving column selection: a column is kept when its
/// residual against the kept columns exceeds tol * (largest column norm).
/// Returns kept indices and an orthonormal basis for them.
inline std::pair<std::vector<int>, Eigen::MatrixXd> select_independent(const Eigen::MatrixXd& cols,
                                                                       const Eigen::MatrixXd& prior_basis,
                                                                       double reference_norm) {
  const Eigen::Index B = cols.rows();
  Eigen::MatrixXd basis = prior_basis;
  std::vector<int> kept;
  for (Eigen::Index c = 0; c < cols.cols(); ++c) {
    Eigen::VectorXd v = cols.col(c);
    for (int pass = 0; pass < 2; ++pass)
      if (basis.cols() > 0) v -= basis * (basis.transpose() * v);
    const double norm = v.norm();
    if (norm > kRankTolerance * reference_norm && norm > 0.0) {
      basis.conservativeResize(B, basis.cols() + 1);
      basis.col(basis.cols() - 1) = v / norm;
      kept.push_back(static_cast<int>(c));
    }
  }
  return {std::move(kept), std::move(basis)};
}

inline void finish_q(QMatrix& q) {
  auto [hat, h] = hat_and_leverage(q.values);
  q.hat = std::move(hat);
  q.leverages = std::move(h);
  q.rank = static_cast<int>(q.values.cols());
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(q.values);
  q.basis = qr.householderQ() * Eigen::MatrixXd::Identity(q.values.rows(), q.values.cols());
}

}  // namespace detail

/// Block weights as an Eigen vector.
inline Eigen::VectorXd weight_vector(const BlockDesign& design) {
  const auto w = block_weights(design);
  return Eigen::Map<const Eigen::VectorXd>(w.data(), static_cast<Eigen::Index>(w.size()));
}

/// Q1 = [e, w - e], dropping the centered weights when block sizes are equal.
inline QMatrix build_q1(const BlockDesign& design) {
  const Eigen::Index B = static_cast<Eigen::Index>(design.num_blocks());
  const Eigen::VectorXd w = weight_vector(design);
  Eigen::MatrixXd candidates(B, 2);
  candidates.col(0).setOnes();
  candidates.col(1) = w.array() - 1.0;
  const double ref = candidates.colwise().norm().maxCoeff();
  auto [kept, basis] = detail::select_independent(candidates, Eigen::MatrixXd(B, 0), ref);

  QMatrix q;
  q.kind = QKind::Q1;
  const std::vector<std::string> labels{"intercept", "centered_weight"};
  q.values.resize(B, static_cast<Eigen::Index>(kept.size()));
  for (std::size_t k = 0; k < kept.size(); ++k) {
    q.values.col(static_cast<Eigen::Index>(k)) = candidates.col(kept[k]);
    q.column_labels.push_back(labels[static_cast<std::size_t>(kept[k])]);
  }
  if (kept.size() == 1) q.dropped_columns.push_back("centered_weight");
  if (q.values.cols() >= B)
    throw Error(ErrorKind::InsufficientBlocks,
                "Q1 has " + std::to_string(q.values.cols()) + " columns but only " + std::to_string(B) + " blocks");
  q.base_columns = static_cast<int>(q.values.cols());
  detail::finish_q(q);
  return q;
}

/// Elementwise powers 1..degree of each column, ordered covariate-major.
inline Eigen::MatrixXd polynomial_expand(const Eigen::MatrixXd& xbar, int degree) {
  if (degree < 1) throw Error(ErrorKind::DimensionMismatch, "polynomial degree must be >= 1");
  Eigen::MatrixXd out(xbar.rows(), xbar.cols() * degree);
  for (Eigen::Index k = 0; k < xbar.cols(); ++k)
    for (int p = 1; p <= degree; ++p) out.col(k * degree + (p - 1)) = xbar.col(k).array().pow(p);
  return out;
}

/// Block means of per-unit covariate powers: column (k, p) holds
/// n_i^{-1} sum_j x_ijk^p, for p = 1..degree.
inline Eigen::MatrixXd block_covariate_means(const BlockDesign& design, int degree = 1,
                                             std::span<const std::size_t> columns = {}) {
  if (degree < 1) throw Error(ErrorKind::DimensionMismatch, "polynomial degree must be >= 1");
  std::vector<std::size_t> cols(columns.begin(), columns.end());
  if (cols.empty())
    for (std::size_t k = 0; k < design.covariate_dim(); ++k) cols.push_back(k);
  const Eigen::Index B = static_cast<Eigen::Index>(design.num_blocks());
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(B, static_cast<Eigen::Index>(cols.size()) * degree);
  for (Eigen::Index i = 0; i < B; ++i) {
    const auto& b = design.block(static_cast<std::size_t>(i));
    if (b.covariates.empty()) throw Error(ErrorKind::DimensionMismatch, "design has no unit covariates");
    for (std::size_t c = 0; c < cols.size(); ++c) {
      if (cols[c] >= design.covariate_dim())
        throw Error(ErrorKind::DimensionMismatch, "covariate column " + std::to_string(cols[c]) + " out of range");
      for (int p = 1; p <= degree; ++p) {
        double sum = 0.0;
        for (const auto& x : b.covariates) sum += std::pow(x[cols[c]], p);
        out(i, static_cast<Eigen::Index>(c) * degree + (p - 1)) = sum / b.n;
      }
    }
  }
  return out;
}

/// Q2 = [Q1, M] with M = (I - H_Q1) W Xbar. `xbar` holds block-level covariate
/// columns; with poly_degree > 1 each column is raised elementwise to powers
/// 1..poly_degree first. Degenerate and collinear columns are dropped.
inline QMatrix build_q2(const BlockDesign& design, const Eigen::MatrixXd& xbar, int poly_degree = 1,
                        std::vector<std::string> labels = {}) {
  const Eigen::Index B = static_cast<Eigen::Index>(design.num_blocks());
  if (xbar.rows() != B)
    throw Error(ErrorKind::DimensionMismatch,
                "xbar has " + std::to_string(xbar.rows()) + " rows, design has " + std::to_string(B) + " blocks");
  QMatrix q1 = build_q1(design);
  const Eigen::MatrixXd expanded = poly_degree == 1 ? xbar : polynomial_expand(xbar, poly_degree);

  std::vector<std::string> names;
  for (Eigen::Index k = 0; k < xbar.cols(); ++k) {
    const std::string base = static_cast<std::size_t>(k) < labels.size() ? labels[static_cast<std::size_t>(k)]
                                                                         : "x" + std::to_string(k + 1);
    for (int p = 1; p <= poly_degree; ++p) names.push_back(p == 1 ? base : base + "^" + std::to_string(p));
  }

  const Eigen::VectorXd w = weight_vector(design);
  const Eigen::MatrixXd weighted = w.asDiagonal() * expanded;

  QMatrix q;
  q.kind = QKind::Q2;
  q.column_labels = q1.column_labels;
  q.dropped_columns = q1.dropped_columns;

  // Covariate columns that vanish after weighting and centering.
  Eigen::MatrixXd projected(B, 0);
  std::vector<std::string> surviving;
  for (Eigen::Index c = 0; c < weighted.cols(); ++c) {
    const Eigen::VectorXd m = q1.residual(weighted.col(c));
    const double scale = std::max(weighted.col(c).norm(), 1.0);
    if (m.norm() <= kRankTolerance * scale) {
      q.warnings.push_back("covariate column '" + names[static_cast<std::size_t>(c)] +
                           "' is constant after weighting and centering; dropped");
      q.dropped_columns.push_back(names[static_cast<std::size_t>(c)]);
      continue;
    }
    projected.conservativeResize(B, projected.cols() + 1);
    projected.col(projected.cols() - 1) = m;
    surviving.push_back(names[static_cast<std::size_t>(c)]);
  }
  if (projected.cols() == 0)
    throw Error(ErrorKind::DegenerateCovariate, "every covariate column is degenerate after weighting and centering");

  const double ref = projected.colwise().norm().maxCoeff();
  auto [kept, basis] = detail::select_independent(projected, Eigen::MatrixXd(B, 0), ref);
  for (std::size_t c = 0, k = 0; c < surviving.size(); ++c) {
    if (k < kept.size() && kept[k] == static_cast<int>(c)) {
      ++k;
    } else {
      q.dropped_columns.push_back(surviving[c]);
    }
  }

  const Eigen::Index L = q1.values.cols() + static_cast<Eigen::Index>(kept.size());
  if (L >= B)
    throw Error(ErrorKind::TooManyColumns,
                "Q2 would have " + std::to_string(L) + " independent columns with only " + std::to_string(B) + " blocks");
  q.values.resize(B, L);
  q.values.leftCols(q1.values.cols()) = q1.values;
  for (std::size_t k = 0; k < kept.size(); ++k) {
    q.values.col(q1.values.cols() + static_cast<Eigen::Index>(k)) = projected.col(kept[k]);
    q.column_labels.push_back(surviving[static_cast<std::size_t>(kept[k])]);
  }
  q.base_columns = static_cast<int>(q1.values.cols());
  q.added_covariate_rank = static_cast<int>(kept.size());
  detail::finish_q(q);
  return q;
}

/// Q2 from the design's unit covariates, using block means of per-unit powers.
inline QMatrix build_q2(const BlockDesign& design, int poly_degree, std::span<const std::size_t> columns = {},
                        std::vector<std::string> labels = {}) {
  const Eigen::MatrixXd means = block_covariate_means(design, poly_degree, columns);
  // Columns are already expanded; relabel so names carry the power.
  std::vector<std::string> names;
  const std::size_t k_count = means.cols() / poly_degree;
  for (std::size_t k = 0; k < k_count; ++k) {
    const std::string base = k < labels.size() ? labels[k] : "x" + std::to_string(k + 1);
    for (int p = 1; p <= poly_degree; ++p) names.push_back(p == 1 ? base : base + "^" + std::to_string(p));
  }
  return build_q2(design, means, 1, std::move(names));
}

/// Arbitrary fixed Q; collinear columns are dropped in order.
inline QMatrix build_q_custom(const Eigen::MatrixXd& values) {
  const Eigen::Index B = values.rows();
  const double ref = values.cols() > 0 ? values.colwise().norm().maxCoeff() : 0.0;
  auto [kept, basis] = detail::select_independent(values, Eigen::MatrixXd(B, 0), ref);
  QMatrix q;
  q.kind = QKind::Custom;
  q.values.resize(B, static_cast<Eigen::Index>(kept.size()));
  for (std::size_t k = 0, c = 0; c < static_cast<std::size_t>(values.cols()); ++c) {
    if (k < kept.size() && kept[k] == static_cast<int>(c)) {
      q.values.col(static_cast<Eigen::Index>(k)) = values.col(static_cast<Eigen::Index>(c));
      q.column_labels.push_back("c" + std::to_string(c + 1));
      ++k;
    } else {
      q.dropped_columns.push_back("c" + std::to_string(c + 1));
    }
  }
  q.base_columns = static_cast<int>(q.values.cols());
  detail::finish_q(q);
  return q;
}

}  // namespace stratavar
