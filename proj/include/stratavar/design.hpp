#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "stratavar/error.hpp"

namespace stratavar {

/// One stratum: n units of which n_treated receive treatment.
/// `covariates` is either empty (K = 0) or holds one length-K vector per unit.
struct Block {
  std::string id;
  int n = 0;
  int n_treated = 0;
  std::vector<std::vector<double>> covariates;

  int n_control() const noexcept { return n - n_treated; }
};

enum class DesignClass { Fine, Coarse, Mixed };

inline const char* to_string(DesignClass c) {
  switch (c) {
    case DesignClass::Fine: return "fine";
    case DesignClass::Coarse: return "coarse";
    case DesignClass::Mixed: return "mixed";
  }
  return "unknown";
}

/// A validated block-randomized design. Immutable once built; construct
/// through validate_design().
class BlockDesign {
 public:
  const std::vector<Block>& blocks() const noexcept { return blocks_; }
  const Block& block(std::size_t i) const { return blocks_.at(i); }
  std::size_t num_blocks() const noexcept { return blocks_.size(); }
  int num_units() const noexcept { return num_units_; }
  std::size_t covariate_dim() const noexcept { return covariate_dim_; }
  DesignClass design_class() const noexcept { return class_; }

  bool equal_block_sizes() const noexcept {
    for (const auto& b : blocks_)
      if (b.n != blocks_.front().n) return false;
    return true;
  }

  bool all_pairs() const noexcept {
    for (const auto& b : blocks_)
      if (b.n != 2) return false;
    return true;
  }

  /// Offset of block i's first unit in the flattened unit order.
  std::size_t unit_offset(std::size_t i) const { return offsets_.at(i); }

  friend BlockDesign validate_design(std::vector<Block> blocks);

 private:
  BlockDesign() = default;

  std::vector<Block> blocks_;
  std::vector<std::size_t> offsets_;
  int num_units_ = 0;
  std::size_t covariate_dim_ = 0;
  DesignClass class_ = DesignClass::Fine;
};

/// Checks every block invariant and returns the validated design.
/// Block order is preserved exactly as given.
inline BlockDesign validate_design(std::vector<Block> blocks) {
  std::size_t dim = 0;
  bool dim_known = false;
  for (const auto& b : blocks) {
    if (b.n < 2 || b.n_treated < 1 || b.n_treated > b.n - 1)
      throw Error(ErrorKind::InfeasibleBlock, "block '" + b.id + "' has n=" + std::to_string(b.n) +
                                                  ", n_treated=" + std::to_string(b.n_treated));
    if (!b.covariates.empty() && b.covariates.size() != static_cast<std::size_t>(b.n))
      throw Error(ErrorKind::DimensionMismatch,
                  "block '" + b.id + "' lists covariates for " + std::to_string(b.covariates.size()) + " of " +
                      std::to_string(b.n) + " units");
    const std::size_t block_dim = b.covariates.empty() ? 0 : b.covariates.front().size();
    for (const auto& x : b.covariates)
      if (x.size() != block_dim)
        throw Error(ErrorKind::DimensionMismatch, "ragged covariate vectors in block '" + b.id + "'");
    if (!dim_known) {
      dim = block_dim;
      dim_known = true;
    } else if (block_dim != dim) {
      throw Error(ErrorKind::DimensionMismatch, "block '" + b.id + "' has covariate dimension " +
                                                    std::to_string(block_dim) + ", expected " + std::to_string(dim));
    }
  }

  if (blocks.size() < 2)
    throw Error(ErrorKind::TooFewBlocks, "a design needs at least 2 blocks, got " + std::to_string(blocks.size()));

  BlockDesign d;
  d.covariate_dim_ = dim;
  bool all_fine = true;
  bool all_coarse = true;
  std::size_t offset = 0;
  for (const auto& b : blocks) {
    const int m = std::min(b.n_treated, b.n_control());
    all_fine = all_fine && m == 1;
    all_coarse = all_coarse && m >= 2;
    d.offsets_.push_back(offset);
    offset += static_cast<std::size_t>(b.n);
    d.num_units_ += b.n;
  }
  d.class_ = all_fine ? DesignClass::Fine : (all_coarse ? DesignClass::Coarse : DesignClass::Mixed);
  d.blocks_ = std::move(blocks);
  return d;
}

/// Convenience builder for designs without covariates.
inline BlockDesign make_design(const std::vector<std::pair<int, int>>& sizes_and_treated) {
  std::vector<Block> blocks;
  blocks.reserve(sizes_and_treated.size());
  for (std::size_t i = 0; i < sizes_and_treated.size(); ++i)
    blocks.push_back(Block{"b" + std::to_string(i + 1), sizes_and_treated[i].first, sizes_and_treated[i].second, {}});
  return validate_design(std::move(blocks));
}

/// w_i = B n_i / N.
inline std::vector<double> block_weights(const BlockDesign& design) {
  const double B = static_cast<double>(design.num_blocks());
  const double N = static_cast<double>(design.num_units());
  std::vector<double> w;
  w.reserve(design.num_blocks());
  for (const auto& b : design.blocks()) w.push_back(B * b.n / N);
  return w;
}

/// Per-block 0/1 treatment indicators.
struct Assignment {
  std::vector<std::vector<std::uint8_t>> z;

  bool operator==(const Assignment&) const = default;
};

/// A realized experiment: treatment vector plus observed responses.
struct Observed {
  Assignment assignment;
  std::vector<std::vector<double>> responses;
};

inline void check_observed(const BlockDesign& design, const Observed& data) {
  const auto& z = data.assignment.z;
  if (z.size() != design.num_blocks() || data.responses.size() != design.num_blocks())
    throw Error(ErrorKind::DimensionMismatch, "assignment/response block count does not match design");
  for (std::size_t i = 0; i < design.num_blocks(); ++i) {
    const auto& b = design.block(i);
    if (z[i].size() != static_cast<std::size_t>(b.n) || data.responses[i].size() != static_cast<std::size_t>(b.n))
      throw Error(ErrorKind::DimensionMismatch, "block '" + b.id + "' shape mismatch");
    int treated = 0;
    for (auto v : z[i]) treated += v ? 1 : 0;
    if (treated != b.n_treated)
      throw Error(ErrorKind::InfeasibleBlock, "block '" + b.id + "' assignment treats " + std::to_string(treated) +
                                                  " units, design says " + std::to_string(b.n_treated));
  }
}

namespace detail {

/// All k-subsets of {0..n-1} as 0/1 masks, lexicographic in the sorted index tuple.
inline std::vector<std::vector<std::uint8_t>> subsets_lex(int n, int k) {
  std::vector<std::vector<std::uint8_t>> out;
  std::vector<int> idx(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) idx[static_cast<std::size_t>(i)] = i;
  while (true) {
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(n), 0);
    for (int v : idx) mask[static_cast<std::size_t>(v)] = 1;
    out.push_back(std::move(mask));
    int pos = k - 1;
    while (pos >= 0 && idx[static_cast<std::size_t>(pos)] == n - k + pos) --pos;
    if (pos < 0) break;
    ++idx[static_cast<std::size_t>(pos)];
    for (int j = pos + 1; j < k; ++j) idx[static_cast<std::size_t>(j)] = idx[static_cast<std::size_t>(j - 1)] + 1;
  }
  return out;
}

inline double binomial(int n, int k) {
  double r = 1.0;
  for (int i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return std::round(r);
}

}  // namespace detail

/// |Omega| = prod_i C(n_i, n_1i), as a double (exact below 2^53).
inline double assignment_space_size(const BlockDesign& design) {
  double size = 1.0;
  for (const auto& b : design.blocks()) size *= detail::binomial(b.n, b.n_treated);
  return size;
}

/// Indexable view of Omega. Index 0 is the lexicographically first
/// assignment; the last block varies fastest.
class AssignmentSpace {
 public:
  AssignmentSpace(const BlockDesign& design, std::uint64_t cap) {
    const double size = assignment_space_size(design);
    if (size > static_cast<double>(cap))
      throw Error(ErrorKind::SpaceTooLarge,
                  "|Omega| = " + std::to_string(size) + " exceeds the enumeration cap " + std::to_string(cap));
    size_ = static_cast<std::uint64_t>(size);
    for (const auto& b : design.blocks()) subsets_.push_back(detail::subsets_lex(b.n, b.n_treated));
  }

  std::uint64_t size() const noexcept { return size_; }
  std::size_t num_blocks() const noexcept { return subsets_.size(); }

  /// Treated mask of block i under its k-th subset.
  const std::vector<std::uint8_t>& subset(std::size_t block, std::size_t k) const { return subsets_[block][k]; }
  std::size_t subsets_in_block(std::size_t block) const { return subsets_[block].size(); }

  /// Per-block subset indices of assignment `index`.
  std::vector<std::size_t> digits(std::uint64_t index) const {
    std::vector<std::size_t> d(subsets_.size());
    for (std::size_t i = subsets_.size(); i-- > 0;) {
      const std::uint64_t radix = subsets_[i].size();
      d[i] = static_cast<std::size_t>(index % radix);
      index /= radix;
    }
    return d;
  }

  Assignment at(std::uint64_t index) const {
    const auto d = digits(index);
    Assignment a;
    a.z.reserve(subsets_.size());
    for (std::size_t i = 0; i < subsets_.size(); ++i) a.z.push_back(subsets_[i][d[i]]);
    return a;
  }

 private:
  std::vector<std::vector<std::vector<std::uint8_t>>> subsets_;
  std::uint64_t size_ = 0;
};

inline constexpr std::uint64_t kDefaultEnumerationCap = 1'000'000;

/// Every element of Omega exactly once, in lexicographic order.
inline std::vector<Assignment> enumerate_assignments(const BlockDesign& design,
                                                     std::uint64_t cap = kDefaultEnumerationCap) {
  AssignmentSpace space(design, cap);
  std::vector<Assignment> out;
  out.reserve(static_cast<std::size_t>(space.size()));
  for (std::uint64_t k = 0; k < space.size(); ++k) out.push_back(space.at(k));
  return out;
}

/// Uniform draw within each block (partial Fisher-Yates).
template <typename Rng>
Assignment sample_assignment(const BlockDesign& design, Rng& rng) {
  Assignment a;
  a.z.reserve(design.num_blocks());
  std::vector<int> perm;
  for (const auto& b : design.blocks()) {
    perm.resize(static_cast<std::size_t>(b.n));
    for (int j = 0; j < b.n; ++j) perm[static_cast<std::size_t>(j)] = j;
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(b.n), 0);
    for (int j = 0; j < b.n_treated; ++j) {
      std::uniform_int_distribution<int> pick(j, b.n - 1);
      std::swap(perm[static_cast<std::size_t>(j)], perm[static_cast<std::size_t>(pick(rng))]);
      mask[static_cast<std::size_t>(perm[static_cast<std::size_t>(j)])] = 1;
    }
    a.z.push_back(std::move(mask));
  }
  return a;
}

inline Assignment sample_assignment(const BlockDesign& design, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sample_assignment(design, rng);
}

}  // namespace stratavar
