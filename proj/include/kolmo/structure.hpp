#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "kolmo/error.hpp"
#include "kolmo/linalg.hpp"

namespace kolmo {

/// Dilation exponents: every coordinate of block j scales with r^(2j+1).
inline std::vector<int> homogeneity_exponents(std::span<const int> blocks) {
  std::vector<int> alpha;
  for (std::size_t j = 0; j < blocks.size(); ++j)
    alpha.insert(alpha.end(), static_cast<std::size_t>(blocks[j]), static_cast<int>(2 * j + 1));
  return alpha;
}

/// Block partition m_0 >= m_1 >= ... >= m_kappa >= 1 of the spatial coordinates,
/// together with the quantities derived from it.
struct BlockStructure {
  std::vector<int> blocks;
  int N = 0;
  int kappa = 0;
  int Q = 0;  // homogeneous dimension of the spatial part; Q + 2 with time
  std::vector<int> alpha;

  static BlockStructure from_blocks(std::vector<int> blocks) {
    require(!blocks.empty(), "blocks must be non-empty");
    for (std::size_t j = 0; j < blocks.size(); ++j) {
      require(blocks[j] >= 1, "block sizes must be positive");
      require(j == 0 || blocks[j] <= blocks[j - 1], "block sizes must be non-increasing");
    }
    BlockStructure s;
    s.blocks = std::move(blocks);
    s.N = std::accumulate(s.blocks.begin(), s.blocks.end(), 0);
    s.kappa = static_cast<int>(s.blocks.size()) - 1;
    for (std::size_t j = 0; j < s.blocks.size(); ++j) s.Q += static_cast<int>(2 * j + 1) * s.blocks[j];
    s.alpha = homogeneity_exponents(s.blocks);
    return s;
  }

  int m0() const { return blocks.front(); }
  int offset(int j) const {
    return std::accumulate(blocks.begin(), blocks.begin() + j, 0);
  }
  int block_of(int i) const {
    int j = 0, acc = blocks[0];
    while (i >= acc) acc += blocks[++j];
    return j;
  }

  friend bool operator==(const BlockStructure&, const BlockStructure&) = default;
};

/// Checks that B has the lower block-bidiagonal layout dictated by `blocks`,
/// with every sub-diagonal block B_j (m_j x m_{j-1}) of full rank m_j.
///
/// Off-pattern entries must vanish up to `tol * max(1, |B|_F)`; ranks use the
/// singular-value cutoff `rank_tol * |B_j|`.
inline BlockStructure detect_canonical_form(const Matrix& B, std::vector<int> blocks, double tol = 1e-10,
                                            double rank_tol = 1e-10) {
  require(B.rows() == B.cols(), "B must be square");
  BlockStructure s = BlockStructure::from_blocks(std::move(blocks));
  require(s.N == B.rows(), "blocks must partition the dimension of B");
  const double abs_tol = tol * std::max(1.0, B.norm());
  const int nb = static_cast<int>(s.blocks.size());
  for (int bi = 0; bi < nb; ++bi) {
    for (int bj = 0; bj < nb; ++bj) {
      auto blk = B.block(s.offset(bi), s.offset(bj), s.blocks[bi], s.blocks[bj]);
      if (bi == bj + 1) continue;
      if (blk.cwiseAbs().maxCoeff() > abs_tol)
        fail(Errc::not_canonical,
             "block (" + std::to_string(bi) + "," + std::to_string(bj) + ") must vanish");
    }
  }
  for (int j = 1; j < nb; ++j) {
    Matrix Bj = B.block(s.offset(j), s.offset(j - 1), s.blocks[j], s.blocks[j - 1]);
    if (detail::numerical_rank(Bj, rank_tol) < s.blocks[j])
      fail(Errc::rank_deficient, "B_" + std::to_string(j) + " has rank below m_" + std::to_string(j));
  }
  return s;
}

struct HypoReport {
  int kalman_rank = 0;
  double c_min_eig = 0.0;
  bool hypoelliptic = false;
};

/// Kalman rank of [D, BD, ..., B^{N-1} D] and min eig of C(1) (A0 = I) must
/// agree; a disagreement is a numerical bug, not a property of the input.
inline HypoReport check_hypoellipticity(const Matrix& B, int m0, double tol = 1e-10) {
  require(B.rows() == B.cols(), "B must be square");
  const int N = static_cast<int>(B.rows());
  require(m0 >= 1 && m0 <= N, "1 <= m0 <= N");
  Matrix K(N, N * m0);
  Matrix block = Matrix::Identity(N, m0);
  for (int k = 0; k < N; ++k) {
    K.middleCols(k * m0, m0) = block;
    block = B * block;
  }
  HypoReport rep;
  rep.kalman_rank = detail::numerical_rank(K, tol);
  Matrix C = covariance_matrix(B, Matrix::Identity(m0, m0), 1.0);
  Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (C + C.transpose()));
  rep.c_min_eig = es.eigenvalues()(0);
  const bool by_rank = rep.kalman_rank == N;
  const bool by_cov = rep.c_min_eig > tol * std::max(1.0, es.eigenvalues()(N - 1));
  if (by_rank != by_cov)
    fail(Errc::internal_inconsistency, "Kalman rank and C(1) positivity disagree");
  rep.hypoelliptic = by_rank;
  return rep;
}

}  // namespace kolmo
