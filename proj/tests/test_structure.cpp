#include <random>

#include <gtest/gtest.h>

#include "kolmo/structure.hpp"

using namespace kolmo;

namespace {

Matrix prototype_B() {
  Matrix B(2, 2);
  B << 0, 0, 1, 0;
  return B;
}

// Random canonical B for the given blocks: sub-diagonal blocks are [I | noise]
// scaled, so full rank is guaranteed.
Matrix random_canonical(const std::vector<int>& blocks, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> U(-1.0, 1.0);
  const auto s = BlockStructure::from_blocks(blocks);
  Matrix B = Matrix::Zero(s.N, s.N);
  for (int j = 1; j < static_cast<int>(blocks.size()); ++j) {
    const int mj = blocks[j], mp = blocks[j - 1];
    Matrix Bj(mj, mp);
    for (int r = 0; r < mj; ++r)
      for (int c = 0; c < mp; ++c) Bj(r, c) = 0.3 * U(rng);
    for (int r = 0; r < mj; ++r) Bj(r, r) += (U(rng) > 0 ? 1.0 : -1.0) * (1.0 + U(rng) * 0.5);
    B.block(s.offset(j), s.offset(j - 1), mj, mp) = Bj;
  }
  return B;
}

}  // namespace

TEST(Structure, ExponentsExpandBlocks) {
  EXPECT_EQ(homogeneity_exponents(std::vector<int>{1, 1}), (std::vector<int>{1, 3}));
  EXPECT_EQ(homogeneity_exponents(std::vector<int>{2, 1}), (std::vector<int>{1, 1, 3}));
  EXPECT_EQ(homogeneity_exponents(std::vector<int>{1, 1, 1}), (std::vector<int>{1, 3, 5}));
}

TEST(Structure, PrototypeIsCanonical) {
  const auto s = detect_canonical_form(prototype_B(), {1, 1});
  EXPECT_EQ(s.Q, 4);
  EXPECT_EQ(s.kappa, 1);
  EXPECT_EQ(s.alpha, (std::vector<int>{1, 3}));
  EXPECT_EQ(s.N, 2);
}

TEST(Structure, ParabolicCase) {
  const auto s = detect_canonical_form(Matrix::Zero(3, 3), {3});
  EXPECT_EQ(s.Q, 3);
  EXPECT_EQ(s.kappa, 0);
  EXPECT_EQ(s.alpha, (std::vector<int>{1, 1, 1}));
}

TEST(Structure, ZeroSubdiagonalIsRankDeficient) {
  try {
    detect_canonical_form(Matrix::Zero(2, 2), {1, 1});
    FAIL() << "expected RankDeficient";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::rank_deficient);
  }
}

TEST(Structure, OffPatternEntryIsRejected) {
  Matrix B = prototype_B();
  B(0, 1) = 1e-9;  // 10x the default tolerance
  try {
    detect_canonical_form(B, {1, 1});
    FAIL() << "expected NotCanonical";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::not_canonical);
  }
  B(0, 1) = 1e-12;
  EXPECT_NO_THROW(detect_canonical_form(B, {1, 1}));
}

TEST(Structure, InvalidBlocksThrow) {
  EXPECT_THROW(BlockStructure::from_blocks({1, 2}), Error);
  EXPECT_THROW(BlockStructure::from_blocks({}), Error);
  EXPECT_THROW(detect_canonical_form(prototype_B(), {1}), Error);
}

TEST(Structure, DimensionIdentities) {
  for (const auto& b : std::vector<std::vector<int>>{{1}, {1, 1}, {2, 1}, {3, 2, 2}, {2, 2, 1, 1}}) {
    const auto s = BlockStructure::from_blocks(b);
    int sum = 0;
    for (int a : s.alpha) sum += a;
    EXPECT_EQ(s.Q, sum);
    EXPECT_TRUE(std::is_sorted(s.alpha.begin(), s.alpha.end()));
    for (int i = 0; i < s.N; ++i) EXPECT_EQ(s.alpha[i], 2 * s.block_of(i) + 1);
  }
}

TEST(Structure, Hypoellipticity) {
  auto rep = check_hypoellipticity(prototype_B(), 1);
  EXPECT_EQ(rep.kalman_rank, 2);
  EXPECT_TRUE(rep.hypoelliptic);
  // C(1) for the prototype is [[1,-1/2],[-1/2,1/3]]; min eig by hand.
  const double a = 1.0, b = -0.5, d = 1.0 / 3.0;
  const double lmin = 0.5 * (a + d) - std::sqrt(0.25 * (a - d) * (a - d) + b * b);
  EXPECT_NEAR(rep.c_min_eig, lmin, 1e-14);

  EXPECT_TRUE(check_hypoellipticity(Matrix::Zero(3, 3), 3).hypoelliptic);
  rep = check_hypoellipticity(Matrix::Zero(2, 2), 1);
  EXPECT_FALSE(rep.hypoelliptic);
  EXPECT_EQ(rep.kalman_rank, 1);
}

TEST(Structure, KalmanAndCovarianceAgreeOnRandomCanonical) {
  std::mt19937_64 rng(7);
  const std::vector<std::vector<int>> shapes{{1, 1}, {2, 1}, {2, 2}, {1, 1, 1}, {2, 2, 1}, {3, 2, 1}, {1, 1, 1, 1}};
  for (int k = 0; k < 1000; ++k) {
    const auto& b = shapes[k % shapes.size()];
    const Matrix B = random_canonical(b, rng);
    EXPECT_NO_THROW(detect_canonical_form(B, b));
    const auto rep = check_hypoellipticity(B, b[0]);
    EXPECT_TRUE(rep.hypoelliptic);
  }
}

TEST(Structure, VanLoanMatchesQuadrature) {
  // Non-nilpotent B: compare against a fine composite Gauss-Legendre integral.
  Matrix B(2, 2);
  B << -0.3, 0.2, 1.0, 0.4;
  Matrix S(1, 1);
  S << 1.5;
  const double t = 0.8;
  const Matrix C = covariance_matrix(B, S, t);
  const auto rule = quad::composite_legendre(10, 20, 0.0, t);
  Matrix ref = Matrix::Zero(2, 2);
  const Matrix Sb = pad(S, 2);
  for (std::size_t i = 0; i < rule.size(); ++i) {
    const Matrix E = (-rule.nodes[i] * B).exp();
    ref += rule.weights[i] * E * Sb * E.transpose();
  }
  EXPECT_LT((C - ref).norm(), 1e-13);
}
