#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "test_support.hpp"

using namespace mvm;
using namespace mvm::testing;

namespace {

double cos_of(std::vector<double> x, std::vector<double> y) {
  const auto n = x.size();
  return op::cosine_similarity<double>(nullptr, A({n}, x), A({n}, y)).item();
}

}  // namespace

TEST(Cosine, OrthogonalVectorsGiveZero) { EXPECT_DOUBLE_EQ(cos_of({1, 0}, {0, 1}), 0.0); }

TEST(Cosine, ScaledCopyGivesOne) { EXPECT_NEAR(cos_of({2, 0}, {1, 0}), 1.0, 1e-15); }

TEST(Cosine, FortyFiveDegrees) { EXPECT_NEAR(cos_of({1, 1}, {1, 0}), 0.70710678, 1e-8); }

TEST(Cosine, InvariantUnderPositiveScaling) {
  std::mt19937_64 rng(3);
  auto x = random_array({6}, rng, -1, 1, false);
  auto y = random_array({6}, rng, -1, 1, false);
  for (double c : {1e-3, 0.5, 7.0, 1e4}) {
    const double a = op::cosine_similarity<double>(nullptr, x, y).item();
    const double b = op::cosine_similarity<double>(nullptr, op::scale<double>(nullptr, x, c), y).item();
    EXPECT_NEAR(a, b, 1e-15) << "c=" << c;
  }
}

TEST(Cosine, ZeroVectorIsGuarded) {
  const double c = cos_of({0, 0, 0}, {1, 2, 3});
  EXPECT_TRUE(std::isfinite(c));
  EXPECT_DOUBLE_EQ(c, 0.0);
}

TEST(Cosine, ShapeMismatchThrows) {
  EXPECT_THROW(op::cosine_similarity<double>(nullptr, A({2}), A({3})), std::invalid_argument);
}

TEST(Softmax, IdenticalScoresAreUniform) {
  for (double alpha : {0.5, 1.0, 16.0}) {
    auto p = op::softmax_rows<double>(nullptr, A({1, 3}, {4.2, 4.2, 4.2}), alpha);
    for (double v : p.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  }
}

TEST(Softmax, ZeroAlphaIsUniform) {
  auto p = op::softmax_rows<double>(nullptr, A({1, 3}, {5, -2, 0}), 0.0);
  for (double v : p.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, TwoWayLogistic) {
  auto p = op::softmax_rows<double>(nullptr, A({1, 2}, {1, 0}), 1.0);
  // e / (e + 1), evaluated independently.
  const double e = std::exp(1.0);
  EXPECT_NEAR(p[0], e / (e + 1.0), 1e-15);
  EXPECT_NEAR(p[0], 0.73105858, 1e-8);
  EXPECT_NEAR(p[1], 0.26894142, 1e-8);
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
  std::mt19937_64 rng(5);
  auto s = random_array({4, 7}, rng, -30, 30, false);
  auto p = op::softmax_rows<double>(nullptr, s, 2.5);
  auto q = op::softmax_rows<double>(nullptr, op::affine<double>(nullptr, s, 1.0, 123.0), 2.5);
  for (std::size_t r = 0; r < 4; ++r) {
    double sum = 0;
    for (std::size_t c = 0; c < 7; ++c) {
      sum += p.at(r, c);
      EXPECT_NEAR(p.at(r, c), q.at(r, c), 1e-12);
    }
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
}

TEST(Softmax, LargeScoresStayFinite) {
  auto p = op::softmax_rows<double>(nullptr, A({1, 2}, {1000, -1000}), 16.0);
  EXPECT_DOUBLE_EQ(p[0], 1.0);
  EXPECT_DOUBLE_EQ(p[1], 0.0);
}

TEST(Softmax, RejectsNegativeAlphaAndNaN) {
  EXPECT_THROW(op::softmax_rows<double>(nullptr, A({1, 2}, {1, 0}), -1.0), std::invalid_argument);
  EXPECT_THROW(op::softmax_rows<double>(nullptr, A({1, 2}, {std::nan(""), 0}), 1.0), std::invalid_argument);
}

TEST(LayerNorm, ConstantInputMapsToBias) {
  auto y = op::layer_norm_rows<double>(nullptr, A({1, 2}, {3, 3}), A({2}, {1, 1}), A({2}, {0, 0}));
  EXPECT_DOUBLE_EQ(y[0], 0.0);
  EXPECT_DOUBLE_EQ(y[1], 0.0);
}

TEST(LayerNorm, AlreadyStandardised) {
  auto y = op::layer_norm_rows<double>(nullptr, A({1, 2}, {1, -1}), A({2}, {1, 1}), A({2}, {0, 0}));
  EXPECT_NEAR(y[0], 1.0, 1e-5);
  EXPECT_NEAR(y[1], -1.0, 1e-5);
}

TEST(LayerNorm, ThreeValuesWithBias) {
  auto y = op::layer_norm_rows<double>(nullptr, A({1, 3}, {1, 2, 3}), A({3}, {1, 1, 1}), A({3}, {1, 1, 1}));
  // (x - 2) / sqrt(2/3 + 1e-5) + 1, by hand.
  const double s = std::sqrt(2.0 / 3.0 + 1e-5);
  EXPECT_NEAR(y[0], 1.0 - 1.0 / s, 1e-12);
  EXPECT_NEAR(y[0], -0.2247, 1e-3);
  EXPECT_NEAR(y[1], 1.0, 1e-12);
  EXPECT_NEAR(y[2], 2.2247, 1e-3);
}

TEST(LayerNorm, ZeroMeanUnitVariance) {
  std::mt19937_64 rng(8);
  auto x = random_array({5, 16}, rng, -10, 10, false);
  auto y = op::layer_norm_rows<double>(nullptr, x, A({16}, std::vector<double>(16, 1.0)), A({16}));
  for (std::size_t r = 0; r < 5; ++r) {
    double m = 0, v = 0;
    for (std::size_t c = 0; c < 16; ++c) m += y.at(r, c);
    m /= 16;
    for (std::size_t c = 0; c < 16; ++c) v += (y.at(r, c) - m) * (y.at(r, c) - m);
    v /= 16;
    EXPECT_LE(std::abs(m), 1e-6);
    EXPECT_NEAR(v, 1.0, 1e-3);
  }
}

TEST(CrossEntropy, UniformLogits) {
  EXPECT_NEAR(op::cross_entropy<double>(nullptr, A({1, 4}, {0, 0, 0, 0}), 2).item(), std::log(4.0), 1e-12);
  EXPECT_NEAR(std::log(4.0), 1.3863, 1e-4);
}

TEST(CrossEntropy, SaturatedCorrectLogit) {
  EXPECT_NEAR(op::cross_entropy<double>(nullptr, A({1, 2}, {30, -30}), 0).item(), 0.0, 1e-20);
}

TEST(CrossEntropy, TwoClassHandValue) {
  // -log(e / (e + e^2)) = log(1 + e)
  const double ce = op::cross_entropy<double>(nullptr, A({1, 2}, {1, 2}), 0).item();
  EXPECT_NEAR(ce, std::log1p(std::exp(1.0)), 1e-12);
  EXPECT_NEAR(ce, 1.3133, 1e-4);
}

TEST(CrossEntropy, BatchIsMeanOfRows) {
  const std::vector<int> labels{0, 1};
  const double both = op::cross_entropy<double>(nullptr, A({2, 2}, {1, 2, 0, 0}), labels).item();
  EXPECT_NEAR(both, 0.5 * (std::log1p(std::exp(1.0)) + std::log(2.0)), 1e-12);
}

TEST(CrossEntropy, LabelOutOfRangeThrows) {
  EXPECT_THROW(op::cross_entropy<double>(nullptr, A({1, 2}, {0, 0}), 2), std::invalid_argument);
  EXPECT_THROW(op::cross_entropy<double>(nullptr, A({1, 2}, {0, 0}), -1), std::invalid_argument);
}

TEST(FiniteDiff, SquareAtThree) {
  A x({1}, {3.0}, true);
  auto g = finite_diff_gradient<double>([&] { return x[0] * x[0]; }, {x}, 1e-4);
  EXPECT_NEAR(g[0][0], 6.0, 1e-6);
  EXPECT_DOUBLE_EQ(x[0], 3.0);  // restored
}

TEST(FiniteDiff, ConstantHasZeroGradient) {
  std::mt19937_64 rng(1);
  auto x = random_array({3, 2}, rng);
  auto g = finite_diff_gradient<double>([] { return 4.0; }, {x}, 1e-4);
  for (double v : g[0]) EXPECT_EQ(v, 0.0);
}

TEST(FiniteDiff, RelativeErrorFloor) {
  const std::vector<double> a{1.0, 0.0, 1e-9}, b{1.0 + 1e-6, 0.0, 2e-9};
  EXPECT_NEAR(max_relative_error<double>(a, b), 1e-2, 1e-12);  // 1e-9 gap over the 1e-7 floor
}

// ---- tape vs finite differences, op by op ---------------------------------

class OpGradient : public ::testing::Test {
 protected:
  std::mt19937_64 rng{2024};
  static constexpr double kTol = 1e-4;
};

TEST_F(OpGradient, AddAndAffine) {
  auto a = random_array({3, 4}, rng), b = random_array({3, 4}, rng);
  EXPECT_LT(gradient_error([&](TapeD* t) { return weighted_sum(t, op::affine(t, op::add(t, a, b), 1.7, 0.3)); }, {a, b}),
            kTol);
}

TEST_F(OpGradient, AddRow) {
  auto a = random_array({3, 4}, rng), b = random_array({4}, rng);
  EXPECT_LT(gradient_error([&](TapeD* t) { return weighted_sum(t, op::add_row(t, a, b)); }, {a, b}), kTol);
}

TEST_F(OpGradient, Matmul) {
  auto a = random_array({3, 4}, rng), b = random_array({4, 2}, rng);
  EXPECT_LT(gradient_error([&](TapeD* t) { return weighted_sum(t, op::matmul(t, a, b)); }, {a, b}), kTol);
}

TEST_F(OpGradient, MatmulTransposedRight) {
  auto a = random_array({3, 4}, rng), b = random_array({5, 4}, rng);
  EXPECT_LT(gradient_error([&](TapeD* t) { return weighted_sum(t, op::matmul_nt(t, a, b)); }, {a, b}), kTol);
}

TEST_F(OpGradient, TransposeAndConcat) {
  auto a = random_array({3, 2}, rng), b = random_array({3, 4}, rng);
  EXPECT_LT(gradient_error([&](TapeD* t) { return weighted_sum(t, op::transpose(t, op::concat_cols(t, {a, b}))); },
                           {a, b}),
            kTol);
}

TEST_F(OpGradient, AbsAwayFromZero) {
  auto a = random_array({3, 3}, rng, 0.1, 1.0);
  for (std::size_t i = 0; i < a.size(); i += 2) a[i] = -a[i];
  EXPECT_LT(gradient_error([&](TapeD* t) { return weighted_sum(t, op::abs(t, a)); }, {a}), kTol);
}

TEST_F(OpGradient, OffDiagonalSum) {
  auto a = random_array({4, 4}, rng);
  EXPECT_LT(gradient_error([&](TapeD* t) { return op::sum_offdiag(t, a); }, {a}), kTol);
  EXPECT_EQ(op::sum_offdiag<double>(nullptr, A({2, 2}, {9, 1, 2, 9})).item(), 3.0);
}

TEST_F(OpGradient, Gelu) {
  auto a = random_array({3, 4}, rng, -3, 3);
  EXPECT_LT(gradient_error([&](TapeD* t) { return weighted_sum(t, op::gelu(t, a)); }, {a}), kTol);
}

TEST_F(OpGradient, CosineMatrixAndRows) {
  auto a = random_array({3, 4}, rng), b = random_array({5, 4}, rng), c = random_array({3, 4}, rng);
  EXPECT_LT(gradient_error([&](TapeD* t) { return weighted_sum(t, op::cosine_matrix(t, a, b)); }, {a, b}), kTol);
  EXPECT_LT(gradient_error([&](TapeD* t) { return weighted_sum(t, op::cosine_rows(t, a, c)); }, {a, c}), kTol);
}

TEST_F(OpGradient, Softmax) {
  auto a = random_array({3, 4}, rng);
  EXPECT_LT(gradient_error([&](TapeD* t) { return weighted_sum(t, op::softmax_rows(t, a, 3.0)); }, {a}), kTol);
}

TEST_F(OpGradient, LayerNorm) {
  auto x = random_array({3, 4}, rng), g = random_array({4}, rng, 0.5, 1.5), b = random_array({4}, rng);
  EXPECT_LT(gradient_error([&](TapeD* t) { return weighted_sum(t, op::layer_norm_rows(t, x, g, b)); }, {x, g, b}),
            kTol);
}

TEST_F(OpGradient, CrossEntropy) {
  auto z = random_array({3, 4}, rng, -2, 2);
  const std::vector<int> y{0, 3, 1};
  EXPECT_LT(gradient_error([&](TapeD* t) { return op::cross_entropy(t, z, std::span<const int>(y)); }, {z}), kTol);
}

TEST_F(OpGradient, EmbeddingWithRepeatedTokens) {
  auto table = random_array({5, 3}, rng);
  const std::vector<int> tok{1, 4, 1, 0, 1};
  EXPECT_LT(gradient_error([&](TapeD* t) { return weighted_sum(t, op::embedding(t, table, std::span<const int>(tok))); },
                           {table}),
            kTol);
}

TEST_F(OpGradient, DilatedConvolutionAcrossSequences) {
  // Two sequences of length 5; dilation 2 makes the padding reach across the
  // edge, which must not leak between sequences.
  auto x = random_array({10, 3}, rng), w = random_array({3 * 3, 2}, rng), b = random_array({2}, rng);
  EXPECT_LT(gradient_error([&](TapeD* t) { return weighted_sum(t, op::conv1d_time(t, x, w, b, 5, 3, 2)); }, {x, w, b}),
            kTol);
}

TEST_F(OpGradient, MeanPoolTime) {
  auto x = random_array({6, 2}, rng);
  EXPECT_LT(gradient_error([&](TapeD* t) { return weighted_sum(t, op::mean_pool_time(t, x, 3)); }, {x}), kTol);
}

TEST_F(OpGradient, NormalizeRowsAwayFromClamp) {
  auto x = random_array({3, 4}, rng);
  EXPECT_LT(gradient_error([&](TapeD* t) { return weighted_sum(t, op::normalize_rows(t, x)); }, {x}), kTol);
}

// ---- direct value checks -------------------------------------------------

TEST(Conv1d, MatchesDirectSum) {
  std::mt19937_64 rng(4);
  const std::size_t T = 6, Cin = 2, Cout = 3, K = 3, dil = 2;
  auto x = random_array({2 * T, Cin}, rng, -1, 1, false);
  auto w = random_array({K * Cin, Cout}, rng, -1, 1, false);
  auto b = random_array({Cout}, rng, -1, 1, false);
  auto y = op::conv1d_time<double>(nullptr, x, w, b, T, K, dil);
  for (std::size_t s = 0; s < 2; ++s)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t o = 0; o < Cout; ++o) {
        double acc = b[o];
        for (std::size_t k = 0; k < K; ++k) {
          const long src = static_cast<long>(t) + (static_cast<long>(k) - 1) * static_cast<long>(dil);
          if (src < 0 || src >= static_cast<long>(T)) continue;
          for (std::size_t c = 0; c < Cin; ++c) acc += x.at(s * T + src, c) * w.at(k * Cin + c, o);
        }
        EXPECT_NEAR(y.at(s * T + t, o), acc, 1e-12);
      }
}

TEST(Matmul, ShapeErrorsAreEager) {
  EXPECT_THROW(op::matmul<double>(nullptr, A({2, 3}), A({2, 3})), std::invalid_argument);
  EXPECT_THROW(op::add<double>(nullptr, A({2, 3}), A({3, 2})), std::invalid_argument);
}

TEST(Tape, ForwardWithoutTapeRecordsNothing) {
  std::mt19937_64 rng(1);
  auto a = random_array({2, 2}, rng);
  TapeD tape;
  auto y = op::sum<double>(nullptr, op::matmul<double>(nullptr, a, a));
  EXPECT_EQ(tape.size(), 0u);
  EXPECT_FALSE(a.has_grad());
  (void)y;
}

TEST(Tape, GradientsAccumulateOverReuse) {
  A x({1}, {2.0}, true);
  TapeD tape;
  auto y = op::sum(&tape, op::add(&tape, x, x));  // d/dx (2x) = 2
  tape.backward(y);
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
}

TEST(Array, CastRoundTripsThroughFloat) {
  A x({2}, {0.5, -0.25});
  auto f = x.cast<float>();
  EXPECT_FLOAT_EQ(f[0], 0.5f);
  EXPECT_EQ(f.cast<double>().data()[1], -0.25);
}

TEST(Array, ZeroDimensionRejected) { EXPECT_THROW(A({0, 3}), std::invalid_argument); }
