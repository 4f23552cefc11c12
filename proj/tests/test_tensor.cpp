#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "test_util.hpp"

using namespace layerlock;
using namespace layerlock::testing;

namespace {

constexpr double kTol = 1e-6;

// Weighted sum with fixed random weights so that every output entry carries a
// distinct gradient.
Tensor probe(const Tensor& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  const auto w = random_tensor(y.shape(), rng, 1.0, false);
  return sum(mul(y, w));
}

}  // namespace

TEST(TensorGrad, Matmul) {
  Rng rng(1);
  auto a = random_tensor({3, 4}, rng), b = random_tensor({4, 5}, rng);
  EXPECT_LT(finite_difference([&] { return probe(matmul(a, b)); }, {a, b}).max_rel, kTol);
}

TEST(TensorGrad, MatmulTransposed) {
  Rng rng(2);
  auto a = random_tensor({3, 4}, rng), b = random_tensor({5, 4}, rng);
  EXPECT_LT(finite_difference([&] { return probe(matmul_nt(a, b)); }, {a, b}).max_rel, kTol);
}

TEST(TensorGrad, ElementwiseArithmetic) {
  Rng rng(3);
  auto a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
  EXPECT_LT(finite_difference([&] { return probe(add(a, b)); }, {a, b}).max_rel, kTol);
  EXPECT_LT(finite_difference([&] { return probe(sub(a, b)); }, {a, b}).max_rel, kTol);
  EXPECT_LT(finite_difference([&] { return probe(mul(a, b)); }, {a, b}).max_rel, kTol);
  EXPECT_LT(finite_difference([&] { return probe(scale(a, -1.7)); }, {a}).max_rel, kTol);
  EXPECT_LT(finite_difference([&] { return probe(square(a)); }, {a}).max_rel, kTol);
}

TEST(TensorGrad, RowBroadcastAndLinear) {
  Rng rng(4);
  auto x = random_tensor({5, 3}, rng), w = random_tensor({3, 2}, rng), v = random_tensor({2}, rng);
  auto r = random_tensor({3}, rng);
  EXPECT_LT(finite_difference([&] { return probe(add_rowvec(x, r)); }, {x, r}).max_rel, kTol);
  EXPECT_LT(finite_difference([&] { return probe(linear(x, w, v)); }, {x, w, v}).max_rel, kTol);
}

TEST(TensorGrad, Gelu) {
  Rng rng(5);
  auto a = random_tensor({4, 6}, rng, 2.0);
  // The derivative crosses zero near x = -0.75, so compare absolutely.
  EXPECT_LT(finite_difference([&] { return probe(gelu(a)); }, {a}).max_abs, 1e-9);
  // Closed form: Phi(x) + x phi(x).
  const auto g = backward(sum(gelu(a)), std::vector<Tensor>{a}).of(a);
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double x = a.data()[i];
    const double expect = 0.5 * std::erfc(-x / std::sqrt(2.0)) + x * std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    EXPECT_NEAR(g[i], expect, 1e-14);
  }
}

TEST(TensorGrad, LayerNorm) {
  Rng rng(6);
  auto x = random_tensor({4, 6}, rng), g = random_tensor({6}, rng), b = random_tensor({6}, rng);
  EXPECT_LT(finite_difference([&] { return probe(layer_norm(x, g, b, 1e-6)); }, {x, g, b}).max_rel, kTol);
}

TEST(TensorGrad, SoftmaxAndCrossEntropy) {
  Rng rng(7);
  auto x = random_tensor({3, 5}, rng);
  EXPECT_LT(finite_difference([&] { return probe(softmax_rows(x)); }, {x}).max_rel, kTol);
  const std::vector<int> labels{0, 4, 2};
  EXPECT_LT(finite_difference([&] { return cross_entropy(x, labels); }, {x}).max_rel, kTol);
}

TEST(TensorGrad, Reductions) {
  Rng rng(8);
  auto a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
  EXPECT_LT(finite_difference([&] { return mean(square(a)); }, {a}).max_rel, kTol);
  EXPECT_LT(finite_difference([&] { return scale(sum(a), 0.5); }, {a}).max_rel, kTol);
  EXPECT_LT(finite_difference([&] { return mse(a, b); }, {a, b}).max_rel, kTol);
}

TEST(TensorGrad, SlicingAndConcatenation) {
  Rng rng(9);
  auto a = random_tensor({4, 6}, rng), b = random_tensor({4, 2}, rng), c = random_tensor({3, 6}, rng);
  EXPECT_LT(finite_difference([&] { return probe(slice_cols(a, 1, 3)); }, {a}).max_rel, kTol);
  EXPECT_LT(finite_difference([&] { return probe(slice_rows(a, 1, 2)); }, {a}).max_rel, kTol);
  EXPECT_LT(finite_difference([&] { return probe(concat_cols({a, b})); }, {a, b}).max_rel, kTol);
  EXPECT_LT(finite_difference([&] { return probe(concat_rows({a, c})); }, {a, c}).max_rel, kTol);
  EXPECT_LT(finite_difference([&] { return probe(a.reshape({6, 4})); }, {a}).max_rel, kTol);
}

TEST(TensorGrad, GatherRowsAccumulatesRepeats) {
  Rng rng(10);
  auto a = random_tensor({5, 3}, rng);
  const std::vector<std::size_t> idx{4, 0, 4, 2};
  const auto g = gather_rows(a, idx);
  ASSERT_EQ(g.rows(), 4u);
  EXPECT_EQ(g.at(2, 1), a.at(4, 1));
  EXPECT_LT(finite_difference([&] { return probe(gather_rows(a, idx)); }, {a}).max_rel, kTol);
}

TEST(TensorGrad, Rope) {
  Rng rng(11);
  RopeConfig rc;
  rc.d_model = 12;
  rc.fractions = {0.2, 0.3, 0.3};
  auto table = std::make_shared<const RotationTable>(rc, GridShape{2, 3, 3});
  const std::vector<GridPos> pos{{0, 1, 2}, {1, 2, 0}, {1, 0, 0}};
  auto x = random_tensor({3, 12}, rng);
  EXPECT_LT(finite_difference([&] { return probe(apply_rope(x, table, pos)); }, {x}).max_rel, kTol);
}

TEST(TensorGrad, StopGradientBlocksFlow) {
  Rng rng(12);
  auto a = random_tensor({2, 3}, rng);
  const auto s = stop_gradient(a);
  EXPECT_FALSE(s.requires_grad());
  EXPECT_EQ(s.values(), a.values());
  const auto g = backward(add(sum(a), sum(square(s))), std::vector<Tensor>{a});
  for (double v : g.of(a)) EXPECT_EQ(v, 1.0);
}

TEST(TensorGrad, NoGradGuardRecordsNothing) {
  Rng rng(13);
  auto a = random_tensor({2, 2}, rng);
  Tensor y;
  {
    NoGradGuard guard;
    y = square(a);
  }
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(square(a).requires_grad());
}

TEST(TensorGrad, ReusedNodeSumsBothPaths) {
  Rng rng(14);
  auto a = random_tensor({3, 3}, rng);
  EXPECT_LT(finite_difference([&] { auto b = gelu(a); return probe(mul(b, add(b, a))); }, {a}).max_rel, kTol);
}

TEST(TensorErrors, ShapeMismatchThrows) {
  const auto a = Tensor::zeros({2, 3}), b = Tensor::zeros({3, 2});
  EXPECT_THROW(add(a, b), DimensionError);
  EXPECT_THROW(matmul(a, a), DimensionError);
  EXPECT_THROW(Tensor({2, 2}, {1.0, 2.0}), DimensionError);
}

TEST(TensorErrors, NonFiniteThrows) {
  const Tensor a({1, 2}, {1.0, std::numeric_limits<double>::quiet_NaN()});
  EXPECT_THROW(scale(a, 2.0), NumericError);
  const Tensor big({1, 1}, {1e200});
  EXPECT_THROW(square(big), NumericError);
}

TEST(TensorErrors, BackwardNeedsScalar) {
  auto a = Tensor::zeros({2}, true);
  EXPECT_THROW(backward(scale(a, 1.0), std::vector<Tensor>{a}), ContractError);
}

TEST(TensorValues, LayerNormZeroMeanUnitVariance) {
  Rng rng(15);
  const auto x = random_tensor({3, 8}, rng, 4.0, false);
  const auto y = layer_norm(x, Tensor::filled({8}, 1.0), Tensor::zeros({8}), 0.0);
  for (std::size_t r = 0; r < 3; ++r) {
    double m = 0, v = 0;
    for (std::size_t c = 0; c < 8; ++c) m += y.at(r, c) / 8;
    for (std::size_t c = 0; c < 8; ++c) v += (y.at(r, c) - m) * (y.at(r, c) - m) / 8;
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v, 1.0, 1e-12);
  }
}

TEST(TensorValues, SoftmaxRowsSumToOneAndSurviveLargeLogits) {
  const Tensor x({2, 3}, {1000.0, 1001.0, 999.0, -5.0, 0.0, 5.0});
  const auto y = softmax_rows(x);
  for (std::size_t r = 0; r < 2; ++r) EXPECT_NEAR(y.at(r, 0) + y.at(r, 1) + y.at(r, 2), 1.0, 1e-15);
  EXPECT_NEAR(y.at(0, 1), 1.0 / (1.0 + std::exp(-1.0) + std::exp(-2.0)), 1e-15);
}

TEST(TensorValues, CrossEntropyOfUniformLogits) {
  const auto x = Tensor::zeros({2, 8});
  const std::vector<int> labels{3, 7};
  EXPECT_NEAR(cross_entropy(x, labels).item(), std::log(8.0), 1e-15);
}

TEST(TensorValues, GeluKnownPoints) {
  const Tensor x({1, 3}, {0.0, 1.0, -1.0});
  const auto y = gelu(x);
  EXPECT_EQ(y.at(0, 0), 0.0);
  // x * Phi(x) with Phi(1) = 0.841344746068543.
  EXPECT_NEAR(y.at(0, 1), 0.841344746068543, 1e-14);
  EXPECT_NEAR(y.at(0, 1) - y.at(0, 2), 1.0, 1e-12);
}

TEST(TensorValues, CloneIsIndependent) {
  auto a = Tensor::filled({2}, 1.0);
  auto c = a.clone();
  c.mutable_data()[0] = 5.0;
  EXPECT_EQ(a.data()[0], 1.0);
}
