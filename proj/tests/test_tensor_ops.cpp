#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "captlab/errors.hpp"
#include "captlab/gradcheck.hpp"
#include "captlab/ops.hpp"
#include "grad_cases.hpp"
#include "support.hpp"

using namespace captlab;
using testsupport::max_abs_diff;
using testsupport::random_tensor;

namespace {

void expect_values(const Tensor& t, std::vector<double> expected, double tol = 0.0) {
  ASSERT_EQ(t.numel(), expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(t[i], expected[i], tol) << "at " << i;
}

}  // namespace

TEST(Tensor, ShapeAndValuesAgree) {
  EXPECT_THROW(Tensor::from({2, 3}, {1, 2, 3}), ShapeError);
  const Tensor t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
  EXPECT_DOUBLE_EQ(t.at(1, 2), 6.0);
}

TEST(Tensor, CopiesShareStorageCloneDoesNot) {
  Tensor a = Tensor::from({2}, {1, 2});
  Tensor alias = a;
  Tensor copy = a.clone();
  a.mutable_values()[0] = 9;
  EXPECT_DOUBLE_EQ(alias[0], 9);
  EXPECT_DOUBLE_EQ(copy[0], 1);
  EXPECT_FALSE(copy.same_storage(a));
}

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  const Tensor I = Tensor::from({2, 2}, {1, 0, 0, 1});
  const Tensor M = Tensor::from({2, 2}, {1, 2, 3, 4});
  expect_values(matmul(I, M), {1, 2, 3, 4});
}

TEST(Matmul, ProjectorSelectsFirstRow) {
  const Tensor P = Tensor::from({2, 2}, {1, 0, 0, 0});
  const Tensor M = Tensor::from({2, 2}, {5, 6, 7, 8});
  expect_values(matmul(P, M), {5, 6, 0, 0});
}

TEST(Matmul, MatchesTripleLoop) {
  std::mt19937_64 rng(11);
  for (int rep = 0; rep < 5; ++rep) {
    const Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
    const auto ref = testsupport::naive_matmul(a.values(), b.values(), 3, 4, 2);
    EXPECT_LE(max_abs_diff(matmul(a, b).values(), ref), 1e-12);
  }
}

TEST(Matmul, InnerDimensionMismatchIsShapeError) {
  EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
}

TEST(Softmax, UniformRow) {
  expect_values(softmax(Tensor::from({1, 3}, {0, 0, 0})), {1.0 / 3, 1.0 / 3, 1.0 / 3}, 1e-15);
}

TEST(Softmax, MaskDominatedRow) {
  const double x = 4.0;
  const Tensor s = softmax(Tensor::from({1, 3}, {x, x - 1e9, x - 1e9}));
  EXPECT_NEAR(s[0], 1.0, 1e-12);
  EXPECT_NEAR(s[1], 0.0, 1e-12);
  EXPECT_NEAR(s[2], 0.0, 1e-12);
}

TEST(Softmax, MatchesDirectFormula) {
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  expect_values(softmax(Tensor::from({3}, {1, 2, 3})),
                {std::exp(1.0) / z, std::exp(2.0) / z, std::exp(3.0) / z}, 1e-15);
}

TEST(Softmax, RowsSumToOneForLargeInputs) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1e3, 1e3);
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<double> v(4 * 7);
    for (double& x : v) x = u(rng);
    const Tensor s = softmax(Tensor::from({4, 7}, v));
    for (std::size_t r = 0; r < 4; ++r) {
      double total = 0;
      for (std::size_t c = 0; c < 7; ++c) {
        EXPECT_GE(s.at(r, c), 0.0);
        total += s.at(r, c);
      }
      EXPECT_NEAR(total, 1.0, 1e-9);
    }
  }
}

TEST(MeanPool, TwoRowMean) {
  const std::uint8_t m[] = {1, 1};
  expect_values(mean_pool(Tensor::from({2, 2}, {2, 4, 6, 8}), m), {4, 6});
}

TEST(MeanPool, SingletonMaskReturnsRow) {
  std::mt19937_64 rng(2);
  const Tensor x = random_tensor({4, 3}, rng);
  const std::uint8_t m[] = {0, 0, 1, 0};
  expect_values(mean_pool(x, m), {x.at(2, 0), x.at(2, 1), x.at(2, 2)});
}

TEST(MeanPool, MatchesMaskedSum) {
  std::mt19937_64 rng(3);
  const Tensor x = random_tensor({5, 3}, rng);
  const std::uint8_t m[] = {1, 1, 0, 1, 0};
  std::vector<double> ref(3);
  for (std::size_t c = 0; c < 3; ++c) ref[c] = (x.at(0, c) + x.at(1, c) + x.at(3, c)) / 3.0;
  EXPECT_LE(max_abs_diff(mean_pool(x, m).values(), ref), 1e-15);
}

TEST(MeanPool, FullMaskEqualsRowMeanExactly) {
  std::mt19937_64 rng(4);
  const Tensor x = random_tensor({6, 4}, rng);
  const std::vector<std::uint8_t> m(6, 1);
  std::vector<double> ref(4, 0.0);
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t c = 0; c < 4; ++c) ref[c] += x.at(r, c);
  for (double& v : ref) v /= 6.0;
  EXPECT_EQ(max_abs_diff(mean_pool(x, m).values(), ref), 0.0);
}

TEST(MeanPool, EmptyMaskIsRejected) {
  const std::uint8_t m[] = {0, 0};
  EXPECT_THROW(mean_pool(Tensor::zeros({2, 2}), m), ContractError);
}

TEST(MeanPool, GradientSpreadsOverIncludedRows) {
  Tensor x = Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6}, true);
  const std::uint8_t m[] = {1, 0, 1};
  sum(mean_pool(x, m)).backward();
  expect_values(Tensor::from({6}, {x.grad().begin(), x.grad().end()}), {0.5, 0.5, 0, 0, 0.5, 0.5});
}

TEST(LayerNorm, ConstantRowCollapsesToZero) {
  const Tensor y = layer_norm(Tensor::from({1, 4}, {3, 3, 3, 3}), Tensor::full({4}, 1.0),
                              Tensor::zeros({4}), 1e-5);
  expect_values(y, {0, 0, 0, 0});
}

TEST(LayerNorm, StandardizedRowIsKept) {
  const double eps = 1e-12;
  const Tensor y = layer_norm(Tensor::from({1, 2}, {1, -1}), Tensor::full({2}, 1.0),
                              Tensor::zeros({2}), eps);
  expect_values(y, {1 / std::sqrt(1 + eps), -1 / std::sqrt(1 + eps)}, 1e-15);
}

TEST(LayerNorm, MatchesFormula) {
  std::mt19937_64 rng(8);
  const Tensor x = random_tensor({1, 6}, rng), g = random_tensor({6}, rng), b = random_tensor({6}, rng);
  const double eps = 1e-5;
  double mu = 0, var = 0;
  for (double v : x.values()) mu += v / 6;
  for (double v : x.values()) var += (v - mu) * (v - mu) / 6;
  std::vector<double> ref(6);
  for (std::size_t i = 0; i < 6; ++i) ref[i] = (x[i] - mu) / std::sqrt(var + eps) * g[i] + b[i];
  EXPECT_LE(max_abs_diff(layer_norm(x, g, b, eps).values(), ref), 1e-13);
}

TEST(CrossEntropy, ConfidentCorrectIsNearZero) {
  const std::size_t label[] = {0};
  EXPECT_NEAR(cross_entropy_loss(Tensor::from({1, 2}, {10, -10}), label).item(), 0.0, 1e-8);
}

TEST(CrossEntropy, UniformBinaryIsLn2) {
  for (std::size_t l : {0u, 1u}) {
    const std::size_t label[] = {l};
    EXPECT_NEAR(cross_entropy_loss(Tensor::from({1, 2}, {0, 0}), label).item(), std::log(2.0), 1e-15);
  }
}

TEST(CrossEntropy, MatchesPerRowFormula) {
  std::mt19937_64 rng(9);
  const Tensor z = random_tensor({4, 3}, rng);
  const std::size_t labels[] = {1, 0, 2, 2};
  double ref = 0;
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 3; ++c) s += std::exp(z.at(r, c));
    ref += -(z.at(r, labels[r]) - std::log(s));
  }
  EXPECT_NEAR(cross_entropy_loss(z, labels).item(), ref / 4, 1e-14);
}

TEST(CrossEntropy, GradientIsSoftmaxMinusOneHotOverBatch) {
  std::mt19937_64 rng(10);
  Tensor z = random_tensor({2, 3}, rng, true);
  const std::size_t labels[] = {2, 0};
  cross_entropy_loss(z, labels).backward();
  NoGradGuard ng;
  const Tensor p = softmax(z.detach());
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < 3; ++c)
      EXPECT_NEAR(z.grad()[r * 3 + c], (p.at(r, c) - (c == labels[r] ? 1.0 : 0.0)) / 2, 1e-15);
}

TEST(CrossEntropy, OutOfRangeLabelIsIndexError) {
  const std::size_t label[] = {2};
  EXPECT_THROW(cross_entropy_loss(Tensor::zeros({1, 2}), label), IndexError);
}

TEST(Backward, SumGivesOnes) {
  Tensor x = Tensor::from({2, 2}, {1, 2, 3, 4}, true);
  sum(x).backward();
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, HalfSquareGivesX) {
  Tensor x = Tensor::from({2, 2}, {1, -2, 3, 0.5}, true);
  scale(sum(mul(x, x)), 0.5).backward();
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], x[i]);
}

TEST(Backward, FanOutAccumulates) {
  Tensor a = Tensor::from({3}, {1, 2, 3}, true);
  const Tensor w = Tensor::from({3}, {0.5, -1, 2});
  sum(mul(add(a, a), w)).backward();
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(a.grad()[i], 2 * w[i]);
}

TEST(Backward, GradientsAccumulateAcrossCalls) {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  sum(x).backward();
  sum(x).backward();
  EXPECT_EQ(x.grad()[0], 2.0);
  x.zero_grad();
  EXPECT_FALSE(x.has_grad());
}

TEST(Backward, NonScalarIsContractError) {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  EXPECT_THROW(scale(x, 2).backward(), ContractError);
}

TEST(Backward, NoGradGuardRecordsNothing) {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  const auto before = autograd_stats().nodes_recorded;
  {
    NoGradGuard ng;
    const Tensor y = sum(mul(x, x));
    EXPECT_FALSE(y.requires_grad());
  }
  EXPECT_EQ(autograd_stats().nodes_recorded, before);
}

#ifndef CAPTLAB_NO_FINITE_GUARD
TEST(FiniteGuard, NonFiniteResultIsNumericError) {
  const double inf = std::numeric_limits<double>::infinity();
  EXPECT_THROW(add(Tensor::from({1}, {inf}), Tensor::from({1}, {-inf})), NumericError);
}
#endif

TEST(GatherRows, KeepsRequestedShape) {
  const Tensor x = Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6});
  const std::size_t rows[] = {2, 2, 0};
  const Tensor g = gather_rows(x, rows);
  EXPECT_EQ(g.shape(), (Shape{3, 2}));
  expect_values(g, {5, 6, 5, 6, 1, 2});
  const std::size_t bad[] = {3};
  EXPECT_THROW(gather_rows(x, bad), IndexError);
}

TEST(DepthwiseConv, EdgeRowsAreReplicated) {
  // width 3 kernel of ones over a single column: each output sums the clamped window.
  const Tensor x = Tensor::from({3, 1}, {1, 2, 4});
  const Tensor k = Tensor::full({3, 1}, 1.0);
  expect_values(depthwise_conv1d(x, k), {1 + 1 + 2, 1 + 2 + 4, 2 + 4 + 4});
}

TEST(Attention, MatchesHandRolledSingleHead) {
  std::mt19937_64 rng(12);
  const std::size_t L = 3, d = 4;
  const Tensor qkv = random_tensor({L, 3 * d}, rng);
  AttentionLayout layout;
  layout.batch = 1;
  layout.seq_len = L;
  layout.heads = 1;
  layout.key_valid = {1, 1, 0};
  std::vector<double> probs;
  const Tensor out = attention(qkv, layout, &probs);
  for (std::size_t q = 0; q < L; ++q) {
    std::vector<double> s(2);
    double z = 0;
    for (std::size_t k = 0; k < 2; ++k) {
      double dot = 0;
      for (std::size_t c = 0; c < d; ++c) dot += qkv.at(q, c) * qkv.at(k, d + c);
      s[k] = std::exp(dot / std::sqrt(4.0));
      z += s[k];
    }
    EXPECT_NEAR(probs[q * L + 0], s[0] / z, 1e-14);
    EXPECT_NEAR(probs[q * L + 1], s[1] / z, 1e-14);
    EXPECT_EQ(probs[q * L + 2], 0.0);
    for (std::size_t c = 0; c < d; ++c) {
      const double ref = (s[0] * qkv.at(0, 2 * d + c) + s[1] * qkv.at(1, 2 * d + c)) / z;
      EXPECT_NEAR(out.at(q, c), ref, 1e-14);
    }
  }
}

TEST(FiniteDiff, ExactForLinearFunction) {
  std::mt19937_64 rng(13);
  const Tensor x = random_tensor({3, 3}, rng);
  EXPECT_LE(finite_diff_check([](const Tensor& t) { return sum(t); }, x), 1e-9);
}

TEST(FiniteDiff, SoftmaxThenPick) {
  std::mt19937_64 rng(14);
  const Tensor x = random_tensor({1, 5}, rng);
  EXPECT_LE(finite_diff_check([](const Tensor& t) { return select(softmax(t), 3); }, x, 1e-5), 1e-4);
}

TEST(FiniteDiff, RejectsStepOutsideRange) {
  const Tensor x = Tensor::zeros({2});
  auto f = [](const Tensor& t) { return sum(t); };
  EXPECT_THROW(finite_diff_check(f, x, 1e-3), ContractError);
  EXPECT_THROW(finite_diff_check(f, x, 1e-7), ContractError);
}

TEST(FiniteDiff, RejectsNonScalarFunction) {
  EXPECT_THROW(finite_diff_check([](const Tensor& t) { return scale(t, 2.0); }, Tensor::zeros({2})),
               ContractError);
}

class GradientProperty : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(GradientProperty, EveryOpMatchesCentralDifferences) {
  for (const auto& c : testsupport::grad_cases(GetParam())) {
    EXPECT_LE(finite_diff_check(c.f, c.x, 1e-5), 1e-4) << c.name;
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, GradientProperty, ::testing::Values(1, 2, 3, 4, 5));
