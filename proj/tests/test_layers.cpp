#include <gtest/gtest.h>

#include "dia/attention.hpp"
#include "dia/layers.hpp"

namespace {

using dia::Shape;
using dia::Tensor;

Tensor random_tensor(dia::Rng& rng, Shape shape) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(-1.0, 1.0);
  return t;
}

TEST(ElementwiseAffine, IdentityParameters) {
  dia::ElementwiseAffine layer(3);
  Tensor x({1, 3}, std::vector<double>{0.25, -4.0, 9.0});
  Tensor y = layer.forward(x);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(ElementwiseAffine, ZeroScaleGivesShift) {
  dia::ElementwiseAffine layer(4, 0.0, 2.5);
  dia::Rng rng(1);
  Tensor y = layer.forward(random_tensor(rng, {2, 4}));
  for (double v : y.data()) EXPECT_EQ(v, 2.5);
}

TEST(ElementwiseAffine, DirectArithmetic) {
  dia::ElementwiseAffine layer(2);
  layer.weight().values() = {2.0, 3.0};
  layer.bias().values() = {1.0, -1.0};
  Tensor y = layer.forward(Tensor({1, 2}, std::vector<double>{1.0, 1.0}));
  EXPECT_EQ(y[0], 3.0);
  EXPECT_EQ(y[1], 2.0);
}

TEST(ElementwiseAffine, LengthMismatchIsShapeError) {
  dia::ElementwiseAffine layer(3);
  EXPECT_THROW(layer.forward(Tensor({1, 4})), dia::ShapeError);
}

TEST(GroupedLinear, SingleGroupEqualsFullyConnected) {
  dia::Rng rng(2);
  dia::GroupedLinear grouped(5, 1, false, rng);
  dia::FullyConnected fc(5, 5, false, rng);
  fc.weight().values() = grouped.weight().values();
  Tensor x = random_tensor(rng, {3, 5});
  Tensor a = grouped.forward(x), b = fc.forward(x);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-14);
}

TEST(GroupedLinear, UnitBlocksAreIdentity) {
  dia::Rng rng(3);
  dia::GroupedLinear grouped(6, 6, false, rng);
  for (double& w : grouped.weight().data()) w = 1.0;
  Tensor x = random_tensor(rng, {2, 6});
  Tensor y = grouped.forward(x);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(GroupedLinear, MatchesAssembledBlockDiagonalMatrix) {
  dia::Rng rng(4);
  dia::GroupedLinear grouped(4, 2, false, rng);
  const auto& w = grouped.weight().values();  // [2,2,2]
  // Assemble the 4x4 block-diagonal matrix by hand.
  double m[4][4] = {};
  m[0][0] = w[0]; m[0][1] = w[1]; m[1][0] = w[2]; m[1][1] = w[3];
  m[2][2] = w[4]; m[2][3] = w[5]; m[3][2] = w[6]; m[3][3] = w[7];
  Tensor x = random_tensor(rng, {3, 4});
  Tensor y = grouped.forward(x);
  for (std::size_t b = 0; b < 3; ++b) {
    for (std::size_t i = 0; i < 4; ++i) {
      double expect = 0.0;
      for (std::size_t j = 0; j < 4; ++j) expect += m[i][j] * x[b * 4 + j];
      EXPECT_NEAR(y[b * 4 + i], expect, 1e-14);
    }
  }
}

TEST(GroupedLinear, GroupsMustDivideWidth) {
  dia::Rng rng(5);
  EXPECT_THROW(dia::GroupedLinear(6, 4, false, rng), dia::ConfigError);
}

std::size_t dia_weights(dia::CellVariant variant, std::size_t n, std::size_t r) {
  dia::Rng rng(9);
  dia::DiaUnit unit({variant, n, r, dia::OutputActivation::kSigmoid, 1}, rng);
  std::vector<dia::ParamRef> params;
  unit.collect("dia", params);
  return dia::count_weights(params).weights("attention");
}

TEST(CountWeights, StandardCellIsEightNSquared) {
  EXPECT_EQ(dia_weights(dia::CellVariant::kStandard, 16, 1), 2048u);
}

TEST(CountWeights, ModifiedCellIsTenNSquaredOverR) {
  EXPECT_EQ(dia_weights(dia::CellVariant::kModified, 64, 4), 10240u);
}

TEST(CountWeights, LightCellIsTwoNSquaredOverRPlusSixteenN) {
  EXPECT_EQ(dia_weights(dia::CellVariant::kLight, 16, 4), 384u);
}

TEST(CountWeights, SharedTensorCountedOnce) {
  dia::Rng rng(6);
  dia::FullyConnected fc(7, 3, true, rng);
  std::vector<dia::ParamRef> params;
  for (int k = 0; k < 5; ++k) fc.collect("shared", "attention", params);
  const auto budget = dia::count_weights(params);
  EXPECT_EQ(budget.weights("attention"), 21u);
  EXPECT_EQ(budget.extras("attention"), 3u);
  EXPECT_EQ(budget.total(), 24u);
}

// Closed form per layer kind equals enumeration of its parameter buffers
// (biases excluded, normalization affine included for BatchNorm).
TEST(CountWeightsProperty, ClosedFormMatchesEnumeration) {
  dia::Rng rng(7);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t a = 1 + rng.below(9), b = 1 + rng.below(9);
    const bool bias = rng.below(2) == 1;
    std::vector<std::pair<dia::LayerKind, std::vector<dia::ParamRef>>> layers;
    auto add = [&](const auto& layer) {
      std::vector<dia::ParamRef> p;
      layer.collect("l", "c", p);
      layers.emplace_back(layer.kind(), p);
    };
    add(dia::FullyConnected(a, b, bias, rng));
    add(dia::GroupedLinear(a * b, a, bias, rng));
    add(dia::ElementwiseAffine(a));
    add(dia::Conv2d(a, b, rng.below(2) ? 3 : 1, 1 + rng.below(2), bias, rng));
    add(dia::BatchNorm(b));
    for (const auto& [kind, params] : layers) {
      std::size_t enumerated = 0;
      for (const auto& p : params) {
        if (p.role != dia::ParamRole::kBias) enumerated += p.tensor.numel();
      }
      EXPECT_EQ(dia::closed_form_count(kind), enumerated);
    }
  }
}

TEST(BatchNormLayer, InitializationIsUnitScaleZeroShift) {
  dia::BatchNorm bn(3);
  for (double v : bn.gamma().data()) EXPECT_EQ(v, 1.0);
  for (double v : bn.beta().data()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(bn.stats().running_var, std::vector<double>(3, 1.0));
}

}  // namespace
