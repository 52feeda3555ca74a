#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "dia/attention.hpp"
#include "dia/gradcheck.hpp"

namespace {

using dia::Shape;
using dia::Tensor;
namespace ops = dia::ops;

Tensor random_tensor(dia::Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

template <typename Module>
std::vector<dia::ParamRef> params_of(const Module& m) {
  std::vector<dia::ParamRef> p;
  m.collect("m", p);
  return p;
}

template <typename Module>
void fill_params(Module& m, double value) {
  for (auto& p : params_of(m)) {
    for (double& v : p.tensor.data()) v = value;
  }
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// ---------------------------------------------------------------------------
// SE

TEST(SeModule, ZeroWeightsGiveHalf) {
  dia::Rng rng(1);
  dia::SeModule se(8, 4, rng);
  fill_params(se, 0.0);
  dia::DiaState none;
  Tensor map = se.forward(random_tensor(rng, {2, 8, 3, 3}), none).map;
  for (double v : map.data()) EXPECT_EQ(v, 0.5);
}

TEST(SeModule, ConstantChannelsIgnoreSpatialExtent) {
  dia::Rng rng(2);
  dia::SeModule se(4, 2, rng);
  dia::DiaState none;
  auto constant_map = [&](std::size_t h, std::size_t w) {
    Tensor a({1, 4, h, w});
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t p = 0; p < h * w; ++p) a.data()[c * h * w + p] = 0.3 * c - 0.4;
    return se.forward(a, none).map;
  };
  Tensor small = constant_map(2, 3), large = constant_map(7, 5);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(small[c], large[c], 1e-15);
}

TEST(SeModule, MatchesDenseMatrixOracle) {
  dia::Rng rng(3);
  const std::size_t n = 8, m = 2;
  dia::SeModule se(n, 4, rng);
  for (auto& p : params_of(se)) {
    for (double& v : p.tensor.data()) v = rng.uniform(-1, 1);
  }
  Tensor a = random_tensor(rng, {3, n, 4, 4});
  dia::DiaState none;
  Tensor map = se.forward(a, none).map;

  const auto& w1 = se.fc1().weight().values();
  const auto& b1 = se.fc1().bias().values();
  const auto& w2 = se.fc2().weight().values();
  const auto& b2 = se.fc2().bias().values();
  for (std::size_t b = 0; b < 3; ++b) {
    std::vector<double> y(n, 0.0);
    for (std::size_t c = 0; c < n; ++c) {
      for (std::size_t p = 0; p < 16; ++p) y[c] += a[(b * n + c) * 16 + p];
      y[c] /= 16.0;
    }
    std::vector<double> z(m);
    for (std::size_t i = 0; i < m; ++i) {
      z[i] = b1[i];
      for (std::size_t j = 0; j < n; ++j) z[i] += w1[i * n + j] * y[j];
      z[i] = std::max(z[i], 0.0);
    }
    for (std::size_t i = 0; i < n; ++i) {
      double s = b2[i];
      for (std::size_t j = 0; j < m; ++j) s += w2[i * m + j] * z[j];
      EXPECT_NEAR(map[b * n + i], sigmoid(s), 1e-12);
    }
  }
}

TEST(SeModule, ChannelMismatchIsShapeError) {
  dia::Rng rng(4);
  dia::SeModule se(8, 4, rng);
  dia::DiaState none;
  EXPECT_THROW(se.forward(Tensor({1, 6, 2, 2}), none), dia::ShapeError);
}

// ---------------------------------------------------------------------------
// ECA

TEST(EcaModule, ZeroKernelGivesHalf) {
  dia::Rng rng(5);
  dia::EcaModule eca(6, 3, rng);
  fill_params(eca, 0.0);
  dia::DiaState none;
  for (double v : eca.forward(random_tensor(rng, {2, 6, 2, 2}), none).map.data()) EXPECT_EQ(v, 0.5);
}

TEST(EcaModule, PointwiseKernel) {
  dia::Rng rng(6);
  dia::EcaModule eca(5, 1, rng);
  eca.kernel().values() = {0.7};
  Tensor a = random_tensor(rng, {1, 5, 3, 3});
  dia::DiaState none;
  Tensor map = eca.forward(a, none).map;
  Tensor y = ops::global_avg_pool(a);
  for (std::size_t c = 0; c < 5; ++c) EXPECT_NEAR(map[c], sigmoid(0.7 * y[c]), 1e-15);
}

TEST(EcaModule, MatchesSlidingWindowOracle) {
  dia::Rng rng(7);
  const std::size_t n = 9;
  dia::EcaModule eca(n, 3, rng);
  Tensor a = random_tensor(rng, {2, n, 2, 3});
  dia::DiaState none;
  Tensor map = eca.forward(a, none).map;
  const auto& k = eca.kernel().values();
  for (std::size_t b = 0; b < 2; ++b) {
    std::vector<double> y(n + 2, 0.0);  // zero padded on both sides
    for (std::size_t c = 0; c < n; ++c) {
      for (std::size_t p = 0; p < 6; ++p) y[c + 1] += a[(b * n + c) * 6 + p];
      y[c + 1] /= 6.0;
    }
    for (std::size_t c = 0; c < n; ++c) {
      const double s = k[0] * y[c] + k[1] * y[c + 1] + k[2] * y[c + 2];
      EXPECT_NEAR(map[b * n + c], sigmoid(s), 1e-12);
    }
  }
}

TEST(EcaModule, EvenKernelIsConfigError) {
  dia::Rng rng(8);
  EXPECT_THROW(dia::EcaModule(8, 4, rng), dia::ConfigError);
}

// ---------------------------------------------------------------------------
// LSTM step

class ZeroCell : public ::testing::TestWithParam<dia::CellVariant> {};

TEST_P(ZeroCell, SigmoidOutputGivesQuarter) {
  dia::Rng rng(9);
  dia::DiaUnit unit({GetParam(), 8, 2, dia::OutputActivation::kSigmoid, 1}, rng);
  fill_params(unit, 0.0);
  dia::DiaState state = unit.initial_state(3);
  Tensor h = unit.step(random_tensor(rng, {3, 8}), state);
  for (double v : h.data()) EXPECT_EQ(v, 0.25);
  for (double v : state.c[0].data()) EXPECT_EQ(v, 0.0);
}

TEST_P(ZeroCell, TanhOutputGivesZero) {
  dia::Rng rng(10);
  dia::DiaUnit unit({GetParam(), 8, 2, dia::OutputActivation::kTanh, 1}, rng);
  fill_params(unit, 0.0);
  dia::DiaState state = unit.initial_state(2);
  Tensor h = unit.step(random_tensor(rng, {2, 8}), state);
  for (double v : h.data()) EXPECT_EQ(v, 0.0);
}

INSTANTIATE_TEST_SUITE_P(AllVariants, ZeroCell,
                         ::testing::Values(dia::CellVariant::kStandard, dia::CellVariant::kModified,
                                           dia::CellVariant::kLight));

TEST(LstmCell, ForgetGateBiasInitializedToOne) {
  dia::Rng rng(11);
  dia::DiaUnit unit({dia::CellVariant::kModified, 8, 2, dia::OutputActivation::kSigmoid, 1}, rng);
  for (const auto& p : params_of(unit)) {
    if (p.name.ends_with(".bias_f")) {
      for (double v : p.tensor.data()) EXPECT_EQ(v, 1.0);
    } else if (p.name.ends_with(".bias_i") || p.name.ends_with(".bias_o")) {
      for (double v : p.tensor.data()) EXPECT_EQ(v, 0.0);
    }
  }
}

TEST(LstmCell, ReductionMustDivideWidth) {
  dia::Rng rng(12);
  EXPECT_THROW(dia::DiaUnit({dia::CellVariant::kModified, 10, 4, dia::OutputActivation::kSigmoid, 1}, rng),
               dia::ConfigError);
}

TEST(LstmCell, DimensionMismatchIsShapeError) {
  dia::Rng rng(13);
  dia::DiaUnit unit({dia::CellVariant::kStandard, 8, 1, dia::OutputActivation::kSigmoid, 1}, rng);
  dia::DiaState state = unit.initial_state(1);
  EXPECT_THROW(unit.step(Tensor({1, 7}), state), dia::ShapeError);
}

// Gradient of sum(h_2) after two steps of a Modified cell (N=8, r=2) with
// respect to every parameter and the inputs, against central differences.
TEST(LstmCell, TwoStepGradientMatchesFiniteDifferences) {
  dia::Rng rng(14);
  dia::DiaUnit unit({dia::CellVariant::kModified, 8, 2, dia::OutputActivation::kSigmoid, 1}, rng);
  auto params = params_of(unit);
  for (auto& p : params) {
    for (double& v : p.tensor.data()) v = rng.uniform(-0.8, 0.8);
  }
  Tensor y1 = random_tensor(rng, {2, 8});
  Tensor y2 = random_tensor(rng, {2, 8});
  y1.set_requires_grad(true);

  auto loss = [&] {
    dia::DiaState state = unit.initial_state(2);
    unit.step(y1, state);
    return ops::sum(unit.step(y2, state));
  };
  dia::backward(loss());

  double worst = 0.0;
  auto check = [&](Tensor& t) {
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double fd = dia::finite_difference_at([&] { return loss().item(); }, t, i, 1e-5);
      worst = std::max(worst, dia::relative_error(t.grad()[i], fd));
    }
  };
  for (auto& p : params) check(p.tensor);
  check(y1);
  EXPECT_LE(worst, 1e-4);
}

TEST(LstmCell, StackDepthOneMatchesSingleCellBitwise) {
  dia::Rng rng_a(15), rng_b(15);
  const dia::LstmCellConfig cfg{dia::CellVariant::kLight, 8, 4, dia::OutputActivation::kSigmoid, 1};
  dia::DiaUnit unit(cfg, rng_a);
  dia::LstmCell cell(cfg, rng_b);
  dia::Rng data(16);
  Tensor y1 = random_tensor(data, {2, 8}), y2 = random_tensor(data, {2, 8});

  dia::DiaState state = unit.initial_state(2);
  unit.step(y1, state);
  Tensor stacked = unit.step(y2, state);

  auto [h1, c1] = cell.step(y1, Tensor({2, 8}), Tensor({2, 8}));
  auto [h2, c2] = cell.step(y2, h1, c1);
  EXPECT_EQ(0, std::memcmp(stacked.data().data(), h2.data().data(), 16 * sizeof(double)));
}

TEST(LstmCell, StackedCellsFeedHiddenStateForward) {
  dia::Rng rng(17);
  dia::DiaUnit unit({dia::CellVariant::kModified, 8, 2, dia::OutputActivation::kSigmoid, 2}, rng);
  ASSERT_EQ(unit.cells().size(), 2u);
  Tensor y = random_tensor(rng, {1, 8});
  dia::DiaState state = unit.initial_state(1);
  Tensor h = unit.step(y, state);
  auto [h0, c0] = unit.cells()[0].step(y, Tensor({1, 8}), Tensor({1, 8}));
  auto [h1, c1] = unit.cells()[1].step(h0, Tensor({1, 8}), Tensor({1, 8}));
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(h[i], h1[i]);
}

// With sigmoid output every map entry lies strictly in (0,1).
TEST(LstmCellProperty, SigmoidOutputStaysInOpenUnitInterval) {
  dia::Rng rng(18);
  for (int trial = 0; trial < 200; ++trial) {
    const auto variant = static_cast<dia::CellVariant>(rng.below(3));
    dia::DiaUnit unit({variant, 8, 2, dia::OutputActivation::kSigmoid, 1 + rng.below(2)}, rng);
    for (auto& p : params_of(unit)) {
      for (double& v : p.tensor.data()) v = rng.uniform(-3, 3);
    }
    dia::DiaState state = unit.initial_state(2);
    for (int t = 0; t < 4; ++t) {
      Tensor h = unit.step(random_tensor(rng, {2, 8}, -5, 5), state);
      for (double v : h.data()) {
        EXPECT_GT(v, 0.0);
        EXPECT_LT(v, 1.0);
      }
    }
  }
}

TEST(LstmCellProperty, WeightCountsMatchClosedForms) {
  for (std::size_t n : {8, 16, 64}) {
    for (std::size_t r : {1, 2, 4, 8}) {
      for (auto variant : {dia::CellVariant::kStandard, dia::CellVariant::kModified,
                           dia::CellVariant::kLight}) {
        dia::Rng rng(19);
        dia::DiaUnit unit({variant, n, r, dia::OutputActivation::kSigmoid, 1}, rng);
        auto params = params_of(unit);
        const std::size_t counted = dia::count_weights(params).weights("attention");
        std::size_t expected = 0;
        switch (variant) {
          case dia::CellVariant::kStandard: expected = 8 * n * n; break;
          case dia::CellVariant::kModified: expected = 10 * n * n / r; break;
          case dia::CellVariant::kLight: expected = 2 * n * n / r + 16 * n; break;
        }
        EXPECT_EQ(counted, expected) << dia::to_string(variant) << " N=" << n << " r=" << r;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Stage application

struct ConvStage {
  std::vector<Tensor> weights;
  ConvStage(dia::Rng& rng, std::size_t blocks, std::size_t c) {
    for (std::size_t t = 0; t < blocks; ++t) {
      Tensor w = random_tensor(rng, {c, c, 3, 3}, -0.3, 0.3);
      w.set_requires_grad(true);
      weights.push_back(w);
    }
  }
  Tensor residual(std::size_t t, const Tensor& x) const {
    return ops::relu(ops::conv2d(x, weights[t], 1, 1));
  }
};

TEST(DiaApply, UnitAttentionEqualsPlainResidualStage) {
  dia::Rng rng(20);
  ConvStage stage(rng, 3, 4);
  dia::DiaUnit unit({dia::CellVariant::kModified, 4, 2, dia::OutputActivation::kSigmoid, 1}, rng);
  Tensor x0 = random_tensor(rng, {2, 4, 5, 5});

  std::vector<const dia::AttentionModule*> modules(3, &unit);
  dia::StageOptions opts;
  opts.force_unit_attention = true;
  Tensor forced = dia::run_stage(
      [&](std::size_t t, const Tensor& x) { return dia::BlockOutput{stage.residual(t, x), x}; }, 3, x0,
      modules, &unit, opts);

  Tensor plain = x0;
  for (std::size_t t = 0; t < 3; ++t) plain = ops::add(plain, stage.residual(t, plain));
  for (std::size_t i = 0; i < plain.numel(); ++i) EXPECT_EQ(forced[i], plain[i]);
}

TEST(DiaApply, SingleBlockEqualsUnsharedModule) {
  dia::Rng rng(21);
  ConvStage stage(rng, 1, 4);
  dia::DiaUnit unit({dia::CellVariant::kStandard, 4, 1, dia::OutputActivation::kSigmoid, 1}, rng);
  Tensor x0 = random_tensor(rng, {2, 4, 3, 3});
  Tensor shared = dia::dia_apply(unit, [&](std::size_t t, const Tensor& x) { return stage.residual(t, x); },
                                 1, x0);

  Tensor a = stage.residual(0, x0);
  dia::DiaState fresh;
  Tensor h = unit.forward(a, fresh).map;
  Tensor per_block = ops::add(x0, ops::channelwise_mul(a, h));
  EXPECT_EQ(0, std::memcmp(shared.data().data(), per_block.data().data(), shared.numel() * sizeof(double)));
}

TEST(DiaApply, TwoBlocksEqualManualUnroll) {
  dia::Rng rng(22);
  ConvStage stage(rng, 2, 4);
  dia::DiaUnit unit({dia::CellVariant::kModified, 4, 2, dia::OutputActivation::kSigmoid, 1}, rng);
  Tensor x0 = random_tensor(rng, {2, 4, 4, 4});
  std::vector<std::pair<Tensor, Tensor>> seen;
  Tensor out = dia::dia_apply(
      unit, [&](std::size_t t, const Tensor& x) { return stage.residual(t, x); }, 2, x0, true,
      [&](std::size_t, const Tensor& y, const Tensor& h) { seen.emplace_back(y, h); });

  const dia::LstmCell& cell = unit.cells()[0];
  Tensor a1 = stage.residual(0, x0);
  auto [h1, c1] = cell.step(ops::global_avg_pool(a1), Tensor({2, 4}), Tensor({2, 4}));
  Tensor x1 = ops::add(x0, ops::channelwise_mul(a1, h1));
  Tensor a2 = stage.residual(1, x1);
  auto [h2, c2] = cell.step(ops::global_avg_pool(a2), h1, c1);
  Tensor x2 = ops::add(x1, ops::channelwise_mul(a2, h2));

  for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_NEAR(out[i], x2[i], 1e-14);
  ASSERT_EQ(seen.size(), 2u);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(seen[1].second[i], h2[i], 1e-14);
}

TEST(DiaApply, NoSkipDropsIdentityPath) {
  dia::Rng rng(23);
  ConvStage stage(rng, 1, 3);
  dia::DiaUnit unit({dia::CellVariant::kLight, 3, 1, dia::OutputActivation::kSigmoid, 1}, rng);
  Tensor x0 = random_tensor(rng, {1, 3, 3, 3});
  Tensor out = dia::dia_apply(unit, [&](std::size_t t, const Tensor& x) { return stage.residual(t, x); },
                              1, x0, false);
  Tensor a = stage.residual(0, x0);
  dia::DiaState fresh;
  Tensor expect = ops::channelwise_mul(a, unit.forward(a, fresh).map);
  for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_EQ(out[i], expect[i]);
}

// State is created fresh per call: back-to-back calls match isolated calls.
TEST(DiaApplyProperty, StateNeverLeaksAcrossCalls) {
  dia::Rng rng(24);
  ConvStage stage(rng, 3, 4);
  dia::DiaUnit unit({dia::CellVariant::kModified, 4, 2, dia::OutputActivation::kSigmoid, 1}, rng);
  Tensor xa = random_tensor(rng, {1, 4, 3, 3}), xb = random_tensor(rng, {1, 4, 3, 3});
  auto run = [&](const Tensor& x) {
    return dia::dia_apply(unit, [&](std::size_t t, const Tensor& v) { return stage.residual(t, v); }, 3, x);
  };
  Tensor isolated = run(xb);
  run(xa);
  Tensor after = run(xb);
  EXPECT_EQ(0, std::memcmp(after.data().data(), isolated.data().data(), after.numel() * sizeof(double)));
}

}  // namespace
