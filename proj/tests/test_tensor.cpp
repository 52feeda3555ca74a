#include <gtest/gtest.h>

#include <functional>
#include <vector>

#include "dia/gradcheck.hpp"
#include "dia/ops.hpp"
#include "dia/rng.hpp"

namespace {

using dia::Shape;
using dia::Tensor;
namespace ops = dia::ops;

Tensor random_tensor(dia::Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0,
                     bool requires_grad = true) {
  Tensor t(std::move(shape), 0.0, requires_grad);
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// loss = sum(out ⊙ probe) so that every output coordinate gets a distinct weight.
Tensor probe_loss(const Tensor& out, const Tensor& probe) { return ops::sum(ops::mul(out, probe)); }

using OpFn = std::function<Tensor(const std::vector<Tensor>&)>;

// Max relative error between backward and central differences over all
// inputs of `fn`.
double op_grad_error(const OpFn& fn, std::vector<Tensor> inputs, dia::Rng& rng) {
  Tensor out0;
  {
    dia::NoGradGuard g;
    out0 = fn(inputs);
  }
  Tensor probe = random_tensor(rng, out0.shape(), -1.0, 1.0, false);
  for (Tensor& t : inputs) t.zero_grad();
  dia::backward(probe_loss(fn(inputs), probe));

  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    if (!inputs[k].requires_grad()) continue;
    auto f = [&](const Tensor& x) {
      std::vector<Tensor> args = inputs;
      args[k] = x;
      return probe_loss(fn(args), probe).item();
    };
    Tensor fd = dia::finite_difference_grad(f, inputs[k], 1e-5, dia::StepMode::kRelative);
    for (std::size_t i = 0; i < fd.numel(); ++i) {
      worst = std::max(worst, dia::relative_error(inputs[k].grad()[i], fd[i]));
    }
  }
  return worst;
}

TEST(TensorCore, SigmoidOfZeroIsHalf) {
  Tensor x({1}, std::vector<double>{0.0});
  EXPECT_DOUBLE_EQ(ops::sigmoid(x)[0], 0.5);
}

TEST(TensorCore, GlobalAvgPoolOfConstantChannels) {
  Tensor x({2, 3, 4, 5});
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < 20; ++p) x.data()[(b * 3 + c) * 20 + p] = 1.5 * c - 2.0;
  Tensor y = ops::global_avg_pool(x);
  ASSERT_EQ(y.shape(), (Shape{2, 3}));
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(y[b * 3 + c], 1.5 * c - 2.0);
}

TEST(TensorCore, ChannelwiseMulAnnihilatesAndPreserves) {
  Tensor x({1, 2, 2, 2}, 1.0);
  Tensor s({2}, std::vector<double>{0.0, 1.0});
  Tensor y = ops::channelwise_mul(x, s);
  for (std::size_t p = 0; p < 4; ++p) {
    EXPECT_EQ(y[p], 0.0);
    EXPECT_EQ(y[4 + p], 1.0);
  }
}

TEST(TensorCore, BackwardOfSquare) {
  Tensor w({1}, std::vector<double>{3.0}, true);
  dia::backward(ops::sum(ops::mul(w, w)));
  EXPECT_DOUBLE_EQ(w.grad()[0], 6.0);
}

TEST(TensorCore, BackwardOfSigmoidAtZero) {
  Tensor x({1}, std::vector<double>{0.0}, true);
  dia::backward(ops::sum(ops::sigmoid(x)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 0.25);
}

TEST(TensorCore, BackwardRejectsNonScalarAndDoubleCall) {
  Tensor x({3}, 1.0, true);
  Tensor y = ops::relu(x);
  EXPECT_THROW(dia::backward(y), dia::GraphError);
  dia::Graph::current().clear();

  Tensor loss = ops::sum(ops::relu(x));
  dia::backward(loss);
  EXPECT_THROW(dia::backward(loss), dia::GraphError);
}

TEST(TensorCore, ShapeMismatchNamesOpAndShapes) {
  Tensor a({2, 3}), b({3, 2});
  try {
    ops::add(a, b);
    FAIL() << "expected ShapeError";
  } catch (const dia::ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("add"), std::string::npos);
    EXPECT_NE(msg.find("[2,3]"), std::string::npos);
    EXPECT_NE(msg.find("[3,2]"), std::string::npos);
  }
}

TEST(TensorCore, OverflowRaisesNumericError) {
  Tensor a({1}, std::vector<double>{1e300});
  try {
    ops::mul(a, a);
    FAIL() << "expected NumericError";
  } catch (const dia::NumericError& e) {
    EXPECT_EQ(e.opcode(), "mul");
  }
}

TEST(TensorCore, NoGradGuardSkipsRecording) {
  dia::Graph::current().clear();
  Tensor x({4}, 1.0, true);
  {
    dia::NoGradGuard g;
    Tensor y = ops::relu(x);
    EXPECT_FALSE(y.requires_grad());
  }
  EXPECT_TRUE(dia::Graph::current().empty());
}

TEST(FiniteDifference, IdentitySumGivesOnes) {
  dia::Rng rng(5);
  Tensor x = random_tensor(rng, {7});
  auto f = [](const Tensor& t) {
    double s = 0.0;
    for (double v : t.data()) s += v;
    return s;
  };
  Tensor g = dia::finite_difference_grad(f, x, 1e-4);
  for (double v : g.data()) EXPECT_NEAR(v, 1.0, 1e-9);
}

TEST(FiniteDifference, HalfSquaredNorm) {
  Tensor x({2}, std::vector<double>{1.0, 2.0});
  auto f = [](const Tensor& t) { return 0.5 * (t[0] * t[0] + t[1] * t[1]); };
  Tensor g = dia::finite_difference_grad(f, x, 1e-5);
  EXPECT_NEAR(g[0], 1.0, 1e-8);
  EXPECT_NEAR(g[1], 2.0, 1e-8);
}

TEST(FiniteDifference, NonFiniteEvaluationNamesCoordinate) {
  Tensor x({3}, 1.0);
  auto f = [](const Tensor& t) { return t[2] > 1.0 ? std::numeric_limits<double>::infinity() : 0.0; };
  try {
    dia::finite_difference_grad(f, x, 1e-3);
    FAIL();
  } catch (const dia::NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("coordinate 2"), std::string::npos);
  }
}

// Every differentiable opcode agrees with central differences over 50 random
// shapes and seeds.
TEST(TensorCoreProperty, BackwardMatchesFiniteDifferences) {
  struct Case {
    const char* name;
    std::function<std::pair<OpFn, std::vector<Tensor>>(dia::Rng&)> make;
  };
  auto extent = [](dia::Rng& r, std::size_t lo, std::size_t hi) {
    return lo + static_cast<std::size_t>(r.below(hi - lo + 1));
  };
  std::vector<Case> cases = {
      {"add", [&](dia::Rng& r) {
         Shape s{extent(r, 1, 3), extent(r, 1, 4)};
         return std::pair<OpFn, std::vector<Tensor>>{
             [](const std::vector<Tensor>& in) { return ops::add(in[0], in[1]); },
             {random_tensor(r, s), random_tensor(r, s)}};
       }},
      {"mul", [&](dia::Rng& r) {
         Shape s{extent(r, 1, 3), extent(r, 1, 4)};
         return std::pair<OpFn, std::vector<Tensor>>{
             [](const std::vector<Tensor>& in) { return ops::mul(in[0], in[1]); },
             {random_tensor(r, s), random_tensor(r, s)}};
       }},
      {"matmul", [&](dia::Rng& r) {
         std::size_t m = extent(r, 1, 4), k = extent(r, 1, 4), n = extent(r, 1, 4);
         return std::pair<OpFn, std::vector<Tensor>>{
             [](const std::vector<Tensor>& in) { return ops::matmul(in[0], in[1]); },
             {random_tensor(r, {m, k}), random_tensor(r, {k, n})}};
       }},
      {"linear", [&](dia::Rng& r) {
         std::size_t b = extent(r, 1, 3), i = extent(r, 1, 5), o = extent(r, 1, 5);
         return std::pair<OpFn, std::vector<Tensor>>{
             [](const std::vector<Tensor>& in) { return ops::linear(in[0], in[1], in[2]); },
             {random_tensor(r, {b, i}), random_tensor(r, {o, i}), random_tensor(r, {o})}};
       }},
      {"conv2d", [&](dia::Rng& r) {
         std::size_t k = r.below(2) ? 3 : 1, stride = 1 + r.below(2), pad = k / 2;
         std::size_t c = extent(r, 1, 3), o = extent(r, 1, 3), h = extent(r, 3, 5);
         return std::pair<OpFn, std::vector<Tensor>>{
             [stride, pad](const std::vector<Tensor>& in) {
               return ops::conv2d(in[0], in[1], stride, pad, in[2]);
             },
             {random_tensor(r, {2, c, h, h + 1}), random_tensor(r, {o, c, k, k}),
              random_tensor(r, {o})}};
       }},
      {"relu", [&](dia::Rng& r) {
         return std::pair<OpFn, std::vector<Tensor>>{
             [](const std::vector<Tensor>& in) { return ops::relu(in[0]); },
             {random_tensor(r, {extent(r, 1, 6), 3})}};
       }},
      {"sigmoid", [&](dia::Rng& r) {
         return std::pair<OpFn, std::vector<Tensor>>{
             [](const std::vector<Tensor>& in) { return ops::sigmoid(in[0]); },
             {random_tensor(r, {extent(r, 1, 6)}, -3, 3)}};
       }},
      {"tanh", [&](dia::Rng& r) {
         return std::pair<OpFn, std::vector<Tensor>>{
             [](const std::vector<Tensor>& in) { return ops::tanh(in[0]); },
             {random_tensor(r, {extent(r, 1, 6)}, -3, 3)}};
       }},
      {"global_avg_pool", [&](dia::Rng& r) {
         return std::pair<OpFn, std::vector<Tensor>>{
             [](const std::vector<Tensor>& in) { return ops::global_avg_pool(in[0]); },
             {random_tensor(r, {extent(r, 1, 2), extent(r, 1, 3), 2, extent(r, 1, 3)})}};
       }},
      {"channelwise_mul", [&](dia::Rng& r) {
         std::size_t b = extent(r, 1, 2), c = extent(r, 1, 3);
         return std::pair<OpFn, std::vector<Tensor>>{
             [](const std::vector<Tensor>& in) { return ops::channelwise_mul(in[0], in[1]); },
             {random_tensor(r, {b, c, 2, 3}), random_tensor(r, {b, c})}};
       }},
      {"batch_norm_train", [&](dia::Rng& r) {
         std::size_t b = extent(r, 2, 3), c = extent(r, 1, 3);
         auto stats = std::make_shared<ops::BatchNormStats>(
             ops::BatchNormStats{std::vector<double>(c, 0.0), std::vector<double>(c, 1.0)});
         return std::pair<OpFn, std::vector<Tensor>>{
             [stats](const std::vector<Tensor>& in) {
               return ops::batch_norm(in[0], in[1], in[2], *stats, true);
             },
             {random_tensor(r, {b, c, 2, 2}), random_tensor(r, {c}, 0.5, 1.5), random_tensor(r, {c})}};
       }},
      {"batch_norm_eval", [&](dia::Rng& r) {
         std::size_t c = extent(r, 1, 3);
         auto stats = std::make_shared<ops::BatchNormStats>(
             ops::BatchNormStats{std::vector<double>(c, 0.2), std::vector<double>(c, 0.7)});
         return std::pair<OpFn, std::vector<Tensor>>{
             [stats](const std::vector<Tensor>& in) {
               return ops::batch_norm(in[0], in[1], in[2], *stats, false);
             },
             {random_tensor(r, {2, c}), random_tensor(r, {c}), random_tensor(r, {c})}};
       }},
      {"grouped_linear", [&](dia::Rng& r) {
         std::size_t groups = extent(r, 1, 3), block = extent(r, 1, 3);
         return std::pair<OpFn, std::vector<Tensor>>{
             [](const std::vector<Tensor>& in) { return ops::grouped_linear(in[0], in[1]); },
             {random_tensor(r, {2, groups * block}), random_tensor(r, {groups, block, block})}};
       }},
      {"elementwise_affine", [&](dia::Rng& r) {
         std::size_t n = extent(r, 1, 5);
         return std::pair<OpFn, std::vector<Tensor>>{
             [](const std::vector<Tensor>& in) { return ops::elementwise_affine(in[0], in[1], in[2]); },
             {random_tensor(r, {3, n}), random_tensor(r, {n}), random_tensor(r, {n})}};
       }},
      {"channel_conv1d", [&](dia::Rng& r) {
         std::size_t k = 2 * r.below(3) + 1;
         return std::pair<OpFn, std::vector<Tensor>>{
             [](const std::vector<Tensor>& in) { return ops::channel_conv1d(in[0], in[1]); },
             {random_tensor(r, {2, extent(r, 1, 6)}), random_tensor(r, {k})}};
       }},
      {"softmax_cross_entropy", [&](dia::Rng& r) {
         std::size_t b = extent(r, 1, 4), k = extent(r, 2, 5);
         std::vector<int> labels(b);
         for (int& l : labels) l = static_cast<int>(r.below(k));
         return std::pair<OpFn, std::vector<Tensor>>{
             [labels](const std::vector<Tensor>& in) {
               return ops::softmax_cross_entropy(in[0], labels);
             },
             {random_tensor(r, {b, k}, -2, 2)}};
       }},
      {"concat", [&](dia::Rng& r) {
         std::size_t axis = r.below(2);
         Shape a{2, 3}, b{2, 3};
         a[axis] = extent(r, 1, 3);
         b[axis] = extent(r, 1, 3);
         return std::pair<OpFn, std::vector<Tensor>>{
             [axis](const std::vector<Tensor>& in) { return ops::concat({in[0], in[1]}, axis); },
             {random_tensor(r, a), random_tensor(r, b)}};
       }},
      {"slice", [&](dia::Rng& r) {
         std::size_t axis = r.below(3);
         Shape s{3, 4, 2};
         std::size_t begin = r.below(s[axis]);
         std::size_t end = begin + 1 + r.below(s[axis] - begin);
         return std::pair<OpFn, std::vector<Tensor>>{
             [axis, begin, end](const std::vector<Tensor>& in) {
               return ops::slice(in[0], axis, begin, end);
             },
             {random_tensor(r, s)}};
       }},
  };

  for (const Case& c : cases) {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
      dia::Rng rng(seed * 7919 + 13);
      auto [fn, inputs] = c.make(rng);
      const double err = op_grad_error(fn, inputs, rng);
      EXPECT_LE(err, 1e-4) << c.name << " seed " << seed;
    }
  }
}

TEST(TensorCoreProperty, FanOutAccumulatesGradients) {
  dia::Rng rng(3);
  Tensor x = random_tensor(rng, {5});
  Tensor w1 = random_tensor(rng, {5}, -1, 1, false);
  Tensor w2 = random_tensor(rng, {5}, -1, 1, false);

  dia::backward(ops::sum(ops::mul(ops::tanh(x), w1)));
  std::vector<double> g1(x.grad().begin(), x.grad().end());
  x.zero_grad();
  dia::backward(ops::sum(ops::mul(ops::sigmoid(x), w2)));
  std::vector<double> g2(x.grad().begin(), x.grad().end());
  x.zero_grad();

  dia::backward(ops::add(ops::sum(ops::mul(ops::tanh(x), w1)),
                         ops::sum(ops::mul(ops::sigmoid(x), w2))));
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(x.grad()[i], g1[i] + g2[i], 1e-15);
}

TEST(TensorCoreProperty, RepeatedRunsAreBitwiseIdentical) {
  auto run = [] {
    dia::Rng rng(11);
    Tensor x = random_tensor(rng, {2, 3, 5, 5});
    Tensor w = random_tensor(rng, {4, 3, 3, 3});
    Tensor y = ops::global_avg_pool(ops::relu(ops::conv2d(x, w, 2, 1)));
    dia::backward(ops::sum(ops::mul(y, y)));
    std::vector<double> out(y.data().begin(), y.data().end());
    out.insert(out.end(), w.grad().begin(), w.grad().end());
    out.insert(out.end(), x.grad().begin(), x.grad().end());
    return out;
  };
  const auto a = run();
  const auto b = run();
  ASSERT_EQ(a.size(), b.size());
  EXPECT_EQ(0, std::memcmp(a.data(), b.data(), a.size() * sizeof(double)));
}

TEST(TensorCore, BatchNormEvalIsFrozenAffine) {
  ops::BatchNormStats stats{{0.5, -1.0}, {4.0, 0.25}};
  Tensor gamma({2}, std::vector<double>{2.0, 1.0});
  Tensor beta({2}, std::vector<double>{0.0, 3.0});
  Tensor x({1, 2}, std::vector<double>{2.5, 0.0});
  Tensor y = ops::batch_norm(x, gamma, beta, stats, false, 0.9, 0.0);
  EXPECT_DOUBLE_EQ(y[0], 2.0 * (2.5 - 0.5) / 2.0);
  EXPECT_DOUBLE_EQ(y[1], (0.0 + 1.0) / 0.5 + 3.0);
  EXPECT_EQ(stats.running_mean[0], 0.5);  // eval leaves statistics untouched
}

TEST(TensorCore, BatchNormTrainUpdatesRunningStatsWithMomentum) {
  ops::BatchNormStats stats{{0.0}, {1.0}};
  Tensor gamma({1}, 1.0), beta({1}, 0.0);
  Tensor x({4, 1}, std::vector<double>{1.0, 2.0, 3.0, 4.0});
  ops::batch_norm(x, gamma, beta, stats, true);
  EXPECT_NEAR(stats.running_mean[0], 0.1 * 2.5, 1e-15);
  EXPECT_NEAR(stats.running_var[0], 0.9 + 0.1 * (5.0 / 3.0), 1e-15);
}

}  // namespace
