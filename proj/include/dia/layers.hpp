#pragma once

#include <cmath>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <variant>
#include <vector>

#include "dia/ops.hpp"
#include "dia/rng.hpp"

namespace dia {

// How a parameter enters the weight-only tally. Closed-form attention counts
// cover kWeight only; biases and normalization affine terms are reported
// separately.
enum class ParamRole { kWeight, kBias, kNormAffine };

struct ParamRef {
  std::string name;       // unique, dotted path ("stage1.block0.conv1.weight")
  std::string component;  // budget bucket ("backbone", "attention", ...)
  ParamRole role = ParamRole::kWeight;
  Tensor tensor;
};

// Per-component parameter tallies with shared tensors counted once.
struct ParamBudget {
  std::map<std::string, std::size_t> weight_only;
  std::map<std::string, std::size_t> extra;  // biases + normalization affine

  std::size_t weights(const std::string& component) const {
    auto it = weight_only.find(component);
    return it == weight_only.end() ? 0 : it->second;
  }
  std::size_t extras(const std::string& component) const {
    auto it = extra.find(component);
    return it == extra.end() ? 0 : it->second;
  }
  std::size_t total_weight_only() const {
    return std::accumulate(weight_only.begin(), weight_only.end(), std::size_t{0},
                           [](std::size_t a, const auto& kv) { return a + kv.second; });
  }
  std::size_t total_extra() const {
    return std::accumulate(extra.begin(), extra.end(), std::size_t{0},
                           [](std::size_t a, const auto& kv) { return a + kv.second; });
  }
  std::size_t total() const { return total_weight_only() + total_extra(); }
};

inline ParamBudget count_weights(std::span<const ParamRef> params) {
  ParamBudget budget;
  std::unordered_set<const void*> seen;
  for (const ParamRef& p : params) {
    if (!seen.insert(p.tensor.id()).second) continue;
    if (p.role == ParamRole::kWeight) {
      budget.weight_only[p.component] += p.tensor.numel();
    } else {
      budget.extra[p.component] += p.tensor.numel();
    }
  }
  return budget;
}

// Number of distinct parameter tensors (by storage identity).
inline std::size_t distinct_tensors(std::span<const ParamRef> params) {
  std::unordered_set<const void*> seen;
  for (const ParamRef& p : params) seen.insert(p.tensor.id());
  return seen.size();
}

namespace init {

inline Tensor uniform(Rng& rng, Shape shape, double bound) {
  Tensor t(std::move(shape), 0.0, true);
  for (double& v : t.data()) v = rng.uniform(-bound, bound);
  return t;
}

inline Tensor constant(Shape shape, double value) { return Tensor(std::move(shape), value, true); }

}  // namespace init

// ---------------------------------------------------------------------------
// Layer kinds and their closed-form weight counts.

struct FullyConnectedKind {
  std::size_t in, out;
  bool bias;
};
struct GroupedLinearKind {
  std::size_t n, groups;
  bool bias;
};
struct ElementwiseAffineKind {
  std::size_t n;
};
struct Conv2dKind {
  std::size_t in_ch, out_ch, kernel, stride;
  bool bias;
};
struct BatchNormKind {
  std::size_t channels;
};

using LayerKind =
    std::variant<FullyConnectedKind, GroupedLinearKind, ElementwiseAffineKind, Conv2dKind, BatchNormKind>;

// Weight-only count for FC / grouped / conv; ElementwiseAffine counts both
// its scale and shift (2n); BatchNorm counts its learnable affine (2c).
inline std::size_t closed_form_count(const LayerKind& kind) {
  struct Visitor {
    std::size_t operator()(const FullyConnectedKind& k) const { return k.in * k.out; }
    std::size_t operator()(const GroupedLinearKind& k) const { return k.n * k.n / k.groups; }
    std::size_t operator()(const ElementwiseAffineKind& k) const { return 2 * k.n; }
    std::size_t operator()(const Conv2dKind& k) const { return k.in_ch * k.out_ch * k.kernel * k.kernel; }
    std::size_t operator()(const BatchNormKind& k) const { return 2 * k.channels; }
  };
  return std::visit(Visitor{}, kind);
}

// ---------------------------------------------------------------------------

class FullyConnected {
 public:
  FullyConnected() = default;
  FullyConnected(std::size_t in, std::size_t out, bool bias, Rng& rng) : in_(in), out_(out) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    weight_ = init::uniform(rng, {out, in}, bound);
    if (bias) bias_ = init::constant({out}, 0.0);
  }

  Tensor forward(const Tensor& x) const { return ops::linear(x, weight_, bias_); }

  LayerKind kind() const { return FullyConnectedKind{in_, out_, bias_.defined()}; }
  std::size_t in() const { return in_; }
  std::size_t out() const { return out_; }
  Tensor& weight() { return weight_; }
  Tensor& bias() { return bias_; }
  const Tensor& weight() const { return weight_; }
  const Tensor& bias() const { return bias_; }

  void collect(const std::string& prefix, const std::string& component,
               std::vector<ParamRef>& out) const {
    out.push_back({prefix + ".weight", component, ParamRole::kWeight, weight_});
    if (bias_.defined()) out.push_back({prefix + ".bias", component, ParamRole::kBias, bias_});
  }

 private:
  std::size_t in_ = 0, out_ = 0;
  Tensor weight_, bias_;
};

// Block-diagonal N -> N map with `groups` blocks of size N/groups.
class GroupedLinear {
 public:
  GroupedLinear() = default;
  GroupedLinear(std::size_t n, std::size_t groups, bool bias, Rng& rng) : n_(n), groups_(groups) {
    if (groups == 0 || n % groups != 0) {
      throw ConfigError("grouped_linear: groups (" + std::to_string(groups) +
                        ") must divide width (" + std::to_string(n) + ")");
    }
    const std::size_t block = n / groups;
    weight_ = init::uniform(rng, {groups, block, block}, 1.0 / std::sqrt(static_cast<double>(block)));
    if (bias) bias_ = init::constant({n}, 0.0);
  }

  Tensor forward(const Tensor& x) const {
    Tensor y = ops::grouped_linear(x, weight_);
    if (!bias_.defined()) return y;
    return ops::elementwise_affine(y, Tensor({n_}, 1.0), bias_);
  }

  LayerKind kind() const { return GroupedLinearKind{n_, groups_, bias_.defined()}; }
  Tensor& weight() { return weight_; }
  const Tensor& weight() const { return weight_; }

  // Dense [n,n] matrix equal to the block-diagonal map.
  Tensor dense_matrix() const {
    const std::size_t block = n_ / groups_;
    Tensor m({n_, n_});
    for (std::size_t g = 0; g < groups_; ++g)
      for (std::size_t i = 0; i < block; ++i)
        for (std::size_t j = 0; j < block; ++j)
          m.data()[(g * block + i) * n_ + g * block + j] = weight_[(g * block + i) * block + j];
    return m;
  }

  void collect(const std::string& prefix, const std::string& component,
               std::vector<ParamRef>& out) const {
    out.push_back({prefix + ".weight", component, ParamRole::kWeight, weight_});
    if (bias_.defined()) out.push_back({prefix + ".bias", component, ParamRole::kBias, bias_});
  }

 private:
  std::size_t n_ = 0, groups_ = 1;
  Tensor weight_, bias_;
};

// y = W ⊙ x + b with W, b in R^n.
class ElementwiseAffine {
 public:
  ElementwiseAffine() = default;
  explicit ElementwiseAffine(std::size_t n, double scale = 1.0, double shift = 0.0)
      : n_(n), weight_(init::constant({n}, scale)), bias_(init::constant({n}, shift)) {}

  Tensor forward(const Tensor& x) const {
    if (x.rank() != 2 || x.dim(1) != n_) {
      throw ShapeError("elementwise_affine: layer width " + std::to_string(n_) + " vs input " +
                       shape_str(x.shape()));
    }
    return ops::elementwise_affine(x, weight_, bias_);
  }

  LayerKind kind() const { return ElementwiseAffineKind{n_}; }
  Tensor& weight() { return weight_; }
  Tensor& bias() { return bias_; }

  // Both vectors enter the weight-only tally.
  void collect(const std::string& prefix, const std::string& component,
               std::vector<ParamRef>& out) const {
    out.push_back({prefix + ".weight", component, ParamRole::kWeight, weight_});
    out.push_back({prefix + ".bias", component, ParamRole::kWeight, bias_});
  }

 private:
  std::size_t n_ = 0;
  Tensor weight_, bias_;
};

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::size_t in_ch, std::size_t out_ch, std::size_t kernel, std::size_t stride, bool bias,
         Rng& rng)
      : in_ch_(in_ch), out_ch_(out_ch), kernel_(kernel), stride_(stride) {
    const double fan_in = static_cast<double>(in_ch * kernel * kernel);
    weight_ = init::uniform(rng, {out_ch, in_ch, kernel, kernel}, std::sqrt(6.0 / fan_in));
    if (bias) bias_ = init::constant({out_ch}, 0.0);
  }

  Tensor forward(const Tensor& x) const {
    return ops::conv2d(x, weight_, stride_, kernel_ / 2, bias_);
  }

  LayerKind kind() const { return Conv2dKind{in_ch_, out_ch_, kernel_, stride_, bias_.defined()}; }
  Tensor& weight() { return weight_; }
  const Tensor& weight() const { return weight_; }

  void collect(const std::string& prefix, const std::string& component,
               std::vector<ParamRef>& out) const {
    out.push_back({prefix + ".weight", component, ParamRole::kWeight, weight_});
    if (bias_.defined()) out.push_back({prefix + ".bias", component, ParamRole::kBias, bias_});
  }

 private:
  std::size_t in_ch_ = 0, out_ch_ = 0, kernel_ = 1, stride_ = 1;
  Tensor weight_, bias_;
};

// Batch normalization with running statistics (EMA momentum 0.9, eps 1e-5).
class BatchNorm {
 public:
  static constexpr double kMomentum = 0.9;
  static constexpr double kEps = 1e-5;

  BatchNorm() = default;
  explicit BatchNorm(std::size_t channels)
      : channels_(channels),
        gamma_(init::constant({channels}, 1.0)),
        beta_(init::constant({channels}, 0.0)),
        stats_{std::vector<double>(channels, 0.0), std::vector<double>(channels, 1.0)} {}

  Tensor forward(const Tensor& x, bool training) {
    return ops::batch_norm(x, gamma_, beta_, stats_, training, kMomentum, kEps);
  }

  LayerKind kind() const { return BatchNormKind{channels_}; }
  Tensor& gamma() { return gamma_; }
  Tensor& beta() { return beta_; }
  ops::BatchNormStats& stats() { return stats_; }
  const ops::BatchNormStats& stats() const { return stats_; }

  void collect(const std::string& prefix, const std::string& component,
               std::vector<ParamRef>& out) const {
    out.push_back({prefix + ".gamma", component, ParamRole::kNormAffine, gamma_});
    out.push_back({prefix + ".beta", component, ParamRole::kNormAffine, beta_});
  }

 private:
  std::size_t channels_ = 0;
  Tensor gamma_, beta_;
  ops::BatchNormStats stats_;
};

}  // namespace dia
