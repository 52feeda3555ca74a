#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "dia/layers.hpp"

namespace dia {

enum class OutputActivation { kSigmoid, kTanh, kRelu };
enum class CellVariant { kStandard, kModified, kLight };
enum class Sharing { kPerBlock, kSharedPerStage };

inline const char* to_string(OutputActivation a) {
  switch (a) {
    case OutputActivation::kSigmoid: return "sigmoid";
    case OutputActivation::kTanh: return "tanh";
    case OutputActivation::kRelu: return "relu";
  }
  return "?";
}

inline const char* to_string(CellVariant v) {
  switch (v) {
    case CellVariant::kStandard: return "standard";
    case CellVariant::kModified: return "modified";
    case CellVariant::kLight: return "light";
  }
  return "?";
}

struct LstmCellConfig {
  CellVariant variant = CellVariant::kModified;
  std::size_t n = 0;  // channel width N
  std::size_t r = 1;  // reduction ratio (Modified / Light)
  OutputActivation output_activation = OutputActivation::kSigmoid;
  std::size_t stack_depth = 1;

  void validate() const {
    if (n == 0) throw ConfigError("lstm cell: width must be positive");
    if (stack_depth == 0) throw ConfigError("lstm cell: stack_depth must be positive");
    if (variant != CellVariant::kStandard && (r == 0 || n % r != 0)) {
      throw ConfigError("lstm cell: reduction ratio r=" + std::to_string(r) +
                        " must divide width N=" + std::to_string(n));
    }
  }

  // Weight-only parameter count of one cell:
  //   Standard 8N^2, Modified 10N^2/r, Light 2N^2/r + 16N.
  std::size_t closed_form_weights_per_cell() const {
    switch (variant) {
      case CellVariant::kStandard: return 8 * n * n;
      case CellVariant::kModified: return 10 * n * n / r;
      case CellVariant::kLight: return 2 * n * n / r + 16 * n;
    }
    return 0;
  }
  std::size_t closed_form_weights() const { return stack_depth * closed_form_weights_per_cell(); }
};

// Attention configuration of a network, independent of stage widths.
struct NoAttention {};
struct SeSpec {
  std::size_t reduction = 16;
};
struct EcaSpec {
  std::size_t kernel_size = 3;
};
struct DiaLstmSpec {
  CellVariant variant = CellVariant::kModified;
  std::size_t r = 4;
  OutputActivation output_activation = OutputActivation::kSigmoid;
  std::size_t stack_depth = 1;

  LstmCellConfig cell(std::size_t n) const { return {variant, n, r, output_activation, stack_depth}; }
};
using SamKind = std::variant<NoAttention, SeSpec, EcaSpec, DiaLstmSpec>;

// Recurrent state of a DIA unit: one (h, c) pair per stacked cell, each [B,N].
struct DiaState {
  std::vector<Tensor> h, c;

  static DiaState zeros(std::size_t batch, std::size_t n, std::size_t depth) {
    DiaState s;
    for (std::size_t k = 0; k < depth; ++k) {
      s.h.emplace_back(Shape{batch, n});
      s.c.emplace_back(Shape{batch, n});
    }
    return s;
  }
  bool empty() const { return h.empty(); }
};

// ---------------------------------------------------------------------------
// LSTM cells

// Gate order used throughout: input, forget, candidate, output.
inline constexpr std::size_t kGates = 4;
inline constexpr const char* kGateNames[kGates] = {"i", "f", "g", "o"};

class LstmCell {
 public:
  LstmCell(const LstmCellConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const std::size_t n = cfg.n;
    switch (cfg.variant) {
      case CellVariant::kStandard:
        for (std::size_t g = 0; g < kGates; ++g) {
          w_y_.emplace_back(n, n, false, rng);
          w_h_.emplace_back(n, n, false, rng);
        }
        break;
      case CellVariant::kModified: {
        const std::size_t m = n / cfg.r;
        reduce_y_ = FullyConnected(n, m, true, rng);
        reduce_h_ = FullyConnected(n, m, true, rng);
        for (std::size_t g = 0; g < kGates; ++g) {
          w_y_.emplace_back(m, n, false, rng);
          w_h_.emplace_back(m, n, false, rng);
        }
        break;
      }
      case CellVariant::kLight:
        group_y_ = GroupedLinear(n, cfg.r, false, rng);
        group_h_ = GroupedLinear(n, cfg.r, false, rng);
        for (std::size_t g = 0; g < kGates; ++g) {
          affine_y_.emplace_back(n, 1.0, g == 1 ? 1.0 : 0.0);
          affine_h_.emplace_back(n, 1.0, 0.0);
        }
        break;
    }
    if (cfg.variant != CellVariant::kLight) {
      for (std::size_t g = 0; g < kGates; ++g) {
        gate_bias_.push_back(init::constant({n}, g == 1 ? 1.0 : 0.0));
      }
    }
  }

  const LstmCellConfig& config() const { return cfg_; }

  // One recurrence step. y, h_prev, c_prev: [B,N]. Returns (h, c).
  std::pair<Tensor, Tensor> step(const Tensor& y, const Tensor& h_prev, const Tensor& c_prev) const {
    const Shape expect{y.rank() == 2 ? y.dim(0) : 0, cfg_.n};
    if (y.shape() != expect || h_prev.shape() != expect || c_prev.shape() != expect) {
      throw ShapeError("dia_lstm_step: expected [B," + std::to_string(cfg_.n) + "] inputs, got y " +
                       shape_str(y.shape()) + ", h " + shape_str(h_prev.shape()) + ", c " +
                       shape_str(c_prev.shape()));
    }
    std::vector<Tensor> pre(kGates);
    switch (cfg_.variant) {
      case CellVariant::kStandard:
        for (std::size_t g = 0; g < kGates; ++g) {
          pre[g] = ops::linear(y, w_y_[g].weight(), gate_bias_[g]);
          pre[g] = ops::add(pre[g], w_h_[g].forward(h_prev));
        }
        break;
      case CellVariant::kModified: {
        const Tensor ry = ops::relu(reduce_y_.forward(y));
        const Tensor rh = ops::relu(reduce_h_.forward(h_prev));
        for (std::size_t g = 0; g < kGates; ++g) {
          pre[g] = ops::linear(ry, w_y_[g].weight(), gate_bias_[g]);
          pre[g] = ops::add(pre[g], w_h_[g].forward(rh));
        }
        break;
      }
      case CellVariant::kLight: {
        const Tensor gy = ops::relu(group_y_.forward(y));
        const Tensor gh = ops::relu(group_h_.forward(h_prev));
        for (std::size_t g = 0; g < kGates; ++g) {
          pre[g] = ops::add(affine_y_[g].forward(gy), affine_h_[g].forward(gh));
        }
        break;
      }
    }
    const Tensor i = ops::sigmoid(pre[0]);
    const Tensor f = ops::sigmoid(pre[1]);
    const Tensor cand = ops::tanh(pre[2]);
    const Tensor o = ops::sigmoid(pre[3]);
    Tensor c = ops::add(ops::mul(f, c_prev), ops::mul(i, cand));
    Tensor act;
    switch (cfg_.output_activation) {
      case OutputActivation::kSigmoid: act = ops::sigmoid(c); break;
      case OutputActivation::kTanh: act = ops::tanh(c); break;
      case OutputActivation::kRelu: act = ops::relu(c); break;
    }
    return {ops::mul(o, act), c};
  }

  void collect(const std::string& prefix, const std::string& component,
               std::vector<ParamRef>& out) const {
    if (cfg_.variant == CellVariant::kModified) {
      reduce_y_.collect(prefix + ".reduce_y", component, out);
      reduce_h_.collect(prefix + ".reduce_h", component, out);
    }
    if (cfg_.variant == CellVariant::kLight) {
      group_y_.collect(prefix + ".group_y", component, out);
      group_h_.collect(prefix + ".group_h", component, out);
      for (std::size_t g = 0; g < kGates; ++g) {
        affine_y_[g].collect(prefix + ".affine_y_" + kGateNames[g], component, out);
        affine_h_[g].collect(prefix + ".affine_h_" + kGateNames[g], component, out);
      }
      return;
    }
    for (std::size_t g = 0; g < kGates; ++g) {
      w_y_[g].collect(prefix + ".w_y_" + kGateNames[g], component, out);
      w_h_[g].collect(prefix + ".w_h_" + kGateNames[g], component, out);
      out.push_back({prefix + ".bias_" + kGateNames[g], component, ParamRole::kBias, gate_bias_[g]});
    }
  }

 private:
  LstmCellConfig cfg_;
  FullyConnected reduce_y_, reduce_h_;
  GroupedLinear group_y_, group_h_;
  std::vector<FullyConnected> w_y_, w_h_;
  std::vector<ElementwiseAffine> affine_y_, affine_h_;
  std::vector<Tensor> gate_bias_;
};

// ---------------------------------------------------------------------------
// Self-attention modules: extraction (GAP) -> processing -> attention map.

struct AttentionOutput {
  Tensor descriptor;  // y_t = GAP(a_t), [B,N]
  Tensor map;         // h_t, [B,N]
};

class AttentionModule {
 public:
  virtual ~AttentionModule() = default;
  virtual std::size_t width() const = 0;
  virtual bool recurrent() const { return false; }
  // `state` is ignored by stateless modules.
  virtual AttentionOutput forward(const Tensor& a, DiaState& state) const = 0;
  virtual void collect(const std::string& prefix, std::vector<ParamRef>& out) const = 0;
  virtual DiaState initial_state(std::size_t /*batch*/) const { return {}; }

 protected:
  void check_input(const char* op, const Tensor& a) const {
    if (a.rank() != 4 || a.dim(1) != width()) {
      throw ShapeError(std::string(op) + ": module width " + std::to_string(width()) +
                       " vs feature map " + shape_str(a.shape()));
    }
  }
};

// Squeeze-and-excitation: sigmoid(FC2(relu(FC1(GAP(a))))).
class SeModule final : public AttentionModule {
 public:
  SeModule(std::size_t n, std::size_t reduction, Rng& rng) : n_(n) {
    if (reduction == 0 || n / reduction == 0) {
      throw ConfigError("se: reduction " + std::to_string(reduction) + " too large for width " +
                        std::to_string(n));
    }
    fc1_ = FullyConnected(n, n / reduction, true, rng);
    fc2_ = FullyConnected(n / reduction, n, true, rng);
  }

  std::size_t width() const override { return n_; }

  AttentionOutput forward(const Tensor& a, DiaState&) const override {
    check_input("se_forward", a);
    Tensor y = ops::global_avg_pool(a);
    return {y, ops::sigmoid(fc2_.forward(ops::relu(fc1_.forward(y))))};
  }

  void collect(const std::string& prefix, std::vector<ParamRef>& out) const override {
    fc1_.collect(prefix + ".fc1", "attention", out);
    fc2_.collect(prefix + ".fc2", "attention", out);
  }

  FullyConnected& fc1() { return fc1_; }
  FullyConnected& fc2() { return fc2_; }

 private:
  std::size_t n_;
  FullyConnected fc1_, fc2_;
};

// Efficient channel attention: sigmoid(conv1d_k(GAP(a))), zero padded.
class EcaModule final : public AttentionModule {
 public:
  EcaModule(std::size_t n, std::size_t kernel_size, Rng& rng) : n_(n) {
    if (kernel_size % 2 == 0) {
      throw ConfigError("eca: kernel_size must be odd, got " + std::to_string(kernel_size));
    }
    kernel_ = init::uniform(rng, {kernel_size}, 1.0 / std::sqrt(static_cast<double>(kernel_size)));
  }

  std::size_t width() const override { return n_; }

  AttentionOutput forward(const Tensor& a, DiaState&) const override {
    check_input("eca_forward", a);
    Tensor y = ops::global_avg_pool(a);
    return {y, ops::sigmoid(ops::channel_conv1d(y, kernel_))};
  }

  void collect(const std::string& prefix, std::vector<ParamRef>& out) const override {
    out.push_back({prefix + ".kernel", "attention", ParamRole::kWeight, kernel_});
  }

  Tensor& kernel() { return kernel_; }

 private:
  std::size_t n_;
  Tensor kernel_;
};

// DIA unit: GAP extraction, a stack of LSTM cells carrying (h, c) across the
// blocks of a stage, and h of the last cell as the attention map.
class DiaUnit final : public AttentionModule {
 public:
  DiaUnit(const LstmCellConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    for (std::size_t k = 0; k < cfg.stack_depth; ++k) cells_.emplace_back(cfg, rng);
  }

  std::size_t width() const override { return cfg_.n; }
  bool recurrent() const override { return true; }
  const LstmCellConfig& config() const { return cfg_; }
  std::vector<LstmCell>& cells() { return cells_; }
  const std::vector<LstmCell>& cells() const { return cells_; }

  DiaState initial_state(std::size_t batch) const override {
    return DiaState::zeros(batch, cfg_.n, cells_.size());
  }

  // Advances `state` by one step on descriptor y [B,N]; returns h of the last cell.
  Tensor step(const Tensor& y, DiaState& state) const {
    if (state.h.size() != cells_.size()) {
      throw ShapeError("dia_lstm_step: state holds " + std::to_string(state.h.size()) +
                       " cells, unit has " + std::to_string(cells_.size()));
    }
    Tensor input = y;
    for (std::size_t k = 0; k < cells_.size(); ++k) {
      auto [h, c] = cells_[k].step(input, state.h[k], state.c[k]);
      state.h[k] = h;
      state.c[k] = c;
      input = h;
    }
    return input;
  }

  AttentionOutput forward(const Tensor& a, DiaState& state) const override {
    check_input("dia_forward", a);
    Tensor y = ops::global_avg_pool(a);
    if (state.empty()) state = initial_state(a.dim(0));
    return {y, step(y, state)};
  }

  void collect(const std::string& prefix, std::vector<ParamRef>& out) const override {
    for (std::size_t k = 0; k < cells_.size(); ++k) {
      cells_[k].collect(prefix + ".cell" + std::to_string(k), "attention", out);
    }
  }

 private:
  LstmCellConfig cfg_;
  std::vector<LstmCell> cells_;
};

inline std::unique_ptr<AttentionModule> make_attention(const SamKind& kind, std::size_t width,
                                                       Rng& rng) {
  struct Visitor {
    std::size_t n;
    Rng& rng;
    std::unique_ptr<AttentionModule> operator()(const NoAttention&) const { return nullptr; }
    std::unique_ptr<AttentionModule> operator()(const SeSpec& s) const {
      return std::make_unique<SeModule>(n, s.reduction, rng);
    }
    std::unique_ptr<AttentionModule> operator()(const EcaSpec& s) const {
      return std::make_unique<EcaModule>(n, s.kernel_size, rng);
    }
    std::unique_ptr<AttentionModule> operator()(const DiaLstmSpec& s) const {
      return std::make_unique<DiaUnit>(s.cell(n), rng);
    }
  };
  return std::visit(Visitor{width, rng}, kind);
}

// ---------------------------------------------------------------------------
// Stage execution

// What a residual block hands to the stage loop: the residual branch output
// a_t, the skip path (identity or projection of x_t), and whether a ReLU
// follows the addition (post-activation blocks).
struct BlockOutput {
  Tensor residual;
  Tensor shortcut;
  bool relu_after_add = false;
};

// What happens at a block whose attention is masked off while a shared
// recurrent unit is in use.
enum class MaskedBlockPolicy {
  kFreezeState,   // the unit is not invoked; (h, c) carry over unchanged
  kAdvanceState,  // the unit runs and updates (h, c) but its map is not applied
};

struct StageOptions {
  bool use_skip = true;
  bool force_unit_attention = false;  // debug hook: h_t := 1
  MaskedBlockPolicy masked_policy = MaskedBlockPolicy::kFreezeState;
};

using AttentionObserver =
    std::function<void(std::size_t block, const Tensor& descriptor, const Tensor& map)>;

// Runs the blocks of one stage:
//   a_t = f(x_t; θ_t); h_t = A(a_t, state); x_{t+1} = skip(x_t) + a_t ⊗ h_t.
// `modules[t]` is the module attending block t (the same pointer at every
// block under sharing; nullptr for no attention). `shared` is the stage's
// shared module, used for kAdvanceState at masked blocks. The shared
// recurrent state is created fresh on entry; a module other than `shared`
// starts from a fresh state at its own block.
template <typename BlockFn>
Tensor run_stage(BlockFn&& block, std::size_t num_blocks, const Tensor& x0,
                 std::span<const AttentionModule* const> modules, const AttentionModule* shared,
                 const StageOptions& opts, const AttentionObserver& observer = {}) {
  Tensor x = x0;
  DiaState state;
  for (std::size_t t = 0; t < num_blocks; ++t) {
    BlockOutput out = block(t, x);
    Tensor a = out.residual;
    const AttentionModule* module = t < modules.size() ? modules[t] : nullptr;
    if (opts.force_unit_attention) {
      // identity recalibration
    } else if (module != nullptr) {
      DiaState own;
      AttentionOutput att = module->forward(a, module == shared ? state : own);
      if (observer) observer(t, att.descriptor, att.map);
      a = ops::channelwise_mul(a, att.map);
    } else if (shared != nullptr && shared->recurrent() &&
               opts.masked_policy == MaskedBlockPolicy::kAdvanceState) {
      shared->forward(a, state);
    }
    x = opts.use_skip ? ops::add(out.shortcut, a) : a;
    if (out.relu_after_add) x = ops::relu(x);
  }
  return x;
}

// DIA over a stage of residual mappings: every block shares `unit`.
// `residual(t, x)` returns a_t = f(x_t; θ_t) with the same shape as x_t.
template <typename ResidualFn>
Tensor dia_apply(const DiaUnit& unit, ResidualFn&& residual, std::size_t num_blocks,
                 const Tensor& x0, bool use_skip = true, const AttentionObserver& observer = {}) {
  std::vector<const AttentionModule*> modules(num_blocks, &unit);
  StageOptions opts;
  opts.use_skip = use_skip;
  return run_stage(
      [&](std::size_t t, const Tensor& x) { return BlockOutput{residual(t, x), x, false}; },
      num_blocks, x0, modules, &unit, opts, observer);
}

}  // namespace dia
