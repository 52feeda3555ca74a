#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "dia/attention.hpp"

namespace dia {

enum class BlockKind { kBasic, kBottleneck };
enum class Mode { kTrain, kEval };

inline constexpr std::size_t kBottleneckExpansion = 4;

struct StageSpec {
  std::size_t blocks = 1;
  std::size_t channels = 16;  // bottleneck: inner width; output is channels * 4
  std::size_t stride = 1;
};

struct NetworkConfig {
  std::string name = "custom";
  std::vector<StageSpec> stages;
  BlockKind block_kind = BlockKind::kBasic;
  std::size_t stem_channels = 16;
  SamKind attention = NoAttention{};
  Sharing sharing = Sharing::kSharedPerStage;
  std::vector<bool> attention_block_mask;  // one flag per block across stages; empty = all on
  std::vector<bool> attention_stage_mask;  // one flag per stage; empty = all on
  MaskedBlockPolicy masked_policy = MaskedBlockPolicy::kFreezeState;
  bool use_skip = true;
  bool use_batchnorm = true;
  std::size_t num_classes = 10;
  Shape input_shape{3, 32, 32};  // C, H, W

  std::size_t stage_width(std::size_t s) const {
    return block_kind == BlockKind::kBottleneck ? stages.at(s).channels * kBottleneckExpansion
                                                : stages.at(s).channels;
  }

  std::size_t total_blocks() const {
    std::size_t n = 0;
    for (const auto& s : stages) n += s.blocks;
    return n;
  }

  bool has_attention() const { return !std::holds_alternative<NoAttention>(attention); }

  bool stage_attended(std::size_t s) const {
    return has_attention() && (attention_stage_mask.empty() || attention_stage_mask[s]);
  }

  bool block_attended(std::size_t s, std::size_t b) const {
    if (!stage_attended(s)) return false;
    if (attention_block_mask.empty()) return true;
    std::size_t flat = b;
    for (std::size_t i = 0; i < s; ++i) flat += stages[i].blocks;
    return attention_block_mask[flat];
  }

  void validate() const {
    if (stages.empty()) throw ConfigError("network: at least one stage required");
    for (const auto& s : stages) {
      if (s.blocks == 0 || s.channels == 0 || s.stride == 0) {
        throw ConfigError("network: stage blocks, channels and stride must be positive");
      }
    }
    if (num_classes < 1) throw ConfigError("network: num_classes must be positive");
    if (input_shape.size() != 3 || input_shape[0] == 0) {
      throw ConfigError("network: input_shape must be [C,H,W]");
    }
    if (!attention_stage_mask.empty() && attention_stage_mask.size() != stages.size()) {
      throw ConfigError("network: attention_stage_mask has " +
                        std::to_string(attention_stage_mask.size()) + " entries for " +
                        std::to_string(stages.size()) + " stages");
    }
    if (!attention_block_mask.empty() && attention_block_mask.size() != total_blocks()) {
      throw ConfigError("network: attention_block_mask has " +
                        std::to_string(attention_block_mask.size()) + " entries for " +
                        std::to_string(total_blocks()) + " blocks");
    }
    if (std::holds_alternative<DiaLstmSpec>(attention)) {
      const auto& spec = std::get<DiaLstmSpec>(attention);
      for (std::size_t s = 0; s < stages.size(); ++s) {
        spec.cell(stage_width(s)).validate();
      }
    }
  }
};

// Named architectures. The CIFAR bottleneck family uses pre-activation
// bottleneck blocks with stage output widths 64/128/256; block counts follow
// depth = 9 * blocks_per_stage + 2.
inline NetworkConfig named_config(const std::string& name) {
  auto bottleneck = [&](std::size_t per_stage) {
    NetworkConfig c;
    c.name = name;
    c.block_kind = BlockKind::kBottleneck;
    c.stem_channels = 16;
    c.stages = {{per_stage, 16, 1}, {per_stage, 32, 2}, {per_stage, 64, 2}};
    c.num_classes = 100;
    return c;
  };
  if (name == "resnet83") return bottleneck(9);
  if (name == "resnet164") return bottleneck(18);
  if (name == "resnet245") return bottleneck(27);
  if (name == "resnet407") return bottleneck(45);
  if (name == "resnet56-basic") {
    NetworkConfig c;
    c.name = name;
    c.stem_channels = 16;
    c.stages = {{9, 16, 1}, {9, 32, 2}, {9, 64, 2}};
    c.num_classes = 10;
    return c;
  }
  if (name == "tiny-dia") {
    NetworkConfig c;
    c.name = name;
    c.stem_channels = 8;
    c.stages = {{3, 8, 1}, {3, 16, 2}, {3, 32, 2}};
    c.num_classes = 4;
    return c;
  }
  throw ConfigError("unknown architecture '" + name +
                    "' (known: resnet83, resnet164, resnet245, resnet407, resnet56-basic, tiny-dia)");
}

inline const std::vector<std::string>& named_config_names() {
  static const std::vector<std::string> names = {"resnet83",  "resnet164",      "resnet245",
                                                 "resnet407", "resnet56-basic", "tiny-dia"};
  return names;
}

// Called for every applied attention map with (stage, block, y_t, h_t).
using TraceFn = std::function<void(std::size_t stage, std::size_t block, const Tensor& descriptor,
                                   const Tensor& map)>;

struct ForwardOptions {
  bool force_unit_attention = false;  // debug hook: every h_t := 1
  std::vector<Tensor>* stage_outputs = nullptr;  // receives each stage's output x
};

// Named non-parameter state saved with checkpoints.
struct BufferRef {
  std::string name;
  std::vector<double>* values;
};

namespace detail {

// Optional batch norm: identity when normalization is disabled.
struct MaybeNorm {
  std::unique_ptr<BatchNorm> bn;
  MaybeNorm() = default;
  MaybeNorm(std::size_t channels, bool enabled) {
    if (enabled) bn = std::make_unique<BatchNorm>(channels);
  }
  Tensor operator()(const Tensor& x, bool training) const { return bn ? bn->forward(x, training) : x; }
  void collect(const std::string& prefix, std::vector<ParamRef>& out) const {
    if (bn) bn->collect(prefix, "backbone", out);
  }
  void buffers(const std::string& prefix, std::vector<BufferRef>& out) const {
    if (!bn) return;
    out.push_back({prefix + ".running_mean", &bn->stats().running_mean});
    out.push_back({prefix + ".running_var", &bn->stats().running_var});
  }
};

// Post-activation basic block:
//   a = BN(conv3x3(ReLU(BN(conv3x3_s(x))))), out = ReLU(shortcut(x) + a ⊗ h).
class BasicBlock {
 public:
  BasicBlock(std::size_t in, std::size_t planes, std::size_t stride, bool norm, Rng& rng)
      : conv1_(in, planes, 3, stride, false, rng),
        bn1_(planes, norm),
        conv2_(planes, planes, 3, 1, false, rng),
        bn2_(planes, norm) {
    if (stride != 1 || in != planes) {
      proj_ = std::make_unique<Conv2d>(in, planes, 1, stride, false, rng);
      proj_bn_ = MaybeNorm(planes, norm);
    }
  }

  BlockOutput forward(const Tensor& x, bool training) const {
    Tensor a = ops::relu(bn1_(conv1_.forward(x), training));
    a = bn2_(conv2_.forward(a), training);
    Tensor skip = proj_ ? proj_bn_(proj_->forward(x), training) : x;
    return {a, skip, true};
  }

  void collect(const std::string& p, std::vector<ParamRef>& out) const {
    conv1_.collect(p + ".conv1", "backbone", out);
    bn1_.collect(p + ".bn1", out);
    conv2_.collect(p + ".conv2", "backbone", out);
    bn2_.collect(p + ".bn2", out);
    if (proj_) {
      proj_->collect(p + ".proj", "backbone", out);
      proj_bn_.collect(p + ".proj_bn", out);
    }
  }

  void buffers(const std::string& p, std::vector<BufferRef>& out) const {
    bn1_.buffers(p + ".bn1", out);
    bn2_.buffers(p + ".bn2", out);
    proj_bn_.buffers(p + ".proj_bn", out);
  }

 private:
  Conv2d conv1_;
  MaybeNorm bn1_;
  Conv2d conv2_;
  MaybeNorm bn2_;
  std::unique_ptr<Conv2d> proj_;
  MaybeNorm proj_bn_;
};

// Pre-activation bottleneck block:
//   a = conv1x1(ReLU(BN(conv3x3_s(ReLU(BN(conv1x1(ReLU(BN(x))))))))),
//   out = shortcut(x) + a ⊗ h, with a 1x1 projection when shape changes.
class BottleneckBlock {
 public:
  BottleneckBlock(std::size_t in, std::size_t planes, std::size_t stride, bool norm, Rng& rng)
      : bn1_(in, norm),
        conv1_(in, planes, 1, 1, false, rng),
        bn2_(planes, norm),
        conv2_(planes, planes, 3, stride, false, rng),
        bn3_(planes, norm),
        conv3_(planes, planes * kBottleneckExpansion, 1, 1, false, rng) {
    if (stride != 1 || in != planes * kBottleneckExpansion) {
      proj_ = std::make_unique<Conv2d>(in, planes * kBottleneckExpansion, 1, stride, false, rng);
    }
  }

  BlockOutput forward(const Tensor& x, bool training) const {
    Tensor a = conv1_.forward(ops::relu(bn1_(x, training)));
    a = conv2_.forward(ops::relu(bn2_(a, training)));
    a = conv3_.forward(ops::relu(bn3_(a, training)));
    Tensor skip = proj_ ? proj_->forward(x) : x;
    return {a, skip, false};
  }

  void collect(const std::string& p, std::vector<ParamRef>& out) const {
    bn1_.collect(p + ".bn1", out);
    conv1_.collect(p + ".conv1", "backbone", out);
    bn2_.collect(p + ".bn2", out);
    conv2_.collect(p + ".conv2", "backbone", out);
    bn3_.collect(p + ".bn3", out);
    conv3_.collect(p + ".conv3", "backbone", out);
    if (proj_) proj_->collect(p + ".proj", "backbone", out);
  }

  void buffers(const std::string& p, std::vector<BufferRef>& out) const {
    bn1_.buffers(p + ".bn1", out);
    bn2_.buffers(p + ".bn2", out);
    bn3_.buffers(p + ".bn3", out);
  }

 private:
  MaybeNorm bn1_;
  Conv2d conv1_;
  MaybeNorm bn2_;
  Conv2d conv2_;
  MaybeNorm bn3_;
  Conv2d conv3_;
  std::unique_ptr<Conv2d> proj_;
};

struct Block {
  std::unique_ptr<BasicBlock> basic;
  std::unique_ptr<BottleneckBlock> bottleneck;

  BlockOutput forward(const Tensor& x, bool training) const {
    return basic ? basic->forward(x, training) : bottleneck->forward(x, training);
  }
  void collect(const std::string& p, std::vector<ParamRef>& out) const {
    basic ? basic->collect(p, out) : bottleneck->collect(p, out);
  }
  void buffers(const std::string& p, std::vector<BufferRef>& out) const {
    basic ? basic->buffers(p, out) : bottleneck->buffers(p, out);
  }
};

struct Stage {
  std::vector<Block> blocks;
  std::vector<std::unique_ptr<AttentionModule>> owned;  // one (shared) or one per attended block
  std::vector<std::string> owned_names;
  std::vector<const AttentionModule*> per_block;  // nullptr where no attention
  const AttentionModule* shared = nullptr;
};

}  // namespace detail

class Model {
 public:
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  // Deterministic construction. Backbone and attention parameters draw from
  // independent streams, so attention choices never perturb backbone weights.
  static Model build(const NetworkConfig& config, std::uint64_t seed) {
    config.validate();
    Model m;
    m.config_ = config;
    Rng rng(seed);
    Rng att_rng(Rng::derive(seed, 1));
    const bool norm = config.use_batchnorm;

    m.stem_ = Conv2d(config.input_shape[0], config.stem_channels, 3, 1, false, rng);
    if (config.block_kind == BlockKind::kBasic) m.stem_bn_ = detail::MaybeNorm(config.stem_channels, norm);

    std::size_t in = config.stem_channels;
    for (std::size_t s = 0; s < config.stages.size(); ++s) {
      const StageSpec& spec = config.stages[s];
      detail::Stage stage;
      for (std::size_t b = 0; b < spec.blocks; ++b) {
        const std::size_t stride = b == 0 ? spec.stride : 1;
        detail::Block block;
        if (config.block_kind == BlockKind::kBasic) {
          block.basic = std::make_unique<detail::BasicBlock>(in, spec.channels, stride, norm, rng);
        } else {
          block.bottleneck = std::make_unique<detail::BottleneckBlock>(in, spec.channels, stride, norm, rng);
        }
        stage.blocks.push_back(std::move(block));
        in = config.stage_width(s);
      }

      const std::size_t width = config.stage_width(s);
      stage.per_block.assign(spec.blocks, nullptr);
      if (config.stage_attended(s)) {
        if (config.sharing == Sharing::kSharedPerStage) {
          bool any = false;
          for (std::size_t b = 0; b < spec.blocks; ++b) any = any || config.block_attended(s, b);
          if (any) {
            stage.owned.push_back(make_attention(config.attention, width, att_rng));
            stage.owned_names.push_back("stage" + std::to_string(s) + ".attention");
            stage.shared = stage.owned.back().get();
            for (std::size_t b = 0; b < spec.blocks; ++b) {
              if (config.block_attended(s, b)) stage.per_block[b] = stage.shared;
            }
          }
        } else {
          for (std::size_t b = 0; b < spec.blocks; ++b) {
            if (!config.block_attended(s, b)) continue;
            stage.owned.push_back(make_attention(config.attention, width, att_rng));
            stage.owned_names.push_back("stage" + std::to_string(s) + ".block" + std::to_string(b) +
                                        ".attention");
            stage.per_block[b] = stage.owned.back().get();
          }
        }
      }
      m.stages_.push_back(std::move(stage));
    }

    const std::size_t final_width = config.stage_width(config.stages.size() - 1);
    if (config.block_kind == BlockKind::kBottleneck) m.head_bn_ = detail::MaybeNorm(final_width, norm);
    m.fc_ = FullyConnected(final_width, config.num_classes, true, rng);
    return m;
  }

  const NetworkConfig& config() const { return config_; }

  // batch [B,C,H,W] -> logits [B,num_classes].
  // Eval mode touches no shared state, so concurrent eval calls are safe.
  Tensor forward(const Tensor& batch, Mode mode, const TraceFn& trace = {},
                 const ForwardOptions& options = {}) const {
    if (batch.rank() != 4 || batch.dim(1) != config_.input_shape[0]) {
      throw ShapeError("forward: batch " + shape_str(batch.shape()) + " does not match input channels " +
                       std::to_string(config_.input_shape[0]));
    }
    const bool training = mode == Mode::kTrain;
    Tensor x = stem_.forward(batch);
    if (config_.block_kind == BlockKind::kBasic) x = ops::relu(stem_bn_(x, training));

    StageOptions opts;
    opts.use_skip = config_.use_skip;
    opts.force_unit_attention = options.force_unit_attention;
    opts.masked_policy = config_.masked_policy;
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      const detail::Stage& stage = stages_[s];
      AttentionObserver observer;
      if (trace) {
        observer = [&trace, s](std::size_t b, const Tensor& y, const Tensor& h) { trace(s, b, y, h); };
      }
      x = run_stage([&](std::size_t b, const Tensor& v) { return stage.blocks[b].forward(v, training); },
                    stage.blocks.size(), x, stage.per_block, stage.shared, opts, observer);
      if (options.stage_outputs) options.stage_outputs->push_back(x);
    }
    if (config_.block_kind == BlockKind::kBottleneck) x = ops::relu(head_bn_(x, training));
    return fc_.forward(ops::global_avg_pool(x));
  }

  std::vector<ParamRef> parameters() const {
    std::vector<ParamRef> out;
    stem_.collect("stem.conv", "backbone", out);
    stem_bn_.collect("stem.bn", out);
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      const auto& stage = stages_[s];
      for (std::size_t b = 0; b < stage.blocks.size(); ++b) {
        stage.blocks[b].collect("stage" + std::to_string(s) + ".block" + std::to_string(b), out);
      }
      for (std::size_t k = 0; k < stage.owned.size(); ++k) stage.owned[k]->collect(stage.owned_names[k], out);
    }
    head_bn_.collect("head.bn", out);
    fc_.collect("head.fc", "backbone", out);
    return out;
  }

  // Attention parameters referenced at each attended position (duplicates
  // under sharing), for parameter-identity checks.
  std::vector<ParamRef> attention_references(std::size_t stage) const {
    std::vector<ParamRef> out;
    for (const AttentionModule* m : stages_.at(stage).per_block) {
      if (m) m->collect("ref", out);
    }
    return out;
  }

  std::vector<BufferRef> buffers() {
    std::vector<BufferRef> out;
    stem_bn_.buffers("stem.bn", out);
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      for (std::size_t b = 0; b < stages_[s].blocks.size(); ++b) {
        stages_[s].blocks[b].buffers("stage" + std::to_string(s) + ".block" + std::to_string(b), out);
      }
    }
    head_bn_.buffers("head.bn", out);
    return out;
  }

  FullyConnected& classifier() { return fc_; }
  const AttentionModule* attention_at(std::size_t stage, std::size_t block) const {
    return stages_.at(stage).per_block.at(block);
  }

  void zero_grad() {
    for (auto& p : parameters()) p.tensor.zero_grad();
  }

 private:
  Model() = default;

  NetworkConfig config_;
  Conv2d stem_;
  detail::MaybeNorm stem_bn_;
  std::vector<detail::Stage> stages_;
  detail::MaybeNorm head_bn_;
  FullyConnected fc_;
};

}  // namespace dia
