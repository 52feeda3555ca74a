#pragma once

#include <cstdlib>
#include <sstream>
#include <string>
#include <vector>

#include "dia/checkpoint.hpp"
#include "dia/dataset.hpp"
#include "dia/forest.hpp"
#include "dia/network.hpp"
#include "dia/train.hpp"

namespace dia {

struct ConfigKey {
  std::string section, key, default_value, doc;
  std::string dotted() const { return section + "." + key; }
};

inline const std::vector<ConfigKey>& config_schema() {
  static const std::vector<ConfigKey> schema = {
      {"model", "arch", "tiny-dia", "named architecture (resnet83|resnet164|resnet245|resnet407|resnet56-basic|tiny-dia)"},
      {"model", "attention", "dia-lstm", "attention module (none|se|eca|dia-lstm)"},
      {"model", "sharing", "shared", "attention sharing (shared|per-block)"},
      {"model", "cell", "modified", "DIA-LSTM cell variant (standard|modified|light)"},
      {"model", "r", "4", "DIA-LSTM reduction ratio"},
      {"model", "output_activation", "sigmoid", "DIA-LSTM output activation (sigmoid|tanh|relu)"},
      {"model", "stack_depth", "1", "stacked DIA-LSTM cells"},
      {"model", "se_reduction", "4", "SE bottleneck reduction"},
      {"model", "eca_kernel", "3", "ECA kernel size (odd)"},
      {"model", "block_mask", "", "comma-separated 0/1 per block across stages; empty = all blocks"},
      {"model", "stage_mask", "", "comma-separated 0/1 per stage; empty = all stages"},
      {"model", "masked_policy", "freeze", "shared unit at masked blocks (freeze|advance)"},
      {"model", "use_skip", "true", "identity/projection skip connections"},
      {"model", "use_batchnorm", "true", "batch normalization layers"},
      {"model", "num_classes", "0", "classifier outputs; 0 = number of dataset classes"},
      {"data", "source", "synthetic", "dataset source (synthetic|cifar10)"},
      {"data", "path", "", "CIFAR-10 binary training file (required for cifar10)"},
      {"data", "eval_path", "", "CIFAR-10 binary evaluation file; empty = hold out eval_fraction"},
      {"data", "eval_fraction", "0.1", "held-out share when eval_path is empty"},
      {"data", "classes", "4", "synthetic classes"},
      {"data", "count", "2048", "synthetic training samples"},
      {"data", "eval_count", "512", "synthetic evaluation samples"},
      {"data", "height", "16", "synthetic image height"},
      {"data", "width", "16", "synthetic image width"},
      {"data", "seed", "1", "synthetic generator seed"},
      {"train", "epochs", "30", "training epochs"},
      {"train", "batch_size", "64", "mini-batch size"},
      {"train", "lr", "0.1", "initial learning rate"},
      {"train", "milestones", "", "comma-separated 1-based epochs where lr decays; empty = after 50% and 75%"},
      {"train", "lr_factor", "0.1", "lr multiplier at each milestone"},
      {"train", "momentum", "0.9", "SGD momentum"},
      {"train", "weight_decay", "0.0001", "L2 weight decay"},
      {"train", "seed", "0", "initialization and shuffling seed (DIA_SEED applies when unset)"},
      {"train", "augment", "true", "pad-4 random crop and horizontal flip"},
      {"train", "shuffle", "true", "reshuffle samples every epoch"},
      {"output", "dir", "runs/default", "output directory"},
      {"analysis", "samples", "256", "evaluation samples traced for analyses"},
      {"analysis", "trees", "100", "random forest trees"},
      {"analysis", "max_depth", "8", "random forest maximum depth"},
      {"analysis", "min_leaf", "2", "random forest minimum samples per leaf"},
      {"analysis", "max_features", "all", "candidate features per split (all|sqrt|count)"},
      {"analysis", "forest_seed", "0", "random forest seed"},
      {"analysis", "grad_epochs", "5", "training epochs observed by the gradient analysis"},
      {"analysis", "scatter_pairs", "0-1,0-2", "block pairs exported as scatter data (stage 0)"},
      {"gradcheck", "samples", "64", "random parameter coordinates checked"},
      {"gradcheck", "batch", "2", "batch size of the checked forward pass"},
      {"gradcheck", "step", "1e-5", "relative central-difference step: h = step * (1 + |x|)"},
      {"gradcheck", "tolerance", "1e-4", "maximum allowed relative error"},
      {"gradcheck", "seed", "0", "coordinate and input seed"},
  };
  return schema;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  if (trim(s).empty()) return parts;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, sep)) parts.push_back(trim(item));
  return parts;
}

// Sectioned key=value configuration:
//   # comment
//   [section]
//   key = value
// Every key must appear in the schema. Values set by a file or an override
// are marked explicit; the rest keep their schema defaults.
class RunConfig {
 public:
  RunConfig() {
    for (const auto& k : config_schema()) values_.push_back({k.dotted(), k.default_value, false});
  }

  static RunConfig parse(const std::string& text, const std::string& source = "<config>") {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line, section;
    for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      const std::string where = source + ":" + std::to_string(lineno);
      if (line.front() == '[') {
        if (line.back() != ']') throw ConfigError(where + ": malformed section header");
        section = trim(line.substr(1, line.size() - 2));
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
      if (section.empty()) throw ConfigError(where + ": key outside of a [section]");
      const std::string key = section + "." + trim(line.substr(0, eq));
      if (!cfg.slot(key)) throw ConfigError(where + ": unknown key '" + key + "'");
      cfg.set(key, trim(line.substr(eq + 1)));
    }
    return cfg;
  }

  static RunConfig load(const std::string& path) {
    const auto bytes = read_file_bytes(path);
    return parse(std::string(bytes.begin(), bytes.end()), path);
  }

  void set(const std::string& key, const std::string& value) {
    Slot* s = slot(key);
    if (!s) throw ConfigError("unknown key '" + key + "'");
    s->value = value;
    s->explicit_value = true;
  }

  // "section.key=value"
  void apply_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not section.key=value");
    set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
  }

  // DIA_SEED is the last-resort seed: used only when train.seed was not set.
  void apply_env_seed(const char* env = std::getenv("DIA_SEED")) {
    if (!env || is_explicit("train.seed")) return;
    Slot* s = slot("train.seed");
    s->value = env;
    (void)get_u64("train.seed");
  }

  bool is_explicit(const std::string& key) const { return cslot(key).explicit_value; }
  const std::string& get(const std::string& key) const { return cslot(key).value; }

  double get_double(const std::string& key) const {
    const std::string& v = get(key);
    char* end = nullptr;
    const double d = std::strtod(v.c_str(), &end);
    if (v.empty() || *end != '\0') throw ConfigError(key + ": expected a number, got '" + v + "'");
    return d;
  }

  std::uint64_t get_u64(const std::string& key) const {
    const std::string& v = get(key);
    char* end = nullptr;
    if (v.empty() || v.front() == '-') throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
    const unsigned long long n = std::strtoull(v.c_str(), &end, 10);
    if (*end != '\0') throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
    return n;
  }

  std::size_t get_size(const std::string& key) const { return static_cast<std::size_t>(get_u64(key)); }

  bool get_bool(const std::string& key) const {
    const std::string& v = get(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError(key + ": expected true or false, got '" + v + "'");
  }

  std::vector<std::size_t> get_size_list(const std::string& key) const {
    std::vector<std::size_t> out;
    for (const auto& item : split(get(key), ',')) {
      char* end = nullptr;
      const unsigned long long n = std::strtoull(item.c_str(), &end, 10);
      if (item.empty() || item.front() == '-' || *end != '\0') {
        throw ConfigError(key + ": expected comma-separated integers, got '" + get(key) + "'");
      }
      out.push_back(static_cast<std::size_t>(n));
    }
    return out;
  }

  std::vector<bool> get_mask(const std::string& key) const {
    std::vector<bool> out;
    for (std::size_t v : get_size_list(key)) {
      if (v > 1) throw ConfigError(key + ": mask entries must be 0 or 1");
      out.push_back(v == 1);
    }
    return out;
  }

  // Fully resolved configuration in the file grammar, schema order.
  std::string resolved_text() const {
    std::ostringstream out;
    std::string section;
    for (const auto& k : config_schema()) {
      if (k.section != section) {
        if (!section.empty()) out << '\n';
        section = k.section;
        out << '[' << section << "]\n";
      }
      out << k.key << " = " << get(k.dotted()) << '\n';
    }
    return out.str();
  }

  Metadata flatten() const {
    Metadata m;
    for (const auto& s : values_) m.emplace_back("config." + s.key, s.value);
    return m;
  }

  static RunConfig from_metadata(const Metadata& meta) {
    RunConfig cfg;
    for (const auto& [k, v] : meta) {
      if (k.rfind("config.", 0) == 0) cfg.set(k.substr(7), v);
    }
    return cfg;
  }

 private:
  struct Slot {
    std::string key, value;
    bool explicit_value;
  };

  Slot* slot(const std::string& key) {
    for (auto& s : values_) {
      if (s.key == key) return &s;
    }
    return nullptr;
  }
  const Slot& cslot(const std::string& key) const {
    for (const auto& s : values_) {
      if (s.key == key) return s;
    }
    throw ConfigError("unknown key '" + key + "'");
  }

  std::vector<Slot> values_;
};

inline SamKind attention_from_config(const RunConfig& rc) {
  const std::string& kind = rc.get("model.attention");
  if (kind == "none") return NoAttention{};
  if (kind == "se") return SeSpec{rc.get_size("model.se_reduction")};
  if (kind == "eca") return EcaSpec{rc.get_size("model.eca_kernel")};
  if (kind != "dia-lstm") throw ConfigError("model.attention: unknown module '" + kind + "'");
  DiaLstmSpec spec;
  const std::string& cell = rc.get("model.cell");
  if (cell == "standard") {
    spec.variant = CellVariant::kStandard;
  } else if (cell == "modified") {
    spec.variant = CellVariant::kModified;
  } else if (cell == "light") {
    spec.variant = CellVariant::kLight;
  } else {
    throw ConfigError("model.cell: unknown variant '" + cell + "'");
  }
  spec.r = rc.get_size("model.r");
  const std::string& act = rc.get("model.output_activation");
  if (act == "sigmoid") {
    spec.output_activation = OutputActivation::kSigmoid;
  } else if (act == "tanh") {
    spec.output_activation = OutputActivation::kTanh;
  } else if (act == "relu") {
    spec.output_activation = OutputActivation::kRelu;
  } else {
    throw ConfigError("model.output_activation: unknown activation '" + act + "'");
  }
  spec.stack_depth = rc.get_size("model.stack_depth");
  return spec;
}

// `dataset_classes` fills num_classes when the config leaves it at 0.
inline NetworkConfig network_from_config(const RunConfig& rc, std::size_t dataset_classes = 0) {
  NetworkConfig c = named_config(rc.get("model.arch"));
  c.attention = attention_from_config(rc);
  const std::string& sharing = rc.get("model.sharing");
  if (sharing == "shared") {
    c.sharing = Sharing::kSharedPerStage;
  } else if (sharing == "per-block") {
    c.sharing = Sharing::kPerBlock;
  } else {
    throw ConfigError("model.sharing: unknown value '" + sharing + "'");
  }
  c.attention_block_mask = rc.get_mask("model.block_mask");
  c.attention_stage_mask = rc.get_mask("model.stage_mask");
  const std::string& policy = rc.get("model.masked_policy");
  if (policy == "freeze") {
    c.masked_policy = MaskedBlockPolicy::kFreezeState;
  } else if (policy == "advance") {
    c.masked_policy = MaskedBlockPolicy::kAdvanceState;
  } else {
    throw ConfigError("model.masked_policy: unknown value '" + policy + "'");
  }
  c.use_skip = rc.get_bool("model.use_skip");
  c.use_batchnorm = rc.get_bool("model.use_batchnorm");
  const std::size_t classes = rc.get_size("model.num_classes");
  if (classes != 0) {
    c.num_classes = classes;
  } else if (dataset_classes != 0) {
    c.num_classes = dataset_classes;
  }
  c.validate();
  return c;
}

inline TrainConfig train_from_config(const RunConfig& rc) {
  TrainConfig t;
  t.epochs = rc.get_size("train.epochs");
  t.batch_size = rc.get_size("train.batch_size");
  t.lr = rc.get_double("train.lr");
  t.milestones = rc.get_size_list("train.milestones");
  t.lr_factor = rc.get_double("train.lr_factor");
  t.momentum = rc.get_double("train.momentum");
  t.weight_decay = rc.get_double("train.weight_decay");
  t.seed = rc.get_u64("train.seed");
  t.augment = rc.get_bool("train.augment");
  t.shuffle = rc.get_bool("train.shuffle");
  t.validate();
  return t;
}

inline ForestConfig forest_from_config(const RunConfig& rc) {
  ForestConfig f;
  f.n_trees = rc.get_size("analysis.trees");
  f.max_depth = rc.get_size("analysis.max_depth");
  f.min_samples_leaf = rc.get_size("analysis.min_leaf");
  f.seed = rc.get_u64("analysis.forest_seed");
  const std::string mf = rc.get("analysis.max_features");
  if (mf == "all") {
    f.max_features = 0;
  } else if (mf == "sqrt") {
    f.max_features = ForestConfig::kSqrtFeatures;
  } else {
    f.max_features = rc.get_size("analysis.max_features");
    if (f.max_features == 0) throw ConfigError("analysis.max_features: must be all, sqrt or a positive count");
  }
  if (f.n_trees == 0) throw ConfigError("analysis.trees: must be positive");
  if (f.min_samples_leaf == 0) throw ConfigError("analysis.min_leaf: must be positive");
  return f;
}

struct DataSplits {
  Dataset train, eval;
};

inline DataSplits datasets_from_config(const RunConfig& rc) {
  const std::string& source = rc.get("data.source");
  if (source == "synthetic") {
    SynthSpec spec;
    spec.classes = rc.get_size("data.classes");
    spec.count = rc.get_size("data.count");
    spec.height = rc.get_size("data.height");
    spec.width = rc.get_size("data.width");
    spec.seed = rc.get_u64("data.seed");
    DataSplits d;
    d.train = synth_generate(spec);
    spec.count = rc.get_size("data.eval_count");
    spec.seed = Rng::derive(spec.seed, 1);
    d.eval = synth_generate(spec);
    return d;
  }
  if (source != "cifar10") throw ConfigError("data.source: unknown source '" + source + "'");
  const std::string& path = rc.get("data.path");
  if (path.empty()) throw ConfigError("data.path: required when data.source = cifar10");
  Dataset all = load_cifar10_binary(path);
  if (!rc.get("data.eval_path").empty()) return {std::move(all), load_cifar10_binary(rc.get("data.eval_path"))};
  auto [train, eval] = split_holdout(all, rc.get_double("data.eval_fraction"), rc.get_u64("data.seed"));
  return {std::move(train), std::move(eval)};
}

}  // namespace dia
