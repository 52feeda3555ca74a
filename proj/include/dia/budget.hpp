#pragma once

#include <cmath>
#include <sstream>

#include "dia/network.hpp"
#include "dia/train.hpp"

namespace dia {

struct StageBudget {
  std::size_t stage = 0;
  std::size_t attended_blocks = 0;
  std::size_t per_block = 0;  // attention weights with one module per attended block
  std::size_t shared = 0;     // attention weights with one module per stage
};

struct BudgetComparison {
  std::string arch;
  std::size_t backbone_weights = 0;  // weight-only
  std::size_t backbone_extras = 0;   // biases + normalization affine
  std::vector<StageBudget> stages;
  std::size_t per_block = 0, shared = 0;

  // Share of per-block attention weights removed by sharing, in percent.
  double reduction_percent() const {
    return per_block == 0 ? 0.0 : 100.0 * (1.0 - static_cast<double>(shared) / static_cast<double>(per_block));
  }

  std::string to_csv() const {
    std::ostringstream out;
    out << "stage,attended_blocks,per_block_weights,shared_weights,reduction_percent\n";
    for (const auto& s : stages) {
      const double r = s.per_block == 0 ? 0.0 : 100.0 * (1.0 - static_cast<double>(s.shared) / static_cast<double>(s.per_block));
      out << s.stage << ',' << s.attended_blocks << ',' << s.per_block << ',' << s.shared << ',' << format_double(r) << '\n';
    }
    std::size_t attended = 0;
    for (const auto& s : stages) attended += s.attended_blocks;
    out << "total," << attended << ',' << per_block << ',' << shared << ',' << format_double(reduction_percent()) << '\n';
    return out.str();
  }
};

namespace detail {

inline std::size_t stage_attention_weights(const Model& m, std::size_t stage) {
  std::vector<ParamRef> refs;
  for (const auto& p : m.parameters()) {
    if (p.component == "attention" && p.name.rfind("stage" + std::to_string(stage) + ".", 0) == 0) refs.push_back(p);
  }
  return count_weights(refs).weights("attention");
}

}  // namespace detail

// Compares attention weight counts with one module per block against one
// shared module per stage.
inline BudgetComparison budget_report(NetworkConfig config) {
  config.sharing = Sharing::kSharedPerStage;
  BudgetComparison cmp;
  cmp.arch = config.name;
  const Model shared = Model::build(config, 0);
  const ParamBudget budget = count_weights(shared.parameters());
  cmp.backbone_weights = budget.weights("backbone");
  cmp.backbone_extras = budget.extras("backbone");

  NetworkConfig per = config;
  per.sharing = Sharing::kPerBlock;
  const Model unshared = Model::build(per, 0);
  for (std::size_t s = 0; s < config.stages.size(); ++s) {
    StageBudget sb;
    sb.stage = s;
    for (std::size_t b = 0; b < config.stages[s].blocks; ++b) sb.attended_blocks += config.block_attended(s, b);
    sb.shared = detail::stage_attention_weights(shared, s);
    sb.per_block = detail::stage_attention_weights(unshared, s);
    cmp.per_block += sb.per_block;
    cmp.shared += sb.shared;
    cmp.stages.push_back(sb);
  }
  return cmp;
}

}  // namespace dia
