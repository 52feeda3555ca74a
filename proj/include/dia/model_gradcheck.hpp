#pragma once

#include <set>

#include "dia/gradcheck.hpp"
#include "dia/network.hpp"

namespace dia {

struct ModelGradcheckConfig {
  std::size_t samples = 64;  // parameter coordinates checked
  std::size_t batch = 2;
  std::size_t height = 8, width = 8;
  double step = 1e-5;  // relative: h = step * (1 + |x|)
  double tolerance = 1e-4;
  std::uint64_t seed = 0;
  // Test hook: analytic gradients are multiplied by (1 + corrupt) before comparison.
  double corrupt = 0.0;
};

struct GradcheckEntry {
  std::string param;
  std::size_t index = 0;
  double analytic = 0.0, numeric = 0.0, rel_error = 0.0;
};

struct ModelGradcheckResult {
  std::vector<GradcheckEntry> entries;
  double max_rel_error = 0.0;
  bool passed = true;
};

// Backward against central differences of the train-mode cross-entropy loss
// on `samples` distinct parameter coordinates drawn uniformly over all
// parameter entries.
inline ModelGradcheckResult gradcheck_model(Model& model, const ModelGradcheckConfig& cfg) {
  const NetworkConfig& net = model.config();
  Rng rng(cfg.seed);
  Tensor x({cfg.batch, net.input_shape[0], cfg.height, cfg.width});
  for (double& v : x.data()) v = rng.normal();
  std::vector<int> labels(cfg.batch);
  for (int& l : labels) l = static_cast<int>(rng.below(net.num_classes));

  auto loss_value = [&] { return ops::softmax_cross_entropy(model.forward(x, Mode::kTrain), labels)[0]; };
  model.zero_grad();
  backward(ops::softmax_cross_entropy(model.forward(x, Mode::kTrain), labels));

  std::vector<ParamRef> params = model.parameters();
  std::vector<std::size_t> offsets;
  std::size_t total = 0;
  for (const auto& p : params) {
    offsets.push_back(total);
    total += p.tensor.numel();
  }
  std::set<std::size_t> picks;
  while (picks.size() < std::min(cfg.samples, total)) picks.insert(rng.below(total));

  ModelGradcheckResult result;
  for (std::size_t flat : picks) {
    const std::size_t k = static_cast<std::size_t>(std::upper_bound(offsets.begin(), offsets.end(), flat) - offsets.begin()) - 1;
    GradcheckEntry e;
    e.param = params[k].name;
    e.index = flat - offsets[k];
    e.analytic = (params[k].tensor.has_grad() ? params[k].tensor.grad()[e.index] : 0.0) * (1.0 + cfg.corrupt);
    e.numeric = finite_difference_at(loss_value, params[k].tensor, e.index, cfg.step, StepMode::kRelative);
    e.rel_error = relative_error(e.analytic, e.numeric);
    result.max_rel_error = std::max(result.max_rel_error, e.rel_error);
    result.entries.push_back(e);
  }
  result.passed = result.max_rel_error <= cfg.tolerance;
  return result;
}

}  // namespace dia
