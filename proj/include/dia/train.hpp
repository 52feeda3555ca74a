#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <sstream>
#include <thread>
#include <unordered_map>

#include "dia/dataset.hpp"
#include "dia/network.hpp"

namespace dia {

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 128;
  double lr = 0.1;
  std::vector<std::size_t> milestones;  // 1-based epochs from which lr decays; empty = after 50% and 75%
  double lr_factor = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
  bool augment = true;
  bool shuffle = true;
  std::size_t eval_threads = 1;
  double loss_scale = 1.0;  // multiplies the loss before backward (analysis hook)

  void validate() const {
    if (batch_size == 0) throw ConfigError("train: batch_size must be positive");
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("train: lr must be finite and >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train: momentum must be in [0,1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("train: weight_decay must be >= 0");
    if (!(lr_factor > 0.0)) throw ConfigError("train: lr_factor must be positive");
  }

  std::vector<std::size_t> resolved_milestones() const {
    if (!milestones.empty()) return milestones;
    return {(epochs + 1) / 2 + 1, (epochs * 3 + 3) / 4 + 1};
  }

  // Learning rate used during `epoch` (1-based).
  double lr_at(std::size_t epoch) const {
    double value = lr;
    for (std::size_t m : resolved_milestones()) {
      if (epoch >= m) value *= lr_factor;
    }
    return value;
  }
};

struct EpochMetrics {
  std::size_t epoch = 0;  // 0 = the untrained model
  double train_loss = 0.0;
  double train_acc = 0.0;
  double eval_acc = 0.0;
  double lr = 0.0;
  std::string status = "ok";
};

inline constexpr const char* kMetricsHeader = "epoch,train_loss,train_acc,eval_acc,lr,status";

// Shortest round-trip decimal for a double.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  for (int precision = 1; precision <= 17; ++precision) {
    std::snprintf(buf, sizeof(buf), "%.*g", precision, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

inline std::string metrics_csv(const std::vector<EpochMetrics>& log) {
  std::ostringstream out;
  out << kMetricsHeader << '\n';
  for (const auto& m : log) {
    out << m.epoch << ',' << format_double(m.train_loss) << ',' << format_double(m.train_acc) << ','
        << format_double(m.eval_acc) << ',' << format_double(m.lr) << ',' << m.status << '\n';
  }
  return out.str();
}

struct TrainResult {
  std::vector<EpochMetrics> log;
  std::string status = "ok";
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

// SGD with momentum and coupled weight decay:
//   buf <- momentum * buf + (g + wd * w);  w <- w - lr * buf.
class Sgd {
 public:
  Sgd(std::vector<ParamRef> params, double momentum, double weight_decay)
      : momentum_(momentum), weight_decay_(weight_decay) {
    std::unordered_map<const void*, bool> seen;
    for (auto& p : params) {
      if (seen.emplace(p.tensor.id(), true).second) params_.push_back(p.tensor);
    }
    buffers_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) buffers_[i].assign(params_[i].numel(), 0.0);
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step(double lr) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor& p = params_[i];
      if (!p.has_grad()) continue;
      auto w = p.data();
      auto g = p.grad();
      auto& buf = buffers_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        buf[j] = momentum_ * buf[j] + (g[j] + weight_decay_ * w[j]);
        w[j] -= lr * buf[j];
      }
    }
  }

  const std::vector<std::vector<double>>& buffers() const { return buffers_; }

 private:
  double momentum_, weight_decay_;
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> buffers_;
};

// Pad-4 random crop plus horizontal flip, applied to the raw bytes (zero
// padding) before normalization.
inline Tensor augmented_batch(const Dataset& d, std::span<const std::size_t> indices, Rng& rng) {
  constexpr long kPad = 4;
  const std::size_t C = d.channels, H = d.height, W = d.width, plane = H * W;
  Tensor out({indices.size(), C, H, W});
  auto dst = out.data();
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const long dy = static_cast<long>(rng.below(2 * kPad + 1)) - kPad;
    const long dx = static_cast<long>(rng.below(2 * kPad + 1)) - kPad;
    const bool flip = rng.below(2) == 1;
    auto src = d.image(indices[b]);
    for (std::size_t c = 0; c < C; ++c) {
      const double m = d.mean[c], inv = 1.0 / d.stddev[c];
      for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
          const long sy = static_cast<long>(y) + dy;
          const long sx0 = static_cast<long>(flip ? W - 1 - x : x) + dx;
          double byte = 0.0;
          if (sy >= 0 && sy < static_cast<long>(H) && sx0 >= 0 && sx0 < static_cast<long>(W)) {
            byte = src[c * plane + static_cast<std::size_t>(sy) * W + static_cast<std::size_t>(sx0)];
          }
          dst[(b * C + c) * plane + y * W + x] = (byte / 255.0 - m) * inv;
        }
      }
    }
  }
  return out;
}

struct EvalResult {
  double accuracy = 0.0;
  double mean_loss = 0.0;
  std::size_t count = 0;
};

// Argmax with ties resolved to the lowest class index.
inline std::size_t argmax_row(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < row.size(); ++k) {
    if (row[k] > row[best]) best = k;
  }
  return best;
}

inline double cross_entropy_row(std::span<const double> row, std::size_t label) {
  double mx = row[0];
  for (double v : row) mx = std::max(mx, v);
  double s = 0.0;
  for (double v : row) s += std::exp(v - mx);
  return std::log(s) + mx - row[label];
}

// Eval-mode accuracy and mean cross-entropy. Batches may be spread over
// `threads` workers; per-batch tallies are merged in batch order so the result
// does not depend on the worker count.
inline EvalResult evaluate(const Model& model, const Dataset& data, std::size_t batch_size = 256,
                           std::size_t threads = 1) {
  EvalResult result;
  if (data.empty()) return result;
  batch_size = std::max<std::size_t>(1, batch_size);
  const std::size_t batches = (data.size() + batch_size - 1) / batch_size;
  std::vector<std::size_t> correct(batches, 0);
  std::vector<double> loss(batches, 0.0);
  std::vector<std::exception_ptr> errors(batches);

  auto run_batch = [&](std::size_t k) {
    try {
      NoGradGuard guard;
      const std::size_t begin = k * batch_size, end = std::min(data.size(), begin + batch_size);
      std::vector<std::size_t> idx(end - begin);
      for (std::size_t i = begin; i < end; ++i) idx[i - begin] = i;
      Tensor logits = model.forward(data.batch(idx), Mode::kEval);
      const std::size_t K = logits.dim(1);
      double sum = 0.0;
      for (std::size_t r = 0; r < idx.size(); ++r) {
        std::span<const double> row(logits.data().data() + r * K, K);
        if (argmax_row(row) == data.labels[idx[r]]) ++correct[k];
        sum += cross_entropy_row(row, data.labels[idx[r]]);
      }
      loss[k] = sum;
    } catch (...) {
      errors[k] = std::current_exception();
    }
  };

  threads = std::clamp<std::size_t>(threads, 1, batches);
  if (threads == 1) {
    for (std::size_t k = 0; k < batches; ++k) run_batch(k);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < threads; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t k = w; k < batches; k += threads) run_batch(k);
      });
    }
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  std::size_t total_correct = 0;
  double total_loss = 0.0;
  for (std::size_t k = 0; k < batches; ++k) {
    total_correct += correct[k];
    total_loss += loss[k];
  }
  result.count = data.size();
  result.accuracy = static_cast<double>(total_correct) / static_cast<double>(data.size());
  result.mean_loss = total_loss / static_cast<double>(data.size());
  return result;
}

// Rounds parameters and normalization buffers to 32-bit precision, the
// checkpoint storage precision, so a saved-and-reloaded model evaluates
// identically to the live one.
inline void quantize_to_storage_precision(Model& model) {
  for (auto& p : model.parameters()) {
    for (double& v : p.tensor.data()) v = static_cast<double>(static_cast<float>(v));
  }
  for (auto& b : model.buffers()) {
    for (double& v : *b.values) v = static_cast<double>(static_cast<float>(v));
  }
}

inline Tensor loss_scale_applied(const Tensor& loss, double scale) {
  return scale == 1.0 ? loss : ops::scale(loss, scale);
}

struct StepInfo {
  std::size_t epoch, step;
  const std::vector<Tensor>& stage_outputs;  // gradients populated
};
using StepObserver = std::function<void(const StepInfo&)>;

// Trains in place. Epoch 0 of the log describes the untrained model (eval
// mode over the training set). A non-finite loss or numeric overflow ends
// training with status "nan" recorded in the last row; the process carries on.
// The final model is rounded to storage precision.
inline TrainResult train(Model& model, const Dataset& data, const Dataset* eval_data, const TrainConfig& cfg,
                         const StepObserver& observer = {}) {
  cfg.validate();
  data.validate();
  if (data.empty()) throw ConfigError("train: dataset is empty");
  if (data.num_classes > model.config().num_classes) {
    throw ConfigError("train: dataset has " + std::to_string(data.num_classes) + " classes but the model outputs " +
                      std::to_string(model.config().num_classes));
  }
  if (data.channels != model.config().input_shape[0]) {
    throw ConfigError("train: dataset channels do not match network input");
  }
  const Dataset& eval_set = eval_data ? *eval_data : data;

  TrainResult result;
  const EvalResult init = evaluate(model, data, cfg.batch_size, cfg.eval_threads);
  result.initial_loss = init.mean_loss;
  result.log.push_back({0, init.mean_loss, init.accuracy,
                        evaluate(model, eval_set, cfg.batch_size, cfg.eval_threads).accuracy, cfg.lr_at(1), "ok"});

  Sgd sgd(model.parameters(), cfg.momentum, cfg.weight_decay);
  Rng order_rng(Rng::derive(cfg.seed, 11));
  Rng aug_rng(Rng::derive(cfg.seed, 12));
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::vector<Tensor> stage_outputs;
  ForwardOptions fwd;
  if (observer) fwd.stage_outputs = &stage_outputs;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double lr = cfg.lr_at(epoch);
    if (cfg.shuffle) {
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[order_rng.below(i)]);
    }
    double loss_sum = 0.0;
    std::size_t correct = 0, seen = 0, step = 0;
    bool failed = false;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size, ++step) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      std::span<const std::size_t> idx(order.data() + begin, end - begin);
      std::vector<int> labels(idx.size());
      for (std::size_t r = 0; r < idx.size(); ++r) labels[r] = data.labels[idx[r]];
      try {
        Tensor x = cfg.augment ? augmented_batch(data, idx, aug_rng) : data.batch(idx);
        stage_outputs.clear();
        sgd.zero_grad();
        Tensor logits = model.forward(x, Mode::kTrain, {}, fwd);
        Tensor loss = ops::softmax_cross_entropy(logits, labels);
        const double value = loss.item();
        if (!std::isfinite(value)) throw NumericError("softmax_cross_entropy", "non-finite loss");
        const std::size_t K = logits.dim(1);
        for (std::size_t r = 0; r < idx.size(); ++r) {
          if (argmax_row({logits.data().data() + r * K, K}) == static_cast<std::size_t>(labels[r])) ++correct;
        }
        backward(loss_scale_applied(loss, cfg.loss_scale));
        if (observer) observer({epoch, step, stage_outputs});
        sgd.step(lr);
        loss_sum += value * static_cast<double>(idx.size());
        seen += idx.size();
      } catch (const NumericError&) {
        Graph::current().clear();
        failed = true;
        break;
      }
    }
    EpochMetrics m;
    m.epoch = epoch;
    m.lr = lr;
    if (failed) {
      m.train_loss = std::numeric_limits<double>::quiet_NaN();
      m.train_acc = seen ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0;
      m.eval_acc = std::numeric_limits<double>::quiet_NaN();
      m.status = "nan";
      result.log.push_back(m);
      result.status = "nan";
      result.final_loss = m.train_loss;
      return result;
    }
    m.train_loss = loss_sum / static_cast<double>(seen);
    m.train_acc = static_cast<double>(correct) / static_cast<double>(seen);
    try {
      m.eval_acc = evaluate(model, eval_set, cfg.batch_size, cfg.eval_threads).accuracy;
    } catch (const NumericError&) {
      m.eval_acc = std::numeric_limits<double>::quiet_NaN();
      m.status = "nan";
      result.log.push_back(m);
      result.status = "nan";
      result.final_loss = m.train_loss;
      return result;
    }
    result.log.push_back(m);
    result.final_loss = m.train_loss;
  }
  quantize_to_storage_precision(model);
  return result;
}

}  // namespace dia
