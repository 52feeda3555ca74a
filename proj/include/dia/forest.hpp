#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <sstream>
#include <thread>
#include <vector>

#include "dia/error.hpp"
#include "dia/rng.hpp"
#include "dia/trace.hpp"

namespace dia {

struct ForestConfig {
  std::size_t n_trees = 100;
  std::size_t max_depth = 8;
  std::size_t min_samples_leaf = 2;
  // Candidate features per split: 0 = all d, kSqrtFeatures = floor(sqrt(d)).
  // With sqrt(d) draws a single relevant column among d is missed at most
  // nodes and chance splits soak up a large share of the importance.
  static constexpr std::size_t kSqrtFeatures = static_cast<std::size_t>(-1);
  std::size_t max_features = 0;
  bool bootstrap = true;
  std::uint64_t seed = 0;

  std::size_t features_per_split(std::size_t d) const {
    if (max_features == kSqrtFeatures) {
      return std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(std::sqrt(static_cast<double>(d)))));
    }
    if (max_features != 0) return std::min(max_features, d);
    return d;
  }
};

// Row-major [rows, cols] view.
struct MatrixView {
  const double* data;
  std::size_t rows, cols;
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

// Axis-aligned regression tree grown by greedy variance reduction. The
// importance of a split is the drop in summed squared error it achieves.
class RegressionTree {
 public:
  void fit(const MatrixView& x, std::span<const double> y, std::vector<std::size_t> rows, const ForestConfig& cfg,
           Rng& rng, std::vector<double>& importance) {
    nodes_.clear();
    std::vector<std::size_t> features(x.cols);
    std::iota(features.begin(), features.end(), std::size_t{0});
    grow(x, y, rows, 0, cfg, rng, features, importance);
  }

  double predict(std::span<const double> row) const {
    std::size_t n = 0;
    while (nodes_[n].feature != kLeaf) n = row[nodes_[n].feature] <= nodes_[n].threshold ? nodes_[n].left : nodes_[n].right;
    return nodes_[n].value;
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  static constexpr std::size_t kLeaf = static_cast<std::size_t>(-1);
  struct Node {
    std::size_t feature = kLeaf;
    double threshold = 0.0;
    std::size_t left = 0, right = 0;
    double value = 0.0;
  };

  std::size_t grow(const MatrixView& x, std::span<const double> y, std::vector<std::size_t>& rows, std::size_t depth,
                   const ForestConfig& cfg, Rng& rng, std::vector<std::size_t>& features,
                   std::vector<double>& importance) {
    const std::size_t id = nodes_.size();
    nodes_.emplace_back();
    const std::size_t n = rows.size();
    double sum = 0.0, sq = 0.0;
    for (std::size_t r : rows) {
      sum += y[r];
      sq += y[r] * y[r];
    }
    const double mean = sum / static_cast<double>(n);
    nodes_[id].value = mean;
    double sse = 0.0;
    for (std::size_t r : rows) sse += (y[r] - mean) * (y[r] - mean);
    if (depth >= cfg.max_depth || n < 2 * cfg.min_samples_leaf || sse <= 0.0) return id;

    // Partial Fisher-Yates draws the candidate features for this node.
    const std::size_t m = cfg.features_per_split(features.size());
    for (std::size_t i = 0; i < m; ++i) std::swap(features[i], features[i + rng.below(features.size() - i)]);

    double best_gain = 0.0, best_threshold = 0.0;
    std::size_t best_feature = kLeaf;
    std::vector<std::size_t> sorted(rows);
    for (std::size_t fi = 0; fi < m; ++fi) {
      const std::size_t f = features[fi];
      std::sort(sorted.begin(), sorted.end(), [&](std::size_t a, std::size_t b) {
        const double va = x(a, f), vb = x(b, f);
        return va < vb || (va == vb && a < b);
      });
      double left_sum = 0.0, left_sq = 0.0;
      for (std::size_t k = 0; k + 1 < n; ++k) {
        const double v = y[sorted[k]];
        left_sum += v;
        left_sq += v * v;
        const std::size_t nl = k + 1, nr = n - nl;
        if (nl < cfg.min_samples_leaf || nr < cfg.min_samples_leaf) continue;
        const double a = x(sorted[k], f), b = x(sorted[k + 1], f);
        if (!(a < b)) continue;
        const double right_sum = sum - left_sum, right_sq = sq - left_sq;
        const double child = (left_sq - left_sum * left_sum / static_cast<double>(nl)) +
                             (right_sq - right_sum * right_sum / static_cast<double>(nr));
        const double gain = sse - child;
        if (gain > best_gain) {
          best_gain = gain;
          best_feature = f;
          best_threshold = a + 0.5 * (b - a);
        }
      }
    }
    if (best_feature == kLeaf) return id;

    std::vector<std::size_t> left, right;
    for (std::size_t r : rows) (x(r, best_feature) <= best_threshold ? left : right).push_back(r);
    if (left.empty() || right.empty()) return id;
    importance[best_feature] += best_gain;
    rows.clear();
    rows.shrink_to_fit();
    nodes_[id].feature = best_feature;
    nodes_[id].threshold = best_threshold;
    const std::size_t l = grow(x, y, left, depth + 1, cfg, rng, features, importance);
    const std::size_t r = grow(x, y, right, depth + 1, cfg, rng, features, importance);
    nodes_[id].left = l;
    nodes_[id].right = r;
    return id;
  }

  std::vector<Node> nodes_;
};

class RandomForest {
 public:
  explicit RandomForest(ForestConfig cfg = {}) : cfg_(cfg) {}

  // Tree k draws from its own stream derived from (seed, k), so the fit does
  // not depend on how trees are scheduled.
  void fit(const MatrixView& x, std::span<const double> y) {
    if (x.rows != y.size()) throw ShapeError("forest: " + std::to_string(x.rows) + " rows vs " + std::to_string(y.size()) + " targets");
    if (x.rows == 0 || x.cols == 0) throw ShapeError("forest: empty input matrix");
    trees_.assign(cfg_.n_trees, RegressionTree{});
    importance_.assign(x.cols, 0.0);
    for (std::size_t t = 0; t < cfg_.n_trees; ++t) {
      Rng rng(Rng::derive(cfg_.seed, t));
      std::vector<std::size_t> rows(x.rows);
      if (cfg_.bootstrap) {
        for (auto& r : rows) r = rng.below(x.rows);
        std::sort(rows.begin(), rows.end());
      } else {
        std::iota(rows.begin(), rows.end(), std::size_t{0});
      }
      trees_[t].fit(x, y, std::move(rows), cfg_, rng, importance_);
    }
  }

  double predict(std::span<const double> row) const {
    double s = 0.0;
    for (const auto& t : trees_) s += t.predict(row);
    return s / static_cast<double>(trees_.size());
  }

  // Total variance reduction per feature (unnormalized).
  const std::vector<double>& raw_importance() const { return importance_; }

 private:
  ForestConfig cfg_;
  std::vector<RegressionTree> trees_;
  std::vector<double> importance_;
};

// One forest per target column. Each forest's per-column importance is
// normalized to 1, averaged over the target columns that have variance,
// summed within source groups and renormalized. Returns nullopt when no
// target column has variance (row undefined).
inline std::optional<std::vector<double>> forest_fit_importance(const MatrixView& inputs, const MatrixView& targets,
                                                                std::span<const std::size_t> groups,
                                                                const ForestConfig& cfg, std::size_t threads = 1) {
  if (inputs.rows != targets.rows) throw ShapeError("forest_fit_importance: input and target row counts differ");
  if (inputs.rows < 10) throw ConfigError("forest_fit_importance: need at least 10 samples, got " + std::to_string(inputs.rows));
  if (groups.size() != inputs.cols) throw ShapeError("forest_fit_importance: one group index per input column required");
  const std::size_t num_groups = groups.empty() ? 0 : *std::max_element(groups.begin(), groups.end()) + 1;

  std::vector<std::optional<std::vector<double>>> per_target(targets.cols);
  auto fit_one = [&](std::size_t j) {
    std::vector<double> y(targets.rows);
    for (std::size_t r = 0; r < targets.rows; ++r) y[r] = targets(r, j);
    const auto [lo, hi] = std::minmax_element(y.begin(), y.end());
    if (*lo == *hi) return;
    ForestConfig c = cfg;
    c.seed = Rng::derive(cfg.seed, 1000 + j);
    RandomForest forest(c);
    forest.fit(inputs, y);
    std::vector<double> imp = forest.raw_importance();
    const double total = std::accumulate(imp.begin(), imp.end(), 0.0);
    if (total <= 0.0) return;
    for (double& v : imp) v /= total;
    per_target[j] = std::move(imp);
  };
  const std::size_t workers = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(1, targets.cols));
  if (workers == 1) {
    for (std::size_t j = 0; j < targets.cols; ++j) fit_one(j);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t j = w; j < targets.cols; j += workers) fit_one(j);
      });
    }
    for (auto& t : pool) t.join();
  }

  std::vector<double> group_importance(num_groups, 0.0);
  std::size_t used = 0;
  for (const auto& imp : per_target) {
    if (!imp) continue;
    ++used;
    for (std::size_t c = 0; c < imp->size(); ++c) group_importance[groups[c]] += (*imp)[c];
  }
  if (used == 0) return std::nullopt;
  const double total = std::accumulate(group_importance.begin(), group_importance.end(), 0.0);
  for (double& v : group_importance) v /= total;
  return group_importance;
}

struct ImportanceRow {
  std::size_t target_block = 0;
  std::vector<std::size_t> source_blocks;
  std::optional<std::vector<double>> importance;  // nullopt = undefined (constant target)
};

struct StageImportance {
  std::size_t stage = 0;
  std::vector<ImportanceRow> rows;
};

struct ImportanceReport {
  std::vector<StageImportance> stages;

  // Long form: one line per (target, source) entry of the lower triangle.
  std::string to_csv() const {
    std::ostringstream out;
    out << "stage,target_block,source_block,importance\n";
    for (const auto& st : stages) {
      for (const auto& row : st.rows) {
        for (std::size_t k = 0; k < row.source_blocks.size(); ++k) {
          out << st.stage << ',' << row.target_block << ',' << row.source_blocks[k] << ','
              << (row.importance ? format_double((*row.importance)[k]) : "undefined") << '\n';
        }
      }
    }
    return out.str();
  }
};

// For each stage and each traced block t after the first, regress h_t on the
// earlier maps h_1..h_{t-1} of the same stage.
inline ImportanceReport importance_report(const AttentionTrace& trace, const ForestConfig& cfg,
                                          std::size_t max_samples = 256, std::size_t threads = 1) {
  ImportanceReport report;
  const std::size_t S = std::min(max_samples, trace.samples());
  for (std::size_t stage : trace.stages()) {
    const auto blocks = trace.stage_blocks(stage);
    if (blocks.size() < 2) {
      throw ConfigError("importance: stage " + std::to_string(stage) + " has " + std::to_string(blocks.size()) +
                        " traced block; at least 2 are needed");
    }
    StageImportance st;
    st.stage = stage;
    const std::size_t N = trace.at(stage, blocks[0]).width;
    for (std::size_t t = 1; t < blocks.size(); ++t) {
      ImportanceRow row;
      row.target_block = blocks[t];
      row.source_blocks.assign(blocks.begin(), blocks.begin() + static_cast<std::ptrdiff_t>(t));
      const std::size_t D = t * N;
      std::vector<double> x(S * D), y(S * N);
      std::vector<std::size_t> groups(D);
      for (std::size_t s = 0; s < S; ++s) {
        for (std::size_t k = 0; k < t; ++k) {
          auto src = trace.map(stage, blocks[k], s);
          std::copy(src.begin(), src.end(), x.begin() + static_cast<std::ptrdiff_t>(s * D + k * N));
        }
        auto tgt = trace.map(stage, blocks[t], s);
        std::copy(tgt.begin(), tgt.end(), y.begin() + static_cast<std::ptrdiff_t>(s * N));
      }
      for (std::size_t c = 0; c < D; ++c) groups[c] = c / N;
      ForestConfig c = cfg;
      c.seed = Rng::derive(cfg.seed, stage * 1000 + t);
      row.importance = forest_fit_importance({x.data(), S, D}, {y.data(), S, N}, groups, c, threads);
      st.rows.push_back(std::move(row));
    }
    report.stages.push_back(std::move(st));
  }
  return report;
}

}  // namespace dia
