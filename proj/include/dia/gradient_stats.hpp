#pragma once

#include <array>
#include <cmath>
#include <sstream>

#include "dia/train.hpp"

namespace dia {

// 64 log-spaced bins over |g| in [1e-12, 1e4]. Values below the first edge
// (including exact zeros) land in bin 0, values above the last in bin 63;
// non-finite values are counted separately.
struct GradientHistogram {
  static constexpr std::size_t kBins = 64;
  static constexpr double kLow = 1e-12, kHigh = 1e4;

  std::array<std::size_t, kBins> counts{};
  std::size_t nonfinite = 0;

  static double edge(std::size_t i) {
    return std::pow(10.0, std::log10(kLow) + (std::log10(kHigh) - std::log10(kLow)) * static_cast<double>(i) /
                                                static_cast<double>(kBins));
  }

  static std::size_t bin(double magnitude) {
    if (!(magnitude > kLow)) return 0;
    // Decades are exact in log10, so values on an edge land in the upper bin.
    const double t = (std::log10(magnitude) - std::log10(kLow)) / (std::log10(kHigh) - std::log10(kLow)) *
                     static_cast<double>(kBins);
    return std::min<std::size_t>(kBins - 1, static_cast<std::size_t>(t));
  }

  void add(double g) {
    if (!std::isfinite(g)) {
      ++nonfinite;
      return;
    }
    ++counts[bin(std::abs(g))];
  }

  std::size_t total() const {
    std::size_t n = nonfinite;
    for (auto c : counts) n += c;
    return n;
  }
};

// Summary of |g| over one stage-output tensor at one training step.
struct GradientSummary {
  std::size_t observed = 0;  // entries seen, finite or not
  double mean_abs = 0.0;     // over finite entries
  double variance = 0.0;     // population variance of |g| over finite entries
  GradientHistogram histogram;
};

inline GradientSummary summarize_gradient(std::span<const double> grad) {
  GradientSummary s;
  s.observed = grad.size();
  double sum = 0.0;
  std::size_t finite = 0;
  for (double g : grad) {
    s.histogram.add(g);
    if (std::isfinite(g)) {
      sum += std::abs(g);
      ++finite;
    }
  }
  if (finite) {
    s.mean_abs = sum / static_cast<double>(finite);
    double ss = 0.0;
    for (double g : grad) {
      if (std::isfinite(g)) ss += (std::abs(g) - s.mean_abs) * (std::abs(g) - s.mean_abs);
    }
    s.variance = ss / static_cast<double>(finite);
  }
  return s;
}

struct GradientRecord {
  std::size_t epoch = 0, step = 0;
  GradientSummary summary;
};

struct GradientStats {
  std::vector<std::vector<GradientRecord>> stages;  // [stage][record]
  TrainResult training;

  void observe(const StepInfo& info) {
    if (stages.size() < info.stage_outputs.size()) stages.resize(info.stage_outputs.size());
    for (std::size_t s = 0; s < info.stage_outputs.size(); ++s) {
      const Tensor& out = info.stage_outputs[s];
      GradientRecord rec{info.epoch, info.step, {}};
      if (out.has_grad()) {
        rec.summary = summarize_gradient(out.grad());
      } else {
        rec.summary = summarize_gradient(std::vector<double>(out.numel(), 0.0));
      }
      stages[s].push_back(rec);
    }
  }

  static std::string edges_csv() {
    std::ostringstream out;
    out << "bin,lower,upper\n";
    for (std::size_t i = 0; i < GradientHistogram::kBins; ++i) {
      out << i << ',' << format_double(GradientHistogram::edge(i)) << ',' << format_double(GradientHistogram::edge(i + 1))
          << '\n';
    }
    return out.str();
  }

  // One row per training step: summary columns then the 64 bin counts.
  std::string stage_csv(std::size_t stage) const {
    std::ostringstream out;
    out << "epoch,step,observed,nonfinite,mean_abs,variance";
    for (std::size_t i = 0; i < GradientHistogram::kBins; ++i) out << ",bin" << i;
    out << '\n';
    for (const auto& r : stages.at(stage)) {
      out << r.epoch << ',' << r.step << ',' << r.summary.observed << ',' << r.summary.histogram.nonfinite << ','
          << format_double(r.summary.mean_abs) << ',' << format_double(r.summary.variance);
      for (auto c : r.summary.histogram.counts) out << ',' << c;
      out << '\n';
    }
    return out.str();
  }
};

// Trains a freshly built model while recording |g| at every stage output on
// every step. `no_skip` removes all skip connections.
inline GradientStats gradient_stats(NetworkConfig net, std::uint64_t model_seed, const Dataset& data,
                                    const TrainConfig& cfg, bool no_skip) {
  if (no_skip) net.use_skip = false;
  Model model = Model::build(net, model_seed);
  GradientStats stats;
  stats.training = train(model, data, nullptr, cfg, [&](const StepInfo& info) { stats.observe(info); });
  return stats;
}

}  // namespace dia
