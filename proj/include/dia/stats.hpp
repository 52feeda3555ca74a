#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <sstream>
#include <thread>

#include "dia/trace.hpp"

namespace dia {

// Pearson correlation; std::nullopt marks an undefined coefficient (either
// vector constant). Two passes: means first, then centered sums.
inline std::optional<double> pearson(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) {
    throw ShapeError("pearson: length mismatch " + std::to_string(u.size()) + " vs " + std::to_string(v.size()));
  }
  if (u.size() < 2) throw ShapeError("pearson: need at least 2 entries, got " + std::to_string(u.size()));
  const double n = static_cast<double>(u.size());
  double mu = 0.0, mv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    mu += u[i];
    mv += v[i];
  }
  mu /= n;
  mv /= n;
  double suv = 0.0, suu = 0.0, svv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double du = u[i] - mu, dv = v[i] - mv;
    suv += du * dv;
    suu += du * du;
    svv += dv * dv;
  }
  if (suu == 0.0 || svv == 0.0) return std::nullopt;
  return std::clamp(suv / (std::sqrt(suu) * std::sqrt(svv)), -1.0, 1.0);
}

inline double median_of(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

struct PairCorrelation {
  std::size_t block_i = 0, block_j = 0;
  std::vector<std::optional<double>> coefficients;  // per sample
  std::size_t undefined = 0;
  double mean = std::numeric_limits<double>::quiet_NaN();  // over defined samples
  double median = std::numeric_limits<double>::quiet_NaN();
};

struct StageCorrelation {
  std::size_t stage = 0;
  std::vector<std::size_t> blocks;
  std::vector<PairCorrelation> pairs;  // i < j, row-major over block positions
  double grand_mean = std::numeric_limits<double>::quiet_NaN();

  // Mean coefficient between block positions a and b (diagonal = 1).
  double mean_at(std::size_t a, std::size_t b) const {
    if (a == b) return 1.0;
    if (a > b) std::swap(a, b);
    const std::size_t n = blocks.size();
    return pairs[a * n - a * (a + 1) / 2 + (b - a - 1)].mean;
  }
  double median_at(std::size_t a, std::size_t b) const {
    if (a == b) return 1.0;
    if (a > b) std::swap(a, b);
    const std::size_t n = blocks.size();
    return pairs[a * n - a * (a + 1) / 2 + (b - a - 1)].median;
  }
};

struct CorrelationReport {
  std::vector<StageCorrelation> stages;
  std::size_t samples = 0;

  // Symmetric matrix in long form with the diagonal included.
  std::string matrix_csv() const {
    std::ostringstream out;
    out << "stage,block_i,block_j,mean,median\n";
    for (const auto& st : stages) {
      for (std::size_t a = 0; a < st.blocks.size(); ++a) {
        for (std::size_t b = 0; b < st.blocks.size(); ++b) {
          out << st.stage << ',' << st.blocks[a] << ',' << st.blocks[b] << ',' << format_double(st.mean_at(a, b))
              << ',' << format_double(st.median_at(a, b)) << '\n';
        }
      }
    }
    return out.str();
  }

  // Per-sample coefficients for every pair; undefined samples are written as "undefined".
  std::string distribution_csv() const {
    std::ostringstream out;
    out << "stage,block_i,block_j,sample,coefficient\n";
    for (const auto& st : stages) {
      for (const auto& p : st.pairs) {
        for (std::size_t s = 0; s < p.coefficients.size(); ++s) {
          out << st.stage << ',' << p.block_i << ',' << p.block_j << ',' << s << ','
              << (p.coefficients[s] ? format_double(*p.coefficients[s]) : "undefined") << '\n';
        }
      }
    }
    return out.str();
  }

  std::string summary_csv() const {
    std::ostringstream out;
    out << "stage,blocks,pairs,grand_mean,undefined\n";
    for (const auto& st : stages) {
      std::size_t undefined = 0;
      for (const auto& p : st.pairs) undefined += p.undefined;
      out << st.stage << ',' << st.blocks.size() << ',' << st.pairs.size() << ',' << format_double(st.grand_mean)
          << ',' << undefined << '\n';
    }
    return out.str();
  }
};

// All within-stage pairs over the first `max_samples` samples. Pairs may be
// spread over worker threads; each pair's result lands in a fixed slot.
inline CorrelationReport correlation_report(const AttentionTrace& trace, std::size_t max_samples = 256,
                                            std::size_t threads = 1) {
  CorrelationReport report;
  report.samples = std::min(max_samples, trace.samples());
  for (std::size_t stage : trace.stages()) {
    StageCorrelation st;
    st.stage = stage;
    st.blocks = trace.stage_blocks(stage);
    if (st.blocks.size() < 2) {
      throw ConfigError("correlation: stage " + std::to_string(stage) + " has " + std::to_string(st.blocks.size()) +
                        " traced block; at least 2 are needed to form a pair");
    }
    for (std::size_t a = 0; a < st.blocks.size(); ++a) {
      for (std::size_t b = a + 1; b < st.blocks.size(); ++b) {
        PairCorrelation p;
        p.block_i = st.blocks[a];
        p.block_j = st.blocks[b];
        st.pairs.push_back(std::move(p));
      }
    }
    auto compute = [&](PairCorrelation& p) {
      std::vector<double> defined;
      p.coefficients.resize(report.samples);
      for (std::size_t s = 0; s < report.samples; ++s) {
        p.coefficients[s] = pearson(trace.map(stage, p.block_i, s), trace.map(stage, p.block_j, s));
        if (p.coefficients[s]) {
          defined.push_back(*p.coefficients[s]);
        } else {
          ++p.undefined;
        }
      }
      if (!defined.empty()) {
        double sum = 0.0;
        for (double c : defined) sum += c;
        p.mean = sum / static_cast<double>(defined.size());
        p.median = median_of(defined);
      }
    };
    const std::size_t workers = std::clamp<std::size_t>(threads, 1, st.pairs.size());
    if (workers == 1) {
      for (auto& p : st.pairs) compute(p);
    } else {
      std::vector<std::thread> pool;
      for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
          for (std::size_t k = w; k < st.pairs.size(); k += workers) compute(st.pairs[k]);
        });
      }
      for (auto& t : pool) t.join();
    }
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& p : st.pairs) {
      if (!std::isnan(p.mean)) {
        sum += p.mean;
        ++count;
      }
    }
    if (count) st.grand_mean = sum / static_cast<double>(count);
    report.stages.push_back(std::move(st));
  }
  return report;
}

// Raw values of two blocks for scatter plots: one row per (sample, channel).
inline std::string scatter_csv(const AttentionTrace& trace, std::size_t stage, std::size_t block_i,
                               std::size_t block_j, std::size_t max_samples = 256) {
  std::ostringstream out;
  out << "sample,channel,h_i,h_j\n";
  const std::size_t n = std::min(max_samples, trace.samples());
  for (std::size_t s = 0; s < n; ++s) {
    auto a = trace.map(stage, block_i, s);
    auto b = trace.map(stage, block_j, s);
    for (std::size_t c = 0; c < a.size(); ++c) {
      out << s << ',' << c << ',' << format_double(a[c]) << ',' << format_double(b[c]) << '\n';
    }
  }
  return out.str();
}

}  // namespace dia
