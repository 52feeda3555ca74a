#pragma once

#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>

#include "dia/budget.hpp"
#include "dia/config.hpp"
#include "dia/csv.hpp"
#include "dia/gradient_stats.hpp"
#include "dia/model_gradcheck.hpp"
#include "dia/stats.hpp"

// Subcommand bodies behind the `dia` executable. Argument parsing lives in
// tools/dia.cpp; everything here takes a resolved RunConfig.
namespace dia::cli {

enum ExitCode : int { kExitOk = 0, kExitConfig = 2, kExitIo = 3, kExitInternal = 4 };

inline constexpr const char* kCheckpointFile = "checkpoint.bin";
inline constexpr const char* kMetricsFile = "metrics.csv";
inline constexpr const char* kResolvedConfigFile = "config.resolved.ini";

// Runs `body` and maps library errors onto the exit-code contract.
inline int run_guarded(const std::function<int()>& body, std::ostream& err) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const IoError& e) {
    err << "io error: " << e.what() << '\n';
    return kExitIo;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return kExitInternal;
  }
}

// File, then overrides, then DIA_SEED for an otherwise unset train.seed.
inline RunConfig resolve_config(const std::string& path, const std::vector<std::string>& overrides) {
  RunConfig rc = path.empty() ? RunConfig{} : RunConfig::load(path);
  for (const auto& o : overrides) rc.apply_override(o);
  if (const char* env = std::getenv("DIA_SEED")) rc.apply_env_seed(env);
  return rc;
}

inline std::filesystem::path output_dir(const RunConfig& rc) {
  std::filesystem::path dir = rc.get("output.dir");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory '" + dir.string() + "': " + ec.message());
  return dir;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file_bytes(path.string(), {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

inline std::string read_text(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  return {bytes.begin(), bytes.end()};
}

inline void write_resolved_config(const RunConfig& rc, const std::filesystem::path& dir) {
  write_text(dir / kResolvedConfigFile, rc.resolved_text());
}

struct LoadedModel {
  RunConfig config;
  Model model;
};

// Rebuilds the network recorded in a checkpoint. `overrides` may redirect
// data or output keys; model keys come from the checkpoint.
inline LoadedModel load_checkpoint_model(const std::string& path, const std::vector<std::string>& overrides) {
  Checkpoint ck = Checkpoint::load(path);
  RunConfig rc = RunConfig::from_metadata(ck.metadata);
  for (const auto& o : overrides) {
    if (o.rfind("model.", 0) == 0) throw ConfigError(o + ": model keys are fixed by the checkpoint");
    rc.apply_override(o);
  }
  const std::size_t classes = std::stoull(ck.get("num_classes"));
  Model model = Model::build(network_from_config(rc, classes), rc.get_u64("train.seed"));
  ck.restore(model);
  return {std::move(rc), std::move(model)};
}

// -- train --------------------------------------------------------------------

inline int cmd_train(const RunConfig& rc, std::size_t threads, std::ostream& out) {
  DataSplits data = datasets_from_config(rc);
  const NetworkConfig net = network_from_config(rc, data.train.num_classes);
  TrainConfig tc = train_from_config(rc);
  tc.eval_threads = threads;
  const auto dir = output_dir(rc);
  write_resolved_config(rc, dir);

  Model model = Model::build(net, tc.seed);
  const TrainResult result = train(model, data.train, data.eval.empty() ? nullptr : &data.eval, tc);
  write_text(dir / kMetricsFile, metrics_csv(result.log));

  Metadata meta{{"format_version", "1"},
                {"status", result.status},
                {"num_classes", std::to_string(net.num_classes)},
                {"epochs_completed", std::to_string(result.log.empty() ? 0 : result.log.back().epoch)}};
  for (auto& kv : rc.flatten()) meta.push_back(std::move(kv));
  Checkpoint::capture(model, std::move(meta)).save((dir / kCheckpointFile).string());

  const EpochMetrics& last = result.log.back();
  out << "status=" << result.status << " epochs=" << last.epoch << " train_loss=" << format_double(last.train_loss)
      << " train_acc=" << format_double(last.train_acc) << " eval_acc=" << format_double(last.eval_acc) << '\n';
  out << "wrote " << (dir / kMetricsFile).string() << ", " << (dir / kCheckpointFile).string() << '\n';
  return kExitOk;
}

// -- eval ---------------------------------------------------------------------

inline int cmd_eval(const std::string& checkpoint, const std::vector<std::string>& overrides, std::size_t threads,
                    std::ostream& out) {
  LoadedModel lm = load_checkpoint_model(checkpoint, overrides);
  DataSplits data = datasets_from_config(lm.config);
  const auto dir = output_dir(lm.config);
  std::ostringstream csv;
  csv << "split,samples,accuracy,mean_loss\n";
  for (auto [name, set] : {std::pair<const char*, const Dataset*>{"train", &data.train}, {"eval", &data.eval}}) {
    const EvalResult r = evaluate(lm.model, *set, 256, threads);
    csv << name << ',' << r.count << ',' << format_double(r.accuracy) << ',' << format_double(r.mean_loss) << '\n';
    out << name << ": samples=" << r.count << " accuracy=" << format_double(r.accuracy)
        << " mean_loss=" << format_double(r.mean_loss) << '\n';
  }
  write_text(dir / "eval.csv", csv.str());
  return kExitOk;
}

// -- params -------------------------------------------------------------------

inline std::string millions_value(std::size_t n) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(2) << static_cast<double>(n) / 1e6;
  return s.str();
}
inline std::string millions(std::size_t n) { return millions_value(n) + "M"; }

// `target` is a config file path if one exists, else an architecture name.
inline int cmd_params(const std::string& target, const std::vector<std::string>& overrides,
                      std::vector<std::size_t> ratios, std::ostream& out) {
  RunConfig rc = std::filesystem::is_regular_file(target) ? RunConfig::load(target) : RunConfig{};
  for (const auto& o : overrides) rc.apply_override(o);
  if (!std::filesystem::is_regular_file(target)) rc.set("model.arch", target);
  NetworkConfig base = network_from_config(rc);
  DiaLstmSpec dia_spec;
  if (const auto* s = std::get_if<DiaLstmSpec>(&base.attention)) dia_spec = *s;
  if (ratios.empty()) ratios.push_back(dia_spec.r);

  NetworkConfig backbone_cfg = base;
  backbone_cfg.attention = NoAttention{};
  const ParamBudget backbone = count_weights(Model::build(backbone_cfg, 0).parameters());
  out << "arch " << base.name << "\n";
  out << "backbone: " << backbone.total() << " parameters (" << millions(backbone.total()) << "), "
      << backbone.total_weight_only() << " weight-only\n";

  std::ostringstream csv;
  csv << "arch,attention,r,backbone_params,attention_weights,attention_extras,total_params,increment_m\n";
  out << "  r  attention_weights  increment  total\n";
  for (std::size_t r : ratios) {
    NetworkConfig cfg = base;
    DiaLstmSpec spec = dia_spec;
    spec.r = r;
    cfg.attention = spec;
    cfg.sharing = Sharing::kSharedPerStage;
    cfg.validate();
    const ParamBudget b = count_weights(Model::build(cfg, 0).parameters());
    const std::size_t w = b.weights("attention"), e = b.extras("attention");
    out << std::setw(3) << r << "  " << std::setw(17) << w << "  +" << millions(w) << "  " << millions(b.total())
        << '\n';
    csv << base.name << ",dia-lstm," << r << ',' << backbone.total() << ',' << w << ',' << e << ',' << b.total() << ','
        << millions_value(w) << '\n';
  }

  NetworkConfig se_cfg = base;
  se_cfg.attention = SeSpec{rc.get_size("model.se_reduction")};
  const BudgetComparison se = budget_report(se_cfg);
  out << "se shared vs per-block attention weights: " << se.shared << " vs " << se.per_block << " ("
      << format_double(std::round(se.reduction_percent() * 10.0) / 10.0) << "% fewer)\n";

  const auto dir = output_dir(rc);
  write_text(dir / "params.csv", csv.str());
  write_text(dir / "params_budget_se.csv", se.to_csv());
  return kExitOk;
}

// -- gradcheck ----------------------------------------------------------------

inline int cmd_gradcheck(const RunConfig& rc, std::optional<std::size_t> samples, double corrupt, std::ostream& out) {
  const NetworkConfig net = network_from_config(rc, rc.get_size("data.classes"));
  ModelGradcheckConfig g;
  g.samples = samples ? *samples : rc.get_size("gradcheck.samples");
  g.batch = rc.get_size("gradcheck.batch");
  g.step = rc.get_double("gradcheck.step");
  g.tolerance = rc.get_double("gradcheck.tolerance");
  g.seed = rc.get_u64("gradcheck.seed");
  g.height = rc.get_size("data.height");
  g.width = rc.get_size("data.width");
  g.corrupt = corrupt;
  Model model = Model::build(net, rc.get_u64("train.seed"));
  const ModelGradcheckResult r = gradcheck_model(model, g);
  out << "coordinates=" << r.entries.size() << " max_rel_error=" << format_double(r.max_rel_error)
      << " tolerance=" << format_double(g.tolerance) << (r.passed ? " PASS" : " FAIL") << '\n';
  if (!r.passed) {
    std::size_t shown = 0;
    for (const auto& e : r.entries) {
      if (e.rel_error > g.tolerance && shown++ < 10) {
        out << "  " << e.param << '[' << e.index << "] analytic=" << format_double(e.analytic)
            << " numeric=" << format_double(e.numeric) << '\n';
      }
    }
    throw InvariantError("gradcheck: max relative error " + format_double(r.max_rel_error) + " exceeds " +
                         format_double(g.tolerance));
  }
  return kExitOk;
}

// -- analyze ------------------------------------------------------------------

struct AnalyzeInputs {
  std::string checkpoint;  // default: <output.dir>/checkpoint.bin
  std::string trace;       // analyses read this trace when set instead of tracing the checkpoint
  std::string trace_out;   // `trace` output; .csv selects the text format
  bool no_skip = false;
};

inline AttentionTrace trace_from_checkpoint(const RunConfig& rc, const AnalyzeInputs& in,
                                            const std::vector<std::string>& overrides) {
  const std::string path =
      in.checkpoint.empty() ? (std::filesystem::path(rc.get("output.dir")) / kCheckpointFile).string() : in.checkpoint;
  LoadedModel lm = load_checkpoint_model(path, overrides);
  DataSplits data = datasets_from_config(lm.config);
  const Dataset& source = data.eval.empty() ? data.train : data.eval;
  return AttentionTrace::collect(lm.model, source, lm.config.get_size("analysis.samples"));
}

inline AttentionTrace analysis_trace(const RunConfig& rc, const AnalyzeInputs& in,
                                     const std::vector<std::string>& overrides) {
  if (!in.trace.empty()) return AttentionTrace::load(in.trace);
  return trace_from_checkpoint(rc, in, overrides);
}

inline std::vector<std::pair<std::size_t, std::size_t>> scatter_pairs(const RunConfig& rc) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (const auto& item : split(rc.get("analysis.scatter_pairs"), ',')) {
    const auto t = trim(item);
    if (t.empty()) continue;
    const auto dash = t.find('-');
    try {
      if (dash == std::string::npos) throw std::invalid_argument(t);
      out.emplace_back(std::stoull(t.substr(0, dash)), std::stoull(t.substr(dash + 1)));
    } catch (const std::exception&) {
      throw ConfigError("analysis.scatter_pairs: expected i-j pairs, got '" + t + "'");
    }
  }
  return out;
}

inline int cmd_analyze(const std::string& kind, const RunConfig& rc, const AnalyzeInputs& in,
                       const std::vector<std::string>& overrides, std::size_t threads, std::ostream& out) {
  if (kind == "trace") {
    const AttentionTrace t = trace_from_checkpoint(rc, in, overrides);
    const std::string path =
        in.trace_out.empty() ? (output_dir(rc) / "trace.bin").string() : in.trace_out;
    if (std::filesystem::path(path).extension() == ".csv") {
      t.save_csv(path);
    } else {
      write_file_bytes(path, t.encode_binary());
    }
    out << "traced " << t.samples() << " samples over " << t.blocks().size() << " blocks -> " << path << '\n';
    return kExitOk;
  }
  if (kind == "correlation") {
    const AttentionTrace t = analysis_trace(rc, in, overrides);
    const CorrelationReport report = correlation_report(t, rc.get_size("analysis.samples"), threads);
    const auto dir = output_dir(rc);
    write_text(dir / "correlation_matrix.csv", report.matrix_csv());
    write_text(dir / "correlation_distribution.csv", report.distribution_csv());
    write_text(dir / "correlation_summary.csv", report.summary_csv());
    const std::size_t first_stage = t.stages().front();
    const auto blocks = t.stage_blocks(first_stage);
    for (auto [i, j] : scatter_pairs(rc)) {
      if (i >= blocks.size() || j >= blocks.size()) {
        throw ConfigError("analysis.scatter_pairs: pair " + std::to_string(i) + "-" + std::to_string(j) +
                          " exceeds the " + std::to_string(blocks.size()) + " traced blocks of stage " +
                          std::to_string(first_stage));
      }
      write_text(dir / ("correlation_scatter_" + std::to_string(blocks[i]) + "_" + std::to_string(blocks[j]) + ".csv"),
                 scatter_csv(t, first_stage, blocks[i], blocks[j], rc.get_size("analysis.samples")));
    }
    for (const auto& st : report.stages) {
      std::size_t undefined = 0;
      for (const auto& p : st.pairs) undefined += p.undefined;
      out << "stage " << st.stage << ": " << st.pairs.size() << " pairs, mean correlation "
          << format_double(st.grand_mean) << ", undefined samples " << undefined << '\n';
    }
    return kExitOk;
  }
  if (kind == "importance") {
    const AttentionTrace t = analysis_trace(rc, in, overrides);
    const ImportanceReport report =
        importance_report(t, forest_from_config(rc), rc.get_size("analysis.samples"), threads);
    write_text(output_dir(rc) / "importance.csv", report.to_csv());
    for (const auto& st : report.stages) {
      for (const auto& row : st.rows) {
        out << "stage " << st.stage << " block " << row.target_block << ":";
        if (!row.importance) {
          out << " undefined";
        } else {
          for (double v : *row.importance) out << ' ' << format_double(std::round(v * 1000.0) / 1000.0);
        }
        out << '\n';
      }
    }
    return kExitOk;
  }
  if (kind == "gradients") {
    DataSplits data = datasets_from_config(rc);
    const NetworkConfig net = network_from_config(rc, data.train.num_classes);
    TrainConfig tc = train_from_config(rc);
    tc.epochs = rc.get_size("analysis.grad_epochs");
    tc.eval_threads = threads;
    const GradientStats stats = gradient_stats(net, tc.seed, data.train, tc, in.no_skip);
    const auto dir = output_dir(rc);
    write_resolved_config(rc, dir);
    write_text(dir / "gradients_edges.csv", GradientStats::edges_csv());
    write_text(dir / "gradients_metrics.csv", metrics_csv(stats.training.log));
    for (std::size_t s = 0; s < stats.stages.size(); ++s) {
      write_text(dir / ("gradients_stage" + std::to_string(s) + ".csv"), stats.stage_csv(s));
    }
    out << "status=" << stats.training.status << " skip=" << (in.no_skip ? "off" : "on")
        << " stages=" << stats.stages.size() << '\n';
    return kExitOk;
  }
  throw ConfigError("analyze: unknown kind '" + kind + "' (correlation, importance, gradients, trace)");
}

// Help text listing every configuration key with its default.
inline std::string config_keys_help() {
  std::ostringstream out;
  out << "Configuration keys (section.key = default):\n";
  for (const auto& k : config_schema()) {
    out << "  " << std::left << std::setw(28) << (k.dotted() + " = " + (k.default_value.empty() ? "\"\"" : k.default_value))
        << ' ' << k.doc << '\n';
  }
  return out.str();
}

}  // namespace dia::cli
