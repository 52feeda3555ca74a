#include <CLI11.hpp>

#include "dia/commands.hpp"

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::size_t threads = 1;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config, "configuration file ([section] / key = value)");
  cmd->add_option("--set", c.overrides, "override section.key=value (repeatable)")->take_all();
  cmd->add_option("--threads", c.threads, "worker threads for evaluation and analyses")
      ->check(CLI::PositiveNumber);
}

}  // namespace

int main(int argc, char** argv) {
  using namespace dia::cli;
  CLI::App app{"DIA workbench: train, evaluate and analyse networks with shared recurrent attention"};
  app.footer(config_keys_help() + "\nExit codes: 0 ok, 2 configuration error, 3 io/format error, 4 internal error.");
  app.require_subcommand(1);

  Common common;

  auto* train = app.add_subcommand("train", "train a model; writes metrics.csv, checkpoint.bin and the resolved config");
  add_common(train, common);

  std::string checkpoint;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the configured train and eval splits");
  add_common(eval, common);
  eval->add_option("--checkpoint", checkpoint, "checkpoint file (default <output.dir>/checkpoint.bin)");

  std::string target;
  std::vector<std::size_t> ratios;
  auto* params = app.add_subcommand("params", "parameter accounting for an architecture or config file");
  params->add_option("target", target, "architecture name or config file")->required();
  params->add_option("--r", ratios, "reduction ratios to sweep")->delimiter(',');
  params->add_option("--set", common.overrides, "override section.key=value (repeatable)")->take_all();

  std::optional<std::size_t> samples;
  double corrupt = 0.0;
  auto* gradcheck = app.add_subcommand("gradcheck", "compare backward against central differences");
  add_common(gradcheck, common);
  gradcheck->add_option("--samples", samples, "parameter coordinates to check (default gradcheck.samples)");
  gradcheck->add_option("--corrupt-backward", corrupt, "test hook: scale analytic gradients by 1+x")->group("");

  std::string kind;
  AnalyzeInputs inputs;
  auto* analyze = app.add_subcommand("analyze", "attention and gradient analyses");
  add_common(analyze, common);
  analyze->add_option("kind", kind, "correlation | importance | gradients | trace")
      ->required()
      ->check(CLI::IsMember({"correlation", "importance", "gradients", "trace"}));
  analyze->add_option("--checkpoint", inputs.checkpoint, "checkpoint to trace (default <output.dir>/checkpoint.bin)");
  analyze->add_option("--trace", inputs.trace, "read an existing trace file instead of tracing a checkpoint");
  analyze->add_option("--out", inputs.trace_out, "trace output path for `trace` (.csv selects text)");
  analyze->add_flag("--no-skip", inputs.no_skip, "gradients: remove every skip connection");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  return run_guarded(
      [&]() -> int {
        if (*params) return cmd_params(target, common.overrides, ratios, std::cout);
        if (*eval) {
          const dia::RunConfig rc = resolve_config(common.config, common.overrides);
          const std::string path =
              checkpoint.empty() ? (std::filesystem::path(rc.get("output.dir")) / kCheckpointFile).string() : checkpoint;
          return cmd_eval(path, common.overrides, common.threads, std::cout);
        }
        const dia::RunConfig rc = resolve_config(common.config, common.overrides);
        if (*train) return cmd_train(rc, common.threads, std::cout);
        if (*gradcheck) return cmd_gradcheck(rc, samples, corrupt, std::cout);
        return cmd_analyze(kind, rc, inputs, common.overrides, common.threads, std::cout);
      },
      std::cerr);
}
