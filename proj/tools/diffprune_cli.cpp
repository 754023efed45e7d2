// diffprune: train, evaluate and probe token pruners on the synthetic task.
//
// Exit codes: 0 success, 2 config/validation error, 3 numerical abort,
// 4 I/O error, 1 anything else.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "diffprune/config.hpp"
#include "diffprune/report.hpp"
#include "diffprune/runner.hpp"

namespace {

using namespace diffprune;

constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitIo = 4;

struct ConfigArgs {
  std::string path;
  std::vector<std::string> overrides;

  void attach(CLI::App* cmd) {
    cmd->add_option("-c,--config", path, "TOML config file (default: built-in defaults)");
    cmd->add_option("--set", overrides, "Override a field, dotted.key=value (repeatable)");
  }

  PipelineConfig load() const { return path.empty() ? default_config(overrides) : load_config(path, overrides); }
};

template <class T>
std::optional<T> opt_if(const CLI::Option* o, const T& v) {
  return o->count() ? std::optional<T>(v) : std::nullopt;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"diffprune: differentiable token pruning at desk scale"};
  app.require_subcommand(1);

  ConfigArgs train_cfg, eval_cfg, probe_cfg, bench_cfg;

  auto* train = app.add_subcommand("train", "Pretrain/load the downstream model and train a pruner");
  train_cfg.attach(train);
  bool quiet = false;
  train->add_flag("-q,--quiet", quiet, "No progress output");

  auto* eval = app.add_subcommand("eval", "Evaluate the deployed hard top-K pruner on the test split");
  eval_cfg.attach(eval);
  std::string eval_ckpt, eval_scorer = "learned";
  std::size_t eval_k = 0, eval_batches = 0;
  bool eval_force = false;
  auto* eval_ckpt_opt = eval->add_option("--checkpoint", eval_ckpt, "Pruner checkpoint (default: run dir)");
  auto* eval_k_opt = eval->add_option("-k,--k", eval_k, "Tokens kept (default: config k)");
  auto* eval_b_opt = eval->add_option("--batches", eval_batches, "Test batches (default: eval.batches)");
  eval->add_option("--scorer", eval_scorer, "learned | random | oracle");
  eval->add_flag("--force", eval_force, "Load a checkpoint whose config hash differs");

  auto* probe = app.add_subcommand("probe", "Compare DiffPrune and GS-STE gradients on shared seeds");
  probe_cfg.attach(probe);
  std::string probe_mode = "coherence", probe_ckpt;
  std::size_t probe_row = 0;
  bool probe_force = false;
  probe->add_option("--mode", probe_mode, "coherence | landscape | step-variation");
  auto* probe_ckpt_opt = probe->add_option("--checkpoint", probe_ckpt, "Pruner checkpoint (default: seeded init)");
  auto* probe_row_opt = probe->add_option("--row", probe_row, "beta1 index for step variation (default: centre)");
  probe->add_flag("--force", probe_force, "Load a checkpoint whose config hash differs");

  auto* bench = app.add_subcommand("bench", "Latency of the inference path vs the training path");
  bench_cfg.attach(bench);
  std::string bench_ckpt;
  bool bench_force = false;
  auto* bench_ckpt_opt = bench->add_option("--checkpoint", bench_ckpt, "Pruner checkpoint (default: seeded init)");
  bench->add_flag("--force", bench_force, "Load a checkpoint whose config hash differs");

  auto* render = app.add_subcommand("render", "Render a CSV artifact to SVG");
  std::string render_in, render_out, render_kind = "curve", render_y;
  render->add_option("csv", render_in, "Input CSV")->required();
  render->add_option("-o,--out", render_out, "Output SVG (default: input with .svg)");
  render->add_option("--kind", render_kind, "curve | heatmap");
  render->add_option("--y", render_y, "Column to plot for curves (default: second)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (*train) {
      const auto c = train_cfg.load();
      auto res = cmd_train(c, quiet ? nullptr : &std::cerr);
      std::cout << res.dir.string() << "\n";
    } else if (*eval) {
      const auto c = eval_cfg.load();
      EvalRequest req;
      req.checkpoint = opt_if<std::filesystem::path>(eval_ckpt_opt, eval_ckpt);
      req.k = opt_if(eval_k_opt, eval_k);
      req.batches = opt_if(eval_b_opt, eval_batches);
      req.scorer = parse_scorer_source(eval_scorer);
      req.force = eval_force;
      std::cout << cmd_eval(c, req, &std::cerr).dump(2) << "\n";
    } else if (*probe) {
      const auto c = probe_cfg.load();
      ProbeRequest req;
      req.mode = parse_probe_mode(probe_mode);
      req.checkpoint = opt_if<std::filesystem::path>(probe_ckpt_opt, probe_ckpt);
      req.row = opt_if(probe_row_opt, probe_row);
      req.force = probe_force;
      std::cout << cmd_probe(c, req, &std::cerr).dump(2) << "\n";
    } else if (*bench) {
      const auto c = bench_cfg.load();
      auto res = cmd_bench(c, opt_if<std::filesystem::path>(bench_ckpt_opt, bench_ckpt), bench_force);
      res.second.erase("inference");
      res.second.erase("training");
      res.second["inference_median_ms"] = res.first.inference.median_ms;
      res.second["inference_p95_ms"] = res.first.inference.p95_ms;
      res.second["training_median_ms"] = res.first.training.median_ms;
      res.second["training_p95_ms"] = res.first.training.p95_ms;
      std::cout << res.second.dump(2) << "\n";
    } else if (*render) {
      std::filesystem::path out = render_out;
      if (out.empty()) out = std::filesystem::path(render_in).replace_extension(".svg");
      render_svg(render_in, parse_plot_kind(render_kind), out, render_y);
      std::cout << out.string() << "\n";
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericError& e) {
    std::cerr << "numerical abort: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
