#pragma once

// The commands behind the CLI: train, eval, probe, bench. Each one takes a
// finalized PipelineConfig, works inside its run directory (under a lock
// file) and leaves its artifacts there.
//
// Run directory layout (output.dir/output.name):
//   config.json        canonical config + hash
//   record.csv         step, loss, tau, grad_norm
//   checkpoint.bin     scorer + denoiser parameters
//   report.json        test metrics of the trained pruner
//   eval/, probe-<mode>/, bench/   outputs of the other commands
// Frozen downstream models are cached in output.dir/cache, keyed by
// downstream_hash.

#include <cstdio>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffprune/bench.hpp"
#include "diffprune/checkpoint.hpp"
#include "diffprune/config.hpp"
#include "diffprune/diagnostics.hpp"
#include "diffprune/error.hpp"
#include "diffprune/io.hpp"
#include "diffprune/report.hpp"
#include "diffprune/training.hpp"

namespace diffprune {

/// Exclusive claim on a run directory for the lifetime of the object.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& dir) : path_(dir / ".lock") {
    std::filesystem::create_directories(dir);
    // "x": fail if the file exists (glibc / C11 exclusive create).
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f) {
      throw IoError("run directory '" + dir.string() + "' is locked by another invocation (remove '" +
                    path_.string() + "' if it is stale)");
    }
    std::fclose(f);
  }
  ~RunLock() {
    std::error_code ec;
    std::filesystem::remove(path_, ec);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::filesystem::path path_;
};

inline void write_json(const std::filesystem::path& path, const nlohmann::ordered_json& j) {
  write_file_atomic(path, j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Frozen downstream model

inline std::filesystem::path downstream_cache_path(const PipelineConfig& c) {
  return std::filesystem::path(c.output.dir) / "cache" / ("downstream-" + downstream_hash(c) + ".bin");
}

/// Loads the cached frozen downstream model for this config, or pretrains
/// and caches it.
inline DownstreamModel obtain_downstream(const PipelineConfig& c, std::ostream* log = nullptr) {
  const auto path = downstream_cache_path(c);
  const std::string hash = downstream_hash(c);
  if (std::filesystem::exists(path)) {
    const auto ck = load_checkpoint(path);
    if (ck.meta.config_hash != hash) throw IoError("downstream cache '" + path.string() + "' has a foreign hash");
    Rng rng(0);
    DownstreamModel m(c.downstream, rng);
    restore_params(ck, collect_params(m));
    m.freeze();
    if (log) *log << "downstream: loaded " << path.string() << "\n";
    return m;
  }
  auto res = pretrain_downstream(c.task, c.downstream, c.pretrain, c.seeds);
  if (log) {
    *log << "downstream: pretrained " << res.steps << " steps, train accuracy " << res.train_accuracy << "\n";
  }
  std::filesystem::create_directories(path.parent_path());
  CheckpointMeta meta;
  meta.config = {{"task", config_to_json(c)["task"]}, {"downstream", config_to_json(c)["downstream"]}};
  meta.config_hash = hash;
  meta.step = res.steps;
  meta.seed = c.seeds.init;
  save_checkpoint(path, meta, collect_params(res.model));
  return std::move(res.model);
}

// ---------------------------------------------------------------------------
// Checkpoints of the trainable pruner

inline std::vector<Param*> pruner_params(Pruner& p) { return collect_params(p); }

inline CheckpointMeta pruner_meta(const PipelineConfig& c, std::size_t step) {
  CheckpointMeta meta;
  meta.config = config_to_json(c, false);  // location-free, so reruns elsewhere are byte-identical
  meta.config_hash = config_hash(c);
  meta.step = step;
  meta.seed = c.seeds.init;
  return meta;
}

/// Loads a pruner checkpoint into `pruner`. Refuses a checkpoint produced
/// under a different model configuration unless `force`.
inline void load_pruner(const PipelineConfig& c, const std::filesystem::path& path, Pruner& pruner, bool force) {
  const auto ck = load_checkpoint(path);
  if (!force) {
    const std::string want = model_hash(c);
    std::string have;
    try {
      have = model_hash(config_from_json(ck.meta.config));
    } catch (const ConfigError& e) {
      throw ConfigError("checkpoint '" + path.string() + "' carries an unreadable config (" + e.what() +
                        "); pass --force to load it anyway");
    }
    if (have != want) {
      throw ConfigError("checkpoint '" + path.string() + "' was produced by config " + ck.meta.config_hash +
                        " whose model settings differ from the current config; pass --force to load it anyway");
    }
  }
  restore_params(ck, pruner_params(pruner));
}

inline Pruner pruner_for(const PipelineConfig& c) { return make_pruner(c.scorer, c.denoiser, c.seeds); }

// ---------------------------------------------------------------------------
// train

inline Csv record_csv(const RunRecord& rec) {
  Csv csv{{"step", "loss", "tau", "grad_norm"}, {}};
  for (const auto& s : rec.steps) csv.rows.push_back({double(s.step), s.loss, s.tau, s.grad_norm});
  return csv;
}

struct TrainResult {
  RunRecord record;
  EvalMetrics test;
  std::filesystem::path dir;
};

inline EvalMetrics test_metrics(const PipelineConfig& c, const ScoreFn& score, DownstreamModel& downstream,
                                std::size_t k, std::size_t batches) {
  return eval_pruner(score, downstream, c.task, k, batches, c.eval.batch_size,
                     [&](std::size_t i) { return test_batch_seed(c.seeds, i); });
}

inline nlohmann::ordered_json metrics_json(const EvalMetrics& m) {
  return {{"accuracy", m.accuracy}, {"signal_recall", m.signal_recall}, {"loss", m.loss}, {"samples", m.samples}};
}

/// Pretrains (or loads) the downstream model, trains the pruner and writes
/// the run directory. On a numerical abort the last good parameters and the
/// record so far are saved before the TrainingAborted propagates.
inline TrainResult cmd_train(const PipelineConfig& c, std::ostream* log = nullptr) {
  const auto dir = c.run_dir();
  RunLock lock(dir);
  write_json(dir / "config.json", {{"config_hash", config_hash(c)}, {"config", config_to_json(c)}});

  DownstreamModel downstream = obtain_downstream(c, log);
  Pruner pruner = pruner_for(c);
  TrainResult out;
  out.dir = dir;
  std::vector<StepRecord> steps;
  auto on_step = [&](const StepRecord& s) {
    steps.push_back(s);
    if (log && (s.step % 100 == 0 || s.step + 1 == c.train.steps)) {
      *log << "step " << s.step << " loss " << s.loss << " tau " << s.tau << " grad_norm " << s.grad_norm << "\n";
    }
  };
  try {
    out.record = train_pruner(c.train, c.task, downstream, pruner, c.seeds, on_step);
  } catch (const TrainingAborted& e) {
    RunRecord partial;
    partial.steps = steps;
    write_csv(dir / "record.csv", record_csv(partial));
    save_checkpoint(dir / "checkpoint.bin", pruner_meta(c, e.step), pruner_params(pruner));
    if (log) *log << "aborted at step " << e.step << "; last good checkpoint saved\n";
    throw;
  }
  write_csv(dir / "record.csv", record_csv(out.record));
  save_checkpoint(dir / "checkpoint.bin", pruner_meta(c, out.record.steps.size()), pruner_params(pruner));

  out.test = test_metrics(c, learned_scorer(pruner.scorer), downstream, c.k, c.eval.batches);
  nlohmann::ordered_json report;
  report["config_hash"] = config_hash(c);
  report["throttle"] = std::string(to_string(c.throttle));
  report["k"] = c.k;
  report["steps_run"] = out.record.steps.size();
  report["early_stopped"] = out.record.early_stopped;
  report["best_step"] = out.record.best_step;
  report["test"] = metrics_json(out.test);
  write_json(dir / "report.json", report);
  if (log) *log << "test accuracy " << out.test.accuracy << " signal_recall " << out.test.signal_recall << "\n";
  return out;
}

// ---------------------------------------------------------------------------
// eval

enum class ScorerSource { learned, random, oracle };

inline ScorerSource parse_scorer_source(std::string_view s) {
  if (s == "learned") return ScorerSource::learned;
  if (s == "random") return ScorerSource::random;
  if (s == "oracle") return ScorerSource::oracle;
  throw ConfigError("unknown scorer '" + std::string(s) + "' (expected learned, random or oracle)");
}

inline std::string_view to_string(ScorerSource s) {
  return s == ScorerSource::learned ? "learned" : s == ScorerSource::random ? "random" : "oracle";
}

struct EvalRequest {
  std::optional<std::filesystem::path> checkpoint;  // default: run_dir/checkpoint.bin
  std::optional<std::size_t> k;                     // default: config k
  std::optional<std::size_t> batches;               // default: eval.batches
  ScorerSource scorer = ScorerSource::learned;
  bool force = false;
};

/// Deployed-path metrics on the test split. Writes run_dir/eval/report.json
/// and returns the same JSON.
inline nlohmann::ordered_json cmd_eval(const PipelineConfig& c, const EvalRequest& req,
                                       std::ostream* log = nullptr) {
  const std::size_t k = req.k.value_or(c.k);
  const std::size_t batches = req.batches.value_or(c.eval.batches);
  if (batches == 0) throw ConfigError("eval: batches must be positive");
  const auto dir = c.run_dir();
  RunLock lock(dir);
  DownstreamModel downstream = obtain_downstream(c, log);
  Pruner pruner = pruner_for(c);
  std::string ckpt_name = "none";
  ScoreFn score;
  switch (req.scorer) {
    case ScorerSource::learned: {
      const auto path = req.checkpoint.value_or(dir / "checkpoint.bin");
      load_pruner(c, path, pruner, req.force);
      ckpt_name = path.string();
      score = learned_scorer(pruner.scorer);
      break;
    }
    case ScorerSource::random: score = random_scorer(derive_seed(c.seeds.init, {9})); break;
    case ScorerSource::oracle: score = oracle_scorer(); break;
  }
  const auto m = test_metrics(c, score, downstream, k, batches);
  nlohmann::ordered_json report;
  report["config_hash"] = config_hash(c);
  report["checkpoint"] = ckpt_name;
  report["scorer"] = std::string(to_string(req.scorer));
  report["k"] = k;
  report["batches"] = batches;
  report["metrics"] = metrics_json(m);
  std::filesystem::create_directories(dir / "eval");
  write_json(dir / "eval" / "report.json", report);
  return report;
}

// ---------------------------------------------------------------------------
// probe

enum class ProbeMode { coherence, landscape, step_variation };

inline ProbeMode parse_probe_mode(std::string_view s) {
  if (s == "coherence") return ProbeMode::coherence;
  if (s == "landscape") return ProbeMode::landscape;
  if (s == "step-variation") return ProbeMode::step_variation;
  throw ConfigError("unknown probe mode '" + std::string(s) + "' (expected coherence, landscape or step-variation)");
}

inline std::string_view to_string(ProbeMode m) {
  return m == ProbeMode::coherence ? "coherence" : m == ProbeMode::landscape ? "landscape" : "step-variation";
}

struct ProbeRequest {
  ProbeMode mode = ProbeMode::coherence;
  std::optional<std::filesystem::path> checkpoint;  // default: the seeded initialization
  std::optional<std::size_t> row;                   // step-variation row; default: centre
  bool force = false;
};

/// The two pipelines a probe compares, on the same parameters and seeds.
struct ProbePaths {
  PathOptions diffprune;
  PathOptions gs;
};

inline ProbePaths probe_paths(const PipelineConfig& c) {
  TrainConfig vp = c.train;
  vp.throttle = ThrottleKind::vp_noise;
  TrainConfig gs = c.train;
  gs.throttle = ThrottleKind::gumbel_ste;
  return {PathOptions{ThrottleKind::vp_noise, c.probe_k(), c.probe.tau, vp.path_uses_denoiser()},
          PathOptions{ThrottleKind::gumbel_ste, c.probe_k(), c.probe.tau, gs.path_uses_denoiser()}};
}

inline ProbeData probe_data(const PipelineConfig& c) {
  return ProbeData{c.task, c.probe.batch_size, derive_seed(c.seeds.data, {5}), c.seeds.noise, c.seeds.gumbel};
}

inline Csv slice_csv(const LandscapeSlice& s) {
  Csv csv{{"beta1", "beta2", "loss"}, {}};
  for (std::size_t i = 0; i < s.side(); ++i) {
    for (std::size_t j = 0; j < s.side(); ++j) csv.rows.push_back({s.beta(i), s.beta(j), s.at(i, j)});
  }
  return csv;
}

inline Csv coherence_csv(const CoherenceReport& r) {
  Csv csv{{"i", "j", "cosine"}, {}};
  for (const auto& p : r.pairs) csv.rows.push_back({double(p.i), double(p.j), p.cosine});
  return csv;
}

inline Csv variation_csv(const LandscapeSlice& s, const StepVariationReport& v) {
  Csv csv{{"beta2", "step"}, {}};
  for (std::size_t j = 0; j < v.steps.size(); ++j) csv.rows.push_back({0.5 * (s.beta(j) + s.beta(j + 1)), v.steps[j]});
  return csv;
}

inline double max_finite(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) {
    if (std::isfinite(x)) m = std::max(m, x);
  }
  return m;
}

/// Runs one diagnostic on both pipelines with shared parameters and seeds.
/// Writes run_dir/probe-<mode>/{diffprune,gumbel-ste}/*.csv and report.json.
///   coherence:                 ratio = mean_diffprune / mean_gs (higher favours DiffPrune)
///   landscape, step-variation: ratio = mean_gs / mean_diffprune of the stepwise
///                              variation along d2 (higher favours DiffPrune)
inline nlohmann::ordered_json cmd_probe(const PipelineConfig& c, const ProbeRequest& req,
                                        std::ostream* log = nullptr) {
  const auto run = c.run_dir();
  RunLock lock(run);
  DownstreamModel downstream = obtain_downstream(c, log);
  Pruner pruner = pruner_for(c);
  std::string ckpt_name = "init";
  if (req.checkpoint) {
    load_pruner(c, *req.checkpoint, pruner, req.force);
    ckpt_name = req.checkpoint->string();
  }
  const auto paths = probe_paths(c);
  const auto data = probe_data(c);
  PrunerModels models{&pruner.scorer, &pruner.denoiser, &downstream};

  const auto dir = run / ("probe-" + std::string(to_string(req.mode)));
  std::filesystem::create_directories(dir / "diffprune");
  std::filesystem::create_directories(dir / "gumbel-ste");

  nlohmann::ordered_json report;
  report["mode"] = std::string(to_string(req.mode));
  report["config_hash"] = config_hash(c);
  report["checkpoint"] = ckpt_name;
  report["k"] = c.probe_k();
  report["tau"] = c.probe.tau;

  if (req.mode == ProbeMode::coherence) {
    const auto a = grad_coherence(models, paths.diffprune, data, c.probe.batches, c.probe.metric);
    const auto b = grad_coherence(models, paths.gs, data, c.probe.batches, c.probe.metric);
    write_csv(dir / "diffprune" / "coherence.csv", coherence_csv(a));
    write_csv(dir / "gumbel-ste" / "coherence.csv", coherence_csv(b));
    report["metric"] = std::string(to_string(c.probe.metric));
    report["batches"] = c.probe.batches;
    report["mean_diffprune"] = a.mean;
    report["mean_gs"] = b.mean;
    report["ratio"] = a.mean / b.mean;
    report["std_diffprune"] = a.stddev;
    report["std_gs"] = b.stddev;
    report["excluded_diffprune"] = a.excluded;
    report["excluded_gs"] = b.excluded;
  } else {
    const std::size_t R = c.probe.radius;
    const std::size_t row = req.row.value_or(R);
    if (row > 2 * R) throw ConfigError("probe: row " + std::to_string(row) + " outside the grid");
    if (log) *log << "landscape: " << (2 * R + 1) * (2 * R + 1) << " points per pipeline\n";
    const auto a = path_landscape(models, paths.diffprune, data, R, c.seeds.directions);
    const auto b = path_landscape(models, paths.gs, data, R, c.seeds.directions);
    const auto va = step_variation(a, row);
    const auto vb = step_variation(b, row);
    write_csv(dir / "diffprune" / "slice.csv", slice_csv(a));
    write_csv(dir / "gumbel-ste" / "slice.csv", slice_csv(b));
    write_csv(dir / "diffprune" / "variation.csv", variation_csv(a, va));
    write_csv(dir / "gumbel-ste" / "variation.csv", variation_csv(b, vb));
    report["radius"] = R;
    report["row"] = row;
    report["mean_diffprune"] = va.mean;
    report["mean_gs"] = vb.mean;
    report["ratio"] = vb.mean / va.mean;
    report["max_jump_diffprune"] = max_finite(va.steps);
    report["max_jump_gs"] = max_finite(vb.steps);
    report["center_loss_diffprune"] = a.center_loss;
    report["center_loss_gs"] = b.center_loss;
    report["nonfinite_diffprune"] = a.nonfinite;
    report["nonfinite_gs"] = b.nonfinite;
  }
  write_json(dir / "report.json", report);
  return report;
}

// ---------------------------------------------------------------------------
// bench

inline nlohmann::ordered_json latency_json(const LatencyStats& s) {
  return {{"median_ms", s.median_ms}, {"p95_ms", s.p95_ms}, {"mean_ms", s.mean_ms}, {"samples_ms", s.samples_ms}};
}

/// Pruner-only latency at bench.n tokens. Uses the checkpoint when given,
/// otherwise the seeded initialization (latency does not depend on values).
inline std::pair<BenchReport, nlohmann::ordered_json> cmd_bench(const PipelineConfig& c,
                                                                const std::optional<std::filesystem::path>& ckpt,
                                                                bool force) {
  const auto dir = c.run_dir();
  RunLock lock(dir);
  Pruner pruner = pruner_for(c);
  if (ckpt) load_pruner(c, *ckpt, pruner, force);
  BenchOptions opt{c.bench.n, c.bench.k, c.bench.trials, c.bench.warmup, c.train.tau.tau_start,
                   derive_seed(c.seeds.data, {6})};
  auto rep = bench_pruner(pruner.scorer, pruner.denoiser, opt);
  nlohmann::ordered_json j;
  j["config_hash"] = config_hash(c);
  j["n"] = opt.n;
  j["k"] = opt.k;
  j["trials"] = opt.trials;
  j["warmup"] = opt.warmup;
  j["inference"] = latency_json(rep.inference);
  j["training"] = latency_json(rep.training);
  j["speedup_median"] = rep.speedup();
  j["inference_ops"] = rep.inference_ops;
  j["training_ops"] = rep.training_ops;
  j["inference_excludes_train_only"] = rep.inference_excludes_train_only();
  std::filesystem::create_directories(dir / "bench");
  write_json(dir / "bench" / "report.json", j);
  return {std::move(rep), std::move(j)};
}

}  // namespace diffprune
