#pragma once

// Run configuration: one TOML file plus `--set dotted.key=value` overrides.
// Every field is visited through visit_fields(), which drives parsing,
// canonical serialization and hashing alike.

#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#define TOML_EXCEPTIONS 1
#include <toml.hpp>
#include <json.hpp>

#include "diffprune/diagnostics.hpp"
#include "diffprune/error.hpp"
#include "diffprune/io.hpp"
#include "diffprune/models.hpp"
#include "diffprune/task.hpp"
#include "diffprune/throttler.hpp"
#include "diffprune/training.hpp"

namespace diffprune {

struct ProbeConfig {
  double keep_ratio = 0.3;
  std::size_t batches = 8;
  std::size_t batch_size = 32;
  std::size_t radius = 12;
  double tau = 2.0;
  CoherenceMetric metric = CoherenceMetric::pairwise;
};

struct EvalConfig {
  std::size_t batches = 8;
  std::size_t batch_size = 32;
};

struct BenchConfig {
  std::size_t n = 576;
  std::size_t k = 64;
  std::size_t trials = 30;
  std::size_t warmup = 3;
};

struct OutputConfig {
  std::string dir = "run";
  std::string name = "default";
};

struct PipelineConfig {
  ThrottleKind throttle = ThrottleKind::vp_noise;
  std::size_t k = 8;
  SyntheticTask task;
  ScorerConfig scorer;
  DenoiserConfig denoiser;
  DownstreamConfig downstream;
  PretrainConfig pretrain;
  TrainConfig train;
  ProbeConfig probe;
  EvalConfig eval;
  BenchConfig bench;
  Seeds seeds;
  OutputConfig output;

  /// Copies shared values into the sub-configs (token width, class count,
  /// throttle, budget) and checks every constraint.
  void finalize();

  std::filesystem::path run_dir() const { return std::filesystem::path(output.dir) / output.name; }
  std::size_t probe_k() const;
};

/// Calls f(key, field) for every configurable field, in canonical order.
template <class C, class F>
void visit_fields(C& c, F&& f) {
  f("throttle", c.throttle);
  f("k", c.k);
  f("task.n_tokens", c.task.n_tokens);
  f("task.dim", c.task.dim);
  f("task.classes", c.task.classes);
  f("task.signal_count", c.task.signal_count);
  f("task.signal_snr", c.task.signal_snr);
  f("scorer.hidden_dim", c.scorer.hidden_dim);
  f("scorer.heads", c.scorer.heads);
  f("scorer.blocks", c.scorer.blocks);
  f("scorer.ffn_dim", c.scorer.ffn_dim);
  f("denoiser.heads", c.denoiser.heads);
  f("denoiser.ffn_dim", c.denoiser.ffn_dim);
  f("denoiser.mask", c.denoiser.mask);
  f("denoiser.zero_init_residual", c.denoiser.zero_init_residual);
  f("downstream.hidden_dim", c.downstream.hidden_dim);
  f("downstream.heads", c.downstream.heads);
  f("downstream.blocks", c.downstream.blocks);
  f("downstream.ffn_dim", c.downstream.ffn_dim);
  f("pretrain.lr", c.pretrain.lr);
  f("pretrain.batch", c.pretrain.batch);
  f("pretrain.max_steps", c.pretrain.max_steps);
  f("pretrain.target_accuracy", c.pretrain.target_accuracy);
  f("pretrain.abort_accuracy", c.pretrain.abort_accuracy);
  f("train.lr", c.train.lr);
  f("train.batch", c.train.batch);
  f("train.steps", c.train.steps);
  f("train.tau_start", c.train.tau.tau_start);
  f("train.tau_end", c.train.tau.tau_end);
  f("train.tau_steps", c.train.tau.total_steps);
  f("train.weight_decay", c.train.weight_decay);
  f("train.clip_norm", c.train.clip_norm);
  f("train.use_denoiser", c.train.use_denoiser);
  f("train.denoiser_with_gumbel", c.train.denoiser_with_gumbel);
  f("train.early_stopping", c.train.early_stopping);
  f("train.eval_every", c.train.eval_every);
  f("train.patience", c.train.patience);
  f("train.val_batches", c.train.val_batches);
  f("train.budget_check_every", c.train.budget_check_every);
  f("probe.keep_ratio", c.probe.keep_ratio);
  f("probe.batches", c.probe.batches);
  f("probe.batch_size", c.probe.batch_size);
  f("probe.radius", c.probe.radius);
  f("probe.tau", c.probe.tau);
  f("probe.metric", c.probe.metric);
  f("eval.batches", c.eval.batches);
  f("eval.batch_size", c.eval.batch_size);
  f("bench.n", c.bench.n);
  f("bench.k", c.bench.k);
  f("bench.trials", c.bench.trials);
  f("bench.warmup", c.bench.warmup);
  f("seeds.data", c.seeds.data);
  f("seeds.init", c.seeds.init);
  f("seeds.noise", c.seeds.noise);
  f("seeds.gumbel", c.seeds.gumbel);
  f("seeds.directions", c.seeds.directions);
  f("output.dir", c.output.dir);
  f("output.name", c.output.name);
}

namespace detail {

template <class T>
constexpr bool is_enum_field = std::is_same_v<T, ThrottleKind> || std::is_same_v<T, AttentionMask> ||
                               std::is_same_v<T, CoherenceMetric>;

template <class T>
T parse_enum(std::string_view s) {
  if constexpr (std::is_same_v<T, ThrottleKind>) return parse_throttle_kind(s);
  if constexpr (std::is_same_v<T, AttentionMask>) return parse_attention_mask(s);
  if constexpr (std::is_same_v<T, CoherenceMetric>) return parse_coherence_metric(s);
}

inline std::string node_type(const toml::node& n) {
  if (n.is_integer()) return "integer";
  if (n.is_floating_point()) return "float";
  if (n.is_boolean()) return "boolean";
  if (n.is_string()) return "string";
  if (n.is_table()) return "table";
  if (n.is_array()) return "array";
  return "value";
}

template <class T>
void assign(std::string_view key, T& field, const toml::node& n) {
  auto fail = [&](std::string_view want) {
    throw ConfigError(std::string(key) + ": expected " + std::string(want) + ", got " + node_type(n));
  };
  if constexpr (std::is_same_v<T, bool>) {
    if (!n.is_boolean()) fail("true or false");
    field = *n.value<bool>();
  } else if constexpr (std::is_same_v<T, std::size_t>) {
    if (!n.is_integer()) fail("a non-negative integer");
    const auto v = *n.value<std::int64_t>();
    if (v < 0) throw ConfigError(std::string(key) + ": must be >= 0, got " + std::to_string(v));
    field = static_cast<std::size_t>(v);
  } else if constexpr (std::is_same_v<T, double>) {
    if (!n.is_number()) fail("a number");
    field = *n.value<double>();
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!n.is_string()) fail("a string");
    field = *n.value<std::string>();
  } else if constexpr (is_enum_field<T>) {
    if (!n.is_string()) fail("a string");
    try {
      field = parse_enum<T>(*n.value<std::string>());
    } catch (const ConfigError& e) {
      throw ConfigError(std::string(key) + ": " + e.what());
    }
  } else {
    static_assert(sizeof(T) == 0, "unsupported config field type");
  }
}

template <class T>
nlohmann::ordered_json to_json_value(const T& v) {
  if constexpr (is_enum_field<T>) {
    return std::string(to_string(v));
  } else {
    return v;
  }
}

inline void flatten(const toml::table& t, const std::string& prefix,
                    std::vector<std::pair<std::string, const toml::node*>>& out) {
  for (const auto& [k, v] : t) {
    const std::string key = prefix.empty() ? std::string(k.str()) : prefix + "." + std::string(k.str());
    if (const auto* sub = v.as_table()) {
      flatten(*sub, key, out);
    } else {
      out.emplace_back(key, &v);
    }
  }
}

}  // namespace detail

/// Sets one field from a parsed TOML value; unknown keys are errors.
inline void set_field(PipelineConfig& c, std::string_view key, const toml::node& value) {
  bool found = false;
  visit_fields(c, [&](std::string_view k, auto& field) {
    if (k == key) {
      detail::assign(k, field, value);
      found = true;
    }
  });
  if (!found) throw ConfigError("unknown config key '" + std::string(key) + "'");
}

/// Applies "dotted.key=value". The value uses TOML syntax; a bare word that
/// is not valid TOML (e.g. vp-noise) is taken as a string.
inline void apply_override(PipelineConfig& c, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ConfigError("override '" + std::string(assignment) + "' is not of the form key=value");
  }
  const std::string key(assignment.substr(0, eq));
  const std::string raw(assignment.substr(eq + 1));
  bool string_field = false;
  visit_fields(c, [&](std::string_view k, const auto& field) {
    if (k == key) string_field = std::is_same_v<std::decay_t<decltype(field)>, std::string>;
  });
  toml::table parsed;
  try {
    parsed = toml::parse("v = " + raw);
    // a bare word such as nan or inf names a string field, not a float
    if (string_field && !parsed.get("v")->is_string()) parsed = toml::table{{"v", raw}};
  } catch (const toml::parse_error&) {
    parsed = toml::table{{"v", raw}};
  }
  set_field(c, key, *parsed.get("v"));
}

inline void apply_toml(PipelineConfig& c, const toml::table& t) {
  std::vector<std::pair<std::string, const toml::node*>> entries;
  detail::flatten(t, "", entries);
  for (const auto& [key, node] : entries) set_field(c, key, *node);
}

inline PipelineConfig parse_config_string(std::string_view text, std::string_view source = "config") {
  PipelineConfig c;
  try {
    apply_toml(c, toml::parse(text, source));
  } catch (const toml::parse_error& e) {
    std::ostringstream os;
    os << source << ":" << e.source().begin.line << ":" << e.source().begin.column << ": " << e.description();
    throw ConfigError(os.str());
  }
  return c;
}

inline PipelineConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {}) {
  if (!std::filesystem::exists(path)) throw IoError("config file '" + path.string() + "' not found");
  PipelineConfig c = parse_config_string(read_file(path), path.string());
  for (const auto& o : overrides) apply_override(c, o);
  c.finalize();
  return c;
}

/// Built-in defaults plus overrides.
inline PipelineConfig default_config(const std::vector<std::string>& overrides = {}) {
  PipelineConfig c;
  for (const auto& o : overrides) apply_override(c, o);
  c.finalize();
  return c;
}

inline void PipelineConfig::finalize() {
  task.seed = seeds.data;
  task.validate();
  scorer.input_dim = task.dim;
  scorer.validate();
  denoiser.dim = task.dim;
  denoiser.block().validate("denoiser");
  downstream.input_dim = task.dim;
  downstream.classes = task.classes;
  downstream.max_positions = task.n_tokens;
  downstream.block().validate("downstream");
  train.throttle = throttle;
  train.k = k;
  if (k < 1 || k >= task.n_tokens) {
    throw ConfigError("k: budget " + std::to_string(k) + " outside [1, " + std::to_string(task.n_tokens) + ")");
  }
  train.validate(task);
  if (pretrain.batch == 0 || pretrain.max_steps == 0) throw ConfigError("pretrain: batch and max_steps must be positive");
  if (!(probe.keep_ratio > 0.0 && probe.keep_ratio < 1.0)) throw ConfigError("probe.keep_ratio must be in (0, 1)");
  if (probe.batches < 2) throw ConfigError("probe.batches must be >= 2");
  if (probe.radius < 2) throw ConfigError("probe.radius must be >= 2");
  if (!(probe.tau > 0.0)) throw ConfigError("probe.tau must be > 0");
  if (probe.batch_size == 0 || eval.batches == 0 || eval.batch_size == 0) {
    throw ConfigError("probe.batch_size, eval.batches and eval.batch_size must be positive");
  }
  if (bench.trials < 10) throw ConfigError("bench.trials must be >= 10, got " + std::to_string(bench.trials));
  if (bench.k < 1 || bench.k > bench.n) throw ConfigError("bench.k must be in [1, bench.n]");
  if (output.name.empty() || output.name.find('/') != std::string::npos) {
    throw ConfigError("output.name must be a non-empty name without '/'");
  }
}

inline std::size_t PipelineConfig::probe_k() const {
  const auto kk = static_cast<std::size_t>(std::lround(probe.keep_ratio * static_cast<double>(task.n_tokens)));
  return std::clamp<std::size_t>(kk, 1, task.n_tokens - 1);
}

/// Canonical JSON form: every field, fixed order, nested by dotted key.
inline nlohmann::ordered_json config_to_json(const PipelineConfig& c, bool include_output = true) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  visit_fields(c, [&](std::string_view key, const auto& field) {
    if (!include_output && key.starts_with("output.")) return;
    nlohmann::ordered_json* node = &j;
    std::string_view rest = key;
    for (auto dot = rest.find('.'); dot != std::string_view::npos; dot = rest.find('.')) {
      node = &(*node)[std::string(rest.substr(0, dot))];
      rest = rest.substr(dot + 1);
    }
    (*node)[std::string(rest)] = detail::to_json_value(field);
  });
  return j;
}

/// Rebuilds a configuration from its canonical JSON form.
inline PipelineConfig config_from_json(const nlohmann::ordered_json& j) {
  PipelineConfig c;
  visit_fields(c, [&](std::string_view key, auto& field) {
    std::string path = "/" + std::string(key);
    std::replace(path.begin(), path.end(), '.', '/');
    const nlohmann::ordered_json::json_pointer ptr(path);
    if (!j.contains(ptr)) {
      if (key.starts_with("output.")) return;  // location-free forms omit it
      throw ConfigError("stored config lacks '" + std::string(key) + "'");
    }
    using T = std::decay_t<decltype(field)>;
    try {
      if constexpr (detail::is_enum_field<T>) {
        field = detail::parse_enum<T>(j.at(ptr).template get<std::string>());
      } else {
        field = j.at(ptr).template get<T>();
      }
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("stored config field '" + std::string(key) + "': " + e.what());
    }
  });
  c.finalize();
  return c;
}

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char b : bytes) h = (h ^ b) * 0x100000001b3ULL;
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

/// Identifies a run: hash of the canonical form without output location.
inline std::string config_hash(const PipelineConfig& c) { return hex64(fnv1a64(config_to_json(c, false).dump())); }

/// Identifies what a checkpoint's parameters depend on: everything except
/// the probe, eval, bench and output sections.
inline std::string model_hash(const PipelineConfig& c) {
  auto j = config_to_json(c, false);
  for (const char* s : {"probe", "eval", "bench"}) j.erase(s);
  return hex64(fnv1a64(j.dump()));
}

/// Identifies the frozen downstream model: only what pretraining reads.
inline std::string downstream_hash(const PipelineConfig& c) {
  const auto full = config_to_json(c, false);
  nlohmann::ordered_json j;
  j["task"] = full["task"];
  j["downstream"] = full["downstream"];
  j["pretrain"] = full["pretrain"];
  j["seeds"] = {{"data", c.seeds.data}, {"init", c.seeds.init}};
  return hex64(fnv1a64(j.dump()));
}

/// Human-editable TOML rendering of the canonical form.
inline std::string config_to_toml(const PipelineConfig& c) {
  std::ostringstream os;
  std::string section;
  visit_fields(c, [&](std::string_view key, const auto& field) {
    const auto dot = key.find('.');
    const std::string sec = dot == std::string_view::npos ? "" : std::string(key.substr(0, dot));
    const std::string name(dot == std::string_view::npos ? key : key.substr(dot + 1));
    if (sec != section) {
      os << "\n[" << sec << "]\n";
      section = sec;
    }
    os << name << " = " << detail::to_json_value(field).dump() << "\n";
  });
  return os.str();
}

}  // namespace diffprune
