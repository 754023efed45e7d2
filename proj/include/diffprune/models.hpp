#pragma once

// Scorer, denoiser and the frozen downstream classifier. All three are built
// from the same pre-layernorm transformer block; only the attention mask and
// the surrounding projections differ.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "diffprune/autodiff.hpp"
#include "diffprune/error.hpp"
#include "diffprune/rng.hpp"
#include "diffprune/tensor.hpp"

namespace diffprune {

using ad::NodeId;
using ad::Param;

inline Param init_param(std::string name, Shape shape, Rng& rng, double stddev) {
  if (stddev == 0.0) return Param(std::move(name), Tensor(std::move(shape)));
  return Param(std::move(name), randn(std::move(shape), rng, stddev));
}

struct Linear {
  Param weight;  // [in, out]
  Param bias;    // [out]

  Linear() = default;
  Linear(const std::string& name, std::size_t in, std::size_t out, Rng& rng, std::optional<double> stddev = {})
      : weight(init_param(name + ".weight", Shape{in, out}, rng, stddev.value_or(1.0 / std::sqrt(double(in))))),
        bias(name + ".bias", Tensor(Shape{out})) {}

  NodeId operator()(ad::Graph& g, NodeId x) { return g.add(g.matmul(x, g.param(weight)), g.param(bias)); }

  template <class F>
  void for_each_param(F&& f) {
    f(weight);
    f(bias);
  }
};

struct LayerNorm {
  Param gamma;
  Param beta;

  LayerNorm() = default;
  LayerNorm(const std::string& name, std::size_t dim)
      : gamma(name + ".gamma", Tensor(Shape{dim}, 1.0)), beta(name + ".beta", Tensor(Shape{dim})) {}

  NodeId operator()(ad::Graph& g, NodeId x) { return g.layernorm(x, g.param(gamma), g.param(beta)); }

  template <class F>
  void for_each_param(F&& f) {
    f(gamma);
    f(beta);
  }
};

enum class AttentionMask { identity, full };

inline std::string_view to_string(AttentionMask m) { return m == AttentionMask::identity ? "identity" : "full"; }

inline AttentionMask parse_attention_mask(std::string_view s) {
  if (s == "identity") return AttentionMask::identity;
  if (s == "full") return AttentionMask::full;
  throw ConfigError("unknown attention mask '" + std::string(s) + "' (expected identity or full)");
}

// Additive mask value; exp() of it underflows to exactly zero, so masked
// positions contribute exact zeros rather than tiny weights.
inline constexpr double kMaskedLogit = -1e9;

inline Tensor identity_attention_mask(std::size_t n) {
  Tensor m(Shape{n, n}, kMaskedLogit);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 0.0;
  return m;
}

struct BlockConfig {
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t ffn_dim = 128;

  void validate(std::string_view what) const {
    if (dim == 0 || heads == 0 || ffn_dim == 0) throw ConfigError(std::string(what) + ": dimensions must be positive");
    if (dim % heads != 0) {
      throw ConfigError(std::string(what) + ": hidden_dim " + std::to_string(dim) + " not divisible by heads " +
                        std::to_string(heads));
    }
  }
};

/// Multi-head self-attention with per-head projections; heads are summed
/// through per-head output projections instead of concatenated.
struct Attention {
  std::vector<Linear> q, k, v;
  std::vector<Param> out;  // per head [head_dim, dim]
  Param out_bias;
  std::size_t head_dim = 0;

  Attention() = default;
  Attention(const std::string& name, const BlockConfig& cfg, Rng& rng, double out_std) : head_dim(cfg.dim / cfg.heads) {
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      const std::string hn = std::to_string(h);
      q.emplace_back(name + ".q." + hn, cfg.dim, head_dim, rng);
      k.emplace_back(name + ".k." + hn, cfg.dim, head_dim, rng);
      v.emplace_back(name + ".v." + hn, cfg.dim, head_dim, rng);
      out.push_back(init_param(name + ".out." + hn, Shape{head_dim, cfg.dim}, rng, out_std));
    }
    out_bias = Param(name + ".out_bias", Tensor(Shape{cfg.dim}));
  }

  NodeId operator()(ad::Graph& g, NodeId x, std::optional<NodeId> mask) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
    std::optional<NodeId> acc;
    for (std::size_t h = 0; h < q.size(); ++h) {
      auto qh = q[h](g, x);
      auto kh = k[h](g, x);
      auto vh = v[h](g, x);
      auto scores = g.scalar_mul(g.matmul(qh, g.transpose(kh)), scale);
      if (mask) scores = g.add(scores, *mask);
      auto heads = g.matmul(g.matmul(g.softmax(scores), vh), g.param(out[h]));
      acc = acc ? g.add(*acc, heads) : heads;
    }
    return g.add(*acc, g.param(out_bias));
  }

  template <class F>
  void for_each_param(F&& f) {
    for (std::size_t h = 0; h < q.size(); ++h) {
      q[h].for_each_param(f);
      k[h].for_each_param(f);
      v[h].for_each_param(f);
      f(out[h]);
    }
    f(out_bias);
  }
};

/// Pre-layernorm transformer block with a GELU feed-forward.
struct Block {
  LayerNorm ln1;
  Attention attn;
  LayerNorm ln2;
  Linear fc1;
  Linear fc2;

  Block() = default;
  Block(const std::string& name, const BlockConfig& cfg, Rng& rng, std::optional<double> residual_std = {})
      : ln1(name + ".ln1", cfg.dim),
        attn(name + ".attn", cfg, rng, residual_std.value_or(1.0 / std::sqrt(double(cfg.dim / cfg.heads)))),
        ln2(name + ".ln2", cfg.dim),
        fc1(name + ".fc1", cfg.dim, cfg.ffn_dim, rng),
        fc2(name + ".fc2", cfg.ffn_dim, cfg.dim, rng, residual_std.value_or(1.0 / std::sqrt(double(cfg.ffn_dim)))) {}

  NodeId operator()(ad::Graph& g, NodeId x, std::optional<NodeId> mask) {
    auto h = g.add(x, attn(g, ln1(g, x), mask));
    return g.add(h, fc2(g, g.gelu(fc1(g, ln2(g, h)))));
  }

  template <class F>
  void for_each_param(F&& f) {
    ln1.for_each_param(f);
    attn.for_each_param(f);
    ln2.for_each_param(f);
    fc1.for_each_param(f);
    fc2.for_each_param(f);
  }
};

template <class Model>
std::vector<Param*> collect_params(Model& m) {
  std::vector<Param*> out;
  m.for_each_param([&](Param& p) { out.push_back(&p); });
  return out;
}

template <class Model>
std::size_t count_trainable(Model& m) {
  std::size_t n = 0;
  m.for_each_param([&](Param& p) { n += p.trainable ? p.value.numel() : 0; });
  return n;
}

/// FNV-1a over the raw bytes of every parameter value, in declaration order.
template <class Model>
std::uint64_t param_checksum(Model& m) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  m.for_each_param([&](Param& p) {
    for (double v : p.value.data()) {
      unsigned char bytes[sizeof(double)];
      std::memcpy(bytes, &v, sizeof v);
      for (unsigned char b : bytes) h = (h ^ b) * 0x100000001b3ULL;
    }
  });
  return h;
}

// ---------------------------------------------------------------------------

struct ScorerConfig {
  std::size_t input_dim = 32;
  std::size_t hidden_dim = 64;
  std::size_t heads = 4;
  std::size_t blocks = 2;
  std::size_t ffn_dim = 128;

  BlockConfig block() const { return {hidden_dim, heads, ffn_dim}; }
  void validate() const {
    if (input_dim == 0 || blocks == 0) throw ConfigError("scorer: input_dim and blocks must be positive");
    block().validate("scorer");
  }
};

/// Closed-form parameter count of a Scorer with this configuration.
inline std::size_t scorer_param_formula(const ScorerConfig& c) {
  const std::size_t d = c.input_dim, h = c.hidden_dim, f = c.ffn_dim;
  const std::size_t block = 4 * h            // two layernorms
                            + 4 * h * h + 4 * h  // q, k, v (+bias) and output projection (+bias)
                            + 2 * h * f + f + h;  // feed-forward
  return (d * h + h) + c.blocks * block + 2 * h + (h + 1);
}

/// Token encoder (no positional encoding, so permutation-equivariant) with a
/// linear head emitting one logit per token.
struct Scorer {
  ScorerConfig config;
  Linear in_proj;
  std::vector<Block> blocks;
  LayerNorm ln_f;
  Linear head;

  Scorer() = default;
  Scorer(const ScorerConfig& cfg, Rng& rng) : config(cfg) {
    cfg.validate();
    in_proj = Linear("scorer.in_proj", cfg.input_dim, cfg.hidden_dim, rng);
    for (std::size_t b = 0; b < cfg.blocks; ++b) {
      blocks.emplace_back("scorer.blocks." + std::to_string(b), cfg.block(), rng);
    }
    ln_f = LayerNorm("scorer.ln_f", cfg.hidden_dim);
    head = Linear("scorer.head", cfg.hidden_dim, 1, rng);
  }

  /// Returns the length-N score vector.
  NodeId operator()(ad::Graph& g, NodeId x) {
    auto scope = g.scope("scorer");
    const Tensor& X = g.value(x);
    if (X.rank() != 2 || X.cols() != config.input_dim) {
      throw ShapeError("scorer: expected N x " + std::to_string(config.input_dim) + " tokens, got " +
                       shape_str(X.shape()));
    }
    const std::size_t n = X.rows();
    auto h = in_proj(g, x);
    for (auto& b : blocks) h = b(g, h, std::nullopt);
    return g.reshape(head(g, ln_f(g, h)), Shape{n});
  }

  template <class F>
  void for_each_param(F&& f) {
    in_proj.for_each_param(f);
    for (auto& b : blocks) b.for_each_param(f);
    ln_f.for_each_param(f);
    head.for_each_param(f);
  }
};

struct DenoiserConfig {
  std::size_t dim = 32;
  std::size_t heads = 4;
  std::size_t ffn_dim = 64;
  AttentionMask mask = AttentionMask::identity;
  // Output projections start at zero so the untrained denoiser is the identity.
  bool zero_init_residual = true;

  BlockConfig block() const { return {dim, heads, ffn_dim}; }
};

/// Single transformer block over throttled tokens. With the identity mask
/// each output token depends on its own input token only.
struct Denoiser {
  DenoiserConfig config;
  Block block;

  Denoiser() = default;
  Denoiser(const DenoiserConfig& cfg, Rng& rng) : config(cfg) {
    cfg.block().validate("denoiser");
    block = Block("denoiser.block", cfg.block(), rng,
                  cfg.zero_init_residual ? std::optional<double>(0.0) : std::nullopt);
  }

  NodeId operator()(ad::Graph& g, NodeId x) {
    auto scope = g.scope("denoiser");
    const Tensor& X = g.value(x);
    if (X.rank() != 2 || X.cols() != config.dim) {
      throw ShapeError("denoiser: expected N x " + std::to_string(config.dim) + " tokens, got " + shape_str(X.shape()));
    }
    std::optional<NodeId> mask;
    if (config.mask == AttentionMask::identity) mask = g.constant(identity_attention_mask(X.rows()));
    return block(g, x, mask);
  }

  template <class F>
  void for_each_param(F&& f) {
    block.for_each_param(f);
  }
};

struct DownstreamConfig {
  std::size_t input_dim = 32;
  std::size_t hidden_dim = 32;
  std::size_t heads = 4;
  std::size_t blocks = 2;
  std::size_t ffn_dim = 64;
  std::size_t classes = 8;
  std::size_t max_positions = 64;

  BlockConfig block() const { return {hidden_dim, heads, ffn_dim}; }
};

/// Stand-in for the frozen consumer of the (pruned) token sequence: token
/// embedding plus learned positional embedding indexed by each token's
/// original position, a class query token, transformer blocks and a linear
/// classification head read from the query token.
struct DownstreamModel {
  DownstreamConfig config;
  Linear embed;
  Param positions;  // [max_positions, hidden]
  Param cls;        // [1, hidden]
  std::vector<Block> blocks;
  LayerNorm ln_f;
  Linear head;
  bool frozen = false;

  DownstreamModel() = default;
  DownstreamModel(const DownstreamConfig& cfg, Rng& rng) : config(cfg) {
    cfg.block().validate("downstream");
    if (cfg.classes < 2) throw ConfigError("downstream: need at least two classes");
    embed = Linear("downstream.embed", cfg.input_dim, cfg.hidden_dim, rng);
    positions = init_param("downstream.positions", Shape{cfg.max_positions, cfg.hidden_dim}, rng, 0.1);
    cls = init_param("downstream.cls", Shape{1, cfg.hidden_dim}, rng, 0.1);
    for (std::size_t b = 0; b < cfg.blocks; ++b) {
      blocks.emplace_back("downstream.blocks." + std::to_string(b), cfg.block(), rng);
    }
    ln_f = LayerNorm("downstream.ln_f", cfg.hidden_dim);
    head = Linear("downstream.head", cfg.hidden_dim, cfg.classes, rng);
  }

  void freeze() {
    frozen = true;
    for_each_param([](Param& p) { p.trainable = false; });
  }

  /// Class logits [1, C] for tokens at the given original positions.
  NodeId operator()(ad::Graph& g, NodeId x, std::span<const std::size_t> token_positions) {
    auto scope = g.scope("downstream");
    const Tensor& X = g.value(x);
    if (X.rank() != 2 || X.cols() != config.input_dim) {
      throw ShapeError("downstream: expected K x " + std::to_string(config.input_dim) + " tokens, got " +
                       shape_str(X.shape()));
    }
    if (token_positions.size() != X.rows()) throw ShapeError("downstream: one position per token required");
    for (auto p : token_positions) {
      if (p >= config.max_positions) throw ShapeError("downstream: position index beyond max_positions");
    }
    auto e = g.add(embed(g, x), g.gather_rows(g.param(positions),
                                               std::vector<std::size_t>(token_positions.begin(), token_positions.end())));
    auto h = g.concat_rows({g.param(cls), e});
    for (auto& b : blocks) h = b(g, h, std::nullopt);
    auto q = g.gather_rows(ln_f(g, h), {0});
    return head(g, q);
  }

  template <class F>
  void for_each_param(F&& f) {
    embed.for_each_param(f);
    f(positions);
    f(cls);
    for (auto& b : blocks) b.for_each_param(f);
    ln_f.for_each_param(f);
    head.for_each_param(f);
  }
};

}  // namespace diffprune
