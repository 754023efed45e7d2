#pragma once

// Random single-op gradient cases: inputs, a graph builder and a fixed
// random weighting that scalarizes the op's output.

#include <functional>
#include <random>
#include <stdexcept>
#include <vector>

#include "diffprune/autodiff.hpp"
#include "diffprune/rng.hpp"
#include "fd_oracle.hpp"

namespace diffprune::testing {

using ad::Graph;
using ad::NodeId;
using ad::OpKind;

using Builder = std::function<NodeId(Graph&, const std::vector<NodeId>&)>;

struct OpCase {
  std::vector<Tensor> inputs;
  Builder build;
  std::uint64_t seed;

  double loss(std::vector<Tensor>* grads = nullptr) const {
    Graph g;
    std::vector<NodeId> ids;
    for (const auto& t : inputs) ids.push_back(g.variable(t));
    auto out = build(g, ids);
    auto w = g.constant(randn(g.value(out).shape(), seed));
    auto l = g.sum(g.mul(out, w));
    if (grads) {
      g.backward(l);
      grads->clear();
      for (auto id : ids) grads->push_back(g.grad(id) ? *g.grad(id) : Tensor(g.value(id).shape()));
    }
    return g.value(l).item();
  }

  double max_error() {
    std::vector<Tensor> analytic;
    loss(&analytic);
    double worst = 0.0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      auto fd = central_diff(inputs[i].data(), [&] { return loss(); });
      worst = std::max(worst, rel_error(analytic[i].data(), fd));
    }
    return worst;
  }
};

inline Tensor uniform(Shape shape, Rng& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& v : t.data()) v = d(rng);
  return t;
}

// Entries bounded away from zero (for relu) by at least `gap`.
inline Tensor away_from_zero(Shape shape, Rng& rng, double gap) {
  Tensor t = uniform(std::move(shape), rng, gap, 2.0);
  std::bernoulli_distribution sign(0.5);
  for (auto& v : t.data()) v = sign(rng) ? v : -v;
  return t;
}

inline OpCase make_case(OpKind kind, Rng& rng, int variant) {
  std::uniform_int_distribution<std::size_t> dim(1, 5);
  const std::size_t r = dim(rng), c = dim(rng), k = dim(rng);
  const std::uint64_t seed = rng();
  auto rn = [&](Shape s) { return randn(std::move(s), rng); };
  switch (kind) {
    case OpKind::matmul:
      return {{rn({r, k}), rn({k, c})}, [](Graph& g, auto& in) { return g.matmul(in[0], in[1]); }, seed};
    case OpKind::add:
    case OpKind::mul: {
      Shape bs = variant % 3 == 0 ? Shape{r, c} : variant % 3 == 1 ? Shape{c} : Shape{r, 1};
      return {{rn({r, c}), rn(bs)},
              [kind](Graph& g, auto& in) { return g.apply(kind, std::vector<NodeId>{in[0], in[1]}); },
              seed};
    }
    case OpKind::sigmoid:
    case OpKind::softmax:
    case OpKind::gelu:
    case OpKind::transpose:
      return {{rn({r, c})}, [kind](Graph& g, auto& in) { return g.apply(kind, std::vector<NodeId>{in[0]}); },
              seed};
    case OpKind::relu:
      return {{away_from_zero({r, c}, rng, 1e-2)}, [](Graph& g, auto& in) { return g.relu(in[0]); }, seed};
    case OpKind::layernorm:
      return {{rn({r, c + 1}), rn({c + 1}), rn({c + 1})},
              [](Graph& g, auto& in) { return g.layernorm(in[0], in[1], in[2]); }, seed};
    case OpKind::concat:
      return {{rn({r, c}), rn({k, c})}, [](Graph& g, auto& in) { return g.concat_rows({in[0], in[1]}); }, seed};
    case OpKind::gather_rows: {
      std::uniform_int_distribution<std::size_t> idx(0, r - 1);
      std::vector<std::size_t> ids(k);
      for (auto& i : ids) i = idx(rng);
      return {{rn({r, c})}, [ids](Graph& g, auto& in) { return g.gather_rows(in[0], ids); }, seed};
    }
    case OpKind::scalar_mul:
      return {{rn({r, c})}, [](Graph& g, auto& in) { return g.scalar_mul(in[0], -1.7); }, seed};
    case OpKind::add_scalar:
      return {{rn({r, c})}, [](Graph& g, auto& in) { return g.add_scalar(in[0], 0.3); }, seed};
    case OpKind::sqrt:
      return {{uniform({r, c}, rng, 0.2, 3.0)}, [](Graph& g, auto& in) { return g.sqrt(in[0]); }, seed};
    case OpKind::log:
      return {{uniform({r, c}, rng, 0.2, 3.0)}, [](Graph& g, auto& in) { return g.log(in[0]); }, seed};
    case OpKind::sum:
      return {{rn({r, c})}, [](Graph& g, auto& in) { return g.sum(in[0]); }, seed};
    case OpKind::mean:
      return {{rn({r, c})}, [](Graph& g, auto& in) { return g.mean(in[0]); }, seed};
    case OpKind::cross_entropy: {
      const std::size_t classes = c + 1;
      const std::size_t label = static_cast<std::size_t>(rng() % classes);
      return {{rn({1, classes})}, [label](Graph& g, auto& in) { return g.cross_entropy(in[0], label); }, seed};
    }
    case OpKind::clamp: {
      // Keep inputs off the clamp corners so the difference quotient is valid.
      Tensor x = uniform({r, c}, rng, -2.0, 2.0);
      for (auto& v : x.data()) {
        if (std::abs(std::abs(v) - 1.0) < 1e-2) v *= 1.1;
      }
      return {{x}, [](Graph& g, auto& in) { return g.clamp(in[0], -1.0, 1.0); }, seed};
    }
    case OpKind::reshape:
      return {{rn({r, c})}, [r, c](Graph& g, auto& in) { return g.reshape(in[0], Shape{c * r}); }, seed};
    default:
      break;
  }
  throw std::logic_error("no case for op");
}

inline const std::vector<OpKind>& all_op_kinds() {
  static const std::vector<OpKind> kinds{OpKind::matmul,     OpKind::add,         OpKind::mul,       OpKind::sigmoid,
                                         OpKind::softmax,    OpKind::layernorm,   OpKind::relu,      OpKind::gelu,
                                         OpKind::transpose,  OpKind::concat,      OpKind::gather_rows,
                                         OpKind::scalar_mul, OpKind::add_scalar,  OpKind::sqrt,      OpKind::log,
                                         OpKind::sum,        OpKind::mean,        OpKind::cross_entropy,
                                         OpKind::clamp,      OpKind::reshape};
  return kinds;
}

}  // namespace diffprune::testing
