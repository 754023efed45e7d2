#pragma once

// Define-by-run reverse-mode differentiation over dense f64 tensors.
//
// A Graph is an append-only tape. Every op evaluates its forward value
// eagerly, checks it is finite, and (when any input needs a gradient) records
// a closure that maps the node's upstream gradient onto its inputs. backward()
// walks the tape once in reverse index order.

#include <Eigen/Core>

#include <array>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "diffprune/error.hpp"
#include "diffprune/tensor.hpp"

namespace diffprune::ad {

struct NodeId {
  std::size_t index = 0;
  friend bool operator==(NodeId, NodeId) = default;
};

/// A named trainable (or frozen) tensor. Frozen params still pass gradients
/// through to upstream nodes but never accumulate into `grad`.
struct Param {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;

  Param() = default;
  Param(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad = Tensor(value.shape()); }
};

enum class OpKind {
  constant,
  param,
  matmul,
  add,
  mul,
  sigmoid,
  softmax,
  layernorm,
  relu,
  gelu,
  transpose,
  concat,
  gather_rows,
  scalar_mul,
  add_scalar,
  sqrt,
  log,
  sum,
  mean,
  cross_entropy,
  clamp,
  reshape,
  custom,
};

inline std::string_view op_name(OpKind k) {
  switch (k) {
    case OpKind::constant: return "constant";
    case OpKind::param: return "param";
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::mul: return "mul";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::softmax: return "softmax";
    case OpKind::layernorm: return "layernorm";
    case OpKind::relu: return "relu";
    case OpKind::gelu: return "gelu";
    case OpKind::transpose: return "transpose";
    case OpKind::concat: return "concat";
    case OpKind::gather_rows: return "gather_rows";
    case OpKind::scalar_mul: return "scalar_mul";
    case OpKind::add_scalar: return "add_scalar";
    case OpKind::sqrt: return "sqrt";
    case OpKind::log: return "log";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::cross_entropy: return "cross_entropy";
    case OpKind::clamp: return "clamp";
    case OpKind::reshape: return "reshape";
    case OpKind::custom: return "custom";
  }
  return "?";
}

/// Extra arguments for ops that need more than their tensor inputs.
struct OpAttrs {
  double scalar = 0.0;
  double lo = 0.0;
  double hi = 0.0;
  std::vector<std::size_t> indices;
  Shape shape;
  std::size_t label = 0;
};

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

inline ConstMap as_mat(const Tensor& t) {
  return ConstMap(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                  static_cast<Eigen::Index>(t.cols()));
}
inline MutMap as_mat(Tensor& t) {
  return MutMap(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                static_cast<Eigen::Index>(t.cols()));
}

inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

enum class Broadcast { same, row, col };

inline Broadcast broadcast_kind(const Tensor& a, const Tensor& b, std::string_view op) {
  if (a.shape() == b.shape()) return Broadcast::same;
  if (a.rank() == 2) {
    const std::size_t r = a.shape()[0];
    const std::size_t c = a.shape()[1];
    if ((b.rank() == 1 && b.shape()[0] == c) || (b.rank() == 2 && b.shape() == Shape{1, c})) {
      return Broadcast::row;
    }
    if (b.rank() == 2 && b.shape() == Shape{r, 1}) return Broadcast::col;
  }
  throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(b.shape()) + " onto " +
                   shape_str(a.shape()));
}

inline std::size_t bcast_index(Broadcast kind, std::size_t flat, std::size_t cols) {
  switch (kind) {
    case Broadcast::same: return flat;
    case Broadcast::row: return flat % cols;
    case Broadcast::col: return flat / cols;
  }
  return flat;
}

}  // namespace detail

class Graph;

/// Maps the upstream gradient of node `self` onto its inputs.
using BackwardFn = std::function<void(Graph& g, std::size_t self, const Tensor& upstream)>;

/// Forward/backward pair for custom_grad. The backward receives the input
/// values, the forward output and the upstream gradient, and must return one
/// gradient per input with the input's shape.
using CustomForward = std::function<Tensor(std::span<const Tensor* const> inputs)>;
using CustomBackward = std::function<std::vector<Tensor>(
    std::span<const Tensor* const> inputs, const Tensor& output, const Tensor& upstream)>;

class Graph {
 public:
  enum class GradMode { enabled, disabled };

  explicit Graph(GradMode mode = GradMode::enabled) : mode_(mode) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  // ---- leaves ------------------------------------------------------------

  NodeId constant(Tensor value) {
    check_finite(value, OpKind::constant);
    Node n;
    n.kind = OpKind::constant;
    n.value = std::move(value);
    return append(std::move(n));
  }

  /// Leaf that is not a Param but whose gradient is wanted (inputs under test,
  /// token gradients).
  NodeId variable(Tensor value) {
    check_finite(value, OpKind::constant);
    Node n;
    n.kind = OpKind::constant;
    n.value = std::move(value);
    n.requires_grad = mode_ == GradMode::enabled;
    return append(std::move(n));
  }

  NodeId param(Param& p) {
    check_finite(p.value, OpKind::param);
    Node n;
    n.kind = OpKind::param;
    n.external = &p.value;
    n.param = &p;
    n.requires_grad = mode_ == GradMode::enabled && p.trainable;
    return append(std::move(n));
  }

  // ---- generic entry point ------------------------------------------------

  NodeId apply(OpKind kind, std::span<const NodeId> in, const OpAttrs& attrs = {}) {
    auto need = [&](std::size_t count) {
      if (in.size() != count) {
        throw ShapeError(std::string(op_name(kind)) + " expects " + std::to_string(count) +
                         " inputs, got " + std::to_string(in.size()));
      }
    };
    switch (kind) {
      case OpKind::matmul: need(2); return matmul(in[0], in[1]);
      case OpKind::add: need(2); return add(in[0], in[1]);
      case OpKind::mul: need(2); return mul(in[0], in[1]);
      case OpKind::sigmoid: need(1); return sigmoid(in[0]);
      case OpKind::softmax: need(1); return softmax(in[0]);
      case OpKind::layernorm: need(3); return layernorm(in[0], in[1], in[2]);
      case OpKind::relu: need(1); return relu(in[0]);
      case OpKind::gelu: need(1); return gelu(in[0]);
      case OpKind::transpose: need(1); return transpose(in[0]);
      case OpKind::concat: return concat_rows(std::vector<NodeId>(in.begin(), in.end()));
      case OpKind::gather_rows: need(1); return gather_rows(in[0], attrs.indices);
      case OpKind::scalar_mul: need(1); return scalar_mul(in[0], attrs.scalar);
      case OpKind::add_scalar: need(1); return add_scalar(in[0], attrs.scalar);
      case OpKind::sqrt: need(1); return sqrt(in[0]);
      case OpKind::log: need(1); return log(in[0]);
      case OpKind::sum: need(1); return sum(in[0]);
      case OpKind::mean: need(1); return mean(in[0]);
      case OpKind::cross_entropy: need(1); return cross_entropy(in[0], attrs.label);
      case OpKind::clamp: need(1); return clamp(in[0], attrs.lo, attrs.hi);
      case OpKind::reshape: need(1); return reshape(in[0], attrs.shape);
      case OpKind::constant:
      case OpKind::param:
      case OpKind::custom:
        break;
    }
    throw ShapeError("apply: op kind " + std::string(op_name(kind)) + " is not a plain op");
  }

  // ---- ops ---------------------------------------------------------------

  NodeId matmul(NodeId a, NodeId b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (A.rank() != 2 || B.rank() != 2 || A.shape()[1] != B.shape()[0]) {
      throw ShapeError("matmul: " + shape_str(A.shape()) + " x " + shape_str(B.shape()));
    }
    Tensor out(Shape{A.shape()[0], B.shape()[1]});
    detail::as_mat(out).noalias() = detail::as_mat(A) * detail::as_mat(B);
    return push(OpKind::matmul, {a, b}, std::move(out), [a, b](Graph& g, std::size_t, const Tensor& up) {
      if (g.needs(a)) {
        const Tensor& B = g.value(b);
        Tensor da(g.value(a).shape());
        detail::as_mat(da).noalias() = detail::as_mat(up) * detail::as_mat(B).transpose();
        g.accumulate(a, std::move(da));
      }
      if (g.needs(b)) {
        const Tensor& A = g.value(a);
        Tensor db(g.value(b).shape());
        detail::as_mat(db).noalias() = detail::as_mat(A).transpose() * detail::as_mat(up);
        g.accumulate(b, std::move(db));
      }
    });
  }

  NodeId add(NodeId a, NodeId b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    const auto kind = detail::broadcast_kind(A, B, "add");
    Tensor out = A;
    const std::size_t c = A.cols();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += B[detail::bcast_index(kind, i, c)];
    return push(OpKind::add, {a, b}, std::move(out), [a, b, kind, c](Graph& g, std::size_t, const Tensor& up) {
      if (g.needs(a)) g.accumulate(a, Tensor(up));
      if (g.needs(b)) {
        if (kind == detail::Broadcast::same) {
          g.accumulate(b, Tensor(up));
        } else {
          Tensor db(g.value(b).shape());
          for (std::size_t i = 0; i < up.numel(); ++i) db[detail::bcast_index(kind, i, c)] += up[i];
          g.accumulate(b, std::move(db));
        }
      }
    });
  }

  NodeId mul(NodeId a, NodeId b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    const auto kind = detail::broadcast_kind(A, B, "mul");
    Tensor out = A;
    const std::size_t c = A.cols();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= B[detail::bcast_index(kind, i, c)];
    return push(OpKind::mul, {a, b}, std::move(out), [a, b, kind, c](Graph& g, std::size_t, const Tensor& up) {
      const Tensor& A = g.value(a);
      const Tensor& B = g.value(b);
      if (g.needs(a)) {
        Tensor da(A.shape());
        for (std::size_t i = 0; i < up.numel(); ++i) da[i] = up[i] * B[detail::bcast_index(kind, i, c)];
        g.accumulate(a, std::move(da));
      }
      if (g.needs(b)) {
        Tensor db(B.shape());
        for (std::size_t i = 0; i < up.numel(); ++i) db[detail::bcast_index(kind, i, c)] += up[i] * A[i];
        g.accumulate(b, std::move(db));
      }
    });
  }

  NodeId sigmoid(NodeId a) {
    Tensor out = value(a);
    for (auto& v : out.data()) v = detail::stable_sigmoid(v);
    return push(OpKind::sigmoid, {a}, std::move(out), [a](Graph& g, std::size_t self, const Tensor& up) {
      const Tensor& y = g.value(NodeId{self});
      Tensor da(y.shape());
      for (std::size_t i = 0; i < y.numel(); ++i) da[i] = up[i] * y[i] * (1.0 - y[i]);
      g.accumulate(a, std::move(da));
    });
  }

  /// Softmax over the last dimension.
  NodeId softmax(NodeId a) {
    Tensor out = value(a);
    const std::size_t c = out.cols();
    for (std::size_t r = 0; r < out.numel() / c; ++r) {
      auto row = out.row(r);
      const double mx = *std::max_element(row.begin(), row.end());
      double z = 0.0;
      for (auto& v : row) z += (v = std::exp(v - mx));
      for (auto& v : row) v /= z;
    }
    return push(OpKind::softmax, {a}, std::move(out), [a, c](Graph& g, std::size_t self, const Tensor& up) {
      const Tensor& y = g.value(NodeId{self});
      Tensor da(y.shape());
      for (std::size_t r = 0; r < y.numel() / c; ++r) {
        const double* yr = y.data().data() + r * c;
        const double* ur = up.data().data() + r * c;
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += yr[j] * ur[j];
        for (std::size_t j = 0; j < c; ++j) da[r * c + j] = yr[j] * (ur[j] - dot);
      }
      g.accumulate(a, std::move(da));
    });
  }

  /// Layer normalization over the last dimension with affine gamma/beta.
  NodeId layernorm(NodeId x, NodeId gamma, NodeId beta, double eps = 1e-5) {
    const Tensor& X = value(x);
    const Tensor& G = value(gamma);
    const Tensor& Bt = value(beta);
    const std::size_t c = X.cols();
    if (G.numel() != c || Bt.numel() != c) {
      throw ShapeError("layernorm: gamma/beta size must equal last dim " + std::to_string(c));
    }
    const std::size_t rows = X.numel() / c;
    Tensor xhat(X.shape());
    std::vector<double> rstd(rows);
    Tensor out(X.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      const auto xr = X.row(r);
      double mu = 0.0;
      for (double v : xr) mu += v;
      mu /= static_cast<double>(c);
      double var = 0.0;
      for (double v : xr) var += (v - mu) * (v - mu);
      var /= static_cast<double>(c);
      rstd[r] = 1.0 / std::sqrt(var + eps);
      for (std::size_t j = 0; j < c; ++j) {
        const double h = (xr[j] - mu) * rstd[r];
        xhat[r * c + j] = h;
        out[r * c + j] = h * G[j] + Bt[j];
      }
    }
    return push(OpKind::layernorm, {x, gamma, beta}, std::move(out),
                [x, gamma, beta, c, rows, xhat = std::move(xhat), rstd = std::move(rstd)](
                    Graph& g, std::size_t, const Tensor& up) {
                  const Tensor& G = g.value(gamma);
                  if (g.needs(gamma) || g.needs(beta)) {
                    Tensor dg(G.shape());
                    Tensor db(G.shape());
                    for (std::size_t r = 0; r < rows; ++r) {
                      for (std::size_t j = 0; j < c; ++j) {
                        dg[j] += up[r * c + j] * xhat[r * c + j];
                        db[j] += up[r * c + j];
                      }
                    }
                    if (g.needs(gamma)) g.accumulate(gamma, std::move(dg));
                    if (g.needs(beta)) g.accumulate(beta, std::move(db));
                  }
                  if (g.needs(x)) {
                    Tensor dx(g.value(x).shape());
                    const double inv_c = 1.0 / static_cast<double>(c);
                    for (std::size_t r = 0; r < rows; ++r) {
                      double sum_dh = 0.0;
                      double sum_dh_h = 0.0;
                      for (std::size_t j = 0; j < c; ++j) {
                        const double dh = up[r * c + j] * G[j];
                        sum_dh += dh;
                        sum_dh_h += dh * xhat[r * c + j];
                      }
                      for (std::size_t j = 0; j < c; ++j) {
                        const double dh = up[r * c + j] * G[j];
                        dx[r * c + j] =
                            rstd[r] * (dh - inv_c * sum_dh - xhat[r * c + j] * inv_c * sum_dh_h);
                      }
                    }
                    g.accumulate(x, std::move(dx));
                  }
                });
  }

  NodeId relu(NodeId a) {
    Tensor out = value(a);
    for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
    return push(OpKind::relu, {a}, std::move(out), [a](Graph& g, std::size_t, const Tensor& up) {
      const Tensor& x = g.value(a);
      Tensor da(x.shape());
      for (std::size_t i = 0; i < x.numel(); ++i) da[i] = x[i] > 0.0 ? up[i] : 0.0;
      g.accumulate(a, std::move(da));
    });
  }

  /// Exact (erf-based) GELU.
  NodeId gelu(NodeId a) {
    Tensor out = value(a);
    for (auto& v : out.data()) v = 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 * 0.5));
    return push(OpKind::gelu, {a}, std::move(out), [a](Graph& g, std::size_t, const Tensor& up) {
      const Tensor& x = g.value(a);
      Tensor da(x.shape());
      constexpr double inv_sqrt_2pi = 0.3989422804014327;
      for (std::size_t i = 0; i < x.numel(); ++i) {
        const double v = x[i];
        const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 * 0.5));
        const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
        da[i] = up[i] * (cdf + v * pdf);
      }
      g.accumulate(a, std::move(da));
    });
  }

  NodeId transpose(NodeId a) {
    const Tensor& A = value(a);
    if (A.rank() != 2) throw ShapeError("transpose needs a matrix, got " + shape_str(A.shape()));
    Tensor out(Shape{A.shape()[1], A.shape()[0]});
    detail::as_mat(out) = detail::as_mat(A).transpose();
    return push(OpKind::transpose, {a}, std::move(out), [a](Graph& g, std::size_t, const Tensor& up) {
      Tensor da(g.value(a).shape());
      detail::as_mat(da) = detail::as_mat(up).transpose();
      g.accumulate(a, std::move(da));
    });
  }

  /// Stacks matrices with equal column counts along rows.
  NodeId concat_rows(std::vector<NodeId> parts) {
    if (parts.empty()) throw ShapeError("concat of zero tensors");
    const std::size_t c = value(parts[0]).cols();
    std::size_t total = 0;
    for (NodeId p : parts) {
      const Tensor& t = value(p);
      if (t.rank() != 2 || t.cols() != c) {
        throw ShapeError("concat: part " + shape_str(t.shape()) + " vs " + std::to_string(c) + " cols");
      }
      total += t.rows();
    }
    Tensor out(Shape{total, c});
    std::size_t offset = 0;
    for (NodeId p : parts) {
      const Tensor& t = value(p);
      std::copy(t.data().begin(), t.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(offset));
      offset += t.numel();
    }
    return push(OpKind::concat, parts, std::move(out), [parts](Graph& g, std::size_t, const Tensor& up) {
      std::size_t off = 0;
      for (NodeId p : parts) {
        const Tensor& t = g.value(p);
        if (g.needs(p)) {
          Tensor dp(t.shape());
          std::copy_n(up.data().begin() + static_cast<std::ptrdiff_t>(off), t.numel(), dp.data().begin());
          g.accumulate(p, std::move(dp));
        }
        off += t.numel();
      }
    });
  }

  NodeId gather_rows(NodeId a, std::vector<std::size_t> indices) {
    const Tensor& A = value(a);
    if (A.rank() != 2) throw ShapeError("gather_rows needs a matrix");
    const std::size_t c = A.cols();
    Tensor out(Shape{indices.size(), c});
    for (std::size_t i = 0; i < indices.size(); ++i) {
      if (indices[i] >= A.rows()) throw ShapeError("gather_rows index out of range");
      std::copy_n(A.row(indices[i]).begin(), c, out.row(i).begin());
    }
    return push(OpKind::gather_rows, {a}, std::move(out),
                [a, c, indices = std::move(indices)](Graph& g, std::size_t, const Tensor& up) {
                  Tensor da(g.value(a).shape());
                  for (std::size_t i = 0; i < indices.size(); ++i) {
                    for (std::size_t j = 0; j < c; ++j) da(indices[i], j) += up(i, j);
                  }
                  g.accumulate(a, std::move(da));
                });
  }

  NodeId scalar_mul(NodeId a, double s) {
    Tensor out = value(a);
    for (auto& v : out.data()) v *= s;
    return push(OpKind::scalar_mul, {a}, std::move(out), [a, s](Graph& g, std::size_t, const Tensor& up) {
      Tensor da = up;
      for (auto& v : da.data()) v *= s;
      g.accumulate(a, std::move(da));
    });
  }

  NodeId add_scalar(NodeId a, double s) {
    Tensor out = value(a);
    for (auto& v : out.data()) v += s;
    return push(OpKind::add_scalar, {a}, std::move(out),
                [a](Graph& g, std::size_t, const Tensor& up) { g.accumulate(a, Tensor(up)); });
  }

  NodeId sqrt(NodeId a) {
    Tensor out = value(a);
    for (auto& v : out.data()) {
      if (v < 0.0) throw NumericError("sqrt of negative value");
      v = std::sqrt(v);
    }
    return push(OpKind::sqrt, {a}, std::move(out), [a](Graph& g, std::size_t self, const Tensor& up) {
      const Tensor& y = g.value(NodeId{self});
      Tensor da(y.shape());
      for (std::size_t i = 0; i < y.numel(); ++i) da[i] = up[i] * 0.5 / y[i];
      check_finite_grad(da, OpKind::sqrt);
      g.accumulate(a, std::move(da));
    });
  }

  NodeId log(NodeId a) {
    Tensor out = value(a);
    for (auto& v : out.data()) v = std::log(v);
    return push(OpKind::log, {a}, std::move(out), [a](Graph& g, std::size_t, const Tensor& up) {
      const Tensor& x = g.value(a);
      Tensor da(x.shape());
      for (std::size_t i = 0; i < x.numel(); ++i) da[i] = up[i] / x[i];
      g.accumulate(a, std::move(da));
    });
  }

  NodeId sum(NodeId a) {
    const Tensor& A = value(a);
    double acc = 0.0;
    for (double v : A.data()) acc += v;
    return push(OpKind::sum, {a}, Tensor::scalar(acc), [a](Graph& g, std::size_t, const Tensor& up) {
      g.accumulate(a, Tensor(g.value(a).shape(), up.item()));
    });
  }

  NodeId mean(NodeId a) {
    const Tensor& A = value(a);
    double acc = 0.0;
    for (double v : A.data()) acc += v;
    const double n = static_cast<double>(A.numel());
    return push(OpKind::mean, {a}, Tensor::scalar(acc / n), [a, n](Graph& g, std::size_t, const Tensor& up) {
      g.accumulate(a, Tensor(g.value(a).shape(), up.item() / n));
    });
  }

  /// Fused log-softmax + negative log-likelihood of `label` for a single logit row.
  NodeId cross_entropy(NodeId logits, std::size_t label) {
    const Tensor& Z = value(logits);
    if (Z.rows() != 1 || Z.rank() > 2) {
      throw ShapeError("cross_entropy expects a single logit row, got " + shape_str(Z.shape()));
    }
    if (label >= Z.numel()) throw ShapeError("cross_entropy label out of range");
    const double mx = *std::max_element(Z.data().begin(), Z.data().end());
    double z = 0.0;
    for (double v : Z.data()) z += std::exp(v - mx);
    const double lse = mx + std::log(z);
    return push(OpKind::cross_entropy, {logits}, Tensor::scalar(lse - Z[label]),
                [logits, label, lse](Graph& g, std::size_t, const Tensor& up) {
                  const Tensor& Z = g.value(logits);
                  Tensor dz(Z.shape());
                  for (std::size_t i = 0; i < Z.numel(); ++i) dz[i] = std::exp(Z[i] - lse) * up.item();
                  dz[label] -= up.item();
                  g.accumulate(logits, std::move(dz));
                });
  }

  NodeId clamp(NodeId a, double lo, double hi) {
    Tensor out = value(a);
    for (auto& v : out.data()) v = std::clamp(v, lo, hi);
    return push(OpKind::clamp, {a}, std::move(out), [a, lo, hi](Graph& g, std::size_t, const Tensor& up) {
      const Tensor& x = g.value(a);
      Tensor da(x.shape());
      for (std::size_t i = 0; i < x.numel(); ++i) da[i] = (x[i] >= lo && x[i] <= hi) ? up[i] : 0.0;
      g.accumulate(a, std::move(da));
    });
  }

  NodeId reshape(NodeId a, Shape shape) {
    Tensor out = value(a).reshaped(std::move(shape));
    return push(OpKind::reshape, {a}, std::move(out), [a](Graph& g, std::size_t, const Tensor& up) {
      g.accumulate(a, up.reshaped(g.value(a).shape()));
    });
  }

  /// Node whose forward is `fwd` and whose backward is `bwd`, verbatim. This
  /// is how surrogate-gradient operators (straight-through) are expressed.
  NodeId custom(std::string_view name, std::vector<NodeId> inputs, const CustomForward& fwd,
                CustomBackward bwd) {
    std::vector<const Tensor*> vals;
    vals.reserve(inputs.size());
    for (NodeId id : inputs) vals.push_back(&value(id));
    Tensor out = fwd(vals);
    auto id = push(OpKind::custom, inputs, std::move(out),
                   [inputs, bwd = std::move(bwd)](Graph& g, std::size_t self, const Tensor& up) {
                     std::vector<const Tensor*> vals;
                     vals.reserve(inputs.size());
                     for (NodeId in : inputs) vals.push_back(&g.value(in));
                     std::vector<Tensor> grads = bwd(vals, g.value(NodeId{self}), up);
                     if (grads.size() != inputs.size()) {
                       throw ShapeError("custom_grad: backward returned " + std::to_string(grads.size()) +
                                        " gradients for " + std::to_string(inputs.size()) + " inputs");
                     }
                     for (std::size_t i = 0; i < inputs.size(); ++i) {
                       if (grads[i].shape() != vals[i]->shape()) {
                         throw ShapeError("custom_grad: gradient " + std::to_string(i) + " has shape " +
                                          shape_str(grads[i].shape()) + ", input has " +
                                          shape_str(vals[i]->shape()));
                       }
                       if (g.needs(inputs[i])) g.accumulate(inputs[i], std::move(grads[i]));
                     }
                   });
    nodes_[id.index].custom_name = std::string(name);
    return id;
  }

  // ---- backward ----------------------------------------------------------

  /// Reverse sweep from a scalar loss. `seed` scales dL (used to average
  /// per-sample graphs into one batch gradient). Trainable params reached
  /// from the loss get their gradient added to Param::grad.
  void backward(NodeId loss, double seed = 1.0) {
    if (mode_ == GradMode::disabled) throw Error("backward on a graph built without gradients");
    if (loss.index >= nodes_.size()) throw Error("backward: unknown node");
    if (value(loss).numel() != 1) {
      throw ShapeError("backward: loss must be scalar, got " + shape_str(value(loss).shape()));
    }
    grads_.assign(nodes_.size(), std::nullopt);
    grads_[loss.index] = Tensor(value(loss).shape(), seed);
    for (std::size_t i = loss.index + 1; i-- > 0;) {
      if (!grads_[i]) continue;
      Node& n = nodes_[i];
      for (NodeId in : n.inputs) {
        // Tape order is topological by construction.
        if (in.index >= i) throw Error("backward: cycle detected at node " + std::to_string(i));
      }
      if (n.backward) n.backward(*this, i, *grads_[i]);
      if (n.kind == OpKind::param && n.param != nullptr && n.param->trainable) {
        n.param->grad += *grads_[i];
      }
      ++visits_;
    }
  }

  // ---- inspection --------------------------------------------------------

  const Tensor& value(NodeId id) const {
    const Node& n = nodes_.at(id.index);
    return n.external ? *n.external : n.value;
  }

  /// Gradient of the last backward() loss w.r.t. a node; null if the node was
  /// not reached or does not require a gradient.
  const Tensor* grad(NodeId id) const {
    if (id.index >= grads_.size() || !grads_[id.index]) return nullptr;
    return &*grads_[id.index];
  }

  bool needs(NodeId id) const { return nodes_[id.index].requires_grad; }
  std::size_t size() const { return nodes_.size(); }
  OpKind kind(NodeId id) const { return nodes_.at(id.index).kind; }
  std::span<const NodeId> inputs(NodeId id) const { return nodes_.at(id.index).inputs; }
  std::size_t backward_visits() const { return visits_; }

  /// Labels subsequently created nodes with `name` until the guard dies.
  class ScopeGuard {
   public:
    ScopeGuard(Graph& g, std::string name) : g_(g), prev_(std::exchange(g.scope_, std::move(name))) {}
    ~ScopeGuard() { g_.scope_ = std::move(prev_); }
    ScopeGuard(const ScopeGuard&) = delete;
    ScopeGuard& operator=(const ScopeGuard&) = delete;

   private:
    Graph& g_;
    std::string prev_;
  };

  ScopeGuard scope(std::string name) { return ScopeGuard(*this, std::move(name)); }

  std::size_t count_in_scope(std::string_view name) const {
    std::size_t n = 0;
    for (const auto& node : nodes_) n += node.scope == name ? 1 : 0;
    return n;
  }

  std::size_t count_kind(OpKind kind) const {
    std::size_t n = 0;
    for (const auto& node : nodes_) n += node.kind == kind ? 1 : 0;
    return n;
  }

  std::map<std::string, std::size_t> scope_counts() const {
    std::map<std::string, std::size_t> out;
    for (const auto& node : nodes_) ++out[node.scope];
    return out;
  }

  // Used by op closures.
  void accumulate(NodeId id, Tensor&& g) {
    auto& slot = grads_[id.index];
    if (!slot) {
      slot = std::move(g);
    } else {
      *slot += g;
    }
  }

 private:
  struct Node {
    OpKind kind = OpKind::constant;
    std::vector<NodeId> inputs;
    Tensor value;
    const Tensor* external = nullptr;
    Param* param = nullptr;
    BackwardFn backward;
    bool requires_grad = false;
    std::string scope;
    std::string custom_name;
  };

  static void check_finite(const Tensor& t, OpKind kind) {
    if (!t.all_finite()) throw NumericError("non-finite value produced by " + std::string(op_name(kind)));
  }
  static void check_finite_grad(const Tensor& t, OpKind kind) {
    if (!t.all_finite()) throw NumericError("non-finite gradient in " + std::string(op_name(kind)));
  }

  NodeId append(Node n) {
    n.scope = scope_;
    nodes_.push_back(std::move(n));
    return NodeId{nodes_.size() - 1};
  }

  NodeId push(OpKind kind, std::vector<NodeId> inputs, Tensor value, BackwardFn bw) {
    check_finite(value, kind);
    Node n;
    n.kind = kind;
    n.value = std::move(value);
    for (NodeId in : inputs) {
      if (in.index >= nodes_.size()) throw Error("op input refers to a future node");
      n.requires_grad = n.requires_grad || nodes_[in.index].requires_grad;
    }
    n.inputs = std::move(inputs);
    if (n.requires_grad) n.backward = std::move(bw);
    return append(std::move(n));
  }

  GradMode mode_;
  std::deque<Node> nodes_;  // deque: value() references survive later appends
  std::vector<std::optional<Tensor>> grads_;
  std::string scope_;
  std::size_t visits_ = 0;
};

}  // namespace diffprune::ad
