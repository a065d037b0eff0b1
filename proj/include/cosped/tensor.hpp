#pragma once

// Reverse-mode automatic differentiation over dense fp64 tensors.
//
// Design: every operation appends a node to an implicit DAG (the "tape").
// A node owns its forward value and, transiently, its gradient. Calling
// backward(root) on a scalar root topologically sorts the reachable graph,
// seeds d(root)/d(root) = 1, sweeps once in reverse order accumulating
// gradients by summation, and returns the gradients of every reachable
// leaf that was created with requires_grad = true. The sweep consumes the
// tape: interior edges are dropped so a second backward on the same root
// is an error rather than a silent wrong answer.
//
// Only the handful of shapes this project needs are supported: scalars
// (shape {1}), vectors {n} and matrices {r, c}, all row-major. Broadcasting
// is deliberately narrow — the second operand of add/mul may be a scalar or
// a row vector; nothing else. Narrow rules keep every backward rule small
// enough to verify by hand and by finite differences.
//
// Matrix products route through Eigen maps over the raw buffers; everything
// else is straightforward loops. Values are validated to stay finite after
// the ops that can produce NaN/Inf from finite inputs (log, exp, pow, the
// normalizing ops); a non-finite result throws instead of propagating.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "cosped/common.hpp"

namespace cosped {

namespace detail {

struct Node {
  std::vector<int> shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated lazily during backward
  bool requires_grad = false;
  bool needs_grad = false;   // transient: set while a backward sweep runs
  bool consumed = false;     // set on the root once its tape has been used
  std::string op;            // empty for leaves
  std::vector<std::shared_ptr<Node>> parents;
  // Propagates this node's grad into its parents. Only called when some
  // parent ultimately feeds a requires_grad leaf.
  std::function<void(Node&)> backward_fn;
};

inline std::size_t numel_of(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

inline void ensure_grad(Node& n) {
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
}

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

}  // namespace detail

class Tensor;
Tensor affine(const Tensor& a, double scale, double shift);

class Tensor {
 public:
  Tensor() = default;

  // -- constructors ---------------------------------------------------------

  static Tensor leaf(std::vector<int> shape, std::vector<double> values,
                     bool requires_grad = false) {
    check_shape(shape);
    if (values.size() != detail::numel_of(shape))
      throw std::invalid_argument("Tensor::leaf: value count does not match shape");
    for (double v : values)
      if (!std::isfinite(v)) throw std::invalid_argument("Tensor::leaf: non-finite value");
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    check_shape(shape);
    const std::size_t n = detail::numel_of(shape);
    return leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(std::vector<int> shape, double fill, bool requires_grad = false) {
    check_shape(shape);
    const std::size_t n = detail::numel_of(shape);
    return leaf(std::move(shape), std::vector<double>(n, fill), requires_grad);
  }

  static Tensor scalar(double v) { return leaf({1}, {v}); }

  // -- inspection -----------------------------------------------------------

  bool valid() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node()->shape; }
  std::size_t numel() const { return node()->value.size(); }
  int ndim() const { return static_cast<int>(node()->shape.size()); }
  bool requires_grad() const { return node()->requires_grad; }
  const std::string& op() const { return node()->op; }

  // Flip trainability of a leaf (freezing/unfreezing model weights). The
  // flag is read at backward time, so flipping it affects later sweeps only.
  void set_requires_grad(bool v) {
    if (!node()->op.empty())
      throw std::logic_error("Tensor::set_requires_grad: only leaves may be toggled");
    node()->requires_grad = v;
  }

  int rows() const {
    const auto& s = node()->shape;
    return s.size() == 2 ? s[0] : 1;
  }
  int cols() const {
    const auto& s = node()->shape;
    return s.size() == 2 ? s[1] : s[0];
  }

  std::span<const double> values() const {
    return {node()->value.data(), node()->value.size()};
  }

  double item() const {
    if (numel() != 1) throw std::invalid_argument("Tensor::item: tensor is not a scalar");
    return node()->value[0];
  }

  double at(std::size_t i) const { return node()->value.at(i); }
  double at(int r, int c) const {
    if (ndim() != 2) throw std::invalid_argument("Tensor::at(r,c): not a matrix");
    return node()->value.at(static_cast<std::size_t>(r) * static_cast<std::size_t>(cols()) +
                            static_cast<std::size_t>(c));
  }

  // Mutable access to a leaf's storage, for optimizer updates. Interior
  // nodes are immutable: their values were consumed by downstream forwards.
  std::span<double> mutable_values() {
    if (!node()->op.empty())
      throw std::logic_error("Tensor::mutable_values: only leaves may be mutated");
    return {node()->value.data(), node()->value.size()};
  }

  // Identity of the underlying node; keys gradient maps and digests.
  const detail::Node* id() const { return node_.get(); }

  // -- graph plumbing (used by the free-function ops below) ------------------

  static Tensor make_op(std::string op, std::vector<int> shape,
                        std::vector<double> value,
                        std::vector<std::shared_ptr<detail::Node>> parents,
                        std::function<void(detail::Node&)> backward_fn) {
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->op = std::move(op);
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward_fn);
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

  std::shared_ptr<detail::Node> node_ptr() const { return node_; }

 private:
  static void check_shape(const std::vector<int>& shape) {
    if (shape.empty() || shape.size() > 2)
      throw std::invalid_argument("Tensor: shape must have 1 or 2 dimensions");
    // Zero-sized dimensions are legal (an empty token sequence embeds to a
    // 0×d tensor); individual ops reject empties where they make no sense.
    for (int d : shape)
      if (d < 0) throw std::invalid_argument("Tensor: shape dimensions must be non-negative");
  }

  const std::shared_ptr<detail::Node>& node() const {
    if (!node_) throw std::logic_error("Tensor: empty handle");
    return node_;
  }

  std::shared_ptr<detail::Node> node_;
};

// ---------------------------------------------------------------------------
// Gradient map returned by backward()
// ---------------------------------------------------------------------------

class GradientMap {
 public:
  bool contains(const Tensor& t) const { return grads_.count(t.id()) != 0; }

  const std::vector<double>& at(const Tensor& t) const {
    auto it = grads_.find(t.id());
    if (it == grads_.end())
      throw std::out_of_range("GradientMap::at: tensor has no recorded gradient");
    return it->second;
  }

  std::size_t size() const { return grads_.size(); }

  void insert(const detail::Node* key, std::vector<double> g) {
    grads_.emplace(key, std::move(g));
  }

 private:
  std::unordered_map<const detail::Node*, std::vector<double>> grads_;
};

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

// Reverse sweep from a scalar root. Gradients of all reachable
// requires_grad leaves are accumulated and returned; the tape reachable
// from the root is consumed in the process.
inline GradientMap backward(const Tensor& root) {
  using detail::Node;
  Node* r = const_cast<Node*>(root.id());
  if (r == nullptr) throw std::logic_error("backward: empty tensor");
  if (root.numel() != 1)
    throw std::invalid_argument("backward: root must be a scalar");
  if (r->consumed)
    throw std::logic_error("backward: tape already consumed for this root");

  // Iterative post-order DFS -> topological order (parents before children).
  std::vector<Node*> topo;
  std::unordered_map<Node*, int> state;  // 0 unseen, 1 open, 2 done
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(r, 0);
  state[r] = 1;
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node* p = n->parents[idx].get();
      ++idx;
      if (state[p] == 0) {
        state[p] = 1;
        stack.emplace_back(p, 0);
      }
    } else {
      state[n] = 2;
      topo.push_back(n);
      stack.pop_back();
    }
  }

  // Decide which nodes actually need gradients: a node needs one iff it is
  // a requires_grad leaf or any of its inputs needs one. Computed in topo
  // order (inputs first), this prunes whole subgraphs of frozen weights.
  for (Node* n : topo) {
    n->needs_grad = n->requires_grad;
    for (const auto& p : n->parents)
      if (p->needs_grad) n->needs_grad = true;
  }

  detail::ensure_grad(*r);
  r->grad[0] = 1.0;

  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    Node* n = *it;
    if (!n->needs_grad || n->grad.empty() || !n->backward_fn) continue;
    n->backward_fn(*n);
  }

  GradientMap out;
  for (Node* n : topo) {
    if (n->requires_grad) {
      detail::ensure_grad(*n);
      out.insert(n, std::move(n->grad));
    }
    n->grad.clear();
    n->needs_grad = false;
    if (!n->op.empty()) {
      n->parents.clear();      // consume the tape
      n->backward_fn = nullptr;
    }
  }
  r->consumed = true;
  return out;
}

// ---------------------------------------------------------------------------
// Op helpers
// ---------------------------------------------------------------------------

namespace detail {

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

inline void check_finite(const std::vector<double>& xs, const char* op) {
  for (double x : xs)
    if (!std::isfinite(x))
      throw std::domain_error(std::string(op) + ": non-finite result");
}

inline std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << "{";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "}";
  return os.str();
}

// Accumulate g into parent's grad if the parent participates in the sweep.
inline void accum(const std::shared_ptr<Node>& p, std::size_t i, double g) {
  p->grad[i] += g;
}

inline bool want(const std::shared_ptr<Node>& p) {
  if (!p->needs_grad) return false;
  ensure_grad(*p);
  return true;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

// add/mul support: identical shapes; or b a scalar; or a a matrix {r,c} and
// b a row vector {c} broadcast across rows.
namespace detail {
enum class Bcast { kSame, kScalarRhs, kRowRhs };

inline Bcast bcast_mode(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Bcast::kSame;
  if (b.numel() == 1) return Bcast::kScalarRhs;
  if (a.ndim() == 2 && b.ndim() == 1 && b.cols() == a.cols()) return Bcast::kRowRhs;
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " +
                              shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}
}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  const auto mode = detail::bcast_mode(a, b, "add");
  const int r = a.rows(), c = a.cols();
  std::vector<double> out(a.numel());
  const auto av = a.values();
  const auto bv = b.values();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) {
      const std::size_t k = static_cast<std::size_t>(i) * c + j;
      const double bval = mode == detail::Bcast::kSame      ? bv[k]
                          : mode == detail::Bcast::kScalarRhs ? bv[0]
                                                              : bv[static_cast<std::size_t>(j)];
      out[k] = av[k] + bval;
    }
  auto an = a.node_ptr(), bn = b.node_ptr();
  return Tensor::make_op(
      "add", a.shape(), std::move(out), {an, bn}, [an, bn, mode, r, c](detail::Node& n) {
        const bool wa = detail::want(an), wb = detail::want(bn);
        if (!wa && !wb) return;
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j) {
            const std::size_t k = static_cast<std::size_t>(i) * c + j;
            const double g = n.grad[k];
            if (wa) an->grad[k] += g;
            if (wb) {
              const std::size_t bk = mode == detail::Bcast::kSame      ? k
                                     : mode == detail::Bcast::kScalarRhs ? 0
                                                                         : static_cast<std::size_t>(j);
              bn->grad[bk] += g;
            }
          }
      });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  const auto mode = detail::bcast_mode(a, b, "mul");
  const int r = a.rows(), c = a.cols();
  std::vector<double> out(a.numel());
  const auto av = a.values();
  const auto bv = b.values();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) {
      const std::size_t k = static_cast<std::size_t>(i) * c + j;
      const std::size_t bk = mode == detail::Bcast::kSame      ? k
                             : mode == detail::Bcast::kScalarRhs ? 0
                                                                 : static_cast<std::size_t>(j);
      out[k] = av[k] * bv[bk];
    }
  auto an = a.node_ptr(), bn = b.node_ptr();
  return Tensor::make_op(
      "mul", a.shape(), std::move(out), {an, bn}, [an, bn, mode, r, c](detail::Node& n) {
        const bool wa = detail::want(an), wb = detail::want(bn);
        if (!wa && !wb) return;
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j) {
            const std::size_t k = static_cast<std::size_t>(i) * c + j;
            const std::size_t bk = mode == detail::Bcast::kSame      ? k
                                   : mode == detail::Bcast::kScalarRhs ? 0
                                                                       : static_cast<std::size_t>(j);
            const double g = n.grad[k];
            if (wa) an->grad[k] += g * bn->value[bk];
            if (wb) bn->grad[bk] += g * an->value[k];
          }
      });
}

inline Tensor sub(const Tensor& a, const Tensor& b) { return add(a, affine(b, -1.0, 0.0)); }

// out = scale * a + shift, elementwise.
inline Tensor affine(const Tensor& a, double scale, double shift) {
  std::vector<double> out(a.numel());
  const auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = scale * av[i] + shift;
  detail::check_finite(out, "affine");
  auto an = a.node_ptr();
  return Tensor::make_op("affine", a.shape(), std::move(out), {an},
                         [an, scale](detail::Node& n) {
                           if (!detail::want(an)) return;
                           for (std::size_t i = 0; i < n.grad.size(); ++i)
                             an->grad[i] += scale * n.grad[i];
                         });
}

inline Tensor neg(const Tensor& a) { return affine(a, -1.0, 0.0); }

inline Tensor exp(const Tensor& a) {
  std::vector<double> out(a.numel());
  const auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(av[i]);
  detail::check_finite(out, "exp");
  auto an = a.node_ptr();
  return Tensor::make_op("exp", a.shape(), std::move(out), {an},
                         [an](detail::Node& n) {
                           if (!detail::want(an)) return;
                           for (std::size_t i = 0; i < n.grad.size(); ++i)
                             an->grad[i] += n.grad[i] * n.value[i];
                         });
}

inline Tensor log(const Tensor& a) {
  std::vector<double> out(a.numel());
  const auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!(av[i] > 0.0))
      throw std::domain_error("log: input must be strictly positive");
    out[i] = std::log(av[i]);
  }
  auto an = a.node_ptr();
  return Tensor::make_op("log", a.shape(), std::move(out), {an},
                         [an](detail::Node& n) {
                           if (!detail::want(an)) return;
                           for (std::size_t i = 0; i < n.grad.size(); ++i)
                             an->grad[i] += n.grad[i] / an->value[i];
                         });
}

// Elementwise a^p for constant p. The p == 0 case is special-cased to a
// constant 1 with zero gradient — the general d/dx x^p = p x^(p-1) rule
// would otherwise manufacture NaN at x = 0.
inline Tensor pow_const(const Tensor& a, double p) {
  std::vector<double> out(a.numel());
  const auto av = a.values();
  if (p == 0.0) {
    std::fill(out.begin(), out.end(), 1.0);
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::pow(av[i], p);
  }
  detail::check_finite(out, "pow_const");
  auto an = a.node_ptr();
  return Tensor::make_op("pow_const", a.shape(), std::move(out), {an},
                         [an, p](detail::Node& n) {
                           if (p == 0.0) return;
                           if (!detail::want(an)) return;
                           for (std::size_t i = 0; i < n.grad.size(); ++i) {
                             const double d = p * std::pow(an->value[i], p - 1.0);
                             if (!std::isfinite(d))
                               throw std::domain_error("pow_const: non-finite gradient");
                             an->grad[i] += n.grad[i] * d;
                           }
                         });
}

// max(a, c) elementwise. Subgradient 0 at the clamp boundary: once a value
// is clamped, nothing downstream can influence it, which is exactly the
// behaviour wanted from a numerical-floor guard.
inline Tensor clamp_min(const Tensor& a, double c) {
  std::vector<double> out(a.numel());
  const auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > c ? av[i] : c;
  auto an = a.node_ptr();
  return Tensor::make_op("clamp_min", a.shape(), std::move(out), {an},
                         [an, c](detail::Node& n) {
                           if (!detail::want(an)) return;
                           for (std::size_t i = 0; i < n.grad.size(); ++i)
                             if (an->value[i] > c) an->grad[i] += n.grad[i];
                         });
}

// tanh-form Gaussian error linear unit.
inline Tensor gelu(const Tensor& a) {
  constexpr double kSqrt2OverPi = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kCubic = 0.044715;
  std::vector<double> out(a.numel());
  const auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = av[i];
    const double t = std::tanh(kSqrt2OverPi * (x + kCubic * x * x * x));
    out[i] = 0.5 * x * (1.0 + t);
  }
  detail::check_finite(out, "gelu");
  auto an = a.node_ptr();
  return Tensor::make_op(
      "gelu", a.shape(), std::move(out), {an}, [an](detail::Node& n) {
        if (!detail::want(an)) return;
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
          const double x = an->value[i];
          const double u = kSqrt2OverPi * (x + kCubic * x * x * x);
          const double t = std::tanh(u);
          const double du = kSqrt2OverPi * (1.0 + 3.0 * kCubic * x * x);
          const double d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
          an->grad[i] += n.grad[i] * d;
        }
      });
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require(a.ndim() == 2 && b.ndim() == 2, "matmul: both operands must be matrices");
  detail::require(a.cols() == b.rows(),
                  "matmul: inner dimensions disagree: " + detail::shape_str(a.shape()) +
                      " vs " + detail::shape_str(b.shape()));
  const int m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(static_cast<std::size_t>(m) * n);
  {
    detail::ECMap A(a.values().data(), m, k);
    detail::ECMap B(b.values().data(), k, n);
    detail::EMap C(out.data(), m, n);
    C.noalias() = A * B;
  }
  auto an = a.node_ptr(), bn = b.node_ptr();
  return Tensor::make_op(
      "matmul", {m, n}, std::move(out), {an, bn}, [an, bn, m, k, n](detail::Node& nd) {
        detail::ECMap G(nd.grad.data(), m, n);
        detail::ECMap A(an->value.data(), m, k);
        detail::ECMap B(bn->value.data(), k, n);
        if (detail::want(an)) {
          detail::EMap dA(an->grad.data(), m, k);
          dA.noalias() += G * B.transpose();
        }
        if (detail::want(bn)) {
          detail::EMap dB(bn->grad.data(), k, n);
          dB.noalias() += A.transpose() * G;
        }
      });
}

inline Tensor transpose(const Tensor& a) {
  detail::require(a.ndim() == 2, "transpose: operand must be a matrix");
  const int r = a.rows(), c = a.cols();
  std::vector<double> out(a.numel());
  const auto av = a.values();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      out[static_cast<std::size_t>(j) * r + i] = av[static_cast<std::size_t>(i) * c + j];
  auto an = a.node_ptr();
  return Tensor::make_op("transpose", {c, r}, std::move(out), {an},
                         [an, r, c](detail::Node& n) {
                           if (!detail::want(an)) return;
                           for (int i = 0; i < r; ++i)
                             for (int j = 0; j < c; ++j)
                               an->grad[static_cast<std::size_t>(i) * c + j] +=
                                   n.grad[static_cast<std::size_t>(j) * r + i];
                         });
}

// Outer product of two vectors: out[i][j] = u[i] * v[j].
inline Tensor outer(const Tensor& u, const Tensor& v) {
  detail::require(u.ndim() == 1 && v.ndim() == 1, "outer: operands must be vectors");
  const int m = u.cols(), n = v.cols();
  std::vector<double> out(static_cast<std::size_t>(m) * n);
  const auto uv = u.values(), vv = v.values();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(i) * n + j] = uv[i] * vv[j];
  auto un = u.node_ptr(), vn = v.node_ptr();
  return Tensor::make_op(
      "outer", {m, n}, std::move(out), {un, vn}, [un, vn, m, n](detail::Node& nd) {
        const bool wu = detail::want(un), wv = detail::want(vn);
        if (!wu && !wv) return;
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) {
            const double g = nd.grad[static_cast<std::size_t>(i) * n + j];
            if (wu) un->grad[static_cast<std::size_t>(i)] += g * vn->value[static_cast<std::size_t>(j)];
            if (wv) vn->grad[static_cast<std::size_t>(j)] += g * un->value[static_cast<std::size_t>(i)];
          }
      });
}

// ---------------------------------------------------------------------------
// Row selection / rearrangement
// ---------------------------------------------------------------------------

// Select rows of a matrix by index (with repeats allowed); the embedding
// lookup. Backward scatter-adds row gradients.
inline Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
  detail::require(table.ndim() == 2, "gather_rows: table must be a matrix");
  if (ids.empty())  // empty selection: constant 0×c tensor
    return Tensor::leaf({0, table.cols()}, {});
  const int r = table.rows(), c = table.cols();
  for (int id : ids)
    detail::require(id >= 0 && id < r, "gather_rows: row index out of range");
  std::vector<double> out(ids.size() * static_cast<std::size_t>(c));
  const auto tv = table.values();
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * c, c,
                out.data() + i * static_cast<std::size_t>(c));
  auto tn = table.node_ptr();
  return Tensor::make_op(
      "gather_rows", {static_cast<int>(ids.size()), c}, std::move(out), {tn},
      [tn, ids, c](detail::Node& n) {
        if (!detail::want(tn)) return;
        for (std::size_t i = 0; i < ids.size(); ++i) {
          double* dst = tn->grad.data() + static_cast<std::size_t>(ids[i]) * c;
          const double* src = n.grad.data() + i * static_cast<std::size_t>(c);
          for (int j = 0; j < c; ++j) dst[j] += src[j];
        }
      });
}

// out[i] = mat[i][cols[i]] — one element per row.
inline Tensor pick(const Tensor& mat, const std::vector<int>& cols) {
  detail::require(mat.ndim() == 2, "pick: operand must be a matrix");
  detail::require(static_cast<int>(cols.size()) == mat.rows(),
                  "pick: need exactly one column index per row");
  const int c = mat.cols();
  for (int j : cols) detail::require(j >= 0 && j < c, "pick: column index out of range");
  std::vector<double> out(cols.size());
  const auto mv = mat.values();
  for (std::size_t i = 0; i < cols.size(); ++i)
    out[i] = mv[i * static_cast<std::size_t>(c) + static_cast<std::size_t>(cols[i])];
  auto mn = mat.node_ptr();
  return Tensor::make_op("pick", {static_cast<int>(cols.size())}, std::move(out), {mn},
                         [mn, cols, c](detail::Node& n) {
                           if (!detail::want(mn)) return;
                           for (std::size_t i = 0; i < cols.size(); ++i)
                             mn->grad[i * static_cast<std::size_t>(c) +
                                      static_cast<std::size_t>(cols[i])] += n.grad[i];
                         });
}

// Select elements of a vector by index (repeats allowed; grads accumulate).
inline Tensor take(const Tensor& v, const std::vector<int>& idx) {
  detail::require(v.ndim() == 1, "take: operand must be a vector");
  detail::require(!idx.empty(), "take: empty index list");
  const int n = v.cols();
  for (int i : idx) detail::require(i >= 0 && i < n, "take: index out of range");
  std::vector<double> out(idx.size());
  const auto vv = v.values();
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = vv[static_cast<std::size_t>(idx[i])];
  auto vn = v.node_ptr();
  return Tensor::make_op("take", {static_cast<int>(idx.size())}, std::move(out), {vn},
                         [vn, idx](detail::Node& nd) {
                           if (!detail::want(vn)) return;
                           for (std::size_t i = 0; i < idx.size(); ++i)
                             vn->grad[static_cast<std::size_t>(idx[i])] += nd.grad[i];
                         });
}

inline Tensor slice_rows(const Tensor& a, int begin, int count) {
  detail::require(a.ndim() == 2, "slice_rows: operand must be a matrix");
  detail::require(begin >= 0 && count > 0 && begin + count <= a.rows(),
                  "slice_rows: range out of bounds");
  const int c = a.cols();
  std::vector<double> out(static_cast<std::size_t>(count) * c);
  std::copy_n(a.values().data() + static_cast<std::size_t>(begin) * c, out.size(), out.data());
  auto an = a.node_ptr();
  return Tensor::make_op("slice_rows", {count, c}, std::move(out), {an},
                         [an, begin, c](detail::Node& n) {
                           if (!detail::want(an)) return;
                           double* dst = an->grad.data() + static_cast<std::size_t>(begin) * c;
                           for (std::size_t i = 0; i < n.grad.size(); ++i) dst[i] += n.grad[i];
                         });
}

// Stack matrices with equal column counts on top of each other.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  detail::require(!parts.empty(), "concat_rows: no operands");
  const int c = parts[0].cols();
  int total = 0;
  for (const auto& p : parts) {
    detail::require(p.ndim() == 2, "concat_rows: operands must be matrices");
    detail::require(p.cols() == c, "concat_rows: column counts disagree");
    total += p.rows();
  }
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(total) * c);
  std::vector<std::shared_ptr<detail::Node>> parents;
  std::vector<int> row_counts;
  for (const auto& p : parts) {
    const auto pv = p.values();
    out.insert(out.end(), pv.begin(), pv.end());
    parents.push_back(p.node_ptr());
    row_counts.push_back(p.rows());
  }
  auto parents_copy = parents;
  return Tensor::make_op("concat_rows", {total, c}, std::move(out), std::move(parents),
                         [parents_copy, row_counts, c](detail::Node& n) {
                           std::size_t offset = 0;
                           for (std::size_t p = 0; p < parents_copy.size(); ++p) {
                             const std::size_t len =
                                 static_cast<std::size_t>(row_counts[p]) * c;
                             if (detail::want(parents_copy[p])) {
                               for (std::size_t i = 0; i < len; ++i)
                                 parents_copy[p]->grad[i] += n.grad[offset + i];
                             }
                             offset += len;
                           }
                         });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  auto an = a.node_ptr();
  return Tensor::make_op("sum", {1}, {s}, {an}, [an](detail::Node& n) {
    if (!detail::want(an)) return;
    const double g = n.grad[0];
    for (double& d : an->grad) d += g;
  });
}

inline Tensor mean(const Tensor& a) {
  const double inv = 1.0 / static_cast<double>(a.numel());
  double s = 0.0;
  for (double v : a.values()) s += v;
  auto an = a.node_ptr();
  return Tensor::make_op("mean", {1}, {s * inv}, {an}, [an, inv](detail::Node& n) {
    if (!detail::want(an)) return;
    const double g = n.grad[0] * inv;
    for (double& d : an->grad) d += g;
  });
}

// ---------------------------------------------------------------------------
// Row-normalizing ops (softmax family, layer norm)
// ---------------------------------------------------------------------------

// Applies f to each row of a matrix (or to a vector treated as one row).

// Numerically stabilized softmax along the last axis.
// Backward: with y = softmax(x) per row, dx = y ⊙ (dy − <dy, y>).
inline Tensor softmax(const Tensor& a) {
  const int r = a.rows(), c = a.cols();
  detail::require(c >= 1, "softmax: empty rows");
  std::vector<double> out(a.numel());
  const auto av = a.values();
  for (int i = 0; i < r; ++i) {
    const double* x = av.data() + static_cast<std::size_t>(i) * c;
    double* y = out.data() + static_cast<std::size_t>(i) * c;
    double mx = x[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (int j = 0; j < c; ++j) {
      y[j] = std::exp(x[j] - mx);
      z += y[j];
    }
    for (int j = 0; j < c; ++j) y[j] /= z;
  }
  detail::check_finite(out, "softmax");
  auto an = a.node_ptr();
  return Tensor::make_op(
      "softmax", a.shape(), std::move(out), {an}, [an, r, c](detail::Node& n) {
        if (!detail::want(an)) return;
        for (int i = 0; i < r; ++i) {
          const double* y = n.value.data() + static_cast<std::size_t>(i) * c;
          const double* gy = n.grad.data() + static_cast<std::size_t>(i) * c;
          double* gx = an->grad.data() + static_cast<std::size_t>(i) * c;
          double dot = 0.0;
          for (int j = 0; j < c; ++j) dot += gy[j] * y[j];
          for (int j = 0; j < c; ++j) gx[j] += y[j] * (gy[j] - dot);
        }
      });
}

// log(softmax(x)) along the last axis, computed as x − max − log(sum exp).
// Backward: dx = dy − softmax(x) * <dy, 1> per row.
inline Tensor log_softmax(const Tensor& a) {
  const int r = a.rows(), c = a.cols();
  detail::require(c >= 1, "log_softmax: empty rows");
  std::vector<double> out(a.numel());
  const auto av = a.values();
  for (int i = 0; i < r; ++i) {
    const double* x = av.data() + static_cast<std::size_t>(i) * c;
    double* y = out.data() + static_cast<std::size_t>(i) * c;
    double mx = x[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (int j = 0; j < c; ++j) z += std::exp(x[j] - mx);
    const double lz = mx + std::log(z);
    for (int j = 0; j < c; ++j) y[j] = x[j] - lz;
  }
  detail::check_finite(out, "log_softmax");
  auto an = a.node_ptr();
  return Tensor::make_op(
      "log_softmax", a.shape(), std::move(out), {an}, [an, r, c](detail::Node& n) {
        if (!detail::want(an)) return;
        for (int i = 0; i < r; ++i) {
          const double* y = n.value.data() + static_cast<std::size_t>(i) * c;
          const double* gy = n.grad.data() + static_cast<std::size_t>(i) * c;
          double* gx = an->grad.data() + static_cast<std::size_t>(i) * c;
          double gsum = 0.0;
          for (int j = 0; j < c; ++j) gsum += gy[j];
          for (int j = 0; j < c; ++j) gx[j] += gy[j] - std::exp(y[j]) * gsum;
        }
      });
}

// Per-row standardization: (x − mean) / sqrt(var + eps). Gain/bias are the
// caller's business (compose with mul/add), which keeps this op's backward
// rule the classic three-term expression:
//   dx = (1/σ) * (dy − mean(dy) − x̂ * mean(dy ⊙ x̂))
inline Tensor layer_norm(const Tensor& a, double eps = 1e-5) {
  const int r = a.rows(), c = a.cols();
  detail::require(c >= 2, "layer_norm: rows need at least 2 elements");
  std::vector<double> out(a.numel());
  std::vector<double> inv_sigma(static_cast<std::size_t>(r));
  const auto av = a.values();
  for (int i = 0; i < r; ++i) {
    const double* x = av.data() + static_cast<std::size_t>(i) * c;
    double* y = out.data() + static_cast<std::size_t>(i) * c;
    double m = 0.0;
    for (int j = 0; j < c; ++j) m += x[j];
    m /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) var += (x[j] - m) * (x[j] - m);
    var /= c;
    const double is = 1.0 / std::sqrt(var + eps);
    inv_sigma[static_cast<std::size_t>(i)] = is;
    for (int j = 0; j < c; ++j) y[j] = (x[j] - m) * is;
  }
  detail::check_finite(out, "layer_norm");
  auto an = a.node_ptr();
  return Tensor::make_op(
      "layer_norm", a.shape(), std::move(out), {an},
      [an, r, c, inv_sigma](detail::Node& n) {
        if (!detail::want(an)) return;
        for (int i = 0; i < r; ++i) {
          const double* xh = n.value.data() + static_cast<std::size_t>(i) * c;
          const double* gy = n.grad.data() + static_cast<std::size_t>(i) * c;
          double* gx = an->grad.data() + static_cast<std::size_t>(i) * c;
          double gmean = 0.0, gxdot = 0.0;
          for (int j = 0; j < c; ++j) {
            gmean += gy[j];
            gxdot += gy[j] * xh[j];
          }
          gmean /= c;
          gxdot /= c;
          const double is = inv_sigma[static_cast<std::size_t>(i)];
          for (int j = 0; j < c; ++j)
            gx[j] += is * (gy[j] - gmean - xh[j] * gxdot);
        }
      });
}

}  // namespace cosped
