#pragma once

// Reverse-mode automatic differentiation over dense row-major double arrays.
// Define-by-run: operations record themselves on the innermost live Tape and
// backward() replays that record in reverse creation order, which is a valid
// reverse topological order of the graph.

#include "caps/common.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <utility>

namespace caps {

class Tensor;

struct TensorNode {
  Shape shape;
  std::vector<double> value;
  bool requires_grad = false;
  std::vector<double> grad;  // allocated lazily, same extent as value
  std::vector<Tensor> inputs;
  std::function<void(TensorNode&)> backprop;  // pushes this->grad into inputs
  const char* op = "leaf";

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> value, bool requires_grad = false) {
    if (numel(shape) != value.size())
      throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " +
                       std::to_string(value.size()) + " values");
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }
  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    std::vector<double> data(numel(shape), v);
    return from(std::move(shape), std::move(data), requires_grad);
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), 0.0, requires_grad);
  }
  static Tensor scalar(double v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->value.size(); }
  const std::vector<double>& values() const { return node_->value; }
  std::vector<double>& mutable_values() { return node_->value; }
  double operator[](std::size_t i) const { return node_->value[i]; }

  double item() const {
    if (size() != 1)
      throw ShapeError("item: tensor " + shape_str(shape()) + " is not a scalar");
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  const std::vector<double>& grad() const {
    const_cast<TensorNode*>(node_.get())->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

  // Value copy with no gradient history.
  Tensor detach() const { return from(shape(), values(), false); }

  TensorNode* node() const { return node_.get(); }

  explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<TensorNode> node_;
};

class Tape {
 public:
  Tape() : prev_(active_) { active_ = this; }
  ~Tape() { active_ = prev_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_; }
  std::size_t size() const { return nodes_.size(); }
  void record(std::shared_ptr<TensorNode> n) { nodes_.push_back(std::move(n)); }
  const std::vector<std::shared_ptr<TensorNode>>& nodes() const { return nodes_; }

 private:
  std::vector<std::shared_ptr<TensorNode>> nodes_;
  Tape* prev_ = nullptr;
  inline static thread_local Tape* active_ = nullptr;
};

namespace detail {

inline bool any_requires_grad(const std::vector<Tensor>& ts) {
  for (const auto& t : ts)
    if (t.requires_grad()) return true;
  return false;
}

inline Tensor make_op(const char* op, Shape shape, std::vector<double> value,
                      std::vector<Tensor> inputs,
                      std::function<void(TensorNode&)> backprop) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  if (Tape::active() && any_requires_grad(inputs)) {
    n->requires_grad = true;
    n->inputs = std::move(inputs);
    n->backprop = std::move(backprop);
    Tape::active()->record(n);
  }
  return Tensor(std::move(n));
}

// NumPy-style trailing broadcast.
inline Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t ea = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t eb = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (ea != eb && ea != 1 && eb != 1)
      throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " +
                       shape_str(b) + " not broadcastable");
    out[i] = std::max(ea, eb);
  }
  return out;
}

// Flat index map from output positions into a (possibly broadcast) input.
inline std::vector<std::uint32_t> broadcast_map(const Shape& out, const Shape& in) {
  const std::size_t n = numel(out);
  std::vector<std::uint32_t> map(n);
  const std::size_t rank = out.size();
  std::vector<std::size_t> stride(rank, 0);
  std::size_t s = 1;
  const std::size_t off = rank - in.size();
  for (std::size_t i = rank; i-- > 0;) {
    if (i >= off && in[i - off] != 1) {
      stride[i] = s;
      s *= in[i - off];
    }
  }
  std::vector<std::size_t> idx(rank, 0);
  for (std::size_t f = 0; f < n; ++f) {
    std::size_t p = 0;
    for (std::size_t i = 0; i < rank; ++i) p += idx[i] * stride[i];
    map[f] = static_cast<std::uint32_t>(p);
    for (std::size_t i = rank; i-- > 0;) {
      if (++idx[i] < out[i]) break;
      idx[i] = 0;
    }
  }
  return map;
}

template <class F, class DA, class DB>
Tensor binary_op(const char* op, const Tensor& a, const Tensor& b, F f, DA dfa, DB dfb) {
  if (a.shape() == b.shape()) {
    const std::size_t n = a.size();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = f(a[i], b[i]);
    return make_op(op, a.shape(), std::move(out), {a, b},
                   [a, b, f, dfa, dfb](TensorNode& o) {
                     TensorNode* na = a.node();
                     TensorNode* nb = b.node();
                     const bool ga = na->requires_grad, gb = nb->requires_grad;
                     if (ga) na->ensure_grad();
                     if (gb) nb->ensure_grad();
                     for (std::size_t i = 0; i < o.value.size(); ++i) {
                       const double g = o.grad[i];
                       if (g == 0.0) continue;  // avoids 0 * inf on dead branches
                       if (ga) na->grad[i] += g * dfa(na->value[i], nb->value[i]);
                       if (gb) nb->grad[i] += g * dfb(na->value[i], nb->value[i]);
                     }
                   });
  }
  Shape os = broadcast_shape(op, a.shape(), b.shape());
  auto amap = broadcast_map(os, a.shape());
  auto bmap = broadcast_map(os, b.shape());
  const std::size_t n = numel(os);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = f(a[amap[i]], b[bmap[i]]);
  return make_op(op, std::move(os), std::move(out), {a, b},
                 [a, b, f, dfa, dfb, amap, bmap](TensorNode& o) {
                   TensorNode* na = a.node();
                   TensorNode* nb = b.node();
                   const bool ga = na->requires_grad, gb = nb->requires_grad;
                   if (ga) na->ensure_grad();
                   if (gb) nb->ensure_grad();
                   for (std::size_t i = 0; i < o.value.size(); ++i) {
                     const double g = o.grad[i];
                     if (g == 0.0) continue;
                     const double va = na->value[amap[i]], vb = nb->value[bmap[i]];
                     if (ga) na->grad[amap[i]] += g * dfa(va, vb);
                     if (gb) nb->grad[bmap[i]] += g * dfb(va, vb);
                   }
                 });
}

template <class F, class DF>
Tensor unary_op(const char* op, const Tensor& x, F f, DF df) {
  const std::size_t n = x.size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = f(x[i]);
  return make_op(op, x.shape(), std::move(out), {x}, [x, df](TensorNode& o) {
    TensorNode* nx = x.node();
    if (!nx->requires_grad) return;
    nx->ensure_grad();
    for (std::size_t i = 0; i < o.value.size(); ++i) {
      if (o.grad[i] == 0.0) continue;  // avoids 0 * inf on dead branches
      nx->grad[i] += o.grad[i] * df(nx->value[i], o.value[i]);
    }
  });
}

// Iteration helper over one reduction axis: outer runs over all other axes,
// the reduced axis has `extent` entries `stride` apart starting at base(outer).
struct AxisIter {
  std::size_t outer_count, extent, stride, block;
  AxisIter(const Shape& s, std::size_t axis) {
    if (axis >= s.size()) throw ShapeError("axis out of range for " + shape_str(s));
    extent = s[axis];
    stride = 1;
    for (std::size_t i = axis + 1; i < s.size(); ++i) stride *= s[i];
    block = stride * extent;
    outer_count = numel(s) / extent;
  }
  std::size_t base(std::size_t outer) const {
    return (outer / stride) * block + (outer % stride);
  }
};

inline Shape drop_axis(const Shape& s, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) out.push_back(s[i]);
  if (out.empty()) out.push_back(1);
  return out;
}

}  // namespace detail

// ---- elementwise arithmetic ----

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}
inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

inline Tensor neg(const Tensor& x) {
  return detail::unary_op(
      "neg", x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}
inline Tensor exp(const Tensor& x) {
  return detail::unary_op(
      "exp", x, [](double v) { return std::exp(v); },
      [](double, double y) { return y; });
}
inline Tensor log(const Tensor& x) {
  for (double v : x.values())
    if (v < 0.0) throw DomainError("log: negative input " + std::to_string(v));
  return detail::unary_op(
      "log", x, [](double v) { return std::log(v); },
      [](double v, double) { return 1.0 / v; });
}
inline Tensor sqrt(const Tensor& x) {
  for (double v : x.values())
    if (v < 0.0) throw DomainError("sqrt: negative input " + std::to_string(v));
  return detail::unary_op(
      "sqrt", x, [](double v) { return std::sqrt(v); },
      [](double, double y) { return 0.5 / y; });
}
inline Tensor square(const Tensor& x) {
  return detail::unary_op(
      "square", x, [](double v) { return v * v; },
      [](double v, double) { return 2.0 * v; });
}
inline Tensor sigmoid(const Tensor& x) {
  return detail::unary_op(
      "sigmoid", x,
      [](double v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v))
                                   : std::exp(v) / (1.0 + std::exp(v)); },
      [](double, double y) { return y * (1.0 - y); });
}
inline Tensor softplus(const Tensor& x) {
  return detail::unary_op(
      "softplus", x,
      [](double v) { return v > 30.0 ? v : std::log1p(std::exp(v)); },
      [](double v, double) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v))
                                           : std::exp(v) / (1.0 + std::exp(v)); });
}

// Gradient passes through on [lo, hi] inclusive, zero outside.
inline Tensor clamp(const Tensor& x, double lo, double hi) {
  return detail::unary_op(
      "clamp", x, [lo, hi](double v) { return std::min(std::max(v, lo), hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}
inline Tensor clamp_min(const Tensor& x, double lo) {
  return clamp(x, lo, std::numeric_limits<double>::infinity());
}

// ---- reductions ----

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return detail::make_op("sum", {1}, {s}, {x}, [x](TensorNode& o) {
    TensorNode* nx = x.node();
    if (!nx->requires_grad) return;
    nx->ensure_grad();
    for (double& g : nx->grad) g += o.grad[0];
  });
}

inline Tensor mean(const Tensor& x) {
  const double n = static_cast<double>(x.size());
  double s = 0.0;
  for (double v : x.values()) s += v;
  return detail::make_op("mean", {1}, {s / n}, {x}, [x, n](TensorNode& o) {
    TensorNode* nx = x.node();
    if (!nx->requires_grad) return;
    nx->ensure_grad();
    for (double& g : nx->grad) g += o.grad[0] / n;
  });
}

inline Tensor sum(const Tensor& x, std::size_t axis) {
  detail::AxisIter it(x.shape(), axis);
  std::vector<double> out(it.outer_count, 0.0);
  for (std::size_t o = 0; o < it.outer_count; ++o) {
    const std::size_t b = it.base(o);
    for (std::size_t k = 0; k < it.extent; ++k) out[o] += x[b + k * it.stride];
  }
  return detail::make_op("sum_axis", detail::drop_axis(x.shape(), axis), std::move(out),
                         {x}, [x, it](TensorNode& o) {
                           TensorNode* nx = x.node();
                           if (!nx->requires_grad) return;
                           nx->ensure_grad();
                           for (std::size_t i = 0; i < it.outer_count; ++i) {
                             const std::size_t b = it.base(i);
                             for (std::size_t k = 0; k < it.extent; ++k)
                               nx->grad[b + k * it.stride] += o.grad[i];
                           }
                         });
}

// Stable logsumexp along an axis; -inf entries contribute zero mass.
inline Tensor logsumexp(const Tensor& x, std::size_t axis) {
  detail::AxisIter it(x.shape(), axis);
  std::vector<double> out(it.outer_count);
  for (std::size_t o = 0; o < it.outer_count; ++o) {
    const std::size_t b = it.base(o);
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < it.extent; ++k)
      m = std::max(m, x[b + k * it.stride]);
    if (std::isinf(m) && m < 0) {
      out[o] = m;
      continue;
    }
    double s = 0.0;
    for (std::size_t k = 0; k < it.extent; ++k)
      s += std::exp(x[b + k * it.stride] - m);
    out[o] = m + std::log(s);
  }
  return detail::make_op("logsumexp", detail::drop_axis(x.shape(), axis), std::move(out),
                         {x}, [x, it](TensorNode& o) {
                           TensorNode* nx = x.node();
                           if (!nx->requires_grad) return;
                           nx->ensure_grad();
                           for (std::size_t i = 0; i < it.outer_count; ++i) {
                             if (o.grad[i] == 0.0 || std::isinf(o.value[i])) continue;
                             const std::size_t b = it.base(i);
                             for (std::size_t k = 0; k < it.extent; ++k) {
                               const std::size_t p = b + k * it.stride;
                               const double w = std::exp(nx->value[p] - o.value[i]);
                               if (w > 0) nx->grad[p] += o.grad[i] * w;
                             }
                           }
                         });
}

inline Tensor logsumexp(const Tensor& x) {
  if (x.shape().size() != 1) throw ShapeError("logsumexp: expected 1-d, got " + shape_str(x.shape()));
  return logsumexp(x, 0);
}

inline Tensor softmax(const Tensor& x, std::size_t axis) {
  detail::AxisIter it(x.shape(), axis);
  std::vector<double> out(x.size());
  for (std::size_t o = 0; o < it.outer_count; ++o) {
    const std::size_t b = it.base(o);
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < it.extent; ++k)
      m = std::max(m, x[b + k * it.stride]);
    double s = 0.0;
    for (std::size_t k = 0; k < it.extent; ++k)
      s += std::exp(x[b + k * it.stride] - m);
    for (std::size_t k = 0; k < it.extent; ++k)
      out[b + k * it.stride] = std::exp(x[b + k * it.stride] - m) / s;
  }
  return detail::make_op("softmax", x.shape(), std::move(out), {x},
                         [x, it](TensorNode& o) {
                           TensorNode* nx = x.node();
                           if (!nx->requires_grad) return;
                           nx->ensure_grad();
                           for (std::size_t i = 0; i < it.outer_count; ++i) {
                             const std::size_t b = it.base(i);
                             double dot = 0.0;
                             for (std::size_t k = 0; k < it.extent; ++k) {
                               const std::size_t p = b + k * it.stride;
                               dot += o.grad[p] * o.value[p];
                             }
                             for (std::size_t k = 0; k < it.extent; ++k) {
                               const std::size_t p = b + k * it.stride;
                               nx->grad[p] += o.value[p] * (o.grad[p] - dot);
                             }
                           }
                         });
}

// ---- linear algebra / structure ----

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
    throw ShapeError("matmul: shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " do not conform");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t l = 0; l < k; ++l) {
      const double av = a[i * k + l];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * b[l * n + j];
    }
  return detail::make_op("matmul", {m, n}, std::move(out), {a, b},
                         [a, b, m, k, n](TensorNode& o) {
                           TensorNode* na = a.node();
                           TensorNode* nb = b.node();
                           if (na->requires_grad) {
                             na->ensure_grad();
                             for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t l = 0; l < k; ++l) {
                                 double s = 0.0;
                                 for (std::size_t j = 0; j < n; ++j)
                                   s += o.grad[i * n + j] * nb->value[l * n + j];
                                 na->grad[i * k + l] += s;
                               }
                           }
                           if (nb->requires_grad) {
                             nb->ensure_grad();
                             for (std::size_t l = 0; l < k; ++l)
                               for (std::size_t j = 0; j < n; ++j) {
                                 double s = 0.0;
                                 for (std::size_t i = 0; i < m; ++i)
                                   s += na->value[i * k + l] * o.grad[i * n + j];
                                 nb->grad[l * n + j] += s;
                               }
                           }
                         });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size())
    throw ShapeError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  return detail::make_op("reshape", std::move(shape), x.values(), {x},
                         [x](TensorNode& o) {
                           TensorNode* nx = x.node();
                           if (!nx->requires_grad) return;
                           nx->ensure_grad();
                           for (std::size_t i = 0; i < o.value.size(); ++i)
                             nx->grad[i] += o.grad[i];
                         });
}

inline Tensor broadcast_to(const Tensor& x, Shape shape) {
  Shape check = detail::broadcast_shape("broadcast_to", x.shape(), shape);
  if (check != shape)
    throw ShapeError("broadcast_to: " + shape_str(x.shape()) + " to " + shape_str(shape));
  auto map = detail::broadcast_map(shape, x.shape());
  std::vector<double> out(numel(shape));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[map[i]];
  return detail::make_op("broadcast_to", std::move(shape), std::move(out), {x},
                         [x, map](TensorNode& o) {
                           TensorNode* nx = x.node();
                           if (!nx->requires_grad) return;
                           nx->ensure_grad();
                           for (std::size_t i = 0; i < o.value.size(); ++i)
                             nx->grad[map[i]] += o.grad[i];
                         });
}

// Gather by flat index; backward scatter-adds.
inline Tensor take(const Tensor& x, std::vector<std::size_t> idx) {
  std::vector<double> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= x.size())
      throw ShapeError("take: index " + std::to_string(idx[i]) + " out of range for " +
                       shape_str(x.shape()));
    out[i] = x[idx[i]];
  }
  return detail::make_op("take", {idx.size()}, std::move(out), {x},
                         [x, idx](TensorNode& o) {
                           TensorNode* nx = x.node();
                           if (!nx->requires_grad) return;
                           nx->ensure_grad();
                           for (std::size_t i = 0; i < idx.size(); ++i)
                             nx->grad[idx[i]] += o.grad[i];
                         });
}

// Rows [start, start+len) along axis 0.
inline Tensor slice0(const Tensor& x, std::size_t start, std::size_t len) {
  if (x.shape().empty() || start + len > x.shape()[0])
    throw ShapeError("slice0: [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") out of range for " +
                     shape_str(x.shape()));
  const std::size_t row = x.size() / x.shape()[0];
  Shape os = x.shape();
  os[0] = len;
  std::vector<double> out(x.values().begin() + start * row,
                          x.values().begin() + (start + len) * row);
  return detail::make_op("slice0", std::move(os), std::move(out), {x},
                         [x, start, row](TensorNode& o) {
                           TensorNode* nx = x.node();
                           if (!nx->requires_grad) return;
                           nx->ensure_grad();
                           for (std::size_t i = 0; i < o.value.size(); ++i)
                             nx->grad[start * row + i] += o.grad[i];
                         });
}

inline Tensor concat0(const Tensor& a, const Tensor& b) {
  Shape sa = a.shape(), sb = b.shape();
  if (sa.size() != sb.size() || sa.empty())
    throw ShapeError("concat0: ranks differ, " + shape_str(sa) + " vs " + shape_str(sb));
  for (std::size_t i = 1; i < sa.size(); ++i)
    if (sa[i] != sb[i])
      throw ShapeError("concat0: shapes " + shape_str(sa) + " and " + shape_str(sb));
  Shape os = sa;
  os[0] += sb[0];
  std::vector<double> out;
  out.reserve(a.size() + b.size());
  out.insert(out.end(), a.values().begin(), a.values().end());
  out.insert(out.end(), b.values().begin(), b.values().end());
  return detail::make_op("concat0", std::move(os), std::move(out), {a, b},
                         [a, b](TensorNode& o) {
                           TensorNode* na = a.node();
                           TensorNode* nb = b.node();
                           if (na->requires_grad) {
                             na->ensure_grad();
                             for (std::size_t i = 0; i < na->value.size(); ++i)
                               na->grad[i] += o.grad[i];
                           }
                           if (nb->requires_grad) {
                             nb->ensure_grad();
                             const std::size_t off = na->value.size();
                             for (std::size_t i = 0; i < nb->value.size(); ++i)
                               nb->grad[i] += o.grad[off + i];
                           }
                         });
}

inline Tensor stack_scalars(const std::vector<Tensor>& xs) {
  std::vector<double> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = xs[i].item();
  return detail::make_op("stack", {xs.size()}, std::move(out), xs,
                         [xs](TensorNode& o) {
                           for (std::size_t i = 0; i < xs.size(); ++i) {
                             TensorNode* n = xs[i].node();
                             if (!n->requires_grad) continue;
                             n->ensure_grad();
                             n->grad[0] += o.grad[i];
                           }
                         });
}

// Bilinear sampling of a 2-d source at continuous (sx, sy) locations with
// zero padding outside the source extent. sx is the column coordinate and sy
// the row coordinate; integer coordinates land on source pixels exactly.
inline Tensor grid_sample(const Tensor& src, const Tensor& sx, const Tensor& sy) {
  if (src.shape().size() != 2)
    throw ShapeError("grid_sample: source must be 2-d, got " + shape_str(src.shape()));
  if (sx.shape() != sy.shape())
    throw ShapeError("grid_sample: coordinate shapes " + shape_str(sx.shape()) +
                     " and " + shape_str(sy.shape()) + " differ");
  const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(src.shape()[0]);
  const std::ptrdiff_t w = static_cast<std::ptrdiff_t>(src.shape()[1]);
  const std::size_t n = sx.size();
  auto at = [&](std::ptrdiff_t yy, std::ptrdiff_t xx) -> double {
    if (yy < 0 || yy >= h || xx < 0 || xx >= w) return 0.0;
    return src[static_cast<std::size_t>(yy * w + xx)];
  };
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = sx[i], y = sy[i];
    const double fx0 = std::floor(x), fy0 = std::floor(y);
    const std::ptrdiff_t x0 = static_cast<std::ptrdiff_t>(fx0);
    const std::ptrdiff_t y0 = static_cast<std::ptrdiff_t>(fy0);
    const double ax = x - fx0, ay = y - fy0;
    out[i] = (1 - ax) * (1 - ay) * at(y0, x0) + ax * (1 - ay) * at(y0, x0 + 1) +
             (1 - ax) * ay * at(y0 + 1, x0) + ax * ay * at(y0 + 1, x0 + 1);
  }
  return detail::make_op(
      "grid_sample", sx.shape(), std::move(out), {src, sx, sy},
      [src, sx, sy, h, w](TensorNode& o) {
        TensorNode* ns = src.node();
        TensorNode* nx = sx.node();
        TensorNode* ny = sy.node();
        const bool gs = ns->requires_grad, gx = nx->requires_grad, gy = ny->requires_grad;
        if (gs) ns->ensure_grad();
        if (gx) nx->ensure_grad();
        if (gy) ny->ensure_grad();
        auto in = [&](std::ptrdiff_t yy, std::ptrdiff_t xx) {
          return yy >= 0 && yy < h && xx >= 0 && xx < w;
        };
        auto val = [&](std::ptrdiff_t yy, std::ptrdiff_t xx) -> double {
          return in(yy, xx) ? ns->value[static_cast<std::size_t>(yy * w + xx)] : 0.0;
        };
        for (std::size_t i = 0; i < o.value.size(); ++i) {
          const double g = o.grad[i];
          if (g == 0.0) continue;
          const double x = nx->value[i], y = ny->value[i];
          const double fx0 = std::floor(x), fy0 = std::floor(y);
          const std::ptrdiff_t x0 = static_cast<std::ptrdiff_t>(fx0);
          const std::ptrdiff_t y0 = static_cast<std::ptrdiff_t>(fy0);
          const double ax = x - fx0, ay = y - fy0;
          if (gs) {
            auto acc = [&](std::ptrdiff_t yy, std::ptrdiff_t xx, double wgt) {
              if (in(yy, xx)) ns->grad[static_cast<std::size_t>(yy * w + xx)] += g * wgt;
            };
            acc(y0, x0, (1 - ax) * (1 - ay));
            acc(y0, x0 + 1, ax * (1 - ay));
            acc(y0 + 1, x0, (1 - ax) * ay);
            acc(y0 + 1, x0 + 1, ax * ay);
          }
          const double v00 = val(y0, x0), v10 = val(y0, x0 + 1);
          const double v01 = val(y0 + 1, x0), v11 = val(y0 + 1, x0 + 1);
          if (gx) nx->grad[i] += g * ((1 - ay) * (v10 - v00) + ay * (v11 - v01));
          if (gy) ny->grad[i] += g * ((1 - ax) * (v01 - v00) + ax * (v11 - v10));
        }
      });
}

// ---- backward ----

inline void backward(const Tensor& root) {
  if (root.size() != 1)
    throw ShapeError("backward: root must be scalar, got " + shape_str(root.shape()));
  Tape* tape = Tape::active();
  if (!tape || tape->size() == 0) throw Error("backward: no active tape");
  root.node()->ensure_grad();
  root.node()->grad[0] = 1.0;
  const auto& nodes = tape->nodes();
  bool seen_root = false;
  for (std::size_t i = nodes.size(); i-- > 0;) {
    TensorNode* n = nodes[i].get();
    if (n == root.node()) seen_root = true;
    if (!seen_root || n->grad.empty() || !n->backprop) continue;
    n->backprop(*n);
  }
  if (!seen_root) throw Error("backward: root was not recorded on the active tape");
}

// ---- operator sugar ----

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator+(const Tensor& a, double b) { return add(a, Tensor::scalar(b)); }
inline Tensor operator+(double a, const Tensor& b) { return add(Tensor::scalar(a), b); }
inline Tensor operator-(const Tensor& a, double b) { return sub(a, Tensor::scalar(b)); }
inline Tensor operator-(double a, const Tensor& b) { return sub(Tensor::scalar(a), b); }
inline Tensor operator*(const Tensor& a, double b) { return mul(a, Tensor::scalar(b)); }
inline Tensor operator*(double a, const Tensor& b) { return mul(Tensor::scalar(a), b); }
inline Tensor operator/(const Tensor& a, double b) { return div(a, Tensor::scalar(b)); }
inline Tensor operator/(double a, const Tensor& b) { return div(Tensor::scalar(a), b); }

}  // namespace caps
