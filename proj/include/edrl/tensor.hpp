// SPDX-License-Identifier: Apache-2.0
#pragma once

// Dense double-precision tensors with a dynamic reverse-mode tape.
//
// A Tensor is a shared handle onto a graph node. Operations on tensors that
// require gradients record a closure on the result; `backward()` on a scalar
// walks the recorded graph in reverse topological order. The tape is rebuilt
// every step, and leaf gradients accumulate until `zero_grad()`.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace edrl {

using Shape = std::vector<std::size_t>;

/// Incompatible extents, ranks or axes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Values outside an operation's domain, or non-finite results.
class NumericError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const Node&)> backward;

  double* grad_ptr() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad.data();
  }
};

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  using BackwardFn = std::function<void(const detail::Node&)>;

  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (values.size() != shape_numel(shape)) {
      throw ShapeError("tensor of shape " + shape_str(shape) + " needs " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), 0.0, requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor(Shape{}, {value}, requires_grad);
  }

  /// Builds an op result. Graph edges are recorded only when grad mode is on
  /// and at least one input requires gradients.
  static Tensor make_result(Shape shape, std::vector<double> values,
                            std::initializer_list<const Tensor*> inputs, BackwardFn backward) {
    Tensor out(std::move(shape), std::move(values));
    if (!detail::grad_mode()) return out;
    bool any = false;
    for (const Tensor* t : inputs) any = any || t->requires_grad();
    if (!any) return out;
    out.node_->requires_grad = true;
    for (const Tensor* t : inputs) out.node_->parents.push_back(t->node_);
    out.node_->backward = std::move(backward);
    return out;
  }

  static Tensor make_result(Shape shape, std::vector<double> values,
                            const std::vector<Tensor>& inputs, BackwardFn backward) {
    Tensor out(std::move(shape), std::move(values));
    if (!detail::grad_mode()) return out;
    bool any = false;
    for (const auto& t : inputs) any = any || t.requires_grad();
    if (!any) return out;
    out.node_->requires_grad = true;
    for (const auto& t : inputs) out.node_->parents.push_back(t.node_);
    out.node_->backward = std::move(backward);
    return out;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }

  /// Extent of `axis`; negative axes count from the back.
  std::size_t dim(std::ptrdiff_t axis) const { return shape()[normalize_axis(axis)]; }

  std::size_t normalize_axis(std::ptrdiff_t axis) const {
    const auto r = static_cast<std::ptrdiff_t>(rank());
    const auto a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) {
      throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                       shape_str(shape()));
    }
    return static_cast<std::size_t>(a);
  }

  std::span<const double> values() const { return node_->data; }
  std::span<double> mutable_values() { return node_->data; }
  double value(std::size_t flat) const { return node_->data[flat]; }

  double item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }

  Tensor& set_requires_grad(bool flag) {
    node_->requires_grad = flag;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  /// Same values, cut from the graph.
  Tensor detach() const { return Tensor(shape(), node_->data); }

  /// Deep copy of the values with the given gradient flag.
  Tensor clone(bool requires_grad = false) const {
    return Tensor(shape(), node_->data, requires_grad);
  }

  bool is_leaf() const { return !node_->backward; }
  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

  /// Reverse-mode sweep from this scalar. Leaf gradients accumulate;
  /// intermediate gradients are reset on every call.
  void backward() const;

  detail::Node& node() const { return *node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

inline void check_finite(const Tensor& t, const std::string& what) {
  const auto v = t.values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw NumericError(what + ": non-finite value " + std::to_string(v[i]) + " at index " +
                         std::to_string(i));
    }
  }
}

inline void Tensor::backward() const {
  if (numel() != 1) {
    throw ShapeError("backward() needs a scalar, got shape " + shape_str(shape()));
  }
  if (!requires_grad()) {
    throw std::invalid_argument("backward() on a tensor that is not part of a graph");
  }
  if (!std::isfinite(node_->data[0])) {
    throw NumericError("backward() from non-finite loss " + std::to_string(node_->data[0]));
  }

  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      detail::Node* p = n->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (detail::Node* n : order) {
    if (n->backward) n->grad.assign(n->data.size(), 0.0);
  }
  node_->grad_ptr()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
  for (detail::Node* n : order) {
    if (n->backward) continue;
    for (std::size_t i = 0; i < n->grad.size(); ++i) {
      if (!std::isfinite(n->grad[i])) {
        throw NumericError("non-finite gradient at index " + std::to_string(i) +
                           " of a leaf with shape " + shape_str(n->shape));
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Broadcasting binary arithmetic

namespace detail {

/// Maps each output element to its source element in one operand.
struct BroadcastIndex {
  enum class Kind { identity, scalar, modulo, divide, table } kind = Kind::identity;
  std::size_t modulus = 1;
  std::vector<std::size_t> table;

  std::size_t operator()(std::size_t i) const {
    switch (kind) {
      case Kind::identity: return i;
      case Kind::scalar: return 0;
      case Kind::modulo: return i % modulus;
      case Kind::divide: return i / modulus;
      case Kind::table: return table[i];
    }
    return i;
  }
};

struct BroadcastPlan {
  Shape out;
  BroadcastIndex a, b;
};

inline BroadcastIndex make_index(const Shape& in, const Shape& out) {
  BroadcastIndex idx;
  const auto n_in = shape_numel(in);
  if (in == out) return idx;
  if (n_in == 1) {
    idx.kind = BroadcastIndex::Kind::scalar;
    return idx;
  }
  // leading ones carry no layout information
  Shape core(std::find_if(in.begin(), in.end(), [](std::size_t e) { return e != 1; }), in.end());
  // suffix broadcast: in == out[k:]
  if (core.size() <= out.size() &&
      std::equal(core.begin(), core.end(), out.end() - static_cast<std::ptrdiff_t>(core.size()))) {
    idx.kind = BroadcastIndex::Kind::modulo;
    idx.modulus = n_in;
    return idx;
  }
  // prefix broadcast: in == out[:k] followed by ones
  if (in.size() == out.size()) {
    std::size_t k = in.size();
    while (k > 0 && in[k - 1] == 1) --k;
    if (std::equal(in.begin(), in.begin() + static_cast<std::ptrdiff_t>(k), out.begin())) {
      idx.kind = BroadcastIndex::Kind::divide;
      idx.modulus = shape_numel(out) / n_in;
      return idx;
    }
  }
  idx.kind = BroadcastIndex::Kind::table;
  const std::size_t r = out.size();
  const std::size_t offset = r - in.size();
  std::vector<std::size_t> in_stride(r, 0);
  std::size_t s = 1;
  for (std::size_t d = r; d-- > offset;) {
    const auto extent = in[d - offset];
    in_stride[d] = extent == 1 ? 0 : s;
    s *= extent;
  }
  const auto n_out = shape_numel(out);
  idx.table.resize(n_out);
  std::vector<std::size_t> counter(r, 0);
  std::size_t src = 0;
  for (std::size_t i = 0; i < n_out; ++i) {
    idx.table[i] = src;
    for (std::size_t d = r; d-- > 0;) {
      if (++counter[d] < out[d]) {
        src += in_stride[d];
        break;
      }
      src -= in_stride[d] * (out[d] - 1);
      counter[d] = 0;
    }
  }
  return idx;
}

inline BroadcastPlan plan_broadcast(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t ea = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t eb = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeError("cannot broadcast shapes " + shape_str(a) + " and " + shape_str(b));
    }
    out[i] = std::max(ea, eb);
  }
  BroadcastPlan plan;
  plan.a = make_index(a, out);
  plan.b = make_index(b, out);
  plan.out = std::move(out);
  return plan;
}

enum class BinaryOp { add, sub, mul, div };

/// Calls `f(i, ia, ib)` for every output element, specialised on the two
/// index kinds so the common same-shape and bias cases run as plain loops.
template <typename F>
inline void for_each_broadcast(const BroadcastPlan& plan, std::size_t n, F&& f) {
  using K = BroadcastIndex::Kind;
  if (plan.a.kind == K::identity && plan.b.kind == K::identity) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, i);
  } else if (plan.a.kind == K::identity && plan.b.kind == K::modulo) {
    const std::size_t mod = plan.b.modulus;
    for (std::size_t base = 0; base < n; base += mod)
      for (std::size_t j = 0; j < mod; ++j) f(base + j, base + j, j);
  } else if (plan.a.kind == K::identity && plan.b.kind == K::divide) {
    const std::size_t block = plan.b.modulus;
    for (std::size_t base = 0, r = 0; base < n; base += block, ++r)
      for (std::size_t j = 0; j < block; ++j) f(base + j, base + j, r);
  } else if (plan.a.kind == K::identity && plan.b.kind == K::scalar) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, std::size_t{0});
  } else {
    for (std::size_t i = 0; i < n; ++i) f(i, plan.a(i), plan.b(i));
  }
}

template <BinaryOp Op>
inline Tensor binary_impl(const Tensor& a, const Tensor& b) {
  auto plan = std::make_shared<const BroadcastPlan>(plan_broadcast(a.shape(), b.shape()));
  const auto av = a.values();
  const auto bv = b.values();
  const std::size_t n = shape_numel(plan->out);
  if constexpr (Op == BinaryOp::div) {
    for (std::size_t j = 0; j < bv.size(); ++j) {
      if (bv[j] == 0.0) {
        throw NumericError("division by zero at denominator index " + std::to_string(j));
      }
    }
  }
  std::vector<double> out(n);
  for_each_broadcast(*plan, n, [&](std::size_t i, std::size_t ia, std::size_t ib) {
    const double x = av[ia];
    const double y = bv[ib];
    if constexpr (Op == BinaryOp::add) out[i] = x + y;
    if constexpr (Op == BinaryOp::sub) out[i] = x - y;
    if constexpr (Op == BinaryOp::mul) out[i] = x * y;
    if constexpr (Op == BinaryOp::div) out[i] = x / y;
  });
  return Tensor::make_result(plan->out, std::move(out), {&a, &b}, [plan](const Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const double* g = self.grad.data();
    const std::size_t n = self.grad.size();
    if (pa.requires_grad) {
      double* ga = pa.grad_ptr();
      const double* y = pb.data.data();
      for_each_broadcast(*plan, n, [&](std::size_t i, std::size_t ia, std::size_t ib) {
        if constexpr (Op == BinaryOp::add || Op == BinaryOp::sub) ga[ia] += g[i];
        if constexpr (Op == BinaryOp::mul) ga[ia] += g[i] * y[ib];
        if constexpr (Op == BinaryOp::div) ga[ia] += g[i] / y[ib];
      });
    }
    if (pb.requires_grad) {
      double* gb = pb.grad_ptr();
      const double* x = pa.data.data();
      const double* y = pb.data.data();
      for_each_broadcast(*plan, n, [&](std::size_t i, std::size_t ia, std::size_t ib) {
        if constexpr (Op == BinaryOp::add) gb[ib] += g[i];
        if constexpr (Op == BinaryOp::sub) gb[ib] -= g[i];
        if constexpr (Op == BinaryOp::mul) gb[ib] += g[i] * x[ia];
        if constexpr (Op == BinaryOp::div) gb[ib] -= g[i] * x[ia] / (y[ib] * y[ib]);
      });
    }
  });
}

inline Tensor binary(const Tensor& a, const Tensor& b, BinaryOp op) {
  switch (op) {
    case BinaryOp::add: return binary_impl<BinaryOp::add>(a, b);
    case BinaryOp::sub: return binary_impl<BinaryOp::sub>(a, b);
    case BinaryOp::mul: return binary_impl<BinaryOp::mul>(a, b);
    case BinaryOp::div: return binary_impl<BinaryOp::div>(a, b);
  }
  throw std::logic_error("unknown binary op");
}

template <typename Forward, typename Derivative>
Tensor unary(const Tensor& x, Forward f, Derivative df) {
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return Tensor::make_result(x.shape(), std::move(out), {&x}, [df](const Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    double* gp = p.grad_ptr();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      gp[i] += self.grad[i] * df(p.data[i], self.data[i]);
    }
  });
}

/// (outer, extent, inner) decomposition around one axis of a row-major shape.
struct AxisLayout {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisLayout axis_layout(const Shape& shape, std::size_t axis) {
  AxisLayout l;
  for (std::size_t d = 0; d < axis; ++d) l.outer *= shape[d];
  l.extent = shape[axis];
  for (std::size_t d = axis + 1; d < shape.size(); ++d) l.inner *= shape[d];
  return l;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinaryOp::add); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinaryOp::sub); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinaryOp::mul); }
inline Tensor div(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinaryOp::div); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double s) { return add(a, Tensor::scalar(s)); }
inline Tensor operator-(const Tensor& a, double s) { return sub(a, Tensor::scalar(s)); }
inline Tensor operator*(const Tensor& a, double s) { return mul(a, Tensor::scalar(s)); }
inline Tensor operator/(const Tensor& a, double s) { return div(a, Tensor::scalar(s)); }
inline Tensor operator+(double s, const Tensor& a) { return add(Tensor::scalar(s), a); }
inline Tensor operator-(double s, const Tensor& a) { return sub(Tensor::scalar(s), a); }
inline Tensor operator*(double s, const Tensor& a) { return mul(Tensor::scalar(s), a); }
inline Tensor operator/(double s, const Tensor& a) { return div(Tensor::scalar(s), a); }

// ---------------------------------------------------------------------------
// Pointwise

inline Tensor neg(const Tensor& x) {
  return detail::unary(x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

inline Tensor operator-(const Tensor& x) { return neg(x); }

inline Tensor scale(const Tensor& x, double s) {
  return detail::unary(x, [s](double v) { return s * v; }, [s](double, double) { return s; });
}

inline Tensor exp(const Tensor& x) {
  Tensor out = detail::unary(
      x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
  check_finite(out, "exp overflow");
  return out;
}

inline Tensor log(const Tensor& x) {
  const auto v = x.values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!(v[i] > 0.0)) {
      throw NumericError("log of non-positive value " + std::to_string(v[i]) + " at index " +
                         std::to_string(i));
    }
  }
  return detail::unary(
      x, [](double t) { return std::log(t); }, [](double t, double) { return 1.0 / t; });
}

inline Tensor sqrt(const Tensor& x) {
  const auto v = x.values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i] < 0.0 || std::isnan(v[i])) {
      throw NumericError("sqrt of negative value " + std::to_string(v[i]) + " at index " +
                         std::to_string(i));
    }
  }
  return detail::unary(
      x, [](double t) { return std::sqrt(t); }, [](double, double y) { return 0.5 / y; });
}

inline Tensor square(const Tensor& x) {
  return detail::unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

/// tanh approximation of GELU.
inline Tensor gelu(const Tensor& x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double c = 0.044715;
  return detail::unary(
      x,
      [](double v) { return 0.5 * v * (1.0 + std::tanh(k * (v + c * v * v * v))); },
      [](double v, double) {
        const double t = std::tanh(k * (v + c * v * v * v));
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * k * (1.0 + 3.0 * c * v * v);
      });
}

/// max(x, lo); the gradient passes only where x > lo.
inline Tensor clamp_min(const Tensor& x, double lo) {
  return detail::unary(
      x, [lo](double v) { return v > lo ? v : lo; },
      [lo](double v, double) { return v > lo ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
  const auto v = x.values();
  double s = 0.0;
  for (double e : v) s += e;
  return Tensor::make_result(Shape{}, {s}, {&x}, [](const detail::Node& self) {
    detail::Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    double* gp = p.grad_ptr();
    for (std::size_t i = 0; i < p.data.size(); ++i) gp[i] += self.grad[0];
  });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

inline Tensor sum(const Tensor& x, std::ptrdiff_t axis, bool keepdim = false) {
  const std::size_t ax = x.normalize_axis(axis);
  const auto l = detail::axis_layout(x.shape(), ax);
  Shape out_shape = x.shape();
  if (keepdim) {
    out_shape[ax] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  }
  const auto xv = x.values();
  std::vector<double> out(l.outer * l.inner, 0.0);
  for (std::size_t o = 0; o < l.outer; ++o)
    for (std::size_t k = 0; k < l.extent; ++k)
      for (std::size_t i = 0; i < l.inner; ++i)
        out[o * l.inner + i] += xv[(o * l.extent + k) * l.inner + i];
  return Tensor::make_result(std::move(out_shape), std::move(out), {&x}, [l](const detail::Node& self) {
    detail::Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    double* gp = p.grad_ptr();
    for (std::size_t o = 0; o < l.outer; ++o)
      for (std::size_t k = 0; k < l.extent; ++k)
        for (std::size_t i = 0; i < l.inner; ++i)
          gp[(o * l.extent + k) * l.inner + i] += self.grad[o * l.inner + i];
  });
}

inline Tensor mean(const Tensor& x, std::ptrdiff_t axis, bool keepdim = false) {
  return scale(sum(x, axis, keepdim), 1.0 / static_cast<double>(x.dim(axis)));
}

/// max(sqrt(sum(x^2 along axis)), eps). The gradient is x / norm where the
/// norm exceeds eps and zero where the clamp is active.
inline Tensor l2_norm(const Tensor& x, std::ptrdiff_t axis, double eps, bool keepdim = false) {
  const std::size_t ax = x.normalize_axis(axis);
  const auto l = detail::axis_layout(x.shape(), ax);
  Shape out_shape = x.shape();
  if (keepdim) {
    out_shape[ax] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  }
  const auto xv = x.values();
  std::vector<double> out(l.outer * l.inner, 0.0);
  for (std::size_t o = 0; o < l.outer; ++o)
    for (std::size_t k = 0; k < l.extent; ++k)
      for (std::size_t i = 0; i < l.inner; ++i) {
        const double e = xv[(o * l.extent + k) * l.inner + i];
        out[o * l.inner + i] += e * e;
      }
  for (double& e : out) e = std::max(std::sqrt(e), eps);
  return Tensor::make_result(
      std::move(out_shape), std::move(out), {&x}, [l, eps](const detail::Node& self) {
        detail::Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        double* gp = p.grad_ptr();
        for (std::size_t o = 0; o < l.outer; ++o)
          for (std::size_t i = 0; i < l.inner; ++i) {
            const double norm = self.data[o * l.inner + i];
            if (norm <= eps) continue;
            const double g = self.grad[o * l.inner + i] / norm;
            for (std::size_t k = 0; k < l.extent; ++k) {
              const std::size_t j = (o * l.extent + k) * l.inner + i;
              gp[j] += g * p.data[j];
            }
          }
      });
}

// ---------------------------------------------------------------------------
// Softmax family (max-subtracted)

inline Tensor softmax(const Tensor& x, std::ptrdiff_t axis = -1) {
  const std::size_t ax = x.normalize_axis(axis);
  const auto l = detail::axis_layout(x.shape(), ax);
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t o = 0; o < l.outer; ++o)
    for (std::size_t i = 0; i < l.inner; ++i) {
      const auto at = [&](std::size_t k) { return (o * l.extent + k) * l.inner + i; };
      double m = xv[at(0)];
      for (std::size_t k = 1; k < l.extent; ++k) m = std::max(m, xv[at(k)]);
      double z = 0.0;
      for (std::size_t k = 0; k < l.extent; ++k) z += (out[at(k)] = std::exp(xv[at(k)] - m));
      for (std::size_t k = 0; k < l.extent; ++k) out[at(k)] /= z;
    }
  return Tensor::make_result(x.shape(), std::move(out), {&x}, [l](const detail::Node& self) {
    detail::Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    double* gp = p.grad_ptr();
    for (std::size_t o = 0; o < l.outer; ++o)
      for (std::size_t i = 0; i < l.inner; ++i) {
        const auto at = [&](std::size_t k) { return (o * l.extent + k) * l.inner + i; };
        double dot = 0.0;
        for (std::size_t k = 0; k < l.extent; ++k) dot += self.grad[at(k)] * self.data[at(k)];
        for (std::size_t k = 0; k < l.extent; ++k)
          gp[at(k)] += self.data[at(k)] * (self.grad[at(k)] - dot);
      }
  });
}

inline Tensor log_softmax(const Tensor& x, std::ptrdiff_t axis = -1) {
  const std::size_t ax = x.normalize_axis(axis);
  const auto l = detail::axis_layout(x.shape(), ax);
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t o = 0; o < l.outer; ++o)
    for (std::size_t i = 0; i < l.inner; ++i) {
      const auto at = [&](std::size_t k) { return (o * l.extent + k) * l.inner + i; };
      double m = xv[at(0)];
      for (std::size_t k = 1; k < l.extent; ++k) m = std::max(m, xv[at(k)]);
      double z = 0.0;
      for (std::size_t k = 0; k < l.extent; ++k) z += std::exp(xv[at(k)] - m);
      const double lz = m + std::log(z);
      for (std::size_t k = 0; k < l.extent; ++k) out[at(k)] = xv[at(k)] - lz;
    }
  return Tensor::make_result(x.shape(), std::move(out), {&x}, [l](const detail::Node& self) {
    detail::Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    double* gp = p.grad_ptr();
    for (std::size_t o = 0; o < l.outer; ++o)
      for (std::size_t i = 0; i < l.inner; ++i) {
        const auto at = [&](std::size_t k) { return (o * l.extent + k) * l.inner + i; };
        double total = 0.0;
        for (std::size_t k = 0; k < l.extent; ++k) total += self.grad[at(k)];
        for (std::size_t k = 0; k < l.extent; ++k)
          gp[at(k)] += self.grad[at(k)] - std::exp(self.data[at(k)]) * total;
      }
  });
}

// ---------------------------------------------------------------------------
// Matrix products

/// Supported forms: [M,K]@[K,N]; [B,M,K]@[B,K,N]; [...,K]@[K,N] (the
/// right operand shared across all leading dimensions of the left).
namespace detail {

// Dense kernels in axpy form. Each output element accumulates its terms in a
// fixed order, so the AVX2 clone and the portable one agree bitwise (no FMA).
#if defined(__GNUC__) && !defined(__clang__) && defined(__x86_64__)
#define EDRL_SIMD_CLONES __attribute__((target_clones("avx2", "default")))
#else
#define EDRL_SIMD_CLONES
#endif

/// C[m,n] += A[m,k] B[k,n]
EDRL_SIMD_CLONES static void gemm_acc(const double* A, const double* B, double* C, std::size_t m, std::size_t k,
                                      std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* Ci = C + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double x = A[i * k + p];
      const double* Bp = B + p * n;
      for (std::size_t j = 0; j < n; ++j) Ci[j] += x * Bp[j];
    }
  }
}

/// C[k,n] += A[m,k]^T G[m,n]
EDRL_SIMD_CLONES static void gemm_tn_acc(const double* A, const double* G, double* C, std::size_t m, std::size_t k,
                                         std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* Gi = G + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double x = A[i * k + p];
      double* Cp = C + p * n;
      for (std::size_t j = 0; j < n; ++j) Cp[j] += x * Gi[j];
    }
  }
}

#undef EDRL_SIMD_CLONES

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const auto mismatch = [&] {
    return ShapeError("matmul shape mismatch: " + shape_str(sa) + " @ " + shape_str(sb));
  };
  if (sa.size() < 2 || sb.size() < 2) throw mismatch();
  std::size_t batch = 1, m = 0, k = 0, n = 0;
  bool shared_rhs = false;
  Shape out_shape;
  if (sb.size() == 2) {
    k = sb[0];
    n = sb[1];
    if (sa.back() != k) throw mismatch();
    m = a.numel() / k;
    shared_rhs = true;
    out_shape = sa;
    out_shape.back() = n;
  } else if (sa.size() == 3 && sb.size() == 3) {
    if (sa[0] != sb[0] || sa[2] != sb[1]) throw mismatch();
    batch = sa[0];
    m = sa[1];
    k = sa[2];
    n = sb[2];
    out_shape = {batch, m, n};
  } else {
    throw mismatch();
  }
  const std::size_t a_stride = m * k;
  const std::size_t b_stride = shared_rhs ? 0 : k * n;
  const std::size_t c_stride = m * n;
  const double* av = a.values().data();
  const double* bv = b.values().data();
  std::vector<double> out(batch * m * n, 0.0);
  for (std::size_t s = 0; s < batch; ++s) {
    detail::gemm_acc(av + s * a_stride, bv + s * b_stride, out.data() + s * c_stride, m, k, n);
  }
  return Tensor::make_result(
      std::move(out_shape), std::move(out), {&a, &b},
      [=](const detail::Node& self) {
        detail::Node& pa = *self.parents[0];
        detail::Node& pb = *self.parents[1];
        const double* G = self.grad.data();
        if (pa.requires_grad) {
          // dA = dC B^T, accumulated row-wise against a transposed copy of B
          double* GA = pa.grad_ptr();
          std::vector<double> bt(k * n);
          for (std::size_t s = 0; s < batch; ++s) {
            if (s == 0 || b_stride != 0) {
              const double* B = pb.data.data() + s * b_stride;
              for (std::size_t p = 0; p < k; ++p)
                for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = B[p * n + j];
            }
            detail::gemm_acc(G + s * c_stride, bt.data(), GA + s * a_stride, m, n, k);
          }
        }
        if (pb.requires_grad) {
          double* GB = pb.grad_ptr();
          for (std::size_t s = 0; s < batch; ++s) {
            detail::gemm_tn_acc(pa.data.data() + s * a_stride, G + s * c_stride, GB + s * b_stride, m, k, n);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Layout

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  return Tensor::make_result(std::move(shape), std::move(out), {&x}, [](const detail::Node& self) {
    detail::Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    double* gp = p.grad_ptr();
    for (std::size_t i = 0; i < self.grad.size(); ++i) gp[i] += self.grad[i];
  });
}

inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const Shape& in = x.shape();
  const std::size_t r = in.size();
  if (axes.size() != r) throw ShapeError("permute needs " + std::to_string(r) + " axes");
  std::vector<bool> seen(r, false);
  for (auto a : axes) {
    if (a >= r || seen[a]) throw ShapeError("permute axes are not a permutation");
    seen[a] = true;
  }
  Shape out_shape(r);
  std::vector<std::size_t> in_stride(r), src_stride(r);
  std::size_t s = 1;
  for (std::size_t d = r; d-- > 0;) {
    in_stride[d] = s;
    s *= in[d];
  }
  for (std::size_t d = 0; d < r; ++d) {
    out_shape[d] = in[axes[d]];
    src_stride[d] = in_stride[axes[d]];
  }
  const std::size_t n = x.numel();
  auto map = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> counter(r, 0);
  std::size_t src = 0;
  for (std::size_t i = 0; i < n; ++i) {
    (*map)[i] = src;
    for (std::size_t d = r; d-- > 0;) {
      if (++counter[d] < out_shape[d]) {
        src += src_stride[d];
        break;
      }
      src -= src_stride[d] * (out_shape[d] - 1);
      counter[d] = 0;
    }
  }
  const auto xv = x.values();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = xv[(*map)[i]];
  return Tensor::make_result(std::move(out_shape), std::move(out), {&x}, [map](const detail::Node& self) {
    detail::Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    double* gp = p.grad_ptr();
    for (std::size_t i = 0; i < self.grad.size(); ++i) gp[(*map)[i]] += self.grad[i];
  });
}

/// Swaps the last two axes.
inline Tensor transpose(const Tensor& x) {
  if (x.rank() < 2) throw ShapeError("transpose needs rank >= 2, got " + shape_str(x.shape()));
  std::vector<std::size_t> axes(x.rank());
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  std::swap(axes[x.rank() - 1], axes[x.rank() - 2]);
  return permute(x, axes);
}

/// Elements [start, start + length) along `axis`.
inline Tensor slice(const Tensor& x, std::ptrdiff_t axis, std::size_t start, std::size_t length) {
  const std::size_t ax = x.normalize_axis(axis);
  if (start + length > x.shape()[ax] || length == 0) {
    throw ShapeError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of range for axis " + std::to_string(ax) + " of " +
                     shape_str(x.shape()));
  }
  const auto l = detail::axis_layout(x.shape(), ax);
  Shape out_shape = x.shape();
  out_shape[ax] = length;
  const auto xv = x.values();
  std::vector<double> out(l.outer * length * l.inner);
  for (std::size_t o = 0; o < l.outer; ++o)
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((o * l.extent + start) * l.inner),
                length * l.inner, out.begin() + static_cast<std::ptrdiff_t>(o * length * l.inner));
  return Tensor::make_result(
      std::move(out_shape), std::move(out), {&x}, [l, start, length](const detail::Node& self) {
        detail::Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        double* gp = p.grad_ptr();
        for (std::size_t o = 0; o < l.outer; ++o)
          for (std::size_t j = 0; j < length * l.inner; ++j)
            gp[(o * l.extent + start) * l.inner + j] += self.grad[o * length * l.inner + j];
      });
}

inline Tensor concat(const std::vector<Tensor>& parts, std::ptrdiff_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const std::size_t ax = parts[0].normalize_axis(axis);
  Shape out_shape = parts[0].shape();
  out_shape[ax] = 0;
  std::vector<std::size_t> extents;
  for (const auto& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != out_shape.size()) {
      throw ShapeError("concat rank mismatch: " + shape_str(parts[0].shape()) + " vs " +
                       shape_str(probe));
    }
    probe[ax] = 0;
    if (probe != out_shape) {
      throw ShapeError("concat shape mismatch: " + shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    }
    extents.push_back(p.shape()[ax]);
  }
  for (auto e : extents) out_shape[ax] += e;
  const auto l = detail::axis_layout(out_shape, ax);
  std::vector<double> out(shape_numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t q = 0; q < parts.size(); ++q) {
    const auto pv = parts[q].values();
    const std::size_t w = extents[q] * l.inner;
    for (std::size_t o = 0; o < l.outer; ++o)
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * w), w,
                  out.begin() + static_cast<std::ptrdiff_t>(o * l.extent * l.inner + offset));
    offset += w;
  }
  return Tensor::make_result(
      std::move(out_shape), std::move(out), parts, [l, extents](const detail::Node& self) {
        std::size_t offset = 0;
        for (std::size_t q = 0; q < extents.size(); ++q) {
          detail::Node& p = *self.parents[q];
          const std::size_t w = extents[q] * l.inner;
          if (p.requires_grad) {
            double* gp = p.grad_ptr();
            for (std::size_t o = 0; o < l.outer; ++o)
              for (std::size_t j = 0; j < w; ++j)
                gp[o * w + j] += self.grad[o * l.extent * l.inner + offset + j];
          }
          offset += w;
        }
      });
}

/// Rows of `x` (first axis) at `indices`, in order; repeats allowed.
inline Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& indices) {
  if (x.rank() < 1) throw ShapeError("gather_rows on a scalar");
  const std::size_t rows = x.shape()[0];
  const std::size_t width = rows ? x.numel() / rows : 0;
  for (auto i : indices) {
    if (i >= rows) {
      throw ShapeError("row index " + std::to_string(i) + " out of range for " +
                       shape_str(x.shape()));
    }
  }
  Shape out_shape = x.shape();
  out_shape[0] = indices.size();
  const auto xv = x.values();
  std::vector<double> out(indices.size() * width);
  for (std::size_t r = 0; r < indices.size(); ++r)
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(indices[r] * width), width,
                out.begin() + static_cast<std::ptrdiff_t>(r * width));
  return Tensor::make_result(
      std::move(out_shape), std::move(out), {&x}, [indices, width](const detail::Node& self) {
        detail::Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        double* gp = p.grad_ptr();
        for (std::size_t r = 0; r < indices.size(); ++r)
          for (std::size_t j = 0; j < width; ++j)
            gp[indices[r] * width + j] += self.grad[r * width + j];
      });
}

inline Tensor broadcast_to(const Tensor& x, const Shape& shape) {
  return add(Tensor::zeros(shape), x);
}

// ---------------------------------------------------------------------------
// Similarities

/// a·b / (max(‖a‖, eps)·max(‖b‖, eps)) for two vectors of equal width.
inline Tensor cosine_similarity(const Tensor& a, const Tensor& b, double eps = 1e-8) {
  if (a.shape() != b.shape() || a.rank() != 1 || a.numel() == 0) {
    throw ShapeError("cosine_similarity needs two equal vectors, got " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  }
  return sum(a * b) / (l2_norm(a, 0, eps) * l2_norm(b, 0, eps));
}

/// Row-wise cosine of two [N, D] matrices -> [N].
inline Tensor cosine_rows(const Tensor& a, const Tensor& b, double eps = 1e-8) {
  if (a.shape() != b.shape() || a.rank() != 2) {
    throw ShapeError("cosine_rows shape mismatch: " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  return sum(a * b, 1) / (l2_norm(a, 1, eps) * l2_norm(b, 1, eps));
}

/// Scales each row of an [N, D] matrix to unit norm (eps-clamped).
inline Tensor normalize_rows(const Tensor& x, double eps = 1e-8) {
  return x / l2_norm(x, -1, eps, true);
}

}  // namespace edrl
