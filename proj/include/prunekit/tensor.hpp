#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "prunekit/errors.hpp"
#include "prunekit/rng.hpp"

namespace prunekit {

namespace detail {

inline thread_local int no_grad_depth = 0;

inline std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

inline size_t shape_numel(const std::vector<int>& shape) {
  size_t n = 1;
  for (int d : shape) n *= static_cast<size_t>(d);
  return n;
}

}  // namespace detail

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

// Suppresses graph construction in scope; forwards run lean (evaluation, benchmarking).
struct NoGradGuard {
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename T>
struct TensorNode;

template <typename T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

// Per-backward scratch: this-call gradient contributions, keyed by node.
template <typename T>
using GradMap = std::unordered_map<const TensorNode<T>*, std::vector<T>>;

template <typename T>
struct TensorNode {
  std::vector<int> shape;
  std::vector<T> value;
  std::vector<T> grad;  // accumulated across backward calls; empty until first use
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<NodePtr<T>> parents;
  std::function<void(const TensorNode<T>& self, const std::vector<T>& out_grad, GradMap<T>& grads)>
      backward_fn;
};

// Dense fp tensor handle with reverse-mode autodiff. Values are immutable once
// produced by an op; leaves may be mutated between graph builds (optimizers,
// finite differences). Gradients accumulate until zero_grad.
template <typename T = float>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    return make_leaf(std::move(shape), {}, requires_grad, T(0));
  }

  static Tensor full(std::vector<int> shape, T v, bool requires_grad = false) {
    if (!std::isfinite(static_cast<double>(v)))
      throw NumericError("Tensor::full: non-finite fill value");
    return make_leaf(std::move(shape), {}, requires_grad, v);
  }

  static Tensor scalar(T v) { return full({1}, v); }

  static Tensor from_data(std::vector<int> shape, std::vector<T> data, bool requires_grad = false) {
    if (detail::shape_numel(shape) != data.size())
      throw ShapeError("Tensor::from_data: shape " + detail::shape_str(shape) + " wants " +
                       std::to_string(detail::shape_numel(shape)) + " values, got " +
                       std::to_string(data.size()));
    for (T v : data)
      if (!std::isfinite(static_cast<double>(v)))
        throw NumericError("Tensor::from_data: non-finite input value");
    auto node = std::make_shared<TensorNode<T>>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor randn(std::vector<int> shape, Rng& rng, T stddev, bool requires_grad = false) {
    std::vector<T> data(detail::shape_numel(shape));
    for (auto& v : data) v = static_cast<T>(rng.normal(0.0, static_cast<double>(stddev)));
    return from_data(std::move(shape), std::move(data), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  size_t numel() const { return node_->value.size(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  std::span<const T> data() const { return node_->value; }

  // Leaf mutation only (optimizer steps, finite-difference probes).
  std::span<T> data_mut() {
    if (!node_->parents.empty())
      throw ContractError("Tensor::data_mut: only leaf tensors may be mutated");
    return node_->value;
  }

  bool has_grad() const { return node_ && !node_->grad.empty(); }

  std::span<const T> grad() const {
    if (!has_grad()) throw ContractError("Tensor::grad: no gradient accumulated");
    return node_->grad;
  }

  void zero_grad() {
    if (node_) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  T item() const {
    if (numel() != 1) throw ContractError("Tensor::item: tensor is not scalar");
    return node_->value[0];
  }

  Tensor detached() const {
    std::vector<T> copy(node_->value);
    auto node = std::make_shared<TensorNode<T>>();
    node->shape = node_->shape;
    node->value = std::move(copy);
    return Tensor(std::move(node));
  }

  // Deep copy of values as a fresh leaf; preserves requires_grad.
  Tensor clone() const {
    auto node = std::make_shared<TensorNode<T>>();
    node->shape = node_->shape;
    node->value = node_->value;
    node->requires_grad = node_->requires_grad;
    return Tensor(std::move(node));
  }

  NodePtr<T> node() const { return node_; }
  explicit Tensor(NodePtr<T> node) : node_(std::move(node)) {}

 private:
  static Tensor make_leaf(std::vector<int> shape, std::vector<T>, bool requires_grad, T fill) {
    auto node = std::make_shared<TensorNode<T>>();
    node->value.assign(detail::shape_numel(shape), fill);
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  NodePtr<T> node_;
};

namespace detail {

template <typename T>
void check_finite(const std::vector<T>& v, const char* op) {
  for (T x : v)
    if (!std::isfinite(static_cast<double>(x)))
      throw NumericError(std::string(op) + ": produced non-finite values");
}

template <typename T>
Tensor<T> make_op_node(const char* op, std::vector<int> shape, std::vector<T> value,
                       std::vector<Tensor<T>> inputs,
                       std::function<void(const TensorNode<T>&, const std::vector<T>&, GradMap<T>&)>
                           backward_fn) {
  check_finite(value, op);
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool needs_grad = false;
  if (grad_enabled())
    for (const auto& in : inputs) needs_grad = needs_grad || in.requires_grad();
  if (needs_grad) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (const auto& in : inputs) node->parents.push_back(in.node());
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>(std::move(node));
}

// Scratch accessor: zero-initialized this-call gradient buffer for a parent.
template <typename T>
std::vector<T>& grad_of(GradMap<T>& grads, const NodePtr<T>& node) {
  auto& g = grads[node.get()];
  if (g.empty()) g.assign(node->value.size(), T(0));
  return g;
}

// c[m,n] += a[m,k] * b[k,n]
template <typename T>
void matmul_acc(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<size_t>(i) * k;
    T* crow = c + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      T aik = arow[p];
      const T* brow = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
}

// da[m,k] += g[m,n] * b^T  (dot of g rows with b rows)
template <typename T>
void matmul_acc_bt(const T* g, const T* b, T* da, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* grow = g + static_cast<size_t>(i) * n;
    T* darow = da + static_cast<size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const T* brow = b + static_cast<size_t>(p) * n;
      T s = 0;
      for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
      darow[p] += s;
    }
  }
}

// db[k,n] += a^T * g
template <typename T>
void matmul_acc_at(const T* a, const T* g, T* db, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<size_t>(i) * k;
    const T* grow = g + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      T aip = arow[p];
      T* dbrow = db + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) dbrow[j] += aip * grow[j];
    }
  }
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
    throw ShapeError("matmul: incompatible shapes " + detail::shape_str(sa) + " x " +
                     detail::shape_str(sb));
  int m = sa[0], k = sa[1], n = sb[1];
  std::vector<T> out(static_cast<size_t>(m) * n, T(0));
  detail::matmul_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
  return detail::make_op_node<T>(
      "matmul", {m, n}, std::move(out), {a, b},
      [m, k, n](const TensorNode<T>& self, const std::vector<T>& g, GradMap<T>& grads) {
        const auto& pa = self.parents[0];
        const auto& pb = self.parents[1];
        if (pa->requires_grad)
          detail::matmul_acc_bt(g.data(), pb->value.data(), detail::grad_of(grads, pa).data(), m,
                                k, n);
        if (pb->requires_grad)
          detail::matmul_acc_at(pa->value.data(), g.data(), detail::grad_of(grads, pb).data(), m,
                                k, n);
      });
}

namespace detail {

// Binary broadcast contract: identical shapes, or b is a vector over a's last axis.
template <typename T>
bool broadcast_ok(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() == b.shape()) return false;  // same-shape, no broadcast
  if (b.shape().size() == 1 && !a.shape().empty() && b.shape()[0] == a.shape().back()) return true;
  throw ShapeError("elementwise: shapes not broadcastable " + shape_str(a.shape()) + " vs " +
                   shape_str(b.shape()));
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  bool bcast = detail::broadcast_ok(a, b);
  size_t n = a.numel();
  size_t c = bcast ? b.numel() : n;
  std::vector<T> out(n);
  {
    auto av = a.data();
    auto bv = b.data();
    for (size_t i = 0; i < n; ++i) out[i] = av[i] + bv[bcast ? i % c : i];
  }
  return detail::make_op_node<T>(
      "add", a.shape(), std::move(out), {a, b},
      [bcast, c](const TensorNode<T>& self, const std::vector<T>& g, GradMap<T>& grads) {
        const auto& pa = self.parents[0];
        const auto& pb = self.parents[1];
        if (pa->requires_grad) {
          auto& da = detail::grad_of(grads, pa);
          for (size_t i = 0; i < g.size(); ++i) da[i] += g[i];
        }
        if (pb->requires_grad) {
          auto& db = detail::grad_of(grads, pb);
          if (bcast)
            for (size_t i = 0; i < g.size(); ++i) db[i % c] += g[i];
          else
            for (size_t i = 0; i < g.size(); ++i) db[i] += g[i];
        }
      });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  bool bcast = detail::broadcast_ok(a, b);
  size_t n = a.numel();
  size_t c = bcast ? b.numel() : n;
  std::vector<T> out(n);
  {
    auto av = a.data();
    auto bv = b.data();
    for (size_t i = 0; i < n; ++i) out[i] = av[i] * bv[bcast ? i % c : i];
  }
  return detail::make_op_node<T>(
      "mul", a.shape(), std::move(out), {a, b},
      [bcast, c](const TensorNode<T>& self, const std::vector<T>& g, GradMap<T>& grads) {
        const auto& pa = self.parents[0];
        const auto& pb = self.parents[1];
        if (pa->requires_grad) {
          auto& da = detail::grad_of(grads, pa);
          for (size_t i = 0; i < g.size(); ++i) da[i] += g[i] * pb->value[bcast ? i % c : i];
        }
        if (pb->requires_grad) {
          auto& db = detail::grad_of(grads, pb);
          for (size_t i = 0; i < g.size(); ++i)
            db[bcast ? i % c : i] += g[i] * pa->value[i];
        }
      });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  size_t n = x.numel();
  std::vector<T> out(n);
  auto xv = x.data();
  for (size_t i = 0; i < n; ++i) out[i] = xv[i] * c;
  return detail::make_op_node<T>(
      "scale", x.shape(), std::move(out), {x},
      [c](const TensorNode<T>& self, const std::vector<T>& g, GradMap<T>& grads) {
        const auto& p = self.parents[0];
        if (!p->requires_grad) return;
        auto& d = detail::grad_of(grads, p);
        for (size_t i = 0; i < g.size(); ++i) d[i] += g[i] * c;
      });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
  size_t n = x.numel();
  std::vector<T> out(n);
  auto xv = x.data();
  for (size_t i = 0; i < n; ++i) out[i] = xv[i] + c;
  return detail::make_op_node<T>(
      "add_scalar", x.shape(), std::move(out), {x},
      [](const TensorNode<T>& self, const std::vector<T>& g, GradMap<T>& grads) {
        const auto& p = self.parents[0];
        if (!p->requires_grad) return;
        auto& d = detail::grad_of(grads, p);
        for (size_t i = 0; i < g.size(); ++i) d[i] += g[i];
      });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  size_t n = x.numel();
  std::vector<T> out(n);
  auto xv = x.data();
  for (size_t i = 0; i < n; ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
  return detail::make_op_node<T>(
      "relu", x.shape(), std::move(out), {x},
      [](const TensorNode<T>& self, const std::vector<T>& g, GradMap<T>& grads) {
        const auto& p = self.parents[0];
        if (!p->requires_grad) return;
        auto& d = detail::grad_of(grads, p);
        for (size_t i = 0; i < g.size(); ++i)
          if (p->value[i] > T(0)) d[i] += g[i];
      });
}

// tanh-approximate gelu; the 0.7978845608 constant is sqrt(2/pi).
inline constexpr double kGeluRoot2OverPi = 0.7978845608;
inline constexpr double kGeluCubicCoef = 0.044715;

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  size_t n = x.numel();
  std::vector<T> out(n);
  auto xv = x.data();
  const T r2pi = static_cast<T>(kGeluRoot2OverPi);
  const T cc = static_cast<T>(kGeluCubicCoef);
  for (size_t i = 0; i < n; ++i) {
    T u = r2pi * (xv[i] + cc * xv[i] * xv[i] * xv[i]);
    out[i] = T(0.5) * xv[i] * (T(1) + std::tanh(u));
  }
  return detail::make_op_node<T>(
      "gelu", x.shape(), std::move(out), {x},
      [r2pi, cc](const TensorNode<T>& self, const std::vector<T>& g, GradMap<T>& grads) {
        const auto& p = self.parents[0];
        if (!p->requires_grad) return;
        auto& d = detail::grad_of(grads, p);
        for (size_t i = 0; i < g.size(); ++i) {
          T xi = p->value[i];
          T u = r2pi * (xi + cc * xi * xi * xi);
          T th = std::tanh(u);
          T du = r2pi * (T(1) + T(3) * cc * xi * xi);
          d[i] += g[i] * (T(0.5) * (T(1) + th) + T(0.5) * xi * (T(1) - th * th) * du);
        }
      });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  size_t n = x.numel();
  std::vector<T> out(n);
  auto xv = x.data();
  for (size_t i = 0; i < n; ++i) {
    // stable in both tails
    T v = xv[i];
    out[i] = v >= T(0) ? T(1) / (T(1) + std::exp(-v))
                       : std::exp(v) / (T(1) + std::exp(v));
  }
  return detail::make_op_node<T>(
      "sigmoid", x.shape(), std::move(out), {x},
      [](const TensorNode<T>& self, const std::vector<T>& g, GradMap<T>& grads) {
        const auto& p = self.parents[0];
        if (!p->requires_grad) return;
        auto& d = detail::grad_of(grads, p);
        for (size_t i = 0; i < g.size(); ++i) {
          T s = self.value[i];
          d[i] += g[i] * s * (T(1) - s);
        }
      });
}

// clamp to [0, 1]; gradient passes only strictly inside the interval.
template <typename T>
Tensor<T> clamp01(const Tensor<T>& x) {
  size_t n = x.numel();
  std::vector<T> out(n);
  auto xv = x.data();
  for (size_t i = 0; i < n; ++i) out[i] = std::min(T(1), std::max(T(0), xv[i]));
  return detail::make_op_node<T>(
      "clamp01", x.shape(), std::move(out), {x},
      [](const TensorNode<T>& self, const std::vector<T>& g, GradMap<T>& grads) {
        const auto& p = self.parents[0];
        if (!p->requires_grad) return;
        auto& d = detail::grad_of(grads, p);
        for (size_t i = 0; i < g.size(); ++i)
          if (p->value[i] > T(0) && p->value[i] < T(1)) d[i] += g[i];
      });
}

namespace detail {

template <typename T>
void softmax_rows(const T* x, T* out, size_t rows, size_t cols) {
  for (size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * cols;
    T* yr = out + r * cols;
    T mx = xr[0];
    for (size_t j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
    T sum = 0;
    for (size_t j = 0; j < cols; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      sum += yr[j];
    }
    T inv = T(1) / sum;
    for (size_t j = 0; j < cols; ++j) yr[j] *= inv;
  }
}

}  // namespace detail

template <typename T>
Tensor<T> softmax_last_axis(const Tensor<T>& x) {
  if (x.shape().empty() || x.shape().back() < 1)
    throw ShapeError("softmax_last_axis: last axis must have length >= 1, shape " +
                     detail::shape_str(x.shape()));
  size_t cols = static_cast<size_t>(x.shape().back());
  size_t rows = x.numel() / cols;
  std::vector<T> out(x.numel());
  detail::softmax_rows(x.data().data(), out.data(), rows, cols);
  return detail::make_op_node<T>(
      "softmax", x.shape(), std::move(out), {x},
      [rows, cols](const TensorNode<T>& self, const std::vector<T>& g, GradMap<T>& grads) {
        const auto& p = self.parents[0];
        if (!p->requires_grad) return;
        auto& d = detail::grad_of(grads, p);
        for (size_t r = 0; r < rows; ++r) {
          const T* pr = self.value.data() + r * cols;
          const T* gr = g.data() + r * cols;
          T* dr = d.data() + r * cols;
          T dot = 0;
          for (size_t j = 0; j < cols; ++j) dot += gr[j] * pr[j];
          for (size_t j = 0; j < cols; ++j) dr[j] += pr[j] * (gr[j] - dot);
        }
      });
}

template <typename T>
Tensor<T> log_softmax_last_axis(const Tensor<T>& x) {
  if (x.shape().empty() || x.shape().back() < 1)
    throw ShapeError("log_softmax_last_axis: last axis must have length >= 1");
  size_t cols = static_cast<size_t>(x.shape().back());
  size_t rows = x.numel() / cols;
  std::vector<T> out(x.numel());
  auto xv = x.data();
  for (size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * cols;
    T* yr = out.data() + r * cols;
    T mx = xr[0];
    for (size_t j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
    T sum = 0;
    for (size_t j = 0; j < cols; ++j) sum += std::exp(xr[j] - mx);
    T lse = mx + std::log(sum);
    for (size_t j = 0; j < cols; ++j) yr[j] = xr[j] - lse;
  }
  return detail::make_op_node<T>(
      "log_softmax", x.shape(), std::move(out), {x},
      [rows, cols](const TensorNode<T>& self, const std::vector<T>& g, GradMap<T>& grads) {
        const auto& p = self.parents[0];
        if (!p->requires_grad) return;
        auto& d = detail::grad_of(grads, p);
        for (size_t r = 0; r < rows; ++r) {
          const T* yr = self.value.data() + r * cols;
          const T* gr = g.data() + r * cols;
          T* dr = d.data() + r * cols;
          T gsum = 0;
          for (size_t j = 0; j < cols; ++j) gsum += gr[j];
          for (size_t j = 0; j < cols; ++j) dr[j] += gr[j] - std::exp(yr[j]) * gsum;
        }
      });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5)) {
  if (x.shape().empty()) throw ShapeError("layer_norm: rank-0 input");
  int cols = x.shape().back();
  if (gain.shape() != std::vector<int>{cols} || bias.shape() != std::vector<int>{cols})
    throw ShapeError("layer_norm: gain/bias must match last axis of " +
                     detail::shape_str(x.shape()));
  size_t c = static_cast<size_t>(cols);
  size_t rows = x.numel() / c;
  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> inv_std(rows);
  auto xv = x.data();
  auto gv = gain.data();
  auto bv = bias.data();
  for (size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * c;
    T mean = 0;
    for (size_t j = 0; j < c; ++j) mean += xr[j];
    mean /= static_cast<T>(c);
    T var = 0;
    for (size_t j = 0; j < c; ++j) {
      T dvar = xr[j] - mean;
      var += dvar * dvar;
    }
    var /= static_cast<T>(c);
    T inv = T(1) / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (size_t j = 0; j < c; ++j) {
      T xh = (xr[j] - mean) * inv;
      xhat[r * c + j] = xh;
      out[r * c + j] = xh * gv[j] + bv[j];
    }
  }
  return detail::make_op_node<T>(
      "layer_norm", x.shape(), std::move(out), {x, gain, bias},
      [rows, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          const TensorNode<T>& self, const std::vector<T>& g, GradMap<T>& grads) {
        const auto& px = self.parents[0];
        const auto& pg = self.parents[1];
        const auto& pb = self.parents[2];
        if (pg->requires_grad) {
          auto& dg = detail::grad_of(grads, pg);
          for (size_t r = 0; r < rows; ++r)
            for (size_t j = 0; j < c; ++j) dg[j] += g[r * c + j] * xhat[r * c + j];
        }
        if (pb->requires_grad) {
          auto& db = detail::grad_of(grads, pb);
          for (size_t r = 0; r < rows; ++r)
            for (size_t j = 0; j < c; ++j) db[j] += g[r * c + j];
        }
        if (px->requires_grad) {
          auto& dx = detail::grad_of(grads, px);
          const auto& gainv = pg->value;
          for (size_t r = 0; r < rows; ++r) {
            T sum_dxhat = 0, sum_dxhat_xhat = 0;
            for (size_t j = 0; j < c; ++j) {
              T dxh = g[r * c + j] * gainv[j];
              sum_dxhat += dxh;
              sum_dxhat_xhat += dxh * xhat[r * c + j];
            }
            T invc = T(1) / static_cast<T>(c);
            for (size_t j = 0; j < c; ++j) {
              T dxh = g[r * c + j] * gainv[j];
              dx[r * c + j] += inv_std[r] * (dxh - sum_dxhat * invc -
                                             xhat[r * c + j] * sum_dxhat_xhat * invc);
            }
          }
        }
      });
}

enum class Reduction { kMean, kSum };

// Negative log softmax probability of each row's target, reduced to a scalar.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& targets,
                        Reduction reduction = Reduction::kMean) {
  if (logits.shape().size() != 2)
    throw ShapeError("cross_entropy: logits must be rank 2, got " +
                     detail::shape_str(logits.shape()));
  size_t rows = static_cast<size_t>(logits.shape()[0]);
  size_t cols = static_cast<size_t>(logits.shape()[1]);
  if (targets.size() != rows)
    throw ShapeError("cross_entropy: " + std::to_string(rows) + " rows but " +
                     std::to_string(targets.size()) + " targets");
  for (size_t r = 0; r < rows; ++r)
    if (targets[r] < 0 || static_cast<size_t>(targets[r]) >= cols)
      throw IndexError("cross_entropy: target " + std::to_string(targets[r]) + " out of range [0, " +
                       std::to_string(cols) + ") at row " + std::to_string(r));
  std::vector<T> probs(rows * cols);
  detail::softmax_rows(logits.data().data(), probs.data(), rows, cols);
  double total = 0;
  auto lv = logits.data();
  for (size_t r = 0; r < rows; ++r) {
    const T* xr = lv.data() + r * cols;
    T mx = xr[0];
    for (size_t j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
    T sum = 0;
    for (size_t j = 0; j < cols; ++j) sum += std::exp(xr[j] - mx);
    total += -static_cast<double>(xr[targets[r]] - mx - std::log(sum));
  }
  T denom = reduction == Reduction::kMean ? static_cast<T>(rows) : T(1);
  std::vector<T> out{static_cast<T>(total) / denom};
  return detail::make_op_node<T>(
      "cross_entropy", {1}, std::move(out), {logits},
      [rows, cols, targets, denom, probs = std::move(probs)](
          const TensorNode<T>& self, const std::vector<T>& g, GradMap<T>& grads) {
        const auto& p = self.parents[0];
        if (!p->requires_grad) return;
        auto& d = detail::grad_of(grads, p);
        T s = g[0] / denom;
        for (size_t r = 0; r < rows; ++r) {
          for (size_t j = 0; j < cols; ++j) d[r * cols + j] += s * probs[r * cols + j];
          d[r * cols + static_cast<size_t>(targets[r])] -= s;
        }
      });
}

// Scaled dot-product multi-head self-attention over packed 2D activations.
// q, k, v are [batch*seq, heads*head_dim]; output has the same layout.
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, int batch, int seq,
                    int heads) {
  const auto& sq = q.shape();
  if (sq.size() != 2 || sq != k.shape() || sq != v.shape())
    throw ShapeError("attention: q/k/v must share a rank-2 shape, got " + detail::shape_str(sq) +
                     ", " + detail::shape_str(k.shape()) + ", " + detail::shape_str(v.shape()));
  if (sq[0] != batch * seq || sq[1] % heads != 0)
    throw ShapeError("attention: shape " + detail::shape_str(sq) + " inconsistent with batch " +
                     std::to_string(batch) + ", seq " + std::to_string(seq) + ", heads " +
                     std::to_string(heads));
  int head_dim = sq[1] / heads;
  size_t width = static_cast<size_t>(sq[1]);
  T scl = T(1) / std::sqrt(static_cast<T>(head_dim));
  std::vector<T> out(q.numel(), T(0));
  std::vector<T> probs(static_cast<size_t>(batch) * heads * seq * seq);
  auto qv = q.data();
  auto kv = k.data();
  auto vv = v.data();
  std::vector<T> scores(static_cast<size_t>(seq) * seq);
  for (int b = 0; b < batch; ++b) {
    size_t row0 = static_cast<size_t>(b) * seq;
    for (int h = 0; h < heads; ++h) {
      size_t col0 = static_cast<size_t>(h) * head_dim;
      for (int s1 = 0; s1 < seq; ++s1) {
        const T* qr = qv.data() + (row0 + s1) * width + col0;
        for (int s2 = 0; s2 < seq; ++s2) {
          const T* kr = kv.data() + (row0 + s2) * width + col0;
          T dot = 0;
          for (int dd = 0; dd < head_dim; ++dd) dot += qr[dd] * kr[dd];
          scores[static_cast<size_t>(s1) * seq + s2] = dot * scl;
        }
      }
      T* pblock = probs.data() + ((static_cast<size_t>(b) * heads + h) * seq) * seq;
      detail::softmax_rows(scores.data(), pblock, seq, seq);
      for (int s1 = 0; s1 < seq; ++s1) {
        T* orow = out.data() + (row0 + s1) * width + col0;
        const T* prow = pblock + static_cast<size_t>(s1) * seq;
        for (int s2 = 0; s2 < seq; ++s2) {
          const T* vrow = vv.data() + (row0 + s2) * width + col0;
          T pw = prow[s2];
          for (int dd = 0; dd < head_dim; ++dd) orow[dd] += pw * vrow[dd];
        }
      }
    }
  }
  return detail::make_op_node<T>(
      "attention", sq, std::move(out), {q, k, v},
      [batch, seq, heads, head_dim, width, scl, probs = std::move(probs)](
          const TensorNode<T>& self, const std::vector<T>& g, GradMap<T>& grads) {
        const auto& pq = self.parents[0];
        const auto& pk = self.parents[1];
        const auto& pv = self.parents[2];
        bool nq = pq->requires_grad, nk = pk->requires_grad, nv = pv->requires_grad;
        if (!nq && !nk && !nv) return;
        T* dq = nq ? detail::grad_of(grads, pq).data() : nullptr;
        T* dk = nk ? detail::grad_of(grads, pk).data() : nullptr;
        T* dv = nv ? detail::grad_of(grads, pv).data() : nullptr;
        std::vector<T> dp(static_cast<size_t>(seq) * seq);
        std::vector<T> ds(static_cast<size_t>(seq) * seq);
        for (int b = 0; b < batch; ++b) {
          size_t row0 = static_cast<size_t>(b) * seq;
          for (int h = 0; h < heads; ++h) {
            size_t col0 = static_cast<size_t>(h) * head_dim;
            const T* pblock = probs.data() + ((static_cast<size_t>(b) * heads + h) * seq) * seq;
            // dV += P^T g; dP = g V^T
            for (int s1 = 0; s1 < seq; ++s1) {
              const T* grow = g.data() + (row0 + s1) * width + col0;
              const T* prow = pblock + static_cast<size_t>(s1) * seq;
              for (int s2 = 0; s2 < seq; ++s2) {
                const T* vrow = pv->value.data() + (row0 + s2) * width + col0;
                T dot = 0;
                for (int dd = 0; dd < head_dim; ++dd) dot += grow[dd] * vrow[dd];
                dp[static_cast<size_t>(s1) * seq + s2] = dot;
                if (nv) {
                  T* dvrow = dv + (row0 + s2) * width + col0;
                  T pw = prow[s2];
                  for (int dd = 0; dd < head_dim; ++dd) dvrow[dd] += pw * grow[dd];
                }
              }
            }
            if (!nq && !nk) continue;
            // dS = P o (dP - rowsum(dP o P)), then dQ = dS K scl, dK = dS^T Q scl
            for (int s1 = 0; s1 < seq; ++s1) {
              const T* prow = pblock + static_cast<size_t>(s1) * seq;
              const T* dprow = dp.data() + static_cast<size_t>(s1) * seq;
              T dot = 0;
              for (int s2 = 0; s2 < seq; ++s2) dot += dprow[s2] * prow[s2];
              T* dsrow = ds.data() + static_cast<size_t>(s1) * seq;
              for (int s2 = 0; s2 < seq; ++s2) dsrow[s2] = prow[s2] * (dprow[s2] - dot);
            }
            for (int s1 = 0; s1 < seq; ++s1) {
              const T* dsrow = ds.data() + static_cast<size_t>(s1) * seq;
              const T* qrow = pq->value.data() + (row0 + s1) * width + col0;
              T* dqrow = nq ? dq + (row0 + s1) * width + col0 : nullptr;
              for (int s2 = 0; s2 < seq; ++s2) {
                T w = dsrow[s2] * scl;
                const T* krow = pk->value.data() + (row0 + s2) * width + col0;
                if (nq)
                  for (int dd = 0; dd < head_dim; ++dd) dqrow[dd] += w * krow[dd];
                if (nk) {
                  T* dkrow = dk + (row0 + s2) * width + col0;
                  for (int dd = 0; dd < head_dim; ++dd) dkrow[dd] += w * qrow[dd];
                }
              }
            }
          }
        }
      });
}

// Embedding row gather; gradient scatters back into the table.
template <typename T>
Tensor<T> embed(const Tensor<T>& table, const std::vector<int>& ids) {
  if (table.shape().size() != 2)
    throw ShapeError("embed: table must be rank 2, got " + detail::shape_str(table.shape()));
  int vocab = table.shape()[0];
  int dim = table.shape()[1];
  for (int id : ids)
    if (id < 0 || id >= vocab)
      throw IndexError("embed: id " + std::to_string(id) + " out of range [0, " +
                       std::to_string(vocab) + ")");
  std::vector<T> out(ids.size() * static_cast<size_t>(dim));
  auto tv = table.data();
  for (size_t r = 0; r < ids.size(); ++r)
    std::copy_n(tv.data() + static_cast<size_t>(ids[r]) * dim, dim,
                out.data() + r * static_cast<size_t>(dim));
  return detail::make_op_node<T>(
      "embed", {static_cast<int>(ids.size()), dim}, std::move(out), {table},
      [ids, dim](const TensorNode<T>& self, const std::vector<T>& g, GradMap<T>& grads) {
        const auto& p = self.parents[0];
        if (!p->requires_grad) return;
        auto& d = detail::grad_of(grads, p);
        for (size_t r = 0; r < ids.size(); ++r) {
          T* drow = d.data() + static_cast<size_t>(ids[r]) * dim;
          const T* grow = g.data() + r * static_cast<size_t>(dim);
          for (int j = 0; j < dim; ++j) drow[j] += grow[j];
        }
      });
}

// Tiles a [groups, units] gate to [groups*rows_per_group, units*repeat]:
// out[g*rpg + r, u*repeat + d] = gate[g, u]. Gradient sums over the tile.
// Used to apply one gate value to a whole attention-head slice.
template <typename T>
Tensor<T> expand_gate(const Tensor<T>& gate, int rows_per_group, int repeat) {
  std::vector<int> gs = gate.shape();
  if (gs.size() == 1) gs = {1, gs[0]};
  if (gs.size() != 2)
    throw ShapeError("expand_gate: gate must be rank 1 or 2, got " +
                     detail::shape_str(gate.shape()));
  int groups = gs[0], units = gs[1];
  int out_cols = units * repeat;
  std::vector<T> out(static_cast<size_t>(groups) * rows_per_group * out_cols);
  auto gv = gate.data();
  for (int g = 0; g < groups; ++g)
    for (int r = 0; r < rows_per_group; ++r) {
      T* orow = out.data() + (static_cast<size_t>(g) * rows_per_group + r) * out_cols;
      for (int u = 0; u < units; ++u) {
        T val = gv[static_cast<size_t>(g) * units + u];
        for (int d = 0; d < repeat; ++d) orow[u * repeat + d] = val;
      }
    }
  return detail::make_op_node<T>(
      "expand_gate", {groups * rows_per_group, out_cols}, std::move(out), {gate},
      [groups, units, rows_per_group, repeat, out_cols](
          const TensorNode<T>& self, const std::vector<T>& g, GradMap<T>& grads) {
        const auto& p = self.parents[0];
        if (!p->requires_grad) return;
        auto& d = detail::grad_of(grads, p);
        for (int gi = 0; gi < groups; ++gi)
          for (int r = 0; r < rows_per_group; ++r) {
            const T* grow = g.data() + (static_cast<size_t>(gi) * rows_per_group + r) * out_cols;
            for (int u = 0; u < units; ++u) {
              T s = 0;
              for (int dd = 0; dd < repeat; ++dd) s += grow[u * repeat + dd];
              d[static_cast<size_t>(gi) * units + u] += s;
            }
          }
      });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, std::vector<int> shape) {
  if (detail::shape_numel(shape) != x.numel())
    throw ShapeError("reshape: cannot reshape " + detail::shape_str(x.shape()) + " to " +
                     detail::shape_str(shape));
  std::vector<T> out(x.data().begin(), x.data().end());
  return detail::make_op_node<T>(
      "reshape", std::move(shape), std::move(out), {x},
      [](const TensorNode<T>& self, const std::vector<T>& g, GradMap<T>& grads) {
        const auto& p = self.parents[0];
        if (!p->requires_grad) return;
        auto& d = detail::grad_of(grads, p);
        for (size_t i = 0; i < g.size(); ++i) d[i] += g[i];
      });
}

template <typename T>
Tensor<T> take_column(const Tensor<T>& x, int col) {
  if (x.shape().size() != 2 || col < 0 || col >= x.shape()[1])
    throw ShapeError("take_column: column " + std::to_string(col) + " invalid for shape " +
                     detail::shape_str(x.shape()));
  int rows = x.shape()[0], cols = x.shape()[1];
  std::vector<T> out(static_cast<size_t>(rows));
  auto xv = x.data();
  for (int r = 0; r < rows; ++r) out[r] = xv[static_cast<size_t>(r) * cols + col];
  return detail::make_op_node<T>(
      "take_column", {rows}, std::move(out), {x},
      [cols, col](const TensorNode<T>& self, const std::vector<T>& g, GradMap<T>& grads) {
        const auto& p = self.parents[0];
        if (!p->requires_grad) return;
        auto& d = detail::grad_of(grads, p);
        for (size_t r = 0; r < g.size(); ++r) d[r * cols + col] += g[r];
      });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  double s = 0;
  for (T v : x.data()) s += static_cast<double>(v);
  std::vector<T> out{static_cast<T>(s)};
  return detail::make_op_node<T>(
      "sum", {1}, std::move(out), {x},
      [](const TensorNode<T>& self, const std::vector<T>& g, GradMap<T>& grads) {
        const auto& p = self.parents[0];
        if (!p->requires_grad) return;
        auto& d = detail::grad_of(grads, p);
        for (auto& v : d) v += g[0];
      });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

// Reverse-mode sweep from a scalar loss. Each reachable node is visited once;
// gradients accumulate into .grad of every requires_grad tensor, so calling
// backward twice without zeroing yields exactly twice the gradient.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw ContractError("backward: loss must be a defined scalar tensor");
  NodePtr<T> root = loss.node();

  std::vector<TensorNode<T>*> topo;
  std::unordered_set<const TensorNode<T>*> visited;
  std::vector<std::pair<TensorNode<T>*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      TensorNode<T>* parent = node->parents[idx].get();
      ++idx;
      if (visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }

  GradMap<T> scratch;
  scratch[root.get()] = {T(1)};
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    TensorNode<T>* node = *it;
    auto found = scratch.find(node);
    if (found == scratch.end()) continue;  // not on a grad path
    const std::vector<T>& g = found->second;
    if (node->requires_grad) {
      if (node->grad.empty()) node->grad.assign(node->value.size(), T(0));
      for (size_t i = 0; i < g.size(); ++i) node->grad[i] += g[i];
    }
    if (node->backward_fn) node->backward_fn(*node, g, scratch);
  }
}

// Central-difference gradient audit. Runs one analytic backward at the current
// point, then probes up to max_coords coordinates per parameter and returns the
// worst relative disagreement |analytic - numeric| / (|analytic| + |numeric| + 1e-8).
template <typename T>
double finite_difference_check(const std::function<Tensor<T>()>& f, std::vector<Tensor<T>> params,
                               T h = T(1e-3), int max_coords = 64, uint64_t seed = 0x5eedf00d) {
  for (auto& p : params) p.zero_grad();
  Tensor<T> loss = f();
  if (loss.numel() != 1) throw ContractError("finite_difference_check: f must return a scalar");
  backward(loss);

  std::vector<std::vector<T>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) {
    if (p.has_grad())
      analytic.emplace_back(p.grad().begin(), p.grad().end());
    else
      analytic.emplace_back(p.numel(), T(0));
  }

  Rng rng(seed);
  double worst = 0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    size_t n = p.numel();
    std::vector<size_t> coords(n);
    for (size_t i = 0; i < n; ++i) coords[i] = i;
    if (static_cast<int>(n) > max_coords) {
      rng.shuffle(coords.begin(), coords.end());
      coords.resize(max_coords);
    }
    auto data = p.data_mut();
    for (size_t ci : coords) {
      T orig = data[ci];
      data[ci] = orig + h;
      double fp = static_cast<double>(f().item());
      data[ci] = orig - h;
      double fm = static_cast<double>(f().item());
      data[ci] = orig;
      double numeric = (fp - fm) / (2.0 * static_cast<double>(h));
      double a = static_cast<double>(analytic[pi][ci]);
      double rel = std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-8);
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace prunekit
