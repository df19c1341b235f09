#pragma once

// Dense N-d tensors with reverse-mode automatic differentiation.
//
// Tensors are value types wrapping a shared node. Every op allocates a fresh
// contiguous result; when gradients are enabled and an input participates in
// differentiation, the op records a backward closure on the result node. The
// tape is implicit in the parent links and is discarded after backward().
// Scalars are tensors of shape {1}. Broadcasting follows trailing-dimension
// (NumPy) semantics.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "wecdg/common.hpp"

#if defined(__GNUC__) || defined(__clang__)
#define WECDG_RESTRICT __restrict__
#else
#define WECDG_RESTRICT
#endif

namespace wecdg {

using Shape = std::vector<int>;

template <typename Real>
using DataVec = std::vector<Real, default_init_allocator<Real>>;

inline size_t shape_numel(const Shape &s) {
  size_t n = 1;
  for (int d : s) n *= static_cast<size_t>(d);
  return n;
}

inline std::string shape_str(const Shape &s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

namespace detail {

// Thread-local switch; when off, ops do not record backward closures.
inline bool &grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

struct NoGradGuard {
  NoGradGuard() : previous(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous; }
  bool previous;
};

template <typename Real>
struct TensorNode {
  Shape shape;
  DataVec<Real> data;
  DataVec<Real> grad;  // allocated lazily; same length as data when present
  bool requires_grad = false;

  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void()> backward_fn;  // reads this->grad, accumulates into parents

  size_t numel() const { return data.size(); }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), Real(0));
  }
};

template <typename Real>
class Tensor {
 public:
  Tensor() : node_(std::make_shared<TensorNode<Real>>()) { node_->shape = {0}; }

  explicit Tensor(Shape shape, Real fill = Real(0))
      : node_(std::make_shared<TensorNode<Real>>()) {
    node_->shape = std::move(shape);
    node_->data.assign(shape_numel(node_->shape), fill);
  }

  Tensor(Shape shape, const std::vector<Real> &data)
      : node_(std::make_shared<TensorNode<Real>>()) {
    if (shape_numel(shape) != data.size())
      throw ShapeMismatch("tensor data length " + std::to_string(data.size()) +
                          " does not match shape " + shape_str(shape));
    node_->shape = std::move(shape);
    node_->data.assign(data.begin(), data.end());
  }

  Tensor(Shape shape, std::initializer_list<Real> values)
      : Tensor(std::move(shape), std::vector<Real>(values)) {}

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), Real(0)); }
  static Tensor full(Shape shape, Real v) { return Tensor(std::move(shape), v); }
  static Tensor scalar(Real v) { return Tensor(Shape{1}, std::vector<Real>{v}); }

  static Tensor uniform(Shape shape, Rng &rng, double lo, double hi) {
    Tensor t(std::move(shape));
    for (auto &v : t.node_->data) v = static_cast<Real>(rng.uniform(lo, hi));
    return t;
  }

  const Shape &shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  size_t size() const { return node_->data.size(); }

  Real *data() { return node_->data.data(); }
  const Real *data() const { return node_->data.data(); }
  Real &operator[](size_t i) { return node_->data[i]; }
  Real operator[](size_t i) const { return node_->data[i]; }
  Real item() const {
    if (size() != 1) throw NotScalar("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor &set_requires_grad(bool v) {
    node_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return node_->grad.size() == node_->data.size() && !node_->data.empty(); }
  const DataVec<Real> &grad() const { return node_->grad; }
  DataVec<Real> &grad() { return node_->grad; }
  void zero_grad() { node_->grad.assign(node_->data.size(), Real(0)); }

  std::shared_ptr<TensorNode<Real>> node() const { return node_; }

  // True when the value participates in the current tape (leaf marked
  // requires_grad or produced from one).
  bool traced() const { return node_->requires_grad; }

 private:
  std::shared_ptr<TensorNode<Real>> node_;
};

namespace detail {

// Result tensor with *uninitialized* data; every op either writes all
// elements or calls zero_fill first (accumulating kernels).
template <typename Real>
Tensor<Real> make_result(Shape shape, std::vector<std::shared_ptr<TensorNode<Real>>> parents) {
  Tensor<Real> out;
  out.node()->shape = std::move(shape);
  out.node()->data.resize(shape_numel(out.node()->shape));
  bool needs = false;
  if (grad_mode()) {
    for (const auto &p : parents)
      if (p->requires_grad) needs = true;
  }
  if (needs) {
    out.node()->requires_grad = true;
    out.node()->parents = std::move(parents);
  }
  return out;
}

template <typename Real>
void zero_fill(Tensor<Real> &t) {
  std::fill(t.data(), t.data() + t.size(), Real(0));
}

// Attach the backward closure unless the result is untraced.
template <typename Real>
void set_backward(Tensor<Real> &out, std::function<void()> fn) {
  if (out.node()->requires_grad) out.node()->backward_fn = std::move(fn);
}

// Row-major strides; size-1 dims get stride 0 so they broadcast in-place.
inline std::vector<size_t> broadcast_strides(const Shape &shape, const Shape &out) {
  std::vector<size_t> strides(out.size(), 0);
  size_t run = 1;
  int off = static_cast<int>(out.size()) - static_cast<int>(shape.size());
  for (int i = static_cast<int>(shape.size()) - 1; i >= 0; --i) {
    int d = shape[static_cast<size_t>(i)];
    strides[static_cast<size_t>(i + off)] = (d == 1) ? 0 : run;
    run *= static_cast<size_t>(d);
  }
  return strides;
}

}  // namespace detail

inline Shape broadcast_shape(const Shape &a, const Shape &b) {
  size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (size_t i = 0; i < rank; ++i) {
    int da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    int db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1)
      throw ShapeMismatch("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Sum `src` (of shape `from`) down to shape `to` (summing broadcast axes) and
// accumulate into `dst`. Used by backward passes of broadcasting ops.
template <typename Real>
void reduce_accumulate(const Real *src, const Shape &from, std::vector<Real> &dst, const Shape &to) {
  const size_t n = shape_numel(from);
  const auto strides = detail::broadcast_strides(to, from);
  std::vector<int> idx(from.size(), 0);
  size_t dpos = 0;
  for (size_t i = 0; i < n; ++i) {
    dst[dpos] += src[i];
    for (int d = static_cast<int>(from.size()) - 1; d >= 0; --d) {
      idx[static_cast<size_t>(d)]++;
      dpos += strides[static_cast<size_t>(d)];
      if (idx[static_cast<size_t>(d)] < from[static_cast<size_t>(d)]) break;
      dpos -= strides[static_cast<size_t>(d)] * static_cast<size_t>(from[static_cast<size_t>(d)]);
      idx[static_cast<size_t>(d)] = 0;
    }
  }
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

// Reverse-mode sweep from a scalar loss. Gradients accumulate additively into
// every traced node; leaves not reachable from the loss simply keep zero
// gradients (a disconnected graph is not an error). Parent links and closures
// are released afterwards, so a node can only be swept once per forward pass.
template <typename Real>
void backward(const Tensor<Real> &loss) {
  if (loss.size() != 1)
    throw NotScalar("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));

  using NodePtr = std::shared_ptr<TensorNode<Real>>;
  std::vector<NodePtr> order;
  std::unordered_set<TensorNode<Real> *> seen;
  std::vector<std::pair<NodePtr, size_t>> stack;
  stack.emplace_back(loss.node(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto &[node, next] = stack.back();
    if (next < node->parents.size()) {
      NodePtr child = node->parents[next++];
      if (child->requires_grad && seen.insert(child.get()).second)
        stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->ensure_grad();
  loss.node()->grad[0] = Real(1);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto &node = *it;
    if (node->backward_fn) {
      for (auto &p : node->parents)
        if (p->requires_grad) p->ensure_grad();
      node->backward_fn();
    }
    // free the tape behind us
    node->backward_fn = nullptr;
    node->parents.clear();
  }
}

// ---------------------------------------------------------------------------
// elementwise binary ops (trailing-dimension broadcasting)
// ---------------------------------------------------------------------------

namespace detail {

// Broadcast patterns that cover nearly all real traffic get dedicated
// loops; everything else falls back to a strided odometer walk.
enum class EwPattern { Same, AScalar, BScalar, AChannel, BChannel, ARow, BRow, General };

inline EwPattern classify_broadcast(const Shape &a, const Shape &b) {
  if (a == b) return EwPattern::Same;
  if (shape_numel(b) == 1) return EwPattern::BScalar;
  if (shape_numel(a) == 1) return EwPattern::AScalar;
  auto channel = [](const Shape &big, const Shape &small) {
    return small.size() == 1 && !big.empty() && big.back() == small[0];
  };
  auto row = [](const Shape &big, const Shape &small) {
    if (big.size() != small.size() || small.empty() || small.back() != 1) return false;
    for (size_t i = 0; i + 1 < big.size(); ++i)
      if (big[i] != small[i]) return false;
    return true;
  };
  if (channel(a, b)) return EwPattern::BChannel;
  if (channel(b, a)) return EwPattern::AChannel;
  if (row(a, b)) return EwPattern::BRow;
  if (row(b, a)) return EwPattern::ARow;
  return EwPattern::General;
}

template <typename Real, typename Fwd>
void ew_forward(const Tensor<Real> &a, const Tensor<Real> &b, Tensor<Real> &out, Fwd fwd,
                EwPattern pattern) {
  const size_t n = out.size();
  const Real *WECDG_RESTRICT pa = a.data();
  const Real *WECDG_RESTRICT pb = b.data();
  Real *WECDG_RESTRICT po = out.data();
  switch (pattern) {
    case EwPattern::Same:
      for (size_t i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i]);
      return;
    case EwPattern::BScalar: {
      const Real bv = pb[0];
      for (size_t i = 0; i < n; ++i) po[i] = fwd(pa[i], bv);
      return;
    }
    case EwPattern::AScalar: {
      const Real av = pa[0];
      for (size_t i = 0; i < n; ++i) po[i] = fwd(av, pb[i]);
      return;
    }
    case EwPattern::BChannel: {
      const size_t c = b.size();
      for (size_t r = 0; r < n / c; ++r)
        for (size_t j = 0; j < c; ++j) po[r * c + j] = fwd(pa[r * c + j], pb[j]);
      return;
    }
    case EwPattern::AChannel: {
      const size_t c = a.size();
      for (size_t r = 0; r < n / c; ++r)
        for (size_t j = 0; j < c; ++j) po[r * c + j] = fwd(pa[j], pb[r * c + j]);
      return;
    }
    case EwPattern::BRow: {
      const size_t c = static_cast<size_t>(a.shape().back());
      for (size_t r = 0; r < n / c; ++r) {
        const Real bv = pb[r];
        for (size_t j = 0; j < c; ++j) po[r * c + j] = fwd(pa[r * c + j], bv);
      }
      return;
    }
    case EwPattern::ARow: {
      const size_t c = static_cast<size_t>(b.shape().back());
      for (size_t r = 0; r < n / c; ++r) {
        const Real av = pa[r];
        for (size_t j = 0; j < c; ++j) po[r * c + j] = fwd(av, pb[r * c + j]);
      }
      return;
    }
    case EwPattern::General: break;
  }
  const Shape &os = out.shape();
  const auto sa = broadcast_strides(a.shape(), os);
  const auto sb = broadcast_strides(b.shape(), os);
  std::vector<int> idx(os.size(), 0);
  size_t ia = 0, ib = 0;
  for (size_t i = 0; i < n; ++i) {
    po[i] = fwd(pa[ia], pb[ib]);
    for (int d = static_cast<int>(os.size()) - 1; d >= 0; --d) {
      auto ud = static_cast<size_t>(d);
      idx[ud]++;
      ia += sa[ud];
      ib += sb[ud];
      if (idx[ud] < os[ud]) break;
      ia -= sa[ud] * static_cast<size_t>(os[ud]);
      ib -= sb[ud] * static_cast<size_t>(os[ud]);
      idx[ud] = 0;
    }
  }
}

// DA/DB give the local derivatives given (a_val, b_val, dY); gradients are
// reduced onto each input's shape.
template <typename Real, typename DA, typename DB>
void ew_backward(const Tensor<Real> &a, const Tensor<Real> &b, const Tensor<Real> &out, DA da_fn,
                 DB db_fn, EwPattern pattern) {
  const size_t n = out.size();
  const Real *WECDG_RESTRICT va = a.data();
  const Real *WECDG_RESTRICT vb = b.data();
  const Real *WECDG_RESTRICT dy = out.node()->grad.data();
  const bool na = a.node()->requires_grad;
  const bool nb = b.node()->requires_grad;
  Real *WECDG_RESTRICT ga = na ? a.node()->grad.data() : nullptr;
  Real *WECDG_RESTRICT gb = nb ? b.node()->grad.data() : nullptr;
  switch (pattern) {
    case EwPattern::Same:
      for (size_t i = 0; i < n; ++i) {
        if (na) ga[i] += da_fn(va[i], vb[i], dy[i]);
        if (nb) gb[i] += db_fn(va[i], vb[i], dy[i]);
      }
      return;
    case EwPattern::BScalar: {
      const Real bv = vb[0];
      Real acc = Real(0);
      for (size_t i = 0; i < n; ++i) {
        if (na) ga[i] += da_fn(va[i], bv, dy[i]);
        if (nb) acc += db_fn(va[i], bv, dy[i]);
      }
      if (nb) gb[0] += acc;
      return;
    }
    case EwPattern::AScalar: {
      const Real av = va[0];
      Real acc = Real(0);
      for (size_t i = 0; i < n; ++i) {
        if (na) acc += da_fn(av, vb[i], dy[i]);
        if (nb) gb[i] += db_fn(av, vb[i], dy[i]);
      }
      if (na) ga[0] += acc;
      return;
    }
    case EwPattern::BChannel: {
      const size_t c = b.size();
      for (size_t r = 0; r < n / c; ++r)
        for (size_t j = 0; j < c; ++j) {
          const size_t i = r * c + j;
          if (na) ga[i] += da_fn(va[i], vb[j], dy[i]);
          if (nb) gb[j] += db_fn(va[i], vb[j], dy[i]);
        }
      return;
    }
    case EwPattern::AChannel: {
      const size_t c = a.size();
      for (size_t r = 0; r < n / c; ++r)
        for (size_t j = 0; j < c; ++j) {
          const size_t i = r * c + j;
          if (na) ga[j] += da_fn(va[j], vb[i], dy[i]);
          if (nb) gb[i] += db_fn(va[j], vb[i], dy[i]);
        }
      return;
    }
    case EwPattern::BRow: {
      const size_t c = static_cast<size_t>(a.shape().back());
      for (size_t r = 0; r < n / c; ++r) {
        const Real bv = vb[r];
        Real acc = Real(0);
        for (size_t j = 0; j < c; ++j) {
          const size_t i = r * c + j;
          if (na) ga[i] += da_fn(va[i], bv, dy[i]);
          if (nb) acc += db_fn(va[i], bv, dy[i]);
        }
        if (nb) gb[r] += acc;
      }
      return;
    }
    case EwPattern::ARow: {
      const size_t c = static_cast<size_t>(b.shape().back());
      for (size_t r = 0; r < n / c; ++r) {
        const Real av = va[r];
        Real acc = Real(0);
        for (size_t j = 0; j < c; ++j) {
          const size_t i = r * c + j;
          if (na) acc += da_fn(av, vb[i], dy[i]);
          if (nb) gb[i] += db_fn(av, vb[i], dy[i]);
        }
        if (na) ga[r] += acc;
      }
      return;
    }
    case EwPattern::General: break;
  }
  const Shape &os = out.shape();
  const auto sa = broadcast_strides(a.shape(), os);
  const auto sb = broadcast_strides(b.shape(), os);
  std::vector<int> idx(os.size(), 0);
  size_t ia = 0, ib = 0;
  for (size_t i = 0; i < n; ++i) {
    if (na) ga[ia] += da_fn(va[ia], vb[ib], dy[i]);
    if (nb) gb[ib] += db_fn(va[ia], vb[ib], dy[i]);
    for (int d = static_cast<int>(os.size()) - 1; d >= 0; --d) {
      auto ud = static_cast<size_t>(d);
      idx[ud]++;
      ia += sa[ud];
      ib += sb[ud];
      if (idx[ud] < os[ud]) break;
      ia -= sa[ud] * static_cast<size_t>(os[ud]);
      ib -= sb[ud] * static_cast<size_t>(os[ud]);
      idx[ud] = 0;
    }
  }
}

template <typename Real, typename Fwd, typename DA, typename DB>
Tensor<Real> ew_op(const Tensor<Real> &a, const Tensor<Real> &b, Fwd fwd, DA da, DB db) {
  Shape os = broadcast_shape(a.shape(), b.shape());
  const EwPattern pattern = classify_broadcast(a.shape(), b.shape());
  auto out = make_result<Real>(std::move(os), {a.node(), b.node()});
  ew_forward(a, b, out, fwd, pattern);
  set_backward(out, [a, b, out, da, db, pattern]() { ew_backward(a, b, out, da, db, pattern); });
  return out;
}

}  // namespace detail

template <typename Real>
Tensor<Real> add(const Tensor<Real> &a, const Tensor<Real> &b) {
  return detail::ew_op(
      a, b, [](Real x, Real y) { return x + y; },
      [](Real, Real, Real dy) { return dy; }, [](Real, Real, Real dy) { return dy; });
}

template <typename Real>
Tensor<Real> sub(const Tensor<Real> &a, const Tensor<Real> &b) {
  return detail::ew_op(
      a, b, [](Real x, Real y) { return x - y; },
      [](Real, Real, Real dy) { return dy; }, [](Real, Real, Real dy) { return -dy; });
}

template <typename Real>
Tensor<Real> mul(const Tensor<Real> &a, const Tensor<Real> &b) {
  return detail::ew_op(
      a, b, [](Real x, Real y) { return x * y; },
      [](Real, Real y, Real dy) { return dy * y; }, [](Real x, Real, Real dy) { return dy * x; });
}

template <typename Real>
Tensor<Real> div(const Tensor<Real> &a, const Tensor<Real> &b) {
  return detail::ew_op(
      a, b, [](Real x, Real y) { return x / y; },
      [](Real, Real y, Real dy) { return dy / y; },
      [](Real x, Real y, Real dy) { return -dy * x / (y * y); });
}

template <typename Real>
Tensor<Real> operator+(const Tensor<Real> &a, const Tensor<Real> &b) { return add(a, b); }
template <typename Real>
Tensor<Real> operator-(const Tensor<Real> &a, const Tensor<Real> &b) { return sub(a, b); }
template <typename Real>
Tensor<Real> operator*(const Tensor<Real> &a, const Tensor<Real> &b) { return mul(a, b); }
template <typename Real>
Tensor<Real> operator/(const Tensor<Real> &a, const Tensor<Real> &b) { return div(a, b); }

// ---------------------------------------------------------------------------
// elementwise unary ops
// ---------------------------------------------------------------------------

namespace detail {

template <typename Real, typename Fwd, typename Bwd>
Tensor<Real> unary_op(const Tensor<Real> &x, Fwd fwd, Bwd bwd) {
  auto out = make_result<Real>(x.shape(), {x.node()});
  const size_t n = x.size();
  const Real *px = x.data();
  Real *po = out.data();
  for (size_t i = 0; i < n; ++i) po[i] = fwd(px[i]);
  set_backward(out, [x, out, bwd]() {
    const size_t m = x.size();
    const Real *vx = x.data();
    const Real *vy = out.data();
    const Real *dy = out.node()->grad.data();
    Real *gx = x.node()->grad.data();
    for (size_t i = 0; i < m; ++i) gx[i] += bwd(vx[i], vy[i], dy[i]);
  });
  return out;
}

}  // namespace detail

template <typename Real>
Tensor<Real> neg(const Tensor<Real> &x) {
  return detail::unary_op(
      x, [](Real v) { return -v; }, [](Real, Real, Real dy) { return -dy; });
}

template <typename Real>
Tensor<Real> operator-(const Tensor<Real> &x) { return neg(x); }

template <typename Real>
Tensor<Real> scale(const Tensor<Real> &x, Real c) {
  return detail::unary_op(
      x, [c](Real v) { return c * v; }, [c](Real, Real, Real dy) { return c * dy; });
}

template <typename Real>
Tensor<Real> add_const(const Tensor<Real> &x, Real c) {
  return detail::unary_op(
      x, [c](Real v) { return v + c; }, [](Real, Real, Real dy) { return dy; });
}

template <typename Real>
Tensor<Real> exp(const Tensor<Real> &x) {
  return detail::unary_op(
      x, [](Real v) { return std::exp(v); }, [](Real, Real y, Real dy) { return dy * y; });
}

template <typename Real>
Tensor<Real> log(const Tensor<Real> &x) {
  return detail::unary_op(
      x, [](Real v) { return std::log(v); }, [](Real v, Real, Real dy) { return dy / v; });
}

template <typename Real>
Tensor<Real> sqrt(const Tensor<Real> &x) {
  return detail::unary_op(
      x, [](Real v) { return std::sqrt(v); },
      [](Real, Real y, Real dy) { return dy / (Real(2) * y); });
}

template <typename Real>
Tensor<Real> square(const Tensor<Real> &x) {
  return detail::unary_op(
      x, [](Real v) { return v * v; }, [](Real v, Real, Real dy) { return Real(2) * v * dy; });
}

// |x|; subgradient 0 at the kink.
template <typename Real>
Tensor<Real> abs(const Tensor<Real> &x) {
  return detail::unary_op(
      x, [](Real v) { return std::abs(v); },
      [](Real v, Real, Real dy) { return v > 0 ? dy : (v < 0 ? -dy : Real(0)); });
}

template <typename Real>
Tensor<Real> sigmoid(const Tensor<Real> &x) {
  return detail::unary_op(
      x, [](Real v) { return Real(1) / (Real(1) + std::exp(-v)); },
      [](Real, Real y, Real dy) { return dy * y * (Real(1) - y); });
}

template <typename Real>
Tensor<Real> silu(const Tensor<Real> &x) {
  return detail::unary_op(
      x,
      [](Real v) { return v / (Real(1) + std::exp(-v)); },
      [](Real v, Real, Real dy) {
        const Real s = Real(1) / (Real(1) + std::exp(-v));
        return dy * (s + v * s * (Real(1) - s));
      });
}

// tanh-approximation GELU
template <typename Real>
Tensor<Real> gelu(const Tensor<Real> &x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  return detail::unary_op(
      x,
      [](Real v) {
        const double vv = static_cast<double>(v);
        return static_cast<Real>(0.5 * vv * (1.0 + std::tanh(kC * (vv + 0.044715 * vv * vv * vv))));
      },
      [](Real v, Real, Real dy) {
        const double vv = static_cast<double>(v);
        const double u = kC * (vv + 0.044715 * vv * vv * vv);
        const double t = std::tanh(u);
        const double du = kC * (1.0 + 3.0 * 0.044715 * vv * vv);
        const double g = 0.5 * (1.0 + t) + 0.5 * vv * (1.0 - t * t) * du;
        return static_cast<Real>(static_cast<double>(dy) * g);
      });
}

template <typename Real>
Tensor<Real> softplus(const Tensor<Real> &x) {
  return detail::unary_op(
      x,
      [](Real v) { return v > Real(30) ? v : static_cast<Real>(std::log1p(std::exp(v))); },
      [](Real v, Real, Real dy) { return dy / (Real(1) + std::exp(-v)); });
}

// clamp to [0,1]; gradient passes inside the closed interval.
template <typename Real>
Tensor<Real> clamp01(const Tensor<Real> &x) {
  return detail::unary_op(
      x, [](Real v) { return v < Real(0) ? Real(0) : (v > Real(1) ? Real(1) : v); },
      [](Real v, Real, Real dy) { return (v >= Real(0) && v <= Real(1)) ? dy : Real(0); });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> reshape(const Tensor<Real> &x, Shape shape) {
  if (shape_numel(shape) != x.size())
    throw ShapeMismatch("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  auto out = detail::make_result<Real>(std::move(shape), {x.node()});
  std::copy(x.data(), x.data() + x.size(), out.data());
  detail::set_backward(out, [x, out]() {
    const Real *dy = out.node()->grad.data();
    Real *gx = x.node()->grad.data();
    for (size_t i = 0; i < x.size(); ++i) gx[i] += dy[i];
  });
  return out;
}

template <typename Real>
Tensor<Real> transpose2d(const Tensor<Real> &x) {
  if (x.rank() != 2) throw ShapeMismatch("transpose2d needs rank 2, got " + shape_str(x.shape()));
  const int r = x.dim(0), c = x.dim(1);
  auto out = detail::make_result<Real>(Shape{c, r}, {x.node()});
  const Real *px = x.data();
  Real *po = out.data();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) po[static_cast<size_t>(j) * r + i] = px[static_cast<size_t>(i) * c + j];
  detail::set_backward(out, [x, out, r, c]() {
    const Real *dy = out.node()->grad.data();
    Real *gx = x.node()->grad.data();
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j)
        gx[static_cast<size_t>(i) * c + j] += dy[static_cast<size_t>(j) * r + i];
  });
  return out;
}

template <typename Real>
Tensor<Real> concat_lastdim(const std::vector<Tensor<Real>> &parts) {
  if (parts.empty()) throw ShapeMismatch("concat_lastdim of nothing");
  Shape lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
  int total = 0;
  std::vector<std::shared_ptr<TensorNode<Real>>> nodes;
  for (const auto &p : parts) {
    Shape pl(p.shape().begin(), p.shape().end() - 1);
    if (pl != lead)
      throw ShapeMismatch("concat_lastdim leading dims differ: " + shape_str(parts[0].shape()) +
                          " vs " + shape_str(p.shape()));
    total += p.shape().back();
    nodes.push_back(p.node());
  }
  Shape os = lead;
  os.push_back(total);
  auto out = detail::make_result<Real>(std::move(os), std::move(nodes));
  const size_t rows = shape_numel(lead);
  Real *po = out.data();
  size_t off = 0;
  for (const auto &p : parts) {
    const auto c = static_cast<size_t>(p.shape().back());
    const Real *pp = p.data();
    for (size_t rI = 0; rI < rows; ++rI)
      std::copy(pp + rI * c, pp + (rI + 1) * c, po + rI * static_cast<size_t>(total) + off);
    off += c;
  }
  detail::set_backward(out, [parts, out, rows, total]() {
    const Real *dy = out.node()->grad.data();
    size_t o = 0;
    for (const auto &p : parts) {
      const auto c = static_cast<size_t>(p.shape().back());
      if (p.node()->requires_grad) {
        Real *gp = p.node()->grad.data();
        for (size_t rI = 0; rI < rows; ++rI)
          for (size_t j = 0; j < c; ++j) gp[rI * c + j] += dy[rI * static_cast<size_t>(total) + o + j];
      }
      o += c;
    }
  });
  return out;
}

template <typename Real>
Tensor<Real> slice_lastdim(const Tensor<Real> &x, int start, int count) {
  const int c = x.shape().back();
  if (start < 0 || count <= 0 || start + count > c)
    throw ShapeMismatch("slice_lastdim [" + std::to_string(start) + "," +
                        std::to_string(start + count) + ") of " + shape_str(x.shape()));
  Shape os(x.shape());
  os.back() = count;
  auto out = detail::make_result<Real>(os, {x.node()});
  const size_t rows = x.size() / static_cast<size_t>(c);
  const Real *px = x.data();
  Real *po = out.data();
  for (size_t rI = 0; rI < rows; ++rI)
    std::copy(px + rI * c + start, px + rI * c + start + count, po + rI * static_cast<size_t>(count));
  detail::set_backward(out, [x, out, rows, c, start, count]() {
    const Real *dy = out.node()->grad.data();
    Real *gx = x.node()->grad.data();
    for (size_t rI = 0; rI < rows; ++rI)
      for (int j = 0; j < count; ++j)
        gx[rI * static_cast<size_t>(c) + static_cast<size_t>(start + j)] +=
            dy[rI * static_cast<size_t>(count) + static_cast<size_t>(j)];
  });
  return out;
}

// ---------------------------------------------------------------------------
// matmul and reductions
// ---------------------------------------------------------------------------

namespace detail {

// C[m,n] += A[m,k] * B[k,n], row-major. Rows are processed four at a time so
// each loaded B row is reused from registers.
template <typename Real>
void gemm_acc(const Real *WECDG_RESTRICT a, const Real *WECDG_RESTRICT b, Real *WECDG_RESTRICT c,
              int m, int k, int n) {
  int i = 0;
  for (; i + 4 <= m; i += 4) {
    const Real *a0 = a + static_cast<size_t>(i) * k;
    const Real *a1 = a0 + k;
    const Real *a2 = a1 + k;
    const Real *a3 = a2 + k;
    Real *c0 = c + static_cast<size_t>(i) * n;
    Real *c1 = c0 + n;
    Real *c2 = c1 + n;
    Real *c3 = c2 + n;
    for (int p = 0; p < k; ++p) {
      const Real v0 = a0[p], v1 = a1[p], v2 = a2[p], v3 = a3[p];
      const Real *brow = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) {
        const Real bv = brow[j];
        c0[j] += v0 * bv;
        c1[j] += v1 * bv;
        c2[j] += v2 * bv;
        c3[j] += v3 * bv;
      }
    }
  }
  for (; i < m; ++i) {
    const Real *arow = a + static_cast<size_t>(i) * k;
    Real *crow = c + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const Real av = arow[p];
      const Real *brow = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] += A[m,k] * B^T where Bt is [n,k]
template <typename Real>
void gemm_bt_acc(const Real *WECDG_RESTRICT a, const Real *WECDG_RESTRICT bt,
                 Real *WECDG_RESTRICT c, int m, int k, int n) {
  int i = 0;
  for (; i + 4 <= m; i += 4) {
    const Real *a0 = a + static_cast<size_t>(i) * k;
    const Real *a1 = a0 + k;
    const Real *a2 = a1 + k;
    const Real *a3 = a2 + k;
    Real *c0 = c + static_cast<size_t>(i) * n;
    Real *c1 = c0 + n;
    Real *c2 = c1 + n;
    Real *c3 = c2 + n;
    for (int j = 0; j < n; ++j) {
      const Real *brow = bt + static_cast<size_t>(j) * k;
      Real s0 = Real(0), s1 = Real(0), s2 = Real(0), s3 = Real(0);
      for (int p = 0; p < k; ++p) {
        const Real bv = brow[p];
        s0 += a0[p] * bv;
        s1 += a1[p] * bv;
        s2 += a2[p] * bv;
        s3 += a3[p] * bv;
      }
      c0[j] += s0;
      c1[j] += s1;
      c2[j] += s2;
      c3[j] += s3;
    }
  }
  for (; i < m; ++i) {
    const Real *arow = a + static_cast<size_t>(i) * k;
    Real *crow = c + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const Real *brow = bt + static_cast<size_t>(j) * k;
      Real acc = Real(0);
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// C[m,n] += A^T * B where At is [k,m], B is [k,n]; k rows are consumed four
// at a time so each C row is updated once per group.
template <typename Real>
void gemm_at_acc(const Real *WECDG_RESTRICT at, const Real *WECDG_RESTRICT b,
                 Real *WECDG_RESTRICT c, int m, int k, int n) {
  int p = 0;
  for (; p + 4 <= k; p += 4) {
    const Real *ar0 = at + static_cast<size_t>(p) * m;
    const Real *ar1 = ar0 + m;
    const Real *ar2 = ar1 + m;
    const Real *ar3 = ar2 + m;
    const Real *br0 = b + static_cast<size_t>(p) * n;
    const Real *br1 = br0 + n;
    const Real *br2 = br1 + n;
    const Real *br3 = br2 + n;
    for (int i = 0; i < m; ++i) {
      const Real v0 = ar0[i], v1 = ar1[i], v2 = ar2[i], v3 = ar3[i];
      Real *crow = c + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j)
        crow[j] += v0 * br0[j] + v1 * br1[j] + v2 * br2[j] + v3 * br3[j];
    }
  }
  for (; p < k; ++p) {
    const Real *arow = at + static_cast<size_t>(p) * m;
    const Real *brow = b + static_cast<size_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      const Real av = arow[i];
      Real *crow = c + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

template <typename Real>
Tensor<Real> matmul(const Tensor<Real> &a, const Tensor<Real> &b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeMismatch("matmul " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto out = detail::make_result<Real>(Shape{m, n}, {a.node(), b.node()});
  detail::zero_fill(out);
  detail::gemm_acc(a.data(), b.data(), out.data(), m, k, n);
  detail::set_backward(out, [a, b, out, m, k, n]() {
    const Real *dy = out.node()->grad.data();
    if (a.node()->requires_grad)  // dA = dY * B^T
      detail::gemm_bt_acc(dy, b.data(), a.node()->grad.data(), m, n, k);
    if (b.node()->requires_grad)  // dB = A^T * dY
      detail::gemm_at_acc(a.data(), dy, b.node()->grad.data(), k, m, n);
  });
  return out;
}

template <typename Real>
Tensor<Real> sum_all(const Tensor<Real> &x) {
  auto out = detail::make_result<Real>(Shape{1}, {x.node()});
  Real acc = Real(0);
  const Real *px = x.data();
  for (size_t i = 0; i < x.size(); ++i) acc += px[i];
  out[0] = acc;
  detail::set_backward(out, [x, out]() {
    const Real dy = out.node()->grad[0];
    Real *gx = x.node()->grad.data();
    for (size_t i = 0; i < x.size(); ++i) gx[i] += dy;
  });
  return out;
}

template <typename Real>
Tensor<Real> mean_all(const Tensor<Real> &x) {
  return scale(sum_all(x), Real(1) / static_cast<Real>(x.size()));
}

// mean over the last dimension, keepdim ([..., C] -> [..., 1])
template <typename Real>
Tensor<Real> mean_lastdim(const Tensor<Real> &x) {
  const int c = x.shape().back();
  Shape os(x.shape());
  os.back() = 1;
  auto out = detail::make_result<Real>(std::move(os), {x.node()});
  const size_t rows = x.size() / static_cast<size_t>(c);
  const Real *px = x.data();
  Real *po = out.data();
  for (size_t rI = 0; rI < rows; ++rI) {
    Real acc = Real(0);
    for (int j = 0; j < c; ++j) acc += px[rI * c + j];
    po[rI] = acc / static_cast<Real>(c);
  }
  detail::set_backward(out, [x, out, rows, c]() {
    const Real *dy = out.node()->grad.data();
    Real *gx = x.node()->grad.data();
    const Real inv = Real(1) / static_cast<Real>(c);
    for (size_t rI = 0; rI < rows; ++rI)
      for (int j = 0; j < c; ++j) gx[rI * static_cast<size_t>(c) + static_cast<size_t>(j)] += dy[rI] * inv;
  });
  return out;
}

// column means of a [T, C] matrix -> [C]; global average pooling.
template <typename Real>
Tensor<Real> mean_rows(const Tensor<Real> &x) {
  if (x.rank() != 2) throw ShapeMismatch("mean_rows needs rank 2, got " + shape_str(x.shape()));
  const int t = x.dim(0), c = x.dim(1);
  auto out = detail::make_result<Real>(Shape{c}, {x.node()});
  detail::zero_fill(out);
  const Real *px = x.data();
  Real *po = out.data();
  for (int i = 0; i < t; ++i)
    for (int j = 0; j < c; ++j) po[j] += px[static_cast<size_t>(i) * c + j];
  const Real inv = Real(1) / static_cast<Real>(t);
  for (int j = 0; j < c; ++j) po[j] *= inv;
  detail::set_backward(out, [x, out, t, c, inv]() {
    const Real *dy = out.node()->grad.data();
    Real *gx = x.node()->grad.data();
    for (int i = 0; i < t; ++i)
      for (int j = 0; j < c; ++j) gx[static_cast<size_t>(i) * c + j] += dy[j] * inv;
  });
  return out;
}

// numerically stable softmax over the last dimension
template <typename Real>
Tensor<Real> softmax_lastdim(const Tensor<Real> &x) {
  const int c = x.shape().back();
  auto out = detail::make_result<Real>(x.shape(), {x.node()});
  const size_t rows = x.size() / static_cast<size_t>(c);
  const Real *px = x.data();
  Real *po = out.data();
  for (size_t rI = 0; rI < rows; ++rI) {
    const Real *row = px + rI * c;
    Real *orow = po + rI * c;
    Real mx = row[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    Real denom = Real(0);
    for (int j = 0; j < c; ++j) {
      orow[j] = std::exp(row[j] - mx);
      denom += orow[j];
    }
    const Real inv = Real(1) / denom;
    for (int j = 0; j < c; ++j) orow[j] *= inv;
  }
  detail::set_backward(out, [x, out, rows, c]() {
    const Real *y = out.data();
    const Real *dy = out.node()->grad.data();
    Real *gx = x.node()->grad.data();
    for (size_t rI = 0; rI < rows; ++rI) {
      const Real *yr = y + rI * c;
      const Real *dr = dy + rI * c;
      Real dot = Real(0);
      for (int j = 0; j < c; ++j) dot += yr[j] * dr[j];
      Real *gr = gx + rI * c;
      for (int j = 0; j < c; ++j) gr[j] += yr[j] * (dr[j] - dot);
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// image-domain ops on [H, W, C] tensors
// ---------------------------------------------------------------------------

// zero-padded convolution; w is [kh, kw, Cin, Cout], optional bias [Cout]
template <typename Real>
Tensor<Real> conv2d(const Tensor<Real> &x, const Tensor<Real> &w, const Tensor<Real> *bias,
                    int stride, int pad) {
  if (x.rank() != 3 || w.rank() != 4 || x.dim(2) != w.dim(2))
    throw ShapeMismatch("conv2d " + shape_str(x.shape()) + " with kernel " + shape_str(w.shape()));
  const int h = x.dim(0), wd = x.dim(1), cin = x.dim(2);
  const int kh = w.dim(0), kw = w.dim(1), cout = w.dim(3);
  if (bias && (bias->rank() != 1 || bias->dim(0) != cout))
    throw ShapeMismatch("conv2d bias " + shape_str(bias->shape()));
  const int oh = (h + 2 * pad - kh) / stride + 1;
  const int ow = (wd + 2 * pad - kw) / stride + 1;
  if (oh <= 0 || ow <= 0) throw ShapeMismatch("conv2d output would be empty");

  std::vector<std::shared_ptr<TensorNode<Real>>> parents{x.node(), w.node()};
  if (bias) parents.push_back(bias->node());
  auto out = detail::make_result<Real>(Shape{oh, ow, cout}, std::move(parents));

  const Real *px = x.data(), *pw = w.data();
  Real *po = out.data();
  if (bias) {
    const Real *pb = bias->data();
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        Real *orow = po + (static_cast<size_t>(oy) * ow + ox) * cout;
        for (int j = 0; j < cout; ++j) orow[j] = pb[j];
      }
  } else {
    detail::zero_fill(out);
  }
  if (stride == 1) {
    // per (ky, kx): each output row overlaps a contiguous input run, which is
    // one row-blocked GEMM against the [cin, cout] weight slice
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        const Real *wblk = pw + (static_cast<size_t>(ky) * kw + kx) * cin * cout;
        const int ox0 = std::max(0, pad - kx);
        const int ox1 = std::min(ow, wd + pad - kx);
        if (ox1 <= ox0) continue;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy + ky - pad;
          if (iy < 0 || iy >= h) continue;
          const int ix0 = ox0 + kx - pad;
          detail::gemm_acc(px + (static_cast<size_t>(iy) * wd + ix0) * cin, wblk,
                           po + (static_cast<size_t>(oy) * ow + ox0) * cout, ox1 - ox0, cin,
                           cout);
        }
      }
    }
  } else {
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        Real *orow = po + (static_cast<size_t>(oy) * ow + ox) * cout;
        for (int ky = 0; ky < kh; ++ky) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < kw; ++kx) {
            const int ix = ox * stride + kx - pad;
            if (ix < 0 || ix >= wd) continue;
            const Real *xrow = px + (static_cast<size_t>(iy) * wd + ix) * cin;
            const Real *wblk = pw + (static_cast<size_t>(ky) * kw + kx) * cin * cout;
            for (int ci = 0; ci < cin; ++ci) {
              const Real xv = xrow[ci];
              const Real *wrow = wblk + static_cast<size_t>(ci) * cout;
              for (int j = 0; j < cout; ++j) orow[j] += xv * wrow[j];
            }
          }
        }
      }
    }
  }

  Tensor<Real> b = bias ? *bias : Tensor<Real>();
  const bool has_bias = bias != nullptr;
  detail::set_backward(out, [x, w, b, has_bias, out, h, wd, cin, kh, kw, cout, oh, ow, stride,
                             pad]() {
    const Real *dy = out.node()->grad.data();
    const Real *px2 = x.data();
    const Real *pw2 = w.data();
    const bool nx = x.node()->requires_grad;
    const bool nw = w.node()->requires_grad;
    Real *gx = nx ? x.node()->grad.data() : nullptr;
    Real *gw = nw ? w.node()->grad.data() : nullptr;
    if (has_bias && b.node()->requires_grad) {
      Real *gb = b.node()->grad.data();
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          const Real *drow = dy + (static_cast<size_t>(oy) * ow + ox) * cout;
          for (int j = 0; j < cout; ++j) gb[j] += drow[j];
        }
    }
    if (!nx && !nw) return;
    if (stride == 1) {
      for (int ky = 0; ky < kh; ++ky) {
        for (int kx = 0; kx < kw; ++kx) {
          const size_t wo = (static_cast<size_t>(ky) * kw + kx) * cin * cout;
          const int ox0 = std::max(0, pad - kx);
          const int ox1 = std::min(ow, wd + pad - kx);
          if (ox1 <= ox0) continue;
          const int run = ox1 - ox0;
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy + ky - pad;
            if (iy < 0 || iy >= h) continue;
            const int ix0 = ox0 + kx - pad;
            const Real *dyrun = dy + (static_cast<size_t>(oy) * ow + ox0) * cout;
            const size_t xoff = (static_cast<size_t>(iy) * wd + ix0) * cin;
            if (nx)  // dX = dY * W^T
              detail::gemm_bt_acc(dyrun, pw2 + wo, gx + xoff, run, cout, cin);
            if (nw)  // dW = X^T * dY
              detail::gemm_at_acc(px2 + xoff, dyrun, gw + wo, cin, run, cout);
          }
        }
      }
      return;
    }
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        const Real *drow = dy + (static_cast<size_t>(oy) * ow + ox) * cout;
        for (int ky = 0; ky < kh; ++ky) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < kw; ++kx) {
            const int ix = ox * stride + kx - pad;
            if (ix < 0 || ix >= wd) continue;
            const Real *xrow = px2 + (static_cast<size_t>(iy) * wd + ix) * cin;
            const size_t wo = (static_cast<size_t>(ky) * kw + kx) * cin * cout;
            if (nw) {
              Real *gwblk = gw + wo;
              for (int ci = 0; ci < cin; ++ci) {
                const Real xv = xrow[ci];
                Real *gwrow = gwblk + static_cast<size_t>(ci) * cout;
                for (int j = 0; j < cout; ++j) gwrow[j] += xv * drow[j];
              }
            }
            if (nx) {
              Real *gxrow = gx + (static_cast<size_t>(iy) * wd + ix) * cin;
              const Real *wblk = pw2 + wo;
              for (int ci = 0; ci < cin; ++ci) {
                const Real *wrow = wblk + static_cast<size_t>(ci) * cout;
                Real acc = Real(0);
                for (int j = 0; j < cout; ++j) acc += wrow[j] * drow[j];
                gxrow[ci] += acc;
              }
            }
          }
        }
      }
    }
  });
  return out;
}

// depthwise convolution, stride 1; w is [kh, kw, C], optional bias [C]
template <typename Real>
Tensor<Real> dwconv2d(const Tensor<Real> &x, const Tensor<Real> &w, const Tensor<Real> *bias,
                      int pad) {
  if (x.rank() != 3 || w.rank() != 3 || x.dim(2) != w.dim(2))
    throw ShapeMismatch("dwconv2d " + shape_str(x.shape()) + " with kernel " + shape_str(w.shape()));
  const int h = x.dim(0), wd = x.dim(1), c = x.dim(2);
  const int kh = w.dim(0), kw = w.dim(1);
  const int oh = h + 2 * pad - kh + 1;
  const int ow = wd + 2 * pad - kw + 1;
  if (oh <= 0 || ow <= 0) throw ShapeMismatch("dwconv2d output would be empty");

  std::vector<std::shared_ptr<TensorNode<Real>>> parents{x.node(), w.node()};
  if (bias) parents.push_back(bias->node());
  auto out = detail::make_result<Real>(Shape{oh, ow, c}, std::move(parents));

  const Real *px = x.data(), *pw = w.data();
  Real *po = out.data();
  if (!bias) detail::zero_fill(out);
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      Real *orow = po + (static_cast<size_t>(oy) * ow + ox) * c;
      if (bias) {
        const Real *pb = bias->data();
        for (int j = 0; j < c; ++j) orow[j] = pb[j];
      }
      for (int ky = 0; ky < kh; ++ky) {
        const int iy = oy + ky - pad;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < kw; ++kx) {
          const int ix = ox + kx - pad;
          if (ix < 0 || ix >= wd) continue;
          const Real *xrow = px + (static_cast<size_t>(iy) * wd + ix) * c;
          const Real *wrow = pw + (static_cast<size_t>(ky) * kw + kx) * c;
          for (int j = 0; j < c; ++j) orow[j] += xrow[j] * wrow[j];
        }
      }
    }
  }

  Tensor<Real> b = bias ? *bias : Tensor<Real>();
  const bool has_bias = bias != nullptr;
  detail::set_backward(out, [x, w, b, has_bias, out, h, wd, c, kh, kw, oh, ow, pad]() {
    const Real *dy = out.node()->grad.data();
    const Real *px2 = x.data();
    const Real *pw2 = w.data();
    const bool nx = x.node()->requires_grad;
    const bool nw = w.node()->requires_grad;
    Real *gx = nx ? x.node()->grad.data() : nullptr;
    Real *gw = nw ? w.node()->grad.data() : nullptr;
    if (has_bias && b.node()->requires_grad) {
      Real *gb = b.node()->grad.data();
      for (size_t i = 0; i < out.size(); ++i) gb[i % static_cast<size_t>(c)] += dy[i];
    }
    if (!nx && !nw) return;
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        const Real *drow = dy + (static_cast<size_t>(oy) * ow + ox) * c;
        for (int ky = 0; ky < kh; ++ky) {
          const int iy = oy + ky - pad;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < kw; ++kx) {
            const int ix = ox + kx - pad;
            if (ix < 0 || ix >= wd) continue;
            const Real *xrow = px2 + (static_cast<size_t>(iy) * wd + ix) * c;
            const Real *wrow = pw2 + (static_cast<size_t>(ky) * kw + kx) * c;
            if (nw) {
              Real *gwrow = gw + (static_cast<size_t>(ky) * kw + kx) * c;
              for (int j = 0; j < c; ++j) gwrow[j] += xrow[j] * drow[j];
            }
            if (nx) {
              Real *gxrow = gx + (static_cast<size_t>(iy) * wd + ix) * c;
              for (int j = 0; j < c; ++j) gxrow[j] += wrow[j] * drow[j];
            }
          }
        }
      }
    }
  });
  return out;
}

// bilinear 2x upsampling, align-corners=false: src = (dst + 0.5)/2 - 0.5,
// borders clamped. Even rows mix (0.25 above, 0.75 self), odd the reverse.
template <typename Real>
Tensor<Real> upsample2x(const Tensor<Real> &x) {
  if (x.rank() != 3) throw ShapeMismatch("upsample2x needs [H,W,C], got " + shape_str(x.shape()));
  const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
  const int oh = 2 * h, ow = 2 * w;
  auto out = detail::make_result<Real>(Shape{oh, ow, c}, {x.node()});

  auto taps = [](int o, int n, int &i0, int &i1, Real &w0, Real &w1) {
    // source coordinate o/2 - 0.25 (even) or o/2 + 0.25 (odd)
    const int base = o / 2;
    if (o % 2 == 0) {
      i0 = base - 1 < 0 ? 0 : base - 1;
      i1 = base;
      w0 = base - 1 < 0 ? Real(0) : Real(0.25);
      w1 = base - 1 < 0 ? Real(1) : Real(0.75);
    } else {
      i0 = base;
      i1 = base + 1 >= n ? base : base + 1;
      w0 = base + 1 >= n ? Real(1) : Real(0.75);
      w1 = base + 1 >= n ? Real(0) : Real(0.25);
    }
  };

  const Real *px = x.data();
  Real *po = out.data();
  for (int oy = 0; oy < oh; ++oy) {
    int y0, y1;
    Real wy0, wy1;
    taps(oy, h, y0, y1, wy0, wy1);
    for (int ox = 0; ox < ow; ++ox) {
      int x0, x1;
      Real wx0, wx1;
      taps(ox, w, x0, x1, wx0, wx1);
      Real *orow = po + (static_cast<size_t>(oy) * ow + ox) * c;
      const Real *r00 = px + (static_cast<size_t>(y0) * w + x0) * c;
      const Real *r01 = px + (static_cast<size_t>(y0) * w + x1) * c;
      const Real *r10 = px + (static_cast<size_t>(y1) * w + x0) * c;
      const Real *r11 = px + (static_cast<size_t>(y1) * w + x1) * c;
      for (int j = 0; j < c; ++j)
        orow[j] = wy0 * (wx0 * r00[j] + wx1 * r01[j]) + wy1 * (wx0 * r10[j] + wx1 * r11[j]);
    }
  }
  detail::set_backward(out, [x, out, h, w, c, oh, ow, taps]() {
    const Real *dy = out.node()->grad.data();
    Real *gx = x.node()->grad.data();
    for (int oy = 0; oy < oh; ++oy) {
      int y0, y1;
      Real wy0, wy1;
      taps(oy, h, y0, y1, wy0, wy1);
      for (int ox = 0; ox < ow; ++ox) {
        int x0, x1;
        Real wx0, wx1;
        taps(ox, w, x0, x1, wx0, wx1);
        const Real *drow = dy + (static_cast<size_t>(oy) * ow + ox) * c;
        Real *g00 = gx + (static_cast<size_t>(y0) * w + x0) * c;
        Real *g01 = gx + (static_cast<size_t>(y0) * w + x1) * c;
        Real *g10 = gx + (static_cast<size_t>(y1) * w + x0) * c;
        Real *g11 = gx + (static_cast<size_t>(y1) * w + x1) * c;
        for (int j = 0; j < c; ++j) {
          g00[j] += wy0 * wx0 * drow[j];
          g01[j] += wy0 * wx1 * drow[j];
          g10[j] += wy1 * wx0 * drow[j];
          g11[j] += wy1 * wx1 * drow[j];
        }
      }
    }
  });
  return out;
}

// reflect padding (edge not repeated) on the bottom/right to reach [nh, nw]
template <typename Real>
Tensor<Real> reflect_pad_to(const Tensor<Real> &x, int nh, int nw) {
  if (x.rank() != 3) throw ShapeMismatch("reflect_pad_to needs [H,W,C]");
  const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
  if (nh < h || nw < w) throw ShapeMismatch("reflect_pad_to target smaller than input");
  if (nh > 2 * h - 2 || nw > 2 * w - 2)
    throw ShapeMismatch("reflect padding would exceed mirror range");
  if (nh == h && nw == w) return x;
  auto out = detail::make_result<Real>(Shape{nh, nw, c}, {x.node()});
  auto src = [](int i, int n) { return i < n ? i : 2 * n - 2 - i; };
  const Real *px = x.data();
  Real *po = out.data();
  for (int y = 0; y < nh; ++y) {
    const int sy = src(y, h);
    for (int xx = 0; xx < nw; ++xx) {
      const int sx = src(xx, w);
      const Real *xrow = px + (static_cast<size_t>(sy) * w + sx) * c;
      Real *orow = po + (static_cast<size_t>(y) * nw + xx) * c;
      for (int j = 0; j < c; ++j) orow[j] = xrow[j];
    }
  }
  detail::set_backward(out, [x, out, h, w, c, nh, nw, src]() {
    const Real *dy = out.node()->grad.data();
    Real *gx = x.node()->grad.data();
    for (int y = 0; y < nh; ++y) {
      const int sy = src(y, h);
      for (int xx = 0; xx < nw; ++xx) {
        const int sx = src(xx, w);
        Real *gxrow = gx + (static_cast<size_t>(sy) * w + sx) * c;
        const Real *drow = dy + (static_cast<size_t>(y) * nw + xx) * c;
        for (int j = 0; j < c; ++j) gxrow[j] += drow[j];
      }
    }
  });
  return out;
}

// top-left crop to [nh, nw]
template <typename Real>
Tensor<Real> crop_to(const Tensor<Real> &x, int nh, int nw) {
  if (x.rank() != 3) throw ShapeMismatch("crop_to needs [H,W,C]");
  const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
  if (nh > h || nw > w) throw ShapeMismatch("crop_to target larger than input");
  if (nh == h && nw == w) return x;
  auto out = detail::make_result<Real>(Shape{nh, nw, c}, {x.node()});
  const Real *px = x.data();
  Real *po = out.data();
  for (int y = 0; y < nh; ++y)
    std::copy(px + static_cast<size_t>(y) * w * c, px + (static_cast<size_t>(y) * w + nw) * c,
              po + static_cast<size_t>(y) * nw * c);
  detail::set_backward(out, [x, out, w, c, nh, nw]() {
    const Real *dy = out.node()->grad.data();
    Real *gx = x.node()->grad.data();
    for (int y = 0; y < nh; ++y)
      for (int xx = 0; xx < nw; ++xx)
        for (int j = 0; j < c; ++j)
          gx[(static_cast<size_t>(y) * w + xx) * c + j] +=
              dy[(static_cast<size_t>(y) * nw + xx) * c + j];
  });
  return out;
}

// detached copy: same values, no tape participation
template <typename Real>
Tensor<Real> detach(const Tensor<Real> &x) {
  Tensor<Real> out(x.shape());
  std::copy(x.data(), x.data() + x.size(), out.data());
  return out;
}

template <typename Real>
bool all_finite(const Tensor<Real> &x) {
  for (size_t i = 0; i < x.size(); ++i)
    if (!std::isfinite(static_cast<double>(x[i]))) return false;
  return true;
}

}  // namespace wecdg
