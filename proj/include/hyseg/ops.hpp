#pragma once

// Differentiable primitives. Each op computes its forward value eagerly and,
// when any input tracks gradients, records a closure that maps the output
// gradient onto its inputs.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "hyseg/kernels.hpp"
#include "hyseg/tensor.hpp"

namespace hyseg {

namespace detail {

inline std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> st(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) st[i - 1] = st[i] * shape[i];
  return st;
}

// Broadcast layout of a binary op. The smaller operand must be a trailing
// suffix of the larger one (leading batch dims repeat) or hold one element.
struct BroadcastPlan {
  Shape out;
  std::size_t n_out = 0, n_a = 0, n_b = 0;
};

inline BroadcastPlan plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  BroadcastPlan p;
  const std::size_t na = numel(a), nb = numel(b);
  auto is_suffix = [](const Shape& big, const Shape& small) {
    if (small.size() > big.size()) return false;
    return std::equal(small.rbegin(), small.rend(), big.rbegin());
  };
  if (a == b || (is_suffix(a, b) && na >= nb) || nb == 1) {
    p.out = a;
  } else if (is_suffix(b, a) || na == 1) {
    p.out = b;
  } else {
    throw DimensionError(std::string(op) + ": shapes " + to_string(a) + " and " + to_string(b) +
                         " are not broadcast-compatible");
  }
  p.n_out = numel(p.out);
  p.n_a = na;
  p.n_b = nb;
  return p;
}

// Sums a broadcast gradient back down to an operand of n elements.
template <typename T>
void accumulate_reduced(std::vector<T>& dst, const std::vector<T>& src) {
  const std::size_t n = dst.size();
  if (n == src.size()) {
    for (std::size_t i = 0; i < n; ++i) dst[i] += src[i];
    return;
  }
  for (std::size_t i = 0; i < src.size(); ++i) dst[i % n] += src[i];
}

template <typename T, typename Fwd, typename Dfx>
Tensor<T> unary(const Tensor<T>& x, const char* op, Fwd fwd, Dfx dfx) {
  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  return make_result<T>(x.shape(), std::move(out), {&x}, op, [dfx](Node<T>& self) {
    Node<T>* px = grad_parent(self, 0);
    if (!px) return;
    auto& g = px->grad_buffer();
    const auto& xv = px->value;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * dfx(xv[i], self.value[i]);
  });
}

inline void check_axis(std::size_t axis, std::size_t ndim, const char* op) {
  if (axis >= ndim) {
    throw ArgumentError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                        std::to_string(ndim));
  }
}

// (outer, axis extent, inner) split of a shape around `axis`.
inline std::array<std::size_t, 3> split_axis(const Shape& s, std::size_t axis) {
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  return {outer, s[axis], inner};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const auto plan = detail::plan_broadcast(a.shape(), b.shape(), "add");
  std::vector<T> out(plan.n_out);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < plan.n_out; ++i) out[i] = av[i % plan.n_a] + bv[i % plan.n_b];
  return detail::make_result<T>(plan.out, std::move(out), {&a, &b}, "add", [](Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (Node<T>* p = detail::grad_parent(self, k)) detail::accumulate_reduced(p->grad_buffer(), self.grad);
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  const auto plan = detail::plan_broadcast(a.shape(), b.shape(), "sub");
  std::vector<T> out(plan.n_out);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < plan.n_out; ++i) out[i] = av[i % plan.n_a] - bv[i % plan.n_b];
  return detail::make_result<T>(plan.out, std::move(out), {&a, &b}, "sub", [](Node<T>& self) {
    if (Node<T>* p = detail::grad_parent(self, 0)) detail::accumulate_reduced(p->grad_buffer(), self.grad);
    if (Node<T>* p = detail::grad_parent(self, 1)) {
      std::vector<T> neg(self.grad.size());
      for (std::size_t i = 0; i < neg.size(); ++i) neg[i] = -self.grad[i];
      detail::accumulate_reduced(p->grad_buffer(), neg);
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  const auto plan = detail::plan_broadcast(a.shape(), b.shape(), "mul");
  std::vector<T> out(plan.n_out);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < plan.n_out; ++i) out[i] = av[i % plan.n_a] * bv[i % plan.n_b];
  return detail::make_result<T>(plan.out, std::move(out), {&a, &b}, "mul", [plan](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (Node<T>* p = detail::grad_parent(self, 0)) {
      std::vector<T> g(plan.n_out);
      for (std::size_t i = 0; i < plan.n_out; ++i) g[i] = self.grad[i] * bv[i % plan.n_b];
      detail::accumulate_reduced(p->grad_buffer(), g);
    }
    if (Node<T>* p = detail::grad_parent(self, 1)) {
      std::vector<T> g(plan.n_out);
      for (std::size_t i = 0; i < plan.n_out; ++i) g[i] = self.grad[i] * av[i % plan.n_a];
      detail::accumulate_reduced(p->grad_buffer(), g);
    }
  });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  const auto plan = detail::plan_broadcast(a.shape(), b.shape(), "div");
  std::vector<T> out(plan.n_out);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < plan.n_out; ++i) out[i] = av[i % plan.n_a] / bv[i % plan.n_b];
  return detail::make_result<T>(plan.out, std::move(out), {&a, &b}, "div", [plan](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (Node<T>* p = detail::grad_parent(self, 0)) {
      std::vector<T> g(plan.n_out);
      for (std::size_t i = 0; i < plan.n_out; ++i) g[i] = self.grad[i] / bv[i % plan.n_b];
      detail::accumulate_reduced(p->grad_buffer(), g);
    }
    if (Node<T>* p = detail::grad_parent(self, 1)) {
      std::vector<T> g(plan.n_out);
      for (std::size_t i = 0; i < plan.n_out; ++i) {
        const T bb = bv[i % plan.n_b];
        g[i] = -self.grad[i] * av[i % plan.n_a] / (bb * bb);
      }
      detail::accumulate_reduced(p->grad_buffer(), g);
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  return detail::unary(
      x, "scale", [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
  return detail::unary(
      x, "add_scalar", [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
  return scale(x, T(-1));
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary(
      x, "exp", [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  for (T v : x.values()) {
    if (!(v > T(0))) throw DomainError("log of non-positive value " + std::to_string(v));
  }
  return detail::unary(
      x, "log", [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
inline T sigmoid_scalar(T v) {
  return v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary(
      x, "sigmoid", [](T v) { return sigmoid_scalar(v); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  return detail::unary(
      x, "silu", [](T v) { return v * sigmoid_scalar(v); },
      [](T v, T) {
        const T s = sigmoid_scalar(v);
        return s * (T(1) + v * (T(1) - s));
      });
}

// Exact (erf) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T kInvSqrt2 = T(0.70710678118654752440);
  constexpr T kInvSqrt2Pi = T(0.39894228040143267794);
  return detail::unary(
      x, "gelu", [](T v) { return T(0.5) * v * (T(1) + std::erf(v * kInvSqrt2)); },
      [](T v, T) { return T(0.5) * (T(1) + std::erf(v * kInvSqrt2)) + v * kInvSqrt2Pi * std::exp(T(-0.5) * v * v); });
}

template <typename T>
inline T softplus_scalar(T v) {
  return v > T(20) ? v : std::log1p(std::exp(v));
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
  return detail::unary(
      x, "softplus", [](T v) { return softplus_scalar(v); }, [](T v, T) { return sigmoid_scalar(v); });
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  return detail::make_result<T>(std::move(shape), x.values(), {&x}, "reshape", [](Node<T>& self) {
    if (Node<T>* p = detail::grad_parent(self, 0)) {
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

namespace detail {

// out[i] = in[src_index(i)] for a permutation; returns the gather table.
inline std::vector<std::size_t> permute_gather(const Shape& in_shape, const std::vector<std::size_t>& perm) {
  const std::size_t nd = in_shape.size();
  Shape out_shape(nd);
  for (std::size_t i = 0; i < nd; ++i) out_shape[i] = in_shape[perm[i]];
  const auto in_st = strides_of(in_shape);
  std::vector<std::size_t> st(nd);
  for (std::size_t i = 0; i < nd; ++i) st[i] = in_st[perm[i]];
  const std::size_t n = numel(in_shape);
  std::vector<std::size_t> gather(n);
  std::vector<std::size_t> idx(nd, 0);
  std::size_t src = 0;
  for (std::size_t o = 0; o < n; ++o) {
    gather[o] = src;
    for (std::size_t d = nd; d-- > 0;) {
      if (++idx[d] < out_shape[d]) {
        src += st[d];
        break;
      }
      src -= st[d] * (out_shape[d] - 1);
      idx[d] = 0;
    }
  }
  return gather;
}

}  // namespace detail

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const std::size_t nd = x.dim();
  if (perm.size() != nd) throw ArgumentError("permute: permutation rank does not match tensor rank");
  std::vector<bool> used(nd, false);
  for (std::size_t p : perm) {
    if (p >= nd || used[p]) throw ArgumentError("permute: invalid permutation");
    used[p] = true;
  }
  Shape out_shape(nd);
  for (std::size_t i = 0; i < nd; ++i) out_shape[i] = x.shape()[perm[i]];
  auto gather = detail::permute_gather(x.shape(), perm);
  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[gather[i]];
  return detail::make_result<T>(std::move(out_shape), std::move(out), {&x}, "permute",
                                [gather = std::move(gather)](Node<T>& self) {
                                  if (Node<T>* p = detail::grad_parent(self, 0)) {
                                    auto& g = p->grad_buffer();
                                    for (std::size_t i = 0; i < gather.size(); ++i) g[gather[i]] += self.grad[i];
                                  }
                                });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, std::size_t axis) {
  if (xs.empty()) throw ArgumentError("concat: no inputs");
  const Shape& s0 = xs[0].shape();
  detail::check_axis(axis, s0.size(), "concat");
  Shape out_shape = s0;
  out_shape[axis] = 0;
  for (const auto& x : xs) {
    const Shape& s = x.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = (d == axis) || s[d] == s0[d];
    if (!ok) throw DimensionError("concat: " + to_string(s) + " does not match " + to_string(s0));
    out_shape[axis] += s[axis];
  }
  const auto [outer, total, inner] = detail::split_axis(out_shape, axis);
  std::vector<T> out(numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& x : xs) {
    offsets.push_back(off);
    const std::size_t len = x.shape()[axis] * inner;
    const auto& xv = x.values();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(xv.begin() + o * len, len, out.begin() + o * total * inner + off * inner);
    off += x.shape()[axis];
  }
  return detail::make_result_vec<T>(
      out_shape, std::move(out), xs, "concat", [offsets, outer = outer, total = total, inner = inner, axis](Node<T>& self) {
        for (std::size_t k = 0; k < self.parents.size(); ++k) {
          Node<T>* p = detail::grad_parent(self, k);
          if (!p) continue;
          const std::size_t len = p->shape[axis] * inner;
          auto& g = p->grad_buffer();
          for (std::size_t o = 0; o < outer; ++o) {
            const T* src = self.grad.data() + o * total * inner + offsets[k] * inner;
            T* dst = g.data() + o * len;
            for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
          }
        }
      });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
  detail::check_axis(axis, x.dim(), "slice");
  if (start + length > x.shape()[axis] || length == 0) {
    throw ArgumentError("slice: range [" + std::to_string(start) + "," + std::to_string(start + length) +
                        ") invalid for extent " + std::to_string(x.shape()[axis]));
  }
  const auto [outer, total, inner] = detail::split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  std::vector<T> out(numel(out_shape));
  const auto& xv = x.values();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(xv.begin() + (o * total + start) * inner, length * inner, out.begin() + o * length * inner);
  return detail::make_result<T>(std::move(out_shape), std::move(out), {&x}, "slice",
                                [outer = outer, total = total, inner = inner, start, length](Node<T>& self) {
                                  Node<T>* p = detail::grad_parent(self, 0);
                                  if (!p) return;
                                  auto& g = p->grad_buffer();
                                  for (std::size_t o = 0; o < outer; ++o) {
                                    T* dst = g.data() + (o * total + start) * inner;
                                    const T* src = self.grad.data() + o * length * inner;
                                    for (std::size_t i = 0; i < length * inner; ++i) dst[i] += src[i];
                                  }
                                });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = T(0);
  for (T v : x.values()) s += v;
  return detail::make_result<T>({1}, {s}, {&x}, "sum", [](Node<T>& self) {
    if (Node<T>* p = detail::grad_parent(self, 0)) {
      for (auto& g : p->grad_buffer()) g += self.grad[0];
    }
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

// Sums over the last axis; rank-1 input reduces to shape [1].
template <typename T>
Tensor<T> sum_last(const Tensor<T>& x) {
  const std::size_t c = x.shape().back();
  const std::size_t rows = x.numel() / c;
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  if (out_shape.empty()) out_shape = {1};
  std::vector<T> out(rows, T(0));
  const auto& xv = x.values();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) out[r] += xv[r * c + j];
  return detail::make_result<T>(std::move(out_shape), std::move(out), {&x}, "sum_last", [c, rows](Node<T>& self) {
    if (Node<T>* p = detail::grad_parent(self, 0)) {
      auto& g = p->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) g[r * c + j] += self.grad[r];
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization and softmax
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  detail::check_axis(axis, x.dim(), "softmax");
  const auto [outer, len, inner] = detail::split_axis(x.shape(), axis);
  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      T mx = xv[base];
      for (std::size_t k = 1; k < len; ++k) mx = std::max(mx, xv[base + k * inner]);
      T z = T(0);
      for (std::size_t k = 0; k < len; ++k) z += (out[base + k * inner] = std::exp(xv[base + k * inner] - mx));
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] /= z;
    }
  }
  return detail::make_result<T>(x.shape(), std::move(out), {&x}, "softmax",
                                [outer = outer, len = len, inner = inner](Node<T>& self) {
                                  Node<T>* p = detail::grad_parent(self, 0);
                                  if (!p) return;
                                  auto& g = p->grad_buffer();
                                  const auto& y = self.value;
                                  const auto& dy = self.grad;
                                  for (std::size_t o = 0; o < outer; ++o) {
                                    for (std::size_t i = 0; i < inner; ++i) {
                                      const std::size_t base = o * len * inner + i;
                                      T dot = T(0);
                                      for (std::size_t k = 0; k < len; ++k) dot += dy[base + k * inner] * y[base + k * inner];
                                      for (std::size_t k = 0; k < len; ++k) {
                                        const std::size_t at = base + k * inner;
                                        g[at] += y[at] * (dy[at] - dot);
                                      }
                                    }
                                  }
                                });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x, std::size_t axis) {
  detail::check_axis(axis, x.dim(), "log_softmax");
  const auto [outer, len, inner] = detail::split_axis(x.shape(), axis);
  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      T mx = xv[base];
      for (std::size_t k = 1; k < len; ++k) mx = std::max(mx, xv[base + k * inner]);
      T z = T(0);
      for (std::size_t k = 0; k < len; ++k) z += std::exp(xv[base + k * inner] - mx);
      const T lse = mx + std::log(z);
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] = xv[base + k * inner] - lse;
    }
  }
  return detail::make_result<T>(x.shape(), std::move(out), {&x}, "log_softmax",
                                [outer = outer, len = len, inner = inner](Node<T>& self) {
                                  Node<T>* p = detail::grad_parent(self, 0);
                                  if (!p) return;
                                  auto& g = p->grad_buffer();
                                  const auto& y = self.value;
                                  const auto& dy = self.grad;
                                  for (std::size_t o = 0; o < outer; ++o) {
                                    for (std::size_t i = 0; i < inner; ++i) {
                                      const std::size_t base = o * len * inner + i;
                                      T s = T(0);
                                      for (std::size_t k = 0; k < len; ++k) s += dy[base + k * inner];
                                      for (std::size_t k = 0; k < len; ++k) {
                                        const std::size_t at = base + k * inner;
                                        g[at] += dy[at] - std::exp(y[at]) * s;
                                      }
                                    }
                                  }
                                });
}

// Normalizes over the last axis, then applies gamma/beta of shape [C].
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  const std::size_t c = x.shape().back();
  if (c == 0) throw DimensionError("layer_norm over an empty channel axis");
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    throw DimensionError("layer_norm: affine params " + to_string(gamma.shape()) + "/" + to_string(beta.shape()) +
                         " do not match channels " + std::to_string(c));
  }
  if (!(eps > T(0))) throw ArgumentError("layer_norm eps must be positive");
  const std::size_t rows = x.numel() / c;
  const auto& xv = x.values();
  const auto& gv = gamma.values();
  const auto& bv = beta.values();
  std::vector<T> out(xv.size()), xhat(xv.size()), rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * c;
    T mu = T(0);
    for (std::size_t j = 0; j < c; ++j) mu += xr[j];
    mu /= static_cast<T>(c);
    T var = T(0);
    for (std::size_t j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(c);
    const T rs = T(1) / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t j = 0; j < c; ++j) {
      const T h = (xr[j] - mu) * rs;
      xhat[r * c + j] = h;
      out[r * c + j] = h * gv[j] + bv[j];
    }
  }
  return detail::make_result<T>(
      x.shape(), std::move(out), {&x, &gamma, &beta}, "layer_norm",
      [c, rows, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& self) {
        const auto& dy = self.grad;
        const auto& gv = self.parents[1]->value;
        if (Node<T>* pg = detail::grad_parent(self, 1)) {
          auto& g = pg->grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j) g[j] += dy[r * c + j] * xhat[r * c + j];
        }
        if (Node<T>* pb = detail::grad_parent(self, 2)) {
          auto& g = pb->grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j) g[j] += dy[r * c + j];
        }
        if (Node<T>* px = detail::grad_parent(self, 0)) {
          auto& g = px->grad_buffer();
          const T inv_c = T(1) / static_cast<T>(c);
          for (std::size_t r = 0; r < rows; ++r) {
            T m1 = T(0), m2 = T(0);
            for (std::size_t j = 0; j < c; ++j) {
              const T dh = dy[r * c + j] * gv[j];
              m1 += dh;
              m2 += dh * xhat[r * c + j];
            }
            m1 *= inv_c;
            m2 *= inv_c;
            for (std::size_t j = 0; j < c; ++j) {
              const T dh = dy[r * c + j] * gv[j];
              g[r * c + j] += rstd[r] * (dh - m1 - xhat[r * c + j] * m2);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

// a [..., M, K] x b [..., K, P]. b's leading dims either match a's or b is 2-D.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  auto fail = [&] { throw DimensionError("matmul: " + to_string(sa) + " x " + to_string(sb)); };
  if (sa.size() < 2 || sb.size() < 2) fail();
  const std::size_t M = sa[sa.size() - 2], K = sa.back(), P = sb.back();
  if (sb[sb.size() - 2] != K) fail();
  const Shape batch_a(sa.begin(), sa.end() - 2);
  const Shape batch_b(sb.begin(), sb.end() - 2);
  const bool shared_b = batch_b.empty();
  if (!shared_b && batch_b != batch_a) fail();
  const std::size_t batches = numel(batch_a);
  Shape out_shape = batch_a;
  out_shape.push_back(M);
  out_shape.push_back(P);
  std::vector<T> out(batches * M * P);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < batches; ++i) {
    kernels::gemm_nn(M, P, K, av.data() + i * M * K, bv.data() + (shared_b ? 0 : i * K * P), out.data() + i * M * P,
                     false);
  }
  return detail::make_result<T>(
      std::move(out_shape), std::move(out), {&a, &b}, "matmul", [batches, M, K, P, shared_b](Node<T>& self) {
        const auto& av = self.parents[0]->value;
        const auto& bv = self.parents[1]->value;
        const auto& dy = self.grad;
        if (Node<T>* pa = detail::grad_parent(self, 0)) {
          auto& g = pa->grad_buffer();
          for (std::size_t i = 0; i < batches; ++i)
            kernels::gemm_nt(M, K, P, dy.data() + i * M * P, bv.data() + (shared_b ? 0 : i * K * P), g.data() + i * M * K,
                             true);
        }
        if (Node<T>* pb = detail::grad_parent(self, 1)) {
          auto& g = pb->grad_buffer();
          if (shared_b) {
            kernels::gemm_tn(K, P, batches * M, av.data(), dy.data(), g.data(), true);
          } else {
            for (std::size_t i = 0; i < batches; ++i)
              kernels::gemm_tn(K, P, M, av.data() + i * M * K, dy.data() + i * M * P, g.data() + i * K * P, true);
          }
        }
      });
}

// x [..., K] * weight [K, P] + bias [P].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias = {}) {
  const Shape& sw = weight.shape();
  const std::size_t K = x.shape().back();
  if (sw.size() != 2 || sw[0] != K) {
    throw DimensionError("linear: input " + to_string(x.shape()) + " vs weight " + to_string(sw));
  }
  const std::size_t P = sw[1];
  if (bias.defined() && bias.shape() != Shape{P}) {
    throw DimensionError("linear: bias " + to_string(bias.shape()) + " vs out features " + std::to_string(P));
  }
  const std::size_t rows = x.numel() / K;
  Shape out_shape = x.shape();
  out_shape.back() = P;
  std::vector<T> out(rows * P);
  kernels::gemm_nn(rows, P, K, x.values().data(), weight.values().data(), out.data(), false);
  if (bias.defined()) {
    const auto& bv = bias.values();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < P; ++j) out[r * P + j] += bv[j];
  }
  return detail::make_result<T>(std::move(out_shape), std::move(out), {&x, &weight, &bias}, "linear",
                                [rows, K, P](Node<T>& self) {
                                  const auto& dy = self.grad;
                                  if (Node<T>* px = detail::grad_parent(self, 0)) {
                                    kernels::gemm_nt(rows, K, P, dy.data(), self.parents[1]->value.data(),
                                                     px->grad_buffer().data(), true);
                                  }
                                  if (Node<T>* pw = detail::grad_parent(self, 1)) {
                                    kernels::gemm_tn(K, P, rows, self.parents[0]->value.data(), dy.data(),
                                                     pw->grad_buffer().data(), true);
                                  }
                                  if (self.parents.size() > 2) {
                                    if (Node<T>* pb = detail::grad_parent(self, 2)) {
                                      auto& g = pb->grad_buffer();
                                      for (std::size_t r = 0; r < rows; ++r)
                                        for (std::size_t j = 0; j < P; ++j) g[j] += dy[r * P + j];
                                    }
                                  }
                                });
}

// ---------------------------------------------------------------------------
// Volumetric ops
// ---------------------------------------------------------------------------

using Triple = std::array<std::size_t, 3>;

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t s, std::size_t p) {
  if (k == 0 || s == 0) throw ArgumentError("conv kernel and stride must be >= 1");
  if (in + 2 * p < k) {
    throw DimensionError("kernel " + std::to_string(k) + " larger than padded input " + std::to_string(in + 2 * p));
  }
  return (in + 2 * p - k) / s + 1;
}

namespace detail {

struct ConvGeometry {
  std::size_t C, D, H, W;
  Triple k, s, p;
  std::size_t OD, OH, OW;
  std::size_t rows() const { return C * k[0] * k[1] * k[2]; }
  std::size_t cols() const { return OD * OH * OW; }
};

// Visits (column-row, output-position, input-offset) for every in-bounds tap.
template <typename F>
void for_each_tap(const ConvGeometry& g, F&& f) {
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.C; ++c)
    for (std::size_t kz = 0; kz < g.k[0]; ++kz)
      for (std::size_t ky = 0; ky < g.k[1]; ++ky)
        for (std::size_t kx = 0; kx < g.k[2]; ++kx, ++row) {
          std::size_t col = 0;
          for (std::size_t oz = 0; oz < g.OD; ++oz) {
            const long iz = static_cast<long>(oz * g.s[0] + kz) - static_cast<long>(g.p[0]);
            for (std::size_t oy = 0; oy < g.OH; ++oy) {
              const long iy = static_cast<long>(oy * g.s[1] + ky) - static_cast<long>(g.p[1]);
              for (std::size_t ox = 0; ox < g.OW; ++ox, ++col) {
                const long ix = static_cast<long>(ox * g.s[2] + kx) - static_cast<long>(g.p[2]);
                if (iz < 0 || iy < 0 || ix < 0 || iz >= static_cast<long>(g.D) || iy >= static_cast<long>(g.H) ||
                    ix >= static_cast<long>(g.W))
                  continue;
                f(row, col, ((c * g.D + iz) * g.H + iy) * g.W + ix);
              }
            }
          }
        }
}

template <typename T>
void im2col(const ConvGeometry& g, const T* x, T* col) {
  std::fill_n(col, g.rows() * g.cols(), T(0));
  const std::size_t ncol = g.cols();
  for_each_tap(g, [&](std::size_t r, std::size_t c, std::size_t at) { col[r * ncol + c] = x[at]; });
}

template <typename T>
void col2im(const ConvGeometry& g, const T* col, T* dx) {
  const std::size_t ncol = g.cols();
  for_each_tap(g, [&](std::size_t r, std::size_t c, std::size_t at) { dx[at] += col[r * ncol + c]; });
}

}  // namespace detail

// Cross-correlation. x [B,C,D,H,W], weight [O,C,kd,kh,kw], bias [O] (optional).
template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, Triple stride, Triple padding) {
  const Shape& sx = x.shape();
  const Shape& sw = weight.shape();
  if (sx.size() != 5 || sw.size() != 5 || sw[1] != sx[1]) {
    throw DimensionError("conv3d: input " + to_string(sx) + " vs weight " + to_string(sw));
  }
  const std::size_t B = sx[0], O = sw[0];
  if (bias.defined() && bias.shape() != Shape{O}) throw DimensionError("conv3d: bias " + to_string(bias.shape()));
  detail::ConvGeometry g{sx[1], sx[2], sx[3], sx[4], {sw[2], sw[3], sw[4]}, stride, padding, 0, 0, 0};
  g.OD = conv_out_extent(g.D, g.k[0], stride[0], padding[0]);
  g.OH = conv_out_extent(g.H, g.k[1], stride[1], padding[1]);
  g.OW = conv_out_extent(g.W, g.k[2], stride[2], padding[2]);
  const std::size_t in_sz = g.C * g.D * g.H * g.W, R = g.rows(), P = g.cols();
  std::vector<T> out(B * O * P);
  std::vector<T> col(R * P);
  for (std::size_t b = 0; b < B; ++b) {
    detail::im2col(g, x.values().data() + b * in_sz, col.data());
    T* ob = out.data() + b * O * P;
    kernels::gemm_nn(O, P, R, weight.values().data(), col.data(), ob, false);
    if (bias.defined())
      for (std::size_t o = 0; o < O; ++o)
        for (std::size_t j = 0; j < P; ++j) ob[o * P + j] += bias.values()[o];
  }
  return detail::make_result<T>(
      Shape{B, O, g.OD, g.OH, g.OW}, std::move(out), {&x, &weight, &bias}, "conv3d", [g, B, O, in_sz](Node<T>& self) {
        const std::size_t R = g.rows(), P = g.cols();
        const auto& xv = self.parents[0]->value;
        const auto& wv = self.parents[1]->value;
        Node<T>* px = detail::grad_parent(self, 0);
        Node<T>* pw = detail::grad_parent(self, 1);
        Node<T>* pb = self.parents[2] ? detail::grad_parent(self, 2) : nullptr;
        std::vector<T> col(R * P), dcol(R * P);
        for (std::size_t b = 0; b < B; ++b) {
          const T* dy = self.grad.data() + b * O * P;
          if (pw) {
            detail::im2col(g, xv.data() + b * in_sz, col.data());
            kernels::gemm_nt(O, R, P, dy, col.data(), pw->grad_buffer().data(), true);
          }
          if (px) {
            kernels::gemm_tn(R, P, O, wv.data(), dy, dcol.data(), false);
            detail::col2im(g, dcol.data(), px->grad_buffer().data() + b * in_sz);
          }
          if (pb) {
            auto& gb = pb->grad_buffer();
            for (std::size_t o = 0; o < O; ++o)
              for (std::size_t j = 0; j < P; ++j) gb[o] += dy[o * P + j];
          }
        }
      });
}

namespace detail {

// Source taps of align_corners=false linear interpolation along one axis.
struct AxisTaps {
  std::vector<std::size_t> lo, hi;
  std::vector<double> w_hi;
};

inline AxisTaps axis_taps(std::size_t in, std::size_t scale) {
  AxisTaps t;
  const std::size_t out = in * scale;
  t.lo.resize(out);
  t.hi.resize(out);
  t.w_hi.resize(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) / static_cast<double>(scale) - 0.5;
    if (src < 0.0) src = 0.0;
    auto i0 = static_cast<std::size_t>(src);
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = i0 + 1 < in ? i0 + 1 : in - 1;
    t.lo[o] = i0;
    t.hi[o] = i1;
    t.w_hi[o] = src - static_cast<double>(i0);
  }
  return t;
}

}  // namespace detail

// Trilinear upsampling of [B,C,D,H,W] by integer per-axis factors
// (align_corners=false).
template <typename T>
Tensor<T> upsample_trilinear(const Tensor<T>& x, Triple scale) {
  for (std::size_t s : scale) {
    if (s < 1) throw ArgumentError("upsample scale must be >= 1");
  }
  if (x.dim() != 5) throw DimensionError("upsample_trilinear expects [B,C,D,H,W], got " + to_string(x.shape()));
  if (scale == Triple{1, 1, 1}) return reshape(x, x.shape());
  const Shape& s = x.shape();
  const std::size_t BC = s[0] * s[1], D = s[2], H = s[3], W = s[4];
  const std::size_t OD = D * scale[0], OH = H * scale[1], OW = W * scale[2];
  auto tz = detail::axis_taps(D, scale[0]), ty = detail::axis_taps(H, scale[1]), tx = detail::axis_taps(W, scale[2]);

  // Visits the 8 (input index, weight) taps of each output voxel.
  auto visit = [=](auto&& f) {
    for (std::size_t n = 0; n < BC; ++n) {
      const std::size_t in_base = n * D * H * W;
      std::size_t o = n * OD * OH * OW;
      for (std::size_t z = 0; z < OD; ++z) {
        const std::size_t zs[2] = {tz.lo[z], tz.hi[z]};
        const T wz[2] = {T(1.0 - tz.w_hi[z]), T(tz.w_hi[z])};
        for (std::size_t y = 0; y < OH; ++y) {
          const std::size_t ys[2] = {ty.lo[y], ty.hi[y]};
          const T wy[2] = {T(1.0 - ty.w_hi[y]), T(ty.w_hi[y])};
          for (std::size_t xx = 0; xx < OW; ++xx, ++o) {
            const std::size_t xs[2] = {tx.lo[xx], tx.hi[xx]};
            const T wx[2] = {T(1.0 - tx.w_hi[xx]), T(tx.w_hi[xx])};
            for (int a = 0; a < 2; ++a)
              for (int b = 0; b < 2; ++b)
                for (int c = 0; c < 2; ++c)
                  f(o, in_base + (zs[a] * H + ys[b]) * W + xs[c], wz[a] * wy[b] * wx[c]);
          }
        }
      }
    }
  };

  std::vector<T> out(BC * OD * OH * OW, T(0));
  const auto& xv = x.values();
  visit([&](std::size_t o, std::size_t i, T w) { out[o] += w * xv[i]; });
  return detail::make_result<T>(Shape{s[0], s[1], OD, OH, OW}, std::move(out), {&x}, "upsample_trilinear",
                                [visit](Node<T>& self) {
                                  Node<T>* p = detail::grad_parent(self, 0);
                                  if (!p) return;
                                  auto& g = p->grad_buffer();
                                  visit([&](std::size_t o, std::size_t i, T w) { g[i] += w * self.grad[o]; });
                                });
}

template <typename T>
Tensor<T> upsample_trilinear(const Tensor<T>& x, std::size_t scale) {
  return upsample_trilinear(x, Triple{scale, scale, scale});
}

// [B,C,D,H,W] -> [B,N,C] with tokens in row-major (z,y,x) order.
template <typename T>
Tensor<T> volume_to_tokens(const Tensor<T>& x) {
  const Shape& s = x.shape();
  if (s.size() != 5) throw DimensionError("expected [B,C,D,H,W], got " + to_string(s));
  auto flat = reshape(x, {s[0], s[1], s[2] * s[3] * s[4]});
  return permute(flat, {0, 2, 1});
}

// [B,N,C] -> [B,C,D,H,W].
template <typename T>
Tensor<T> tokens_to_volume(const Tensor<T>& t, const Triple& grid) {
  const Shape& s = t.shape();
  if (s.size() != 3 || s[1] != grid[0] * grid[1] * grid[2]) {
    throw DimensionError("tokens " + to_string(s) + " do not fit grid " + to_string({grid[0], grid[1], grid[2]}));
  }
  auto chw = permute(t, {0, 2, 1});
  return reshape(chw, {s[0], s[2], grid[0], grid[1], grid[2]});
}

}  // namespace hyseg
