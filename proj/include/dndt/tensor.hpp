#pragma once

// Reverse-mode automatic differentiation on a per-graph tape. Covers exactly
// the operations the denoise+detect network and its losses need: conv2d
// (1x1/3x3, padding-preserving), instance norm, ReLU, 2x2 max pooling,
// bilinear x2 upsampling, channel concatenation, sigmoid, spatial softmax,
// window slicing and a few elementwise/reduction primitives.
//
// A Tape owns the nodes of one graph and is confined to one thread. Tensor is
// a cheap handle (tape pointer + node id). Ops are free functions that append
// nodes; backward() replays the tape in reverse.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "dndt/errors.hpp"

namespace dndt::ad {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

template <typename T>
class Tape;

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  const Shape& shape() const;
  std::size_t numel() const { return shape_numel(shape()); }
  std::span<const T> value() const;
  // Empty until backward() has run over a graph that reaches this tensor.
  std::span<const T> grad() const;
  bool requires_grad() const;

  int id() const { return id_; }
  Tape<T>* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape<T>;
  Tensor(Tape<T>* tape, int id) : tape_(tape), id_(id) {}

  Tape<T>* tape_ = nullptr;
  int id_ = -1;
};

template <typename T>
class Tape {
 public:
  using PullFn = std::function<void(Tape&, int)>;  // (tape, output node id)

  Tensor<T> leaf(Shape shape, std::span<const T> data, bool requires_grad = false) {
    check_shape(shape_numel(shape) == data.size(),
                "leaf: data length does not match shape " + shape_str(shape));
    return append(std::move(shape), std::vector<T>(data.begin(), data.end()),
                  requires_grad, nullptr);
  }

  Tensor<T> leaf(Shape shape, std::vector<T> data, bool requires_grad = false) {
    check_shape(shape_numel(shape) == data.size(),
                "leaf: data length does not match shape " + shape_str(shape));
    return append(std::move(shape), std::move(data), requires_grad, nullptr);
  }

  Tensor<T> constant(Shape shape, std::vector<T> data) {
    return leaf(std::move(shape), std::move(data), false);
  }

  Tensor<T> scalar(T v) { return constant({1}, {v}); }

  // Op-author interface: append a node whose value is already computed.
  // `pull` propagates grad(out) into the grads of the captured inputs.
  Tensor<T> node(Shape shape, std::vector<T> value,
                 std::span<const Tensor<T>> inputs, PullFn pull) {
    check_shape(shape_numel(shape) == value.size(),
                "node: value length does not match shape " + shape_str(shape));
    bool rg = false;
    for (const auto& in : inputs) {
      check_shape(in.tape() == this, "node: input from a different tape");
      rg = rg || nodes_[in.id()].requires_grad;
    }
    return append(std::move(shape), std::move(value), rg, rg ? std::move(pull) : nullptr);
  }

  Tensor<T> node(Shape shape, std::vector<T> value,
                 std::initializer_list<Tensor<T>> inputs, PullFn pull) {
    return node(std::move(shape), std::move(value),
                std::span<const Tensor<T>>(inputs.begin(), inputs.size()),
                std::move(pull));
  }

  std::size_t size() const { return nodes_.size(); }

  const Shape& shape(int id) const { return nodes_[id].shape; }
  std::span<const T> value(int id) const { return nodes_[id].value; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }

  std::span<const T> grad(int id) const { return nodes_[id].grad; }

  // Gradient accumulator for node `id`; no-op target if it needs no gradient.
  std::span<T> grad_accum(int id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return {};
    return n.grad;
  }

  // Reverse pass from a scalar root. Every node flagged as requiring
  // gradients ends up with a populated (possibly zero) grad. A second call
  // without clear_grads() is rejected.
  void backward(const Tensor<T>& root) {
    check_shape(root.tape() == this, "backward: root from a different tape");
    if (shape_numel(nodes_[root.id()].shape) != 1)
      throw NumericError("backward: root must be a scalar");
    if (backward_done_)
      throw NumericError("backward: repeated call without clear_grads()");
    backward_done_ = true;

    for (Node& n : nodes_)
      if (n.requires_grad) n.grad.assign(n.value.size(), T(0));

    Node& r = nodes_[root.id()];
    if (!r.requires_grad) return;  // constant graph, all grads stay zero
    r.grad[0] = T(1);
    for (int id = root.id(); id >= 0; --id) {
      Node& n = nodes_[id];
      if (n.requires_grad && n.pull) n.pull(*this, id);
    }
  }

  void clear_grads() {
    for (Node& n : nodes_) n.grad.clear();
    backward_done_ = false;
  }

  bool backward_done() const { return backward_done_; }

 private:
  struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    PullFn pull;
  };

  Tensor<T> append(Shape shape, std::vector<T> value, bool rg, PullFn pull) {
    Node n;
    n.shape = std::move(shape);
    n.value = std::move(value);
    n.requires_grad = rg;
    n.pull = std::move(pull);
    nodes_.push_back(std::move(n));
    return Tensor<T>(this, static_cast<int>(nodes_.size()) - 1);
  }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

template <typename T>
const Shape& Tensor<T>::shape() const { return tape_->shape(id_); }
template <typename T>
std::span<const T> Tensor<T>::value() const { return tape_->value(id_); }
template <typename T>
std::span<const T> Tensor<T>::grad() const { return tape_->grad(id_); }
template <typename T>
bool Tensor<T>::requires_grad() const { return tape_->requires_grad(id_); }

namespace detail {

template <typename T>
void require_same_tape(const Tensor<T>& a, const Tensor<T>& b) {
  check_shape(a.tape() == b.tape() && a.tape() != nullptr,
              "operands must live on the same tape");
}

inline void require_rank4(const Shape& s, const char* op) {
  check_shape(s.size() == 4, std::string(op) + ": expected a [N,C,H,W] tensor");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reduction primitives
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_tape(a, b);
  check_shape(a.shape() == b.shape(), "add: shape mismatch");
  Tape<T>& tp = *a.tape();
  std::vector<T> out(a.numel());
  auto av = a.value(), bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  const int ia = a.id(), ib = b.id();
  return tp.node(a.shape(), std::move(out), {a, b},
                 [ia, ib](Tape<T>& t, int o) {
                   auto g = t.grad(o);
                   if (auto ga = t.grad_accum(ia); !ga.empty())
                     for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                   if (auto gb = t.grad_accum(ib); !gb.empty())
                     for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                 });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_tape(a, b);
  check_shape(a.shape() == b.shape(), "sub: shape mismatch");
  Tape<T>& tp = *a.tape();
  std::vector<T> out(a.numel());
  auto av = a.value(), bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  const int ia = a.id(), ib = b.id();
  return tp.node(a.shape(), std::move(out), {a, b},
                 [ia, ib](Tape<T>& t, int o) {
                   auto g = t.grad(o);
                   if (auto ga = t.grad_accum(ia); !ga.empty())
                     for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                   if (auto gb = t.grad_accum(ib); !gb.empty())
                     for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                 });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_tape(a, b);
  check_shape(a.shape() == b.shape(), "mul: shape mismatch");
  Tape<T>& tp = *a.tape();
  std::vector<T> out(a.numel());
  auto av = a.value(), bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  const int ia = a.id(), ib = b.id();
  return tp.node(a.shape(), std::move(out), {a, b},
                 [ia, ib](Tape<T>& t, int o) {
                   auto g = t.grad(o);
                   auto av2 = t.value(ia);
                   auto bv2 = t.value(ib);
                   if (auto ga = t.grad_accum(ia); !ga.empty())
                     for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
                   if (auto gb = t.grad_accum(ib); !gb.empty())
                     for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av2[i];
                 });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  Tape<T>& tp = *a.tape();
  std::vector<T> out(a.numel());
  auto av = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
  const int ia = a.id();
  return tp.node(a.shape(), std::move(out), {a},
                 [ia, c](Tape<T>& t, int o) {
                   auto g = t.grad(o);
                   if (auto ga = t.grad_accum(ia); !ga.empty())
                     for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
                 });
}

// a + c elementwise, c a compile-time constant of the graph.
template <typename T>
Tensor<T> offset(const Tensor<T>& a, T c) {
  Tape<T>& tp = *a.tape();
  std::vector<T> out(a.numel());
  auto av = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + c;
  const int ia = a.id();
  return tp.node(a.shape(), std::move(out), {a},
                 [ia](Tape<T>& t, int o) {
                   auto g = t.grad(o);
                   if (auto ga = t.grad_accum(ia); !ga.empty())
                     for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                 });
}

// Elementwise a / b. The caller keeps denominators away from zero (losses use
// eps-protected terms); IEEE semantics apply otherwise.
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_tape(a, b);
  check_shape(a.shape() == b.shape(), "div: shape mismatch");
  Tape<T>& tp = *a.tape();
  std::vector<T> out(a.numel());
  auto av = a.value(), bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[i];
  const int ia = a.id(), ib = b.id();
  return tp.node(a.shape(), std::move(out), {a, b},
                 [ia, ib](Tape<T>& t, int o) {
                   auto g = t.grad(o);
                   auto av2 = t.value(ia);
                   auto bv2 = t.value(ib);
                   if (auto ga = t.grad_accum(ia); !ga.empty())
                     for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / bv2[i];
                   if (auto gb = t.grad_accum(ib); !gb.empty())
                     for (std::size_t i = 0; i < g.size(); ++i)
                       gb[i] -= g[i] * av2[i] / (bv2[i] * bv2[i]);
                 });
}

// sqrt(max(a, floor)); the gradient is zero in the clamped region, keeping
// distance terms finite at coincident points.
template <typename T>
Tensor<T> sqrt_clamped(const Tensor<T>& a, T floor = T(1e-12)) {
  Tape<T>& tp = *a.tape();
  std::vector<T> out(a.numel());
  auto av = a.value();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = std::sqrt(std::max(av[i], floor));
  const int ia = a.id();
  return tp.node(a.shape(), std::move(out), {a},
                 [ia, floor](Tape<T>& t, int o) {
                   auto g = t.grad(o);
                   auto av2 = t.value(ia);
                   auto y = t.value(o);
                   if (auto ga = t.grad_accum(ia); !ga.empty())
                     for (std::size_t i = 0; i < g.size(); ++i)
                       if (av2[i] > floor) ga[i] += g[i] * T(0.5) / y[i];
                 });
}

// Sum of all elements -> scalar. Accumulates in double for stability.
template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  Tape<T>& tp = *a.tape();
  double acc = 0.0;
  for (T v : a.value()) acc += static_cast<double>(v);
  const int ia = a.id();
  return tp.node({1}, {static_cast<T>(acc)}, {a},
                 [ia](Tape<T>& t, int o) {
                   const T g = t.grad(o)[0];
                   if (auto ga = t.grad_accum(ia); !ga.empty())
                     for (auto& v : ga) v += g;
                 });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  Tape<T>& tp = *a.tape();
  std::vector<T> out(a.numel());
  auto av = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > T(0) ? av[i] : T(0);
  const int ia = a.id();
  // Subgradient 0 at the kink.
  return tp.node(a.shape(), std::move(out), {a},
                 [ia](Tape<T>& t, int o) {
                   auto g = t.grad(o);
                   auto av2 = t.value(ia);
                   if (auto ga = t.grad_accum(ia); !ga.empty())
                     for (std::size_t i = 0; i < g.size(); ++i)
                       if (av2[i] > T(0)) ga[i] += g[i];
                 });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  Tape<T>& tp = *a.tape();
  std::vector<T> out(a.numel());
  auto av = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = av[i];
    if (x >= T(0)) {
      out[i] = T(1) / (T(1) + std::exp(-x));
    } else {
      const T e = std::exp(x);
      out[i] = e / (T(1) + e);
    }
  }
  const int ia = a.id();
  return tp.node(a.shape(), std::move(out), {a},
                 [ia](Tape<T>& t, int o) {
                   auto g = t.grad(o);
                   auto y = t.value(o);
                   if (auto ga = t.grad_accum(ia); !ga.empty())
                     for (std::size_t i = 0; i < g.size(); ++i)
                       ga[i] += g[i] * y[i] * (T(1) - y[i]);
                 });
}

// ---------------------------------------------------------------------------
// conv2d: cross-correlation with bias, k in {1,3}, spatial size preserved
// (3x3 uses zero padding 1). input [N,Cin,H,W], weight [Cout,Cin,k,k],
// bias [Cout] -> [N,Cout,H,W].
// ---------------------------------------------------------------------------

namespace detail {

// out_plane[y,x] += wv * in_plane[y+dy, x+dx] over the valid overlap.
template <typename T>
inline void shifted_axpy(T* out_plane, const T* in_plane, T wv, int H, int W,
                         int dy, int dx) {
  const int y0 = std::max(0, -dy), y1 = std::min(H, H - dy);
  const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
  if (x1 <= x0) return;
  const int len = x1 - x0;
  for (int y = y0; y < y1; ++y) {
    T* dst = out_plane + static_cast<std::size_t>(y) * W + x0;
    const T* src = in_plane + static_cast<std::size_t>(y + dy) * W + (x0 + dx);
    for (int i = 0; i < len; ++i) dst[i] += wv * src[i];
  }
}

// sum over valid overlap of a_plane[y,x] * b_plane[y+dy, x+dx].
template <typename T>
inline double shifted_dot(const T* a_plane, const T* b_plane, int H, int W,
                          int dy, int dx) {
  const int y0 = std::max(0, -dy), y1 = std::min(H, H - dy);
  const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
  if (x1 <= x0) return 0.0;
  const int len = x1 - x0;
  double acc = 0.0;
  for (int y = y0; y < y1; ++y) {
    const T* pa = a_plane + static_cast<std::size_t>(y) * W + x0;
    const T* pb = b_plane + static_cast<std::size_t>(y + dy) * W + (x0 + dx);
    T partial = T(0);
    for (int i = 0; i < len; ++i) partial += pa[i] * pb[i];
    acc += static_cast<double>(partial);
  }
  return acc;
}

}  // namespace detail

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias, int k) {
  detail::require_same_tape(input, weight);
  detail::require_same_tape(input, bias);
  check_shape(k == 1 || k == 3, "conv2d: kernel size must be 1 or 3");
  detail::require_rank4(input.shape(), "conv2d");
  const Shape& is = input.shape();
  const Shape& ws = weight.shape();
  check_shape(ws.size() == 4 && ws[2] == k && ws[3] == k,
              "conv2d: weight must be [Cout,Cin," + std::to_string(k) + "," +
                  std::to_string(k) + "], got " + shape_str(ws));
  check_shape(ws[1] == is[1], "conv2d: Cin mismatch between input " +
                                  shape_str(is) + " and weight " + shape_str(ws));
  check_shape(bias.shape() == Shape{ws[0]}, "conv2d: bias must be [Cout]");

  const int N = is[0], Cin = is[1], H = is[2], W = is[3], Cout = ws[0];
  const int pad = (k == 3) ? 1 : 0;
  const std::size_t hw = static_cast<std::size_t>(H) * W;

  std::vector<T> out(static_cast<std::size_t>(N) * Cout * hw);
  const T* x = input.value().data();
  const T* w = weight.value().data();
  const T* b = bias.value().data();
  for (int n = 0; n < N; ++n) {
    for (int co = 0; co < Cout; ++co) {
      T* op = out.data() + (static_cast<std::size_t>(n) * Cout + co) * hw;
      std::fill(op, op + hw, b[co]);
      for (int ci = 0; ci < Cin; ++ci) {
        const T* ip = x + (static_cast<std::size_t>(n) * Cin + ci) * hw;
        const T* wp = w + (static_cast<std::size_t>(co) * Cin + ci) * k * k;
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx)
            detail::shifted_axpy(op, ip, wp[ky * k + kx], H, W, ky - pad, kx - pad);
      }
    }
  }

  const int ii = input.id(), iw = weight.id(), ib = bias.id();
  return input.tape()->node(
      {N, Cout, H, W}, std::move(out), {input, weight, bias},
      [ii, iw, ib, N, Cin, Cout, H, W, k, pad, hw](Tape<T>& t, int o) {
        const T* go = t.grad(o).data();
        const T* x2 = t.value(ii).data();
        const T* w2 = t.value(iw).data();
        if (auto gb = t.grad_accum(ib); !gb.empty()) {
          for (int n = 0; n < N; ++n)
            for (int co = 0; co < Cout; ++co) {
              const T* gp = go + (static_cast<std::size_t>(n) * Cout + co) * hw;
              double acc = 0.0;
              for (std::size_t i = 0; i < hw; ++i) acc += static_cast<double>(gp[i]);
              gb[co] += static_cast<T>(acc);
            }
        }
        if (auto gw = t.grad_accum(iw); !gw.empty()) {
          for (int n = 0; n < N; ++n)
            for (int co = 0; co < Cout; ++co) {
              const T* gp = go + (static_cast<std::size_t>(n) * Cout + co) * hw;
              for (int ci = 0; ci < Cin; ++ci) {
                const T* ip = x2 + (static_cast<std::size_t>(n) * Cin + ci) * hw;
                T* gwp = gw.data() + (static_cast<std::size_t>(co) * Cin + ci) * k * k;
                for (int ky = 0; ky < k; ++ky)
                  for (int kx = 0; kx < k; ++kx)
                    gwp[ky * k + kx] += static_cast<T>(
                        detail::shifted_dot(gp, ip, H, W, ky - pad, kx - pad));
              }
            }
        }
        if (auto gx = t.grad_accum(ii); !gx.empty()) {
          for (int n = 0; n < N; ++n)
            for (int co = 0; co < Cout; ++co) {
              const T* gp = go + (static_cast<std::size_t>(n) * Cout + co) * hw;
              for (int ci = 0; ci < Cin; ++ci) {
                T* gxp = gx.data() + (static_cast<std::size_t>(n) * Cin + ci) * hw;
                const T* wp = w2 + (static_cast<std::size_t>(co) * Cin + ci) * k * k;
                // transpose of the forward shift: scatter with flipped offsets
                for (int ky = 0; ky < k; ++ky)
                  for (int kx = 0; kx < k; ++kx)
                    detail::shifted_axpy(gxp, gp, wp[ky * k + kx], H, W,
                                         pad - ky, pad - kx);
              }
            }
        }
      });
}

// ---------------------------------------------------------------------------
// instance_norm: per (sample, channel) spatial standardization + affine.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> instance_norm(const Tensor<T>& input, const Tensor<T>& scale_t,
                        const Tensor<T>& shift_t, T eps = T(1e-5)) {
  detail::require_same_tape(input, scale_t);
  detail::require_same_tape(input, shift_t);
  detail::require_rank4(input.shape(), "instance_norm");
  const Shape& is = input.shape();
  const int N = is[0], C = is[1], H = is[2], W = is[3];
  check_shape(scale_t.shape() == Shape{C} && shift_t.shape() == Shape{C},
              "instance_norm: scale/shift must be [C]");
  check_shape(static_cast<std::size_t>(H) * W >= 2, "instance_norm: needs H*W >= 2");
  if (!(eps > T(0))) throw NumericError("instance_norm: eps must be > 0");

  const std::size_t hw = static_cast<std::size_t>(H) * W;
  std::vector<T> out(input.numel());
  std::vector<T> mean_saved(static_cast<std::size_t>(N) * C);
  std::vector<T> invstd_saved(static_cast<std::size_t>(N) * C);

  const T* x = input.value().data();
  const T* ga = scale_t.value().data();
  const T* be = shift_t.value().data();
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const std::size_t base = (static_cast<std::size_t>(n) * C + c) * hw;
      double m = 0.0;
      for (std::size_t i = 0; i < hw; ++i) m += static_cast<double>(x[base + i]);
      m /= static_cast<double>(hw);
      double var = 0.0;
      for (std::size_t i = 0; i < hw; ++i) {
        const double d = static_cast<double>(x[base + i]) - m;
        var += d * d;
      }
      var /= static_cast<double>(hw);
      const T mean = static_cast<T>(m);
      const T invstd = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
      mean_saved[static_cast<std::size_t>(n) * C + c] = mean;
      invstd_saved[static_cast<std::size_t>(n) * C + c] = invstd;
      const T g = ga[c], b = be[c];
      for (std::size_t i = 0; i < hw; ++i)
        out[base + i] = (x[base + i] - mean) * invstd * g + b;
    }

  const int ii = input.id(), isc = scale_t.id(), ish = shift_t.id();
  return input.tape()->node(
      is, std::move(out), {input, scale_t, shift_t},
      [ii, isc, ish, N, C, hw, mean_saved = std::move(mean_saved),
       invstd_saved = std::move(invstd_saved)](Tape<T>& t, int o) {
        const T* go = t.grad(o).data();
        const T* x2 = t.value(ii).data();
        const T* ga2 = t.value(isc).data();
        auto gx = t.grad_accum(ii);
        auto gs = t.grad_accum(isc);
        auto gb = t.grad_accum(ish);
        for (int n = 0; n < N; ++n)
          for (int c = 0; c < C; ++c) {
            const std::size_t nc = static_cast<std::size_t>(n) * C + c;
            const std::size_t base = nc * hw;
            const T mean = mean_saved[nc];
            const T invstd = invstd_saved[nc];
            double sum_g = 0.0, sum_gx = 0.0;
            for (std::size_t i = 0; i < hw; ++i) {
              const double xh = static_cast<double>((x2[base + i] - mean) * invstd);
              const double g = static_cast<double>(go[base + i]);
              sum_g += g;
              sum_gx += g * xh;
            }
            if (!gb.empty()) gb[c] += static_cast<T>(sum_g);
            if (!gs.empty()) gs[c] += static_cast<T>(sum_gx);
            if (!gx.empty()) {
              const double mg = sum_g / static_cast<double>(hw);
              const double mgx = sum_gx / static_cast<double>(hw);
              const T a = ga2[c] * invstd;
              for (std::size_t i = 0; i < hw; ++i) {
                const T xh = (x2[base + i] - mean) * invstd;
                gx[base + i] += a * (go[base + i] - static_cast<T>(mg) -
                                     xh * static_cast<T>(mgx));
              }
            }
          }
      });
}

// ---------------------------------------------------------------------------
// maxpool2: 2x2 blocks, stride 2. Gradient goes to the argmax; ties break to
// the first element in row-major scan order.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> maxpool2(const Tensor<T>& input) {
  detail::require_rank4(input.shape(), "maxpool2");
  const Shape& is = input.shape();
  const int N = is[0], C = is[1], H = is[2], W = is[3];
  check_shape(H % 2 == 0 && W % 2 == 0, "maxpool2: H and W must be even, got " +
                                            shape_str(is));
  const int Ho = H / 2, Wo = W / 2;
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  const std::size_t hwo = static_cast<std::size_t>(Ho) * Wo;

  std::vector<T> out(static_cast<std::size_t>(N) * C * hwo);
  std::vector<std::int32_t> argmax(out.size());
  const T* x = input.value().data();
  for (int nc = 0; nc < N * C; ++nc) {
    const T* ip = x + static_cast<std::size_t>(nc) * hw;
    T* op = out.data() + static_cast<std::size_t>(nc) * hwo;
    std::int32_t* ap = argmax.data() + static_cast<std::size_t>(nc) * hwo;
    for (int i = 0; i < Ho; ++i)
      for (int j = 0; j < Wo; ++j) {
        const int y = 2 * i, xcol = 2 * j;
        const std::int32_t idx[4] = {
            y * W + xcol, y * W + xcol + 1, (y + 1) * W + xcol, (y + 1) * W + xcol + 1};
        std::int32_t best = idx[0];
        T bv = ip[idx[0]];
        for (int q = 1; q < 4; ++q)
          if (ip[idx[q]] > bv) {  // strict: first occurrence wins ties
            bv = ip[idx[q]];
            best = idx[q];
          }
        op[i * Wo + j] = bv;
        ap[i * Wo + j] = best;
      }
  }

  const int ii = input.id();
  return input.tape()->node(
      {N, C, Ho, Wo}, std::move(out), {input},
      [ii, N, C, hw, hwo, argmax = std::move(argmax)](Tape<T>& t, int o) {
        auto gx = t.grad_accum(ii);
        if (gx.empty()) return;
        const T* go = t.grad(o).data();
        for (int nc = 0; nc < N * C; ++nc) {
          T* gp = gx.data() + static_cast<std::size_t>(nc) * hw;
          const T* gop = go + static_cast<std::size_t>(nc) * hwo;
          const std::int32_t* ap = argmax.data() + static_cast<std::size_t>(nc) * hwo;
          for (std::size_t i = 0; i < hwo; ++i) gp[ap[i]] += gop[i];
        }
      });
}

// ---------------------------------------------------------------------------
// upsample_bilinear2: x2 with half-pixel centers, clamped at borders.
// ---------------------------------------------------------------------------

namespace detail {

struct LerpAxis {
  std::vector<int> i0, i1;
  std::vector<float> f;  // weight of i1
};

inline LerpAxis lerp_axis_x2(int in, int out) {
  LerpAxis a;
  a.i0.resize(out);
  a.i1.resize(out);
  a.f.resize(out);
  for (int i = 0; i < out; ++i) {
    double src = (i + 0.5) / 2.0 - 0.5;
    if (src < 0.0) src = 0.0;
    if (src > in - 1) src = in - 1;
    int lo = static_cast<int>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    a.i0[i] = lo;
    a.i1[i] = std::min(lo + 1, in - 1);
    a.f[i] = static_cast<float>(src - lo);
  }
  return a;
}

}  // namespace detail

template <typename T>
Tensor<T> upsample_bilinear2(const Tensor<T>& input) {
  detail::require_rank4(input.shape(), "upsample_bilinear2");
  const Shape& is = input.shape();
  const int N = is[0], C = is[1], H = is[2], W = is[3];
  const int Ho = 2 * H, Wo = 2 * W;
  const auto ay = detail::lerp_axis_x2(H, Ho);
  const auto ax = detail::lerp_axis_x2(W, Wo);
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  const std::size_t hwo = static_cast<std::size_t>(Ho) * Wo;

  std::vector<T> out(static_cast<std::size_t>(N) * C * hwo);
  const T* x = input.value().data();
  for (int nc = 0; nc < N * C; ++nc) {
    const T* ip = x + static_cast<std::size_t>(nc) * hw;
    T* op = out.data() + static_cast<std::size_t>(nc) * hwo;
    for (int i = 0; i < Ho; ++i) {
      const T fy = static_cast<T>(ay.f[i]);
      const T* r0 = ip + static_cast<std::size_t>(ay.i0[i]) * W;
      const T* r1 = ip + static_cast<std::size_t>(ay.i1[i]) * W;
      T* orow = op + static_cast<std::size_t>(i) * Wo;
      for (int j = 0; j < Wo; ++j) {
        const T fx = static_cast<T>(ax.f[j]);
        const int j0 = ax.i0[j], j1 = ax.i1[j];
        const T top = r0[j0] + fx * (r0[j1] - r0[j0]);
        const T bot = r1[j0] + fx * (r1[j1] - r1[j0]);
        orow[j] = top + fy * (bot - top);
      }
    }
  }

  const int ii = input.id();
  return input.tape()->node(
      {N, C, Ho, Wo}, std::move(out), {input},
      [ii, N, C, H, W, Ho, Wo, hw, hwo, ay, ax](Tape<T>& t, int o) {
        auto gx = t.grad_accum(ii);
        if (gx.empty()) return;
        const T* go = t.grad(o).data();
        for (int nc = 0; nc < N * C; ++nc) {
          T* gp = gx.data() + static_cast<std::size_t>(nc) * hw;
          const T* gop = go + static_cast<std::size_t>(nc) * hwo;
          for (int i = 0; i < Ho; ++i) {
            const T fy = static_cast<T>(ay.f[i]);
            T* g0 = gp + static_cast<std::size_t>(ay.i0[i]) * W;
            T* g1 = gp + static_cast<std::size_t>(ay.i1[i]) * W;
            const T* grow = gop + static_cast<std::size_t>(i) * Wo;
            for (int j = 0; j < Wo; ++j) {
              const T fx = static_cast<T>(ax.f[j]);
              const int j0 = ax.i0[j], j1 = ax.i1[j];
              const T g = grow[j];
              g0[j0] += g * (T(1) - fy) * (T(1) - fx);
              g0[j1] += g * (T(1) - fy) * fx;
              g1[j0] += g * fy * (T(1) - fx);
              g1[j1] += g * fy * fx;
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// concat_channels: stack along C in argument order.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& inputs) {
  check_shape(!inputs.empty(), "concat_channels: no inputs");
  const Shape& s0 = inputs[0].shape();
  detail::require_rank4(s0, "concat_channels");
  const int N = s0[0], H = s0[2], W = s0[3];
  int Ctot = 0;
  for (const auto& in : inputs) {
    detail::require_same_tape(inputs[0], in);
    const Shape& s = in.shape();
    detail::require_rank4(s, "concat_channels");
    check_shape(s[0] == N && s[2] == H && s[3] == W,
                "concat_channels: spatial/batch mismatch: " + shape_str(s0) +
                    " vs " + shape_str(s));
    Ctot += s[1];
  }
  const std::size_t hw = static_cast<std::size_t>(H) * W;

  std::vector<T> out(static_cast<std::size_t>(N) * Ctot * hw);
  std::vector<int> ids, chans;
  for (const auto& in : inputs) {
    ids.push_back(in.id());
    chans.push_back(in.shape()[1]);
  }
  for (int n = 0; n < N; ++n) {
    std::size_t coff = 0;
    for (std::size_t q = 0; q < inputs.size(); ++q) {
      const int Ci = chans[q];
      const T* src = inputs[q].value().data() + static_cast<std::size_t>(n) * Ci * hw;
      T* dst = out.data() + (static_cast<std::size_t>(n) * Ctot + coff) * hw;
      std::copy(src, src + static_cast<std::size_t>(Ci) * hw, dst);
      coff += static_cast<std::size_t>(Ci);
    }
  }

  Tape<T>& tp = *inputs[0].tape();
  return tp.node(
      {N, Ctot, H, W}, std::move(out),
      std::span<const Tensor<T>>(inputs.data(), inputs.size()),
      [ids, chans, N, Ctot, hw](Tape<T>& t, int o) {
        const T* go = t.grad(o).data();
        for (int n = 0; n < N; ++n) {
          std::size_t coff = 0;
          for (std::size_t q = 0; q < ids.size(); ++q) {
            const int Ci = chans[q];
            const T* src = go + (static_cast<std::size_t>(n) * Ctot + coff) * hw;
            if (auto g = t.grad_accum(ids[q]); !g.empty()) {
              T* dst = g.data() + static_cast<std::size_t>(n) * Ci * hw;
              for (std::size_t i = 0; i < static_cast<std::size_t>(Ci) * hw; ++i)
                dst[i] += src[i];
            }
            coff += static_cast<std::size_t>(Ci);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// softmax2d: per leading index over the trailing H x W slice.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax2d(const Tensor<T>& input) {
  const Shape& is = input.shape();
  check_shape(is.size() >= 2, "softmax2d: needs at least [H,W]");
  const int H = is[is.size() - 2], W = is[is.size() - 1];
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  const std::size_t lead = input.numel() / hw;

  std::vector<T> out(input.numel());
  const T* x = input.value().data();
  for (std::size_t s = 0; s < lead; ++s) {
    const T* ip = x + s * hw;
    T* op = out.data() + s * hw;
    T m = ip[0];
    for (std::size_t i = 1; i < hw; ++i) m = std::max(m, ip[i]);
    double z = 0.0;
    for (std::size_t i = 0; i < hw; ++i) {
      op[i] = std::exp(ip[i] - m);
      z += static_cast<double>(op[i]);
    }
    const T inv = static_cast<T>(1.0 / z);
    for (std::size_t i = 0; i < hw; ++i) op[i] *= inv;
  }

  const int ii = input.id();
  return input.tape()->node(
      is, std::move(out), {input},
      [ii, lead, hw](Tape<T>& t, int o) {
        auto gx = t.grad_accum(ii);
        if (gx.empty()) return;
        const T* go = t.grad(o).data();
        const T* y = t.value(o).data();
        for (std::size_t s = 0; s < lead; ++s) {
          const T* gp = go + s * hw;
          const T* yp = y + s * hw;
          T* gxp = gx.data() + s * hw;
          double dot = 0.0;
          for (std::size_t i = 0; i < hw; ++i)
            dot += static_cast<double>(gp[i]) * static_cast<double>(yp[i]);
          const T d = static_cast<T>(dot);
          for (std::size_t i = 0; i < hw; ++i) gxp[i] += yp[i] * (gp[i] - d);
        }
      });
}

// ---------------------------------------------------------------------------
// slice_window: K x K window of a [1,1,H,W] (or [H,W]) map, top-left origin
// (row0, col0). Gradient scatters back into the source region.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> slice_window(const Tensor<T>& map, int row0, int col0, int K) {
  const Shape& s = map.shape();
  int H = 0, W = 0;
  if (s.size() == 4) {
    check_shape(s[0] == 1 && s[1] == 1, "slice_window: map must be [1,1,H,W]");
    H = s[2];
    W = s[3];
  } else if (s.size() == 2) {
    H = s[0];
    W = s[1];
  } else {
    throw ShapeError("slice_window: map must be rank 2 or [1,1,H,W]");
  }
  check_shape(K >= 1 && row0 >= 0 && col0 >= 0 && row0 + K <= H && col0 + K <= W,
              "slice_window: window out of bounds");

  std::vector<T> out(static_cast<std::size_t>(K) * K);
  const T* x = map.value().data();
  for (int i = 0; i < K; ++i)
    for (int j = 0; j < K; ++j)
      out[static_cast<std::size_t>(i) * K + j] =
          x[static_cast<std::size_t>(row0 + i) * W + (col0 + j)];

  const int im = map.id();
  return map.tape()->node(
      {K, K}, std::move(out), {map},
      [im, row0, col0, K, W](Tape<T>& t, int o) {
        auto g = t.grad_accum(im);
        if (g.empty()) return;
        const T* go = t.grad(o).data();
        for (int i = 0; i < K; ++i)
          for (int j = 0; j < K; ++j)
            g[static_cast<std::size_t>(row0 + i) * W + (col0 + j)] +=
                go[static_cast<std::size_t>(i) * K + j];
      });
}

}  // namespace dndt::ad
