#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <limits>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "fewdet/errors.hpp"

namespace fewdet {

// Reverse-mode autodiff over small dense tensors. Single-threaded graph
// construction per training step; values are immutable once produced, so
// finished tensors can be shared read-only across threads.
//
// Layout is row-major. Common shapes: {C} vectors, {C,R} column matrices
// (one RoI feature per column), {C,H,W} feature maps, {O,I,Kh,Kw} conv
// weights. A scalar is shape {1}.

namespace detail {
inline int& grad_mode_depth() {
  thread_local int depth = 0;
  return depth;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_depth() == 0; }

// RAII guard: disables graph construction (inference mode).
struct NoGradGuard {
  NoGradGuard() { ++detail::grad_mode_depth(); }
  ~NoGradGuard() { --detail::grad_mode_depth(); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename T>
struct Node {
  std::vector<int> shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated on demand, same numel as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> backward;

  std::int64_t numel() const {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
  }
  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value.assign(static_cast<std::size_t>(n->numel()), T(0));
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor full(std::vector<int> shape, T fill, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.node_->value.begin(), t.node_->value.end(), fill);
    return t;
  }

  static Tensor from_data(std::vector<int> shape, std::vector<T> data, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    if (static_cast<std::int64_t>(data.size()) != n->numel())
      throw dimension_error("from_data: size does not match shape");
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(T v) { return from_data({1}, {v}); }

  bool valid() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  std::int64_t numel() const { return node_->numel(); }
  int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }

  std::vector<T>& value() { return node_->value; }
  const std::vector<T>& value() const { return node_->value; }
  T* data() { return node_->value.data(); }
  const T* data() const { return node_->value.data(); }
  T item() const {
    if (node_->numel() != 1) throw dimension_error("item() on non-scalar tensor");
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }
  std::vector<T>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  std::shared_ptr<Node<T>> node() const { return node_; }

  // Reverse-mode sweep from this (scalar) tensor.
  void backward() const {
    if (node_->numel() != 1) throw dimension_error("backward() requires a scalar root");
    // Iterative post-order DFS to get a topological order.
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.push_back({node_.get(), 0});
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        Node<T>* p = n->parents[next++].get();
        if (p->requires_grad && !seen.count(p)) {
          seen.insert(p);
          stack.push_back({p, 0});
        }
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    node_->ensure_grad();
    node_->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* n = *it;
      if (n->backward && n->requires_grad) n->backward(*n);
    }
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <typename T>
Tensor<T> make_op(std::vector<int> shape, std::vector<T> value,
                  std::vector<std::shared_ptr<Node<T>>> parents,
                  std::function<void(Node<T>&)> backward) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (grad_enabled()) {
    bool any = false;
    for (const auto& p : parents)
      if (p->requires_grad) any = true;
    if (any) {
      n->requires_grad = true;
      n->parents = std::move(parents);
      n->backward = std::move(backward);
    }
  }
  return Tensor<T>(std::move(n));
}

inline std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw dimension_error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.value().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return detail::make_op<T>(a.shape(), std::move(out), {a.node(), b.node()}, [](Node<T>& self) {
    for (int k = 0; k < 2; ++k) {
      auto& p = self.parents[static_cast<std::size_t>(k)];
      if (!p->requires_grad) continue;
      p->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> out(a.value().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return detail::make_op<T>(a.shape(), std::move(out), {a.node(), b.node()}, [](Node<T>& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] -= self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.value().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return detail::make_op<T>(a.shape(), std::move(out), {a.node(), b.node()}, [](Node<T>& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] += self.grad[i] * pa->value[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.value().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
  return detail::make_op<T>(a.shape(), std::move(out), {a.node()}, [s](Node<T>& self) {
    auto& p = self.parents[0];
    p->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i] * s;
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out(a.value().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] > T(0) ? a.data()[i] : T(0);
  return detail::make_op<T>(a.shape(), std::move(out), {a.node()}, [](Node<T>& self) {
    auto& p = self.parents[0];
    p->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (p->value[i] > T(0)) p->grad[i] += self.grad[i];
  });
}

// Elementwise logistic; outputs are strictly inside (0,1) for finite inputs.
// Saturated values are nudged off the interval endpoints so the open-range
// guarantee survives rounding.
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  constexpr T kHi = T(1) - std::numeric_limits<T>::epsilon() / 2;
  constexpr T kLo = std::numeric_limits<T>::min();
  std::vector<T> out(a.value().size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = a.data()[i];
    const T y = x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
    out[i] = std::min(std::max(y, kLo), kHi);
  }
  return detail::make_op<T>(a.shape(), std::move(out), {a.node()}, [](Node<T>& self) {
    auto& p = self.parents[0];
    p->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const T y = self.value[i];
      p->grad[i] += self.grad[i] * y * (T(1) - y);
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

// y = W x + b. W is {out,in}; x is {in} or {in,R} (b broadcast over columns).
template <typename T>
Tensor<T> linear(const Tensor<T>& W, const Tensor<T>& x, const Tensor<T>& b) {
  const int out_dim = W.dim(0), in_dim = W.dim(1);
  const bool is_mat = x.shape().size() == 2;
  const int R = is_mat ? x.dim(1) : 1;
  if (x.dim(0) != in_dim)
    throw dimension_error("linear: input dim " + std::to_string(x.dim(0)) + " vs weight in-dim " +
                          std::to_string(in_dim));
  if (b.valid() && b.dim(0) != out_dim) throw dimension_error("linear: bias dim mismatch");
  std::vector<T> out(static_cast<std::size_t>(out_dim) * R, T(0));
  const T* wd = W.data();
  const T* xd = x.data();
  for (int o = 0; o < out_dim; ++o) {
    T* orow = out.data() + static_cast<std::size_t>(o) * R;
    if (b.valid())
      for (int r = 0; r < R; ++r) orow[r] = b.data()[o];
    const T* wrow = wd + static_cast<std::size_t>(o) * in_dim;
    for (int i = 0; i < in_dim; ++i) {
      const T w = wrow[i];
      const T* xrow = xd + static_cast<std::size_t>(i) * R;
      for (int r = 0; r < R; ++r) orow[r] += w * xrow[r];
    }
  }
  std::vector<int> oshape = is_mat ? std::vector<int>{out_dim, R} : std::vector<int>{out_dim};
  std::vector<std::shared_ptr<Node<T>>> parents = {W.node(), x.node()};
  if (b.valid()) parents.push_back(b.node());
  return detail::make_op<T>(std::move(oshape), std::move(out), std::move(parents),
                            [out_dim, in_dim, R](Node<T>& self) {
                              auto& Wn = self.parents[0];
                              auto& xn = self.parents[1];
                              if (Wn->requires_grad) {
                                Wn->ensure_grad();
                                for (int o = 0; o < out_dim; ++o)
                                  for (int i = 0; i < in_dim; ++i) {
                                    T acc = T(0);
                                    const T* g = self.grad.data() + static_cast<std::size_t>(o) * R;
                                    const T* xv = xn->value.data() + static_cast<std::size_t>(i) * R;
                                    for (int r = 0; r < R; ++r) acc += g[r] * xv[r];
                                    Wn->grad[static_cast<std::size_t>(o) * in_dim + i] += acc;
                                  }
                              }
                              if (xn->requires_grad) {
                                xn->ensure_grad();
                                for (int o = 0; o < out_dim; ++o) {
                                  const T* g = self.grad.data() + static_cast<std::size_t>(o) * R;
                                  const T* wrow = Wn->value.data() + static_cast<std::size_t>(o) * in_dim;
                                  for (int i = 0; i < in_dim; ++i) {
                                    T* xg = xn->grad.data() + static_cast<std::size_t>(i) * R;
                                    const T w = wrow[i];
                                    for (int r = 0; r < R; ++r) xg[r] += w * g[r];
                                  }
                                }
                              }
                              if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
                                auto& bn = self.parents[2];
                                bn->ensure_grad();
                                for (int o = 0; o < out_dim; ++o) {
                                  const T* g = self.grad.data() + static_cast<std::size_t>(o) * R;
                                  for (int r = 0; r < R; ++r) bn->grad[static_cast<std::size_t>(o)] += g[r];
                                }
                              }
                            });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& W, const Tensor<T>& x) {
  return linear(W, x, Tensor<T>());
}

// ---------------------------------------------------------------------------
// Convolution / pooling

// x {Cin,H,W} * w {Cout,Cin,Kh,Kw} + b {Cout} -> {Cout,Ho,Wo}.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride, int pad) {
  const int cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != cin)
    throw dimension_error("conv2d: input channels " + std::to_string(cin) + " vs weight " +
                          std::to_string(w.dim(1)));
  const int ho = (h + 2 * pad - kh) / stride + 1;
  const int wo = (wd + 2 * pad - kw) / stride + 1;
  if (ho <= 0 || wo <= 0) throw dimension_error("conv2d: empty output");
  std::vector<T> out(static_cast<std::size_t>(cout) * ho * wo, T(0));
  const T* xd = x.data();
  const T* wv = w.data();
  // Valid output ranges per kernel tap, hoisted out of the inner loops.
  auto ox_range = [&](int kx, int& lo, int& hi) {
    lo = std::max(0, (pad - kx + stride - 1) / stride);
    hi = std::min(wo, (wd - 1 - kx + pad) / stride + 1);
  };
  auto oy_range = [&](int ky, int& lo, int& hi) {
    lo = std::max(0, (pad - ky + stride - 1) / stride);
    hi = std::min(ho, (h - 1 - ky + pad) / stride + 1);
  };
  for (int co = 0; co < cout; ++co) {
    T* oplane = out.data() + static_cast<std::size_t>(co) * ho * wo;
    if (b.valid()) {
      const T bv = b.data()[co];
      for (int i = 0; i < ho * wo; ++i) oplane[i] = bv;
    }
    for (int ci = 0; ci < cin; ++ci) {
      const T* xplane = xd + static_cast<std::size_t>(ci) * h * wd;
      const T* wk = wv + ((static_cast<std::size_t>(co) * cin + ci) * kh) * kw;
      for (int ky = 0; ky < kh; ++ky) {
        int oy_lo, oy_hi;
        oy_range(ky, oy_lo, oy_hi);
        for (int kx = 0; kx < kw; ++kx) {
          const T wval = wk[ky * kw + kx];
          int ox_lo, ox_hi;
          ox_range(kx, ox_lo, ox_hi);
          for (int oy = oy_lo; oy < oy_hi; ++oy) {
            const int iy = oy * stride - pad + ky;
            const T* xrow = xplane + static_cast<std::size_t>(iy) * wd - pad + kx;
            T* orow = oplane + static_cast<std::size_t>(oy) * wo;
            if (stride == 1) {
              for (int ox = ox_lo; ox < ox_hi; ++ox) orow[ox] += wval * xrow[ox];
            } else {
              for (int ox = ox_lo; ox < ox_hi; ++ox) orow[ox] += wval * xrow[ox * stride];
            }
          }
        }
      }
    }
  }
  std::vector<std::shared_ptr<Node<T>>> parents = {x.node(), w.node()};
  if (b.valid()) parents.push_back(b.node());
  return detail::make_op<T>(
      {cout, ho, wo}, std::move(out), std::move(parents),
      [cin, h, wd, cout, kh, kw, stride, pad, ho, wo](Node<T>& self) {
        auto& xn = self.parents[0];
        auto& wn = self.parents[1];
        const bool gx = xn->requires_grad, gw = wn->requires_grad;
        if (gx) xn->ensure_grad();
        if (gw) wn->ensure_grad();
        for (int co = 0; co < cout; ++co) {
          const T* gplane = self.grad.data() + static_cast<std::size_t>(co) * ho * wo;
          for (int ci = 0; ci < cin; ++ci) {
            const T* xplane = xn->value.data() + static_cast<std::size_t>(ci) * h * wd;
            T* xgplane = gx ? xn->grad.data() + static_cast<std::size_t>(ci) * h * wd : nullptr;
            const std::size_t wbase = ((static_cast<std::size_t>(co) * cin + ci) * kh) * kw;
            for (int ky = 0; ky < kh; ++ky) {
              const int oy_lo = std::max(0, (pad - ky + stride - 1) / stride);
              const int oy_hi = std::min(ho, (h - 1 - ky + pad) / stride + 1);
              for (int kx = 0; kx < kw; ++kx) {
                const T wval = wn->value[wbase + static_cast<std::size_t>(ky) * kw + kx];
                const int ox_lo = std::max(0, (pad - kx + stride - 1) / stride);
                const int ox_hi = std::min(wo, (wd - 1 - kx + pad) / stride + 1);
                T wgrad = T(0);
                for (int oy = oy_lo; oy < oy_hi; ++oy) {
                  const int iy = oy * stride - pad + ky;
                  const T* grow = gplane + static_cast<std::size_t>(oy) * wo;
                  const T* xrow = xplane + static_cast<std::size_t>(iy) * wd - pad + kx;
                  T* xgrow = gx ? xgplane + static_cast<std::size_t>(iy) * wd - pad + kx : nullptr;
                  if (gw && gx) {
                    for (int ox = ox_lo; ox < ox_hi; ++ox) {
                      const T g = grow[ox];
                      wgrad += g * xrow[ox * stride];
                      xgrow[ox * stride] += g * wval;
                    }
                  } else if (gw) {
                    for (int ox = ox_lo; ox < ox_hi; ++ox) wgrad += grow[ox] * xrow[ox * stride];
                  } else {
                    for (int ox = ox_lo; ox < ox_hi; ++ox) xgrow[ox * stride] += grow[ox] * wval;
                  }
                }
                if (gw) wn->grad[wbase + static_cast<std::size_t>(ky) * kw + kx] += wgrad;
              }
            }
          }
        }
        if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
          auto& bn = self.parents[2];
          bn->ensure_grad();
          for (int co = 0; co < cout; ++co) {
            const T* gplane = self.grad.data() + static_cast<std::size_t>(co) * ho * wo;
            T acc = T(0);
            for (int i = 0; i < ho * wo; ++i) acc += gplane[i];
            bn->grad[static_cast<std::size_t>(co)] += acc;
          }
        }
      });
}

template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, int k, int stride) {
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int ho = (h - k) / stride + 1, wo = (w - k) / stride + 1;
  if (ho <= 0 || wo <= 0) throw dimension_error("max_pool2d: empty output");
  std::vector<T> out(static_cast<std::size_t>(c) * ho * wo);
  std::vector<int> argmax(out.size());
  for (int ci = 0; ci < c; ++ci) {
    const T* plane = x.data() + static_cast<std::size_t>(ci) * h * w;
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        T best = plane[static_cast<std::size_t>(oy * stride) * w + ox * stride];
        int bi = oy * stride * w + ox * stride;
        for (int dy = 0; dy < k; ++dy)
          for (int dx = 0; dx < k; ++dx) {
            const int idx = (oy * stride + dy) * w + ox * stride + dx;
            if (plane[idx] > best) {
              best = plane[idx];
              bi = idx;
            }
          }
        const std::size_t o = (static_cast<std::size_t>(ci) * ho + oy) * wo + ox;
        out[o] = best;
        argmax[o] = bi;
      }
  }
  return detail::make_op<T>({c, ho, wo}, std::move(out), {x.node()},
                            [c, h, w, ho, wo, argmax = std::move(argmax)](Node<T>& self) {
                              auto& p = self.parents[0];
                              p->ensure_grad();
                              for (int ci = 0; ci < c; ++ci) {
                                T* gplane = p->grad.data() + static_cast<std::size_t>(ci) * h * w;
                                const std::size_t base = static_cast<std::size_t>(ci) * ho * wo;
                                for (int i = 0; i < ho * wo; ++i)
                                  gplane[argmax[base + i]] += self.grad[base + i];
                              }
                            });
}

template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, int k, int stride) {
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int ho = (h - k) / stride + 1, wo = (w - k) / stride + 1;
  if (ho <= 0 || wo <= 0) throw dimension_error("avg_pool2d: empty output");
  const T inv = T(1) / static_cast<T>(k * k);
  std::vector<T> out(static_cast<std::size_t>(c) * ho * wo, T(0));
  for (int ci = 0; ci < c; ++ci) {
    const T* plane = x.data() + static_cast<std::size_t>(ci) * h * w;
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        T acc = T(0);
        for (int dy = 0; dy < k; ++dy)
          for (int dx = 0; dx < k; ++dx) acc += plane[(oy * stride + dy) * w + ox * stride + dx];
        out[(static_cast<std::size_t>(ci) * ho + oy) * wo + ox] = acc * inv;
      }
  }
  return detail::make_op<T>({c, ho, wo}, std::move(out), {x.node()},
                            [c, h, w, ho, wo, k, stride, inv](Node<T>& self) {
                              auto& p = self.parents[0];
                              p->ensure_grad();
                              for (int ci = 0; ci < c; ++ci) {
                                T* gplane = p->grad.data() + static_cast<std::size_t>(ci) * h * w;
                                for (int oy = 0; oy < ho; ++oy)
                                  for (int ox = 0; ox < wo; ++ox) {
                                    const T g =
                                        self.grad[(static_cast<std::size_t>(ci) * ho + oy) * wo + ox] * inv;
                                    for (int dy = 0; dy < k; ++dy)
                                      for (int dx = 0; dx < k; ++dx)
                                        gplane[(oy * stride + dy) * w + ox * stride + dx] += g;
                                  }
                              }
                            });
}

// Per-channel spatial standardization of a {C,H,W} map: zero mean, unit
// variance over each channel's extent. Parameter-free, batch-size-1 friendly.
template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, T eps = T(1e-5)) {
  if (x.shape().size() != 3) throw dimension_error("instance_norm: expected a C×H×W tensor");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int n = h * w;
  if (n < 1) throw dimension_error("instance_norm: empty spatial dims");
  std::vector<T> out(x.value().size());
  std::vector<T> inv_std(static_cast<std::size_t>(c));
  for (int ci = 0; ci < c; ++ci) {
    const T* plane = x.data() + static_cast<std::size_t>(ci) * n;
    T mean = T(0);
    for (int i = 0; i < n; ++i) mean += plane[i];
    mean /= static_cast<T>(n);
    T var = T(0);
    for (int i = 0; i < n; ++i) var += (plane[i] - mean) * (plane[i] - mean);
    var /= static_cast<T>(n);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(ci)] = is;
    T* oplane = out.data() + static_cast<std::size_t>(ci) * n;
    for (int i = 0; i < n; ++i) oplane[i] = (plane[i] - mean) * is;
  }
  return detail::make_op<T>(x.shape(), std::move(out), {x.node()},
                            [c, n, inv_std = std::move(inv_std)](Node<T>& self) {
                              auto& p = self.parents[0];
                              p->ensure_grad();
                              for (int ci = 0; ci < c; ++ci) {
                                const T* g = self.grad.data() + static_cast<std::size_t>(ci) * n;
                                const T* y = self.value.data() + static_cast<std::size_t>(ci) * n;
                                T* pg = p->grad.data() + static_cast<std::size_t>(ci) * n;
                                T gmean = T(0), gymean = T(0);
                                for (int i = 0; i < n; ++i) {
                                  gmean += g[i];
                                  gymean += g[i] * y[i];
                                }
                                gmean /= static_cast<T>(n);
                                gymean /= static_cast<T>(n);
                                const T is = inv_std[static_cast<std::size_t>(ci)];
                                for (int i = 0; i < n; ++i)
                                  pg[i] += is * (g[i] - gmean - y[i] * gymean);
                              }
                            });
}

// Weighted spatial pooling: out[c] = sum(x[c,:,:] * w) / sum(w). The weights
// are plain data (no gradient); gradients flow into the feature map.
template <typename T>
Tensor<T> weighted_avg_pool(const Tensor<T>& x, const std::vector<T>& weights) {
  if (x.shape().size() != 3) throw dimension_error("weighted_avg_pool: expected a C×H×W tensor");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (static_cast<std::int64_t>(weights.size()) != static_cast<std::int64_t>(h) * w)
    throw dimension_error("weighted_avg_pool: weight grid size mismatch");
  T wsum = T(0);
  for (const T v : weights) wsum += v;
  if (!(wsum > T(0))) throw dimension_error("weighted_avg_pool: weights sum to zero");
  std::vector<T> out(static_cast<std::size_t>(c), T(0));
  for (int ci = 0; ci < c; ++ci) {
    const T* plane = x.data() + static_cast<std::size_t>(ci) * h * w;
    T acc = T(0);
    for (int i = 0; i < h * w; ++i) acc += plane[i] * weights[static_cast<std::size_t>(i)];
    out[static_cast<std::size_t>(ci)] = acc / wsum;
  }
  return detail::make_op<T>({c}, std::move(out), {x.node()},
                            [c, h, w, weights, wsum](Node<T>& self) {
                              auto& p = self.parents[0];
                              p->ensure_grad();
                              for (int ci = 0; ci < c; ++ci) {
                                const T g = self.grad[static_cast<std::size_t>(ci)] / wsum;
                                T* gplane = p->grad.data() + static_cast<std::size_t>(ci) * h * w;
                                for (int i = 0; i < h * w; ++i)
                                  gplane[i] += g * weights[static_cast<std::size_t>(i)];
                              }
                            });
}

// Per-column standardization of a {C,R} matrix: each column gets zero mean
// and unit variance across its C components.
template <typename T>
Tensor<T> standardize_columns(const Tensor<T>& x, T eps = T(1e-5)) {
  if (x.shape().size() != 2) throw dimension_error("standardize_columns: expected a matrix");
  const int c = x.dim(0), r = x.dim(1);
  if (c < 2) throw dimension_error("standardize_columns: too few rows");
  std::vector<T> out(x.value().size());
  std::vector<T> inv_std(static_cast<std::size_t>(r));
  for (int j = 0; j < r; ++j) {
    T mean = T(0);
    for (int i = 0; i < c; ++i) mean += x.data()[static_cast<std::size_t>(i) * r + j];
    mean /= static_cast<T>(c);
    T var = T(0);
    for (int i = 0; i < c; ++i) {
      const T d = x.data()[static_cast<std::size_t>(i) * r + j] - mean;
      var += d * d;
    }
    var /= static_cast<T>(c);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(j)] = is;
    for (int i = 0; i < c; ++i)
      out[static_cast<std::size_t>(i) * r + j] = (x.data()[static_cast<std::size_t>(i) * r + j] - mean) * is;
  }
  return detail::make_op<T>({c, r}, std::move(out), {x.node()},
                            [c, r, inv_std = std::move(inv_std)](Node<T>& self) {
                              auto& p = self.parents[0];
                              p->ensure_grad();
                              for (int j = 0; j < r; ++j) {
                                T gmean = T(0), gymean = T(0);
                                for (int i = 0; i < c; ++i) {
                                  const std::size_t at = static_cast<std::size_t>(i) * r + j;
                                  gmean += self.grad[at];
                                  gymean += self.grad[at] * self.value[at];
                                }
                                gmean /= static_cast<T>(c);
                                gymean /= static_cast<T>(c);
                                const T is = inv_std[static_cast<std::size_t>(j)];
                                for (int i = 0; i < c; ++i) {
                                  const std::size_t at = static_cast<std::size_t>(i) * r + j;
                                  p->grad[at] += is * (self.grad[at] - gmean - self.value[at] * gymean);
                                }
                              }
                            });
}

// Standardize a vector across its components: zero mean, unit variance.
template <typename T>
Tensor<T> standardize(const Tensor<T>& x, T eps = T(1e-5)) {
  if (x.shape().size() != 1) throw dimension_error("standardize: expected a vector");
  const int n = x.dim(0);
  if (n < 2) throw dimension_error("standardize: vector too short");
  T mean = T(0);
  for (const T v : x.value()) mean += v;
  mean /= static_cast<T>(n);
  T var = T(0);
  for (const T v : x.value()) var += (v - mean) * (v - mean);
  var /= static_cast<T>(n);
  const T inv_std = T(1) / std::sqrt(var + eps);
  std::vector<T> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = (x.data()[i] - mean) * inv_std;
  return detail::make_op<T>({n}, std::move(out), {x.node()}, [n, inv_std](Node<T>& self) {
    auto& p = self.parents[0];
    p->ensure_grad();
    T gmean = T(0), gymean = T(0);
    for (int i = 0; i < n; ++i) {
      gmean += self.grad[static_cast<std::size_t>(i)];
      gymean += self.grad[static_cast<std::size_t>(i)] * self.value[static_cast<std::size_t>(i)];
    }
    gmean /= static_cast<T>(n);
    gymean /= static_cast<T>(n);
    for (int i = 0; i < n; ++i)
      p->grad[static_cast<std::size_t>(i)] +=
          inv_std * (self.grad[static_cast<std::size_t>(i)] - gmean -
                     self.value[static_cast<std::size_t>(i)] * gymean);
  });
}

// {C,H,W} -> {C}; mean over the spatial extent of each channel.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.shape().size() != 3) throw dimension_error("global_avg_pool: expected a C×H×W tensor");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h < 1 || w < 1) throw dimension_error("global_avg_pool: empty spatial dims");
  const T inv = T(1) / static_cast<T>(h * w);
  std::vector<T> out(static_cast<std::size_t>(c));
  for (int ci = 0; ci < c; ++ci) {
    const T* plane = x.data() + static_cast<std::size_t>(ci) * h * w;
    T acc = T(0);
    for (int i = 0; i < h * w; ++i) acc += plane[i];
    out[static_cast<std::size_t>(ci)] = acc * inv;
  }
  return detail::make_op<T>({c}, std::move(out), {x.node()}, [c, h, w, inv](Node<T>& self) {
    auto& p = self.parents[0];
    p->ensure_grad();
    for (int ci = 0; ci < c; ++ci) {
      const T g = self.grad[static_cast<std::size_t>(ci)] * inv;
      T* gplane = p->grad.data() + static_cast<std::size_t>(ci) * h * w;
      for (int i = 0; i < h * w; ++i) gplane[i] += g;
    }
  });
}

// ---------------------------------------------------------------------------
// Channel attention / concatenation

// out[c,r] = Z[c,r] * v[c]. Z is {C,R} or {C}; v is {C}. Bilinear in both.
template <typename T>
Tensor<T> channelwise_mul(const Tensor<T>& Z, const Tensor<T>& v) {
  const int c = Z.dim(0);
  const bool is_mat = Z.shape().size() == 2;
  const int r = is_mat ? Z.dim(1) : 1;
  if (v.shape().size() != 1 || v.dim(0) != c)
    throw dimension_error("channelwise_mul: matrix " + detail::shape_str(Z.shape()) +
                          " incompatible with vector " + detail::shape_str(v.shape()));
  std::vector<T> out(Z.value().size());
  for (int ci = 0; ci < c; ++ci) {
    const T s = v.data()[ci];
    const T* zrow = Z.data() + static_cast<std::size_t>(ci) * r;
    T* orow = out.data() + static_cast<std::size_t>(ci) * r;
    for (int j = 0; j < r; ++j) orow[j] = zrow[j] * s;
  }
  return detail::make_op<T>(Z.shape(), std::move(out), {Z.node(), v.node()}, [c, r](Node<T>& self) {
    auto& zn = self.parents[0];
    auto& vn = self.parents[1];
    if (zn->requires_grad) {
      zn->ensure_grad();
      for (int ci = 0; ci < c; ++ci) {
        const T s = vn->value[static_cast<std::size_t>(ci)];
        const T* g = self.grad.data() + static_cast<std::size_t>(ci) * r;
        T* zg = zn->grad.data() + static_cast<std::size_t>(ci) * r;
        for (int j = 0; j < r; ++j) zg[j] += g[j] * s;
      }
    }
    if (vn->requires_grad) {
      vn->ensure_grad();
      for (int ci = 0; ci < c; ++ci) {
        const T* g = self.grad.data() + static_cast<std::size_t>(ci) * r;
        const T* z = zn->value.data() + static_cast<std::size_t>(ci) * r;
        T acc = T(0);
        for (int j = 0; j < r; ++j) acc += g[j] * z[j];
        vn->grad[static_cast<std::size_t>(ci)] += acc;
      }
    }
  });
}

// out[c,r] = Z[c,r] + v[c] (column-wise broadcast add).
template <typename T>
Tensor<T> channelwise_add(const Tensor<T>& Z, const Tensor<T>& v) {
  const int c = Z.dim(0);
  const bool is_mat = Z.shape().size() == 2;
  const int r = is_mat ? Z.dim(1) : 1;
  if (v.shape().size() != 1 || v.dim(0) != c)
    throw dimension_error("channelwise_add: matrix " + detail::shape_str(Z.shape()) +
                          " incompatible with vector " + detail::shape_str(v.shape()));
  std::vector<T> out(Z.value().size());
  for (int ci = 0; ci < c; ++ci) {
    const T s = v.data()[ci];
    const T* zrow = Z.data() + static_cast<std::size_t>(ci) * r;
    T* orow = out.data() + static_cast<std::size_t>(ci) * r;
    for (int j = 0; j < r; ++j) orow[j] = zrow[j] + s;
  }
  return detail::make_op<T>(Z.shape(), std::move(out), {Z.node(), v.node()}, [c, r](Node<T>& self) {
    auto& zn = self.parents[0];
    auto& vn = self.parents[1];
    if (zn->requires_grad) {
      zn->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) zn->grad[i] += self.grad[i];
    }
    if (vn->requires_grad) {
      vn->ensure_grad();
      for (int ci = 0; ci < c; ++ci) {
        const T* g = self.grad.data() + static_cast<std::size_t>(ci) * r;
        T acc = T(0);
        for (int j = 0; j < r; ++j) acc += g[j];
        vn->grad[static_cast<std::size_t>(ci)] += acc;
      }
    }
  });
}

// Concatenate along the channel (first) axis. Inputs {Ca,R} and {Cb,R} or {Ca},{Cb}.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  const bool is_mat = a.shape().size() == 2;
  if (b.shape().size() != a.shape().size())
    throw dimension_error("concat_channels: rank mismatch");
  const int r = is_mat ? a.dim(1) : 1;
  if (is_mat && b.dim(1) != r) throw dimension_error("concat_channels: column count mismatch");
  const int ca = a.dim(0), cb = b.dim(0);
  std::vector<T> out;
  out.reserve(a.value().size() + b.value().size());
  out.insert(out.end(), a.value().begin(), a.value().end());
  out.insert(out.end(), b.value().begin(), b.value().end());
  std::vector<int> oshape = is_mat ? std::vector<int>{ca + cb, r} : std::vector<int>{ca + cb};
  return detail::make_op<T>(std::move(oshape), std::move(out), {a.node(), b.node()},
                            [na = static_cast<std::size_t>(ca) * r](Node<T>& self) {
                              auto& an = self.parents[0];
                              auto& bn = self.parents[1];
                              if (an->requires_grad) {
                                an->ensure_grad();
                                for (std::size_t i = 0; i < na; ++i) an->grad[i] += self.grad[i];
                              }
                              if (bn->requires_grad) {
                                bn->ensure_grad();
                                for (std::size_t i = na; i < self.grad.size(); ++i)
                                  bn->grad[i - na] += self.grad[i];
                              }
                            });
}

// Stack {C} column vectors into a {C,R} matrix.
template <typename T>
Tensor<T> stack_columns(const std::vector<Tensor<T>>& cols) {
  if (cols.empty()) throw dimension_error("stack_columns: empty input");
  const int c = cols[0].dim(0);
  const int r = static_cast<int>(cols.size());
  std::vector<T> out(static_cast<std::size_t>(c) * r);
  std::vector<std::shared_ptr<Node<T>>> parents;
  parents.reserve(cols.size());
  for (int j = 0; j < r; ++j) {
    if (cols[static_cast<std::size_t>(j)].dim(0) != c)
      throw dimension_error("stack_columns: inconsistent column length");
    for (int ci = 0; ci < c; ++ci)
      out[static_cast<std::size_t>(ci) * r + j] = cols[static_cast<std::size_t>(j)].data()[ci];
    parents.push_back(cols[static_cast<std::size_t>(j)].node());
  }
  return detail::make_op<T>({c, r}, std::move(out), std::move(parents), [c, r](Node<T>& self) {
    for (int j = 0; j < r; ++j) {
      auto& p = self.parents[static_cast<std::size_t>(j)];
      if (!p->requires_grad) continue;
      p->ensure_grad();
      for (int ci = 0; ci < c; ++ci)
        p->grad[static_cast<std::size_t>(ci)] += self.grad[static_cast<std::size_t>(ci) * r + j];
    }
  });
}

// Select columns of a {C,R} matrix; backward scatters into the source.
template <typename T>
Tensor<T> select_columns(const Tensor<T>& Z, const std::vector<int>& idx) {
  const int c = Z.dim(0), r = Z.dim(1);
  const int k = static_cast<int>(idx.size());
  for (int j : idx)
    if (j < 0 || j >= r) throw index_error("select_columns: column index out of range");
  std::vector<T> out(static_cast<std::size_t>(c) * k);
  for (int ci = 0; ci < c; ++ci)
    for (int j = 0; j < k; ++j)
      out[static_cast<std::size_t>(ci) * k + j] =
          Z.data()[static_cast<std::size_t>(ci) * r + idx[static_cast<std::size_t>(j)]];
  return detail::make_op<T>({c, k}, std::move(out), {Z.node()}, [c, r, k, idx](Node<T>& self) {
    auto& p = self.parents[0];
    p->ensure_grad();
    for (int ci = 0; ci < c; ++ci)
      for (int j = 0; j < k; ++j)
        p->grad[static_cast<std::size_t>(ci) * r + idx[static_cast<std::size_t>(j)]] +=
            self.grad[static_cast<std::size_t>(ci) * k + j];
  });
}

// Gather flat elements; backward scatters.
template <typename T>
Tensor<T> gather(const Tensor<T>& x, const std::vector<std::int64_t>& idx) {
  const std::int64_t n = x.numel();
  std::vector<T> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= n) throw index_error("gather: index out of range");
    out[i] = x.data()[idx[i]];
  }
  return detail::make_op<T>({static_cast<int>(idx.size())}, std::move(out), {x.node()},
                            [idx](Node<T>& self) {
                              auto& p = self.parents[0];
                              p->ensure_grad();
                              for (std::size_t i = 0; i < idx.size(); ++i)
                                p->grad[static_cast<std::size_t>(idx[i])] += self.grad[i];
                            });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, std::vector<int> new_shape) {
  std::int64_t n = 1;
  for (int d : new_shape) n *= d;
  if (n != x.numel()) throw dimension_error("reshape: numel mismatch");
  std::vector<T> out = x.value();
  return detail::make_op<T>(std::move(new_shape), std::move(out), {x.node()}, [](Node<T>& self) {
    auto& p = self.parents[0];
    p->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Reductions / losses

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = T(0);
  for (const T v : x.value()) acc += v;
  return detail::make_op<T>({1}, {acc}, {x.node()}, [](Node<T>& self) {
    auto& p = self.parents[0];
    p->ensure_grad();
    for (auto& g : p->grad) g += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

// -log softmax(logits)[label]; logits is {m}.
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, int label) {
  const int m = logits.dim(0);
  if (label < 0 || label >= m)
    throw index_error("softmax_cross_entropy: label " + std::to_string(label) + " out of range [0," +
                      std::to_string(m) + ")");
  const T* z = logits.data();
  T zmax = z[0];
  for (int i = 1; i < m; ++i) zmax = std::max(zmax, z[i]);
  T lse = T(0);
  for (int i = 0; i < m; ++i) lse += std::exp(z[i] - zmax);
  lse = std::log(lse) + zmax;
  const T loss = lse - z[label];
  return detail::make_op<T>({1}, {loss}, {logits.node()}, [m, label, lse](Node<T>& self) {
    auto& p = self.parents[0];
    p->ensure_grad();
    const T g = self.grad[0];
    for (int i = 0; i < m; ++i) {
      const T soft = std::exp(p->value[static_cast<std::size_t>(i)] - lse);
      p->grad[static_cast<std::size_t>(i)] += g * (soft - (i == label ? T(1) : T(0)));
    }
  });
}

// Mean cross-entropy over the columns of a {m,R} logit matrix.
template <typename T>
Tensor<T> softmax_cross_entropy_cols(const Tensor<T>& logits, const std::vector<int>& labels) {
  const int m = logits.dim(0), r = logits.dim(1);
  if (static_cast<int>(labels.size()) != r)
    throw dimension_error("softmax_cross_entropy_cols: label count mismatch");
  for (int l : labels)
    if (l < 0 || l >= m) throw index_error("softmax_cross_entropy_cols: label out of range");
  std::vector<T> lses(static_cast<std::size_t>(r));
  T loss = T(0);
  for (int j = 0; j < r; ++j) {
    T zmax = logits.data()[j];
    for (int i = 1; i < m; ++i)
      zmax = std::max(zmax, logits.data()[static_cast<std::size_t>(i) * r + j]);
    T lse = T(0);
    for (int i = 0; i < m; ++i)
      lse += std::exp(logits.data()[static_cast<std::size_t>(i) * r + j] - zmax);
    lse = std::log(lse) + zmax;
    lses[static_cast<std::size_t>(j)] = lse;
    loss += lse - logits.data()[static_cast<std::size_t>(labels[static_cast<std::size_t>(j)]) * r + j];
  }
  loss /= static_cast<T>(r);
  return detail::make_op<T>({1}, {loss}, {logits.node()},
                            [m, r, labels, lses = std::move(lses)](Node<T>& self) {
                              auto& p = self.parents[0];
                              p->ensure_grad();
                              const T g = self.grad[0] / static_cast<T>(r);
                              for (int j = 0; j < r; ++j) {
                                const T lse = lses[static_cast<std::size_t>(j)];
                                for (int i = 0; i < m; ++i) {
                                  const std::size_t at = static_cast<std::size_t>(i) * r + j;
                                  const T soft = std::exp(p->value[at] - lse);
                                  p->grad[at] +=
                                      g * (soft - (i == labels[static_cast<std::size_t>(j)] ? T(1) : T(0)));
                                }
                              }
                            });
}

// Mean binary cross-entropy with logits; targets in [0,1].
template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const std::vector<T>& targets) {
  if (static_cast<std::int64_t>(targets.size()) != logits.numel())
    throw dimension_error("bce_with_logits: target count mismatch");
  const std::size_t n = targets.size();
  T loss = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    const T x = logits.data()[i];
    // log(1+e^x) computed stably
    const T softplus = x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
    loss += softplus - x * targets[i];
  }
  loss /= static_cast<T>(n);
  return detail::make_op<T>({1}, {loss}, {logits.node()}, [targets](Node<T>& self) {
    auto& p = self.parents[0];
    p->ensure_grad();
    const T g = self.grad[0] / static_cast<T>(targets.size());
    for (std::size_t i = 0; i < targets.size(); ++i) {
      const T x = p->value[i];
      const T s = x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
      p->grad[i] += g * (s - targets[i]);
    }
  });
}

// Smooth-L1 (Huber with beta): 0.5 d^2 / beta for |d| < beta, |d| - 0.5 beta
// otherwise. Mean over all elements.
template <typename T>
Tensor<T> smooth_l1_mean(const Tensor<T>& pred, const std::vector<T>& target, T beta = T(1)) {
  if (static_cast<std::int64_t>(target.size()) != pred.numel())
    throw dimension_error("smooth_l1_mean: target count mismatch");
  const std::size_t n = target.size();
  T loss = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    const T d = std::abs(pred.data()[i] - target[i]);
    loss += d < beta ? T(0.5) * d * d / beta : d - T(0.5) * beta;
  }
  loss /= static_cast<T>(n);
  return detail::make_op<T>({1}, {loss}, {pred.node()}, [target, beta](Node<T>& self) {
    auto& p = self.parents[0];
    p->ensure_grad();
    const T g = self.grad[0] / static_cast<T>(target.size());
    for (std::size_t i = 0; i < target.size(); ++i) {
      const T d = p->value[i] - target[i];
      T dd;
      if (d > beta)
        dd = T(1);
      else if (d < -beta)
        dd = T(-1);
      else
        dd = d / beta;
      p->grad[i] += g * dd;
    }
  });
}

// ---------------------------------------------------------------------------
// Bilinear sampling / RoIAlign

// One bilinear sample at continuous feature coordinates (fx, fy), border-clamped.
template <typename T>
inline T bilinear_at(const T* plane, int h, int w, T fy, T fx) {
  fy = std::min(std::max(fy, T(0)), static_cast<T>(h - 1));
  fx = std::min(std::max(fx, T(0)), static_cast<T>(w - 1));
  const int y0 = static_cast<int>(std::floor(fy));
  const int x0 = static_cast<int>(std::floor(fx));
  const int y1 = std::min(y0 + 1, h - 1);
  const int x1 = std::min(x0 + 1, w - 1);
  const T wy = fy - static_cast<T>(y0);
  const T wx = fx - static_cast<T>(x0);
  return plane[y0 * w + x0] * (T(1) - wy) * (T(1) - wx) + plane[y0 * w + x1] * (T(1) - wy) * wx +
         plane[y1 * w + x0] * wy * (T(1) - wx) + plane[y1 * w + x1] * wy * wx;
}

// Pixel-space box {x1,y1,x2,y2} pooled to a {C,P,P} grid: one bilinear sample
// per bin center. Pixel coordinate p maps to feature coordinate p/stride - 0.5
// (feature cell centers sit at (i+0.5)*stride in pixel space). Differentiable
// w.r.t. the feature map only.
template <typename T>
Tensor<T> roi_align(const Tensor<T>& fm, T x1, T y1, T x2, T y2, T stride, int p) {
  if (!(x2 > x1) || !(y2 > y1))
    throw dimension_error("roi_align: degenerate box (" + std::to_string(static_cast<double>(x1)) + "," +
                          std::to_string(static_cast<double>(y1)) + "," +
                          std::to_string(static_cast<double>(x2)) + "," +
                          std::to_string(static_cast<double>(y2)) + ")");
  const int c = fm.dim(0), h = fm.dim(1), w = fm.dim(2);
  const T fx1 = x1 / stride - T(0.5), fy1 = y1 / stride - T(0.5);
  const T bw = (x2 - x1) / stride, bh = (y2 - y1) / stride;
  std::vector<T> out(static_cast<std::size_t>(c) * p * p);
  std::vector<T> coords(static_cast<std::size_t>(p) * p * 2);
  for (int py = 0; py < p; ++py)
    for (int px = 0; px < p; ++px) {
      const T fy = fy1 + (static_cast<T>(py) + T(0.5)) * bh / static_cast<T>(p);
      const T fx = fx1 + (static_cast<T>(px) + T(0.5)) * bw / static_cast<T>(p);
      coords[(static_cast<std::size_t>(py) * p + px) * 2] = fy;
      coords[(static_cast<std::size_t>(py) * p + px) * 2 + 1] = fx;
    }
  for (int ci = 0; ci < c; ++ci) {
    const T* plane = fm.data() + static_cast<std::size_t>(ci) * h * w;
    for (int i = 0; i < p * p; ++i)
      out[static_cast<std::size_t>(ci) * p * p + i] =
          bilinear_at(plane, h, w, coords[static_cast<std::size_t>(i) * 2],
                      coords[static_cast<std::size_t>(i) * 2 + 1]);
  }
  return detail::make_op<T>(
      {c, p, p}, std::move(out), {fm.node()}, [c, h, w, p, coords = std::move(coords)](Node<T>& self) {
        auto& fn = self.parents[0];
        fn->ensure_grad();
        for (int i = 0; i < p * p; ++i) {
          T fy = coords[static_cast<std::size_t>(i) * 2];
          T fx = coords[static_cast<std::size_t>(i) * 2 + 1];
          fy = std::min(std::max(fy, T(0)), static_cast<T>(h - 1));
          fx = std::min(std::max(fx, T(0)), static_cast<T>(w - 1));
          const int y0 = static_cast<int>(std::floor(fy));
          const int x0 = static_cast<int>(std::floor(fx));
          const int y1 = std::min(y0 + 1, h - 1);
          const int x1 = std::min(x0 + 1, w - 1);
          const T wy = fy - static_cast<T>(y0);
          const T wx = fx - static_cast<T>(x0);
          for (int ci = 0; ci < c; ++ci) {
            const T g = self.grad[static_cast<std::size_t>(ci) * p * p + i];
            if (g == T(0)) continue;
            T* gplane = fn->grad.data() + static_cast<std::size_t>(ci) * h * w;
            gplane[y0 * w + x0] += g * (T(1) - wy) * (T(1) - wx);
            gplane[y0 * w + x1] += g * (T(1) - wy) * wx;
            gplane[y1 * w + x0] += g * wy * (T(1) - wx);
            gplane[y1 * w + x1] += g * wy * wx;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Utilities

template <typename T>
void check_finite(const Tensor<T>& t, const std::string& op_name) {
  for (const T v : t.value())
    if (!std::isfinite(v)) throw numerical_error("non-finite value in " + op_name);
}

// Softmax over a length-m vector (plain values, no graph). Used at inference.
template <typename T>
std::vector<T> softmax_values(const T* z, int m) {
  T zmax = z[0];
  for (int i = 1; i < m; ++i) zmax = std::max(zmax, z[i]);
  std::vector<T> out(static_cast<std::size_t>(m));
  T denom = T(0);
  for (int i = 0; i < m; ++i) {
    out[static_cast<std::size_t>(i)] = std::exp(z[i] - zmax);
    denom += out[static_cast<std::size_t>(i)];
  }
  for (auto& v : out) v /= denom;
  return out;
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace fewdet
