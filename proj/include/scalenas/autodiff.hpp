// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "scalenas/error.hpp"
#include "scalenas/tensor.hpp"

namespace scalenas {

/// Graph node: a value, a lazily allocated gradient, and the closure that
/// pushes this node's gradient into its parents.
template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // empty until something flows into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Tensor<T>& grad_buffer() {
    if (grad.empty()) grad = Tensor<T>(value.shape);
    return grad;
  }
  bool has_grad() const { return !grad.empty(); }
};

template <class T>
using Var = std::shared_ptr<Node<T>>;

template <class T>
Var<T> constant(Tensor<T> value) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  return n;
}

template <class T>
Var<T> leaf(Tensor<T> value, bool requires_grad = true) {
  auto n = constant(std::move(value));
  n->requires_grad = requires_grad;
  return n;
}

namespace detail {

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Disables graph recording on the current thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : saved_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = saved_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool saved_;
};

namespace detail {

template <class T>
Var<T> make_node(Tensor<T> value, std::vector<Var<T>> parents,
                 std::function<void(Node<T>&)> backward_fn) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->requires_grad = grad_mode() && std::any_of(parents.begin(), parents.end(),
                                                [](const Var<T>& p) { return p->requires_grad; });
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward_fn);
  }
  return n;
}

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ValidationError(what);
}

}  // namespace detail

/// Reverse-mode sweep from a scalar `root`. Gradients accumulate into
/// every reachable node that requires them.
template <class T>
void backward(const Var<T>& root) {
  detail::require(root->value.size() == 1, "backward() needs a scalar root");
  if (!root->requires_grad) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward_fn && (*it)->has_grad()) (*it)->backward_fn(**it);
}

// ---------------------------------------------------------------- elementwise

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require(a->value.shape == b->value.shape,
                  "add: shape mismatch " + to_string(a->value.shape) + " vs " + to_string(b->value.shape));
  Tensor<T> out(a->value.shape);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] + b->value[i];
  return detail::make_node<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T factor) {
  Tensor<T> out(a->value.shape);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] * factor;
  return detail::make_node<T>(std::move(out), {a}, [factor](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

template <class T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out(a->value.shape);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] < T(0) ? T(0) : a->value[i];
  return detail::make_node<T>(std::move(out), {a}, [](Node<T>& self) {
    auto& p = *self.parents[0];
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (p.value[i] > T(0)) g[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------- convolution

inline int conv_out_size(int in, int k, int stride, int pad) { return (in + 2 * pad - k) / stride + 1; }

namespace detail {

// Output columns [lo, hi) whose input column ow*stride - pad + kw is in range.
inline void valid_cols(int in_w, int out_w, int stride, int pad, int kw, int& lo, int& hi) {
  const int off = kw - pad;
  lo = off >= 0 ? 0 : (-off + stride - 1) / stride;
  const int last = in_w - 1 - off;
  hi = last < 0 ? 0 : std::min(out_w, last / stride + 1);
}

}  // namespace detail

/// Cross-correlation of x [N,Ci,H,W] with w [Co,Ci,K,K]; no bias.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, int stride, int pad) {
  const auto& xs = x->value.shape;
  const auto& ws = w->value.shape;
  detail::require(xs.size() == 4 && ws.size() == 4, "conv2d: expected 4-D input and weight");
  detail::require(xs[1] == ws[1], "conv2d: channel mismatch (input " + std::to_string(xs[1]) +
                                      ", weight " + std::to_string(ws[1]) + ")");
  detail::require(ws[2] == ws[3], "conv2d: square kernels only");
  detail::require(stride == 1 || stride == 2, "conv2d: stride must be 1 or 2");
  const int N = xs[0], Ci = xs[1], H = xs[2], W = xs[3];
  const int Co = ws[0], K = ws[2];
  const int OH = conv_out_size(H, K, stride, pad), OW = conv_out_size(W, K, stride, pad);
  detail::require(OH > 0 && OW > 0, "conv2d: empty output");

  Tensor<T> out({N, Co, OH, OW});
  const T* xd = x->value.data.data();
  const T* wd = w->value.data.data();
  for (int n = 0; n < N; ++n)
    for (int co = 0; co < Co; ++co) {
      T* op = out.data.data() + (static_cast<std::size_t>(n) * Co + co) * OH * OW;
      for (int ci = 0; ci < Ci; ++ci) {
        const T* xp = xd + (static_cast<std::size_t>(n) * Ci + ci) * H * W;
        const T* wk = wd + (static_cast<std::size_t>(co) * Ci + ci) * K * K;
        for (int kh = 0; kh < K; ++kh)
          for (int kw = 0; kw < K; ++kw) {
            const T wv = wk[kh * K + kw];
            int lo, hi;
            detail::valid_cols(W, OW, stride, pad, kw, lo, hi);
            for (int oh = 0; oh < OH; ++oh) {
              const int ih = oh * stride - pad + kh;
              if (ih < 0 || ih >= H) continue;
              if (lo >= hi) continue;
              const T* row = xp + static_cast<std::size_t>(ih) * W + (lo * stride + kw - pad);
              T* orow = op + static_cast<std::size_t>(oh) * OW + lo;
              const int len = hi - lo;
              if (stride == 1) {
                for (int j = 0; j < len; ++j) orow[j] += wv * row[j];
              } else {
                for (int j = 0; j < len; ++j) orow[j] += wv * row[2 * j];
              }
            }
          }
      }
    }

  return detail::make_node<T>(std::move(out), {x, w}, [=](Node<T>& self) {
    auto& xn = *self.parents[0];
    auto& wn = *self.parents[1];
    const T* gd = self.grad.data.data();
    const T* xv = xn.value.data.data();
    const T* wv_all = wn.value.data.data();
    T* gx = xn.requires_grad ? xn.grad_buffer().data.data() : nullptr;
    T* gw = wn.requires_grad ? wn.grad_buffer().data.data() : nullptr;
    for (int n = 0; n < N; ++n)
      for (int co = 0; co < Co; ++co) {
        const T* gp = gd + (static_cast<std::size_t>(n) * Co + co) * OH * OW;
        for (int ci = 0; ci < Ci; ++ci) {
          const std::size_t xoff = (static_cast<std::size_t>(n) * Ci + ci) * H * W;
          const std::size_t woff = (static_cast<std::size_t>(co) * Ci + ci) * K * K;
          for (int kh = 0; kh < K; ++kh)
            for (int kw = 0; kw < K; ++kw) {
              const T wv = wv_all[woff + kh * K + kw];
              int lo, hi;
              detail::valid_cols(W, OW, stride, pad, kw, lo, hi);
              T acc = T(0);
              for (int oh = 0; oh < OH; ++oh) {
                const int ih = oh * stride - pad + kh;
                if (ih < 0 || ih >= H) continue;
                if (lo >= hi) continue;
                const std::size_t rbase =
                    xoff + static_cast<std::size_t>(ih) * W + (lo * stride + kw - pad);
                const T* grow = gp + static_cast<std::size_t>(oh) * OW + lo;
                const int len = hi - lo;
                if (gx) {
                  T* gxr = gx + rbase;
                  for (int j = 0; j < len; ++j) gxr[j * stride] += wv * grow[j];
                }
                if (gw) {
                  const T* xr = xv + rbase;
                  for (int j = 0; j < len; ++j) acc += grow[j] * xr[j * stride];
                }
              }
              if (gw) gw[woff + kh * K + kw] += acc;
            }
        }
      }
  });
}

/// Adds a per-channel bias b [C] to x [N,C,H,W].
template <class T>
Var<T> add_bias(const Var<T>& x, const Var<T>& b) {
  const auto& s = x->value.shape;
  detail::require(s.size() == 4 && b->value.size() == static_cast<std::size_t>(s[1]),
                  "add_bias: bias length must equal channel count");
  const std::size_t plane = static_cast<std::size_t>(s[2]) * s[3];
  Tensor<T> out = x->value;
  for (int n = 0; n < s[0]; ++n)
    for (int c = 0; c < s[1]; ++c) {
      T* p = out.data.data() + (static_cast<std::size_t>(n) * s[1] + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) p[i] += b->value[c];
    }
  return detail::make_node<T>(std::move(out), {x, b}, [s, plane](Node<T>& self) {
    auto& xn = *self.parents[0];
    auto& bn = *self.parents[1];
    if (xn.requires_grad) {
      auto& g = xn.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (bn.requires_grad) {
      auto& g = bn.grad_buffer();
      for (int n = 0; n < s[0]; ++n)
        for (int c = 0; c < s[1]; ++c) {
          const T* p = self.grad.data.data() + (static_cast<std::size_t>(n) * s[1] + c) * plane;
          T acc = T(0);
          for (std::size_t i = 0; i < plane; ++i) acc += p[i];
          g[c] += acc;
        }
    }
  });
}

// ---------------------------------------------------------------- normalization

inline constexpr double kNormEpsilon = 1e-5;

/// Per-sample, per-channel normalization over spatial positions followed by
/// a learnable scale `gamma` [C] and shift `beta` [C].
template <class T>
Var<T> channel_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta) {
  const auto& s = x->value.shape;
  detail::require(s.size() == 4, "channel_norm: expected 4-D input");
  const int N = s[0], C = s[1];
  detail::require(gamma->value.size() == static_cast<std::size_t>(C) &&
                      beta->value.size() == static_cast<std::size_t>(C),
                  "channel_norm: affine parameters must have one entry per channel");
  const std::size_t M = static_cast<std::size_t>(s[2]) * s[3];
  Tensor<T> xhat(s);
  std::vector<T> inv_std(static_cast<std::size_t>(N) * C);
  Tensor<T> out(s);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const std::size_t off = (static_cast<std::size_t>(n) * C + c) * M;
      const T* xp = x->value.data.data() + off;
      T mean = T(0);
      for (std::size_t i = 0; i < M; ++i) mean += xp[i];
      mean /= static_cast<T>(M);
      T var = T(0);
      for (std::size_t i = 0; i < M; ++i) var += (xp[i] - mean) * (xp[i] - mean);
      var /= static_cast<T>(M);
      const T is = T(1) / std::sqrt(var + static_cast<T>(kNormEpsilon));
      inv_std[static_cast<std::size_t>(n) * C + c] = is;
      for (std::size_t i = 0; i < M; ++i) {
        const T xh = (xp[i] - mean) * is;
        xhat[off + i] = xh;
        out[off + i] = gamma->value[c] * xh + beta->value[c];
      }
    }
  return detail::make_node<T>(
      std::move(out), {x, gamma, beta},
      [N, C, M, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
        auto& xn = *self.parents[0];
        auto& gn = *self.parents[1];
        auto& bn = *self.parents[2];
        for (int n = 0; n < N; ++n)
          for (int c = 0; c < C; ++c) {
            const std::size_t off = (static_cast<std::size_t>(n) * C + c) * M;
            const T* dy = self.grad.data.data() + off;
            T sum_dy = T(0), sum_dy_xh = T(0);
            for (std::size_t i = 0; i < M; ++i) {
              sum_dy += dy[i];
              sum_dy_xh += dy[i] * xhat[off + i];
            }
            if (gn.requires_grad) gn.grad_buffer()[c] += sum_dy_xh;
            if (bn.requires_grad) bn.grad_buffer()[c] += sum_dy;
            if (xn.requires_grad) {
              const T g = gn.value[c];
              const T k = g * inv_std[static_cast<std::size_t>(n) * C + c] / static_cast<T>(M);
              T* dx = xn.grad_buffer().data.data() + off;
              for (std::size_t i = 0; i < M; ++i)
                dx[i] += k * (static_cast<T>(M) * dy[i] - sum_dy - xhat[off + i] * sum_dy_xh);
            }
          }
      });
}

// ---------------------------------------------------------------- resampling

namespace detail {

struct LerpAxis {
  std::vector<int> i0, i1;
  std::vector<double> w1;  // weight of i1; weight of i0 is 1 - w1
};

// Half-pixel (align_corners = false) source coordinates, clamped at 0.
inline LerpAxis lerp_axis(int in, int factor) {
  LerpAxis a;
  const int out = in * factor;
  a.i0.resize(out);
  a.i1.resize(out);
  a.w1.resize(out);
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) / factor - 0.5;
    if (src < 0) src = 0;
    int lo = static_cast<int>(src);
    if (lo > in - 1) lo = in - 1;
    a.i0[o] = lo;
    a.i1[o] = std::min(lo + 1, in - 1);
    a.w1[o] = src - lo;
  }
  return a;
}

}  // namespace detail

/// Bilinear upsampling by `factor` in {2,4,8} using the half-pixel convention:
/// output pixel o samples input coordinate max(0, (o + 0.5) / factor - 0.5),
/// interpolating between floor and floor + 1 (clamped to the last pixel).
template <class T>
Var<T> bilinear_upsample(const Var<T>& x, int factor) {
  detail::require(factor == 2 || factor == 4 || factor == 8, "bilinear_upsample: factor must be 2, 4, or 8");
  const auto& s = x->value.shape;
  detail::require(s.size() == 4, "bilinear_upsample: expected 4-D input");
  const int N = s[0], C = s[1], H = s[2], W = s[3];
  const int OH = H * factor, OW = W * factor;
  auto ax_h = detail::lerp_axis(H, factor);
  auto ax_w = detail::lerp_axis(W, factor);
  Tensor<T> out({N, C, OH, OW});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const T* xp = x->value.data.data() + (static_cast<std::size_t>(n) * C + c) * H * W;
      T* op = out.data.data() + (static_cast<std::size_t>(n) * C + c) * OH * OW;
      for (int oh = 0; oh < OH; ++oh) {
        const T wh1 = static_cast<T>(ax_h.w1[oh]), wh0 = T(1) - wh1;
        const T* r0 = xp + static_cast<std::size_t>(ax_h.i0[oh]) * W;
        const T* r1 = xp + static_cast<std::size_t>(ax_h.i1[oh]) * W;
        for (int ow = 0; ow < OW; ++ow) {
          const T ww1 = static_cast<T>(ax_w.w1[ow]), ww0 = T(1) - ww1;
          const int c0 = ax_w.i0[ow], c1 = ax_w.i1[ow];
          op[static_cast<std::size_t>(oh) * OW + ow] =
              wh0 * (ww0 * r0[c0] + ww1 * r0[c1]) + wh1 * (ww0 * r1[c0] + ww1 * r1[c1]);
        }
      }
    }
  return detail::make_node<T>(std::move(out), {x}, [=](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        T* gp = g.data.data() + (static_cast<std::size_t>(n) * C + c) * H * W;
        const T* dy = self.grad.data.data() + (static_cast<std::size_t>(n) * C + c) * OH * OW;
        for (int oh = 0; oh < OH; ++oh) {
          const T wh1 = static_cast<T>(ax_h.w1[oh]), wh0 = T(1) - wh1;
          T* r0 = gp + static_cast<std::size_t>(ax_h.i0[oh]) * W;
          T* r1 = gp + static_cast<std::size_t>(ax_h.i1[oh]) * W;
          for (int ow = 0; ow < OW; ++ow) {
            const T ww1 = static_cast<T>(ax_w.w1[ow]), ww0 = T(1) - ww1;
            const T d = dy[static_cast<std::size_t>(oh) * OW + ow];
            r0[ax_w.i0[ow]] += wh0 * ww0 * d;
            r0[ax_w.i1[ow]] += wh0 * ww1 * d;
            r1[ax_w.i0[ow]] += wh1 * ww0 * d;
            r1[ax_w.i1[ow]] += wh1 * ww1 * d;
          }
        }
      }
  });
}

/// Channel concatenation of same-sized 4-D tensors.
template <class T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
  detail::require(!xs.empty(), "concat_channels: no inputs");
  const auto& s0 = xs[0]->value.shape;
  int C = 0;
  for (const auto& x : xs) {
    const auto& s = x->value.shape;
    detail::require(s.size() == 4 && s[0] == s0[0] && s[2] == s0[2] && s[3] == s0[3],
                    "concat_channels: spatial/batch mismatch");
    C += s[1];
  }
  const int N = s0[0];
  const std::size_t plane = static_cast<std::size_t>(s0[2]) * s0[3];
  Tensor<T> out({N, C, s0[2], s0[3]});
  int base = 0;
  for (const auto& x : xs) {
    const int c = x->value.dim(1);
    for (int n = 0; n < N; ++n)
      std::copy_n(x->value.data.data() + static_cast<std::size_t>(n) * c * plane, c * plane,
                  out.data.data() + (static_cast<std::size_t>(n) * C + base) * plane);
    base += c;
  }
  return detail::make_node<T>(std::move(out), xs, [N, C, plane](Node<T>& self) {
    int b = 0;
    for (auto& p : self.parents) {
      const int c = p->value.dim(1);
      if (p->requires_grad) {
        auto& g = p->grad_buffer();
        for (int n = 0; n < N; ++n) {
          const T* src = self.grad.data.data() + (static_cast<std::size_t>(n) * C + b) * plane;
          T* dst = g.data.data() + static_cast<std::size_t>(n) * c * plane;
          for (std::size_t i = 0; i < c * plane; ++i) dst[i] += src[i];
        }
      }
      b += c;
    }
  });
}

// ---------------------------------------------------------------- losses

/// Mean pixel-wise softmax cross entropy of logits [N,K,H,W] against labels
/// (N*H*W class indices, NHW order).
template <class T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<int>& labels) {
  const auto& s = logits->value.shape;
  detail::require(s.size() == 4, "cross_entropy: expected 4-D logits");
  const int N = s[0], K = s[1];
  const std::size_t P = static_cast<std::size_t>(s[2]) * s[3];
  detail::require(labels.size() == static_cast<std::size_t>(N) * P, "cross_entropy: label count mismatch");
  Tensor<T> prob(s);
  T total = T(0);
  for (int n = 0; n < N; ++n)
    for (std::size_t p = 0; p < P; ++p) {
      const int y = labels[static_cast<std::size_t>(n) * P + p];
      detail::require(y >= 0 && y < K, "cross_entropy: label out of range");
      T mx = logits->value[(static_cast<std::size_t>(n) * K) * P + p];
      for (int k = 1; k < K; ++k) mx = std::max(mx, logits->value[(static_cast<std::size_t>(n) * K + k) * P + p]);
      T z = T(0);
      for (int k = 0; k < K; ++k) {
        const std::size_t i = (static_cast<std::size_t>(n) * K + k) * P + p;
        prob[i] = std::exp(logits->value[i] - mx);
        z += prob[i];
      }
      for (int k = 0; k < K; ++k) prob[(static_cast<std::size_t>(n) * K + k) * P + p] /= z;
      total -= logits->value[(static_cast<std::size_t>(n) * K + y) * P + p] - mx - std::log(z);
    }
  const T count = static_cast<T>(static_cast<std::size_t>(N) * P);
  Tensor<T> out({1}, total / count);
  return detail::make_node<T>(std::move(out), {logits},
                              [=, prob = std::move(prob)](Node<T>& self) {
                                auto& g = self.parents[0]->grad_buffer();
                                const T scale_by = self.grad[0] / count;
                                for (std::size_t i = 0; i < g.size(); ++i) g[i] += prob[i] * scale_by;
                                for (int n = 0; n < N; ++n)
                                  for (std::size_t p = 0; p < P; ++p) {
                                    const int y = labels[static_cast<std::size_t>(n) * P + p];
                                    g[(static_cast<std::size_t>(n) * K + y) * P + p] -= scale_by;
                                  }
                              });
}

/// Mean squared difference over all elements.
template <class T>
Var<T> mse(const Var<T>& a, const Var<T>& b) {
  detail::require(a->value.shape == b->value.shape, "mse: shape mismatch");
  const T count = static_cast<T>(a->value.size());
  T total = T(0);
  for (std::size_t i = 0; i < a->value.size(); ++i) {
    const T d = a->value[i] - b->value[i];
    total += d * d;
  }
  return detail::make_node<T>(Tensor<T>({1}, total / count), {a, b}, [count](Node<T>& self) {
    auto& an = *self.parents[0];
    auto& bn = *self.parents[1];
    const T k = T(2) * self.grad[0] / count;
    if (an.requires_grad) {
      auto& g = an.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += k * (an.value[i] - bn.value[i]);
    }
    if (bn.requires_grad) {
      auto& g = bn.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= k * (an.value[i] - bn.value[i]);
    }
  });
}

}  // namespace scalenas
