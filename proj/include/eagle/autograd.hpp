#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "eagle/rng.hpp"
#include "eagle/tensor.hpp"

// Reverse-mode tape. A Graph is built per forward pass; backward() walks the
// tape in reverse creation order (creation order is a topological order by
// construction). Gradients of Param leaves are accumulated back into the
// Param's grad buffer so the optimizer can consume them.

namespace eagle::nn {

template <typename T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstMatMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;

  Param() = default;
  Param(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape) {}

  void zero_grad() { grad.fill(T(0)); }
};

// Running statistics owned by a batchnorm layer (state, not parameters).
template <typename T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  std::int64_t batches_seen = 0;

  explicit BatchNormState(int channels = 0)
      : running_mean(Shape{channels}), running_var(Tensor<T>::full(Shape{channels}, T(1))) {}
};

template <typename T>
class Graph {
 public:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool needs_grad = false;
    bool grad_alloc = false;
    std::function<void()> back;  // may be empty for leaves
    Param<T>* param = nullptr;
  };
  using Ref = Node*;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  const Tensor<T>& value(Ref n) const { return n->value; }
  const Tensor<T>& grad(Ref n) const { return n->grad; }

  Ref constant(Tensor<T> v) {
    Ref n = make();
    n->value = std::move(v);
    n->needs_grad = false;
    return n;
  }

  Ref input(Tensor<T> v) {  // differentiable leaf (used by tests probing input grads)
    Ref n = make();
    n->value = std::move(v);
    n->needs_grad = true;
    return n;
  }

  Ref param(Param<T>& p) {
    Ref n = make();
    n->value = p.value;
    n->needs_grad = p.trainable;
    n->param = p.trainable ? &p : nullptr;
    return n;
  }

  Ref detach(Ref a) {
    Ref n = make();
    n->value = a->value;
    n->needs_grad = false;
    return n;
  }

  Ref add(Ref a, Ref b) {
    check_same(a, b, "add");
    Ref n = make(a, b);
    n->value = a->value;
    for (std::size_t i = 0; i < n->value.numel(); ++i) n->value[i] += b->value[i];
    n->back = [this, n, a, b] {
      accumulate(a, n->grad, T(1));
      accumulate(b, n->grad, T(1));
    };
    return n;
  }

  Ref sub(Ref a, Ref b) {
    check_same(a, b, "sub");
    Ref n = make(a, b);
    n->value = a->value;
    for (std::size_t i = 0; i < n->value.numel(); ++i) n->value[i] -= b->value[i];
    n->back = [this, n, a, b] {
      accumulate(a, n->grad, T(1));
      accumulate(b, n->grad, T(-1));
    };
    return n;
  }

  Ref mul(Ref a, Ref b) {
    check_same(a, b, "mul");
    Ref n = make(a, b);
    n->value = a->value;
    for (std::size_t i = 0; i < n->value.numel(); ++i) n->value[i] *= b->value[i];
    n->back = [this, n, a, b] {
      if (wants(a)) {
        Tensor<T>& ga = ensure(a);
        for (std::size_t i = 0; i < n->grad.numel(); ++i) ga[i] += n->grad[i] * b->value[i];
      }
      if (wants(b)) {
        Tensor<T>& gb = ensure(b);
        for (std::size_t i = 0; i < n->grad.numel(); ++i) gb[i] += n->grad[i] * a->value[i];
      }
    };
    return n;
  }

  // Elementwise min; gradient follows the smaller operand (ties go to a).
  Ref minimum(Ref a, Ref b) {
    check_same(a, b, "minimum");
    Ref n = make(a, b);
    n->value = a->value;
    for (std::size_t i = 0; i < n->value.numel(); ++i)
      n->value[i] = std::min(a->value[i], b->value[i]);
    n->back = [this, n, a, b] {
      Tensor<T>* ga = wants(a) ? &ensure(a) : nullptr;
      Tensor<T>* gb = wants(b) ? &ensure(b) : nullptr;
      for (std::size_t i = 0; i < n->grad.numel(); ++i) {
        if (a->value[i] <= b->value[i]) {
          if (ga) (*ga)[i] += n->grad[i];
        } else if (gb) {
          (*gb)[i] += n->grad[i];
        }
      }
    };
    return n;
  }

  Ref scale(Ref a, T c) {
    Ref n = make(a);
    n->value = a->value;
    for (auto& v : n->value.data) v *= c;
    n->back = [this, n, a, c] { accumulate(a, n->grad, c); };
    return n;
  }

  // 1 - a, the mask complement
  Ref one_minus(Ref a) {
    Ref n = make(a);
    n->value = a->value;
    for (auto& v : n->value.data) v = T(1) - v;
    n->back = [this, n, a] { accumulate(a, n->grad, T(-1)); };
    return n;
  }

  // x: (B,C,h,w), m: (B,1,h,w) -> x * m with m broadcast over channels
  Ref broadcast_mul(Ref x, Ref m) {
    const Shape& xs = x->value.shape;
    const Shape& ms = m->value.shape;
    if (xs.size() != 4 || ms.size() != 4 || ms[1] != 1 || xs[0] != ms[0] || xs[2] != ms[2] || xs[3] != ms[3])
      throw InputError("broadcast_mul: incompatible shapes " + shape_str(xs) + " vs " + shape_str(ms));
    const int B = xs[0], C = xs[1];
    const std::size_t hw = static_cast<std::size_t>(xs[2]) * xs[3];
    Ref n = make(x, m);
    n->value = Tensor<T>(xs);
    for (int b = 0; b < B; ++b) {
      const T* mp = m->value.ptr() + static_cast<std::size_t>(b) * hw;
      for (int c = 0; c < C; ++c) {
        const T* xp = x->value.ptr() + (static_cast<std::size_t>(b) * C + c) * hw;
        T* yp = n->value.ptr() + (static_cast<std::size_t>(b) * C + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) yp[i] = xp[i] * mp[i];
      }
    }
    n->back = [this, n, x, m, B, C, hw] {
      if (wants(x)) {
        Tensor<T>& gx = ensure(x);
        for (int b = 0; b < B; ++b) {
          const T* mp = m->value.ptr() + static_cast<std::size_t>(b) * hw;
          for (int c = 0; c < C; ++c) {
            const std::size_t off = (static_cast<std::size_t>(b) * C + c) * hw;
            const T* gp = n->grad.ptr() + off;
            T* gxp = gx.ptr() + off;
            for (std::size_t i = 0; i < hw; ++i) gxp[i] += gp[i] * mp[i];
          }
        }
      }
      if (wants(m)) {
        Tensor<T>& gm = ensure(m);
        for (int b = 0; b < B; ++b) {
          T* gmp = gm.ptr() + static_cast<std::size_t>(b) * hw;
          for (int c = 0; c < C; ++c) {
            const std::size_t off = (static_cast<std::size_t>(b) * C + c) * hw;
            const T* gp = n->grad.ptr() + off;
            const T* xp = x->value.ptr() + off;
            for (std::size_t i = 0; i < hw; ++i) gmp[i] += gp[i] * xp[i];
          }
        }
      }
    };
    return n;
  }

  // (B,C,H,W) scaled per channel by (B,C)
  Ref channel_scale(Ref x, Ref s) {
    const Shape& xs = x->value.shape;
    const Shape& ss = s->value.shape;
    if (xs.size() != 4 || ss.size() != 2 || xs[0] != ss[0] || xs[1] != ss[1])
      throw InputError("channel_scale: incompatible shapes " + shape_str(xs) + " vs " + shape_str(ss));
    const int B = xs[0], C = xs[1];
    const std::size_t hw = static_cast<std::size_t>(xs[2]) * xs[3];
    Ref n = make(x, s);
    n->value = Tensor<T>(xs);
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        const T sv = s->value[static_cast<std::size_t>(b) * C + c];
        const std::size_t off = (static_cast<std::size_t>(b) * C + c) * hw;
        const T* xp = x->value.ptr() + off;
        T* yp = n->value.ptr() + off;
        for (std::size_t i = 0; i < hw; ++i) yp[i] = xp[i] * sv;
      }
    n->back = [this, n, x, s, B, C, hw] {
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
          const std::size_t off = (static_cast<std::size_t>(b) * C + c) * hw;
          const T* gp = n->grad.ptr() + off;
          if (wants(x)) {
            const T sv = s->value[static_cast<std::size_t>(b) * C + c];
            T* gxp = ensure(x).ptr() + off;
            for (std::size_t i = 0; i < hw; ++i) gxp[i] += gp[i] * sv;
          }
          if (wants(s)) {
            const T* xp = x->value.ptr() + off;
            T acc = 0;
            for (std::size_t i = 0; i < hw; ++i) acc += gp[i] * xp[i];
            ensure(s)[static_cast<std::size_t>(b) * C + c] += acc;
          }
        }
    };
    return n;
  }

  Ref relu(Ref a) {
    Ref n = make(a);
    n->value = a->value;
    for (auto& v : n->value.data) v = v > T(0) ? v : T(0);
    n->back = [this, n, a] {
      if (!wants(a)) return;
      Tensor<T>& g = ensure(a);
      for (std::size_t i = 0; i < n->grad.numel(); ++i)
        if (a->value[i] > T(0)) g[i] += n->grad[i];
    };
    return n;
  }

  Ref sigmoid(Ref a) {
    Ref n = make(a);
    n->value = a->value;
    for (auto& v : n->value.data) v = T(1) / (T(1) + std::exp(-v));
    n->back = [this, n, a] {
      if (!wants(a)) return;
      Tensor<T>& g = ensure(a);
      for (std::size_t i = 0; i < n->grad.numel(); ++i) {
        const T s = n->value[i];
        g[i] += n->grad[i] * s * (T(1) - s);
      }
    };
    return n;
  }

  Ref tanh_(Ref a) {
    Ref n = make(a);
    n->value = a->value;
    for (auto& v : n->value.data) v = std::tanh(v);
    n->back = [this, n, a] {
      if (!wants(a)) return;
      Tensor<T>& g = ensure(a);
      for (std::size_t i = 0; i < n->grad.numel(); ++i) {
        const T t = n->value[i];
        g[i] += n->grad[i] * (T(1) - t * t);
      }
    };
    return n;
  }

  // x: (B,D), w: (O,D), b: (O) -> (B,O)
  Ref linear(Ref x, Ref w, Ref b) {
    const Shape& xs = x->value.shape;
    const Shape& ws = w->value.shape;
    if (xs.size() != 2 || ws.size() != 2 || xs[1] != ws[1])
      throw InputError("linear: incompatible shapes " + shape_str(xs) + " vs " + shape_str(ws));
    const int B = xs[0], D = xs[1], O = ws[0];
    Ref n = make(x, w, b);
    n->value = Tensor<T>(Shape{B, O});
    {
      ConstMatMap<T> X(x->value.ptr(), B, D), W(w->value.ptr(), O, D);
      MatMap<T> Y(n->value.ptr(), B, O);
      Y.noalias() = X * W.transpose();
      for (int i = 0; i < B; ++i)
        for (int j = 0; j < O; ++j) n->value.at2(i, j) += b->value[j];
    }
    n->back = [this, n, x, w, b, B, D, O] {
      ConstMatMap<T> G(n->grad.ptr(), B, O);
      if (wants(x)) {
        ConstMatMap<T> W(w->value.ptr(), O, D);
        MatMap<T> GX(ensure(x).ptr(), B, D);
        GX.noalias() += G * W;
      }
      if (wants(w)) {
        ConstMatMap<T> X(x->value.ptr(), B, D);
        MatMap<T> GW(ensure(w).ptr(), O, D);
        GW.noalias() += G.transpose() * X;
      }
      if (wants(b)) {
        Tensor<T>& gb = ensure(b);
        for (int i = 0; i < B; ++i)
          for (int j = 0; j < O; ++j) gb[j] += n->grad.at2(i, j);
      }
    };
    return n;
  }

  // x: (B,Cin,H,W), w: (Cout,Cin,k,k), b: (Cout)
  Ref conv2d(Ref x, Ref w, Ref b, int stride, int pad) {
    const Shape& xs = x->value.shape;
    const Shape& ws = w->value.shape;
    if (xs.size() != 4 || ws.size() != 4 || xs[1] != ws[1])
      throw InputError("conv2d: incompatible shapes " + shape_str(xs) + " vs " + shape_str(ws));
    const int B = xs[0], Cin = xs[1], H = xs[2], W = xs[3];
    const int Cout = ws[0], k = ws[2];
    const int OH = (H + 2 * pad - k) / stride + 1;
    const int OW = (W + 2 * pad - k) / stride + 1;
    const int K = Cin * k * k;
    Ref n = make(x, w, b);
    n->value = Tensor<T>(Shape{B, Cout, OH, OW});
    {
      Tensor<T> col(Shape{K, OH * OW});
      ConstMatMap<T> Wm(w->value.ptr(), Cout, K);
      for (int s = 0; s < B; ++s) {
        im2col(x->value.ptr() + static_cast<std::size_t>(s) * Cin * H * W, Cin, H, W, k, stride, pad, OH, OW, col.ptr());
        ConstMatMap<T> C(col.ptr(), K, OH * OW);
        MatMap<T> Y(n->value.ptr() + static_cast<std::size_t>(s) * Cout * OH * OW, Cout, OH * OW);
        Y.noalias() = Wm * C;
        for (int c = 0; c < Cout; ++c) Y.row(c).array() += b->value[c];
      }
    }
    n->back = [this, n, x, w, b, B, Cin, H, W, Cout, k, stride, pad, OH, OW, K] {
      const std::size_t xstride = static_cast<std::size_t>(Cin) * H * W;
      const std::size_t ystride = static_cast<std::size_t>(Cout) * OH * OW;
      Tensor<T> col(Shape{K, OH * OW});
      for (int s = 0; s < B; ++s) {
        ConstMatMap<T> G(n->grad.ptr() + s * ystride, Cout, OH * OW);
        if (wants(w)) {
          im2col(x->value.ptr() + s * xstride, Cin, H, W, k, stride, pad, OH, OW, col.ptr());
          ConstMatMap<T> C(col.ptr(), K, OH * OW);
          MatMap<T> GW(ensure(w).ptr(), Cout, K);
          GW.noalias() += G * C.transpose();
        }
        if (wants(b)) {
          // serial reduction: Eigen's vectorized sum() peels by runtime pointer
          // alignment, which breaks bitwise run-to-run determinism
          Tensor<T>& gb = ensure(b);
          const T* gp = n->grad.ptr() + s * ystride;
          for (int c = 0; c < Cout; ++c) {
            T acc = 0;
            const T* row = gp + static_cast<std::size_t>(c) * OH * OW;
            for (int i = 0; i < OH * OW; ++i) acc += row[i];
            gb[c] += acc;
          }
        }
        if (wants(x)) {
          ConstMatMap<T> Wm(w->value.ptr(), Cout, K);
          MatMap<T> CG(col.ptr(), K, OH * OW);
          CG.noalias() = Wm.transpose() * G;
          col2im_add(col.ptr(), Cin, H, W, k, stride, pad, OH, OW, ensure(x).ptr() + s * xstride);
        }
      }
    };
    return n;
  }

  // x: (B,Cin,H,W), w: (Cin,Cout,k,k), b: (Cout)
  // out spatial: (H-1)*stride - 2*pad + k + out_pad
  Ref conv_transpose2d(Ref x, Ref w, Ref b, int stride, int pad, int out_pad) {
    const Shape& xs = x->value.shape;
    const Shape& ws = w->value.shape;
    if (xs.size() != 4 || ws.size() != 4 || xs[1] != ws[0])
      throw InputError("conv_transpose2d: incompatible shapes " + shape_str(xs) + " vs " + shape_str(ws));
    const int B = xs[0], Cin = xs[1], IH = xs[2], IW = xs[3];
    const int Cout = ws[1], k = ws[2];
    const int OH = (IH - 1) * stride - 2 * pad + k + out_pad;
    const int OW = (IW - 1) * stride - 2 * pad + k + out_pad;
    const int K = Cout * k * k;
    Ref n = make(x, w, b);
    n->value = Tensor<T>(Shape{B, Cout, OH, OW});
    {
      Tensor<T> col(Shape{K, IH * IW});
      ConstMatMap<T> Wm(w->value.ptr(), Cin, K);
      for (int s = 0; s < B; ++s) {
        ConstMatMap<T> X(x->value.ptr() + static_cast<std::size_t>(s) * Cin * IH * IW, Cin, IH * IW);
        MatMap<T> C(col.ptr(), K, IH * IW);
        C.noalias() = Wm.transpose() * X;
        T* yp = n->value.ptr() + static_cast<std::size_t>(s) * Cout * OH * OW;
        col2im_add(col.ptr(), Cout, OH, OW, k, stride, pad, IH, IW, yp);
        for (int c = 0; c < Cout; ++c)
          for (int i = 0; i < OH * OW; ++i) yp[static_cast<std::size_t>(c) * OH * OW + i] += b->value[c];
      }
    }
    n->back = [this, n, x, w, b, B, Cin, IH, IW, Cout, k, stride, pad, OH, OW, K] {
      const std::size_t xstride = static_cast<std::size_t>(Cin) * IH * IW;
      const std::size_t ystride = static_cast<std::size_t>(Cout) * OH * OW;
      Tensor<T> col(Shape{K, IH * IW});
      for (int s = 0; s < B; ++s) {
        const T* gp = n->grad.ptr() + s * ystride;
        im2col(gp, Cout, OH, OW, k, stride, pad, IH, IW, col.ptr());
        ConstMatMap<T> CG(col.ptr(), K, IH * IW);
        if (wants(x)) {
          ConstMatMap<T> Wm(w->value.ptr(), Cin, K);
          MatMap<T> GX(ensure(x).ptr() + s * xstride, Cin, IH * IW);
          GX.noalias() += Wm * CG;
        }
        if (wants(w)) {
          ConstMatMap<T> X(x->value.ptr() + s * xstride, Cin, IH * IW);
          MatMap<T> GW(ensure(w).ptr(), Cin, K);
          GW.noalias() += X * CG.transpose();
        }
        if (wants(b)) {
          Tensor<T>& gb = ensure(b);
          for (int c = 0; c < Cout; ++c) {
            T acc = 0;
            const T* row = gp + static_cast<std::size_t>(c) * OH * OW;
            for (int i = 0; i < OH * OW; ++i) acc += row[i];
            gb[c] += acc;
          }
        }
      }
    };
    return n;
  }

  // Batchnorm over (B,*,H,W) per channel. Training mode uses batch statistics
  // and updates the running estimates; eval mode normalizes with the stored
  // running statistics (biased-variance normalization, unbiased running var).
  Ref batchnorm2d(Ref x, Ref gamma, Ref beta, BatchNormState<T>& st, bool training,
                  T momentum = T(0.1), T eps = T(1e-5)) {
    const Shape& xs = x->value.shape;
    if (xs.size() != 4) throw InputError("batchnorm2d: expected 4-d input");
    const int B = xs[0], C = xs[1], H = xs[2], W = xs[3];
    const std::size_t hw = static_cast<std::size_t>(H) * W;
    const std::size_t m = static_cast<std::size_t>(B) * hw;
    Ref n = make(x, gamma, beta);
    n->value = Tensor<T>(xs);
    auto mean = std::make_shared<Tensor<T>>(Shape{C});
    auto invstd = std::make_shared<Tensor<T>>(Shape{C});
    for (int c = 0; c < C; ++c) {
      T mu, var;
      if (training) {
        T sum = 0, sq = 0;
        for (int b = 0; b < B; ++b) {
          const T* p = x->value.ptr() + (static_cast<std::size_t>(b) * C + c) * hw;
          for (std::size_t i = 0; i < hw; ++i) {
            sum += p[i];
            sq += p[i] * p[i];
          }
        }
        mu = sum / static_cast<T>(m);
        var = sq / static_cast<T>(m) - mu * mu;
        if (var < T(0)) var = T(0);
        const T unbiased = m > 1 ? var * static_cast<T>(m) / static_cast<T>(m - 1) : var;
        st.running_mean[c] = (T(1) - momentum) * st.running_mean[c] + momentum * mu;
        st.running_var[c] = (T(1) - momentum) * st.running_var[c] + momentum * unbiased;
      } else {
        mu = st.running_mean[c];
        var = st.running_var[c];
      }
      (*mean)[c] = mu;
      (*invstd)[c] = T(1) / std::sqrt(var + eps);
      for (int b = 0; b < B; ++b) {
        const T* p = x->value.ptr() + (static_cast<std::size_t>(b) * C + c) * hw;
        T* q = n->value.ptr() + (static_cast<std::size_t>(b) * C + c) * hw;
        const T g = gamma->value[c], bt = beta->value[c], is = (*invstd)[c];
        for (std::size_t i = 0; i < hw; ++i) q[i] = (p[i] - mu) * is * g + bt;
      }
    }
    if (training) st.batches_seen++;
    n->back = [this, n, x, gamma, beta, B, C, hw, m, mean, invstd, training] {
      for (int c = 0; c < C; ++c) {
        const T mu = (*mean)[c], is = (*invstd)[c], gm = gamma->value[c];
        T sum_g = 0, sum_gx = 0;  // sums of grad and grad*xhat
        for (int b = 0; b < B; ++b) {
          const std::size_t off = (static_cast<std::size_t>(b) * C + c) * hw;
          const T* gp = n->grad.ptr() + off;
          const T* xp = x->value.ptr() + off;
          for (std::size_t i = 0; i < hw; ++i) {
            sum_g += gp[i];
            sum_gx += gp[i] * (xp[i] - mu) * is;
          }
        }
        if (wants(gamma)) ensure(gamma)[c] += sum_gx;
        if (wants(beta)) ensure(beta)[c] += sum_g;
        if (wants(x)) {
          Tensor<T>& gx = ensure(x);
          const T mg = sum_g / static_cast<T>(m), mgx = sum_gx / static_cast<T>(m);
          for (int b = 0; b < B; ++b) {
            const std::size_t off = (static_cast<std::size_t>(b) * C + c) * hw;
            const T* gp = n->grad.ptr() + off;
            const T* xp = x->value.ptr() + off;
            T* gxp = gx.ptr() + off;
            if (training) {
              for (std::size_t i = 0; i < hw; ++i) {
                const T xhat = (xp[i] - mu) * is;
                gxp[i] += gm * is * (gp[i] - mg - xhat * mgx);
              }
            } else {
              for (std::size_t i = 0; i < hw; ++i) gxp[i] += gm * is * gp[i];
            }
          }
        }
      }
    };
    return n;
  }

  // (B,C,h,w) -> (B,C)
  Ref global_avg_pool(Ref x) {
    const Shape& xs = x->value.shape;
    const int B = xs[0], C = xs[1];
    const std::size_t hw = static_cast<std::size_t>(xs[2]) * xs[3];
    Ref n = make(x);
    n->value = Tensor<T>(Shape{B, C});
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        const T* p = x->value.ptr() + (static_cast<std::size_t>(b) * C + c) * hw;
        T acc = 0;
        for (std::size_t i = 0; i < hw; ++i) acc += p[i];
        n->value.at2(b, c) = acc / static_cast<T>(hw);
      }
    n->back = [this, n, x, B, C, hw] {
      if (!wants(x)) return;
      Tensor<T>& g = ensure(x);
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
          const T gv = n->grad.at2(b, c) / static_cast<T>(hw);
          T* p = g.ptr() + (static_cast<std::size_t>(b) * C + c) * hw;
          for (std::size_t i = 0; i < hw; ++i) p[i] += gv;
        }
    };
    return n;
  }

  Ref global_max_pool(Ref x) {
    const Shape& xs = x->value.shape;
    const int B = xs[0], C = xs[1];
    const std::size_t hw = static_cast<std::size_t>(xs[2]) * xs[3];
    Ref n = make(x);
    n->value = Tensor<T>(Shape{B, C});
    auto arg = std::make_shared<std::vector<std::size_t>>(static_cast<std::size_t>(B) * C);
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        const std::size_t off = (static_cast<std::size_t>(b) * C + c) * hw;
        const T* p = x->value.ptr() + off;
        std::size_t best = 0;
        for (std::size_t i = 1; i < hw; ++i)
          if (p[i] > p[best]) best = i;
        (*arg)[static_cast<std::size_t>(b) * C + c] = off + best;
        n->value.at2(b, c) = p[best];
      }
    n->back = [this, n, x, B, C, arg] {
      if (!wants(x)) return;
      Tensor<T>& g = ensure(x);
      for (int i = 0; i < B * C; ++i) g[(*arg)[i]] += n->grad[i];
    };
    return n;
  }

  // (B,C,h,w) -> (B,1,h,w), mean over channels
  Ref channel_mean(Ref x) {
    const Shape& xs = x->value.shape;
    const int B = xs[0], C = xs[1], h = xs[2], w = xs[3];
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    Ref n = make(x);
    n->value = Tensor<T>(Shape{B, 1, h, w});
    for (int b = 0; b < B; ++b) {
      T* q = n->value.ptr() + b * hw;
      for (int c = 0; c < C; ++c) {
        const T* p = x->value.ptr() + (static_cast<std::size_t>(b) * C + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) q[i] += p[i];
      }
      for (std::size_t i = 0; i < hw; ++i) q[i] /= static_cast<T>(C);
    }
    n->back = [this, n, x, B, C, hw] {
      if (!wants(x)) return;
      Tensor<T>& g = ensure(x);
      for (int b = 0; b < B; ++b) {
        const T* gq = n->grad.ptr() + b * hw;
        for (int c = 0; c < C; ++c) {
          T* gp = g.ptr() + (static_cast<std::size_t>(b) * C + c) * hw;
          for (std::size_t i = 0; i < hw; ++i) gp[i] += gq[i] / static_cast<T>(C);
        }
      }
    };
    return n;
  }

  // (B,C,h,w) -> (B,1,h,w), max over channels
  Ref channel_max(Ref x) {
    const Shape& xs = x->value.shape;
    const int B = xs[0], C = xs[1], h = xs[2], w = xs[3];
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    Ref n = make(x);
    n->value = Tensor<T>(Shape{B, 1, h, w});
    auto arg = std::make_shared<std::vector<int>>(static_cast<std::size_t>(B) * hw);
    for (int b = 0; b < B; ++b)
      for (std::size_t i = 0; i < hw; ++i) {
        int best = 0;
        T bv = x->value.ptr()[static_cast<std::size_t>(b) * C * hw + i];
        for (int c = 1; c < C; ++c) {
          const T v = x->value.ptr()[(static_cast<std::size_t>(b) * C + c) * hw + i];
          if (v > bv) {
            bv = v;
            best = c;
          }
        }
        (*arg)[b * hw + i] = best;
        n->value.ptr()[b * hw + i] = bv;
      }
    n->back = [this, n, x, B, C, hw, arg] {
      if (!wants(x)) return;
      Tensor<T>& g = ensure(x);
      for (int b = 0; b < B; ++b)
        for (std::size_t i = 0; i < hw; ++i) {
          const int c = (*arg)[b * hw + i];
          g[(static_cast<std::size_t>(b) * C + c) * hw + i] += n->grad[b * hw + i];
        }
    };
    return n;
  }

  // channel-axis concat of two (B,Ci,h,w) tensors
  Ref concat_channels(Ref a, Ref b) {
    const Shape& as = a->value.shape;
    const Shape& bs = b->value.shape;
    if (as[0] != bs[0] || as[2] != bs[2] || as[3] != bs[3])
      throw InputError("concat_channels: incompatible shapes");
    const int B = as[0], C1 = as[1], C2 = bs[1];
    const std::size_t hw = static_cast<std::size_t>(as[2]) * as[3];
    Ref n = make(a, b);
    n->value = Tensor<T>(Shape{B, C1 + C2, as[2], as[3]});
    for (int s = 0; s < B; ++s) {
      std::copy_n(a->value.ptr() + s * C1 * hw, C1 * hw, n->value.ptr() + static_cast<std::size_t>(s) * (C1 + C2) * hw);
      std::copy_n(b->value.ptr() + s * C2 * hw, C2 * hw, n->value.ptr() + static_cast<std::size_t>(s) * (C1 + C2) * hw + C1 * hw);
    }
    n->back = [this, n, a, b, B, C1, C2, hw] {
      for (int s = 0; s < B; ++s) {
        const T* gp = n->grad.ptr() + static_cast<std::size_t>(s) * (C1 + C2) * hw;
        if (wants(a)) {
          T* ga = ensure(a).ptr() + s * C1 * hw;
          for (std::size_t i = 0; i < C1 * hw; ++i) ga[i] += gp[i];
        }
        if (wants(b)) {
          T* gb = ensure(b).ptr() + s * C2 * hw;
          for (std::size_t i = 0; i < C2 * hw; ++i) gb[i] += gp[C1 * hw + i];
        }
      }
    };
    return n;
  }

  // (B,...) -> (B,D)
  Ref flatten(Ref x) {
    const int B = x->value.shape[0];
    const int D = static_cast<int>(x->value.numel()) / B;
    Ref n = make(x);
    n->value = Tensor<T>(Shape{B, D}, x->value.data);
    n->back = [this, n, x] {
      if (!wants(x)) return;
      Tensor<T>& g = ensure(x);
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += n->grad[i];
    };
    return n;
  }

  // column-wise concat of (B,D1) and (B,D2)
  Ref concat_cols(Ref a, Ref b) {
    const int B = a->value.shape[0], D1 = a->value.shape[1], D2 = b->value.shape[1];
    if (b->value.shape[0] != B) throw InputError("concat_cols: batch mismatch");
    Ref n = make(a, b);
    n->value = Tensor<T>(Shape{B, D1 + D2});
    for (int i = 0; i < B; ++i) {
      std::copy_n(a->value.ptr() + static_cast<std::size_t>(i) * D1, D1, n->value.ptr() + static_cast<std::size_t>(i) * (D1 + D2));
      std::copy_n(b->value.ptr() + static_cast<std::size_t>(i) * D2, D2, n->value.ptr() + static_cast<std::size_t>(i) * (D1 + D2) + D1);
    }
    n->back = [this, n, a, b, B, D1, D2] {
      for (int i = 0; i < B; ++i) {
        const T* gp = n->grad.ptr() + static_cast<std::size_t>(i) * (D1 + D2);
        if (wants(a)) {
          T* ga = ensure(a).ptr() + static_cast<std::size_t>(i) * D1;
          for (int j = 0; j < D1; ++j) ga[j] += gp[j];
        }
        if (wants(b)) {
          T* gb = ensure(b).ptr() + static_cast<std::size_t>(i) * D2;
          for (int j = 0; j < D2; ++j) gb[j] += gp[D1 + j];
        }
      }
    };
    return n;
  }

  // mean over all elements of (a-b)^2; scalar output
  Ref mse_mean(Ref a, Ref b) {
    check_same(a, b, "mse_mean");
    const std::size_t N = a->value.numel();
    Ref n = make(a, b);
    T acc = 0;
    for (std::size_t i = 0; i < N; ++i) {
      const T d = a->value[i] - b->value[i];
      acc += d * d;
    }
    n->value = Tensor<T>(Shape{1});
    n->value[0] = acc / static_cast<T>(N);
    n->back = [this, n, a, b, N] {
      const T g = n->grad[0] * T(2) / static_cast<T>(N);
      if (wants(a)) {
        Tensor<T>& ga = ensure(a);
        for (std::size_t i = 0; i < N; ++i) ga[i] += g * (a->value[i] - b->value[i]);
      }
      if (wants(b)) {
        Tensor<T>& gb = ensure(b);
        for (std::size_t i = 0; i < N; ++i) gb[i] -= g * (a->value[i] - b->value[i]);
      }
    };
    return n;
  }

  // mean over rows of the squared L2 row norm of (a-b); a,b: (B,D)
  Ref sq_l2_rowmean(Ref a, Ref b) {
    check_same(a, b, "sq_l2_rowmean");
    const int B = a->value.shape[0];
    const std::size_t N = a->value.numel();
    Ref n = make(a, b);
    T acc = 0;
    for (std::size_t i = 0; i < N; ++i) {
      const T d = a->value[i] - b->value[i];
      acc += d * d;
    }
    n->value = Tensor<T>(Shape{1});
    n->value[0] = acc / static_cast<T>(B);
    n->back = [this, n, a, b, B, N] {
      const T g = n->grad[0] * T(2) / static_cast<T>(B);
      if (wants(a)) {
        Tensor<T>& ga = ensure(a);
        for (std::size_t i = 0; i < N; ++i) ga[i] += g * (a->value[i] - b->value[i]);
      }
      if (wants(b)) {
        Tensor<T>& gb = ensure(b);
        for (std::size_t i = 0; i < N; ++i) gb[i] -= g * (a->value[i] - b->value[i]);
      }
    };
    return n;
  }

  Ref mean_all(Ref a) {
    const std::size_t N = a->value.numel();
    Ref n = make(a);
    T acc = 0;
    for (std::size_t i = 0; i < N; ++i) acc += a->value[i];
    n->value = Tensor<T>(Shape{1});
    n->value[0] = acc / static_cast<T>(N);
    n->back = [this, n, a, N] {
      if (!wants(a)) return;
      Tensor<T>& g = ensure(a);
      const T gv = n->grad[0] / static_cast<T>(N);
      for (std::size_t i = 0; i < N; ++i) g[i] += gv;
    };
    return n;
  }

  // c0*s0 + c1*s1 + ... over scalar nodes, left-to-right association
  Ref weighted_sum(const std::vector<std::pair<Ref, T>>& terms) {
    Ref n = make();
    n->value = Tensor<T>(Shape{1});
    T acc = 0;
    for (const auto& [r, c] : terms) acc += c * r->value[0];
    n->value[0] = acc;
    for (const auto& term : terms) link(n, term.first);
    auto terms_copy = terms;
    n->back = [this, n, terms_copy] {
      for (const auto& [r, c] : terms_copy) accumulate(r, n->grad, c);
    };
    return n;
  }

  void backward(Ref loss) {
    if (loss->value.numel() != 1) throw InputError("backward: loss must be scalar");
    ensure(loss)[0] = T(1);
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      Node* node = *it;
      if (node->grad_alloc && node->back) node->back();
    }
    for (Node* node : order_) {
      if (node->param && node->grad_alloc) {
        for (std::size_t i = 0; i < node->grad.numel(); ++i) node->param->grad[i] += node->grad[i];
      }
    }
  }

  // exposed for stop-gradient assertions in tests
  bool has_grad(Ref n) const { return n->grad_alloc; }

 private:
  struct NodeImpl : Node {
    std::vector<Node*> parents;
  };

  Ref make() {
    nodes_.push_back(std::make_unique<NodeImpl>());
    order_.push_back(nodes_.back().get());
    return nodes_.back().get();
  }
  Ref make(Ref a) {
    Ref n = make();
    link(n, a);
    return n;
  }
  Ref make(Ref a, Ref b) {
    Ref n = make();
    link(n, a);
    link(n, b);
    return n;
  }
  Ref make(Ref a, Ref b, Ref c) {
    Ref n = make();
    link(n, a);
    link(n, b);
    link(n, c);
    return n;
  }
  void link(Ref n, Ref parent) {
    static_cast<NodeImpl*>(n)->parents.push_back(parent);
    if (parent->needs_grad) n->needs_grad = true;
  }

  bool wants(Ref n) const { return n->needs_grad; }

  Tensor<T>& ensure(Ref n) {
    if (!n->grad_alloc) {
      n->grad = Tensor<T>(n->value.shape);
      n->grad_alloc = true;
    }
    return n->grad;
  }

  void accumulate(Ref target, const Tensor<T>& g, T c) {
    if (!wants(target)) return;
    Tensor<T>& t = ensure(target);
    for (std::size_t i = 0; i < g.numel(); ++i) t[i] += c * g[i];
  }

  void check_same(Ref a, Ref b, const char* what) {
    if (a->value.shape != b->value.shape)
      throw InputError(std::string(what) + ": shape mismatch " + shape_str(a->value.shape) + " vs " + shape_str(b->value.shape));
  }

  static void im2col(const T* img, int C, int H, int W, int k, int stride, int pad, int OH, int OW, T* col) {
    // col is (C*k*k) x (OH*OW)
    for (int c = 0; c < C; ++c) {
      for (int ki = 0; ki < k; ++ki) {
        for (int kj = 0; kj < k; ++kj) {
          T* dst = col + ((static_cast<std::size_t>(c) * k + ki) * k + kj) * OH * OW;
          for (int oh = 0; oh < OH; ++oh) {
            const int ih = oh * stride + ki - pad;
            if (ih < 0 || ih >= H) {
              for (int ow = 0; ow < OW; ++ow) dst[oh * OW + ow] = T(0);
              continue;
            }
            const T* src = img + (static_cast<std::size_t>(c) * H + ih) * W;
            for (int ow = 0; ow < OW; ++ow) {
              const int iw = ow * stride + kj - pad;
              dst[oh * OW + ow] = (iw >= 0 && iw < W) ? src[iw] : T(0);
            }
          }
        }
      }
    }
  }

  static void col2im_add(const T* col, int C, int H, int W, int k, int stride, int pad, int OH, int OW, T* img) {
    for (int c = 0; c < C; ++c) {
      for (int ki = 0; ki < k; ++ki) {
        for (int kj = 0; kj < k; ++kj) {
          const T* src = col + ((static_cast<std::size_t>(c) * k + ki) * k + kj) * OH * OW;
          for (int oh = 0; oh < OH; ++oh) {
            const int ih = oh * stride + ki - pad;
            if (ih < 0 || ih >= H) continue;
            T* dst = img + (static_cast<std::size_t>(c) * H + ih) * W;
            for (int ow = 0; ow < OW; ++ow) {
              const int iw = ow * stride + kj - pad;
              if (iw >= 0 && iw < W) dst[iw] += src[oh * OW + ow];
            }
          }
        }
      }
    }
  }

  std::vector<std::unique_ptr<NodeImpl>> nodes_;
  std::vector<Node*> order_;
};

// Adam with bias correction. Moment buffers are addressed by parameter order,
// which is stable for a given network; they round-trip through checkpoints.
template <typename T>
class Adam {
 public:
  explicit Adam(std::vector<Param<T>*> params, T lr = T(1e-4), T beta1 = T(0.9), T beta2 = T(0.999),
                T eps = T(1e-8))
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (Param<T>* p : params_) {
      m_.emplace_back(p->value.shape);
      v_.emplace_back(p->value.shape);
    }
  }

  // One update from the accumulated grads. Returns false (and leaves
  // parameters untouched) if any gradient is non-finite.
  bool step() {
    for (Param<T>* p : params_)
      if (!p->grad.all_finite()) return false;
    ++t_;
    const T bc1 = T(1) - std::pow(beta1_, static_cast<T>(t_));
    const T bc2 = T(1) - std::pow(beta2_, static_cast<T>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Param<T>* p = params_[k];
      for (std::size_t i = 0; i < p->value.numel(); ++i) {
        const T g = p->grad[i];
        m_[k][i] = beta1_ * m_[k][i] + (T(1) - beta1_) * g;
        v_[k][i] = beta2_ * v_[k][i] + (T(1) - beta2_) * g * g;
        const T mhat = m_[k][i] / bc1;
        const T vhat = v_[k][i] / bc2;
        p->value[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
    return true;
  }

  void zero_grad() {
    for (Param<T>* p : params_) p->zero_grad();
  }

  std::int64_t steps_taken() const { return t_; }
  T learning_rate() const { return lr_; }

  // checkpoint access
  std::vector<Tensor<T>>& moment1() { return m_; }
  std::vector<Tensor<T>>& moment2() { return v_; }
  void set_steps_taken(std::int64_t t) { t_ = t; }
  const std::vector<Param<T>*>& params() const { return params_; }

 private:
  std::vector<Param<T>*> params_;
  T lr_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::vector<Tensor<T>> m_, v_;
};

// fan-in scaled uniform init, the usual conv/linear default
template <typename T>
void init_uniform_fanin(Tensor<T>& w, int fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : w.data) v = static_cast<T>(rng.uniform(-bound, bound));
}

// Named parameter collection with stable addresses.
template <typename T>
class ParamStore {
 public:
  Param<T>& add(const std::string& name, Shape shape, int fan_in, Rng& rng) {
    Param<T>& p = add_zero(name, std::move(shape));
    init_uniform_fanin(p.value, fan_in, rng);
    return p;
  }

  Param<T>& add_zero(const std::string& name, Shape shape) {
    if (find(name)) throw ConfigError("duplicate parameter name: " + name);
    params_.emplace_back(name, Tensor<T>(std::move(shape)));
    return params_.back();
  }

  Param<T>& add_const(const std::string& name, Shape shape, T fill) {
    Param<T>& p = add_zero(name, std::move(shape));
    p.value.fill(fill);
    return p;
  }

  Param<T>* find(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }

  Param<T>& at(const std::string& name) {
    Param<T>* p = find(name);
    if (!p) throw ConfigError("unknown parameter: " + name);
    return *p;
  }

  std::vector<Param<T>*> all() {
    std::vector<Param<T>*> out;
    out.reserve(params_.size());
    for (auto& p : params_) out.push_back(&p);
    return out;
  }

  std::size_t size() const { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::deque<Param<T>> params_;
};

}  // namespace eagle::nn
