#pragma once

// Differentiable ops recorded on a Tape. Each op is a free function taking and
// returning Var handles; arithmetic operators are provided for the elementwise ones.

#include "onrep/autodiff.hpp"
#include "onrep/kernels.hpp"

#include <unsupported/Eigen/SpecialFunctions>

#include <array>
#include <cmath>
#include <numbers>
#include <vector>

namespace onrep {

namespace detail {
inline void require_same(const Shape& a, const Shape& b, const char* op) {
  if (!(a == b)) throw std::invalid_argument(std::string(op) + ": shape " + a.str() + " vs " + b.str());
}
}  // namespace detail

template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& kernel, const Var<Scalar>& bias,
                   Padding pad) {
  using T = Tensor<Scalar>;
  return x.tape().apply(
      OpKind::Conv2d, {x, kernel, bias},
      [pad](auto in) { return kernels::conv2d(*in[0], *in[1], *in[2], pad); },
      [pad](auto in, const T&, const T& g, auto grads) {
        for (std::size_t k = 0; k < 3; ++k)
          if (grads[k]) zeroed(*grads[k], in[k]->shape());
        kernels::conv2d_backward(*in[0], *in[1], pad, g, grads[0], grads[1], grads[2]);
      });
}

/// Same-padding convolution for odd square or 1xk/kx1 kernels.
template <typename Scalar>
Var<Scalar> conv2d_same(const Var<Scalar>& x, const Var<Scalar>& kernel, const Var<Scalar>& bias) {
  return conv2d(x, kernel, bias, Padding::same(kernel.shape().h, kernel.shape().w));
}

/// y = W x + b for x of shape (N, D_in, 1, 1) (any H*W flattening), W (D_out, D_in, 1, 1).
template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias) {
  using T = Tensor<Scalar>;
  const Shape ws = weight.shape();
  const Index d_in = x.shape().c * x.shape().plane();
  if (d_in != ws.c * ws.h * ws.w)
    throw std::invalid_argument("linear: input length " + std::to_string(d_in) +
                                " != weight columns " + std::to_string(ws.c));
  if (bias.value().size() != ws.n) throw std::invalid_argument("linear: bias length mismatch");
  return x.tape().apply(
      OpKind::Linear, {x, weight, bias},
      [ws](auto in) {
        const T& xv = *in[0];
        T out({xv.shape().n, ws.n, 1, 1});
        const auto w = in[1]->matrix(ws.n, ws.c * ws.h * ws.w);
        out.rows().noalias() = xv.rows() * w.transpose();
        out.rows().rowwise() += in[2]->data().transpose();
        return out;
      },
      [ws](auto in, const T&, const T& g, auto grads) {
        const auto w = in[1]->matrix(ws.n, ws.c * ws.h * ws.w);
        for (std::size_t k = 0; k < 3; ++k)
          if (grads[k]) zeroed(*grads[k], in[k]->shape());
        if (grads[0]) grads[0]->rows().noalias() += g.rows() * w;
        if (grads[1]) grads[1]->matrix(ws.n, ws.c * ws.h * ws.w).noalias() += g.rows().transpose() * in[0]->rows();
        if (grads[2]) grads[2]->data() += g.rows().colwise().sum().transpose();
      });
}

template <typename Scalar>
Var<Scalar> pixel_shuffle(const Var<Scalar>& x, Index r) {
  using T = Tensor<Scalar>;
  return x.tape().apply(
      OpKind::PixelShuffle, {x}, [r](auto in) { return kernels::pixel_shuffle(*in[0], r); },
      [r](auto, const T&, const T& g, auto grads) {
        if (!grads[0]) return;
        if (grads[0]->empty())
          *grads[0] = kernels::pixel_unshuffle(g, r);
        else
          grads[0]->data() += kernels::pixel_unshuffle(g, r).data();
      });
}

/// Exact GELU: x * Phi(x) with Phi the standard normal CDF (erf form).
template <typename Scalar>
Var<Scalar> gelu(const Var<Scalar>& x) {
  using T = Tensor<Scalar>;
  return x.tape().apply(
      OpKind::Gelu, {x},
      [](auto in) {
        const auto x = in[0]->array();
        return T(in[0]->shape(), (Scalar(0.5) * x * (Scalar(1) + (x / std::numbers::sqrt2_v<Scalar>).erf())).matrix());
      },
      [](auto in, const T& out, const T& g, auto grads) {
        if (!grads[0]) return;
        const Scalar inv_sqrt_2pi = Scalar(0.5) * std::numbers::inv_sqrtpi_v<Scalar> * std::numbers::sqrt2_v<Scalar>;
        const auto x = in[0]->array();
        const auto cdf = (x == Scalar(0)).select(Scalar(0.5), out.array() / x);
        accumulate(*grads[0], g.shape(),
                   (g.array() * (cdf + x * inv_sqrt_2pi * (Scalar(-0.5) * x.square()).exp())).matrix());
      });
}

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  using T = Tensor<Scalar>;
  detail::require_same(a.shape(), b.shape(), "add");
  return a.tape().apply(
      OpKind::Add, {a, b},
      [](auto in) { return T(in[0]->shape(), in[0]->data() + in[1]->data()); },
      [](auto, const T&, const T& g, auto grads) {
        for (T* d : grads)
          if (d) accumulate(*d, g.shape(), g.data());
      });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  using T = Tensor<Scalar>;
  detail::require_same(a.shape(), b.shape(), "sub");
  return a.tape().apply(
      OpKind::Sub, {a, b},
      [](auto in) { return T(in[0]->shape(), in[0]->data() - in[1]->data()); },
      [](auto, const T&, const T& g, auto grads) {
        if (grads[0]) accumulate(*grads[0], g.shape(), g.data());
        if (grads[1]) accumulate(*grads[1], g.shape(), -g.data());
      });
}

template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  using T = Tensor<Scalar>;
  detail::require_same(a.shape(), b.shape(), "mul");
  return a.tape().apply(
      OpKind::Mul, {a, b},
      [](auto in) {
        T out(in[0]->shape());
        out.array() = in[0]->array() * in[1]->array();
        return out;
      },
      [](auto in, const T&, const T& g, auto grads) {
        if (grads[0]) accumulate(*grads[0], g.shape(), (g.array() * in[1]->array()).matrix());
        if (grads[1]) accumulate(*grads[1], g.shape(), (g.array() * in[0]->array()).matrix());
      });
}

template <typename Scalar>
Var<Scalar> div(const Var<Scalar>& a, const Var<Scalar>& b) {
  using T = Tensor<Scalar>;
  detail::require_same(a.shape(), b.shape(), "div");
  return a.tape().apply(
      OpKind::Div, {a, b},
      [](auto in) {
        T out(in[0]->shape());
        out.array() = in[0]->array() / in[1]->array();
        return out;
      },
      [](auto in, const T& out, const T& g, auto grads) {
        if (grads[0]) accumulate(*grads[0], g.shape(), (g.array() / in[1]->array()).matrix());
        if (grads[1]) accumulate(*grads[1], g.shape(), (-g.array() * out.array() / in[1]->array()).matrix());
      });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& x, Scalar s) {
  using T = Tensor<Scalar>;
  return x.tape().apply(
      OpKind::Scale, {x}, [s](auto in) { return T(in[0]->shape(), in[0]->data() * s); },
      [s](auto, const T&, const T& g, auto grads) {
        if (grads[0]) accumulate(*grads[0], g.shape(), g.data() * s);
      });
}

template <typename Scalar>
Var<Scalar> add_scalar(const Var<Scalar>& x, Scalar s) {
  using T = Tensor<Scalar>;
  return x.tape().apply(
      OpKind::AddScalar, {x},
      [s](auto in) {
        T out = *in[0];
        out.array() += s;
        return out;
      },
      [](auto in, const T&, const T& g, auto grads) {
        if (grads[0]) accumulate(*grads[0], in[0]->shape(), g.data());
      });
}

/// |x|, with subgradient 0 at x == 0.
template <typename Scalar>
Var<Scalar> abs(const Var<Scalar>& x) {
  using T = Tensor<Scalar>;
  return x.tape().apply(
      OpKind::Abs, {x},
      [](auto in) {
        T out(in[0]->shape());
        out.array() = in[0]->array().abs();
        return out;
      },
      [](auto in, const T&, const T& g, auto grads) {
        if (grads[0]) accumulate(*grads[0], g.shape(), (g.array() * in[0]->array().sign()).matrix());
      });
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& x) {
  using T = Tensor<Scalar>;
  return x.tape().apply(
      OpKind::Sum, {x}, [](auto in) { return T::constant({1, 1, 1, 1}, in[0]->data().sum()); },
      [](auto in, const T&, const T& g, auto grads) {
        if (grads[0]) accumulate(*grads[0], in[0]->shape(), T::Vector::Constant(in[0]->size(), g[0]));
      });
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& x) {
  using T = Tensor<Scalar>;
  return x.tape().apply(
      OpKind::Mean, {x}, [](auto in) { return T::constant({1, 1, 1, 1}, in[0]->data().mean()); },
      [](auto in, const T&, const T& g, auto grads) {
        if (grads[0])
          accumulate(*grads[0], in[0]->shape(),
                     T::Vector::Constant(in[0]->size(), g[0] / static_cast<Scalar>(in[0]->size())));
      });
}

/// Clamp to [lo, hi]; gradient passes only strictly inside the interval.
template <typename Scalar>
Var<Scalar> clamp(const Var<Scalar>& x, Scalar lo, Scalar hi) {
  using T = Tensor<Scalar>;
  return x.tape().apply(
      OpKind::Clamp, {x},
      [lo, hi](auto in) {
        T out(in[0]->shape());
        out.array() = in[0]->array().max(lo).min(hi);
        return out;
      },
      [lo, hi](auto in, const T&, const T& g, auto grads) {
        if (!grads[0]) return;
        const auto inside = (in[0]->array() > lo && in[0]->array() < hi).template cast<Scalar>();
        accumulate(*grads[0], g.shape(), (g.array() * inside).matrix());
      });
}

template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& x, const Shape& shape) {
  using T = Tensor<Scalar>;
  if (x.shape().numel() != shape.numel())
    throw std::invalid_argument("reshape: " + x.shape().str() + " to " + shape.str());
  return x.tape().apply(
      OpKind::Reshape, {x}, [shape](auto in) { return in[0]->reshaped(shape); },
      [](auto in, const T&, const T& g, auto grads) {
        if (grads[0]) accumulate(*grads[0], in[0]->shape(), g.data());
      });
}

/// Zero-pad the spatial extent by `p` on every side.
template <typename Scalar>
Var<Scalar> pad_spatial(const Var<Scalar>& x, Index p) {
  using T = Tensor<Scalar>;
  return x.tape().apply(
      OpKind::Pad, {x},
      [p](auto in) {
        const Shape& s = in[0]->shape();
        T out({s.n, s.c, s.h + 2 * p, s.w + 2 * p});
        for (Index n = 0; n < s.n; ++n)
          for (Index c = 0; c < s.c; ++c)
            for (Index h = 0; h < s.h; ++h)
              for (Index w = 0; w < s.w; ++w) out(n, c, h + p, w + p) = (*in[0])(n, c, h, w);
        return out;
      },
      [p](auto in, const T&, const T& g, auto grads) {
        if (!grads[0]) return;
        T& d = zeroed(*grads[0], in[0]->shape());
        const Shape& s = d.shape();
        for (Index n = 0; n < s.n; ++n)
          for (Index c = 0; c < s.c; ++c)
            for (Index h = 0; h < s.h; ++h)
              for (Index w = 0; w < s.w; ++w) d(n, c, h, w) += g(n, c, h + p, w + p);
      });
}

/// Fixed (non-learnable) 3x3 filter applied to every channel.
template <typename Scalar>
Var<Scalar> depthwise3x3(const Var<Scalar>& x, const std::array<Scalar, 9>& filter, Index pad) {
  using T = Tensor<Scalar>;
  return x.tape().apply(
      OpKind::Depthwise, {x},
      [filter, pad](auto in) { return kernels::depthwise3x3(*in[0], filter, pad); },
      [filter, pad](auto in, const T&, const T& g, auto grads) {
        if (grads[0]) kernels::depthwise3x3_backward(filter, pad, g, zeroed(*grads[0], in[0]->shape()));
      });
}

/// x[n][c] * s[c] with s of shape (C, 1, 1, 1).
template <typename Scalar>
Var<Scalar> scale_channels(const Var<Scalar>& x, const Var<Scalar>& s) {
  using T = Tensor<Scalar>;
  if (s.value().size() != x.shape().c) throw std::invalid_argument("scale_channels: length mismatch");
  return x.tape().apply(
      OpKind::ScaleChannels, {x, s},
      [](auto in) {
        T out = *in[0];
        for (Index n = 0; n < out.shape().n; ++n)
          out.item(n).array().colwise() *= in[1]->data().array();
        return out;
      },
      [](auto in, const T&, const T& g, auto grads) {
        for (std::size_t k = 0; k < 2; ++k)
          if (grads[k]) zeroed(*grads[k], in[k]->shape());
        for (Index n = 0; n < g.shape().n; ++n) {
          if (grads[0]) grads[0]->item(n).array() += g.item(n).array().colwise() * in[1]->data().array();
          if (grads[1])
            grads[1]->data() += g.item(n).cwiseProduct(in[0]->item(n)).rowwise().sum();
        }
      });
}

/// Valid-mode separable filter with identical taps on both axes.
template <typename Scalar>
Var<Scalar> blur(const Var<Scalar>& x, std::vector<Scalar> taps) {
  using T = Tensor<Scalar>;
  return x.tape().apply(
      OpKind::Blur, {x},
      [taps](auto in) { return kernels::separable_valid<Scalar>(*in[0], taps); },
      [taps](auto in, const T&, const T& g, auto grads) {
        if (grads[0]) kernels::separable_valid_backward<Scalar>(taps, g, zeroed(*grads[0], in[0]->shape()));
      });
}

// Kernel-space ops used by the fusion algebra. Kernels are (O, I, kh, kw),
// biases (O, 1, 1, 1).

/// Center a 1x1, 1x3 or 3x1 kernel inside a zero 3x3 kernel.
template <typename Scalar>
Var<Scalar> pad_kernel_3x3(const Var<Scalar>& k) {
  using T = Tensor<Scalar>;
  const Shape s = k.shape();
  if ((s.h != 1 && s.h != 3) || (s.w != 1 && s.w != 3))
    throw std::invalid_argument("pad_to_3x3: unsupported kernel size " + std::to_string(s.h) +
                                "x" + std::to_string(s.w));
  const Index dh = (3 - s.h) / 2;
  const Index dw = (3 - s.w) / 2;
  return k.tape().apply(
      OpKind::PadKernel, {k},
      [s, dh, dw](auto in) {
        T out({s.n, s.c, 3, 3});
        const Scalar* src = in[0]->data().data();
        Scalar* dst = out.data().data();
        for (Index oi = 0; oi < s.n * s.c; ++oi, dst += 9)
          for (Index h = 0; h < s.h; ++h)
            for (Index w = 0; w < s.w; ++w) dst[(h + dh) * 3 + w + dw] = *src++;
        return out;
      },
      [s, dh, dw](auto, const T&, const T& g, auto grads) {
        if (!grads[0]) return;
        const Scalar* src = g.data().data();
        Scalar* dst = zeroed(*grads[0], s).data().data();
        for (Index oi = 0; oi < s.n * s.c; ++oi, src += 9)
          for (Index h = 0; h < s.h; ++h)
            for (Index w = 0; w < s.w; ++w) *dst++ += src[(h + dh) * 3 + w + dw];
      });
}

/// out[o][i][hw] = sum_m a[o][m] * k[m][i][hw]; `a` is a 1x1 kernel (O, M, 1, 1).
/// A bias vector (M, 1, 1, 1) is a valid `k`, giving a matrix-vector product.
template <typename Scalar>
Var<Scalar> mix_left(const Var<Scalar>& a, const Var<Scalar>& k) {
  using T = Tensor<Scalar>;
  const Shape as = a.shape();
  const Shape ks = k.shape();
  if (as.h != 1 || as.w != 1 || as.c != ks.n)
    throw std::invalid_argument("mix_left: " + as.str() + " cannot mix " + ks.str());
  const Index cols = ks.c * ks.h * ks.w;
  return a.tape().apply(
      OpKind::MixLeft, {a, k},
      [as, ks, cols](auto in) {
        T out({as.n, ks.c, ks.h, ks.w});
        out.matrix(as.n, cols).noalias() = in[0]->matrix(as.n, as.c) * in[1]->matrix(ks.n, cols);
        return out;
      },
      [as, ks, cols](auto in, const T&, const T& g, auto grads) {
        const auto gm = g.matrix(as.n, cols);
        for (std::size_t k = 0; k < 2; ++k)
          if (grads[k]) zeroed(*grads[k], in[k]->shape());
        if (grads[0]) grads[0]->matrix(as.n, as.c).noalias() += gm * in[1]->matrix(ks.n, cols).transpose();
        if (grads[1]) grads[1]->matrix(ks.n, cols).noalias() += in[0]->matrix(as.n, as.c).transpose() * gm;
      });
}

/// out[o][i][hw] = sum_m k[o][m][hw] * b[m][i]; `b` is a 1x1 kernel (M, I, 1, 1).
template <typename Scalar>
Var<Scalar> mix_right(const Var<Scalar>& k, const Var<Scalar>& b) {
  using T = Tensor<Scalar>;
  const Shape ks = k.shape();
  const Shape bs = b.shape();
  if (bs.h != 1 || bs.w != 1 || bs.n != ks.c)
    throw std::invalid_argument("mix_right: " + ks.str() + " cannot absorb " + bs.str());
  const Index taps = ks.h * ks.w;
  return k.tape().apply(
      OpKind::MixRight, {k, b},
      [ks, bs, taps](auto in) {
        T out({ks.n, bs.c, ks.h, ks.w});
        const auto bm = in[1]->matrix(bs.n, bs.c);
        for (Index o = 0; o < ks.n; ++o) {
          typename T::ConstMatrixMap ko(in[0]->data().data() + o * ks.c * taps, ks.c, taps);
          typename T::MatrixMap oo(out.data().data() + o * bs.c * taps, bs.c, taps);
          oo.noalias() = bm.transpose() * ko;
        }
        return out;
      },
      [ks, bs, taps](auto in, const T&, const T& g, auto grads) {
        const auto bm = in[1]->matrix(bs.n, bs.c);
        for (std::size_t k = 0; k < 2; ++k)
          if (grads[k]) zeroed(*grads[k], in[k]->shape());
        for (Index o = 0; o < ks.n; ++o) {
          typename T::ConstMatrixMap go(g.data().data() + o * bs.c * taps, bs.c, taps);
          if (grads[0]) {
            typename T::MatrixMap dk(grads[0]->data().data() + o * ks.c * taps, ks.c, taps);
            dk.noalias() += bm * go;
          }
          if (grads[1]) {
            typename T::ConstMatrixMap ko(in[0]->data().data() + o * ks.c * taps, ks.c, taps);
            grads[1]->matrix(bs.n, bs.c).noalias() += ko * go.transpose();
          }
        }
      });
}

/// Sum of every kernel slice over its taps: (O, M, kh, kw) -> (O, M, 1, 1).
template <typename Scalar>
Var<Scalar> kernel_sum(const Var<Scalar>& k) {
  using T = Tensor<Scalar>;
  const Shape ks = k.shape();
  return k.tape().apply(
      OpKind::KernelSum, {k},
      [ks](auto in) {
        T out({ks.n, ks.c, 1, 1});
        out.data() = in[0]->matrix(ks.n * ks.c, ks.h * ks.w).rowwise().sum();
        return out;
      },
      [ks](auto, const T&, const T& g, auto grads) {
        if (grads[0]) zeroed(*grads[0], ks).matrix(ks.n * ks.c, ks.h * ks.w).colwise() += g.data();
      });
}

/// Depthwise kernel as a dense (C, C, 3, 3) kernel: k[c][c] = s[c] * filter.
template <typename Scalar>
Var<Scalar> diag_kernel(const Var<Scalar>& s, const std::array<Scalar, 9>& filter) {
  using T = Tensor<Scalar>;
  const Index c = s.value().size();
  return s.tape().apply(
      OpKind::DiagKernel, {s},
      [c, filter](auto in) {
        T out({c, c, 3, 3});
        for (Index o = 0; o < c; ++o)
          for (Index t = 0; t < 9; ++t) out(o, o, t / 3, t % 3) = (*in[0])[o] * filter[t];
        return out;
      },
      [c, filter](auto in, const T&, const T& g, auto grads) {
        if (!grads[0]) return;
        zeroed(*grads[0], in[0]->shape());
        for (Index o = 0; o < c; ++o)
          for (Index t = 0; t < 9; ++t) (*grads[0])[o] += g(o, o, t / 3, t % 3) * filter[t];
      });
}

template <typename Scalar>
Var<Scalar> operator+(const Var<Scalar>& a, const Var<Scalar>& b) { return add(a, b); }
template <typename Scalar>
Var<Scalar> operator-(const Var<Scalar>& a, const Var<Scalar>& b) { return sub(a, b); }
template <typename Scalar>
Var<Scalar> operator*(const Var<Scalar>& a, const Var<Scalar>& b) { return mul(a, b); }
template <typename Scalar>
Var<Scalar> operator/(const Var<Scalar>& a, const Var<Scalar>& b) { return div(a, b); }
template <typename Scalar>
Var<Scalar> operator*(Scalar s, const Var<Scalar>& x) { return scale(x, s); }
template <typename Scalar>
Var<Scalar> operator+(const Var<Scalar>& x, Scalar s) { return add_scalar(x, s); }

}  // namespace onrep
