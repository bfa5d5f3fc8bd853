#pragma once

// Tape-free numeric kernels. The autodiff ops in ops.hpp wrap these with
// forward/backward closures.

#include "onrep/tensor.hpp"

#include <array>
#include <span>
#include <stdexcept>

namespace onrep {

struct Padding {
  Index h = 0;
  Index w = 0;
  static Padding same(Index kh, Index kw) { return {kh / 2, kw / 2}; }
};

namespace kernels {

template <typename Scalar>
using RowMatrix = typename Tensor<Scalar>::RowMatrix;

inline Shape conv_output_shape(const Shape& x, const Shape& k, Padding pad) {
  if (x.c != k.c)
    throw std::invalid_argument("conv2d: input has " + std::to_string(x.c) +
                                " channels, kernel expects " + std::to_string(k.c));
  if (pad.h < 0 || pad.w < 0) throw std::invalid_argument("conv2d: negative padding");
  const Index ho = x.h + 2 * pad.h - k.h + 1;
  const Index wo = x.w + 2 * pad.w - k.w + 1;
  if (ho <= 0 || wo <= 0 || k.h <= 0 || k.w <= 0)
    throw std::invalid_argument("conv2d: kernel " + k.str() + " larger than padded input " +
                                x.str());
  return {x.n, k.n, ho, wo};
}

/// Unfold one (C, H, W) item into a (C*kh*kw, Ho*Wo) patch matrix.
template <typename Scalar>
void im2col(const Scalar* x, Index channels, Index height, Index width, Index kh, Index kw,
            Padding pad, Index ho, Index wo, RowMatrix<Scalar>& col) {
  col.resize(channels * kh * kw, ho * wo);
  for (Index c = 0; c < channels; ++c) {
    const Scalar* plane = x + c * height * width;
    for (Index i = 0; i < kh; ++i) {
      for (Index j = 0; j < kw; ++j) {
        Scalar* row = col.data() + ((c * kh + i) * kw + j) * ho * wo;
        // valid output columns for this tap: 0 <= ow + j - pad.w < width
        const Index ow_lo = std::max<Index>(0, pad.w - j);
        const Index ow_hi = std::min<Index>(wo, width + pad.w - j);
        for (Index oh = 0; oh < ho; ++oh) {
          Scalar* dst = row + oh * wo;
          const Index ih = oh + i - pad.h;
          if (ih < 0 || ih >= height || ow_lo >= ow_hi) {
            std::fill(dst, dst + wo, Scalar(0));
            continue;
          }
          std::fill(dst, dst + ow_lo, Scalar(0));
          const Scalar* src = plane + ih * width + (ow_lo + j - pad.w);
          std::copy(src, src + (ow_hi - ow_lo), dst + ow_lo);
          std::fill(dst + ow_hi, dst + wo, Scalar(0));
        }
      }
    }
  }
}

/// Adjoint of im2col: scatter-add patch gradients back into (C, H, W).
template <typename Scalar>
void col2im(const RowMatrix<Scalar>& col, Index channels, Index height, Index width, Index kh,
            Index kw, Padding pad, Index ho, Index wo, Scalar* x) {
  for (Index c = 0; c < channels; ++c) {
    Scalar* plane = x + c * height * width;
    for (Index i = 0; i < kh; ++i) {
      for (Index j = 0; j < kw; ++j) {
        const Scalar* row = col.data() + ((c * kh + i) * kw + j) * ho * wo;
        const Index ow_lo = std::max<Index>(0, pad.w - j);
        const Index ow_hi = std::min<Index>(wo, width + pad.w - j);
        for (Index oh = 0; oh < ho; ++oh) {
          const Index ih = oh + i - pad.h;
          if (ih < 0 || ih >= height) continue;
          const Scalar* src = row + oh * wo;
          Scalar* dst = plane + ih * width;
          for (Index ow = ow_lo; ow < ow_hi; ++ow) dst[ow + j - pad.w] += src[ow];
        }
      }
    }
  }
}

inline bool is_pointwise(const Shape& k, Padding pad) {
  return k.h == 1 && k.w == 1 && pad.h == 0 && pad.w == 0;
}

/// Convolutions with at most this many output channels skip the patch matrix
/// and accumulate shifted input blocks directly.
inline constexpr Index kDirectMaxOut = 4;

/// Output window [oh0, oh0 + rows) x [ow0, ow0 + cols) whose tap (i, j) lands inside the input.
struct TapWindow {
  Index oh0, ow0, rows, cols;
  TapWindow(Index i, Index j, Padding pad, Index h, Index w, Index ho, Index wo)
      : oh0(std::max<Index>(0, pad.h - i)),
        ow0(std::max<Index>(0, pad.w - j)),
        rows(std::min<Index>(ho, h + pad.h - i) - oh0),
        cols(std::min<Index>(wo, w + pad.w - j) - ow0) {}
  bool empty() const { return rows <= 0 || cols <= 0; }
};

template <typename Scalar>
void conv2d_direct(const Tensor<Scalar>& x, const Tensor<Scalar>& kernel, const Tensor<Scalar>& bias,
                   Padding pad, Tensor<Scalar>& out) {
  using Map = Eigen::Map<const RowMatrix<Scalar>>;
  using OutMap = Eigen::Map<RowMatrix<Scalar>>;
  const Shape& ks = kernel.shape();
  const Shape& xs = x.shape();
  const Shape& os = out.shape();
  for (Index n = 0; n < os.n; ++n)
    for (Index o = 0; o < ks.n; ++o) {
      OutMap y(out.data().data() + (n * os.c + o) * os.plane(), os.h, os.w);
      y.setConstant(bias[o]);
      for (Index c = 0; c < ks.c; ++c) {
        Map xc(x.data().data() + (n * xs.c + c) * xs.plane(), xs.h, xs.w);
        for (Index i = 0; i < ks.h; ++i)
          for (Index j = 0; j < ks.w; ++j) {
            const TapWindow t(i, j, pad, xs.h, xs.w, os.h, os.w);
            if (t.empty()) continue;
            y.block(t.oh0, t.ow0, t.rows, t.cols) +=
                kernel(o, c, i, j) * xc.block(t.oh0 + i - pad.h, t.ow0 + j - pad.w, t.rows, t.cols);
          }
      }
    }
}

template <typename Scalar>
void conv2d_direct_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& kernel, Padding pad,
                            const Tensor<Scalar>& dout, Tensor<Scalar>* dx, Tensor<Scalar>* dk) {
  using Map = Eigen::Map<const RowMatrix<Scalar>>;
  using OutMap = Eigen::Map<RowMatrix<Scalar>>;
  const Shape& ks = kernel.shape();
  const Shape& xs = x.shape();
  const Shape& os = dout.shape();
  for (Index n = 0; n < os.n; ++n)
    for (Index o = 0; o < ks.n; ++o) {
      Map g(dout.data().data() + (n * os.c + o) * os.plane(), os.h, os.w);
      for (Index c = 0; c < ks.c; ++c) {
        Map xc(x.data().data() + (n * xs.c + c) * xs.plane(), xs.h, xs.w);
        Scalar* dxc = dx ? dx->data().data() + (n * xs.c + c) * xs.plane() : nullptr;
        for (Index i = 0; i < ks.h; ++i)
          for (Index j = 0; j < ks.w; ++j) {
            const TapWindow t(i, j, pad, xs.h, xs.w, os.h, os.w);
            if (t.empty()) continue;
            const auto gb = g.block(t.oh0, t.ow0, t.rows, t.cols);
            const Index ih = t.oh0 + i - pad.h, iw = t.ow0 + j - pad.w;
            if (dk) (*dk)(o, c, i, j) += (gb.array() * xc.block(ih, iw, t.rows, t.cols).array()).sum();
            if (dxc) OutMap(dxc, xs.h, xs.w).block(ih, iw, t.rows, t.cols) += kernel(o, c, i, j) * gb;
          }
      }
    }
}

/// Cross-correlation with zero padding plus per-output-channel bias.
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& kernel,
                      const Tensor<Scalar>& bias, Padding pad) {
  const Shape& ks = kernel.shape();
  const Shape os = conv_output_shape(x.shape(), ks, pad);
  if (bias.size() != ks.n) throw std::invalid_argument("conv2d: bias length != out channels");
  Tensor<Scalar> out(os);
  if (ks.n <= kDirectMaxOut && !is_pointwise(ks, pad)) {
    conv2d_direct(x, kernel, bias, pad, out);
    return out;
  }
  const auto weights = kernel.matrix(ks.n, ks.c * ks.h * ks.w);
  const auto b = bias.data();
  RowMatrix<Scalar> col;
  for (Index n = 0; n < os.n; ++n) {
    auto y = out.item(n);
    if (is_pointwise(ks, pad)) {
      y.noalias() = weights * x.item(n);
    } else {
      im2col(x.item(n).data(), x.shape().c, x.shape().h, x.shape().w, ks.h, ks.w, pad, os.h,
             os.w, col);
      y.noalias() = weights * col;
    }
    y.colwise() += b;
  }
  return out;
}

/// Gradients of conv2d; any of dx, dk, db may be null.
template <typename Scalar>
void conv2d_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& kernel, Padding pad,
                     const Tensor<Scalar>& dout, Tensor<Scalar>* dx, Tensor<Scalar>* dk,
                     Tensor<Scalar>* db) {
  const Shape& ks = kernel.shape();
  const Shape& os = dout.shape();
  const Shape& xs = x.shape();
  const Index patch = ks.c * ks.h * ks.w;
  const auto weights = kernel.matrix(ks.n, patch);
  RowMatrix<Scalar> col, dcol;
  const bool pointwise = is_pointwise(ks, pad);
  const bool direct = ks.n <= kDirectMaxOut && !pointwise;
  if (direct && (dx || dk)) conv2d_direct_backward(x, kernel, pad, dout, dx, dk);
  for (Index n = 0; n < os.n; ++n) {
    const auto g = dout.item(n);
    if (db) db->data() += g.rowwise().sum();
    if (direct) continue;
    if (dk) {
      auto dw = dk->matrix(ks.n, patch);
      if (pointwise) {
        dw.noalias() += g * x.item(n).transpose();
      } else {
        im2col(x.item(n).data(), xs.c, xs.h, xs.w, ks.h, ks.w, pad, os.h, os.w, col);
        dw.noalias() += g * col.transpose();
      }
    }
    if (dx) {
      if (pointwise) {
        dx->item(n).noalias() += weights.transpose() * g;
      } else {
        dcol.noalias() = weights.transpose() * g;
        col2im(dcol, xs.c, xs.h, xs.w, ks.h, ks.w, pad, os.h, os.w, dx->item(n).data());
      }
    }
  }
}

/// Same 3x3 filter applied to every channel independently (depthwise).
template <typename Scalar>
Tensor<Scalar> depthwise3x3(const Tensor<Scalar>& x, const std::array<Scalar, 9>& filter,
                            Index pad) {
  const Shape& s = x.shape();
  const Index ho = s.h + 2 * pad - 2;
  const Index wo = s.w + 2 * pad - 2;
  if (ho <= 0 || wo <= 0) throw std::invalid_argument("depthwise3x3: input too small");
  Tensor<Scalar> out({s.n, s.c, ho, wo});
  for (Index nc = 0; nc < s.n * s.c; ++nc) {
    const Scalar* src = x.data().data() + nc * s.plane();
    Scalar* dst = out.data().data() + nc * ho * wo;
    for (Index oh = 0; oh < ho; ++oh)
      for (Index ow = 0; ow < wo; ++ow) {
        Scalar acc = 0;
        for (Index i = 0; i < 3; ++i) {
          const Index ih = oh + i - pad;
          if (ih < 0 || ih >= s.h) continue;
          for (Index j = 0; j < 3; ++j) {
            const Index iw = ow + j - pad;
            if (iw < 0 || iw >= s.w) continue;
            acc += filter[i * 3 + j] * src[ih * s.w + iw];
          }
        }
        dst[oh * wo + ow] = acc;
      }
  }
  return out;
}

template <typename Scalar>
void depthwise3x3_backward(const std::array<Scalar, 9>& filter, Index pad,
                           const Tensor<Scalar>& dout, Tensor<Scalar>& dx) {
  const Shape& s = dx.shape();
  const Index ho = dout.shape().h;
  const Index wo = dout.shape().w;
  for (Index nc = 0; nc < s.n * s.c; ++nc) {
    const Scalar* g = dout.data().data() + nc * ho * wo;
    Scalar* dst = dx.data().data() + nc * s.plane();
    for (Index oh = 0; oh < ho; ++oh)
      for (Index ow = 0; ow < wo; ++ow) {
        const Scalar go = g[oh * wo + ow];
        for (Index i = 0; i < 3; ++i) {
          const Index ih = oh + i - pad;
          if (ih < 0 || ih >= s.h) continue;
          for (Index j = 0; j < 3; ++j) {
            const Index iw = ow + j - pad;
            if (iw < 0 || iw >= s.w) continue;
            dst[ih * s.w + iw] += filter[i * 3 + j] * go;
          }
        }
      }
  }
}

/// Valid-mode separable filtering of every (n, c) plane with taps `g` along both axes.
template <typename Scalar>
Tensor<Scalar> separable_valid(const Tensor<Scalar>& x, std::span<const Scalar> g) {
  using Map = Eigen::Map<const RowMatrix<Scalar>>;
  using OutMap = Eigen::Map<RowMatrix<Scalar>>;
  const Shape& s = x.shape();
  const Index k = static_cast<Index>(g.size());
  const Index ho = s.h - k + 1;
  const Index wo = s.w - k + 1;
  if (ho <= 0 || wo <= 0)
    throw std::invalid_argument("frame " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                                " smaller than window " + std::to_string(k));
  Tensor<Scalar> out({s.n, s.c, ho, wo});
  RowMatrix<Scalar> tmp(s.h, wo);
  for (Index nc = 0; nc < s.n * s.c; ++nc) {
    Map src(x.data().data() + nc * s.plane(), s.h, s.w);
    tmp = g[0] * src.leftCols(wo);
    for (Index j = 1; j < k; ++j) tmp += g[j] * src.middleCols(j, wo);
    OutMap dst(out.data().data() + nc * ho * wo, ho, wo);
    dst = g[0] * tmp.topRows(ho);
    for (Index i = 1; i < k; ++i) dst += g[i] * tmp.middleRows(i, ho);
  }
  return out;
}

template <typename Scalar>
void separable_valid_backward(std::span<const Scalar> g, const Tensor<Scalar>& dout,
                              Tensor<Scalar>& dx) {
  using Map = Eigen::Map<const RowMatrix<Scalar>>;
  using OutMap = Eigen::Map<RowMatrix<Scalar>>;
  const Shape& s = dx.shape();
  const Index k = static_cast<Index>(g.size());
  const Index ho = dout.shape().h;
  const Index wo = dout.shape().w;
  RowMatrix<Scalar> tmp(s.h, wo);
  for (Index nc = 0; nc < s.n * s.c; ++nc) {
    Map go(dout.data().data() + nc * ho * wo, ho, wo);
    tmp.setZero();
    for (Index i = 0; i < k; ++i) tmp.middleRows(i, ho) += g[i] * go;
    OutMap dst(dx.data().data() + nc * s.plane(), s.h, s.w);
    for (Index j = 0; j < k; ++j) dst.middleCols(j, wo) += g[j] * tmp;
  }
}


/// out[n][c][h*r+i][w*r+j] = x[n][c*r*r + i*r + j][h][w]
template <typename Scalar>
Tensor<Scalar> pixel_shuffle(const Tensor<Scalar>& x, Index r) {
  const Shape& s = x.shape();
  if (r <= 0) throw std::invalid_argument("pixel_shuffle: factor must be positive");
  if (s.c % (r * r) != 0)
    throw std::invalid_argument("pixel_shuffle: channels " + std::to_string(s.c) +
                                " not divisible by " + std::to_string(r * r));
  const Index co = s.c / (r * r);
  Tensor<Scalar> out({s.n, co, s.h * r, s.w * r});
  for (Index n = 0; n < s.n; ++n)
    for (Index c = 0; c < co; ++c)
      for (Index i = 0; i < r; ++i)
        for (Index j = 0; j < r; ++j) {
          const Index src_c = c * r * r + i * r + j;
          for (Index h = 0; h < s.h; ++h)
            for (Index w = 0; w < s.w; ++w) out(n, c, h * r + i, w * r + j) = x(n, src_c, h, w);
        }
  return out;
}

/// Inverse index map of pixel_shuffle (space-to-depth).
template <typename Scalar>
Tensor<Scalar> pixel_unshuffle(const Tensor<Scalar>& y, Index r) {
  const Shape& s = y.shape();
  if (r <= 0 || s.h % r != 0 || s.w % r != 0)
    throw std::invalid_argument("pixel_unshuffle: spatial size not divisible by factor");
  Tensor<Scalar> out({s.n, s.c * r * r, s.h / r, s.w / r});
  for (Index n = 0; n < s.n; ++n)
    for (Index c = 0; c < s.c; ++c)
      for (Index i = 0; i < r; ++i)
        for (Index j = 0; j < r; ++j)
          for (Index h = 0; h < s.h / r; ++h)
            for (Index w = 0; w < s.w / r; ++w)
              out(n, c * r * r + i * r + j, h, w) = y(n, c, h * r + i, w * r + j);
  return out;
}

}  // namespace kernels
}  // namespace onrep
