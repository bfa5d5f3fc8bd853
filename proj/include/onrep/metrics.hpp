#pragma once

// Image quality metrics and the L1 + SSIM training loss. SSIM is built from
// tape ops so the same code serves evaluation and back-propagation.

#include "onrep/ops.hpp"

#include <cmath>
#include <vector>

namespace onrep {

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double c1 = 0.01 * 0.01;
  double c2 = 0.03 * 0.03;
};

template <typename Scalar>
std::vector<Scalar> gaussian_taps(int size, double sigma) {
  std::vector<double> g(size);
  double total = 0;
  for (int i = 0; i < size; ++i) {
    const double d = i - (size - 1) / 2.0;
    g[i] = std::exp(-d * d / (2 * sigma * sigma));
    total += g[i];
  }
  std::vector<Scalar> out;
  for (double v : g) out.push_back(static_cast<Scalar>(v / total));
  return out;
}

template <typename Scalar>
struct SsimTerms {
  Var<Scalar> ssim;  // mean of luminance * contrast-structure map
  Var<Scalar> cs;    // mean of contrast-structure map
};

/// Mean SSIM over channels and valid window positions of (N, C, H, W) images.
template <typename Scalar>
SsimTerms<Scalar> ssim_terms(const Var<Scalar>& x, const Var<Scalar>& y, const SsimOptions& opt = {}) {
  if (!(x.shape() == y.shape()))
    throw std::invalid_argument("ssim: shapes " + x.shape().str() + " and " + y.shape().str());
  if (x.shape().h < opt.window || x.shape().w < opt.window)
    throw std::invalid_argument("ssim: frame " + x.shape().str() + " smaller than the " +
                                std::to_string(opt.window) + "-pixel window");
  const auto taps = gaussian_taps<Scalar>(opt.window, opt.sigma);
  const Scalar c1 = static_cast<Scalar>(opt.c1);
  const Scalar c2 = static_cast<Scalar>(opt.c2);
  Var<Scalar> mx = blur(x, taps);
  Var<Scalar> my = blur(y, taps);
  Var<Scalar> mxx = mx * mx;
  Var<Scalar> myy = my * my;
  Var<Scalar> mxy = mx * my;
  Var<Scalar> sxx = blur(x * x, taps) - mxx;
  Var<Scalar> syy = blur(y * y, taps) - myy;
  Var<Scalar> sxy = blur(x * y, taps) - mxy;
  Var<Scalar> cs_map = (Scalar(2) * sxy + c2) / (sxx + syy + c2);
  Var<Scalar> lum = (Scalar(2) * mxy + c1) / (mxx + myy + c1);
  return {mean(lum * cs_map), mean(cs_map)};
}

template <typename Scalar>
Var<Scalar> ssim(const Var<Scalar>& x, const Var<Scalar>& y, const SsimOptions& opt = {}) {
  return ssim_terms(x, y, opt).ssim;
}

template <typename Scalar>
double ssim(const Tensor<Scalar>& x, const Tensor<Scalar>& y, const SsimOptions& opt = {}) {
  Tape<Scalar> tape;
  return ssim(tape.constant(x), tape.constant(y), opt).value()[0];
}

/// alpha * mean|pred - gt| + (1 - alpha) * (1 - SSIM(pred, gt)).
template <typename Scalar>
Var<Scalar> reconstruction_loss(const Var<Scalar>& pred, const Var<Scalar>& gt, double alpha,
                                const SsimOptions& opt = {}) {
  if (!(pred.shape() == gt.shape()))
    throw std::invalid_argument("loss: shapes " + pred.shape().str() + " and " + gt.shape().str());
  if (alpha < 0 || alpha > 1) throw std::invalid_argument("loss: alpha outside [0, 1]");
  const Scalar a = static_cast<Scalar>(alpha);
  Var<Scalar> l1 = mean(abs(pred - gt));
  if (alpha == 1) return l1;
  Var<Scalar> dssim = add_scalar(scale(ssim(pred, gt, opt), Scalar(-1)), Scalar(1));
  return a * l1 + (Scalar(1) - a) * dssim;
}

template <typename Scalar>
double reconstruction_loss(const Tensor<Scalar>& pred, const Tensor<Scalar>& gt, double alpha) {
  Tape<Scalar> tape;
  return reconstruction_loss(tape.constant(pred), tape.constant(gt), alpha).value()[0];
}

template <typename Scalar>
double mse(const Tensor<Scalar>& x, const Tensor<Scalar>& y) {
  if (!(x.shape() == y.shape())) throw std::invalid_argument("mse: shape mismatch");
  return (x.array().template cast<double>() - y.array().template cast<double>()).square().mean();
}

/// 10 log10(1 / MSE) for unit-range images, capped at 100 dB.
template <typename Scalar>
double psnr(const Tensor<Scalar>& x, const Tensor<Scalar>& y) {
  const double e = mse(x, y);
  if (e < 1e-10) return 100.0;
  return std::min(100.0, 10.0 * std::log10(1.0 / e));
}

/// 2x2 mean pooling; a trailing odd row or column is dropped.
template <typename Scalar>
Tensor<Scalar> avg_pool2(const Tensor<Scalar>& x) {
  const Shape s = x.shape();
  Tensor<Scalar> out({s.n, s.c, s.h / 2, s.w / 2});
  for (Index n = 0; n < s.n; ++n)
    for (Index c = 0; c < s.c; ++c)
      for (Index h = 0; h < s.h / 2; ++h)
        for (Index w = 0; w < s.w / 2; ++w)
          out(n, c, h, w) = (x(n, c, 2 * h, 2 * w) + x(n, c, 2 * h, 2 * w + 1) +
                             x(n, c, 2 * h + 1, 2 * w) + x(n, c, 2 * h + 1, 2 * w + 1)) /
                            Scalar(4);
  return out;
}

inline const std::vector<double>& ms_ssim_weights() {
  static const std::vector<double> w = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
  return w;
}

/// Scales that fit a frame: each level must still hold a full window.
inline int ms_ssim_max_scales(Index h, Index w, int window = 11) {
  int scales = 0;
  while (scales < 5 && h >= window && w >= window) {
    ++scales;
    h /= 2;
    w /= 2;
  }
  return scales;
}

/// Multi-scale SSIM. scales = 0 picks as many as fit (at most five); the
/// leading weights are renormalized to sum to one when fewer are used.
template <typename Scalar>
double ms_ssim(const Tensor<Scalar>& x, const Tensor<Scalar>& y, int scales = 0,
               const SsimOptions& opt = {}) {
  const int fit = ms_ssim_max_scales(x.shape().h, x.shape().w, opt.window);
  if (scales == 0) scales = fit;
  if (scales < 1 || scales > 5 || scales > fit)
    throw std::invalid_argument("ms_ssim: " + x.shape().str() + " too small for " +
                                std::to_string(scales) + " scales");
  const auto& all = ms_ssim_weights();
  double wsum = 0;
  for (int i = 0; i < scales; ++i) wsum += all[i];
  Tensor<Scalar> a = x, b = y;
  double result = 1.0;
  for (int i = 0; i < scales; ++i) {
    Tape<Scalar> tape;
    const SsimTerms<Scalar> t = ssim_terms(tape.constant(a), tape.constant(b), opt);
    const bool last = i == scales - 1;
    const double v = std::max(0.0, static_cast<double>(last ? t.ssim.value()[0] : t.cs.value()[0]));
    result *= std::pow(v, all[i] / wsum);
    if (!last) {
      a = avg_pool2(a);
      b = avg_pool2(b);
    }
  }
  return result;
}

}  // namespace onrep
