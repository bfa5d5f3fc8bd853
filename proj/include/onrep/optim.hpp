#pragma once

#include "onrep/tensor.hpp"

#include <cmath>
#include <numbers>
#include <span>
#include <stdexcept>
#include <vector>

namespace onrep {

struct AdamOptions {
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename Scalar>
struct AdamState {
  std::vector<Tensor<Scalar>> m;
  std::vector<Tensor<Scalar>> v;
  std::vector<long> steps;  // per parameter, so skipped tensors keep their own bias correction
};

/// Bias-corrected Adam. A tensor whose gradient is entirely zero is treated as
/// absent and left untouched, state included.
template <typename Scalar>
void adam_step(std::span<Tensor<Scalar>* const> params, std::span<const Tensor<Scalar>> grads,
               AdamState<Scalar>& state, double lr, const AdamOptions& opt = {}) {
  if (params.size() != grads.size()) throw std::invalid_argument("adam_step: parameter/gradient count mismatch");
  if (state.m.empty()) {
    for (const Tensor<Scalar>* p : params) {
      state.m.push_back(Tensor<Scalar>::zeros(p->shape()));
      state.v.push_back(Tensor<Scalar>::zeros(p->shape()));
    }
    state.steps.assign(params.size(), 0);
  }
  if (state.m.size() != params.size()) throw std::invalid_argument("adam_step: state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<Scalar>& p = *params[i];
    const Tensor<Scalar>& g = grads[i];
    if (!(p.shape() == g.shape()) || !(state.m[i].shape() == p.shape()))
      throw std::invalid_argument("adam_step: shape mismatch at parameter " + std::to_string(i));
    if ((g.array() == Scalar(0)).all()) continue;
    const long t = ++state.steps[i];
    const Scalar b1 = static_cast<Scalar>(opt.beta1);
    const Scalar b2 = static_cast<Scalar>(opt.beta2);
    const Scalar c1 = static_cast<Scalar>(1.0 - std::pow(opt.beta1, t));
    const Scalar c2 = static_cast<Scalar>(1.0 - std::pow(opt.beta2, t));
    const Scalar step = static_cast<Scalar>(lr) / c1;
    const Scalar inv_c2 = Scalar(1) / c2;
    const Scalar eps = static_cast<Scalar>(opt.eps);
    Scalar* pm = state.m[i].data().data();
    Scalar* pv = state.v[i].data().data();
    Scalar* pp = p.data().data();
    const Scalar* pg = g.data().data();
    for (Index k = 0, n = p.size(); k < n; ++k) {
      pm[k] = b1 * pm[k] + (Scalar(1) - b1) * pg[k];
      pv[k] = b2 * pv[k] + (Scalar(1) - b2) * pg[k] * pg[k];
      pp[k] -= step * pm[k] / (std::sqrt(pv[k] * inv_c2) + eps);
    }
  }
}

/// lr0 * (1 + cos(pi * step / total)) / 2, reaching zero at step == total.
inline double cosine_lr(double step, double total, double lr0) {
  if (total <= 0 || step < 0 || step > total)
    throw std::invalid_argument("cosine_lr: step " + std::to_string(step) + " outside [0, " +
                                std::to_string(total) + "]");
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * step / total));
}

}  // namespace onrep
