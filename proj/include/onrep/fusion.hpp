#pragma once

// Closed-form collapse of a multi-branch block into one 3x3 convolution.
// Everything is expressed with tape ops so the same code runs inside the
// training graph (online reparameterization) and offline (structural fusion).

#include "onrep/rep_blocks.hpp"

namespace onrep {

template <typename Scalar>
struct FusedVars {
  Var<Scalar> kernel;
  Var<Scalar> bias;
};

template <typename Scalar>
struct FusedConv {
  Tensor<Scalar> kernel;  // (O, I, 3, 3)
  Tensor<Scalar> bias;    // (O, 1, 1, 1)

  Index parameter_count() const { return kernel.size() + bias.size(); }
};

template <typename Scalar>
Var<Scalar> pad_to_3x3(const Var<Scalar>& k) {
  if (k.shape().h == 3 && k.shape().w == 3) return k;
  return pad_kernel_3x3(k);
}

/// pad(K_1x3) + pad(K_3x1), b_1x3 + b_3x1.
template <typename Scalar>
FusedVars<Scalar> fuse_asymmetric(const Var<Scalar>& k13, const Var<Scalar>& b13,
                                  const Var<Scalar>& k31, const Var<Scalar>& b31) {
  const Shape a = k13.shape();
  const Shape b = k31.shape();
  if (a.n != b.n || a.c != b.c || a.h != 1 || a.w != 3 || b.h != 3 || b.w != 1)
    throw std::invalid_argument("fuse_asymmetric: expected matching 1x3 and 3x1 kernels, got " +
                                a.str() + " and " + b.str());
  return {pad_to_3x3(k13) + pad_to_3x3(k31), b13 + b31};
}

/// Absorb a 1x1 (I -> M) convolution into the following 3x3 (M -> O):
///   K[o][i] = sum_m K2[o][m] * K1[m][i]
///   B[o]    = B2[o] + sum_m B1[m] * sum_hw K2[o][m][hw]
template <typename Scalar>
FusedVars<Scalar> fuse_sequential_pair(const Var<Scalar>& k1, const Var<Scalar>& b1,
                                       const Var<Scalar>& k2, const Var<Scalar>& b2) {
  if (k1.shape().h != 1 || k1.shape().w != 1)
    throw std::invalid_argument("fuse_sequential_pair: first kernel must be 1x1");
  if (k1.shape().n != k2.shape().c)
    throw std::invalid_argument("fuse_sequential_pair: inner channels " +
                                std::to_string(k1.shape().n) + " vs " +
                                std::to_string(k2.shape().c));
  Var<Scalar> kernel = mix_right(k2, k1);
  Var<Scalar> bias = b2 + mix_left(kernel_sum(k2), b1);
  return {kernel, bias};
}

/// Fold a trailing 1x1 (M -> O) into an already fused kernel (M outputs):
///   K'[o] = sum_m K3[o][m] * K[m],  B'[o] = B3[o] + sum_m K3[o][m] * B[m]
template <typename Scalar>
FusedVars<Scalar> fuse_post_pointwise(const Var<Scalar>& kernel, const Var<Scalar>& bias,
                                      const Var<Scalar>& k3, const Var<Scalar>& b3) {
  if (k3.shape().h != 1 || k3.shape().w != 1 || k3.shape().c != kernel.shape().n)
    throw std::invalid_argument("fuse_post_pointwise: cannot apply " + k3.shape().str() +
                                " after " + kernel.shape().str());
  return {mix_left(k3, kernel), b3 + mix_left(k3, bias)};
}

template <typename Scalar>
FusedVars<Scalar> fuse_branch(const BranchSpec& spec, const BlockConfig& cfg,
                              std::span<const Var<Scalar>> p, Tape<Scalar>& tape) {
  if (p.size() != branch_layout(spec, cfg).size())
    throw std::invalid_argument("fuse_branch: wrong parameter count for " + spec.name());
  const Index o = cfg.out_channels;
  auto zero_bias = [&] { return tape.constant(Tensor<Scalar>({o, 1, 1, 1})); };
  switch (spec.kind) {
    case BranchKind::Vanilla3x3: return {p[0], p[1]};
    case BranchKind::Asym1x3:
    case BranchKind::Asym3x1:
    case BranchKind::Point1x1: return {pad_to_3x3(p[0]), p[1]};
    case BranchKind::Seq_1x1_3x3: return fuse_sequential_pair(p[0], p[1], p[2], p[3]);
    case BranchKind::Seq_1x1_3x3_1x1: {
      FusedVars<Scalar> tmp = fuse_sequential_pair(p[0], p[1], p[2], p[3]);
      return fuse_post_pointwise(tmp.kernel, tmp.bias, p[4], p[5]);
    }
    case BranchKind::AvgPool3x3:
    case BranchKind::ScaledFixed: {
      const bool pool = spec.kind == BranchKind::AvgPool3x3;
      Var<Scalar> depthwise;
      if (pool) {
        Tensor<Scalar> k({o, o, 3, 3});
        for (Index c = 0; c < o; ++c)
          for (Index t = 0; t < 9; ++t) k(c, c, t / 3, t % 3) = Scalar(1) / Scalar(9);
        depthwise = tape.constant(std::move(k));
      } else {
        const Var<Scalar>& s = needs_projection(spec, cfg) ? p[2] : p[0];
        depthwise = diag_kernel(s, fixed_filter<Scalar>(spec.filter));
      }
      if (needs_projection(spec, cfg))
        return fuse_sequential_pair(p[0], p[1], depthwise, zero_bias());
      return {depthwise, zero_bias()};
    }
  }
  throw std::logic_error("unhandled branch kind");
}

/// K' = sum of branch kernels, B' = sum of branch biases, in branch order.
template <typename Scalar>
FusedVars<Scalar> fuse_block(const BlockConfig& cfg, std::span<const Var<Scalar>> flat,
                             Tape<Scalar>& tape) {
  cfg.validate();
  const auto per_branch = split_by_branch(cfg, flat);
  FusedVars<Scalar> acc = fuse_branch(cfg.branches[0], cfg, per_branch[0], tape);
  for (std::size_t b = 1; b < cfg.branches.size(); ++b) {
    FusedVars<Scalar> next = fuse_branch(cfg.branches[b], cfg, per_branch[b], tape);
    acc = {acc.kernel + next.kernel, acc.bias + next.bias};
  }
  return acc;
}

template <typename Scalar>
FusedConv<Scalar> fuse_branch(const BranchSpec& spec, const BlockConfig& cfg,
                              const BranchParams<Scalar>& params) {
  Tape<Scalar> tape;
  std::vector<Var<Scalar>> vars;
  for (const auto& t : params) vars.push_back(tape.constant(t));
  FusedVars<Scalar> f = fuse_branch<Scalar>(spec, cfg, vars, tape);
  return {f.kernel.value(), f.bias.value()};
}

template <typename Scalar>
FusedConv<Scalar> fuse_block(const BlockConfig& cfg, const BlockParams<Scalar>& params) {
  Tape<Scalar> tape;
  const std::vector<Var<Scalar>> vars = constants(tape, params);
  FusedVars<Scalar> f = fuse_block<Scalar>(cfg, vars, tape);
  return {f.kernel.value(), f.bias.value()};
}

/// Value-level conveniences over the tape functions above.
template <typename Scalar>
Tensor<Scalar> pad_to_3x3(const Tensor<Scalar>& k) {
  Tape<Scalar> tape;
  return pad_to_3x3(tape.constant(k)).value();
}

template <typename Scalar>
FusedConv<Scalar> fuse_asymmetric(const Tensor<Scalar>& k13, const Tensor<Scalar>& b13,
                                  const Tensor<Scalar>& k31, const Tensor<Scalar>& b31) {
  Tape<Scalar> t;
  FusedVars<Scalar> f =
      fuse_asymmetric(t.constant(k13), t.constant(b13), t.constant(k31), t.constant(b31));
  return {f.kernel.value(), f.bias.value()};
}

template <typename Scalar>
FusedConv<Scalar> fuse_sequential_pair(const Tensor<Scalar>& k1, const Tensor<Scalar>& b1,
                                       const Tensor<Scalar>& k2, const Tensor<Scalar>& b2) {
  Tape<Scalar> t;
  FusedVars<Scalar> f =
      fuse_sequential_pair(t.constant(k1), t.constant(b1), t.constant(k2), t.constant(b2));
  return {f.kernel.value(), f.bias.value()};
}

template <typename Scalar>
FusedConv<Scalar> fuse_post_pointwise(const Tensor<Scalar>& kernel, const Tensor<Scalar>& bias,
                                      const Tensor<Scalar>& k3, const Tensor<Scalar>& b3) {
  Tape<Scalar> t;
  FusedVars<Scalar> f =
      fuse_post_pointwise(t.constant(kernel), t.constant(bias), t.constant(k3), t.constant(b3));
  return {f.kernel.value(), f.bias.value()};
}

template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const FusedConv<Scalar>& f) {
  return kernels::conv2d(x, f.kernel, f.bias, Padding{1, 1});
}

}  // namespace onrep
