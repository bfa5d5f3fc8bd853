#pragma once

// Multi-branch reparameterization blocks, executed literally (one convolution
// chain per branch, outputs summed).

#include "onrep/ops.hpp"

#include <array>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace onrep {

enum class BranchKind {
  Vanilla3x3,
  Asym1x3,
  Asym3x1,
  Point1x1,
  Seq_1x1_3x3,
  Seq_1x1_3x3_1x1,
  AvgPool3x3,
  ScaledFixed,
};

enum class FixedFilter { None, SobelX, SobelY, Laplacian };

struct BranchSpec {
  BranchKind kind = BranchKind::Vanilla3x3;
  FixedFilter filter = FixedFilter::None;

  bool operator==(const BranchSpec&) const = default;
  std::string name() const;
  static BranchSpec parse(const std::string& name);
};

struct BlockConfig {
  Index in_channels = 0;
  Index out_channels = 0;
  /// Inner width of the sequential branches; 0 means in_channels.
  Index mid_channels = 0;
  std::vector<BranchSpec> branches;

  Index mid() const { return mid_channels > 0 ? mid_channels : in_channels; }
  void validate() const;

  /// 3x3 + 1x3 + 3x1 + 1x1-3x3-1x1.
  static BlockConfig erb(Index in, Index out);
};

/// Name, shape and role of one learnable tensor of a branch.
struct ParamSlot {
  std::string name;
  Shape shape;
  bool is_bias = false;
};

/// AvgPool and scaled fixed filters are depthwise; with O != I they are fed
/// through a learnable 1x1 projection first.
inline bool needs_projection(const BranchSpec& spec, const BlockConfig& cfg) {
  return (spec.kind == BranchKind::AvgPool3x3 || spec.kind == BranchKind::ScaledFixed) &&
         cfg.in_channels != cfg.out_channels;
}

std::vector<ParamSlot> branch_layout(const BranchSpec& spec, const BlockConfig& cfg);

template <typename Scalar>
std::array<Scalar, 9> fixed_filter(FixedFilter f) {
  switch (f) {
    case FixedFilter::SobelX: return {-1, 0, 1, -2, 0, 2, -1, 0, 1};
    case FixedFilter::SobelY: return {-1, -2, -1, 0, 0, 0, 1, 2, 1};
    case FixedFilter::Laplacian: return {0, 1, 0, 1, -4, 1, 0, 1, 0};
    case FixedFilter::None: break;
  }
  throw std::invalid_argument("branch has no fixed filter");
}

template <typename Scalar>
std::array<Scalar, 9> mean_filter() {
  std::array<Scalar, 9> f;
  f.fill(Scalar(1) / Scalar(9));
  return f;
}

template <typename Scalar>
using BranchParams = std::vector<Tensor<Scalar>>;
template <typename Scalar>
using BlockParams = std::vector<BranchParams<Scalar>>;

template <typename Scalar>
BranchParams<Scalar> zero_branch_params(const BranchSpec& spec, const BlockConfig& cfg) {
  BranchParams<Scalar> p;
  for (const ParamSlot& slot : branch_layout(spec, cfg)) p.emplace_back(slot.shape);
  return p;
}

template <typename Scalar>
BlockParams<Scalar> zero_block_params(const BlockConfig& cfg) {
  BlockParams<Scalar> p;
  for (const BranchSpec& b : cfg.branches) p.push_back(zero_branch_params<Scalar>(b, cfg));
  return p;
}

namespace detail {
template <typename Scalar>
void fill_uniform(Tensor<Scalar>& t, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(dist(rng));
}
/// Identity channel mix (on the leading diagonal) plus small noise.
template <typename Scalar>
void fill_near_identity(Tensor<Scalar>& t, std::mt19937_64& rng) {
  fill_uniform(t, 0.01, rng);
  const Index diag = std::min(t.shape().n, t.shape().c);
  for (Index d = 0; d < diag; ++d) t(d, d, 0, 0) += Scalar(1);
}
}  // namespace detail

/// Fan-in uniform for spatial kernels, near-identity for the 1x1s inside
/// sequential branches, zero scales for fixed filters.
template <typename Scalar>
BranchParams<Scalar> init_branch_params(const BranchSpec& spec, const BlockConfig& cfg,
                                        std::mt19937_64& rng) {
  BranchParams<Scalar> p = zero_branch_params<Scalar>(spec, cfg);
  auto fan_in = [&rng](Tensor<Scalar>& k, Tensor<Scalar>* b) {
    const Shape& s = k.shape();
    const double bound = 1.0 / std::sqrt(static_cast<double>(s.c * s.h * s.w));
    detail::fill_uniform(k, bound, rng);
    if (b) detail::fill_uniform(*b, bound, rng);
  };
  switch (spec.kind) {
    case BranchKind::Vanilla3x3:
    case BranchKind::Asym1x3:
    case BranchKind::Asym3x1:
    case BranchKind::Point1x1:
      fan_in(p[0], &p[1]);
      break;
    case BranchKind::Seq_1x1_3x3:
      detail::fill_near_identity(p[0], rng);
      fan_in(p[2], &p[3]);
      break;
    case BranchKind::Seq_1x1_3x3_1x1:
      detail::fill_near_identity(p[0], rng);
      fan_in(p[2], &p[3]);
      detail::fill_near_identity(p[4], rng);
      break;
    case BranchKind::AvgPool3x3:
    case BranchKind::ScaledFixed:
      if (needs_projection(spec, cfg)) fan_in(p[0], nullptr);
      break;
  }
  return p;
}

template <typename Scalar>
BlockParams<Scalar> init_block_params(const BlockConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  BlockParams<Scalar> p;
  for (const BranchSpec& b : cfg.branches) p.push_back(init_branch_params<Scalar>(b, cfg, rng));
  return p;
}

/// The branch's defining computation on the tape, without any fusion.
/// Sequential and projected branches zero-pad the input once and then run
/// their 1x1 stages pointwise and the 3x3 stage unpadded, so border pixels
/// see the 1x1 bias exactly as the fused kernel does.
template <typename Scalar>
Var<Scalar> branch_forward(const BranchSpec& spec, const BlockConfig& cfg,
                           std::span<const Var<Scalar>> p, const Var<Scalar>& x) {
  if (x.shape().c != cfg.in_channels)
    throw std::invalid_argument("branch_forward: input has " + std::to_string(x.shape().c) +
                                " channels, block expects " + std::to_string(cfg.in_channels));
  if (p.size() != branch_layout(spec, cfg).size())
    throw std::invalid_argument("branch_forward: wrong parameter count for " + spec.name());
  const Padding none{0, 0};
  switch (spec.kind) {
    case BranchKind::Vanilla3x3: return conv2d(x, p[0], p[1], Padding{1, 1});
    case BranchKind::Asym1x3: return conv2d(x, p[0], p[1], Padding{0, 1});
    case BranchKind::Asym3x1: return conv2d(x, p[0], p[1], Padding{1, 0});
    case BranchKind::Point1x1: return conv2d(x, p[0], p[1], none);
    case BranchKind::Seq_1x1_3x3: {
      Var<Scalar> y = conv2d(pad_spatial(x, Index{1}), p[0], p[1], none);
      return conv2d(y, p[2], p[3], none);
    }
    case BranchKind::Seq_1x1_3x3_1x1: {
      Var<Scalar> y = conv2d(pad_spatial(x, Index{1}), p[0], p[1], none);
      y = conv2d(y, p[2], p[3], none);
      return conv2d(y, p[4], p[5], none);
    }
    case BranchKind::AvgPool3x3: {
      if (needs_projection(spec, cfg))
        return depthwise3x3(conv2d(pad_spatial(x, Index{1}), p[0], p[1], none),
                            mean_filter<Scalar>(), 0);
      return depthwise3x3(x, mean_filter<Scalar>(), 1);
    }
    case BranchKind::ScaledFixed: {
      const auto filter = fixed_filter<Scalar>(spec.filter);
      if (needs_projection(spec, cfg)) {
        Var<Scalar> y = conv2d(pad_spatial(x, Index{1}), p[0], p[1], none);
        return scale_channels(depthwise3x3(y, filter, 0), p[2]);
      }
      return scale_channels(depthwise3x3(x, filter, 1), p[0]);
    }
  }
  throw std::logic_error("unhandled branch kind");
}

/// Splits a flat parameter list into per-branch spans following the block layout.
template <typename T>
std::vector<std::span<const T>> split_by_branch(const BlockConfig& cfg, std::span<const T> flat) {
  std::vector<std::span<const T>> out;
  std::size_t offset = 0;
  for (const BranchSpec& b : cfg.branches) {
    const std::size_t n = branch_layout(b, cfg).size();
    if (offset + n > flat.size()) throw std::invalid_argument("too few block parameters");
    out.push_back(flat.subspan(offset, n));
    offset += n;
  }
  if (offset != flat.size()) throw std::invalid_argument("too many block parameters");
  return out;
}

/// Sum of every branch output, left to right in branch order.
template <typename Scalar>
Var<Scalar> block_forward_explicit(const BlockConfig& cfg, std::span<const Var<Scalar>> flat,
                                   const Var<Scalar>& x) {
  cfg.validate();
  const auto per_branch = split_by_branch(cfg, flat);
  Var<Scalar> out = branch_forward(cfg.branches[0], cfg, per_branch[0], x);
  for (std::size_t b = 1; b < cfg.branches.size(); ++b)
    out = out + branch_forward(cfg.branches[b], cfg, per_branch[b], x);
  return out;
}

template <typename Scalar>
std::vector<Var<Scalar>> constants(Tape<Scalar>& tape, const BlockParams<Scalar>& params) {
  std::vector<Var<Scalar>> vars;
  for (const auto& branch : params)
    for (const auto& t : branch) vars.push_back(tape.constant(t));
  return vars;
}

template <typename Scalar>
Tensor<Scalar> branch_forward(const BranchSpec& spec, const BlockConfig& cfg,
                              const BranchParams<Scalar>& params, const Tensor<Scalar>& x) {
  Tape<Scalar> tape;
  std::vector<Var<Scalar>> vars;
  for (const auto& t : params) vars.push_back(tape.constant(t));
  return branch_forward<Scalar>(spec, cfg, vars, tape.constant(x)).value();
}

template <typename Scalar>
Tensor<Scalar> block_forward_explicit(const BlockConfig& cfg, const BlockParams<Scalar>& params,
                                      const Tensor<Scalar>& x) {
  Tape<Scalar> tape;
  const std::vector<Var<Scalar>> vars = constants(tape, params);
  return block_forward_explicit<Scalar>(cfg, vars, tape.constant(x)).value();
}

/// One row of the branch ablation table.
enum class ScaledFilterChoice { None, AvgPool, Sobel, Laplacian, SobelLaplacian };

struct Table3Flags {
  bool vanilla = true;
  bool asymmetric = false;
  bool pointwise = false;
  bool seq_1x1_3x3 = false;
  ScaledFilterChoice scaled = ScaledFilterChoice::None;
  bool seq_1x1_3x3_1x1 = false;

  std::string label() const;
};

BlockConfig make_table3_config(const Table3Flags& flags, Index in_channels, Index out_channels);

/// The 14 ablation rows in table order; the last row is the ERB.
const std::vector<Table3Flags>& table3_rows();

/// Branch count with the Sobel X/Y pair counted as one filter branch.
std::size_t grouped_branch_count(const BlockConfig& cfg);

}  // namespace onrep
