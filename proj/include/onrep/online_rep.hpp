#pragma once

#include "onrep/fusion.hpp"

#include <algorithm>
#include <chrono>
#include <string>
#include <vector>

namespace onrep {

enum class LayerMode { OnlineTrain, ExplicitTrain, Deployed };

inline const char* mode_name(LayerMode m) {
  switch (m) {
    case LayerMode::OnlineTrain: return "online";
    case LayerMode::ExplicitTrain: return "explicit";
    case LayerMode::Deployed: return "deployed";
  }
  return "?";
}

inline LayerMode parse_mode(const std::string& s) {
  if (s == "online") return LayerMode::OnlineTrain;
  if (s == "explicit") return LayerMode::ExplicitTrain;
  if (s == "deployed") return LayerMode::Deployed;
  throw std::invalid_argument("unknown layer mode '" + s + "'");
}

/// A reparameterizable 3x3 convolution layer. Train-form layers hold branch
/// parameters and run either the fused (online) or the literal multi-branch
/// (explicit) computation; deployed layers hold one 3x3 kernel and bias.
template <typename Scalar>
class RepLayer {
 public:
  RepLayer() = default;

  static RepLayer train_form(BlockConfig cfg, BlockParams<Scalar> params,
                             LayerMode mode = LayerMode::OnlineTrain) {
    cfg.validate();
    if (mode == LayerMode::Deployed) throw std::invalid_argument("train-form layer cannot be deployed mode");
    if (params.size() != cfg.branches.size()) throw std::invalid_argument("branch parameter count mismatch");
    for (std::size_t b = 0; b < params.size(); ++b) {
      const auto layout = branch_layout(cfg.branches[b], cfg);
      if (layout.size() != params[b].size())
        throw std::invalid_argument("branch " + cfg.branches[b].name() + " parameter count mismatch");
      for (std::size_t i = 0; i < layout.size(); ++i)
        if (!(layout[i].shape == params[b][i].shape()))
          throw std::invalid_argument("branch " + cfg.branches[b].name() + " " + layout[i].name +
                                      " has shape " + params[b][i].shape().str());
    }
    RepLayer layer;
    layer.cfg_ = std::move(cfg);
    layer.branches_ = std::move(params);
    layer.mode_ = mode;
    return layer;
  }

  static RepLayer deployed(FusedConv<Scalar> conv) {
    const Shape& k = conv.kernel.shape();
    if (k.h != 3 || k.w != 3 || conv.bias.size() != k.n)
      throw std::invalid_argument("deployed layer needs a 3x3 kernel and matching bias");
    RepLayer layer;
    layer.cfg_ = {k.c, k.n, 0, {{BranchKind::Vanilla3x3}}};
    layer.fused_ = std::move(conv);
    layer.mode_ = LayerMode::Deployed;
    return layer;
  }

  /// Single 3x3 convolution with fan-in uniform initialization.
  static RepLayer plain(Index in, Index out, std::mt19937_64& rng) {
    BlockConfig cfg{in, out, 0, {{BranchKind::Vanilla3x3}}};
    BranchParams<Scalar> p = init_branch_params<Scalar>(cfg.branches[0], cfg, rng);
    return deployed({std::move(p[0]), std::move(p[1])});
  }

  LayerMode mode() const { return mode_; }
  bool is_deployed() const { return mode_ == LayerMode::Deployed; }
  void set_mode(LayerMode mode) {
    if (is_deployed() || mode == LayerMode::Deployed)
      throw std::logic_error("use structural_fuse to deploy; deployed layers stay deployed");
    mode_ = mode;
  }
  const BlockConfig& config() const { return cfg_; }
  Index in_channels() const { return cfg_.in_channels; }
  Index out_channels() const { return cfg_.out_channels; }
  const BlockParams<Scalar>& branch_params() const { return branches_; }
  const FusedConv<Scalar>& fused() const {
    if (!is_deployed()) throw std::logic_error("layer is not deployed");
    return fused_;
  }

  /// Learnable tensors in a fixed order (branch by branch, or kernel then bias).
  std::vector<Tensor<Scalar>*> parameters() {
    std::vector<Tensor<Scalar>*> out;
    if (is_deployed()) return {&fused_.kernel, &fused_.bias};
    for (auto& branch : branches_)
      for (auto& t : branch) out.push_back(&t);
    return out;
  }
  std::vector<const Tensor<Scalar>*> parameters() const {
    std::vector<const Tensor<Scalar>*> out;
    for (Tensor<Scalar>* t : const_cast<RepLayer*>(this)->parameters()) out.push_back(t);
    return out;
  }
  std::vector<ParamSlot> parameter_slots() const {
    if (is_deployed())
      return {{"weight", fused_.kernel.shape()}, {"bias", fused_.bias.shape(), true}};
    std::vector<ParamSlot> out;
    for (std::size_t b = 0; b < cfg_.branches.size(); ++b)
      for (ParamSlot slot : branch_layout(cfg_.branches[b], cfg_)) {
        slot.name = "b" + std::to_string(b) + "." + cfg_.branches[b].name() + "." + slot.name;
        out.push_back(std::move(slot));
      }
    return out;
  }
  Index parameter_count() const {
    Index n = 0;
    for (const Tensor<Scalar>* t : parameters()) n += t->size();
    return n;
  }

  /// Fuse the branch parameters on the tape and run one convolution.
  Var<Scalar> online_forward(std::span<const Var<Scalar>> params, const Var<Scalar>& x) const {
    if (mode_ != LayerMode::OnlineTrain)
      throw std::logic_error(std::string("online_forward on a layer in ") + mode_name(mode_) + " mode");
    FusedVars<Scalar> f = fuse_block<Scalar>(cfg_, params, x.tape());
    return conv2d(x, f.kernel, f.bias, Padding{1, 1});
  }

  Var<Scalar> explicit_forward(std::span<const Var<Scalar>> params, const Var<Scalar>& x) const {
    if (mode_ != LayerMode::ExplicitTrain)
      throw std::logic_error(std::string("explicit_forward on a layer in ") + mode_name(mode_) + " mode");
    return block_forward_explicit<Scalar>(cfg_, params, x);
  }

  /// `params` must be the Vars of parameters(), in the same order.
  Var<Scalar> forward(std::span<const Var<Scalar>> params, const Var<Scalar>& x) const {
    switch (mode_) {
      case LayerMode::OnlineTrain: return online_forward(params, x);
      case LayerMode::ExplicitTrain: return explicit_forward(params, x);
      case LayerMode::Deployed:
        if (params.size() != 2) throw std::invalid_argument("deployed layer takes kernel and bias");
        return conv2d(x, params[0], params[1], Padding{1, 1});
    }
    throw std::logic_error("unhandled layer mode");
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x) const {
    Tape<Scalar> tape;
    std::vector<Var<Scalar>> vars;
    for (const Tensor<Scalar>* t : parameters()) vars.push_back(tape.constant(*t));
    return forward(vars, tape.constant(x)).value();
  }

  /// Collapse the branches into one 3x3 convolution. Irreversible.
  RepLayer structural_fuse() const {
    if (is_deployed()) throw std::logic_error("layer is already deployed");
    return deployed(fuse_block(cfg_, branches_));
  }

 private:
  BlockConfig cfg_;
  BlockParams<Scalar> branches_;
  FusedConv<Scalar> fused_;
  LayerMode mode_ = LayerMode::Deployed;
};

/// Mean wall-clock seconds of one forward + backward of sum(layer(x)) per
/// layer, as the median over five groups of repetitions (after warmup).
template <typename Scalar>
std::vector<double> step_time_probe(const std::vector<RepLayer<Scalar>>& layers,
                                    const Tensor<Scalar>& x, int repetitions, int warmup = 3) {
  if (repetitions < 10) throw std::invalid_argument("step_time_probe needs at least 10 repetitions");
  using Clock = std::chrono::steady_clock;
  constexpr int groups = 5;
  std::vector<double> result;
  for (const RepLayer<Scalar>& layer : layers) {
    auto run_once = [&] {
      Tape<Scalar> tape;
      std::vector<Var<Scalar>> params = tape.parameters(layer.parameters());
      Var<Scalar> out = layer.forward(params, tape.constant(x));
      tape.backward(sum(out));
    };
    for (int i = 0; i < warmup; ++i) run_once();
    std::vector<double> means;
    const int per_group = std::max(1, repetitions / groups);
    for (int g = 0; g < groups; ++g) {
      const auto start = Clock::now();
      for (int i = 0; i < per_group; ++i) run_once();
      means.push_back(std::chrono::duration<double>(Clock::now() - start).count() / per_group);
    }
    std::nth_element(means.begin(), means.begin() + groups / 2, means.end());
    result.push_back(means[groups / 2]);
  }
  return result;
}

}  // namespace onrep
