#pragma once

#include "onrep/online_rep.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace onrep {

/// How decoder stages are built: branched with online or explicit execution,
/// or a single 3x3 convolution per stage.
enum class StageForm { Online, Explicit, Plain };

const char* stage_form_name(StageForm f);
StageForm parse_stage_form(const std::string& s);

struct ModelConfig {
  Index frames = 16;
  Index height = 32;
  Index width = 64;
  std::vector<Index> factors = {2, 2};
  Index c0 = 16;
  Index channel_floor = 8;
  Index mlp_hidden = 64;
  double pe_base = 1.25;
  Index pe_levels = 40;
  std::vector<BranchSpec> block = BlockConfig::erb(1, 1).branches;
  Index mid_channels = 0;
  StageForm form = StageForm::Online;

  Index upsample() const;
  Index h0() const { return height / upsample(); }
  Index w0() const { return width / upsample(); }
  /// Channels after stage k's pixel shuffle (k counted from 0).
  Index stage_channels(std::size_t k) const;
  Index stage_in(std::size_t k) const { return k == 0 ? c0 : stage_channels(k - 1); }
  BlockConfig stage_block(std::size_t k) const;
  void validate() const;
};

/// (sin(b^0 pi t), cos(b^0 pi t), ..., sin(b^(L-1) pi t), cos(b^(L-1) pi t)).
std::vector<double> positional_encode(double t, double b, Index levels);
/// frame / (T - 1), with a single frame mapped to 0.
double normalized_index(Index frame, Index frames);

struct ParamInfo {
  std::string name;
  Shape shape;
  bool is_bias = false;
};

class Model {
 public:
  Model() = default;
  static Model create(const ModelConfig& cfg, std::uint64_t seed);
  /// Deploy-form structure for `cfg` with all parameters zero.
  static Model deploy_skeleton(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  const std::vector<RepLayer<float>>& stages() const { return stages_; }
  bool deployed() const;
  /// Switch branched stages between online and explicit execution.
  void set_form(StageForm form);

  std::vector<TensorF*> parameters();
  std::vector<const TensorF*> parameters() const;
  std::vector<ParamInfo> parameter_info() const;
  Index parameter_count() const;

  /// Frames for the given indices as (N, 3, H, W), recorded on the params' tape.
  Var<float> forward(std::span<const Var<float>> params, const std::vector<Index>& frames) const;
  TensorF decode(const std::vector<Index>& frames) const;

  /// Every branched stage collapsed to one 3x3 convolution.
  Model structural_fuse() const;

  /// Rebuilds a model of the same structure with parameters replaced in order.
  Model with_parameters(const std::vector<TensorF>& values) const;

  void save(const std::filesystem::path& path, long step = 0) const;
  static Model load(const std::filesystem::path& path, long* step = nullptr);
  std::vector<char> serialize(long step = 0) const;
  static Model deserialize(const std::vector<char>& bytes, long* step = nullptr);

 private:
  ModelConfig cfg_;
  TensorF w1_, b1_, w2_, b2_;
  std::vector<RepLayer<float>> stages_;
  FusedConv<float> head_;
};

struct Complexity {
  Index params = 0;
  /// Multiply-accumulates per decoded frame, fusion arithmetic included.
  Index macs = 0;
};

Index conv_macs(Index in, Index out, Index kh, Index kw, Index h, Index w);
/// Per-frame MACs of one block executed in the given layer mode at output size h x w.
Index block_macs(const BlockConfig& cfg, LayerMode mode, Index h, Index w);
Complexity count_params_and_flops(const ModelConfig& cfg, LayerMode mode);

std::string model_config_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);

}  // namespace onrep
