#include "onrep/model.hpp"

#include <json.hpp>

#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

namespace onrep {

using json = nlohmann::json;

const char* stage_form_name(StageForm f) {
  switch (f) {
    case StageForm::Online: return "online";
    case StageForm::Explicit: return "explicit";
    case StageForm::Plain: return "plain";
  }
  return "?";
}

StageForm parse_stage_form(const std::string& s) {
  for (StageForm f : {StageForm::Online, StageForm::Explicit, StageForm::Plain})
    if (s == stage_form_name(f)) return f;
  throw std::invalid_argument("unknown mode '" + s + "' (online, explicit, plain)");
}

Index ModelConfig::upsample() const {
  Index p = 1;
  for (Index f : factors) p *= f;
  return p;
}

Index ModelConfig::stage_channels(std::size_t k) const {
  return std::max(channel_floor, c0 >> k);
}

BlockConfig ModelConfig::stage_block(std::size_t k) const {
  const Index f = factors.at(k);
  return {stage_in(k), f * f * stage_channels(k), mid_channels, block};
}

void ModelConfig::validate() const {
  auto positive = [](Index v, const char* what) {
    if (v <= 0) throw std::invalid_argument(std::string(what) + " must be positive");
  };
  positive(frames, "frames");
  positive(height, "height");
  positive(width, "width");
  positive(c0, "c0");
  positive(channel_floor, "channel_floor");
  positive(mlp_hidden, "mlp_hidden");
  positive(pe_levels, "pe_levels");
  if (factors.empty()) throw std::invalid_argument("at least one upsampling factor is required");
  for (Index f : factors) positive(f, "upsampling factor");
  if (height % upsample() != 0 || width % upsample() != 0)
    throw std::invalid_argument("factor product " + std::to_string(upsample()) + " does not divide " +
                                std::to_string(height) + "x" + std::to_string(width));
  if (pe_base <= 0) throw std::invalid_argument("pe_base must be positive");
  if (form != StageForm::Plain) BlockConfig{1, 1, mid_channels, block}.validate();
}

std::vector<double> positional_encode(double t, double b, Index levels) {
  if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("positional_encode: t outside [0, 1]");
  std::vector<double> out;
  out.reserve(2 * levels);
  for (Index l = 0; l < levels; ++l) {
    const double a = std::pow(b, static_cast<double>(l)) * std::numbers::pi * t;
    out.push_back(std::sin(a));
    out.push_back(std::cos(a));
  }
  return out;
}

double normalized_index(Index frame, Index frames) {
  if (frame < 0 || frame >= frames) throw std::out_of_range("frame index " + std::to_string(frame));
  return frames == 1 ? 0.0 : static_cast<double>(frame) / static_cast<double>(frames - 1);
}

namespace {

void fill_fan_in(TensorF& t, Index fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<float>(dist(rng));
}

LayerMode layer_mode(StageForm f) {
  return f == StageForm::Explicit ? LayerMode::ExplicitTrain : LayerMode::OnlineTrain;
}

}  // namespace

Model Model::create(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  Model m;
  m.cfg_ = cfg;
  const Index din = 2 * cfg.pe_levels;
  const Index dout = cfg.c0 * cfg.h0() * cfg.w0();
  m.w1_ = TensorF({cfg.mlp_hidden, din, 1, 1});
  m.b1_ = TensorF({cfg.mlp_hidden, 1, 1, 1});
  m.w2_ = TensorF({dout, cfg.mlp_hidden, 1, 1});
  m.b2_ = TensorF({dout, 1, 1, 1});
  fill_fan_in(m.w1_, din, rng);
  fill_fan_in(m.b1_, din, rng);
  fill_fan_in(m.w2_, cfg.mlp_hidden, rng);
  fill_fan_in(m.b2_, cfg.mlp_hidden, rng);
  for (std::size_t k = 0; k < cfg.factors.size(); ++k) {
    const BlockConfig bc = cfg.stage_block(k);
    if (cfg.form == StageForm::Plain)
      m.stages_.push_back(RepLayer<float>::plain(bc.in_channels, bc.out_channels, rng));
    else
      m.stages_.push_back(RepLayer<float>::train_form(bc, init_block_params<float>(bc, rng), layer_mode(cfg.form)));
  }
  const Index last = cfg.stage_channels(cfg.factors.size() - 1);
  m.head_.kernel = TensorF({3, last, 3, 3});
  fill_fan_in(m.head_.kernel, last * 9, rng);
  m.head_.bias = TensorF::constant({3, 1, 1, 1}, 0.5f);
  return m;
}

Model Model::deploy_skeleton(const ModelConfig& cfg) {
  ModelConfig plain = cfg;
  plain.form = StageForm::Plain;
  Model m = create(plain, 0);
  for (TensorF* t : m.parameters()) t->data().setZero();
  m.cfg_ = cfg;
  return m;
}

bool Model::deployed() const {
  for (const auto& s : stages_)
    if (!s.is_deployed()) return false;
  return true;
}

void Model::set_form(StageForm form) {
  if (form == StageForm::Plain) throw std::invalid_argument("set_form: plain is fixed at creation");
  for (auto& s : stages_)
    if (!s.is_deployed()) s.set_mode(layer_mode(form));
  if (cfg_.form != StageForm::Plain) cfg_.form = form;
}

std::vector<TensorF*> Model::parameters() {
  std::vector<TensorF*> out = {&w1_, &b1_, &w2_, &b2_};
  for (auto& s : stages_)
    for (TensorF* t : s.parameters()) out.push_back(t);
  out.push_back(&head_.kernel);
  out.push_back(&head_.bias);
  return out;
}

std::vector<const TensorF*> Model::parameters() const {
  std::vector<const TensorF*> out;
  for (TensorF* t : const_cast<Model*>(this)->parameters()) out.push_back(t);
  return out;
}

std::vector<ParamInfo> Model::parameter_info() const {
  std::vector<ParamInfo> out = {{"mlp.w1", w1_.shape()},
                                {"mlp.b1", b1_.shape(), true},
                                {"mlp.w2", w2_.shape()},
                                {"mlp.b2", b2_.shape(), true}};
  for (std::size_t k = 0; k < stages_.size(); ++k)
    for (const ParamSlot& slot : stages_[k].parameter_slots())
      out.push_back({"stage" + std::to_string(k) + "." + slot.name, slot.shape, slot.is_bias});
  out.push_back({"head.weight", head_.kernel.shape()});
  out.push_back({"head.bias", head_.bias.shape(), true});
  return out;
}

Index Model::parameter_count() const {
  Index n = 0;
  for (const TensorF* t : parameters()) n += t->size();
  return n;
}

Var<float> Model::forward(std::span<const Var<float>> params, const std::vector<Index>& frames) const {
  if (params.size() != parameters().size()) throw std::invalid_argument("model forward: wrong parameter count");
  if (frames.empty()) throw std::invalid_argument("model forward: no frames requested");
  Tape<float>& tape = params[0].tape();
  const Index n = static_cast<Index>(frames.size());
  const Index din = 2 * cfg_.pe_levels;
  TensorF pe({n, din, 1, 1});
  for (Index i = 0; i < n; ++i) {
    const auto enc = positional_encode(normalized_index(frames[i], cfg_.frames), cfg_.pe_base, cfg_.pe_levels);
    for (Index j = 0; j < din; ++j) pe[i * din + j] = static_cast<float>(enc[j]);
  }
  Var<float> x = gelu(linear(tape.constant(std::move(pe)), params[0], params[1]));
  x = linear(x, params[2], params[3]);
  x = reshape(x, Shape{n, cfg_.c0, cfg_.h0(), cfg_.w0()});
  std::size_t offset = 4;
  for (std::size_t k = 0; k < stages_.size(); ++k) {
    const std::size_t count = stages_[k].parameters().size();
    x = stages_[k].forward(params.subspan(offset, count), x);
    x = gelu(pixel_shuffle(x, cfg_.factors[k]));
    offset += count;
  }
  x = conv2d(x, params[offset], params[offset + 1], Padding{1, 1});
  return clamp(x, 0.0f, 1.0f);
}

TensorF Model::decode(const std::vector<Index>& frames) const {
  Tape<float> tape;
  std::vector<Var<float>> vars;
  for (const TensorF* t : parameters()) vars.push_back(tape.constant(*t));
  return forward(vars, frames).value();
}

Model Model::structural_fuse() const {
  if (deployed()) throw std::logic_error("model is already in deploy form");
  Model m = *this;
  for (auto& s : m.stages_)
    if (!s.is_deployed()) s = s.structural_fuse();
  return m;
}

Model Model::with_parameters(const std::vector<TensorF>& values) const {
  Model m = *this;
  auto params = m.parameters();
  if (values.size() != params.size()) throw std::invalid_argument("with_parameters: wrong tensor count");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!(values[i].shape() == params[i]->shape()))
      throw std::invalid_argument("with_parameters: shape mismatch at " + std::to_string(i));
    *params[i] = values[i];
  }
  return m;
}

std::string model_config_json(const ModelConfig& cfg) {
  json j;
  j["frames"] = cfg.frames;
  j["height"] = cfg.height;
  j["width"] = cfg.width;
  j["factors"] = cfg.factors;
  j["c0"] = cfg.c0;
  j["channel_floor"] = cfg.channel_floor;
  j["mlp_hidden"] = cfg.mlp_hidden;
  j["pe_base"] = cfg.pe_base;
  j["pe_levels"] = cfg.pe_levels;
  std::vector<std::string> names;
  for (const BranchSpec& b : cfg.block) names.push_back(b.name());
  j["block"] = names;
  j["mid_channels"] = cfg.mid_channels;
  j["mode"] = stage_form_name(cfg.form);
  return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
  const json j = json::parse(text);
  ModelConfig cfg;
  cfg.frames = j.at("frames");
  cfg.height = j.at("height");
  cfg.width = j.at("width");
  cfg.factors = j.at("factors").get<std::vector<Index>>();
  cfg.c0 = j.at("c0");
  cfg.channel_floor = j.at("channel_floor");
  cfg.mlp_hidden = j.at("mlp_hidden");
  cfg.pe_base = j.at("pe_base");
  cfg.pe_levels = j.at("pe_levels");
  cfg.block.clear();
  for (const auto& b : j.at("block")) cfg.block.push_back(BranchSpec::parse(b.get<std::string>()));
  cfg.mid_channels = j.at("mid_channels");
  cfg.form = parse_stage_form(j.at("mode"));
  cfg.validate();
  return cfg;
}

namespace {

constexpr char kCheckpointMagic[4] = {'R', 'N', 'V', 'C'};

void put_u64(std::vector<char>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const std::vector<char>& in, std::size_t at) {
  if (at + 8 > in.size()) throw std::runtime_error("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

}  // namespace

std::vector<char> Model::serialize(long step) const {
  json manifest;
  manifest["config"] = json::parse(model_config_json(cfg_));
  manifest["step"] = step;
  json layers = json::array();
  for (const auto& s : stages_) layers.push_back({{"mode", mode_name(s.mode())}});
  manifest["layers"] = layers;
  json tensors = json::array();
  std::uint64_t offset = 0;
  const auto info = parameter_info();
  for (const ParamInfo& p : info) {
    const Shape& s = p.shape;
    tensors.push_back({{"name", p.name}, {"shape", {s.n, s.c, s.h, s.w}}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(s.numel()) * 4;
  }
  manifest["tensors"] = tensors;
  const std::string text = manifest.dump(1);

  std::vector<char> out(kCheckpointMagic, kCheckpointMagic + 4);
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  for (const TensorF* t : parameters())
    for (Index i = 0; i < t->size(); ++i) {
      std::uint32_t bits;
      const float v = (*t)[i];
      std::memcpy(&bits, &v, 4);
      for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
    }
  return out;
}

Model Model::deserialize(const std::vector<char>& bytes, long* step) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    throw std::runtime_error("not a model checkpoint (bad magic)");
  const std::uint64_t len = get_u64(bytes, 4);
  if (12 + len > bytes.size()) throw std::runtime_error("checkpoint manifest truncated");
  const json manifest = json::parse(std::string(bytes.data() + 12, len));
  const std::size_t blob = 12 + len;

  Model m;
  m.cfg_ = model_config_from_json(manifest.at("config").dump());
  const ModelConfig& cfg = m.cfg_;
  std::vector<TensorF> tensors;
  for (const json& t : manifest.at("tensors")) {
    const auto dims = t.at("shape").get<std::vector<Index>>();
    if (dims.size() != 4) throw std::runtime_error("checkpoint tensor with rank " + std::to_string(dims.size()));
    TensorF value(Shape{dims[0], dims[1], dims[2], dims[3]});
    const std::size_t at = blob + t.at("offset").get<std::size_t>();
    if (at + 4 * value.size() > bytes.size()) throw std::runtime_error("checkpoint tensor data truncated");
    for (Index i = 0; i < value.size(); ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b)
        bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[at + 4 * i + b])) << (8 * b);
      std::memcpy(&value[i], &bits, 4);
    }
    tensors.push_back(std::move(value));
  }
  if (tensors.size() < 6) throw std::runtime_error("checkpoint holds too few tensors");
  std::size_t next = 0;
  auto take = [&] {
    if (next >= tensors.size()) throw std::runtime_error("checkpoint holds too few tensors");
    return std::move(tensors[next++]);
  };
  m.w1_ = take();
  m.b1_ = take();
  m.w2_ = take();
  m.b2_ = take();
  const json& layers = manifest.at("layers");
  if (layers.size() != cfg.factors.size()) throw std::runtime_error("checkpoint layer count mismatch");
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const LayerMode mode = parse_mode(layers[k].at("mode"));
    if (mode == LayerMode::Deployed) {
      TensorF kernel = take();
      TensorF bias = take();
      m.stages_.push_back(RepLayer<float>::deployed({std::move(kernel), std::move(bias)}));
    } else {
      const BlockConfig bc = cfg.stage_block(k);
      BlockParams<float> params;
      for (const BranchSpec& b : bc.branches) {
        BranchParams<float> bp;
        for (std::size_t i = 0; i < branch_layout(b, bc).size(); ++i) bp.push_back(take());
        params.push_back(std::move(bp));
      }
      m.stages_.push_back(RepLayer<float>::train_form(bc, std::move(params), mode));
    }
  }
  m.head_.kernel = take();
  m.head_.bias = take();
  if (next != tensors.size()) throw std::runtime_error("checkpoint holds unexpected extra tensors");
  if (step) *step = manifest.value("step", 0L);
  return m;
}

void Model::save(const std::filesystem::path& path, long step) const {
  const std::vector<char> bytes = serialize(step);
  std::ofstream out(path, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed to write checkpoint " + path.string());
}

Model Model::load(const std::filesystem::path& path, long* step) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes, step);
}

Index conv_macs(Index in, Index out, Index kh, Index kw, Index h, Index w) {
  return in * out * kh * kw * h * w;
}

Index block_macs(const BlockConfig& cfg, LayerMode mode, Index h, Index w) {
  const Index i = cfg.in_channels, o = cfg.out_channels, m = cfg.mid();
  if (mode == LayerMode::Deployed) return conv_macs(i, o, 3, 3, h, w);
  Index total = mode == LayerMode::OnlineTrain ? conv_macs(i, o, 3, 3, h, w) : 0;
  const Index hp = h + 2, wp = w + 2;
  for (const BranchSpec& b : cfg.branches) {
    const bool proj = needs_projection(b, cfg);
    if (mode == LayerMode::ExplicitTrain) {
      switch (b.kind) {
        case BranchKind::Vanilla3x3: total += conv_macs(i, o, 3, 3, h, w); break;
        case BranchKind::Asym1x3:
        case BranchKind::Asym3x1: total += conv_macs(i, o, 1, 3, h, w); break;
        case BranchKind::Point1x1: total += conv_macs(i, o, 1, 1, h, w); break;
        case BranchKind::Seq_1x1_3x3:
          total += conv_macs(i, m, 1, 1, hp, wp) + conv_macs(m, o, 3, 3, h, w);
          break;
        case BranchKind::Seq_1x1_3x3_1x1:
          total += conv_macs(i, m, 1, 1, hp, wp) + conv_macs(m, m, 3, 3, h, w) + conv_macs(m, o, 1, 1, h, w);
          break;
        case BranchKind::AvgPool3x3:
        case BranchKind::ScaledFixed:
          total += (proj ? conv_macs(i, o, 1, 1, hp, wp) : 0) + o * 9 * h * w;
          break;
      }
    } else {
      switch (b.kind) {
        case BranchKind::Seq_1x1_3x3: total += o * m * 9 * i + o * m; break;
        case BranchKind::Seq_1x1_3x3_1x1: total += m * m * 9 * i + m * m + o * m * 9 * i + o * m; break;
        case BranchKind::AvgPool3x3:
        case BranchKind::ScaledFixed:
          total += proj ? o * o * 9 * i : 0;
          break;
        default: break;
      }
    }
  }
  return total;
}

Complexity count_params_and_flops(const ModelConfig& cfg, LayerMode mode) {
  cfg.validate();
  Complexity c;
  const Index din = 2 * cfg.pe_levels;
  const Index dout = cfg.c0 * cfg.h0() * cfg.w0();
  c.params = din * cfg.mlp_hidden + cfg.mlp_hidden + cfg.mlp_hidden * dout + dout;
  c.macs = din * cfg.mlp_hidden + cfg.mlp_hidden * dout;
  Index h = cfg.h0(), w = cfg.w0();
  for (std::size_t k = 0; k < cfg.factors.size(); ++k) {
    const BlockConfig bc = cfg.stage_block(k);
    const bool branched = cfg.form != StageForm::Plain && mode != LayerMode::Deployed;
    if (branched) {
      for (const BranchSpec& b : bc.branches)
        for (const ParamSlot& s : branch_layout(b, bc)) c.params += s.shape.numel();
      c.macs += block_macs(bc, mode, h, w);
    } else {
      c.params += bc.in_channels * bc.out_channels * 9 + bc.out_channels;
      c.macs += conv_macs(bc.in_channels, bc.out_channels, 3, 3, h, w);
    }
    h *= cfg.factors[k];
    w *= cfg.factors[k];
  }
  const Index last = cfg.stage_channels(cfg.factors.size() - 1);
  c.params += 3 * last * 9 + 3;
  c.macs += conv_macs(last, 3, 3, 3, h, w);
  return c;
}

}  // namespace onrep
