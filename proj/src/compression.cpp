#include "onrep/compression.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <queue>
#include <sstream>
#include <tuple>

namespace onrep {

using json = nlohmann::json;

ParamMask prune(std::span<TensorF* const> params, const std::vector<bool>& prunable, double sparsity) {
  if (!(sparsity >= 0 && sparsity < 1)) throw std::invalid_argument("sparsity must lie in [0, 1)");
  if (prunable.size() != params.size()) throw std::invalid_argument("prune: flag count mismatch");
  struct Entry {
    float magnitude;
    std::size_t tensor;
    Index index;
  };
  std::vector<Entry> entries;
  ParamMask mask;
  for (std::size_t t = 0; t < params.size(); ++t) {
    mask.push_back(TensorF::constant(params[t]->shape(), 1.0f));
    if (!prunable[t]) continue;
    for (Index i = 0; i < params[t]->size(); ++i) entries.push_back({std::abs((*params[t])[i]), t, i});
  }
  const auto count = static_cast<std::size_t>(std::floor(sparsity * static_cast<double>(entries.size()) + 1e-9));
  std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
    return std::tie(a.magnitude, a.tensor, a.index) < std::tie(b.magnitude, b.tensor, b.index);
  });
  for (std::size_t k = 0; k < count; ++k) {
    (*params[entries[k].tensor])[entries[k].index] = 0.0f;
    mask[entries[k].tensor][entries[k].index] = 0.0f;
  }
  return mask;
}

namespace {

std::vector<bool> prunable_flags(const Model& model) {
  std::vector<bool> flags;
  for (const ParamInfo& p : model.parameter_info()) flags.push_back(!p.is_bias);
  return flags;
}

}  // namespace

ParamMask prune(Model& model, double sparsity) {
  if (!model.deployed()) throw std::invalid_argument("prune expects a deploy-form model; run fuse first");
  return prune(model.parameters(), prunable_flags(model), sparsity);
}

ParamMask full_mask(const Model& model) {
  ParamMask mask;
  for (const TensorF* t : model.parameters()) mask.push_back(TensorF::constant(t->shape(), 1.0f));
  return mask;
}

Quantized quantize(std::span<const float> values, int bits) {
  if (bits < 2 || bits > 16) throw std::invalid_argument("bits must lie in [2, 16], got " + std::to_string(bits));
  Quantized out;
  out.bits = bits;
  out.q.assign(values.size(), 0);
  if (values.empty()) return out;
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  out.min = *lo;
  if (*hi == *lo) return out;
  const double levels = static_cast<double>((1u << bits) - 1);
  out.scale = static_cast<float>((static_cast<double>(*hi) - static_cast<double>(*lo)) / levels);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double r = std::round((static_cast<double>(values[i]) - out.min) / out.scale);
    out.q[i] = static_cast<std::uint32_t>(std::clamp(r, 0.0, levels));
  }
  return out;
}

std::vector<float> dequantize(const Quantized& code) {
  std::vector<float> out;
  out.reserve(code.q.size());
  for (std::uint32_t q : code.q) out.push_back(dequantize(q, code.min, code.scale));
  return out;
}

std::map<std::uint32_t, int> HuffmanCode::code_lengths(const std::map<std::uint32_t, std::uint64_t>& freq) {
  std::map<std::uint32_t, int> lengths;
  if (freq.empty()) return lengths;
  if (freq.size() == 1) {
    lengths[freq.begin()->first] = 1;
    return lengths;
  }
  // (weight, creation order) keeps merges deterministic
  using Item = std::pair<std::uint64_t, std::size_t>;
  std::priority_queue<Item, std::vector<Item>, std::greater<Item>> heap;
  std::vector<std::size_t> parent;
  std::vector<std::uint32_t> symbols;
  for (const auto& [sym, f] : freq) {
    heap.push({f, parent.size()});
    parent.push_back(0);
    symbols.push_back(sym);
  }
  while (heap.size() > 1) {
    const Item a = heap.top();
    heap.pop();
    const Item b = heap.top();
    heap.pop();
    const std::size_t node = parent.size();
    parent.push_back(node);
    parent[a.second] = node;
    parent[b.second] = node;
    heap.push({a.first + b.first, node});
  }
  const std::size_t root = parent.size() - 1;
  for (std::size_t leaf = 0; leaf < symbols.size(); ++leaf) {
    int depth = 0;
    for (std::size_t n = leaf; n != root; n = parent[n]) ++depth;
    lengths[symbols[leaf]] = depth;
  }
  return lengths;
}

HuffmanCode HuffmanCode::from_frequencies(const std::map<std::uint32_t, std::uint64_t>& freq) {
  return from_lengths(code_lengths(freq));
}

HuffmanCode HuffmanCode::from_lengths(const std::map<std::uint32_t, int>& lengths) {
  HuffmanCode code;
  code.lengths_ = lengths;
  int max_len = 0;
  for (const auto& [sym, len] : lengths) {
    if (len < 1 || len > 60) throw std::invalid_argument("unsupported Huffman code length " + std::to_string(len));
    max_len = std::max(max_len, len);
  }
  std::vector<std::pair<int, std::uint32_t>> order;
  for (const auto& [sym, len] : lengths) order.push_back({len, sym});
  std::sort(order.begin(), order.end());
  code.count_.assign(max_len + 1, 0);
  code.first_code_.assign(max_len + 1, 0);
  code.first_index_.assign(max_len + 1, 0);
  std::uint64_t next = 0;
  int prev_len = order.empty() ? 0 : order.front().first;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const auto [len, sym] = order[i];
    next <<= (len - prev_len);
    prev_len = len;
    if (code.count_[len] == 0) {
      code.first_code_[len] = next;
      code.first_index_[len] = i;
    }
    ++code.count_[len];
    code.codes_[sym] = next++;
    code.sorted_.push_back(sym);
  }
  return code;
}

int HuffmanCode::length(std::uint32_t symbol) const {
  const auto it = lengths_.find(symbol);
  if (it == lengths_.end()) throw std::invalid_argument("symbol " + std::to_string(symbol) + " has no code");
  return it->second;
}

std::uint64_t HuffmanCode::encoded_bits(const std::vector<std::uint32_t>& symbols) const {
  std::uint64_t bits = 0;
  for (std::uint32_t s : symbols) bits += length(s);
  return bits;
}

void HuffmanCode::encode(const std::vector<std::uint32_t>& symbols, std::vector<std::uint8_t>& bytes,
                         std::uint64_t& bit_count) const {
  for (std::uint32_t s : symbols) {
    const int len = length(s);
    const std::uint64_t c = codes_.at(s);
    for (int b = len - 1; b >= 0; --b) {
      if (bit_count % 8 == 0) bytes.push_back(0);
      if ((c >> b) & 1u) bytes.back() |= static_cast<std::uint8_t>(0x80u >> (bit_count % 8));
      ++bit_count;
    }
  }
}

std::vector<std::uint32_t> HuffmanCode::decode(const std::vector<std::uint8_t>& bytes, std::uint64_t bit_count,
                                               std::size_t symbols) const {
  std::vector<std::uint32_t> out;
  out.reserve(symbols);
  std::uint64_t pos = 0;
  const int max_len = static_cast<int>(count_.size()) - 1;
  while (out.size() < symbols) {
    std::uint64_t c = 0;
    int len = 0;
    while (true) {
      if (pos >= bit_count || len >= max_len) throw std::runtime_error("corrupt Huffman payload");
      c = (c << 1) | ((bytes[pos / 8] >> (7 - pos % 8)) & 1u);
      ++pos;
      ++len;
      if (count_[len] > 0 && c >= first_code_[len] && c - first_code_[len] < count_[len]) {
        out.push_back(sorted_[first_index_[len] + (c - first_code_[len])]);
        break;
      }
    }
  }
  return out;
}

EntropyCoded entropy_encode(const std::vector<std::vector<std::uint32_t>>& streams) {
  std::map<std::uint32_t, std::uint64_t> freq;
  for (const auto& s : streams)
    for (std::uint32_t v : s) ++freq[v];
  const HuffmanCode code = HuffmanCode::from_frequencies(freq);
  EntropyCoded out;
  out.table = code.lengths();
  for (const auto& s : streams) code.encode(s, out.payload, out.payload_bits);
  return out;
}

std::vector<std::vector<std::uint32_t>> entropy_decode(const EntropyCoded& coded,
                                                       const std::vector<std::size_t>& lengths) {
  std::size_t total = 0;
  for (std::size_t n : lengths) total += n;
  std::vector<std::vector<std::uint32_t>> out;
  if (total == 0) {
    out.resize(lengths.size());
    return out;
  }
  const std::vector<std::uint32_t> all = HuffmanCode::from_lengths(coded.table).decode(coded.payload, coded.payload_bits, total);
  std::size_t at = 0;
  for (std::size_t n : lengths) {
    out.emplace_back(all.begin() + at, all.begin() + at + n);
    at += n;
  }
  return out;
}

namespace {

constexpr char kMagic[4] = {'R', 'N', 'V', 'Z'};

template <typename T>
void put_le(std::vector<char>& out, T v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

std::uint64_t get_le(const std::vector<char>& in, std::size_t& at, int bytes) {
  if (at + bytes > in.size()) throw std::runtime_error("compressed model truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  at += bytes;
  return v;
}

std::string float_text(float v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(v));
  return buf;
}

}  // namespace

CompressedModel compress(const Model& model, const ParamMask& mask, int bits) {
  if (!model.deployed()) throw std::invalid_argument("compress expects a deploy-form model; run fuse first");
  const auto params = model.parameters();
  const auto info = model.parameter_info();
  if (mask.size() != params.size()) throw std::invalid_argument("compress: mask does not match the model");

  json tensors = json::array();
  std::vector<std::vector<std::uint32_t>> streams;
  std::vector<std::uint8_t> mask_bytes;
  std::uint64_t mask_bit = 0;
  CompressedModel out;
  for (std::size_t t = 0; t < params.size(); ++t) {
    const TensorF& p = *params[t];
    const bool prunable = !info[t].is_bias;
    std::vector<float> kept;
    for (Index i = 0; i < p.size(); ++i) {
      const bool keep = mask[t][i] != 0.0f;
      if (!keep && !prunable) throw std::invalid_argument("bias tensor " + info[t].name + " has pruned entries");
      if (prunable) {
        if (mask_bit % 8 == 0) mask_bytes.push_back(0);
        if (keep) mask_bytes.back() |= static_cast<std::uint8_t>(1u << (mask_bit % 8));
        ++mask_bit;
      }
      if (keep) kept.push_back(p[i]);
    }
    Quantized q = quantize(kept, bits);
    const Shape& s = p.shape();
    tensors.push_back({{"name", info[t].name},
                       {"shape", {s.n, s.c, s.h, s.w}},
                       {"prunable", prunable},
                       {"kept", kept.size()},
                       {"min", float_text(q.min)},
                       {"scale", float_text(q.scale)}});
    streams.push_back(std::move(q.q));
  }
  json manifest;
  manifest["config"] = json::parse(model_config_json(model.config()));
  manifest["bits"] = bits;
  manifest["tensors"] = tensors;
  const std::string text = manifest.dump();
  const EntropyCoded coded = entropy_encode(streams);

  std::vector<char>& b = out.bytes;
  b.insert(b.end(), kMagic, kMagic + 4);
  put_le(b, text.size(), 8);
  b.insert(b.end(), text.begin(), text.end());
  put_le(b, mask_bytes.size(), 8);
  b.insert(b.end(), mask_bytes.begin(), mask_bytes.end());
  put_le(b, coded.table.size(), 4);
  for (const auto& [sym, len] : coded.table) {
    put_le(b, sym, 2);
    put_le(b, len, 1);
  }
  put_le(b, coded.payload_bits, 8);
  b.insert(b.end(), coded.payload.begin(), coded.payload.end());

  Model decoded = decompress(b, &out.sizes);
  for (const TensorF* t : decoded.parameters()) out.decoded.push_back(*t);
  return out;
}

Model decompress(const std::vector<char>& bytes, SizeReport* sizes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw std::runtime_error("not a compressed model (bad magic)");
  std::size_t at = 4;
  const std::uint64_t manifest_len = get_le(bytes, at, 8);
  if (at + manifest_len > bytes.size()) throw std::runtime_error("compressed model manifest truncated");
  const json manifest = json::parse(std::string(bytes.data() + at, manifest_len));
  at += manifest_len;
  const std::uint64_t mask_len = get_le(bytes, at, 8);
  if (at + mask_len > bytes.size()) throw std::runtime_error("compressed model mask truncated");
  const std::vector<std::uint8_t> mask_bytes(bytes.begin() + at, bytes.begin() + at + mask_len);
  at += mask_len;
  const std::uint64_t entries = get_le(bytes, at, 4);
  EntropyCoded coded;
  for (std::uint64_t e = 0; e < entries; ++e) {
    const auto sym = static_cast<std::uint32_t>(get_le(bytes, at, 2));
    coded.table[sym] = static_cast<int>(get_le(bytes, at, 1));
  }
  coded.payload_bits = get_le(bytes, at, 8);
  const std::uint64_t payload_len = (coded.payload_bits + 7) / 8;
  if (at + payload_len != bytes.size()) throw std::runtime_error("compressed model payload size mismatch");
  coded.payload.assign(bytes.begin() + at, bytes.end());

  const ModelConfig cfg = model_config_from_json(manifest.at("config").dump());
  const Model skeleton = Model::deploy_skeleton(cfg);
  const json& tensors = manifest.at("tensors");
  const auto info = skeleton.parameter_info();
  if (tensors.size() != info.size()) throw std::runtime_error("compressed model tensor count mismatch");
  std::vector<std::size_t> lengths;
  for (const json& t : tensors) lengths.push_back(t.at("kept").get<std::size_t>());
  const auto streams = entropy_decode(coded, lengths);

  std::vector<TensorF> values;
  std::uint64_t mask_bit = 0;
  for (std::size_t t = 0; t < info.size(); ++t) {
    const json& meta = tensors[t];
    const auto dims = meta.at("shape").get<std::vector<Index>>();
    const Shape shape{dims.at(0), dims.at(1), dims.at(2), dims.at(3)};
    if (!(shape == info[t].shape)) throw std::runtime_error("compressed tensor " + info[t].name + " has the wrong shape");
    const float min = std::stof(meta.at("min").get<std::string>());
    const float scale = std::stof(meta.at("scale").get<std::string>());
    const bool prunable = meta.at("prunable").get<bool>();
    TensorF v(shape);
    std::size_t next = 0;
    for (Index i = 0; i < v.size(); ++i) {
      bool keep = true;
      if (prunable) {
        if (mask_bit / 8 >= mask_bytes.size()) throw std::runtime_error("compressed model mask too short");
        keep = (mask_bytes[mask_bit / 8] >> (mask_bit % 8)) & 1u;
        ++mask_bit;
      }
      if (keep) {
        if (next >= streams[t].size()) throw std::runtime_error("compressed tensor " + info[t].name + " is short");
        v[i] = dequantize(streams[t][next++], min, scale);
      }
    }
    if (next != streams[t].size()) throw std::runtime_error("compressed tensor " + info[t].name + " kept-count mismatch");
    values.push_back(std::move(v));
  }
  if (sizes) {
    sizes->header_bits = (4 + 8 + 8 + 4 + 8) * 8;
    sizes->manifest_bits = manifest_len * 8;
    sizes->mask_bits = mask_len * 8;
    sizes->table_bits = entries * 3 * 8;
    sizes->payload_bits = payload_len * 8;
    sizes->total_bits = bytes.size() * 8;
  }
  return skeleton.with_parameters(values);
}

double bpp(double total_bits, Index frames, Index height, Index width) {
  if (frames <= 0 || height <= 0 || width <= 0) throw std::invalid_argument("bpp: dimensions must be positive");
  return total_bits / (static_cast<double>(frames) * height * width);
}

PipelineResult compress_pipeline(const Model& model, const Video& video, double sparsity, int bits,
                                 long finetune_steps, const TrainConfig& finetune) {
  if (finetune_steps < 0) throw std::invalid_argument("finetune steps must be non-negative");
  Model work = model;
  const ParamMask mask = prune(work, sparsity);
  if (finetune_steps > 0) {
    TrainConfig cfg = finetune;
    cfg.budget = Budget::steps(finetune_steps);
    cfg.log_epochs = false;
    train(work, video, cfg, &mask);
  }
  PipelineResult r;
  r.compressed = compress(work, mask, bits);
  const Model decoded = decompress(r.compressed.bytes);
  const EvalResult e = evaluate(decoded, video);
  r.point = {sparsity, bits, finetune_steps,
             bpp(static_cast<double>(r.compressed.sizes.total_bits), video.count(), video.height(), video.width()),
             r.compressed.sizes.total_bits, e.mean_psnr, e.mean_ms_ssim};
  return r;
}

std::vector<RdPoint> rd_sweep(const Model& model, const Video& video, const std::vector<double>& sparsities,
                              const std::vector<int>& bits, long finetune_steps, const TrainConfig& finetune) {
  std::vector<RdPoint> out;
  for (double s : sparsities)
    for (int b : bits) out.push_back(compress_pipeline(model, video, s, b, finetune_steps, finetune).point);
  return out;
}

std::string rd_csv(const std::vector<RdPoint>& points) {
  std::string out = "sparsity,bits,finetune_steps,total_bits,bpp,psnr,ms_ssim\n";
  char buf[256];
  for (const RdPoint& p : points) {
    std::snprintf(buf, sizeof buf, "%.4g,%d,%ld,%llu,%.6f,%.6f,%.6f\n", p.sparsity, p.bits, p.finetune_steps,
                  static_cast<unsigned long long>(p.total_bits), p.bpp, p.psnr, p.ms_ssim);
    out += buf;
  }
  return out;
}

}  // namespace onrep
