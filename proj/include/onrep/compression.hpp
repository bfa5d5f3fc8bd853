#pragma once

#include "onrep/training.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace onrep {

/// Global magnitude pruning over the tensors flagged prunable. The smallest
/// floor(sparsity * N) magnitudes are zeroed; ties go to the earlier
/// (tensor, index) position. Returns the 0/1 keep mask for every tensor.
ParamMask prune(std::span<TensorF* const> params, const std::vector<bool>& prunable, double sparsity);
ParamMask prune(Model& model, double sparsity);

struct Quantized {
  std::vector<std::uint32_t> q;
  float min = 0;
  float scale = 0;
  int bits = 8;
};

/// Per-tensor affine code: scale = (max - min) / (2^b - 1), q = round((x - min) / scale).
Quantized quantize(std::span<const float> values, int bits);
std::vector<float> dequantize(const Quantized& code);
inline float dequantize(std::uint32_t q, float min, float scale) { return min + scale * static_cast<float>(q); }

/// Canonical Huffman code over a symbol alphabet.
class HuffmanCode {
 public:
  /// Optimal code lengths; a lone symbol gets a 1-bit code.
  static std::map<std::uint32_t, int> code_lengths(const std::map<std::uint32_t, std::uint64_t>& freq);
  static HuffmanCode from_frequencies(const std::map<std::uint32_t, std::uint64_t>& freq);
  static HuffmanCode from_lengths(const std::map<std::uint32_t, int>& lengths);

  const std::map<std::uint32_t, int>& lengths() const { return lengths_; }
  int length(std::uint32_t symbol) const;
  std::uint64_t encoded_bits(const std::vector<std::uint32_t>& symbols) const;

  /// Appends MSB-first codes to `bytes`, tracking the total bit count.
  void encode(const std::vector<std::uint32_t>& symbols, std::vector<std::uint8_t>& bytes,
              std::uint64_t& bit_count) const;
  std::vector<std::uint32_t> decode(const std::vector<std::uint8_t>& bytes, std::uint64_t bit_count,
                                    std::size_t symbols) const;

 private:
  std::map<std::uint32_t, int> lengths_;
  std::map<std::uint32_t, std::uint64_t> codes_;
  // canonical decoding tables, indexed by code length
  std::vector<std::uint64_t> first_code_;
  std::vector<std::size_t> first_index_;
  std::vector<std::size_t> count_;
  std::vector<std::uint32_t> sorted_;
};

struct EntropyCoded {
  std::map<std::uint32_t, int> table;
  std::vector<std::uint8_t> payload;
  std::uint64_t payload_bits = 0;
};

/// One code for all streams, built from the global histogram.
EntropyCoded entropy_encode(const std::vector<std::vector<std::uint32_t>>& streams);
std::vector<std::vector<std::uint32_t>> entropy_decode(const EntropyCoded& coded,
                                                       const std::vector<std::size_t>& lengths);

/// Sizes of the serialized sections; total_bits is the file length in bits.
struct SizeReport {
  std::uint64_t header_bits = 0;
  std::uint64_t manifest_bits = 0;
  std::uint64_t mask_bits = 0;
  std::uint64_t table_bits = 0;
  std::uint64_t payload_bits = 0;
  std::uint64_t total_bits = 0;
};

struct CompressedModel {
  std::vector<char> bytes;
  SizeReport sizes;
  /// Parameter values as the decoder reconstructs them.
  std::vector<TensorF> decoded;
};

/// Quantize and entropy-code a deploy-form model whose pruned entries are
/// marked zero in `mask` (all-ones mask for an unpruned model).
CompressedModel compress(const Model& model, const ParamMask& mask, int bits);
Model decompress(const std::vector<char>& bytes, SizeReport* sizes = nullptr);
ParamMask full_mask(const Model& model);

double bpp(double total_bits, Index frames, Index height, Index width);

struct RdPoint {
  double sparsity = 0;
  int bits = 0;
  long finetune_steps = 0;
  double bpp = 0;
  std::uint64_t total_bits = 0;
  double psnr = 0;
  double ms_ssim = 0;
};

struct PipelineResult {
  RdPoint point;
  CompressedModel compressed;
};

/// prune -> optional masked fine-tuning -> quantize -> entropy code -> decode -> evaluate.
PipelineResult compress_pipeline(const Model& model, const Video& video, double sparsity, int bits,
                                 long finetune_steps, const TrainConfig& finetune);

std::vector<RdPoint> rd_sweep(const Model& model, const Video& video, const std::vector<double>& sparsities,
                              const std::vector<int>& bits, long finetune_steps, const TrainConfig& finetune);

std::string rd_csv(const std::vector<RdPoint>& points);

}  // namespace onrep
