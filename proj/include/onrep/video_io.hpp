#pragma once

#include "onrep/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace onrep {

/// T frames of shape (1, 3, H, W) with values in [0, 1].
struct Video {
  std::vector<TensorF> frames;
  double fps = 25.0;

  Index count() const { return static_cast<Index>(frames.size()); }
  Index height() const { return frames.empty() ? 0 : frames[0].shape().h; }
  Index width() const { return frames.empty() ? 0 : frames[0].shape().w; }
  /// Concatenate the selected frames along the batch axis.
  TensorF batch(const std::vector<Index>& indices) const;
  void validate() const;
};

/// Binary P6 with maxval 255, normalized by 1/255.
TensorF read_ppm(const std::filesystem::path& path);
/// Round half up: byte = floor(255 x + 0.5), clamped to [0, 255].
void write_ppm(const TensorF& frame, const std::filesystem::path& path);
std::uint8_t to_byte(float x);

/// Every *.ppm file in the directory, in lexicographic order.
Video read_frames(const std::filesystem::path& dir);
std::string frame_filename(Index t);
void write_frames(const Video& video, const std::filesystem::path& dir);

enum class SynthKind { MovingGradient, BouncingSquare, ColorNoiseSmooth };
SynthKind parse_synth_kind(const std::string& name);
const char* synth_kind_name(SynthKind kind);

Video synth_video(SynthKind kind, Index frames, Index height, Index width, std::uint64_t seed);

}  // namespace onrep
