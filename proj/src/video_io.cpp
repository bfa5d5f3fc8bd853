#include "onrep/video_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>

namespace onrep {

namespace fs = std::filesystem;

TensorF Video::batch(const std::vector<Index>& indices) const {
  const Index h = height(), w = width();
  TensorF out({static_cast<Index>(indices.size()), 3, h, w});
  for (std::size_t i = 0; i < indices.size(); ++i)
    out.data().segment(static_cast<Index>(i) * 3 * h * w, 3 * h * w) = frames.at(indices[i]).data();
  return out;
}

void Video::validate() const {
  if (frames.empty()) throw std::invalid_argument("video has no frames");
  for (const TensorF& f : frames) {
    if (!(f.shape() == Shape{1, 3, height(), width()}))
      throw std::invalid_argument("frame shape " + f.shape().str() + " differs from " +
                                  Shape{1, 3, height(), width()}.str());
  }
}

namespace {

// Next header token, skipping whitespace and '#' comments.
std::string ppm_token(std::istream& in, const fs::path& path) {
  std::string tok;
  int ch;
  while ((ch = in.get()) != EOF) {
    if (ch == '#') {
      while ((ch = in.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  if (tok.empty()) throw std::runtime_error(path.string() + ": truncated PPM header");
  return tok;
}

Index ppm_number(std::istream& in, const fs::path& path, const char* what) {
  const std::string tok = ppm_token(in, path);
  try {
    std::size_t used = 0;
    const long v = std::stol(tok, &used);
    if (used != tok.size() || v <= 0) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    throw std::runtime_error(path.string() + ": bad PPM " + what + " '" + tok + "'");
  }
}

}  // namespace

TensorF read_ppm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  if (ppm_token(in, path) != "P6") throw std::runtime_error(path.string() + ": not a binary P6 PPM");
  const Index w = ppm_number(in, path, "width");
  const Index h = ppm_number(in, path, "height");
  if (ppm_number(in, path, "maxval") != 255)
    throw std::runtime_error(path.string() + ": only maxval 255 is supported");
  std::vector<unsigned char> bytes(3 * h * w);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size()))
    throw std::runtime_error(path.string() + ": truncated pixel data");
  TensorF frame({1, 3, h, w});
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x)
      for (Index c = 0; c < 3; ++c) frame(0, c, y, x) = bytes[(y * w + x) * 3 + c] / 255.0f;
  return frame;
}

std::uint8_t to_byte(float x) {
  const double v = std::floor(static_cast<double>(x) * 255.0 + 0.5);
  return static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
}

void write_ppm(const TensorF& frame, const fs::path& path) {
  const Shape s = frame.shape();
  if (s.n != 1 || s.c != 3) throw std::invalid_argument("write_ppm: expected a 1x3xHxW frame, got " + s.str());
  std::vector<unsigned char> bytes(3 * s.h * s.w);
  for (Index y = 0; y < s.h; ++y)
    for (Index x = 0; x < s.w; ++x)
      for (Index c = 0; c < 3; ++c) bytes[(y * s.w + x) * 3 + c] = to_byte(frame(0, c, y, x));
  std::ofstream out(path, std::ios::binary);
  out << "P6\n" << s.w << " " << s.h << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed to write " + path.string());
}

Video read_frames(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw std::runtime_error("frame directory " + dir.string() + " does not exist");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".ppm") files.push_back(entry.path());
  if (files.empty()) throw std::runtime_error("no .ppm frames in " + dir.string());
  std::sort(files.begin(), files.end());
  Video video;
  for (const fs::path& f : files) {
    video.frames.push_back(read_ppm(f));
    if (!(video.frames.back().shape() == video.frames.front().shape()))
      throw std::runtime_error(f.string() + ": size " + video.frames.back().shape().str() +
                               " differs from " + video.frames.front().shape().str());
  }
  return video;
}

std::string frame_filename(Index t) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frame_%05ld.ppm", static_cast<long>(t));
  return buf;
}

void write_frames(const Video& video, const fs::path& dir) {
  fs::create_directories(dir);
  for (Index t = 0; t < video.count(); ++t) write_ppm(video.frames[t], dir / frame_filename(t));
}

SynthKind parse_synth_kind(const std::string& name) {
  for (SynthKind k : {SynthKind::MovingGradient, SynthKind::BouncingSquare, SynthKind::ColorNoiseSmooth})
    if (name == synth_kind_name(k)) return k;
  throw std::invalid_argument("unknown video kind '" + name +
                              "' (moving_gradient, bouncing_square, color_noise_smooth)");
}

const char* synth_kind_name(SynthKind kind) {
  switch (kind) {
    case SynthKind::MovingGradient: return "moving_gradient";
    case SynthKind::BouncingSquare: return "bouncing_square";
    case SynthKind::ColorNoiseSmooth: return "color_noise_smooth";
  }
  return "?";
}

namespace {

using Rng = std::mt19937_64;

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

Video moving_gradient(Index frames, Index h, Index w, Rng& rng) {
  constexpr double two_pi = 2 * std::numbers::pi;
  double fx[3], fy[3], phase[3], speed[3];
  for (int c = 0; c < 3; ++c) {
    fx[c] = uniform(rng, 0.5, 2.0);
    fy[c] = uniform(rng, 0.5, 2.0);
    phase[c] = uniform(rng, 0, two_pi);
    speed[c] = uniform(rng, 0.02, 0.05);
  }
  Video v;
  for (Index t = 0; t < frames; ++t) {
    TensorF f({1, 3, h, w});
    for (int c = 0; c < 3; ++c)
      for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x) {
          const double arg = two_pi * (fx[c] * x / w + fy[c] * y / h + speed[c] * t) + phase[c];
          f(0, c, y, x) = static_cast<float>(0.5 + 0.4 * std::sin(arg));
        }
    v.frames.push_back(std::move(f));
  }
  return v;
}

Video bouncing_square(Index frames, Index h, Index w, Rng& rng) {
  const Index side = std::max<Index>(2, std::min(h, w) / 4);
  double color[3], bg0[3], bg1[3];
  for (int c = 0; c < 3; ++c) {
    color[c] = uniform(rng, 0.6, 1.0);
    bg0[c] = uniform(rng, 0.0, 0.3);
    bg1[c] = uniform(rng, 0.0, 0.3);
  }
  Index py = std::uniform_int_distribution<Index>(0, h - side)(rng);
  Index px = std::uniform_int_distribution<Index>(0, w - side)(rng);
  Index vy = rng() % 2 ? 1 : -1;
  Index vx = rng() % 2 ? 2 : -2;
  Video v;
  for (Index t = 0; t < frames; ++t) {
    TensorF f({1, 3, h, w});
    for (int c = 0; c < 3; ++c)
      for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x) {
          const bool inside = y >= py && y < py + side && x >= px && x < px + side;
          const double a = static_cast<double>(x) / std::max<Index>(1, w - 1);
          f(0, c, y, x) = static_cast<float>(inside ? color[c] : bg0[c] * (1 - a) + bg1[c] * a);
        }
    v.frames.push_back(std::move(f));
    auto bounce = [](Index& p, Index& vel, Index limit) {
      if (p + vel < 0 || p + vel > limit) vel = -vel;
      p = std::clamp<Index>(p + vel, 0, limit);
    };
    bounce(py, vy, h - side);
    bounce(px, vx, w - side);
  }
  return v;
}

// Bilinear upsampling of coarse random grids, cross-faded between keyframes.
Video color_noise_smooth(Index frames, Index h, Index w, Rng& rng) {
  constexpr Index gh = 4, gw = 6, period = 8;
  const Index keys = frames / period + 2;
  std::vector<std::vector<double>> grids(keys, std::vector<double>(3 * gh * gw));
  for (auto& g : grids)
    for (double& v : g) v = uniform(rng, 0.1, 0.9);
  auto sample = [&](const std::vector<double>& g, int c, double gy, double gx) {
    const Index y0 = std::min<Index>(gh - 2, static_cast<Index>(gy));
    const Index x0 = std::min<Index>(gw - 2, static_cast<Index>(gx));
    const double ty = gy - y0, tx = gx - x0;
    auto at = [&](Index y, Index x) { return g[(c * gh + y) * gw + x]; };
    return (1 - ty) * ((1 - tx) * at(y0, x0) + tx * at(y0, x0 + 1)) +
           ty * ((1 - tx) * at(y0 + 1, x0) + tx * at(y0 + 1, x0 + 1));
  };
  Video v;
  for (Index t = 0; t < frames; ++t) {
    const Index k = t / period;
    const double s = static_cast<double>(t % period) / period;
    TensorF f({1, 3, h, w});
    for (int c = 0; c < 3; ++c)
      for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x) {
          const double gy = (gh - 1) * static_cast<double>(y) / std::max<Index>(1, h - 1);
          const double gx = (gw - 1) * static_cast<double>(x) / std::max<Index>(1, w - 1);
          const double a = sample(grids[k], c, gy, gx), b = sample(grids[k + 1], c, gy, gx);
          f(0, c, y, x) = static_cast<float>((1 - s) * a + s * b);
        }
    v.frames.push_back(std::move(f));
  }
  return v;
}

}  // namespace

Video synth_video(SynthKind kind, Index frames, Index height, Index width, std::uint64_t seed) {
  if (frames <= 0 || height <= 0 || width <= 0)
    throw std::invalid_argument("synth_video: frames, height and width must be positive");
  Rng rng(seed);
  switch (kind) {
    case SynthKind::MovingGradient: return moving_gradient(frames, height, width, rng);
    case SynthKind::BouncingSquare: return bouncing_square(frames, height, width, rng);
    case SynthKind::ColorNoiseSmooth: return color_noise_smooth(frames, height, width, rng);
  }
  throw std::logic_error("unhandled video kind");
}

}  // namespace onrep
