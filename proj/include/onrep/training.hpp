#pragma once

#include "onrep/metrics.hpp"
#include "onrep/model.hpp"
#include "onrep/optim.hpp"
#include "onrep/video_io.hpp"

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace onrep {

/// "steps:N" or "seconds:S".
struct Budget {
  enum class Kind { Steps, Seconds };
  Kind kind = Kind::Steps;
  double amount = 300;

  static Budget steps(long n) { return {Kind::Steps, static_cast<double>(n)}; }
  static Budget seconds(double s) { return {Kind::Seconds, s}; }
  static Budget parse(const std::string& text);
  std::string str() const;
};

struct TrainConfig {
  double alpha = 0.7;
  double lr = 5e-4;
  AdamOptions adam;
  std::uint64_t seed = 0;
  Index batch = 1;
  Budget budget;
  /// Evaluate PSNR / MS-SSIM on all frames at the end of every epoch.
  bool log_epochs = true;

  void validate() const;
};

struct MetricRow {
  long step = 0;
  long epoch = 0;
  double wall_clock_s = 0;
  double lr = 0;
  double loss = 0;
  double psnr = 0;
  double ms_ssim = 0;
};

struct EvalResult {
  std::vector<double> psnr;
  std::vector<double> ms_ssim;
  double mean_psnr = 0;
  double mean_ms_ssim = 0;
  double decode_seconds = 0;
  double fps = 0;
};

struct TrainResult {
  long steps = 0;
  long epochs = 0;
  double train_seconds = 0;
  /// Process CPU time over the same optimization steps.
  double train_cpu_seconds = 0;
  std::vector<MetricRow> log;
  EvalResult final_eval;
};

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 0/1 per parameter entry; zeros stay zero through every update.
using ParamMask = std::vector<TensorF>;

/// Decode every frame one at a time and score it against the video.
EvalResult evaluate(const Model& model, const Video& video);

TrainResult train(Model& model, const Video& video, const TrainConfig& cfg, const ParamMask* mask = nullptr);

void apply_mask(std::span<TensorF* const> params, const ParamMask& mask);

std::string metrics_csv(const std::vector<MetricRow>& log);
void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricRow>& log);

}  // namespace onrep
