#include "onrep/training.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

namespace onrep {

namespace {

double cpu_seconds() {
  timespec ts{};
  clock_gettime(CLOCK_PROCESS_CPUTIME_ID, &ts);
  return static_cast<double>(ts.tv_sec) + 1e-9 * static_cast<double>(ts.tv_nsec);
}

}  // namespace

Budget Budget::parse(const std::string& text) {
  const auto colon = text.find(':');
  const std::string kind = text.substr(0, colon);
  if (colon == std::string::npos || (kind != "steps" && kind != "seconds"))
    throw std::invalid_argument("budget '" + text + "' is not steps:N or seconds:S");
  const std::string value = text.substr(colon + 1);
  std::size_t used = 0;
  double amount = 0;
  try {
    amount = std::stod(value, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != value.size() || amount < 0 || !std::isfinite(amount))
    throw std::invalid_argument("budget '" + text + "' has a bad amount");
  if (kind == "steps") {
    if (amount != std::floor(amount)) throw std::invalid_argument("budget '" + text + "': steps must be an integer");
    return steps(static_cast<long>(amount));
  }
  if (amount == 0) throw std::invalid_argument("budget '" + text + "': a time budget must be positive");
  return seconds(amount);
}

std::string Budget::str() const {
  std::ostringstream os;
  if (kind == Kind::Steps)
    os << "steps:" << static_cast<long>(amount);
  else
    os << "seconds:" << amount;
  return os.str();
}

void TrainConfig::validate() const {
  if (alpha < 0 || alpha > 1) throw std::invalid_argument("alpha must lie in [0, 1]");
  if (!(lr > 0)) throw std::invalid_argument("lr must be positive");
  if (adam.beta1 < 0 || adam.beta1 >= 1 || adam.beta2 < 0 || adam.beta2 >= 1)
    throw std::invalid_argument("betas must lie in [0, 1)");
  if (!(adam.eps > 0)) throw std::invalid_argument("eps must be positive");
  if (batch <= 0) throw std::invalid_argument("batch must be positive");
  if (budget.kind == Budget::Kind::Seconds && !(budget.amount > 0))
    throw std::invalid_argument("a time budget must be positive");
}

EvalResult evaluate(const Model& model, const Video& video) {
  video.validate();
  if (video.count() != model.config().frames || video.height() != model.config().height ||
      video.width() != model.config().width)
    throw std::invalid_argument("video is " + std::to_string(video.count()) + "x" +
                                std::to_string(video.height()) + "x" + std::to_string(video.width()) +
                                " but the model decodes " + std::to_string(model.config().frames) + "x" +
                                std::to_string(model.config().height) + "x" +
                                std::to_string(model.config().width));
  EvalResult r;
  std::vector<TensorF> decoded;
  const auto start = std::chrono::steady_clock::now();
  for (Index t = 0; t < video.count(); ++t) decoded.push_back(model.decode({t}));
  r.decode_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  r.fps = r.decode_seconds > 0 ? video.count() / r.decode_seconds : 0.0;
  for (Index t = 0; t < video.count(); ++t) {
    r.psnr.push_back(psnr(decoded[t], video.frames[t]));
    r.ms_ssim.push_back(ms_ssim(decoded[t], video.frames[t]));
  }
  r.mean_psnr = std::accumulate(r.psnr.begin(), r.psnr.end(), 0.0) / video.count();
  r.mean_ms_ssim = std::accumulate(r.ms_ssim.begin(), r.ms_ssim.end(), 0.0) / video.count();
  return r;
}

void apply_mask(std::span<TensorF* const> params, const ParamMask& mask) {
  if (mask.size() != params.size()) throw std::invalid_argument("mask does not match the parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!(mask[i].shape() == params[i]->shape())) throw std::invalid_argument("mask shape mismatch");
    params[i]->array() *= mask[i].array();
  }
}

TrainResult train(Model& model, const Video& video, const TrainConfig& cfg, const ParamMask* mask) {
  cfg.validate();
  video.validate();
  if (video.count() != model.config().frames)
    throw std::invalid_argument("video has " + std::to_string(video.count()) + " frames, model expects " +
                                std::to_string(model.config().frames));
  using Clock = std::chrono::steady_clock;
  std::mt19937_64 rng(cfg.seed);
  const bool by_steps = cfg.budget.kind == Budget::Kind::Steps;
  const long max_steps = by_steps ? static_cast<long>(cfg.budget.amount) : -1;
  AdamState<float> state;
  TrainResult result;
  std::vector<Index> order(video.count());
  std::iota(order.begin(), order.end(), 0);

  double trained = 0;  // seconds spent in optimization steps, evaluation excluded
  auto progress = [&] {
    return by_steps ? static_cast<double>(result.steps) / static_cast<double>(max_steps)
                    : std::min(1.0, trained / cfg.budget.amount);
  };
  auto done = [&] { return by_steps ? result.steps >= max_steps : trained >= cfg.budget.amount; };

  if (mask) apply_mask(model.parameters(), *mask);
  while (!done()) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    long loss_count = 0;
    double lr = 0;
    for (Index begin = 0; begin < video.count() && !done(); begin += cfg.batch) {
      const auto start = Clock::now();
      const double cpu_start = cpu_seconds();
      const Index end = std::min(video.count(), begin + cfg.batch);
      const std::vector<Index> idx(order.begin() + begin, order.begin() + end);
      lr = cosine_lr(progress(), 1.0, cfg.lr);
      Tape<float> tape;
      const auto params = model.parameters();
      const auto vars = tape.parameters(params);
      Var<float> pred = model.forward(vars, idx);
      Var<float> loss = reconstruction_loss(pred, tape.constant(video.batch(idx)), cfg.alpha);
      const double value = loss.value()[0];
      if (!std::isfinite(value)) {
        std::ostringstream os;
        os << "non-finite loss " << value << " at step " << result.steps << " (epoch " << result.epochs
           << ", lr " << lr << ")";
        throw NonFiniteLoss(os.str());
      }
      const Gradients<float> grads = tape.backward(loss);
      adam_step<float>(params, grads, state, lr, cfg.adam);
      if (mask) apply_mask(params, *mask);
      ++result.steps;
      loss_sum += value;
      ++loss_count;
      trained += std::chrono::duration<double>(Clock::now() - start).count();
      result.train_cpu_seconds += cpu_seconds() - cpu_start;
    }
    ++result.epochs;
    if (cfg.log_epochs && loss_count > 0) {
      MetricRow row;
      row.step = result.steps;
      row.epoch = result.epochs;
      row.wall_clock_s = trained;
      row.lr = lr;
      row.loss = loss_sum / loss_count;
      const EvalResult e = evaluate(model, video);
      row.psnr = e.mean_psnr;
      row.ms_ssim = e.mean_ms_ssim;
      result.log.push_back(row);
    }
  }
  result.train_seconds = trained;
  result.final_eval = evaluate(model, video);
  return result;
}

std::string metrics_csv(const std::vector<MetricRow>& log) {
  std::string out = "step,epoch,wall_clock_s,lr,loss,psnr,ms_ssim\n";
  char buf[256];
  for (const MetricRow& r : log) {
    std::snprintf(buf, sizeof buf, "%ld,%ld,%.3f,%.9g,%.9g,%.6f,%.6f\n", r.step, r.epoch, r.wall_clock_s, r.lr,
                  r.loss, r.psnr, r.ms_ssim);
    out += buf;
  }
  return out;
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricRow>& log) {
  std::ofstream out(path);
  out << metrics_csv(log);
  if (!out) throw std::runtime_error("failed to write " + path.string());
}

}  // namespace onrep
