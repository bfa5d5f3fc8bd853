#include "doctest.h"
#include "test_util.hpp"

#include "onrep/training.hpp"

#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>

using namespace onrep;
using namespace onrep::test;

namespace {

ModelConfig tiny_config(StageForm form = StageForm::Online) {
  ModelConfig cfg;
  cfg.frames = 4;
  cfg.height = 16;
  cfg.width = 16;
  cfg.factors = {2, 2};
  cfg.c0 = 8;
  cfg.channel_floor = 4;
  cfg.mlp_hidden = 16;
  cfg.pe_levels = 8;
  cfg.form = form;
  return cfg;
}

Model randomized(const Model& m, std::uint64_t seed, double range) {
  std::mt19937_64 rng(seed);
  std::vector<TensorF> values;
  for (const TensorF* t : m.parameters()) values.push_back(random_tensor<float>(t->shape(), rng, -range, range));
  return m.with_parameters(values);
}

std::vector<char> param_bytes(const Model& m) {
  std::vector<char> out;
  for (const TensorF* t : m.parameters()) {
    const char* p = reinterpret_cast<const char*>(t->data().data());
    out.insert(out.end(), p, p + t->size() * sizeof(float));
  }
  return out;
}

Video constant_video(Index frames, Index h, Index w, const float rgb[3]) {
  Video v;
  for (Index t = 0; t < frames; ++t) {
    TensorF f({1, 3, h, w});
    for (Index c = 0; c < 3; ++c)
      for (Index i = 0; i < h * w; ++i) f[c * h * w + i] = rgb[c];
    v.frames.push_back(f);
  }
  return v;
}

}  // namespace

TEST_CASE("positional encoding examples") {
  const auto zero = positional_encode(0.0, 1.25, 5);
  REQUIRE(zero.size() == 10);
  for (int l = 0; l < 5; ++l) {
    CHECK(zero[2 * l] == 0.0);
    CHECK(zero[2 * l + 1] == 1.0);
  }
  const auto one = positional_encode(0.3, 7.0, 1);
  CHECK(one[0] == doctest::Approx(std::sin(std::numbers::pi * 0.3)));
  CHECK(one[1] == doctest::Approx(std::cos(std::numbers::pi * 0.3)));
  const auto pe = positional_encode(0.7, 1.25, 40);
  CHECK(pe[2 * 39] == doctest::Approx(std::sin(std::pow(1.25, 39) * std::numbers::pi * 0.7)));
  for (double v : pe) CHECK(std::abs(v) <= 1.0);
  CHECK_THROWS(positional_encode(1.01, 1.25, 4));
  CHECK_THROWS(positional_encode(-0.1, 1.25, 4));
  CHECK(normalized_index(0, 1) == 0.0);
  CHECK(normalized_index(3, 7) == 0.5);
}

TEST_CASE("config validation") {
  ModelConfig cfg = tiny_config();
  cfg.height = 18;
  CHECK_THROWS(cfg.validate());
  cfg = tiny_config();
  cfg.factors = {};
  CHECK_THROWS(cfg.validate());
  cfg = tiny_config();
  CHECK(cfg.h0() == 4);
  CHECK(cfg.stage_channels(0) == 8);
  CHECK(cfg.stage_channels(1) == 4);
  CHECK(cfg.stage_block(0).out_channels == 32);
  CHECK(model_config_from_json(model_config_json(cfg)).block == cfg.block);
}

TEST_CASE("decoded shape over random factor lists") {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 12; ++trial) {
    ModelConfig cfg = tiny_config(trial % 2 ? StageForm::Plain : StageForm::Online);
    cfg.factors.clear();
    Index product = 1;
    while (cfg.factors.empty() || (product * 2 <= 16 && rand_int(rng, 0, 1))) {
      const Index f = rand_int(rng, 2, static_cast<int>(std::min<Index>(4, 16 / product)));
      cfg.factors.push_back(f);
      product *= f;
    }
    cfg.height = product * rand_int(rng, 1, 3);
    cfg.width = product * rand_int(rng, 1, 3);
    const Model m = Model::create(cfg, trial);
    const TensorF out = m.decode({0, 3});
    CHECK(out.shape() == Shape{2, 3, cfg.height, cfg.width});
    CHECK(out.data().minCoeff() >= 0.0f);
    CHECK(out.data().maxCoeff() <= 1.0f);
  }
  ModelConfig cfg = tiny_config();
  CHECK(Model::create(cfg, 0).decode({1}).shape() == Shape{1, 3, 16, 16});
}

TEST_CASE("all-zero parameters decode the clamped head bias") {
  const Model m = Model::create(tiny_config(), 5);
  std::vector<TensorF> zeros;
  for (const TensorF* t : m.parameters()) zeros.push_back(TensorF(t->shape()));
  zeros.back()[0] = 0.2f;
  zeros.back()[1] = 1.5f;
  zeros.back()[2] = -0.3f;
  const TensorF out = m.with_parameters(zeros).decode({2});
  for (Index i = 0; i < 16 * 16; ++i) {
    CHECK(out[i] == 0.2f);
    CHECK(out[256 + i] == 1.0f);
    CHECK(out[512 + i] == 0.0f);
  }
}

TEST_CASE("whole-model structural fusion preserves outputs") {
  for (StageForm form : {StageForm::Online, StageForm::Explicit}) {
    const Model m = randomized(Model::create(tiny_config(form), 3), 17, 0.4);
    const Model fused = m.structural_fuse();
    CHECK(fused.deployed());
    CHECK(fused.parameter_count() < m.parameter_count());
    CHECK_THROWS(fused.structural_fuse());
    for (Index t = 0; t < 4; ++t) CHECK(relative_error(fused.decode({t}), m.decode({t})) <= 1e-5);
  }
}

TEST_CASE("same seed gives identical parameters and output") {
  const Model a = Model::create(tiny_config(), 42);
  const Model b = Model::create(tiny_config(), 42);
  const Model c = Model::create(tiny_config(), 43);
  CHECK(param_bytes(a) == param_bytes(b));
  CHECK(param_bytes(a) != param_bytes(c));
  CHECK(a.decode({1}).data() == b.decode({1}).data());
}

TEST_CASE("checkpoint round trip is bit-exact") {
  const Model m = randomized(Model::create(tiny_config(), 1), 2, 0.5);
  for (const Model& src : {m, m.structural_fuse()}) {
    long step = 0;
    const Model back = Model::deserialize(src.serialize(123), &step);
    CHECK(step == 123);
    CHECK(back.deployed() == src.deployed());
    CHECK(param_bytes(back) == param_bytes(src));
    CHECK(back.serialize(123) == src.serialize(123));
  }
  const auto path = std::filesystem::temp_directory_path() / "onrep_ckpt_test.rnvc";
  m.save(path, 7);
  long step = 0;
  CHECK(param_bytes(Model::load(path, &step)) == param_bytes(m));
  CHECK(step == 7);
  std::filesystem::remove(path);
  std::vector<char> bad = m.serialize();
  bad[1] = 'X';
  CHECK_THROWS(Model::deserialize(bad));
  CHECK_THROWS(Model::load("/nonexistent/ckpt.rnvc"));
}

TEST_CASE("complexity counts") {
  CHECK(conv_macs(2, 4, 3, 3, 8, 8) == 4608);
  std::mt19937_64 rng(0);
  CHECK(RepLayer<float>::plain(2, 4, rng).parameter_count() == 76);
  const BlockConfig erb = BlockConfig::erb(2, 4);
  CHECK(block_macs(erb, LayerMode::Deployed, 8, 8) == 4608);
  CHECK(block_macs(erb, LayerMode::ExplicitTrain, 8, 8) > block_macs(erb, LayerMode::Deployed, 8, 8));

  for (StageForm form : {StageForm::Online, StageForm::Explicit, StageForm::Plain}) {
    const ModelConfig cfg = tiny_config(form);
    const Model m = Model::create(cfg, 0);
    const LayerMode mode = form == StageForm::Explicit ? LayerMode::ExplicitTrain : LayerMode::OnlineTrain;
    CHECK(count_params_and_flops(cfg, mode).params == m.parameter_count());
    if (form != StageForm::Plain) {
      CHECK(count_params_and_flops(cfg, LayerMode::Deployed).params == m.structural_fuse().parameter_count());
      CHECK(count_params_and_flops(cfg, mode).params > count_params_and_flops(cfg, LayerMode::Deployed).params);
    }
  }
  ModelConfig a = tiny_config(), b = tiny_config();
  b.block = {BranchSpec::parse(BranchSpec{}.name())};
  CHECK(count_params_and_flops(a, LayerMode::Deployed).params == count_params_and_flops(b, LayerMode::Deployed).params);
  CHECK(count_params_and_flops(a, LayerMode::Deployed).macs == count_params_and_flops(b, LayerMode::Deployed).macs);
  CHECK(count_params_and_flops(a, LayerMode::ExplicitTrain).macs > count_params_and_flops(a, LayerMode::Deployed).macs);
}

TEST_CASE("budget parsing") {
  CHECK(Budget::parse("steps:10").amount == 10);
  CHECK(Budget::parse("seconds:2.5").kind == Budget::Kind::Seconds);
  CHECK(Budget::parse("steps:0").amount == 0);
  CHECK_THROWS(Budget::parse("seconds:0"));
  CHECK_THROWS(Budget::parse("steps:-1"));
  CHECK_THROWS(Budget::parse("steps:1.5"));
  CHECK_THROWS(Budget::parse("epochs:3"));
  CHECK_THROWS(Budget::parse("steps:"));
  CHECK(Budget::parse(Budget::parse("seconds:2.5").str()).amount == 2.5);
}

TEST_CASE("a zero-step budget returns the initial model") {
  Model m = Model::create(tiny_config(), 9);
  const auto before = param_bytes(m);
  TrainConfig tc;
  tc.budget = Budget::steps(0);
  const TrainResult r = train(m, synth_video(SynthKind::MovingGradient, 4, 16, 16, 0), tc);
  CHECK(r.steps == 0);
  CHECK(r.log.empty());
  CHECK(param_bytes(m) == before);
  CHECK(metrics_csv(r.log) == "step,epoch,wall_clock_s,lr,loss,psnr,ms_ssim\n");
}

TEST_CASE("a plain tiny model fits a constant video") {
  const float rgb[3] = {0.25f, 0.6f, 0.8f};
  const Video v = constant_video(4, 16, 16, rgb);
  Model m = Model::create(tiny_config(StageForm::Plain), 1);
  TrainConfig tc;
  tc.lr = 5e-3;
  tc.budget = Budget::steps(500);
  tc.log_epochs = false;
  const TrainResult r = train(m, v, tc);
  CHECK(r.steps == 500);
  CHECK(r.final_eval.mean_psnr > 40.0);
}

TEST_CASE("training logs one row per epoch and is deterministic") {
  const Video v = synth_video(SynthKind::ColorNoiseSmooth, 4, 16, 16, 2);
  TrainConfig tc;
  tc.lr = 2e-3;
  tc.seed = 5;
  tc.budget = Budget::steps(30);
  Model a = Model::create(tiny_config(), 1);
  Model b = Model::create(tiny_config(), 1);
  const TrainResult ra = train(a, v, tc);
  const TrainResult rb = train(b, v, tc);
  REQUIRE(ra.log.size() == 8);
  CHECK(ra.log.back().step == 30);
  CHECK(ra.log.back().epoch == 8);
  CHECK(ra.log.back().lr > 0);
  CHECK(a.serialize(ra.steps) == b.serialize(rb.steps));
  for (std::size_t i = 0; i < ra.log.size(); ++i) {
    CHECK(ra.log[i].loss == rb.log[i].loss);
    CHECK(ra.log[i].psnr == rb.log[i].psnr);
    CHECK(ra.log[i].ms_ssim == rb.log[i].ms_ssim);
    CHECK(ra.log[i].lr == rb.log[i].lr);
  }
  CHECK(ra.final_eval.mean_psnr == evaluate(a, v).mean_psnr);
  CHECK(ra.final_eval.mean_psnr == ra.log.back().psnr);
}

TEST_CASE("online and explicit training agree") {
  const Video v = synth_video(SynthKind::MovingGradient, 4, 16, 16, 4);
  TrainConfig tc;
  tc.lr = 2e-3;
  tc.budget = Budget::steps(40);
  tc.log_epochs = false;
  Model on = Model::create(tiny_config(StageForm::Online), 3);
  Model ex = Model::create(tiny_config(StageForm::Explicit), 3);
  CHECK(param_bytes(on) == param_bytes(ex));
  const double p_on = train(on, v, tc).final_eval.mean_psnr;
  const double p_ex = train(ex, v, tc).final_eval.mean_psnr;
  CHECK(std::abs(p_on - p_ex) <= 1e-3);
}

TEST_CASE("smoothed psnr rises over training") {
  const Video v = synth_video(SynthKind::MovingGradient, 4, 16, 16, 6);
  TrainConfig tc;
  tc.lr = 2e-3;
  tc.budget = Budget::steps(4 * 60);
  Model m = Model::create(tiny_config(), 6);
  const TrainResult r = train(m, v, tc);
  REQUIRE(r.log.size() == 60);
  double previous = -1;
  for (std::size_t w = 0; w + 5 <= r.log.size(); w += 5) {
    double mean = 0;
    for (std::size_t i = w; i < w + 5; ++i) mean += r.log[i].psnr / 5;
    CHECK(mean >= previous);
    previous = mean;
  }
}

TEST_CASE("a non-finite loss aborts training") {
  Model m = Model::create(tiny_config(), 1);
  (*m.parameters()[0])[0] = std::numeric_limits<float>::quiet_NaN();
  TrainConfig tc;
  tc.budget = Budget::steps(3);
  CHECK_THROWS_AS(train(m, synth_video(SynthKind::MovingGradient, 4, 16, 16, 0), tc), NonFiniteLoss);
}

TEST_CASE("training rejects bad settings") {
  Model m = Model::create(tiny_config(), 1);
  const Video v = synth_video(SynthKind::MovingGradient, 4, 16, 16, 0);
  TrainConfig tc;
  tc.alpha = 1.5;
  CHECK_THROWS(train(m, v, tc));
  tc = TrainConfig{};
  tc.adam.beta1 = 1.0;
  CHECK_THROWS(train(m, v, tc));
  tc = TrainConfig{};
  CHECK_THROWS(train(m, synth_video(SynthKind::MovingGradient, 3, 16, 16, 0), tc));
}
