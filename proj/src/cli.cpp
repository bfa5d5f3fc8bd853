#include "onrep/cli.hpp"

#include "onrep/config.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <optional>

namespace onrep {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "key = value config file")->check(CLI::ExistingFile);
  cmd->add_option("--set", c.overrides, "config override key=value (repeatable)");
}

RunConfig base_config(const Common& c) {
  RunConfig cfg = c.config_path.empty() ? RunConfig{} : RunConfig::load(c.config_path);
  cfg.apply_overrides(c.overrides);
  return cfg;
}

/// Model geometry follows the video it encodes.
void match_video(RunConfig& cfg, const Video& v) {
  cfg.model.frames = v.count();
  cfg.model.height = v.height();
  cfg.model.width = v.width();
}

/// Model-shaped keys come from the checkpoint; everything else from the user.
void match_model(RunConfig& cfg, const Model& m) { cfg.model = m.config(); }

fs::path sidecar(const fs::path& p, const std::string& suffix) { return fs::path(p.string() + suffix); }

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
  if (!out) throw std::runtime_error("failed to write " + p.string());
}

json eval_json(const EvalResult& e) {
  return {{"frames", e.psnr.size()},
          {"psnr", e.psnr},
          {"ms_ssim", e.ms_ssim},
          {"mean_psnr", e.mean_psnr},
          {"mean_ms_ssim", e.mean_ms_ssim},
          {"decode_seconds", e.decode_seconds},
          {"fps", e.fps}};
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Online reparameterized neural video representation"};
  app.require_subcommand(1);

  Common common;

  auto* synth = app.add_subcommand("synth", "generate a synthetic frame directory");
  std::string kind, synth_out;
  Index frames = 0, height = 0, width = 0;
  long seed = -1;
  synth->add_option("--kind", kind, "moving_gradient | bouncing_square | color_noise_smooth");
  synth->add_option("--frames", frames);
  synth->add_option("--height", height);
  synth->add_option("--width", width);
  synth->add_option("--seed", seed);
  synth->add_option("--out", synth_out, "output directory")->required();
  add_common(synth, common);

  auto* train_cmd = app.add_subcommand("train", "encode a video into a checkpoint");
  std::string frames_dir, ckpt_out, mode, budget, metrics_path;
  train_cmd->add_option("--frames-dir", frames_dir)->required()->check(CLI::ExistingDirectory);
  train_cmd->add_option("--out", ckpt_out, "checkpoint path")->required();
  train_cmd->add_option("--mode", mode, "online | explicit | plain");
  train_cmd->add_option("--budget", budget, "steps:N or seconds:S");
  train_cmd->add_option("--seed", seed);
  train_cmd->add_option("--metrics", metrics_path, "metric CSV (default <out>.metrics.csv)");
  add_common(train_cmd, common);

  auto* fuse = app.add_subcommand("fuse", "collapse a train-form checkpoint to deploy form");
  std::string ckpt_in;
  fuse->add_option("--in", ckpt_in)->required()->check(CLI::ExistingFile);
  fuse->add_option("--out", ckpt_out)->required();
  add_common(fuse, common);

  auto* eval = app.add_subcommand("eval", "score a checkpoint against frames");
  std::string json_out;
  eval->add_option("--ckpt", ckpt_in)->required()->check(CLI::ExistingFile);
  eval->add_option("--frames-dir", frames_dir)->required()->check(CLI::ExistingDirectory);
  eval->add_option("--out", json_out, "metrics JSON (default stdout)");
  add_common(eval, common);

  auto* compress_cmd = app.add_subcommand("compress", "prune, quantize and entropy-code a checkpoint");
  std::string z_out, rd_out;
  std::optional<double> sparsity;
  std::optional<int> bits;
  std::optional<long> finetune;
  compress_cmd->add_option("--ckpt", ckpt_in)->required()->check(CLI::ExistingFile);
  compress_cmd->add_option("--frames-dir", frames_dir)->required()->check(CLI::ExistingDirectory);
  compress_cmd->add_option("--sparsity", sparsity);
  compress_cmd->add_option("--bits", bits);
  compress_cmd->add_option("--finetune-steps", finetune);
  compress_cmd->add_option("--out", z_out, "compressed model path")->required();
  compress_cmd->add_option("--rd", rd_out, "rate-distortion CSV (default <out>.rd.csv)");
  add_common(compress_cmd, common);

  auto* ablate = app.add_subcommand("ablate", "train every branch configuration of the ablation table");
  std::string rows, csv_out;
  ablate->add_option("--frames-dir", frames_dir)->required()->check(CLI::ExistingDirectory);
  ablate->add_option("--rows", rows, "table3 | all");
  ablate->add_option("--budget", budget);
  ablate->add_option("--seed", seed);
  ablate->add_option("--out", csv_out, "CSV path")->required();
  add_common(ablate, common);

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    if (!rev.empty()) rev.pop_back();
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  RunConfig cfg;
  try {
    cfg = base_config(common);
    if (!kind.empty()) cfg.set("synth_kind", kind);
    if (frames) cfg.model.frames = frames;
    if (height) cfg.model.height = height;
    if (width) cfg.model.width = width;
    if (seed >= 0) cfg.set("seed", std::to_string(seed));
    if (!mode.empty()) cfg.set("mode", mode);
    if (!budget.empty()) cfg.set("budget", budget);
    if (!rows.empty()) cfg.set("ablate_rows", rows);
    if (sparsity) cfg.sparsity = *sparsity;
    if (bits) cfg.bits = *bits;
    if (finetune) cfg.finetune_steps = *finetune;
    cfg.validate_options();
    if (synth->parsed() && (cfg.model.frames <= 0 || cfg.model.height <= 0 || cfg.model.width <= 0))
      throw ConfigError("frames, height and width must be positive");
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    if (synth->parsed()) {
      const Video v = synth_video(cfg.synth_kind, cfg.model.frames, cfg.model.height, cfg.model.width, cfg.seed);
      write_frames(v, synth_out);
      cfg.write_resolved(fs::path(synth_out) / "config.txt");
      out << "wrote " << v.count() << " frames to " << synth_out << "\n";
    } else if (train_cmd->parsed()) {
      const Video v = read_frames(frames_dir);
      match_video(cfg, v);
      cfg.validate();
      Model model = Model::create(cfg.model, cfg.seed);
      const TrainResult r = train(model, v, cfg.train);
      model.save(ckpt_out, r.steps);
      write_metrics_csv(metrics_path.empty() ? sidecar(ckpt_out, ".metrics.csv") : fs::path(metrics_path), r.log);
      cfg.write_resolved(sidecar(ckpt_out, ".config.txt"));
      out << "mode " << stage_form_name(cfg.model.form) << " steps " << r.steps << " epochs " << r.epochs
          << " psnr " << fixed(r.final_eval.mean_psnr, 4) << " ms_ssim " << fixed(r.final_eval.mean_ms_ssim, 6)
          << " train_s " << fixed(r.train_seconds, 3) << "\n";
    } else if (fuse->parsed()) {
      long step = 0;
      const Model m = Model::load(ckpt_in, &step);
      if (m.deployed()) {
        err << "error: " << ckpt_in << " is already in deploy form\n";
        return kExitRuntime;
      }
      const Model fused = m.structural_fuse();
      fused.save(ckpt_out, step);
      match_model(cfg, fused);
      cfg.write_resolved(sidecar(ckpt_out, ".config.txt"));
      out << "params " << m.parameter_count() << " -> " << fused.parameter_count() << "\n";
    } else if (eval->parsed()) {
      const Model m = Model::load(ckpt_in);
      const Video v = read_frames(frames_dir);
      const json j = eval_json(evaluate(m, v));
      if (json_out.empty()) {
        out << j.dump(1) << "\n";
      } else {
        write_text(json_out, j.dump(1) + "\n");
        match_model(cfg, m);
        cfg.write_resolved(sidecar(json_out, ".config.txt"));
      }
    } else if (compress_cmd->parsed()) {
      Model m = Model::load(ckpt_in);
      if (!m.deployed()) m = m.structural_fuse();
      match_model(cfg, m);
      const Video v = read_frames(frames_dir);
      PipelineResult r = compress_pipeline(m, v, cfg.sparsity, cfg.bits, cfg.finetune_steps, cfg.train);
      write_text(z_out, std::string(r.compressed.bytes.begin(), r.compressed.bytes.end()));
      std::vector<RdPoint> points = {r.point};
      if (!cfg.sweep_sparsity.empty() || !cfg.sweep_bits.empty()) {
        const auto sp = cfg.sweep_sparsity.empty() ? std::vector<double>{cfg.sparsity} : cfg.sweep_sparsity;
        const auto bs = cfg.sweep_bits.empty() ? std::vector<int>{cfg.bits} : cfg.sweep_bits;
        for (const RdPoint& p : rd_sweep(m, v, sp, bs, cfg.finetune_steps, cfg.train)) points.push_back(p);
      }
      write_text(rd_out.empty() ? sidecar(z_out, ".rd.csv") : fs::path(rd_out), rd_csv(points));
      cfg.write_resolved(sidecar(z_out, ".config.txt"));
      out << "total_bits " << r.point.total_bits << " bpp " << fixed(r.point.bpp, 6) << " psnr "
          << fixed(r.point.psnr, 4) << " ms_ssim " << fixed(r.point.ms_ssim, 6) << "\n";
    } else if (ablate->parsed()) {
      const Video v = read_frames(frames_dir);
      match_video(cfg, v);
      cfg.validate();
      std::string csv = "row,label,branches,train_params,deploy_params,steps,psnr,ms_ssim\n";
      auto run_row = [&](const std::string& label, const ModelConfig& mc, std::size_t index) {
        Model model = Model::create(mc, cfg.seed);
        TrainConfig tc = cfg.train;
        tc.log_epochs = false;
        const TrainResult r = train(model, v, tc);
        const Index train_params = model.parameter_count();
        const Index deploy_params = model.deployed() ? train_params : model.structural_fuse().parameter_count();
        const std::string branches =
            mc.form == StageForm::Plain
                ? "plain"
                : [&] {
                    std::string s;
                    for (const BranchSpec& b : mc.block) s += (s.empty() ? "" : "+") + b.name();
                    return s;
                  }();
        csv += std::to_string(index) + ",\"" + label + "\"," + branches + "," + std::to_string(train_params) + "," +
               std::to_string(deploy_params) + "," + std::to_string(r.steps) + "," +
               fixed(r.final_eval.mean_psnr, 4) + "," + fixed(r.final_eval.mean_ms_ssim, 6) + "\n";
        out << label << ": psnr " << fixed(r.final_eval.mean_psnr, 4) << "\n";
      };
      const auto& table = table3_rows();
      for (std::size_t i = 0; i < table.size(); ++i) {
        ModelConfig mc = cfg.model;
        if (mc.form == StageForm::Plain) mc.form = StageForm::Online;
        mc.block = make_table3_config(table[i], 1, 1).branches;
        run_row(table[i].label(), mc, i + 1);
      }
      if (cfg.ablate_rows == "all") {
        ModelConfig mc = cfg.model;
        mc.form = StageForm::Plain;
        run_row("plain conv", mc, table.size() + 1);
      }
      write_text(csv_out, csv);
      cfg.write_resolved(sidecar(csv_out, ".config.txt"));
    }
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace onrep
