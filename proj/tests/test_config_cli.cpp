#include "doctest.h"

#include "onrep/cli.hpp"
#include "onrep/config.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

using namespace onrep;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("onrep_cli_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  args.insert(args.begin(), "onrep");
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::string& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Every column except wall_clock_s.
std::string strip_clock(const std::string& csv) {
  std::istringstream in(csv);
  std::string line, out;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    for (std::size_t i = 0; i < cells.size(); ++i)
      if (i != 2) out += cells[i] + ",";
    out += "\n";
  }
  return out;
}

const std::vector<std::string> kTiny = {"--set", "c0=8",        "--set", "channel_floor=4",
                                        "--set", "mlp_hidden=16", "--set", "pe_levels=8"};

std::vector<std::string> with_tiny(std::vector<std::string> args) {
  args.insert(args.end(), kTiny.begin(), kTiny.end());
  return args;
}

}  // namespace

TEST_CASE("config files parse with comments and report the failing line") {
  const RunConfig cfg = RunConfig::parse("# desk run\nc0 = 12  # channels\n\nblock = 3x3, 1x1\nbudget=seconds:4\nseed=9\n");
  CHECK(cfg.model.c0 == 12);
  REQUIRE(cfg.model.block.size() == 2);
  CHECK(cfg.model.block[1].name() == "1x1");
  CHECK(cfg.train.budget.kind == Budget::Kind::Seconds);
  CHECK(cfg.train.seed == 9);

  auto message = [](const std::string& text) {
    try {
      RunConfig::parse(text, "run.cfg");
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(message("c0 = 8\nwidth_mult = 2\n").rfind("run.cfg:2:", 0) == 0);
  CHECK(message("c0 = eight\n").rfind("run.cfg:1:", 0) == 0);
  CHECK(message("\n\njust words\n").rfind("run.cfg:3:", 0) == 0);
  CHECK(message("block = 3x3,5x5\n").find("5x5") != std::string::npos);
  CHECK(message("mode = turbo\n") != "");
}

TEST_CASE("overrides apply in order and resolved text parses back") {
  RunConfig cfg;
  cfg.apply_overrides({"lr=0.001", "lr=0.002", "sweep_bits=8,4", "factors=4,2"});
  CHECK(cfg.train.lr == 0.002);
  CHECK(cfg.sweep_bits == std::vector<int>{8, 4});
  CHECK_THROWS_AS(cfg.apply_overrides({"nope=1"}), ConfigError);
  CHECK_THROWS_AS(cfg.apply_overrides({"lr"}), ConfigError);
  const RunConfig back = RunConfig::parse(cfg.resolved_text());
  CHECK(back.resolved_text() == cfg.resolved_text());
  for (const std::string& key : RunConfig::keys()) CHECK(back.get(key) == cfg.get(key));
}

TEST_CASE("config validation rejects out-of-range options") {
  RunConfig cfg;
  cfg.sparsity = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = RunConfig{};
  cfg.bits = 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = RunConfig{};
  cfg.train.alpha = -0.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK_NOTHROW(RunConfig{}.validate());
}

TEST_CASE("cli usage errors exit with 1") {
  CHECK(cli({}).code == kExitUsage);
  CHECK(cli({"dance"}).code == kExitUsage);
  CHECK(cli({"synth", "--kind", "zigzag", "--out", "/tmp/unused"}).code == kExitUsage);
  CHECK(cli({"eval", "--ckpt", "/nonexistent", "--frames-dir", "/nonexistent"}).code == kExitUsage);
  CHECK(cli({"--help"}).code == kExitOk);
}

TEST_CASE("cli workflow") {
  TempDir dir;
  const std::string frames = dir / "frames";
  REQUIRE(cli({"synth", "--kind", "moving_gradient", "--frames", "4", "--height", "16", "--width", "16", "--seed",
               "2", "--out", frames})
              .code == kExitOk);
  CHECK(fs::exists(frames + "/frame_00003.ppm"));
  CHECK(fs::exists(frames + "/config.txt"));
  const std::string again = dir / "again";
  cli({"synth", "--kind", "moving_gradient", "--frames", "4", "--height", "16", "--width", "16", "--seed", "2",
       "--out", again});
  CHECK(slurp(frames + "/frame_00002.ppm") == slurp(again + "/frame_00002.ppm"));

  const std::string zero = dir / "zero.rnvc";
  REQUIRE(cli(with_tiny({"train", "--frames-dir", frames, "--out", zero, "--budget", "steps:0"})).code == kExitOk);
  CHECK(slurp(zero + ".metrics.csv") == "step,epoch,wall_clock_s,lr,loss,psnr,ms_ssim\n");

  const std::string a = dir / "a.rnvc", b = dir / "b.rnvc";
  const auto train_args = [&](const std::string& out) {
    return with_tiny({"train", "--frames-dir", frames, "--out", out, "--budget", "steps:12", "--seed", "4"});
  };
  const Run ra = cli(train_args(a));
  REQUIRE(ra.code == kExitOk);
  REQUIRE(cli(train_args(b)).code == kExitOk);
  CHECK(slurp(a) == slurp(b));
  CHECK(strip_clock(slurp(a + ".metrics.csv")) == strip_clock(slurp(b + ".metrics.csv")));
  CHECK(RunConfig::load(a + ".config.txt").model.c0 == 8);

  const std::string f = dir / "f.rnvc";
  REQUIRE(cli({"fuse", "--in", a, "--out", f}).code == kExitOk);
  CHECK(fs::file_size(f) < fs::file_size(a));
  CHECK(cli({"fuse", "--in", f, "--out", dir / "g.rnvc"}).code == kExitRuntime);

  const std::string ea = dir / "ea.json", ef = dir / "ef.json";
  REQUIRE(cli({"eval", "--ckpt", a, "--frames-dir", frames, "--out", ea}).code == kExitOk);
  REQUIRE(cli({"eval", "--ckpt", f, "--frames-dir", frames, "--out", ef}).code == kExitOk);
  const auto ja = nlohmann::json::parse(slurp(ea)), jf = nlohmann::json::parse(slurp(ef));
  CHECK(std::abs(ja["mean_psnr"].get<double>() - jf["mean_psnr"].get<double>()) <= 1e-3);
  CHECK(ja["psnr"].size() == 4);
  CHECK(ja["fps"].get<double>() > 0);
  const auto last_row = [&] {
    std::istringstream in(slurp(a + ".metrics.csv"));
    std::string line, last;
    while (std::getline(in, line)) last = line;
    return last;
  }();
  const double logged = std::stod(last_row.substr(last_row.rfind(',', last_row.rfind(',') - 1) + 1));
  CHECK(std::abs(logged - ja["mean_psnr"].get<double>()) <= 1e-3);

  const std::string z = dir / "m.rnvz";
  CHECK(cli({"compress", "--ckpt", f, "--frames-dir", frames, "--out", z, "--sparsity", "1.0"}).code == kExitUsage);
  REQUIRE(cli({"compress", "--ckpt", f, "--frames-dir", frames, "--out", z, "--set", "sweep_bits=8,4"}).code ==
          kExitOk);
  SizeReport sizes;
  const std::string bytes = slurp(z);
  const Model decoded = decompress(std::vector<char>(bytes.begin(), bytes.end()), &sizes);
  CHECK(sizes.total_bits == 8 * fs::file_size(z));
  CHECK(decoded.deployed());
  const std::string rd = slurp(z + ".rd.csv");
  CHECK(std::count(rd.begin(), rd.end(), '\n') == 4);
  CHECK(rd.find(std::to_string(sizes.total_bits)) != std::string::npos);

  const std::string ab1 = dir / "ab1.csv", ab2 = dir / "ab2.csv";
  const auto ablate_args = [&](const std::string& out) {
    return with_tiny({"ablate", "--frames-dir", frames, "--rows", "table3", "--budget", "steps:2", "--out", out});
  };
  REQUIRE(cli(ablate_args(ab1)).code == kExitOk);
  REQUIRE(cli(ablate_args(ab2)).code == kExitOk);
  const std::string table = slurp(ab1);
  CHECK(table == slurp(ab2));
  CHECK(std::count(table.begin(), table.end(), '\n') == 15);
  CHECK(table.find("3x3+1x3+3x1+1x1-3x3-1x1") != std::string::npos);
}
