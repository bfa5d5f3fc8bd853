#include "onrep/config.hpp"

#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace onrep {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double d = 0;
  try {
    d = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw ConfigError(key + ": expected a number, got '" + v + "'");
  return d;
}

long to_long(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  long n = 0;
  try {
    n = std::stol(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw ConfigError(key + ": expected an integer, got '" + v + "'");
  return n;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

/// Shortest %g text that parses back to the same double.
std::string fmt(double d) {
  char buf[40];
  for (int p = 6; p <= 17; ++p) {
    std::snprintf(buf, sizeof buf, "%.*g", p, d);
    if (std::stod(buf) == d) break;
  }
  return buf;
}

template <typename T, typename F>
std::string join(const std::vector<T>& v, F f) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + f(v[i]);
  return out;
}

struct Field {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

const std::vector<std::pair<std::string, Field>>& fields() {
  using R = RunConfig;
  using S = const std::string&;
  static const std::vector<std::pair<std::string, Field>> table = {
      {"frames", {[](R& c, S k, S v) { c.model.frames = to_long(k, v); },
                  [](const R& c) { return std::to_string(c.model.frames); }}},
      {"height", {[](R& c, S k, S v) { c.model.height = to_long(k, v); },
                  [](const R& c) { return std::to_string(c.model.height); }}},
      {"width", {[](R& c, S k, S v) { c.model.width = to_long(k, v); },
                 [](const R& c) { return std::to_string(c.model.width); }}},
      {"factors", {[](R& c, S k, S v) {
                     c.model.factors.clear();
                     for (const auto& f : split_list(v)) c.model.factors.push_back(to_long(k, f));
                   },
                   [](const R& c) { return join(c.model.factors, [](Index f) { return std::to_string(f); }); }}},
      {"c0", {[](R& c, S k, S v) { c.model.c0 = to_long(k, v); },
              [](const R& c) { return std::to_string(c.model.c0); }}},
      {"channel_floor", {[](R& c, S k, S v) { c.model.channel_floor = to_long(k, v); },
                         [](const R& c) { return std::to_string(c.model.channel_floor); }}},
      {"mlp_hidden", {[](R& c, S k, S v) { c.model.mlp_hidden = to_long(k, v); },
                      [](const R& c) { return std::to_string(c.model.mlp_hidden); }}},
      {"pe_base", {[](R& c, S k, S v) { c.model.pe_base = to_double(k, v); },
                   [](const R& c) { return fmt(c.model.pe_base); }}},
      {"pe_levels", {[](R& c, S k, S v) { c.model.pe_levels = to_long(k, v); },
                     [](const R& c) { return std::to_string(c.model.pe_levels); }}},
      {"block", {[](R& c, S k, S v) {
                   c.model.block.clear();
                   for (const auto& b : split_list(v)) {
                     try {
                       c.model.block.push_back(BranchSpec::parse(b));
                     } catch (const std::invalid_argument& e) {
                       throw ConfigError(k + ": " + e.what());
                     }
                   }
                 },
                 [](const R& c) { return join(c.model.block, [](const BranchSpec& b) { return b.name(); }); }}},
      {"mid_channels", {[](R& c, S k, S v) { c.model.mid_channels = to_long(k, v); },
                        [](const R& c) { return std::to_string(c.model.mid_channels); }}},
      {"mode", {[](R& c, S k, S v) {
                  try {
                    c.model.form = parse_stage_form(v);
                  } catch (const std::invalid_argument& e) {
                    throw ConfigError(k + ": " + e.what());
                  }
                },
                [](const R& c) { return std::string(stage_form_name(c.model.form)); }}},
      {"alpha", {[](R& c, S k, S v) { c.train.alpha = to_double(k, v); },
                 [](const R& c) { return fmt(c.train.alpha); }}},
      {"lr", {[](R& c, S k, S v) { c.train.lr = to_double(k, v); }, [](const R& c) { return fmt(c.train.lr); }}},
      {"beta1", {[](R& c, S k, S v) { c.train.adam.beta1 = to_double(k, v); },
                 [](const R& c) { return fmt(c.train.adam.beta1); }}},
      {"beta2", {[](R& c, S k, S v) { c.train.adam.beta2 = to_double(k, v); },
                 [](const R& c) { return fmt(c.train.adam.beta2); }}},
      {"eps", {[](R& c, S k, S v) { c.train.adam.eps = to_double(k, v); },
               [](const R& c) { return fmt(c.train.adam.eps); }}},
      {"seed", {[](R& c, S k, S v) {
                  const long s = to_long(k, v);
                  if (s < 0) throw ConfigError(k + ": must be non-negative");
                  c.seed = static_cast<std::uint64_t>(s);
                  c.train.seed = c.seed;
                },
                [](const R& c) { return std::to_string(c.seed); }}},
      {"batch", {[](R& c, S k, S v) { c.train.batch = to_long(k, v); },
                 [](const R& c) { return std::to_string(c.train.batch); }}},
      {"budget", {[](R& c, S k, S v) {
                    try {
                      c.train.budget = Budget::parse(v);
                    } catch (const std::invalid_argument& e) {
                      throw ConfigError(k + ": " + e.what());
                    }
                  },
                  [](const R& c) { return c.train.budget.str(); }}},
      {"log_epochs", {[](R& c, S k, S v) { c.train.log_epochs = to_bool(k, v); },
                      [](const R& c) { return std::string(c.train.log_epochs ? "true" : "false"); }}},
      {"sparsity", {[](R& c, S k, S v) { c.sparsity = to_double(k, v); },
                    [](const R& c) { return fmt(c.sparsity); }}},
      {"bits", {[](R& c, S k, S v) { c.bits = static_cast<int>(to_long(k, v)); },
                [](const R& c) { return std::to_string(c.bits); }}},
      {"finetune_steps", {[](R& c, S k, S v) { c.finetune_steps = to_long(k, v); },
                          [](const R& c) { return std::to_string(c.finetune_steps); }}},
      {"sweep_sparsity", {[](R& c, S k, S v) {
                            c.sweep_sparsity.clear();
                            for (const auto& s : split_list(v)) c.sweep_sparsity.push_back(to_double(k, s));
                          },
                          [](const R& c) { return join(c.sweep_sparsity, fmt); }}},
      {"sweep_bits", {[](R& c, S k, S v) {
                        c.sweep_bits.clear();
                        for (const auto& s : split_list(v)) c.sweep_bits.push_back(static_cast<int>(to_long(k, s)));
                      },
                      [](const R& c) { return join(c.sweep_bits, [](int b) { return std::to_string(b); }); }}},
      {"synth_kind", {[](R& c, S k, S v) {
                        try {
                          c.synth_kind = parse_synth_kind(v);
                        } catch (const std::invalid_argument& e) {
                          throw ConfigError(k + ": " + e.what());
                        }
                      },
                      [](const R& c) { return std::string(synth_kind_name(c.synth_kind)); }}},
      {"ablate_rows", {[](R& c, S k, S v) {
                         if (v != "table3" && v != "all") throw ConfigError(k + ": expected table3 or all");
                         c.ablate_rows = v;
                       },
                       [](const R& c) { return c.ablate_rows; }}},
  };
  return table;
}

const Field& field(const std::string& key) {
  for (const auto& [name, f] : fields())
    if (name == key) return f;
  throw ConfigError("unknown key '" + key + "'");
}

}  // namespace

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> v;
    for (const auto& [name, f] : fields()) v.push_back(name);
    return v;
  }();
  return names;
}

void RunConfig::set(const std::string& key, const std::string& value) { field(key).set(*this, key, value); }

std::string RunConfig::get(const std::string& key) const { return field(key).get(*this); }

RunConfig RunConfig::parse(const std::string& text, const std::string& source) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const std::string body = trim(line.substr(0, line.find('#')));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    const std::string where = source + ":" + std::to_string(number) + ": ";
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value, got '" + body + "'");
    try {
      cfg.set(trim(body.substr(0, eq)), trim(body.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  return cfg;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

void RunConfig::apply_overrides(const std::vector<std::string>& overrides) {
  for (const std::string& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + o + "' is not key=value");
    try {
      set(trim(o.substr(0, eq)), trim(o.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError("override '" + o + "': " + e.what());
    }
  }
}

std::string RunConfig::resolved_text() const {
  std::string out;
  for (const auto& [name, f] : fields()) out += name + " = " + f.get(*this) + "\n";
  return out;
}

void RunConfig::write_resolved(const std::filesystem::path& path) const {
  std::ofstream out(path);
  out << resolved_text();
  if (!out) throw std::runtime_error("failed to write " + path.string());
}

void RunConfig::validate() const {
  try {
    model.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  validate_options();
}

void RunConfig::validate_options() const {
  try {
    train.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (!(sparsity >= 0 && sparsity < 1)) throw ConfigError("sparsity must lie in [0, 1)");
  if (bits < 2 || bits > 16) throw ConfigError("bits must lie in [2, 16]");
  if (finetune_steps < 0) throw ConfigError("finetune_steps must be non-negative");
  for (double s : sweep_sparsity)
    if (!(s >= 0 && s < 1)) throw ConfigError("sweep_sparsity entries must lie in [0, 1)");
  for (int b : sweep_bits)
    if (b < 2 || b > 16) throw ConfigError("sweep_bits entries must lie in [2, 16]");
}

}  // namespace onrep
