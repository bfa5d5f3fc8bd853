#pragma once

#include "onrep/compression.hpp"

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace onrep {

/// Bad user input: unknown keys, unparsable values, out-of-range options.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Everything a command can be told, merged into one flat key space.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  std::uint64_t seed = 0;

  double sparsity = 0.1;
  int bits = 8;
  long finetune_steps = 0;
  std::vector<double> sweep_sparsity;
  std::vector<int> sweep_bits;

  SynthKind synth_kind = SynthKind::MovingGradient;
  std::string ablate_rows = "table3";

  /// Set one key from its text form; throws ConfigError naming the key.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static const std::vector<std::string>& keys();

  /// Parse "key = value" lines; '#' starts a comment. `source` prefixes diagnostics.
  static RunConfig parse(const std::string& text, const std::string& source = "config");
  static RunConfig load(const std::filesystem::path& path);
  /// Apply "key=value" overrides in order.
  void apply_overrides(const std::vector<std::string>& overrides);

  /// Every key with its current value, in the same syntax `parse` accepts.
  std::string resolved_text() const;
  void write_resolved(const std::filesystem::path& path) const;

  void validate() const;
  /// Everything except the model geometry, which may still come from a video or checkpoint.
  void validate_options() const;
};

}  // namespace onrep
