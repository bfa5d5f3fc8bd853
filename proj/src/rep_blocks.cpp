#include "onrep/rep_blocks.hpp"

#include <stdexcept>

namespace onrep {

std::string BranchSpec::name() const {
  switch (kind) {
    case BranchKind::Vanilla3x3: return "3x3";
    case BranchKind::Asym1x3: return "1x3";
    case BranchKind::Asym3x1: return "3x1";
    case BranchKind::Point1x1: return "1x1";
    case BranchKind::Seq_1x1_3x3: return "1x1-3x3";
    case BranchKind::Seq_1x1_3x3_1x1: return "1x1-3x3-1x1";
    case BranchKind::AvgPool3x3: return "avgpool";
    case BranchKind::ScaledFixed:
      switch (filter) {
        case FixedFilter::SobelX: return "sobelx";
        case FixedFilter::SobelY: return "sobely";
        case FixedFilter::Laplacian: return "laplacian";
        case FixedFilter::None: break;
      }
  }
  return "invalid";
}

BranchSpec BranchSpec::parse(const std::string& name) {
  static const std::vector<BranchSpec> all = {
      {BranchKind::Vanilla3x3},      {BranchKind::Asym1x3},
      {BranchKind::Asym3x1},         {BranchKind::Point1x1},
      {BranchKind::Seq_1x1_3x3},     {BranchKind::Seq_1x1_3x3_1x1},
      {BranchKind::AvgPool3x3},      {BranchKind::ScaledFixed, FixedFilter::SobelX},
      {BranchKind::ScaledFixed, FixedFilter::SobelY},
      {BranchKind::ScaledFixed, FixedFilter::Laplacian},
  };
  for (const BranchSpec& s : all)
    if (s.name() == name) return s;
  throw std::invalid_argument("unknown branch kind '" + name + "'");
}

void BlockConfig::validate() const {
  if (in_channels <= 0 || out_channels <= 0)
    throw std::invalid_argument("block channels must be positive");
  if (branches.empty()) throw std::invalid_argument("block has no branches");
  for (const BranchSpec& b : branches) {
    if ((b.kind == BranchKind::ScaledFixed) != (b.filter != FixedFilter::None))
      throw std::invalid_argument("fixed filter set on a non-filter branch");
  }
}

BlockConfig BlockConfig::erb(Index in, Index out) {
  return {in,
          out,
          0,
          {{BranchKind::Vanilla3x3},
           {BranchKind::Asym1x3},
           {BranchKind::Asym3x1},
           {BranchKind::Seq_1x1_3x3_1x1}}};
}

std::vector<ParamSlot> branch_layout(const BranchSpec& spec, const BlockConfig& cfg) {
  const Index o = cfg.out_channels;
  const Index i = cfg.in_channels;
  const Index m = cfg.mid();
  const Shape bias{o, 1, 1, 1};
  switch (spec.kind) {
    case BranchKind::Vanilla3x3:
      return {{"weight", {o, i, 3, 3}}, {"bias", bias, true}};
    case BranchKind::Asym1x3:
      return {{"weight", {o, i, 1, 3}}, {"bias", bias, true}};
    case BranchKind::Asym3x1:
      return {{"weight", {o, i, 3, 1}}, {"bias", bias, true}};
    case BranchKind::Point1x1:
      return {{"weight", {o, i, 1, 1}}, {"bias", bias, true}};
    case BranchKind::Seq_1x1_3x3:
      return {{"w1", {m, i, 1, 1}},
              {"b1", {m, 1, 1, 1}, true},
              {"w2", {o, m, 3, 3}},
              {"b2", bias, true}};
    case BranchKind::Seq_1x1_3x3_1x1:
      return {{"w1", {m, i, 1, 1}}, {"b1", {m, 1, 1, 1}, true}, {"w2", {m, m, 3, 3}},
              {"b2", {m, 1, 1, 1}, true}, {"w3", {o, m, 1, 1}}, {"b3", bias, true}};
    case BranchKind::AvgPool3x3:
      if (needs_projection(spec, cfg)) return {{"proj", {o, i, 1, 1}}, {"proj_bias", bias, true}};
      return {};
    case BranchKind::ScaledFixed:
      if (needs_projection(spec, cfg))
        return {{"proj", {o, i, 1, 1}}, {"proj_bias", bias, true}, {"scale", bias}};
      return {{"scale", bias}};
  }
  throw std::logic_error("unhandled branch kind");
}

std::string Table3Flags::label() const {
  std::string out;
  auto add = [&out](const char* part) {
    if (!out.empty()) out += "+";
    out += part;
  };
  if (vanilla) add("3x3");
  if (asymmetric) add("1x3&3x1");
  if (pointwise) add("1x1");
  if (seq_1x1_3x3) add("1x1-3x3");
  switch (scaled) {
    case ScaledFilterChoice::AvgPool: add("AvgPool"); break;
    case ScaledFilterChoice::Sobel: add("Sobel"); break;
    case ScaledFilterChoice::Laplacian: add("Laplacian"); break;
    case ScaledFilterChoice::SobelLaplacian: add("Sobel&Laplacian"); break;
    case ScaledFilterChoice::None: break;
  }
  if (seq_1x1_3x3_1x1) add("1x1-3x3-1x1");
  return out;
}

BlockConfig make_table3_config(const Table3Flags& flags, Index in_channels, Index out_channels) {
  BlockConfig cfg{in_channels, out_channels, 0, {}};
  auto& b = cfg.branches;
  if (flags.vanilla) b.push_back({BranchKind::Vanilla3x3});
  if (flags.asymmetric) {
    b.push_back({BranchKind::Asym1x3});
    b.push_back({BranchKind::Asym3x1});
  }
  if (flags.pointwise) b.push_back({BranchKind::Point1x1});
  if (flags.seq_1x1_3x3) b.push_back({BranchKind::Seq_1x1_3x3});
  const bool sobel = flags.scaled == ScaledFilterChoice::Sobel ||
                     flags.scaled == ScaledFilterChoice::SobelLaplacian;
  const bool laplacian = flags.scaled == ScaledFilterChoice::Laplacian ||
                         flags.scaled == ScaledFilterChoice::SobelLaplacian;
  if (flags.scaled == ScaledFilterChoice::AvgPool) b.push_back({BranchKind::AvgPool3x3});
  if (sobel) {
    b.push_back({BranchKind::ScaledFixed, FixedFilter::SobelX});
    b.push_back({BranchKind::ScaledFixed, FixedFilter::SobelY});
  }
  if (laplacian) b.push_back({BranchKind::ScaledFixed, FixedFilter::Laplacian});
  if (flags.seq_1x1_3x3_1x1) b.push_back({BranchKind::Seq_1x1_3x3_1x1});
  if (b.empty()) throw std::invalid_argument("empty branch selection");
  return cfg;
}

const std::vector<Table3Flags>& table3_rows() {
  using S = ScaledFilterChoice;
  // vanilla, asymmetric, pointwise, 1x1-3x3, scaled filter, 1x1-3x3-1x1
  static const std::vector<Table3Flags> rows = {
      {true, false, false, false, S::None, false},
      {true, true, false, false, S::None, false},
      {true, false, true, false, S::None, false},
      {true, true, true, false, S::None, false},
      {true, false, false, true, S::None, false},
      {true, true, false, true, S::None, false},
      {true, false, true, true, S::None, false},
      {true, true, true, true, S::None, false},
      {true, true, false, true, S::AvgPool, false},
      {true, true, false, true, S::SobelLaplacian, false},
      {true, true, false, true, S::Laplacian, false},
      {true, true, false, true, S::Sobel, false},
      {true, true, false, false, S::Sobel, true},
      {true, true, false, false, S::None, true},
  };
  return rows;
}

std::size_t grouped_branch_count(const BlockConfig& cfg) {
  std::size_t n = 0;
  for (const BranchSpec& b : cfg.branches)
    n += !(b.kind == BranchKind::ScaledFixed && b.filter == FixedFilter::SobelY);
  return n;
}

}  // namespace onrep
