#include "fens/model_spec.hpp"

#include <cmath>
#include <map>

#include "fens/digest.hpp"
#include "fens/errors.hpp"
#include "fens/kernels.hpp"

namespace fens {

// Generated from presets/*.json at configure time.
extern const std::map<std::string, std::string>& embedded_presets();

namespace {

// Rounds to the nearest multiple of `divisor`, never dropping more than 10%.
std::int64_t make_divisible(double v, std::int64_t divisor) {
  auto out = std::max<std::int64_t>(divisor, static_cast<std::int64_t>(v + divisor / 2.0) /
                                                 divisor * divisor);
  if (static_cast<double>(out) < 0.9 * v) out += divisor;
  return out;
}

std::int64_t scale_channels(std::int64_t c, double m, std::int64_t divisor) {
  if (c <= 0) return c;
  const auto units = std::llround(static_cast<double>(c) * m / static_cast<double>(divisor));
  return std::max<std::int64_t>(1, units) * divisor;
}

}  // namespace

Family parse_family(const std::string& name) {
  if (name == "mobile" || name == "mobilenet") return Family::kMobile;
  if (name == "mnas" || name == "mnasnet") return Family::kMnas;
  if (name == "shuffle" || name == "shufflenet") return Family::kShuffle;
  if (name == "squeeze" || name == "squeezenet") return Family::kSqueeze;
  throw ConfigError("unknown model family '" + name + "'");
}

std::string to_string(Family f) {
  switch (f) {
    case Family::kMobile: return "mobile";
    case Family::kMnas: return "mnas";
    case Family::kShuffle: return "shuffle";
    case Family::kSqueeze: return "squeeze";
  }
  return "?";
}

Preset parse_preset(const std::string& name) {
  if (name == "full") return Preset::kFull;
  if (name == "micro") return Preset::kMicro;
  throw ConfigError("unknown preset '" + name + "'");
}

std::string to_string(Preset p) { return p == Preset::kFull ? "full" : "micro"; }

BlockKind parse_block_kind(const std::string& name) {
  if (name == "plain-conv") return BlockKind::kPlainConv;
  if (name == "depthwise-separable") return BlockKind::kDepthwiseSeparable;
  if (name == "inverted-residual") return BlockKind::kInvertedResidual;
  if (name == "shuffle-unit") return BlockKind::kShuffleUnit;
  if (name == "fire") return BlockKind::kFire;
  if (name == "max-pool") return BlockKind::kMaxPool;
  throw ConfigError("unknown block kind '" + name + "'");
}

std::string to_string(BlockKind k) {
  switch (k) {
    case BlockKind::kPlainConv: return "plain-conv";
    case BlockKind::kDepthwiseSeparable: return "depthwise-separable";
    case BlockKind::kInvertedResidual: return "inverted-residual";
    case BlockKind::kShuffleUnit: return "shuffle-unit";
    case BlockKind::kFire: return "fire";
    case BlockKind::kMaxPool: return "max-pool";
  }
  return "?";
}

std::int64_t BlockSpec::hidden_channels() const {
  if (expand_channels > 0) return expand_channels;
  if (expansion_ratio > 0) return std::llround(static_cast<double>(in_channels) * expansion_ratio);
  return in_channels;
}

std::int64_t BlockSpec::se_channels() const {
  return make_divisible(static_cast<double>(hidden_channels() / se_reduction), 8);
}

std::int64_t ModelSpec::feature_channels() const {
  return blocks.empty() ? input.channels : blocks.back().out_channels;
}

void link_channels(ModelSpec& spec) {
  std::int64_t c = spec.input.channels;
  for (auto& b : spec.blocks) {
    b.in_channels = c;
    if (b.kind == BlockKind::kFire) b.out_channels = b.expand1x1 + b.expand3x3;
    if (b.kind == BlockKind::kMaxPool) b.out_channels = c;
    c = b.out_channels;
  }
}

std::vector<InputShape> trace_shapes(const ModelSpec& spec) {
  std::vector<InputShape> shapes{spec.input};
  InputShape s = spec.input;
  auto shrink = [&](std::int64_t k, std::int64_t stride, std::int64_t pad, bool ceil_mode,
                    std::size_t block) {
    try {
      s.height = kernels::window_output(s.height, k, stride, pad, ceil_mode);
      s.width = kernels::window_output(s.width, k, stride, pad, ceil_mode);
    } catch (const GeometryError& e) {
      throw GeometryError("block " + std::to_string(block) + ": input too small for the stride chain (" +
                          e.what() + ")");
    }
  };
  for (std::size_t i = 0; i < spec.blocks.size(); ++i) {
    const auto& b = spec.blocks[i];
    if (b.in_channels != s.channels) {
      throw DimensionError("block " + std::to_string(i) + " expects " +
                           std::to_string(b.in_channels) + " channels, predecessor gives " +
                           std::to_string(s.channels));
    }
    switch (b.kind) {
      case BlockKind::kPlainConv:
      case BlockKind::kDepthwiseSeparable:
      case BlockKind::kInvertedResidual:
        shrink(b.kernel, b.stride, b.effective_padding(), false, i);
        break;
      case BlockKind::kShuffleUnit:
        shrink(b.kernel, b.stride, b.kernel / 2, false, i);
        break;
      case BlockKind::kFire:
        if (b.stride == 2) shrink(3, 2, 0, true, i);
        break;
      case BlockKind::kMaxPool:
        shrink(b.kernel, b.stride, b.effective_padding(), b.ceil_mode, i);
        break;
    }
    s.channels = b.out_channels;
    shapes.push_back(s);
  }
  return shapes;
}

void validate(const ModelSpec& spec) {
  if (spec.width_multiplier <= 0) throw ConfigError("width multiplier must be > 0");
  if (spec.classes < 1) throw ConfigError("class count must be >= 1");
  if (spec.input.channels < 1 || spec.input.height < 1 || spec.input.width < 1) {
    throw ConfigError("input shape must be positive");
  }
  if (spec.blocks.empty()) throw ConfigError("model has no blocks");
  for (std::size_t i = 0; i < spec.blocks.size(); ++i) {
    const auto& b = spec.blocks[i];
    const auto where = "block " + std::to_string(i) + " (" + to_string(b.kind) + ")";
    if (b.stride != 1 && b.stride != 2) throw ConfigError(where + ": stride must be 1 or 2");
    if (b.out_channels < 1) throw ConfigError(where + ": out channels must be positive");
    if (b.kind == BlockKind::kFire) {
      if (b.expand1x1 + b.expand3x3 != b.out_channels || b.squeeze_channels < 1) {
        throw ConfigError(where + ": expand1x1 + expand3x3 must equal out channels");
      }
    }
    if (b.kind == BlockKind::kShuffleUnit) {
      if (b.out_channels % 2 != 0) throw ConfigError(where + ": out channels must be even");
      if (b.stride == 1 && b.in_channels != b.out_channels) {
        throw ConfigError(where + ": stride-1 shuffle unit needs in == out");
      }
      if (b.stride == 1 && b.in_channels % 2 != 0) {
        throw ConfigError(where + ": stride-1 shuffle unit needs an even channel count");
      }
    }
    if (b.kind == BlockKind::kInvertedResidual && b.hidden_channels() < 1) {
      throw ConfigError(where + ": hidden channels must be positive");
    }
  }
  if (spec.boundary < 1 || spec.boundary >= spec.layer_count()) {
    throw ConfigError("feature/classifier boundary " + std::to_string(spec.boundary) +
                      " must split " + std::to_string(spec.layer_count()) +
                      " layers into two non-empty parts");
  }
  trace_shapes(spec);
}

namespace {

BlockSpec block_from_json(const nlohmann::json& j) {
  BlockSpec b;
  b.kind = parse_block_kind(j.at("kind").get<std::string>());
  b.in_channels = j.value("in", std::int64_t{0});
  b.out_channels = j.value("out", std::int64_t{0});
  b.stride = j.value("stride", std::int64_t{1});
  b.kernel = j.value("kernel", std::int64_t{b.kind == BlockKind::kFire ? 1 : 3});
  b.padding = j.value("padding", std::int64_t{-1});
  b.activation = parse_activation(j.value("activation", std::string("relu")));
  b.bias = j.value("bias", false);
  b.batchnorm = j.value("batchnorm", b.kind != BlockKind::kFire);
  b.expand_channels = j.value("expand", std::int64_t{0});
  b.expansion_ratio = j.value("expansion_ratio", 0.0);
  b.squeeze_excite = j.value("squeeze_excite", false);
  b.se_reduction = j.value("se_reduction", std::int64_t{4});
  b.linear_pointwise = j.value("linear_pointwise", false);
  b.squeeze_channels = j.value("squeeze", std::int64_t{0});
  b.expand1x1 = j.value("expand1x1", std::int64_t{0});
  b.expand3x3 = j.value("expand3x3", std::int64_t{0});
  b.ceil_mode = j.value("ceil_mode", b.kind == BlockKind::kFire);
  if (b.kind == BlockKind::kFire) b.out_channels = b.expand1x1 + b.expand3x3;
  return b;
}

nlohmann::json block_to_json(const BlockSpec& b) {
  nlohmann::json j;
  j["kind"] = to_string(b.kind);
  j["in"] = b.in_channels;
  j["out"] = b.out_channels;
  j["stride"] = b.stride;
  j["kernel"] = b.kernel;
  if (b.padding >= 0) j["padding"] = b.padding;
  j["activation"] = to_string(b.activation);
  j["bias"] = b.bias;
  j["batchnorm"] = b.batchnorm;
  switch (b.kind) {
    case BlockKind::kInvertedResidual:
      if (b.expand_channels > 0) j["expand"] = b.expand_channels;
      if (b.expansion_ratio > 0) j["expansion_ratio"] = b.expansion_ratio;
      j["squeeze_excite"] = b.squeeze_excite;
      j["se_reduction"] = b.se_reduction;
      break;
    case BlockKind::kDepthwiseSeparable:
      j["linear_pointwise"] = b.linear_pointwise;
      break;
    case BlockKind::kFire:
      j["squeeze"] = b.squeeze_channels;
      j["expand1x1"] = b.expand1x1;
      j["expand3x3"] = b.expand3x3;
      j["ceil_mode"] = b.ceil_mode;
      break;
    case BlockKind::kMaxPool:
      j["ceil_mode"] = b.ceil_mode;
      break;
    default:
      break;
  }
  return j;
}

}  // namespace

ModelSpec spec_from_json(const nlohmann::json& j) {
  ModelSpec s;
  try {
    s.family = parse_family(j.at("family").get<std::string>());
    s.preset = parse_preset(j.value("preset", std::string("micro")));
    s.width_multiplier = j.value("width_multiplier", 1.0);
    const auto& in = j.at("input");
    s.input = {in.at(0).get<std::int64_t>(), in.at(1).get<std::int64_t>(),
               in.at(2).get<std::int64_t>()};
    s.classes = j.at("classes").get<std::int64_t>();
    for (const auto& b : j.at("blocks")) s.blocks.push_back(block_from_json(b));
    if (j.contains("head")) {
      const auto& h = j["head"];
      s.head.hidden = h.value("hidden", std::int64_t{0});
      s.head.hidden_activation = parse_activation(h.value("hidden_activation", std::string("hard-swish")));
      s.head.conv_classifier = h.value("classifier", std::string("linear")) == "conv";
    }
    const auto blocks = static_cast<std::int64_t>(s.blocks.size());
    const auto boundary = j.value("boundary", blocks);
    s.boundary = boundary < 0 ? s.layer_count() + boundary : boundary;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed model spec: ") + e.what());
  }
  link_channels(s);
  return s;
}

nlohmann::json spec_to_json(const ModelSpec& s) {
  nlohmann::json j;
  j["family"] = to_string(s.family);
  j["preset"] = to_string(s.preset);
  j["width_multiplier"] = s.width_multiplier;
  j["input"] = {s.input.channels, s.input.height, s.input.width};
  j["classes"] = s.classes;
  j["blocks"] = nlohmann::json::array();
  for (const auto& b : s.blocks) j["blocks"].push_back(block_to_json(b));
  j["head"] = {{"hidden", s.head.hidden},
               {"hidden_activation", to_string(s.head.hidden_activation)},
               {"classifier", s.head.conv_classifier ? "conv" : "linear"}};
  j["boundary"] = s.boundary;
  return j;
}

ModelSpec apply_width(ModelSpec spec, double m) {
  if (m <= 0) throw ConfigError("width multiplier must be > 0");
  spec.width_multiplier *= m;
  if (m == 1.0) return spec;
  for (auto& b : spec.blocks) {
    const std::int64_t divisor = b.kind == BlockKind::kShuffleUnit ? 2 : 1;
    if (b.kind != BlockKind::kMaxPool) b.out_channels = scale_channels(b.out_channels, m, divisor);
    b.expand_channels = scale_channels(b.expand_channels, m, 1);
    b.squeeze_channels = scale_channels(b.squeeze_channels, m, 1);
    b.expand1x1 = scale_channels(b.expand1x1, m, 1);
    b.expand3x3 = scale_channels(b.expand3x3, m, 1);
  }
  spec.head.hidden = scale_channels(spec.head.hidden, m, 1);
  link_channels(spec);
  return spec;
}

std::vector<std::string> preset_names() {
  std::vector<std::string> names;
  for (const auto& [k, v] : embedded_presets()) names.push_back(k);
  return names;
}

ModelSpec preset_spec(Family family, Preset preset) {
  const auto key = to_string(preset) + "_" + to_string(family);
  const auto& table = embedded_presets();
  auto it = table.find(key);
  if (it == table.end()) throw ConfigError("no shipped preset '" + key + "'");
  return spec_from_json(nlohmann::json::parse(it->second));
}

ModelSpec make_spec(Family family, Preset preset, double width_multiplier, InputShape input,
                    std::int64_t classes) {
  auto spec = preset_spec(family, preset);
  spec.input = input;
  spec.classes = classes;
  link_channels(spec);
  spec = apply_width(std::move(spec), width_multiplier);
  validate(spec);
  return spec;
}

std::string spec_digest(const ModelSpec& spec) {
  return sha256_hex(spec_to_json(spec).dump()).substr(0, 16);
}

}  // namespace fens
