#include "neft/config.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "neft/errors.hpp"

namespace neft {

namespace {

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

}  // namespace

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::Neft: return "NEFT";
    case Variant::Compact: return "NEFT-Compact";
    case Variant::Hybrid: return "NEFT-Hybrid";
    case Variant::Edge: return "NEFT-Edge";
  }
  return "?";
}

Variant parse_variant(const std::string& name) {
  std::string s = lower(name);
  if (s.rfind("neft-", 0) == 0) s = s.substr(5);
  if (s == "neft") return Variant::Neft;
  if (s == "compact") return Variant::Compact;
  if (s == "hybrid") return Variant::Hybrid;
  if (s == "edge") return Variant::Edge;
  throw ConfigError("unknown variant '" + name + "' (expected NEFT, Compact, Hybrid or Edge)");
}

bool has_hybrid_encoder(Variant v) { return v == Variant::Hybrid || v == Variant::Edge; }

NeftConfig NeftConfig::preset(Variant variant, Index gamma) {
  NeftConfig c;
  c.variant = variant;
  c.gamma = gamma;
  switch (variant) {
    case Variant::Neft:
      break;
    case Variant::Compact:
      c.c1 = 32;
      break;
    case Variant::Hybrid:
      c.c0 = 64;
      break;
    case Variant::Edge:
      c.c0 = 44;
      c.c1 = 32;
      break;
  }
  return c;
}

NeftConfig NeftConfig::tiny(Index gamma) {
  NeftConfig c;
  c.gamma = gamma;
  c.c1 = 8;
  c.heads_per_stage = {2, 2};
  c.mlp_ratio = 1.0;
  c.height = 16;
  c.width = 16;
  return c;
}

Index NeftConfig::codeword_length() const {
  if (gamma < 1 || input_size() % gamma != 0) {
    throw ConfigError("gamma " + std::to_string(gamma) + " does not divide the input size " +
                      std::to_string(input_size()));
  }
  return input_size() / gamma;
}

Index NeftConfig::mlp_hidden(Index w) const {
  return std::max<Index>(1, static_cast<Index>(std::llround(mlp_ratio * double(w))));
}

void NeftConfig::validate() const {
  if (in_channels < 1) throw ConfigError("in_channels must be positive");
  if (height < 8 || width < 8 || height % 8 != 0 || width % 8 != 0) {
    throw ConfigError("input spatial dims must be multiples of 8, got " + std::to_string(height) +
                      " x " + std::to_string(width));
  }
  codeword_length();
  if (c1 < 1) throw ConfigError("c1 must be positive");
  if (!(mlp_ratio > 0.0) || !std::isfinite(mlp_ratio)) throw ConfigError("mlp_ratio must be positive");
  if (blocks_per_stage < 1) throw ConfigError("blocks_per_stage must be >= 1");
  if (heads_per_stage.size() != 2) throw ConfigError("heads_per_stage needs one entry per stage (2)");
  for (int s = 0; s < 2; ++s) {
    const Index h = heads_per_stage[static_cast<std::size_t>(s)];
    if (h < 1 || stage_width(s) % h != 0) {
      throw ConfigError("stage " + std::to_string(s + 1) + " width " +
                        std::to_string(stage_width(s)) + " is not divisible by " +
                        std::to_string(h) + " heads");
    }
  }
  if (has_hybrid_encoder(variant)) {
    if (c0 < 4 || c0 % 4 != 0) {
      throw ConfigError("hybrid encoder width c0 must be a positive multiple of 4, got " +
                        std::to_string(c0));
    }
  } else if (c0 != 0) {
    throw ConfigError("c0 only applies to hybrid variants");
  }
}

nlohmann::json NeftConfig::to_json() const {
  return {{"variant", variant_name(variant)},
          {"gamma", gamma},
          {"c1", c1},
          {"heads_per_stage", heads_per_stage},
          {"mlp_ratio", mlp_ratio},
          {"input_shape", {in_channels, height, width}},
          {"c0", c0},
          {"blocks_per_stage", blocks_per_stage},
          {"seed", seed}};
}

NeftConfig NeftConfig::from_json(const nlohmann::json& j, NeftConfig base) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  NeftConfig c = base;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "variant") c.variant = parse_variant(value.get<std::string>());
      else if (key == "gamma") c.gamma = value.get<Index>();
      else if (key == "c1") c.c1 = value.get<Index>();
      else if (key == "heads_per_stage") c.heads_per_stage = value.get<std::vector<Index>>();
      else if (key == "mlp_ratio") c.mlp_ratio = value.get<double>();
      else if (key == "input_shape") {
        const auto s = value.get<std::vector<Index>>();
        if (s.size() != 3) throw ConfigError("input_shape needs three entries");
        c.in_channels = s[0];
        c.height = s[1];
        c.width = s[2];
      } else if (key == "c0") c.c0 = value.get<Index>();
      else if (key == "blocks_per_stage") c.blocks_per_stage = value.get<Index>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else throw ConfigError("unknown model config key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad model config: ") + e.what());
  }
  return c;
}

NeftConfig NeftConfig::from_json(const nlohmann::json& j) { return from_json(j, NeftConfig{}); }

bool operator==(const NeftConfig& a, const NeftConfig& b) { return a.to_json() == b.to_json(); }

}  // namespace neft
