#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "neft/tensor.hpp"

namespace neft {

enum class Variant { Neft, Compact, Hybrid, Edge };

std::string variant_name(Variant v);
/// Accepts "NEFT", "NEFT-Compact", "compact", ... (case-insensitive).
Variant parse_variant(const std::string& name);
bool has_hybrid_encoder(Variant v);

/// Architecture description. Widths of the second stage are always 2 * c1.
struct NeftConfig {
  Variant variant = Variant::Neft;
  Index gamma = 16;  // reduction factor L / K
  Index c1 = 40;
  std::vector<Index> heads_per_stage = {4, 4};
  double mlp_ratio = 2.0;
  Index in_channels = 2;
  Index height = 32;
  Index width = 32;
  Index c0 = 0;                 // hybrid CNN encoder width; 0 for pure transformer variants
  Index blocks_per_stage = 1;
  std::uint64_t seed = 0;

  static NeftConfig preset(Variant variant, Index gamma = 16);
  /// C1 = 8, two heads, 2 x 16 x 16 input: small enough for full finite differences.
  static NeftConfig tiny(Index gamma = 32);

  Index input_size() const { return in_channels * height * width; }
  Index codeword_length() const;
  Index stage_width(int stage) const { return stage == 0 ? c1 : 2 * c1; }
  Index grid_h(int stage) const { return stage == 0 ? height / 4 : height / 8; }
  Index grid_w(int stage) const { return stage == 0 ? width / 4 : width / 8; }
  Index tokens(int stage) const { return grid_h(stage) * grid_w(stage); }
  Index mlp_hidden(Index width) const;

  /// Throws ConfigError on any inconsistency.
  void validate() const;

  nlohmann::json to_json() const;
  /// Missing keys keep their defaults; unknown keys are rejected.
  static NeftConfig from_json(const nlohmann::json& j, NeftConfig base);
  static NeftConfig from_json(const nlohmann::json& j);
};

bool operator==(const NeftConfig& a, const NeftConfig& b);

}  // namespace neft
