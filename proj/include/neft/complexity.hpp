#pragma once

#include <string>
#include <vector>

#include "json.hpp"
#include "neft/config.hpp"
#include "neft/model.hpp"

namespace neft {

// Closed-form operation counts. All arithmetic is exact integer arithmetic.

/// Global MSA over an h x w token grid of width C: 4hwC^2 + 2(hw)^2 C.
Index msa_flops(Index h, Index w, Index c);
/// Windowed MSA with M x M windows: 4hwC^2 + 2M^2 hwC.
Index wmsa_flops(Index h, Index w, Index c, Index m);
Index conv_flops(Index h_out, Index w_out, Index c_out, Index k_h, Index k_w, Index c_in);
/// Each input pixel scatters a k x k x c_out patch: h_in w_in c_out k^2 c_in.
Index conv_transpose_flops(Index h_in, Index w_in, Index c_out, Index k, Index c_in);
/// 2 * in * out per application (multiply and add).
Index dense_flops(Index rows, Index in, Index out);

/// FLOPs of one topology row. Elementwise kinds count zero; unknown kinds
/// raise AccountingError.
Index layer_flops(const LayerInfo& layer);

struct ComplexityRow {
  std::string name;
  std::string kind;
  bool encoder = false;
  Index flops = 0;
  Index params = 0;
};

struct ComplexityReport {
  NeftConfig config;
  std::vector<ComplexityRow> rows;
  Index total_flops = 0;
  Index encoder_flops = 0;
  Index total_params = 0;
  Index encoder_params = 0;
  Index encoder_msa_flops = 0;        // attention rows of the encoder at their actual widths
  Index encoder_msa_reference = 0;    // same grids at a uniform width C1
  Index swin_reference = 0;           // W-MSA comparison configuration, computed
  static constexpr Index kSwinPublishedFigure = 5013504;

  nlohmann::json to_json() const;
  /// Aligned table followed by the subtotals.
  std::string to_text() const;
};

ComplexityReport complexity_report(const NeftConfig& config, const std::vector<LayerInfo>& topology);

template <typename Scalar>
ComplexityReport model_flops(const Model<Scalar>& model) {
  return complexity_report(model.config(), model.topology());
}

template <typename Scalar>
Index param_count(const Model<Scalar>& model) {
  return model.parameter_count();
}

/// Sum of msa_flops over the encoder grids with width C1 in every stage.
Index encoder_msa_reference(const NeftConfig& config);
/// 2 blocks at 16 x 16 plus 4 blocks at 8 x 8, C = 40, M = 4.
Index swin_encoder_reference();

/// 860160 -> "860,160".
std::string with_separators(Index n);

}  // namespace neft
