#include "neft/complexity.hpp"

#include <iomanip>
#include <sstream>

#include "neft/errors.hpp"

namespace neft {

namespace {

void require_positive(std::initializer_list<Index> dims, const char* what) {
  for (Index d : dims) {
    if (d < 1) throw DomainError(std::string(what) + ": dimensions must be positive");
  }
}

}  // namespace

Index msa_flops(Index h, Index w, Index c) {
  require_positive({h, w, c}, "msa_flops");
  const Index hw = h * w;
  return 4 * hw * c * c + 2 * hw * hw * c;
}

Index wmsa_flops(Index h, Index w, Index c, Index m) {
  require_positive({h, w, c, m}, "wmsa_flops");
  if (h % m != 0 || w % m != 0) {
    throw ConfigError("window size " + std::to_string(m) + " does not tile a " + std::to_string(h) +
                      " x " + std::to_string(w) + " grid");
  }
  const Index hw = h * w;
  return 4 * hw * c * c + 2 * m * m * hw * c;
}

Index conv_flops(Index h_out, Index w_out, Index c_out, Index k_h, Index k_w, Index c_in) {
  require_positive({h_out, w_out, c_out, k_h, k_w, c_in}, "conv_flops");
  return h_out * w_out * c_out * k_h * k_w * c_in;
}

Index conv_transpose_flops(Index h_in, Index w_in, Index c_out, Index k, Index c_in) {
  require_positive({h_in, w_in, c_out, k, c_in}, "conv_transpose_flops");
  return h_in * w_in * c_out * k * k * c_in;
}

Index dense_flops(Index rows, Index in, Index out) {
  require_positive({rows, in, out}, "dense_flops");
  return 2 * rows * in * out;
}

Index layer_flops(const LayerInfo& l) {
  if (l.kind == "conv2d") return conv_flops(l.h, l.w, l.c_out, l.kernel, l.kernel, l.c_in);
  if (l.kind == "conv_transpose2d") return conv_transpose_flops(l.h, l.w, l.c_out, l.kernel, l.c_in);
  if (l.kind == "dense") return dense_flops(l.rows, l.c_in, l.c_out);
  if (l.kind == "msa") return msa_flops(l.h, l.w, l.c_in);
  if (l.kind == "layer_norm" || l.kind == "batch_norm" || l.kind == "gelu" || l.kind == "relu") return 0;
  throw AccountingError("no FLOPs rule for layer '" + l.name + "' of kind '" + l.kind + "'");
}

Index encoder_msa_reference(const NeftConfig& c) {
  if (has_hybrid_encoder(c.variant)) return 0;
  return c.blocks_per_stage * (msa_flops(c.grid_h(0), c.grid_w(0), c.c1) +
                               msa_flops(c.grid_h(1), c.grid_w(1), c.c1));
}

Index swin_encoder_reference() { return 2 * wmsa_flops(16, 16, 40, 4) + 4 * wmsa_flops(8, 8, 40, 4); }

ComplexityReport complexity_report(const NeftConfig& config, const std::vector<LayerInfo>& topology) {
  ComplexityReport r;
  r.config = config;
  for (const auto& l : topology) {
    ComplexityRow row{l.name, l.kind, l.encoder, layer_flops(l), l.params};
    r.total_flops += row.flops;
    r.total_params += row.params;
    if (l.encoder) {
      r.encoder_flops += row.flops;
      r.encoder_params += row.params;
      if (l.kind == "msa") r.encoder_msa_flops += row.flops;
    }
    r.rows.push_back(std::move(row));
  }
  r.encoder_msa_reference = encoder_msa_reference(config);
  r.swin_reference = swin_encoder_reference();
  return r;
}

std::string with_separators(Index n) {
  std::string digits = std::to_string(n < 0 ? -n : n);
  std::string out;
  for (std::size_t i = 0; i < digits.size(); ++i) {
    if (i > 0 && (digits.size() - i) % 3 == 0) out += ',';
    out += digits[i];
  }
  return n < 0 ? "-" + out : out;
}

nlohmann::json ComplexityReport::to_json() const {
  nlohmann::json rows_json = nlohmann::json::array();
  for (const auto& row : rows) {
    rows_json.push_back({{"name", row.name},
                         {"kind", row.kind},
                         {"encoder", row.encoder},
                         {"flops", row.flops},
                         {"params", row.params}});
  }
  return {{"variant", variant_name(config.variant)},
          {"config", config.to_json()},
          {"conventions",
           "dense layers count 2*in*out per application; attention, convolution and transposed "
           "convolution use closed-form multiply counts; elementwise ops count 0"},
          {"rows", rows_json},
          {"total_flops", total_flops},
          {"encoder_flops", encoder_flops},
          {"total_params", total_params},
          {"encoder_params", encoder_params},
          {"encoder_msa_flops", encoder_msa_flops},
          {"encoder_msa_reference_c1", encoder_msa_reference},
          {"wmsa_reference_computed", swin_reference},
          {"wmsa_reference_published", kSwinPublishedFigure}};
}

std::string ComplexityReport::to_text() const {
  std::size_t name_width = 5;
  for (const auto& row : rows) name_width = std::max(name_width, row.name.size());
  std::ostringstream os;
  os << "model " << variant_name(config.variant) << ", gamma " << config.gamma << ", K "
     << config.codeword_length() << "\n";
  os << "convention: dense = 2*in*out per application; msa/conv closed forms; elementwise = 0\n\n";
  os << std::left << std::setw(static_cast<int>(name_width)) << "layer" << "  " << std::setw(16) << "kind"
     << std::right << std::setw(14) << "FLOPs" << std::setw(12) << "params" << "\n";
  for (const auto& row : rows) {
    os << std::left << std::setw(static_cast<int>(name_width)) << row.name << "  " << std::setw(16)
       << row.kind << std::right << std::setw(14) << with_separators(row.flops) << std::setw(12)
       << with_separators(row.params) << "\n";
  }
  auto line = [&](const std::string& label, Index v) {
    os << std::left << std::setw(44) << label << std::right << std::setw(14) << with_separators(v) << "\n";
  };
  os << "\n";
  line("total FLOPs", total_flops);
  line("encoder FLOPs", encoder_flops);
  line("total parameters", total_params);
  line("encoder parameters", encoder_params);
  if (!has_hybrid_encoder(config.variant)) {
    line("encoder MSA FLOPs (actual stage widths)", encoder_msa_flops);
    line("encoder MSA reference (C = C1 per stage)", encoder_msa_reference);
  }
  line("W-MSA comparison, computed", swin_reference);
  line("W-MSA comparison, published", kSwinPublishedFigure);
  if (swin_reference != kSwinPublishedFigure) {
    os << "note: the published W-MSA figure does not follow from the windowed formula for "
          "2 blocks at 16x16 and 4 blocks at 8x8 (C = 40, M = 4)\n";
  }
  return os.str();
}

}  // namespace neft
