#pragma once

#include <filesystem>

#include "json.hpp"
#include "neft/model.hpp"

namespace neft {

/// Framed file: JSON header (config, scalar type, tensor manifest with
/// names, shapes and element offsets, caller metadata) followed by every
/// tensor in manifest order as little-endian values of the scalar type.
template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, const Model<Scalar>& model,
                     const nlohmann::json& metadata = nlohmann::json::object());

struct CheckpointHeader {
  NeftConfig config;
  std::string scalar;  // "float32" or "float64"
  nlohmann::json metadata;
  nlohmann::json raw;
};

CheckpointHeader read_checkpoint_header(const std::filesystem::path& path);

/// Rebuilds the model from the stored config and checks every manifest entry
/// against it before reading the payload. Values are converted to Scalar.
template <typename Scalar>
Model<Scalar> load_checkpoint(const std::filesystem::path& path);

}  // namespace neft
