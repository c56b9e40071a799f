#pragma once

#include <Eigen/Core>

#include <complex>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "neft/tensor.hpp"

namespace neft {

/// Uniform linear arrays at the base station (n1 antennas) and the user (n2).
struct ArrayGeometry {
  Index n1 = 1024;
  Index n2 = 1;
  double spacing = 0.005;     // meters
  double wavelength = 0.01;   // meters

  /// 30 GHz carrier with half-wavelength spacing.
  static ArrayGeometry half_wavelength(Index n1, Index n2 = 1, double carrier_hz = 30e9);

  /// Largest base-station array dimension, (n1 - 1) * spacing.
  double aperture() const { return double(n1 - 1) * spacing; }
  void validate() const;
};

double wavelength_from_frequency(double carrier_hz);

struct UePlacement {
  double r = 1.0;      // first-UE-antenna to first-BS-antenna distance (m)
  double theta = 0.0;  // angle of departure (rad)
  double phi = 0.0;    // UE array orientation relative to the BS array (rad)
};

using ComplexMatrix = Eigen::Matrix<std::complex<double>, Eigen::Dynamic, Eigen::Dynamic>;

/// Rows index UE antennas (n2), columns index BS antennas (n1).
struct ChannelSample {
  ComplexMatrix h;
  UePlacement placement;
};

/// Boundary between the near and far field: 2 D^2 / lambda.
double rayleigh_distance(double aperture, double wavelength);

/// Propagation distance between BS antenna n1 and UE antenna n2.
double element_distance(const ArrayGeometry& geometry, const UePlacement& placement, Index n1,
                        Index n2);

/// Spherical-wavefront LoS channel, h[n2, n1] = exp(-j 2 pi r / lambda) / r.
ChannelSample channel_matrix(const ArrayGeometry& geometry, const UePlacement& placement);

/// Dataset-wide min/max of the real and imaginary parts.
struct NormalizationParams {
  double min_real = 0.0;
  double max_real = 1.0;
  double min_imag = 0.0;
  double max_imag = 1.0;

  double normalize_real(double v) const { return (v - min_real) / (max_real - min_real); }
  double normalize_imag(double v) const { return (v - min_imag) / (max_imag - min_imag); }
  double denormalize_real(double v) const { return min_real + v * (max_real - min_real); }
  double denormalize_imag(double v) const { return min_imag + v * (max_imag - min_imag); }
  void validate() const;

  /// Running extremes over `h`; degenerate (constant) parts are widened by 1.
  void include(const ComplexMatrix& h);
  void finalize();
  static NormalizationParams empty();
};

/// Picks H x W with H * W = n and H the largest divisor not above sqrt(n).
std::pair<Index, Index> default_layout(Index n);

/// Two-channel [2, H, W] tensor: normalized real then imaginary part of the
/// n2 x n1 matrix, flattened row-major into H x W. Values are clamped to [0, 1].
TensorD to_network_input(const ChannelSample& sample, const NormalizationParams& norm,
                         Index height, Index width);
TensorD to_network_input(const ComplexMatrix& h, const NormalizationParams& norm, Index height,
                         Index width);

/// Inverse of to_network_input for an n2 x n1 channel.
ComplexMatrix from_network_output(const TensorD& tensor, const NormalizationParams& norm, Index n2,
                                  Index n1);

/// Deterministic placement for sample `index` of a dataset with `seed`.
/// r is uniform on [r_lo, r_hi] (meters); theta and phi are uniform on [0, 2 pi).
UePlacement sample_placement(std::uint64_t seed, std::uint64_t index, double r_lo, double r_hi);

/// Normalized network inputs plus the provenance needed to regenerate them.
struct ChannelDataset {
  ArrayGeometry geometry;
  double r_lo_fraction = 0.05;  // bounds as fractions of the Rayleigh distance
  double r_hi_fraction = 0.5;
  std::uint64_t seed = 0;
  Index count = 0;
  Index height = 0;
  Index width = 0;
  NormalizationParams norm;
  std::vector<double> inputs;  // count x 2 x height x width, row-major
  std::vector<UePlacement> placements;  // empty for datasets read from disk

  Index sample_size() const { return 2 * height * width; }
  Shape sample_shape() const { return {2, height, width}; }

  std::span<const double> sample(Index i) const {
    return {inputs.data() + i * sample_size(), static_cast<std::size_t>(sample_size())};
  }

  /// Stacks the given samples into a [B, 2, H, W] tensor.
  template <typename Scalar>
  Tensor<Scalar> batch(std::span<const Index> indices) const {
    Tensor<Scalar> t(Shape{static_cast<Index>(indices.size()), 2, height, width});
    Scalar* dst = t.values().data();
    for (Index i : indices) {
      if (i < 0 || i >= count) throw BoundsError("dataset index " + std::to_string(i) + " out of range");
      for (double v : sample(i)) *dst++ = static_cast<Scalar>(v);
    }
    return t;
  }

  template <typename Scalar>
  Tensor<Scalar> range(Index begin, Index end) const {
    std::vector<Index> idx;
    for (Index i = begin; i < end; ++i) idx.push_back(i);
    return batch<Scalar>(idx);
  }

  /// The first n samples as a new dataset sharing provenance and normalization.
  ChannelDataset head(Index n) const;
};

/// Draws `count` placements uniformly over [r_lo, r_hi] * d_R and theta in
/// [0, 2 pi), builds their channels, and normalizes over the whole set.
ChannelDataset sample_dataset(const ArrayGeometry& geometry, double r_lo_fraction,
                              double r_hi_fraction, Index count, std::uint64_t seed);

/// Same as sample_dataset but normalizes with externally supplied parameters
/// (e.g. the training split's).
ChannelDataset sample_dataset(const ArrayGeometry& geometry, double r_lo_fraction,
                              double r_hi_fraction, Index count, std::uint64_t seed,
                              const NormalizationParams& norm);

enum class ElementType { Float32, Float64 };

/// File layout: 8-byte little-endian header length, UTF-8 JSON header, then
/// count x 2 x H x W little-endian values of the header's element type.
/// `metadata` is stored verbatim in the header.
void write_dataset(const std::filesystem::path& path, const ChannelDataset& dataset,
                   ElementType element_type = ElementType::Float32,
                   const nlohmann::json& metadata = nlohmann::json::object());
/// Header of a dataset file, without reading the payload.
nlohmann::json read_dataset_header(const std::filesystem::path& path);
ChannelDataset read_dataset(const std::filesystem::path& path);

}  // namespace neft
