#include "neft/channel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "neft/io.hpp"

namespace neft {

namespace {

// Nominal propagation speed; 30 GHz maps to a 0.01 m wavelength.
constexpr double kSpeedOfLight = 3e8;
constexpr int kDatasetVersion = 1;

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double unit_uniform(std::uint64_t& state) {
  return double(splitmix64(state) >> 11) * 0x1.0p-53;  // [0, 1)
}

std::string element_type_name(ElementType t) {
  return t == ElementType::Float32 ? "float32" : "float64";
}

}  // namespace

ArrayGeometry ArrayGeometry::half_wavelength(Index n1, Index n2, double carrier_hz) {
  ArrayGeometry g;
  g.n1 = n1;
  g.n2 = n2;
  g.wavelength = wavelength_from_frequency(carrier_hz);
  g.spacing = g.wavelength / 2.0;
  return g;
}

void ArrayGeometry::validate() const {
  if (n1 < 1 || n2 < 1) throw DomainError("array geometry needs n1 >= 1 and n2 >= 1");
  if (!(spacing > 0.0) || !(wavelength > 0.0)) {
    throw DomainError("array geometry needs positive spacing and wavelength");
  }
}

double wavelength_from_frequency(double carrier_hz) {
  if (!(carrier_hz > 0.0)) throw DomainError("carrier frequency must be positive");
  return kSpeedOfLight / carrier_hz;
}

double rayleigh_distance(double aperture, double wavelength) {
  if (!(aperture > 0.0) || !(wavelength > 0.0)) {
    throw DomainError("rayleigh_distance: aperture and wavelength must be positive");
  }
  return 2.0 * aperture * aperture / wavelength;
}

double element_distance(const ArrayGeometry& geometry, const UePlacement& placement, Index n1,
                        Index n2) {
  if (n1 < 0 || n1 >= geometry.n1 || n2 < 0 || n2 >= geometry.n2) {
    throw BoundsError("element_distance: antenna pair (" + std::to_string(n1) + ", " +
                      std::to_string(n2) + ") outside " + std::to_string(geometry.n1) + " x " +
                      std::to_string(geometry.n2));
  }
  if (n1 == 0 && n2 == 0) return placement.r;  // both offsets vanish
  const double d1 = double(n1) * geometry.spacing;
  const double d2 = double(n2) * geometry.spacing;
  const double x = placement.r * std::cos(placement.theta) - d2 * std::sin(placement.phi);
  const double y = placement.r * std::sin(placement.theta) + d2 * std::cos(placement.phi) - d1;
  return std::sqrt(x * x + y * y);
}

ChannelSample channel_matrix(const ArrayGeometry& geometry, const UePlacement& placement) {
  geometry.validate();
  if (!(placement.r > 0.0)) throw DomainError("channel_matrix: r must be positive");
  ChannelSample s;
  s.placement = placement;
  s.h.resize(geometry.n2, geometry.n1);
  const double k = 2.0 * std::numbers::pi / geometry.wavelength;
  for (Index a = 0; a < geometry.n2; ++a) {
    for (Index b = 0; b < geometry.n1; ++b) {
      const double dist = element_distance(geometry, placement, b, a);
      if (dist <= 1e-9 * geometry.wavelength) {
        throw SingularityError("channel_matrix: BS antenna " + std::to_string(b) +
                               " and UE antenna " + std::to_string(a) + " are co-located");
      }
      s.h(a, b) = std::polar(1.0 / dist, -k * dist);
    }
  }
  return s;
}

void NormalizationParams::validate() const {
  if (!(max_real > min_real) || !(max_imag > min_imag)) {
    throw DomainError("normalization parameters need max > min for both parts");
  }
}

NormalizationParams NormalizationParams::empty() {
  constexpr double inf = std::numeric_limits<double>::infinity();
  return {inf, -inf, inf, -inf};
}

void NormalizationParams::include(const ComplexMatrix& h) {
  for (Index i = 0; i < h.size(); ++i) {
    const auto v = h.data()[i];
    min_real = std::min(min_real, v.real());
    max_real = std::max(max_real, v.real());
    min_imag = std::min(min_imag, v.imag());
    max_imag = std::max(max_imag, v.imag());
  }
}

void NormalizationParams::finalize() {
  if (!(max_real > min_real)) max_real = min_real + 1.0;
  if (!(max_imag > min_imag)) max_imag = min_imag + 1.0;
}

std::pair<Index, Index> default_layout(Index n) {
  if (n < 1) throw DomainError("default_layout: n must be positive");
  Index h = static_cast<Index>(std::sqrt(double(n)));
  while (h > 1 && n % h != 0) --h;
  return {h, n / h};
}

TensorD to_network_input(const ComplexMatrix& h, const NormalizationParams& norm, Index height,
                         Index width) {
  if (height * width != h.size()) {
    throw DimensionError("to_network_input: layout " + std::to_string(height) + " x " +
                         std::to_string(width) + " does not hold a " + std::to_string(h.rows()) +
                         " x " + std::to_string(h.cols()) + " channel");
  }
  TensorD t(Shape{2, height, width});
  const Index plane = height * width;
  Index k = 0;
  for (Index r = 0; r < h.rows(); ++r) {
    for (Index c = 0; c < h.cols(); ++c, ++k) {
      t.values()[k] = std::clamp(norm.normalize_real(h(r, c).real()), 0.0, 1.0);
      t.values()[plane + k] = std::clamp(norm.normalize_imag(h(r, c).imag()), 0.0, 1.0);
    }
  }
  return t;
}

TensorD to_network_input(const ChannelSample& sample, const NormalizationParams& norm,
                         Index height, Index width) {
  return to_network_input(sample.h, norm, height, width);
}

ComplexMatrix from_network_output(const TensorD& tensor, const NormalizationParams& norm, Index n2,
                                  Index n1) {
  if (tensor.size() != 2 * n1 * n2 || tensor.dim(0) != 2) {
    throw DimensionError("from_network_output: tensor " + shape_string(tensor.shape()) +
                         " does not hold a " + std::to_string(n2) + " x " + std::to_string(n1) +
                         " channel");
  }
  ComplexMatrix h(n2, n1);
  const Index plane = n1 * n2;
  Index k = 0;
  for (Index r = 0; r < n2; ++r) {
    for (Index c = 0; c < n1; ++c, ++k) {
      h(r, c) = {norm.denormalize_real(tensor.values()[k]),
                 norm.denormalize_imag(tensor.values()[plane + k])};
    }
  }
  return h;
}

UePlacement sample_placement(std::uint64_t seed, std::uint64_t index, double r_lo, double r_hi) {
  std::uint64_t state = seed;
  state = splitmix64(state) ^ (index * 0xD1B54A32D192ED03ULL);
  UePlacement p;
  p.r = r_lo + (r_hi - r_lo) * unit_uniform(state);
  p.theta = 2.0 * std::numbers::pi * unit_uniform(state);
  p.phi = 2.0 * std::numbers::pi * unit_uniform(state);
  return p;
}

ChannelDataset ChannelDataset::head(Index n) const {
  if (n < 0 || n > count) throw BoundsError("head: requested more samples than available");
  ChannelDataset d = *this;
  d.count = n;
  d.inputs.resize(static_cast<std::size_t>(n * sample_size()));
  if (!d.placements.empty()) d.placements.resize(static_cast<std::size_t>(n));
  return d;
}

namespace {

void check_bounds(double lo, double hi, Index count) {
  if (!(lo > 0.0) || !(hi > lo)) throw DomainError("sample_dataset: need 0 < r_lo < r_hi");
  if (count < 1) throw DomainError("sample_dataset: count must be >= 1");
}

ChannelDataset build_dataset(const ArrayGeometry& geometry, double lo, double hi, Index count,
                             std::uint64_t seed, const NormalizationParams* fixed_norm) {
  geometry.validate();
  check_bounds(lo, hi, count);
  const double d_r = rayleigh_distance(geometry.aperture(), geometry.wavelength);
  const auto [height, width] = default_layout(geometry.n1 * geometry.n2);

  ChannelDataset ds;
  ds.geometry = geometry;
  ds.r_lo_fraction = lo;
  ds.r_hi_fraction = hi;
  ds.seed = seed;
  ds.count = count;
  ds.height = height;
  ds.width = width;

  // Channels are regenerated in the second pass instead of being held in memory.
  auto channel = [&](Index i) {
    return channel_matrix(geometry, sample_placement(seed, static_cast<std::uint64_t>(i), lo * d_r, hi * d_r));
  };
  if (fixed_norm) {
    ds.norm = *fixed_norm;
  } else {
    ds.norm = NormalizationParams::empty();
    for (Index i = 0; i < count; ++i) ds.norm.include(channel(i).h);
    ds.norm.finalize();
  }
  ds.norm.validate();
  ds.inputs.resize(static_cast<std::size_t>(count * ds.sample_size()));
  ds.placements.reserve(static_cast<std::size_t>(count));
  for (Index i = 0; i < count; ++i) {
    const ChannelSample sample = channel(i);
    ds.placements.push_back(sample.placement);
    TensorD x = to_network_input(sample, ds.norm, height, width);
    std::copy(x.data().begin(), x.data().end(), ds.inputs.begin() + i * ds.sample_size());
  }
  return ds;
}

}  // namespace

ChannelDataset sample_dataset(const ArrayGeometry& geometry, double r_lo_fraction,
                              double r_hi_fraction, Index count, std::uint64_t seed) {
  return build_dataset(geometry, r_lo_fraction, r_hi_fraction, count, seed, nullptr);
}

ChannelDataset sample_dataset(const ArrayGeometry& geometry, double r_lo_fraction,
                              double r_hi_fraction, Index count, std::uint64_t seed,
                              const NormalizationParams& norm) {
  return build_dataset(geometry, r_lo_fraction, r_hi_fraction, count, seed, &norm);
}

void write_dataset(const std::filesystem::path& path, const ChannelDataset& dataset,
                   ElementType element_type, const nlohmann::json& metadata) {
  nlohmann::json header = {
      {"format", "neft-dataset"},
      {"version", kDatasetVersion},
      {"geometry",
       {{"n1", dataset.geometry.n1},
        {"n2", dataset.geometry.n2},
        {"spacing_m", dataset.geometry.spacing},
        {"wavelength_m", dataset.geometry.wavelength}}},
      {"r_bounds_fraction", {dataset.r_lo_fraction, dataset.r_hi_fraction}},
      {"rayleigh_distance_m", rayleigh_distance(dataset.geometry.aperture(), dataset.geometry.wavelength)},
      {"seed", dataset.seed},
      {"count", dataset.count},
      {"height", dataset.height},
      {"width", dataset.width},
      {"layout", "real then imaginary plane; n2 x n1 matrix flattened row-major into height x width"},
      {"element_type", element_type_name(element_type)},
      {"norm",
       {{"min_real", dataset.norm.min_real},
        {"max_real", dataset.norm.max_real},
        {"min_imag", dataset.norm.min_imag},
        {"max_imag", dataset.norm.max_imag}}},
      {"metadata", metadata},
  };
  auto os = io::open_for_write(path);
  io::write_header(os, header);
  if (element_type == ElementType::Float64) {
    io::write_values_le<double>(os, dataset.inputs);
  } else {
    std::vector<float> narrow(dataset.inputs.begin(), dataset.inputs.end());
    io::write_values_le<float>(os, narrow);
  }
  if (!os) throw Error("failed writing " + path.string());
}

nlohmann::json read_dataset_header(const std::filesystem::path& path) {
  auto is = io::open_for_read(path);
  return io::read_header(is);
}

ChannelDataset read_dataset(const std::filesystem::path& path) {
  auto is = io::open_for_read(path);
  const nlohmann::json h = io::read_header(is);
  try {
    if (h.at("format") != "neft-dataset") throw FormatError(path.string() + " is not a dataset file");
    if (h.at("version").get<int>() != kDatasetVersion) {
      throw FormatError("unsupported dataset version in " + path.string());
    }
    ChannelDataset ds;
    const auto& g = h.at("geometry");
    ds.geometry.n1 = g.at("n1").get<Index>();
    ds.geometry.n2 = g.at("n2").get<Index>();
    ds.geometry.spacing = g.at("spacing_m").get<double>();
    ds.geometry.wavelength = g.at("wavelength_m").get<double>();
    ds.r_lo_fraction = h.at("r_bounds_fraction").at(0).get<double>();
    ds.r_hi_fraction = h.at("r_bounds_fraction").at(1).get<double>();
    ds.seed = h.at("seed").get<std::uint64_t>();
    ds.count = h.at("count").get<Index>();
    ds.height = h.at("height").get<Index>();
    ds.width = h.at("width").get<Index>();
    const auto& n = h.at("norm");
    ds.norm = {n.at("min_real").get<double>(), n.at("max_real").get<double>(),
               n.at("min_imag").get<double>(), n.at("max_imag").get<double>()};
    ds.geometry.validate();
    ds.norm.validate();
    if (ds.height * ds.width != ds.geometry.n1 * ds.geometry.n2 || ds.count < 0) {
      throw FormatError("inconsistent dataset header in " + path.string());
    }
    ds.inputs.resize(static_cast<std::size_t>(ds.count * ds.sample_size()));
    const std::string type = h.at("element_type").get<std::string>();
    if (type == "float64") {
      io::read_values_le<double>(is, ds.inputs);
    } else if (type == "float32") {
      std::vector<float> narrow(ds.inputs.size());
      io::read_values_le<float>(is, narrow);
      std::copy(narrow.begin(), narrow.end(), ds.inputs.begin());
    } else {
      throw FormatError("unknown element type '" + type + "'");
    }
    if (is.peek() != std::char_traits<char>::eof()) {
      throw FormatError("trailing bytes after payload in " + path.string());
    }
    return ds;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed dataset header in " + path.string() + ": " + e.what());
  }
}

}  // namespace neft
