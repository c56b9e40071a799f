#include <cmath>
#include <complex>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>

#include "doctest.h"
#include "neft/channel.hpp"
#include "neft/errors.hpp"
#include "neft/io.hpp"
#include "neft/ops.hpp"

using namespace neft;

namespace {

constexpr double kPi = std::numbers::pi;

// Straight coordinate geometry: BS antenna at (0, n1 d), UE antenna offset from
// the first UE antenna along the direction phi.
double coordinate_distance(double d, double r, double theta, double phi, Index n1, Index n2) {
  const double bx = 0.0;
  const double by = double(n1) * d;
  const double ux = r * std::cos(theta) - double(n2) * d * std::sin(phi);
  const double uy = r * std::sin(theta) + double(n2) * d * std::cos(phi);
  return std::hypot(ux - bx, uy - by);
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("neft_test_" + name);
}

}  // namespace

TEST_CASE("rayleigh distance") {
  CHECK(rayleigh_distance(1.0, 0.01) == doctest::Approx(200.0).epsilon(1e-14));
  CHECK(rayleigh_distance(2.0, 0.01) == doctest::Approx(800.0).epsilon(1e-14));

  const ArrayGeometry g = ArrayGeometry::half_wavelength(1024);
  CHECK(g.wavelength == doctest::Approx(0.01).epsilon(1e-15));
  CHECK(g.aperture() == doctest::Approx(5.115).epsilon(1e-14));
  CHECK(rayleigh_distance(g.aperture(), g.wavelength) == doctest::Approx(5232.645).epsilon(1e-12));

  CHECK_THROWS_AS(rayleigh_distance(0.0, 0.01), DomainError);
  CHECK_THROWS_AS(rayleigh_distance(1.0, -1.0), DomainError);
}

TEST_CASE("element distance matches coordinate geometry") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> angle(0.0, 2.0 * kPi);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double worst = 0.0;
  for (int t = 0; t < 1000; ++t) {
    ArrayGeometry g;
    g.n1 = 1 + static_cast<Index>(unit(rng) * 1024);
    g.n2 = 1 + static_cast<Index>(unit(rng) * 8);
    g.wavelength = 0.001 + unit(rng) * 0.1;
    g.spacing = g.wavelength * (0.25 + unit(rng));
    UePlacement p{1.0 + unit(rng) * 5000.0, angle(rng), angle(rng)};
    const Index a = static_cast<Index>(unit(rng) * double(g.n1));
    const Index b = static_cast<Index>(unit(rng) * double(g.n2));
    const double expected = coordinate_distance(g.spacing, p.r, p.theta, p.phi, a, b);
    const double got = element_distance(g, p, a, b);
    worst = std::max(worst, std::abs(got - expected) / expected);
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("element distance special cases") {
  ArrayGeometry g = ArrayGeometry::half_wavelength(64, 4);
  const UePlacement p{37.25, 1.3, 0.7};
  CHECK(element_distance(g, p, 0, 0) == p.r);

  const UePlacement collinear{10.0, kPi / 2, 0.0};
  for (Index n1 : {1, 5, 63}) {
    CHECK(element_distance(g, collinear, n1, 0) ==
          doctest::Approx(std::abs(10.0 - double(n1) * g.spacing)).epsilon(1e-12));
  }

  CHECK_THROWS_AS(element_distance(g, p, 64, 0), BoundsError);
  CHECK_THROWS_AS(element_distance(g, p, 0, 4), BoundsError);
  CHECK_THROWS_AS(element_distance(g, p, -1, 0), BoundsError);
}

TEST_CASE("channel matrix magnitude and phase") {
  const ArrayGeometry g = ArrayGeometry::half_wavelength(128, 3);
  const UePlacement p{42.0, 2.1, 4.0};
  const ChannelSample s = channel_matrix(g, p);
  REQUIRE(s.h.rows() == 3);
  REQUIRE(s.h.cols() == 128);
  double worst = 0.0;
  for (Index a = 0; a < 3; ++a) {
    for (Index b = 0; b < 128; ++b) {
      REQUIRE(std::isfinite(s.h(a, b).real()));
      worst = std::max(worst, std::abs(std::abs(s.h(a, b)) * element_distance(g, p, b, a) - 1.0));
    }
  }
  CHECK(worst < 1e-12);

  // A single-element link exactly one wavelength long has zero net phase.
  ArrayGeometry one = ArrayGeometry::half_wavelength(1);
  const ChannelSample w = channel_matrix(one, {one.wavelength, 0.3, 0.0});
  CHECK(w.h(0, 0).real() == doctest::Approx(1.0 / one.wavelength).epsilon(1e-12));
  CHECK(std::abs(w.h(0, 0).imag()) < 1e-12 * w.h(0, 0).real());
}

TEST_CASE("channel matrix against a scalar oracle") {
  const ArrayGeometry g = ArrayGeometry::half_wavelength(4);
  const double r = 10.0;
  const double theta = kPi / 4;
  const ChannelSample s = channel_matrix(g, {r, theta, 0.0});
  for (int n = 0; n < 4; ++n) {
    const double y = r * std::sin(theta) - n * 0.005;
    const double x = r * std::cos(theta);
    const double dist = std::sqrt(x * x + y * y);
    const double phase = -2.0 * kPi * dist / 0.01;
    CHECK(s.h(0, n).real() == doctest::Approx(std::cos(phase) / dist).epsilon(1e-9));
    CHECK(s.h(0, n).imag() == doctest::Approx(std::sin(phase) / dist).epsilon(1e-9));
  }
}

TEST_CASE("channel matrix errors") {
  ArrayGeometry g = ArrayGeometry::half_wavelength(8);
  // UE sits on BS antenna 2.
  CHECK_THROWS_AS(channel_matrix(g, {2.0 * g.spacing, kPi / 2, 0.0}), SingularityError);
  CHECK_THROWS_AS(channel_matrix(g, {0.0, 0.0, 0.0}), DomainError);
  g.n1 = 0;
  CHECK_THROWS_AS(channel_matrix(g, {1.0, 0.0, 0.0}), DomainError);
}

TEST_CASE("dataset determinism and bounds") {
  const ArrayGeometry g = ArrayGeometry::half_wavelength(64);
  const ChannelDataset a = sample_dataset(g, 0.05, 0.5, 3, 1234);
  const ChannelDataset b = sample_dataset(g, 0.05, 0.5, 3, 1234);
  REQUIRE(a.inputs.size() == b.inputs.size());
  CHECK(std::memcmp(a.inputs.data(), b.inputs.data(), a.inputs.size() * sizeof(double)) == 0);
  CHECK(a.height == 8);
  CHECK(a.width == 8);

  const ChannelDataset c = sample_dataset(g, 0.05, 0.5, 3, 1235);
  CHECK(c.inputs != a.inputs);

  const ChannelDataset big = sample_dataset(g, 0.05, 0.5, 2000, 7);
  const double d_r = rayleigh_distance(g.aperture(), g.wavelength);
  REQUIRE(big.placements.size() == 2000);
  for (const auto& p : big.placements) {
    REQUIRE(p.r >= 0.05 * d_r);
    REQUIRE(p.r <= 0.5 * d_r);
    REQUIRE(p.theta >= 0.0);
    REQUIRE(p.theta < 2.0 * kPi);
  }
  for (double v : big.inputs) REQUIRE((v >= 0.0 && v <= 1.0));

  // Denormalizing the stored inputs recovers the regenerated channels.
  double worst = 0.0;
  for (Index i = 0; i < big.count; i += 97) {
    const ChannelSample s = channel_matrix(g, big.placements[static_cast<std::size_t>(i)]);
    TensorD x = reshape(big.range<double>(i, i + 1), {2, big.height, big.width});
    const ComplexMatrix h = from_network_output(x, big.norm, 1, g.n1);
    worst = std::max(worst, (h - s.h).cwiseAbs().maxCoeff());
  }
  CHECK(worst < 1e-12);

  CHECK_THROWS_AS(sample_dataset(g, 0.5, 0.05, 3, 1), DomainError);
  CHECK_THROWS_AS(sample_dataset(g, 0.05, 0.5, 0, 1), DomainError);
}

TEST_CASE("network input layout") {
  const ArrayGeometry g = ArrayGeometry::half_wavelength(1024);
  CHECK(default_layout(1024) == std::pair<Index, Index>{32, 32});
  const ChannelSample s = channel_matrix(g, {600.0, 1.0, 0.0});
  NormalizationParams norm = NormalizationParams::empty();
  norm.include(s.h);
  norm.finalize();
  const TensorD x = to_network_input(s, norm, 32, 32);
  CHECK(x.shape() == Shape{2, 32, 32});
  CHECK(x(0, 0, 5) == doctest::Approx(norm.normalize_real(s.h(0, 5).real())));
  CHECK(x(1, 1, 0) == doctest::Approx(norm.normalize_imag(s.h(0, 32).imag())));

  const ComplexMatrix back = from_network_output(x, norm, 1, 1024);
  CHECK((back - s.h).cwiseAbs().maxCoeff() < 1e-12);

  CHECK_THROWS_AS(to_network_input(s, norm, 16, 32), DimensionError);
  CHECK_THROWS_AS(from_network_output(x, norm, 1, 512), DimensionError);
}

TEST_CASE("constant matrix normalizes to constant channels") {
  ComplexMatrix h = ComplexMatrix::Constant(1, 16, {0.25, -0.5});
  NormalizationParams norm = NormalizationParams::empty();
  norm.include(h);
  norm.finalize();
  CHECK_NOTHROW(norm.validate());
  const TensorD x = to_network_input(h, norm, 4, 4);
  for (Index k = 0; k < 16; ++k) {
    CHECK(x.values()[k] == x.values()[0]);
    CHECK(x.values()[16 + k] == x.values()[16]);
  }

  // Values outside the stored range are clamped.
  NormalizationParams narrow{0.0, 0.1, 0.0, 0.1};
  const TensorD y = to_network_input(h, narrow, 4, 4);
  CHECK(y.values()[0] == 1.0);
  CHECK(y.values()[16] == 0.0);
}

TEST_CASE("normalization round trip") {
  const NormalizationParams norm{-3.5, 7.25, -0.001, 0.002};
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> dist(-10.0, 10.0);
  for (int i = 0; i < 1000; ++i) {
    const double v = dist(rng);
    REQUIRE(std::abs(norm.denormalize_real(norm.normalize_real(v)) - v) < 1e-12);
    const double w = dist(rng) * 1e-3;
    REQUIRE(std::abs(norm.denormalize_imag(norm.normalize_imag(w)) - w) < 1e-12);
  }
  CHECK_THROWS_AS((NormalizationParams{1.0, 1.0, 0.0, 1.0}.validate()), DomainError);
}

TEST_CASE("dataset file round trip") {
  const ArrayGeometry g = ArrayGeometry::half_wavelength(64);
  const ChannelDataset ds = sample_dataset(g, 0.05, 0.5, 5, 99);

  const auto p64 = temp_path("ds64.bin");
  write_dataset(p64, ds, ElementType::Float64);
  const ChannelDataset r64 = read_dataset(p64);
  CHECK(r64.inputs == ds.inputs);
  CHECK(r64.count == 5);
  CHECK(r64.seed == 99);
  CHECK(r64.norm.min_real == ds.norm.min_real);
  CHECK(r64.norm.max_imag == ds.norm.max_imag);
  CHECK(r64.geometry.n1 == 64);
  CHECK(r64.height * r64.width == 64);

  const auto p32 = temp_path("ds32.bin");
  write_dataset(p32, ds, ElementType::Float32);
  const ChannelDataset r32 = read_dataset(p32);
  for (std::size_t i = 0; i < ds.inputs.size(); ++i) {
    REQUIRE(std::abs(r32.inputs[i] - ds.inputs[i]) < 1e-7);
  }

  // The file starts with the header length as 8 little-endian bytes.
  {
    std::ifstream is(p32, std::ios::binary);
    const std::uint64_t len = io::read_u64_le(is);
    const auto total = std::filesystem::file_size(p32);
    CHECK(total == 8 + len + ds.inputs.size() * sizeof(float));
  }

  // Truncation and trailing garbage are both rejected.
  {
    std::ofstream os(p32, std::ios::binary | std::ios::app);
    os << 'x';
  }
  CHECK_THROWS_AS(read_dataset(p32), FormatError);
  std::filesystem::resize_file(p32, std::filesystem::file_size(p32) - 9);
  CHECK_THROWS_AS(read_dataset(p32), FormatError);

  const auto junk = temp_path("junk.bin");
  {
    std::ofstream os(junk, std::ios::binary);
    io::write_header(os, nlohmann::json{{"format", "something-else"}});
  }
  CHECK_THROWS_AS(read_dataset(junk), FormatError);

  std::filesystem::remove(p64);
  std::filesystem::remove(p32);
  std::filesystem::remove(junk);
}

TEST_CASE("shared normalization for held-out splits") {
  const ArrayGeometry g = ArrayGeometry::half_wavelength(64);
  const ChannelDataset train = sample_dataset(g, 0.05, 0.5, 50, 1);
  const ChannelDataset test = sample_dataset(g, 0.05, 0.5, 10, 3, train.norm);
  CHECK(test.norm.min_real == train.norm.min_real);
  for (double v : test.inputs) REQUIRE((v >= 0.0 && v <= 1.0));
  const ChannelDataset h = train.head(7);
  CHECK(h.count == 7);
  CHECK(h.inputs.size() == std::size_t(7 * h.sample_size()));
  CHECK_THROWS_AS(train.head(51), BoundsError);
}
