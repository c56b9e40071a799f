#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>

#include "json.hpp"
#include "neft/errors.hpp"

// Framed binary files: an 8-byte little-endian header length, a UTF-8 JSON
// header, then a raw little-endian payload.

namespace neft::io {

inline void write_u64_le(std::ostream& os, std::uint64_t v) {
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(bytes, 8);
}

inline std::uint64_t read_u64_le(std::istream& is) {
  unsigned char bytes[8];
  if (!is.read(reinterpret_cast<char*>(bytes), 8)) throw FormatError("truncated header length");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | bytes[i];
  return v;
}

template <typename Scalar>
void write_values_le(std::ostream& os, std::span<const Scalar> values) {
  static_assert(sizeof(Scalar) == 4 || sizeof(Scalar) == 8);
  using Bits = std::conditional_t<sizeof(Scalar) == 4, std::uint32_t, std::uint64_t>;
  std::string buffer(values.size() * sizeof(Scalar), '\0');
  char* out = buffer.data();
  for (Scalar v : values) {
    const Bits bits = std::bit_cast<Bits>(v);
    for (std::size_t i = 0; i < sizeof(Scalar); ++i) *out++ = static_cast<char>((bits >> (8 * i)) & 0xFF);
  }
  os.write(buffer.data(), static_cast<std::streamsize>(buffer.size()));
}

template <typename Scalar>
void read_values_le(std::istream& is, std::span<Scalar> values) {
  static_assert(sizeof(Scalar) == 4 || sizeof(Scalar) == 8);
  using Bits = std::conditional_t<sizeof(Scalar) == 4, std::uint32_t, std::uint64_t>;
  std::string buffer(values.size() * sizeof(Scalar), '\0');
  if (!is.read(buffer.data(), static_cast<std::streamsize>(buffer.size()))) {
    throw FormatError("truncated payload");
  }
  const auto* in = reinterpret_cast<const unsigned char*>(buffer.data());
  for (Scalar& v : values) {
    Bits bits = 0;
    for (std::size_t i = sizeof(Scalar); i-- > 0;) bits = (bits << 8) | in[i];
    in += sizeof(Scalar);
    v = std::bit_cast<Scalar>(bits);
  }
}

inline void write_header(std::ostream& os, const nlohmann::json& header) {
  const std::string text = header.dump();
  write_u64_le(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
}

inline nlohmann::json read_header(std::istream& is) {
  const std::uint64_t length = read_u64_le(is);
  if (length > (std::uint64_t{1} << 31)) throw FormatError("implausible header length");
  std::string text(length, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(length))) throw FormatError("truncated header");
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("invalid JSON header: ") + e.what());
  }
}

inline std::ofstream open_for_write(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  return os;
}

inline std::ifstream open_for_read(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path.string());
  return is;
}

}  // namespace neft::io
