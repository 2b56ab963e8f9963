#pragma once

// Binary checkpoint of a ParameterVector, all integers little-endian:
//
//   "FNLM"                  4 bytes magic
//   version                 u16 (= 1)
//   record count            u32, one record per layer
//   records                 per layer: kind u8, weight_offset u64,
//                           weight_count u64, bias_offset u64, bias_count u64
//   value count             u64
//   values                  IEEE-754 binary64, little-endian

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "fednilm/error.hpp"
#include "fednilm/network.hpp"

namespace fednilm {

inline constexpr std::array<char, 4> kCheckpointMagic{'F', 'N', 'L', 'M'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
void put_le(std::string& out, T value) {
  static_assert(std::is_integral_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFF));
  }
}

template <typename T>
T get_le(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) {
    throw DataError("checkpoint truncated");
  }
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  }
  pos += sizeof(T);
  return static_cast<T>(v);
}

} // namespace detail

inline std::string encode_checkpoint(const ParameterVector& p) {
  std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_le<std::uint16_t>(out, kCheckpointVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(p.layout.slots.size()));
  for (const auto& s : p.layout.slots) {
    detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(s.kind));
    detail::put_le<std::uint64_t>(out, s.weight_offset);
    detail::put_le<std::uint64_t>(out, s.weight_count);
    detail::put_le<std::uint64_t>(out, s.bias_offset);
    detail::put_le<std::uint64_t>(out, s.bias_count);
  }
  detail::put_le<std::uint64_t>(out, p.values.size());
  for (double x : p.values) {
    detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(x));
  }
  return out;
}

/// Decodes and checks the stored records against `layout`.
inline ParameterVector decode_checkpoint(const std::string& bytes, const ParameterLayout& layout) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic.data(), 4) != 0) {
    throw DataError("not an FNLM checkpoint");
  }
  std::size_t pos = 4;
  const auto version = detail::get_le<std::uint16_t>(bytes, pos);
  if (version != kCheckpointVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto records = detail::get_le<std::uint32_t>(bytes, pos);
  if (records != layout.slots.size()) {
    throw ShapeError("checkpoint has " + std::to_string(records) + " layers, network has " +
                     std::to_string(layout.slots.size()));
  }
  for (const auto& s : layout.slots) {
    const auto kind = detail::get_le<std::uint8_t>(bytes, pos);
    const auto w_off = detail::get_le<std::uint64_t>(bytes, pos);
    const auto w_cnt = detail::get_le<std::uint64_t>(bytes, pos);
    const auto b_off = detail::get_le<std::uint64_t>(bytes, pos);
    const auto b_cnt = detail::get_le<std::uint64_t>(bytes, pos);
    if (kind != static_cast<std::uint8_t>(s.kind) || w_off != s.weight_offset || w_cnt != s.weight_count ||
        b_off != s.bias_offset || b_cnt != s.bias_count) {
      throw ShapeError("checkpoint layout does not match network");
    }
  }
  const auto count = detail::get_le<std::uint64_t>(bytes, pos);
  if (count != layout.total) {
    throw ShapeError("checkpoint value count mismatch");
  }
  std::vector<double> values(count);
  for (auto& x : values) {
    x = std::bit_cast<double>(detail::get_le<std::uint64_t>(bytes, pos));
  }
  if (pos != bytes.size()) {
    throw DataError("trailing bytes in checkpoint");
  }
  return ParameterVector(layout, std::move(values));
}

inline void save_checkpoint(const ParameterVector& p, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw DataError("cannot write checkpoint " + path.string());
  }
  const std::string bytes = encode_checkpoint(p);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) {
    throw DataError("failed writing checkpoint " + path.string());
  }
}

inline ParameterVector load_checkpoint(const std::filesystem::path& path, const ParameterLayout& layout) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw DataError("cannot read checkpoint " + path.string());
  }
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes, layout);
}

} // namespace fednilm
