#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <istream>
#include <ostream>
#include <span>
#include <string>

#include "epimvs/errors.hpp"

namespace epimvs::detail {

template <typename T>
void WriteLE(std::ostream& os, T value) {
  std::array<char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  os.write(bytes.data(), sizeof(T));
}

template <typename T>
T ReadLE(std::istream& is) {
  std::array<char, sizeof(T)> bytes{};
  is.read(bytes.data(), sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  T value;
  std::memcpy(&value, bytes.data(), sizeof(T));
  return value;
}

inline void WriteDoubles(std::ostream& os, std::span<const double> values) {
  for (double v : values) WriteLE(os, std::bit_cast<std::uint64_t>(v));
}

inline void ReadDoubles(std::istream& is, std::span<double> values,
                        const std::filesystem::path& path) {
  for (double& v : values) v = std::bit_cast<double>(ReadLE<std::uint64_t>(is));
  if (!is) throw FormatError(path.string() + ": truncated data");
}

}  // namespace epimvs::detail
