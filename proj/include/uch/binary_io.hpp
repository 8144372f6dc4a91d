#pragma once

// Little-endian primitives shared by the checkpoint, feature, label, and code file formats.

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>

#include "uch/errors.hpp"

namespace uch::io {

template <typename UInt>
void write_le(std::ostream& os, UInt value) {
  char bytes[sizeof(UInt)];
  for (std::size_t i = 0; i < sizeof(UInt); ++i) bytes[i] = static_cast<char>((value >> (8 * i)) & 0xFFu);
  os.write(bytes, sizeof(UInt));
}

template <typename UInt>
UInt read_le(std::istream& is, std::string_view what) {
  unsigned char bytes[sizeof(UInt)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(UInt))) throw FormatError("truncated input while reading " + std::string(what));
  UInt value = 0;
  for (std::size_t i = 0; i < sizeof(UInt); ++i) value |= static_cast<UInt>(bytes[i]) << (8 * i);
  return value;
}

inline void write_f32(std::ostream& os, float value) { write_le(os, std::bit_cast<std::uint32_t>(value)); }

inline float read_f32(std::istream& is, std::string_view what) { return std::bit_cast<float>(read_le<std::uint32_t>(is, what)); }

inline void write_u32_checked(std::ostream& os, std::size_t value, std::string_view what) {
  if (value > 0xFFFFFFFFu) throw ContractError(std::string(what) + " does not fit in 32 bits");
  write_le(os, static_cast<std::uint32_t>(value));
}

inline void write_magic(std::ostream& os, std::string_view magic) { os.write(magic.data(), std::streamsize(magic.size())); }

inline void expect_magic(std::istream& is, std::string_view magic, std::string_view format) {
  std::string got(magic.size(), '\0');
  if (!is.read(got.data(), std::streamsize(got.size())) || got != magic)
    throw FormatError("not a " + std::string(format) + " file (expected magic \"" + std::string(magic) + "\")");
}

}  // namespace uch::io
