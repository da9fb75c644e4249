#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>

#include "dexpr/errors.hpp"

namespace dexpr::detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  const std::array<char, 4> bytes{static_cast<char>(v & 0xFF), static_cast<char>((v >> 8) & 0xFF),
                                  static_cast<char>((v >> 16) & 0xFF), static_cast<char>((v >> 24) & 0xFF)};
  out.write(bytes.data(), bytes.size());
}

inline std::uint32_t get_u32(std::istream& in) {
  std::array<unsigned char, 4> b{};
  if (!in.read(reinterpret_cast<char*>(b.data()), b.size())) throw FormatError("unexpected end of data");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f32(std::ostream& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }
inline float get_f32(std::istream& in) { return std::bit_cast<float>(get_u32(in)); }

inline void put_string(std::ostream& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& in, std::size_t limit) {
  const std::uint32_t n = get_u32(in);
  if (n > limit) throw FormatError("string length " + std::to_string(n) + " exceeds remaining data");
  std::string s(n, '\0');
  if (!in.read(s.data(), n)) throw FormatError("unexpected end of data");
  return s;
}

}  // namespace dexpr::detail
