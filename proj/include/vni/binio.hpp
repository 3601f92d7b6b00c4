#pragma once

#include "vni/common.hpp"

#include <bit>
#include <cstring>
#include <istream>
#include <ostream>

namespace vni {

// Little-endian primitives for the on-disk formats. Reads throw FormatError
// on truncation.

namespace binio {

template <typename T>
void write_le(std::ostream& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(buf[i], buf[sizeof(T) - 1 - i]);
  }
  out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& in, const char* what) {
  unsigned char buf[sizeof(T)];
  in.read(reinterpret_cast<char*>(buf), sizeof(T));
  if (in.gcount() != static_cast<std::streamsize>(sizeof(T))) {
    throw FormatError(std::string("truncated input while reading ") + what);
  }
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(buf[i], buf[sizeof(T) - 1 - i]);
  }
  T value;
  std::memcpy(&value, buf, sizeof(T));
  return value;
}

inline void write_string(std::ostream& out, const std::string& s) {
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& in, const char* what) {
  const auto len = read_le<std::uint32_t>(in, what);
  std::string s(len, '\0');
  in.read(s.data(), len);
  if (in.gcount() != static_cast<std::streamsize>(len)) {
    throw FormatError(std::string("truncated input while reading ") + what);
  }
  return s;
}

inline void expect_magic(std::istream& in, const char* magic, const char* what) {
  char got[5] = {0, 0, 0, 0, 0};
  in.read(got, 4);
  if (in.gcount() != 4 || std::string(got, 4) != magic) {
    throw FormatError(std::string(what) + ": expected magic '" + magic + "', got '" +
                      std::string(got, static_cast<std::size_t>(std::max<std::streamsize>(in.gcount(), 0))) + "'");
  }
}

}  // namespace binio

}  // namespace vni
