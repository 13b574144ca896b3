#pragma once

// Little-endian binary helpers and the MSBT tensor container:
//   "MSBT" | u32 version=1 | u32 rank | rank x u64 dims | float32 payload

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

#include "msbdn/tensor.hpp"

namespace msbdn {

/// Malformed or unreadable file content.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace io {

inline void write_u8(std::ostream& os, std::uint8_t v) { os.put(static_cast<char>(v)); }

template <class U>
void write_le(std::ostream& os, U v) {
  static_assert(std::is_unsigned_v<U>);
  std::array<char, sizeof(U)> buf{};
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(buf.data(), buf.size());
}

inline void write_f32(std::ostream& os, float f) { write_le(os, std::bit_cast<std::uint32_t>(f)); }

inline void read_exact(std::istream& is, char* dst, std::size_t n, const char* what) {
  is.read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n)
    throw DataError(std::string("truncated stream while reading ") + what);
}

inline std::uint8_t read_u8(std::istream& is) {
  char c = 0;
  read_exact(is, &c, 1, "u8");
  return static_cast<std::uint8_t>(c);
}

template <class U>
U read_le(std::istream& is) {
  std::array<unsigned char, sizeof(U)> buf{};
  read_exact(is, reinterpret_cast<char*>(buf.data()), buf.size(), "integer");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
  return v;
}

inline float read_f32(std::istream& is) { return std::bit_cast<float>(read_le<std::uint32_t>(is)); }

inline void write_string(std::ostream& os, const std::string& s) {
  write_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is, std::size_t limit = 1u << 20) {
  const auto len = read_le<std::uint32_t>(is);
  if (len > limit) throw DataError("string length " + std::to_string(len) + " exceeds limit");
  std::string s(len, '\0');
  read_exact(is, s.data(), len, "string");
  return s;
}

}  // namespace io

inline constexpr std::array<char, 4> kTensorMagic{'M', 'S', 'B', 'T'};
inline constexpr std::uint32_t kTensorVersion = 1;

/// Serialize as MSBT. Always written with rank 4; values are stored as float32.
template <class T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  os.write(kTensorMagic.data(), 4);
  io::write_le<std::uint32_t>(os, kTensorVersion);
  io::write_le<std::uint32_t>(os, 4);
  for (std::uint64_t d : {t.n(), t.c(), t.h(), t.w()}) io::write_le<std::uint64_t>(os, d);
  for (std::size_t i = 0; i < t.size(); ++i) io::write_f32(os, static_cast<float>(t[i]));
}

/// Read an MSBT tensor. Ranks below 4 are left-padded with unit dimensions.
template <class T>
Tensor<T> read_tensor(std::istream& is) {
  std::array<char, 4> magic{};
  io::read_exact(is, magic.data(), 4, "tensor magic");
  if (magic != kTensorMagic) throw DataError("bad tensor magic (expected MSBT)");
  const auto version = io::read_le<std::uint32_t>(is);
  if (version != kTensorVersion) throw DataError("unsupported tensor version " + std::to_string(version));
  const auto rank = io::read_le<std::uint32_t>(is);
  if (rank > 4) throw DataError("tensor rank " + std::to_string(rank) + " exceeds 4");
  std::array<std::uint64_t, 4> dims{1, 1, 1, 1};
  for (std::uint32_t i = 0; i < rank; ++i) dims[4 - rank + i] = io::read_le<std::uint64_t>(is);
  const Shape s{dims[0], dims[1], dims[2], dims[3]};
  if (s.numel() > (std::uint64_t{1} << 34)) throw DataError("tensor too large: " + to_string(s));
  Tensor<T> t(s);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(io::read_f32(is));
  return t;
}

template <class T>
void save_tensor(const std::string& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path + " for writing");
  write_tensor(os, t);
  if (!os) throw DataError("write failed: " + path);
}

template <class T>
Tensor<T> load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path);
  return read_tensor<T>(is);
}

}  // namespace msbdn
