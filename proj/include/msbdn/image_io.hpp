#pragma once

// Binary PPM (P6) and PGM (P5), 8-bit only. Pixel values map to [0,1] as v/255.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "msbdn/tensor.hpp"
#include "msbdn/tensor_io.hpp"

namespace msbdn {

namespace detail {

inline std::string next_pnm_token(std::istream& is) {
  std::string tok;
  int ch = 0;
  while ((ch = is.get()) != EOF) {
    if (ch == '#') {
      while ((ch = is.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  return tok;
}

inline std::size_t parse_dim(const std::string& tok, const std::string& path) {
  try {
    std::size_t used = 0;
    const long v = std::stol(tok, &used);
    if (used == tok.size() && v > 0 && v < (1L << 20)) return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
  }
  throw DataError(path + ": bad PNM header field '" + tok + "'");
}

template <class T>
Tensor<T> read_pnm(const std::string& path, const char* magic, std::size_t channels) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path);
  if (next_pnm_token(is) != magic) throw DataError(path + ": expected " + std::string(magic) + " image");
  const std::size_t w = parse_dim(next_pnm_token(is), path);
  const std::size_t h = parse_dim(next_pnm_token(is), path);
  if (parse_dim(next_pnm_token(is), path) != 255) throw DataError(path + ": only maxval 255 is supported");
  std::vector<unsigned char> raw(w * h * channels);
  is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(is.gcount()) != raw.size()) throw DataError(path + ": truncated pixel data");
  Tensor<T> t(Shape{1, channels, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < channels; ++c)
        t.at(0, c, y, x) = static_cast<T>(raw[(y * w + x) * channels + c] / 255.0);
  return t;
}

template <class T>
void write_pnm(const std::string& path, const Tensor<T>& t, const char* magic, std::size_t channels) {
  if (t.n() != 1 || t.c() != channels)
    throw std::invalid_argument(path + ": expected a (1," + std::to_string(channels) + ",H,W) tensor, got " +
                                to_string(t.shape()));
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path + " for writing");
  os << magic << '\n' << t.w() << ' ' << t.h() << "\n255\n";
  std::vector<unsigned char> raw(t.h() * t.w() * channels);
  for (std::size_t y = 0; y < t.h(); ++y)
    for (std::size_t x = 0; x < t.w(); ++x)
      for (std::size_t c = 0; c < channels; ++c)
        raw[(y * t.w() + x) * channels + c] =
            static_cast<unsigned char>(std::lround(std::clamp(double(t.at(0, c, y, x)), 0.0, 1.0) * 255.0));
  os.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!os) throw DataError("write failed: " + path);
}

}  // namespace detail

/// RGB image as (1, 3, H, W) in [0,1].
template <class T = float>
Tensor<T> read_ppm(const std::string& path) {
  return detail::read_pnm<T>(path, "P6", 3);
}

/// Values are clamped to [0,1] and rounded to the nearest 8-bit level.
template <class T>
void write_ppm(const std::string& path, const Tensor<T>& image) {
  detail::write_pnm(path, image, "P6", 3);
}

/// Grey image as (1, 1, H, W) in [0,1].
template <class T = float>
Tensor<T> read_pgm(const std::string& path) {
  return detail::read_pnm<T>(path, "P5", 1);
}

template <class T>
void write_pgm(const std::string& path, const Tensor<T>& image) {
  detail::write_pnm(path, image, "P5", 1);
}

/// Map [0,1] grey values onto a depth range.
template <class T>
Tensor<T> rescale_depth(const Tensor<T>& grey, double dmin, double dmax) {
  Tensor<T> d(grey.shape());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<T>(dmin + (dmax - dmin) * double(grey[i]));
  return d;
}

}  // namespace msbdn
