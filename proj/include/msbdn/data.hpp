#pragma once

// Paired datasets, the manifest file, geometric augmentation and batch sampling.
//
// Manifest: CSV with a header row naming its columns. Recognised columns are
// hazy, clean, transmission, depth, A, beta; paths are relative to the
// manifest's directory. A row with an empty hazy entry is synthesised on load
// from clean + depth + A + beta.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "msbdn/config.hpp"
#include "msbdn/haze.hpp"
#include "msbdn/image_io.hpp"
#include "msbdn/rng.hpp"
#include "msbdn/tensor.hpp"

namespace msbdn {

template <class T>
struct Sample {
  std::string name;
  Tensor<T> hazy;                          // (1, 3, H, W)
  Tensor<T> clean;                         // (1, 3, H, W)
  std::optional<Tensor<T>> transmission;   // (1, 1, H, W)
  double atmospheric_light = 0;
  double beta = 0;
};

template <class T>
using Dataset = std::vector<Sample<T>>;

// ---------------------------------------------------------------------------
// Geometric primitives. All act per sample on any channel count.

/// Bilinear resize with half-pixel centres and edge clamping.
template <class T>
Tensor<T> resize_bilinear(const Tensor<T>& src, std::size_t oh, std::size_t ow) {
  if (oh == 0 || ow == 0) throw std::invalid_argument("resize_bilinear: empty target size");
  if (oh == src.h() && ow == src.w()) return src;
  Tensor<T> out(Shape{src.n(), src.c(), oh, ow});
  const double sy = double(src.h()) / double(oh), sx = double(src.w()) / double(ow);
  struct Tap {
    std::size_t i0, i1;
    double f;
  };
  auto taps = [](std::size_t n_out, std::size_t n_in, double scale) {
    std::vector<Tap> t(n_out);
    for (std::size_t o = 0; o < n_out; ++o) {
      const double pos = std::clamp((double(o) + 0.5) * scale - 0.5, 0.0, double(n_in - 1));
      const auto i0 = static_cast<std::size_t>(pos);
      t[o] = {i0, std::min(i0 + 1, n_in - 1), pos - double(i0)};
    }
    return t;
  };
  const auto ty = taps(oh, src.h(), sy), tx = taps(ow, src.w(), sx);
  for (std::size_t n = 0; n < src.n(); ++n)
    for (std::size_t c = 0; c < src.c(); ++c) {
      const T* p = src.plane(n, c);
      T* q = out.plane(n, c);
      for (std::size_t y = 0; y < oh; ++y) {
        const T* r0 = p + ty[y].i0 * src.w();
        const T* r1 = p + ty[y].i1 * src.w();
        const double fy = ty[y].f;
        for (std::size_t x = 0; x < ow; ++x) {
          const auto& t = tx[x];
          const double top = double(r0[t.i0]) * (1 - t.f) + double(r0[t.i1]) * t.f;
          const double bot = double(r1[t.i0]) * (1 - t.f) + double(r1[t.i1]) * t.f;
          q[y * ow + x] = static_cast<T>(top * (1 - fy) + bot * fy);
        }
      }
    }
  return out;
}

template <class T>
Tensor<T> crop(const Tensor<T>& src, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
  if (y0 + h > src.h() || x0 + w > src.w())
    throw std::invalid_argument("crop " + std::to_string(h) + "x" + std::to_string(w) + " at (" + std::to_string(y0) +
                                "," + std::to_string(x0) + ") exceeds " + to_string(src.shape()));
  Tensor<T> out(Shape{src.n(), src.c(), h, w});
  for (std::size_t n = 0; n < src.n(); ++n)
    for (std::size_t c = 0; c < src.c(); ++c)
      for (std::size_t y = 0; y < h; ++y)
        std::copy_n(src.plane(n, c) + (y0 + y) * src.w() + x0, w, out.plane(n, c) + y * w);
  return out;
}

/// Mirror left-right.
template <class T>
Tensor<T> flip_horizontal(const Tensor<T>& src) {
  Tensor<T> out(src.shape());
  for (std::size_t n = 0; n < src.n(); ++n)
    for (std::size_t c = 0; c < src.c(); ++c)
      for (std::size_t y = 0; y < src.h(); ++y) {
        const T* r = src.plane(n, c) + y * src.w();
        std::reverse_copy(r, r + src.w(), out.plane(n, c) + y * src.w());
      }
  return out;
}

/// Mirror top-bottom.
template <class T>
Tensor<T> flip_vertical(const Tensor<T>& src) {
  Tensor<T> out(src.shape());
  for (std::size_t n = 0; n < src.n(); ++n)
    for (std::size_t c = 0; c < src.c(); ++c)
      for (std::size_t y = 0; y < src.h(); ++y)
        std::copy_n(src.plane(n, c) + y * src.w(), src.w(), out.plane(n, c) + (src.h() - 1 - y) * src.w());
  return out;
}

/// Replicate border pixels so H and W become multiples of `m`.
template <class T>
Tensor<T> pad_edge_to_multiple(const Tensor<T>& src, std::size_t m) {
  const std::size_t h = (src.h() + m - 1) / m * m, w = (src.w() + m - 1) / m * m;
  if (h == src.h() && w == src.w()) return src;
  Tensor<T> out(Shape{src.n(), src.c(), h, w});
  for (std::size_t n = 0; n < src.n(); ++n)
    for (std::size_t c = 0; c < src.c(); ++c)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
          out.at(n, c, y, x) = src.at(n, c, std::min(y, src.h() - 1), std::min(x, src.w() - 1));
  return out;
}

// ---------------------------------------------------------------------------
// Batches

template <class T>
struct Batch {
  Tensor<T> hazy, clean;
  std::optional<Tensor<T>> transmission;  // set when every drawn sample carries one
  std::vector<std::size_t> indices;
};

/// Thrown when no sample fits the patch after repeated attempts.
class SamplingError : public DataError {
 public:
  using DataError::DataError;
};

inline constexpr int kMaxSampleAttempts = 100;

/// Draw `tcfg.batch` augmented patches. Each draw picks a pair, a scale in
/// scale_range (bilinear), an aligned crop and (unless disabled) independent
/// horizontal and vertical flips; the same transform is applied to hazy, clean and T.
template <class T>
Batch<T> sample_batch(const Dataset<T>& data, const TrainConfig& tcfg, Rng& rng) {
  if (data.empty()) throw DataError("sample_batch: empty dataset");
  const auto p = static_cast<std::size_t>(tcfg.patch);
  std::vector<Tensor<T>> hazy, clean, trans;
  Batch<T> b;
  bool all_t = true;
  int failures = 0;
  while (hazy.size() < static_cast<std::size_t>(tcfg.batch)) {
    const auto idx = static_cast<std::size_t>(rng.below(data.size()));
    const auto& s = data[idx];
    const double scale = rng.uniform(tcfg.scale_min, tcfg.scale_max);
    const auto h = static_cast<std::size_t>(std::lround(double(s.clean.h()) * scale));
    const auto w = static_cast<std::size_t>(std::lround(double(s.clean.w()) * scale));
    if (h < p || w < p) {
      if (++failures >= kMaxSampleAttempts)
        throw SamplingError("sample_batch: " + std::to_string(failures) + " draws smaller than patch " +
                            std::to_string(p) + " (last: " + s.name + " scaled to " + std::to_string(h) + "x" +
                            std::to_string(w) + ")");
      continue;
    }
    const auto y0 = static_cast<std::size_t>(rng.below(h - p + 1));
    const auto x0 = static_cast<std::size_t>(rng.below(w - p + 1));
    const bool fh = tcfg.flips && rng.coin(), fv = tcfg.flips && rng.coin();
    auto transform = [&](const Tensor<T>& t) {
      auto out = crop(resize_bilinear(t, h, w), y0, x0, p, p);
      if (fh) out = flip_horizontal(out);
      if (fv) out = flip_vertical(out);
      return out;
    };
    hazy.push_back(transform(s.hazy));
    clean.push_back(transform(s.clean));
    if (s.transmission)
      trans.push_back(transform(*s.transmission));
    else
      all_t = false;
    b.indices.push_back(idx);
  }
  b.hazy = stack_samples(hazy);
  b.clean = stack_samples(clean);
  if (all_t) b.transmission = stack_samples(trans);
  return b;
}

// ---------------------------------------------------------------------------
// Synthetic data and the manifest

template <class T>
Dataset<T> make_synthetic_dataset(Rng& rng, std::size_t count, std::size_t h, std::size_t w,
                                  const SceneRanges& ranges = {}) {
  Dataset<T> d;
  for (std::size_t i = 0; i < count; ++i) {
    auto sc = random_scene<T>(rng, h, w, ranges);
    char name[32];
    std::snprintf(name, sizeof name, "synth_%04zu", i);
    d.push_back({name, sc.hazy, sc.clean, sc.transmission, sc.atmospheric_light, sc.beta});
  }
  return d;
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace detail

template <class T>
Dataset<T> load_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open manifest " + path);
  const auto dir = std::filesystem::path(path).parent_path();
  std::string line;
  if (!std::getline(is, line)) throw DataError(path + ": empty manifest");
  const auto header = detail::split_csv_line(line);
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) {
    static const std::vector<std::string> known{"hazy", "clean", "transmission", "depth", "A", "beta"};
    if (std::find(known.begin(), known.end(), header[i]) == known.end())
      throw DataError(path + ": unknown manifest column '" + header[i] + "' (known: hazy,clean,transmission,depth,A,beta)");
    col[header[i]] = i;
  }
  if (!col.contains("clean") || !col.contains("hazy")) throw DataError(path + ": manifest needs hazy and clean columns");
  Dataset<T> data;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_csv_line(line);
    const std::string where = path + ":" + std::to_string(lineno) + ": ";
    if (cells.size() != header.size()) throw DataError(where + "expected " + std::to_string(header.size()) + " fields");
    auto field = [&](const char* k) { return col.contains(k) ? cells[col[k]] : std::string(); };
    auto file = [&](const char* k) { return (dir / field(k)).string(); };
    auto number = [&](const char* k) {
      try {
        return field(k).empty() ? 0.0 : std::stod(field(k));
      } catch (const std::exception&) {
        throw DataError(where + "bad " + std::string(k) + " value '" + field(k) + "'");
      }
    };
    Sample<T> s;
    s.name = std::filesystem::path(field("clean")).stem().string();
    s.clean = read_ppm<T>(file("clean"));
    s.atmospheric_light = number("A");
    s.beta = number("beta");
    if (!field("transmission").empty()) s.transmission = read_pgm<T>(file("transmission"));
    if (!field("hazy").empty()) {
      s.hazy = read_ppm<T>(file("hazy"));
    } else {
      if (field("depth").empty() || !(s.atmospheric_light > 0))
        throw DataError(where + "row without hazy image needs depth, A and beta");
      SceneParams sp{s.atmospheric_light, s.beta, std::nullopt};
      auto pair = synthesize_hazy<T>(s.clean, sp, read_pgm<T>(file("depth")));
      s.hazy = pair.hazy;
      s.transmission = pair.transmission;
    }
    if (s.hazy.shape() != s.clean.shape())
      throw DataError(where + "hazy " + to_string(s.hazy.shape()) + " and clean " + to_string(s.clean.shape()) +
                      " differ in size");
    if (s.transmission && (s.transmission->h() != s.clean.h() || s.transmission->w() != s.clean.w()))
      throw DataError(where + "transmission map size differs from the image");
    data.push_back(std::move(s));
  }
  if (data.empty()) throw DataError(path + ": manifest lists no pairs");
  return data;
}

/// Write hazy/clean PPMs, transmission PGMs and manifest.csv into `dir`.
template <class T>
void write_dataset(const Dataset<T>& data, const std::string& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream m(std::filesystem::path(dir) / "manifest.csv");
  if (!m) throw DataError("cannot write manifest in " + dir);
  m << "hazy,clean,transmission,A,beta\n";
  for (const auto& s : data) {
    write_ppm(dir + "/" + s.name + "_hazy.ppm", s.hazy);
    write_ppm(dir + "/" + s.name + "_clean.ppm", s.clean);
    std::string tname;
    if (s.transmission) {
      tname = s.name + "_trans.pgm";
      write_pgm(dir + "/" + tname, *s.transmission);
    }
    m << s.name << "_hazy.ppm," << s.name << "_clean.ppm," << tname << "," << detail::format_double(s.atmospheric_light)
      << "," << detail::format_double(s.beta) << "\n";
  }
}

}  // namespace msbdn
