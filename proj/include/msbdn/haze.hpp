#pragma once

// Atmospheric scattering I = T*J + (1 - T)*A, the portion-of-haze measure,
// image-space SOS boosting, and classical iterative back-projection.

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "msbdn/kernels.hpp"
#include "msbdn/rng.hpp"
#include "msbdn/tensor.hpp"

namespace msbdn {

/// Either a scattering coefficient (transmission from depth) or an explicit
/// transmission map.
struct SceneParams {
  double atmospheric_light = 0.8;
  std::optional<double> beta;
  std::optional<Tensor<double>> transmission;
};

template <class T>
struct ImagePair {
  Tensor<T> hazy;
  Tensor<T> clean;
  std::optional<Tensor<T>> depth;
  std::optional<Tensor<T>> transmission;
};

template <class T>
struct BoostState {
  Tensor<T> estimate;
  int iteration = 0;
};

/// Sampling ranges for synthetic scenes and haze parameters.
struct SceneRanges {
  double A_min = 0.7, A_max = 1.0;
  double beta_min = 0.4, beta_max = 1.6;
  double depth_min = 0.1, depth_max = 1.0;

  void validate() const {
    if (!(A_min > 0 && A_min <= A_max && A_max <= 1)) throw std::invalid_argument("A range must satisfy 0 < A_min <= A_max <= 1");
    if (!(beta_min >= 0 && beta_min <= beta_max)) throw std::invalid_argument("beta range must satisfy 0 <= beta_min <= beta_max");
    if (!(depth_min >= 0 && depth_min <= depth_max)) throw std::invalid_argument("depth range must satisfy 0 <= depth_min <= depth_max");
  }
};

/// T = exp(-beta * d).
template <class T>
Tensor<T> transmission_from_depth(const Tensor<T>& depth, double beta) {
  if (beta < 0) throw std::invalid_argument("beta must be non-negative");
  Tensor<T> t(depth.shape());
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(std::exp(-beta * double(depth[i])));
  return t;
}

namespace detail {

/// Index into a single-channel map broadcast across the channels of `like`.
template <class T>
inline std::size_t broadcast_index(const Tensor<T>& map, const Shape& like, std::size_t n, std::size_t c,
                                   std::size_t h, std::size_t w) {
  return map.offset(map.n() == 1 ? 0 : n, map.c() == 1 ? 0 : c, h, w);
}

template <class T>
void check_map_shape(const Tensor<T>& map, const Shape& like, const char* what) {
  const Shape s = map.shape();
  if (s.h != like.h || s.w != like.w || (s.c != 1 && s.c != like.c) || (s.n != 1 && s.n != like.n))
    throw std::invalid_argument(std::string(what) + ": map " + to_string(s) + " cannot broadcast to " +
                                to_string(like));
}

template <class T, class Fn>
void for_each_broadcast(const Tensor<T>& img, const Tensor<T>& map, Fn&& fn) {
  const Shape s = img.shape();
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t h = 0; h < s.h; ++h)
        for (std::size_t w = 0; w < s.w; ++w) fn(img.offset(n, c, h, w), broadcast_index(map, s, n, c, h, w));
}

}  // namespace detail

/// Hazy image from a clean one. `transmission` may be one channel (broadcast)
/// or match the image. Output is clamped to [0, 1].
template <class T>
Tensor<T> apply_scattering(const Tensor<T>& clean, const Tensor<T>& transmission, double A) {
  detail::check_map_shape(transmission, clean.shape(), "apply_scattering");
  Tensor<T> hazy(clean.shape());
  detail::for_each_broadcast(clean, transmission, [&](std::size_t i, std::size_t m) {
    const double t = transmission[m];
    hazy[i] = static_cast<T>(std::clamp(t * double(clean[i]) + (1.0 - t) * A, 0.0, 1.0));
  });
  return hazy;
}

/// J = (I - (1 - T) A) / T; no clamping.
template <class T>
Tensor<T> recover_clean(const Tensor<T>& hazy, const Tensor<T>& transmission, double A) {
  detail::check_map_shape(transmission, hazy.shape(), "recover_clean");
  Tensor<T> clean(hazy.shape());
  detail::for_each_broadcast(hazy, transmission, [&](std::size_t i, std::size_t m) {
    const double t = transmission[m];
    clean[i] = static_cast<T>((double(hazy[i]) - (1.0 - t) * A) / t);
  });
  return clean;
}

template <class T>
ImagePair<T> synthesize_hazy(const Tensor<T>& clean, const SceneParams& params,
                             const std::optional<Tensor<T>>& depth = std::nullopt) {
  if (!(params.atmospheric_light > 0)) throw std::invalid_argument("atmospheric light must be positive");
  ImagePair<T> pair;
  pair.clean = clean;
  if (params.transmission) {
    pair.transmission = params.transmission->template cast<T>();
  } else {
    if (!params.beta) throw std::invalid_argument("synthesize_hazy: need a transmission map or beta");
    if (!depth) throw std::invalid_argument("synthesize_hazy: beta given but no depth map");
    pair.depth = *depth;
    pair.transmission = transmission_from_depth(*depth, *params.beta);
  }
  for (auto v : pair.transmission->values())
    if (!(v > T(0) && v <= T(1)))
      throw std::invalid_argument("synthesize_hazy: transmission must lie in (0, 1], found " + std::to_string(double(v)));
  pair.hazy = apply_scattering(clean, *pair.transmission, params.atmospheric_light);
  return pair;
}

inline constexpr double kPohClearFloor = 1e-3;

/// Mean over pixels of (1 - T) A / J, with J floored at 1e-3.
template <class T>
double poh(const Tensor<T>& clean, const Tensor<T>& transmission, double A) {
  detail::check_map_shape(transmission, clean.shape(), "poh");
  double sum = 0;
  detail::for_each_broadcast(clean, transmission, [&](std::size_t i, std::size_t m) {
    sum += (1.0 - double(transmission[m])) * A / std::max(double(clean[i]), kPohClearFloor);
  });
  return sum / double(clean.size());
}

/// Per-element transmission tau that explains `image` as tau*J + (1 - tau)*A
/// for the known clean radiance J. Requires J != A.
template <class T>
Tensor<T> effective_transmission(const Tensor<T>& image, const Tensor<T>& clean, double A) {
  require_same_shape(image.shape(), clean.shape(), "effective_transmission");
  Tensor<T> tau(image.shape());
  for (std::size_t i = 0; i < tau.size(); ++i) {
    const double denom = double(clean[i]) - A;
    if (std::abs(denom) < 1e-9)
      throw std::invalid_argument("effective_transmission: clean value equals atmospheric light");
    tau[i] = static_cast<T>((double(image[i]) - A) / denom);
  }
  return tau;
}

template <class T>
using Dehazer = std::function<Tensor<T>(const Tensor<T>&)>;

/// SOS boosting in image space: J^0 = g(I), J^{n+1} = g(I + J^n) - J^n.
/// The strengthened input is passed to g unclamped. Returns iterations + 1
/// states (n = 0 .. iterations).
template <class T>
std::vector<BoostState<T>> sos_boost_images(const Tensor<T>& hazy, const Dehazer<T>& g, int iterations) {
  if (iterations < 1) throw std::invalid_argument("sos_boost_images: iterations must be >= 1");
  std::vector<BoostState<T>> states;
  states.push_back({g(hazy), 0});
  for (int n = 0; n < iterations; ++n) {
    const auto& prev = states.back().estimate;
    auto next = g(hazy + prev) - prev;
    states.push_back({std::move(next), n + 1});
  }
  return states;
}

/// Dehazer that knows the true T and A and removes fraction `gamma` of the
/// optical depth: g(X) = (X - (1 - T^gamma) A) / T^gamma. Applied to a hazy
/// image with transmission T it yields transmission T^(1 - gamma).
template <class T>
Dehazer<T> ideal_dehazer(const Tensor<T>& transmission, double A, double gamma) {
  if (!(gamma >= 0 && gamma <= 1)) throw std::invalid_argument("ideal_dehazer: gamma must lie in [0, 1]");
  Tensor<T> partial(transmission.shape());
  for (std::size_t i = 0; i < partial.size(); ++i)
    partial[i] = static_cast<T>(std::pow(double(transmission[i]), gamma));
  return [partial = std::move(partial), A](const Tensor<T>& x) { return recover_clean(x, partial, A); };
}

/// PoH of every boosting iterate, measured through its effective transmission.
template <class T>
std::vector<double> poh_sequence(const std::vector<BoostState<T>>& states, const Tensor<T>& clean, double A) {
  std::vector<double> out;
  out.reserve(states.size());
  for (const auto& s : states) out.push_back(poh(clean, effective_transmission(s.estimate, clean, A), A));
  return out;
}

template <class T>
struct BackProjectionResult {
  Tensor<T> estimate;
  std::vector<double> residual_norms;  // ||f(H_t) - L||_2 for t = 0 .. iterations
};

/// H_0 = h(L); H_{t+1} = H_t + h(L - f(H_t)). The correction is oriented so the
/// residual does not grow (the textbook sign).
template <class T>
BackProjectionResult<T> iterative_back_projection(const Tensor<T>& observed, int iterations,
                                                  const std::function<Tensor<T>(const Tensor<T>&)>& down = kernels::avg_pool2<T>,
                                                  const std::function<Tensor<T>(const Tensor<T>&)>& up = kernels::upsample_nearest2<T>) {
  if (iterations < 0) throw std::invalid_argument("iterative_back_projection: iterations must be >= 0");
  BackProjectionResult<T> r;
  r.estimate = up(observed);
  for (int t = 0;; ++t) {
    auto residual = observed - down(r.estimate);
    r.residual_norms.push_back(l2_norm(residual));
    if (t == iterations) break;
    r.estimate += up(residual);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Synthetic scenes

template <class T>
struct SyntheticScene {
  Tensor<T> clean;          // (1, 3, H, W)
  Tensor<T> depth;          // (1, 1, H, W)
  Tensor<T> transmission;   // (1, 1, H, W)
  Tensor<T> hazy;           // (1, 3, H, W)
  double atmospheric_light = 0;
  double beta = 0;
};

/// Procedural clean image: smooth colour gradient, a few flat rectangles and
/// discs, and a sinusoidal texture, mapped into [lo, hi].
template <class T>
Tensor<T> random_clean_image(Rng& rng, std::size_t h, std::size_t w, double lo = 0.05, double hi = 0.95) {
  Tensor<double> img(Shape{1, 3, h, w});
  double base[3], gx[3], gy[3];
  for (int c = 0; c < 3; ++c) {
    base[c] = rng.uniform(0.2, 0.8);
    gx[c] = rng.uniform(-0.3, 0.3);
    gy[c] = rng.uniform(-0.3, 0.3);
  }
  const double fx = rng.uniform(1.0, 4.0) * 2 * 3.141592653589793 / double(w);
  const double fy = rng.uniform(1.0, 4.0) * 2 * 3.141592653589793 / double(h);
  const double tex = rng.uniform(0.03, 0.12);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double u = double(x) / double(w) - 0.5, v = double(y) / double(h) - 0.5;
        img.at(0, c, y, x) = base[c] + gx[c] * u + gy[c] * v + tex * std::sin(fx * double(x) + c) * std::cos(fy * double(y));
      }
  const int shapes = 3 + static_cast<int>(rng.below(4));
  for (int s = 0; s < shapes; ++s) {
    double col[3];
    for (auto& v : col) v = rng.uniform(0.0, 1.0);
    const double cx = rng.uniform(0, double(w)), cy = rng.uniform(0, double(h));
    const double rx = rng.uniform(0.08, 0.3) * double(w), ry = rng.uniform(0.08, 0.3) * double(h);
    const bool disc = rng.coin();
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double dx = (double(x) - cx) / rx, dy = (double(y) - cy) / ry;
        const bool inside = disc ? dx * dx + dy * dy <= 1.0 : std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0;
        if (inside)
          for (std::size_t c = 0; c < 3; ++c) img.at(0, c, y, x) = col[c];
      }
  }
  for (auto& v : img.values()) v = lo + (hi - lo) * std::clamp(v, 0.0, 1.0);
  return img.cast<T>();
}

/// Smooth depth: a tilted plane (farther toward the top) plus a few bumps,
/// rescaled into [dmin, dmax].
template <class T>
Tensor<T> random_depth_map(Rng& rng, std::size_t h, std::size_t w, double dmin, double dmax) {
  Tensor<double> d(Shape{1, 1, h, w});
  const double tilt_y = rng.uniform(0.5, 1.0), tilt_x = rng.uniform(-0.3, 0.3);
  struct Bump { double cx, cy, r, a; };
  std::vector<Bump> bumps(2 + rng.below(3));
  for (auto& b : bumps) b = {rng.uniform(0, double(w)), rng.uniform(0, double(h)), rng.uniform(0.1, 0.4) * double(std::max(h, w)), rng.uniform(-0.4, 0.4)};
  double lo = 1e300, hi = -1e300;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double v = tilt_y * (1.0 - double(y) / double(std::max<std::size_t>(h - 1, 1))) + tilt_x * double(x) / double(w);
      for (const auto& b : bumps) {
        const double dx = double(x) - b.cx, dy = double(y) - b.cy;
        v += b.a * std::exp(-(dx * dx + dy * dy) / (2 * b.r * b.r));
      }
      d.at(0, 0, y, x) = v;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  const double span = hi > lo ? hi - lo : 1.0;
  for (auto& v : d.values()) v = dmin + (dmax - dmin) * (v - lo) / span;
  return d.cast<T>();
}

/// A complete synthetic hazy scene. With `dark_clean` the clean radiance is
/// kept at least 0.1 below A so the effective transmission of any image of
/// the scene is well defined.
template <class T>
SyntheticScene<T> random_scene(Rng& rng, std::size_t h, std::size_t w, const SceneRanges& ranges = {},
                               bool dark_clean = false) {
  ranges.validate();
  SyntheticScene<T> s;
  s.atmospheric_light = rng.uniform(ranges.A_min, ranges.A_max);
  s.beta = rng.uniform(ranges.beta_min, ranges.beta_max);
  const double hi = dark_clean ? std::max(0.06, s.atmospheric_light - 0.1) : 0.95;
  s.clean = random_clean_image<T>(rng, h, w, 0.05, hi);
  s.depth = random_depth_map<T>(rng, h, w, ranges.depth_min, ranges.depth_max);
  s.transmission = transmission_from_depth(s.depth, s.beta);
  s.hazy = apply_scattering(s.clean, s.transmission, s.atmospheric_light);
  return s;
}

}  // namespace msbdn
