#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "msbdn/autograd.hpp"
#include "msbdn/parameters.hpp"
#include "msbdn/tensor.hpp"

namespace msbdn {

/// Reported value for identical images (MSE = 0); also the upper cap.
inline constexpr double kPsnrCap = 99.0;

struct ImageScore {
  std::string name;
  double psnr_db = 0;
  double ssim = 0;
};

struct MetricReport {
  double psnr_db = 0;
  double ssim = 0;
  std::vector<ImageScore> images;
};

template <class T>
double mse(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mse");
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = double(a[i]) - double(b[i]);
    s += d * d;
  }
  return s / double(a.size());
}

inline double psnr_from_mse(double m, double peak = 1.0) {
  if (m <= 0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / m));
}

/// PSNR on raw values.
template <class T>
double psnr(const Tensor<T>& a, const Tensor<T>& b, double peak = 1.0) {
  return psnr_from_mse(mse(a, b), peak);
}

/// Round-trip through 8 bits (clamp to [0,1], round to k/255) as saved images would.
template <class T>
Tensor<T> quantize8(const Tensor<T>& a) {
  Tensor<T> q(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i)
    q[i] = static_cast<T>(std::round(std::clamp(double(a[i]), 0.0, 1.0) * 255.0) / 255.0);
  return q;
}

/// PSNR after 8-bit quantisation of both inputs.
template <class T>
double psnr_quantized(const Tensor<T>& a, const Tensor<T>& b) {
  return psnr(quantize8(a), quantize8(b));
}

namespace detail {

inline std::vector<double> gaussian_window(int size = 11, double sigma = 1.5) {
  std::vector<double> g(static_cast<std::size_t>(size));
  double s = 0;
  for (int i = 0; i < size; ++i) {
    const double x = i - (size - 1) / 2.0;
    g[static_cast<std::size_t>(i)] = std::exp(-x * x / (2 * sigma * sigma));
    s += g[static_cast<std::size_t>(i)];
  }
  for (auto& v : g) v /= s;
  return g;
}

/// Separable 'valid' filtering of one plane.
inline std::vector<double> filter_valid(const std::vector<double>& src, std::size_t h, std::size_t w,
                                        const std::vector<double>& g) {
  const std::size_t k = g.size(), oh = h - k + 1, ow = w - k + 1;
  std::vector<double> tmp(h * ow), out(oh * ow);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double s = 0;
      for (std::size_t i = 0; i < k; ++i) s += g[i] * src[y * w + x + i];
      tmp[y * ow + x] = s;
    }
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double s = 0;
      for (std::size_t i = 0; i < k; ++i) s += g[i] * tmp[(y + i) * ow + x];
      out[y * ow + x] = s;
    }
  return out;
}

}  // namespace detail

inline constexpr double kSsimK1 = 0.01, kSsimK2 = 0.03;

/// Mean SSIM over valid 11x11 Gaussian (sigma 1.5) windows, dynamic range 1.
/// Channels are scored separately and averaged, as are batch samples.
template <class T>
double ssim(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "ssim");
  constexpr int kWindow = 11;
  if (a.h() < kWindow || a.w() < kWindow)
    throw std::invalid_argument("ssim: images must be at least 11x11, got " + to_string(a.shape()));
  const auto g = detail::gaussian_window(kWindow, 1.5);
  const double c1 = kSsimK1 * kSsimK1, c2 = kSsimK2 * kSsimK2;
  const std::size_t h = a.h(), w = a.w(), plane = h * w;
  double total = 0;
  std::vector<double> x(plane), y(plane), xx(plane), yy(plane), xy(plane);
  for (std::size_t n = 0; n < a.n(); ++n)
    for (std::size_t c = 0; c < a.c(); ++c) {
      const T* pa = a.plane(n, c);
      const T* pb = b.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) {
        x[i] = pa[i];
        y[i] = pb[i];
        xx[i] = x[i] * x[i];
        yy[i] = y[i] * y[i];
        xy[i] = x[i] * y[i];
      }
      const auto mx = detail::filter_valid(x, h, w, g), my = detail::filter_valid(y, h, w, g);
      const auto sxx = detail::filter_valid(xx, h, w, g), syy = detail::filter_valid(yy, h, w, g);
      const auto sxy = detail::filter_valid(xy, h, w, g);
      double s = 0;
      for (std::size_t i = 0; i < mx.size(); ++i) {
        const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cov = sxy[i] - mx[i] * my[i];
        s += ((2 * mx[i] * my[i] + c1) * (2 * cov + c2)) / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
      }
      total += s / double(mx.size());
    }
  return total / double(a.n() * a.c());
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking

struct GradCheckReport {
  double max_rel_error = 0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0, numeric = 0;
  std::size_t checked = 0;
  bool finite = true;
  std::string nonfinite_at;  // "<param>[index]" when a non-finite value was seen
};

inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

/// Compare gradients in `store` against central differences.
///   value_fn()  returns the scalar objective at the store's current values;
///   grad_fn()   fills the store's grad buffers (called once, after zeroing).
/// Every scalar of every entry is perturbed by +-eps in turn.
template <class T>
GradCheckReport grad_check(ParameterStore<T>& store, const std::function<double()>& value_fn,
                           const std::function<void()>& grad_fn, double eps) {
  if (!(eps > 0)) throw std::invalid_argument("grad_check: eps must be positive");
  store.zero_grad();
  grad_fn();
  GradCheckReport report;
  for (auto& e : store) {
    for (std::size_t i = 0; i < e.value.size(); ++i) {
      const T saved = e.value[i];
      e.value[i] = static_cast<T>(double(saved) + eps);
      const double up = value_fn();
      e.value[i] = static_cast<T>(double(saved) - eps);
      const double down = value_fn();
      e.value[i] = saved;
      const double analytic = e.grad[i];
      const double numeric = (up - down) / (2 * eps);
      ++report.checked;
      if (!std::isfinite(up) || !std::isfinite(down) || !std::isfinite(analytic)) {
        if (report.finite) report.nonfinite_at = e.name + "[" + std::to_string(i) + "]";
        report.finite = false;
        continue;
      }
      const double err = relative_error(analytic, numeric);
      if (err > report.max_rel_error || report.worst_param.empty()) {
        report.max_rel_error = err;
        report.worst_param = e.name;
        report.worst_index = i;
        report.analytic = analytic;
        report.numeric = numeric;
      }
    }
  }
  return report;
}

/// Convenience form: `loss_fn` builds the graph from the store and returns a
/// single-element loss.
template <class T>
GradCheckReport grad_check(ParameterStore<T>& store, const std::function<Var<T>()>& loss_fn, double eps) {
  return grad_check<T>(
      store, [&] { return double(loss_fn().value()[0]); }, [&] { backward(loss_fn()); }, eps);
}

}  // namespace msbdn
