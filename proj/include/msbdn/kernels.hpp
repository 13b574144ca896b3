#pragma once

// Raw forward/backward kernels over plain tensors. The differentiable wrappers
// in autograd.hpp call into these; tests use them directly as well.

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "msbdn/tensor.hpp"

namespace msbdn::kernels {

inline constexpr double kLeakySlope = 0.2;

/// Geometry shared by a convolution and its transpose. `in_h/in_w` is the
/// high-resolution side (conv input, deconv output); `out_h/out_w` is the
/// side produced by the convolution.
struct ConvGeometry {
  std::size_t channels = 0;
  std::size_t in_h = 0, in_w = 0;
  std::size_t kernel = 0, stride = 1, pad = 0;
  std::size_t out_h = 0, out_w = 0;

  std::size_t rows() const { return channels * kernel * kernel; }
  std::size_t cols() const { return out_h * out_w; }
};

namespace detail {

/// Output columns [lo, hi) whose input column ow*stride + kw - pad is in range.
inline std::pair<std::size_t, std::size_t> valid_span(std::size_t out, std::size_t in, std::size_t stride,
                                                      std::size_t kw, std::size_t pad) {
  std::size_t lo = 0;
  while (lo < out && lo * stride + kw < pad) ++lo;
  std::size_t hi = lo;
  while (hi < out && hi * stride + kw < pad + in) ++hi;
  return {lo, hi};
}

}  // namespace detail

template <class T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
  const std::size_t k = g.kernel, P = g.cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    const T* xc = x + c * g.in_h * g.in_w;
    for (std::size_t kh = 0; kh < k; ++kh) {
      for (std::size_t kw = 0; kw < k; ++kw) {
        T* row = col + ((c * k + kh) * k + kw) * P;
        const auto [lo, hi] = detail::valid_span(g.out_w, g.in_w, g.stride, kw, g.pad);
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          T* dst = row + oh * g.out_w;
          const std::size_t ih = oh * g.stride + kh;
          if (ih < g.pad || ih >= g.pad + g.in_h) {
            std::fill_n(dst, g.out_w, T(0));
            continue;
          }
          const T* src = xc + (ih - g.pad) * g.in_w;
          std::fill_n(dst, lo, T(0));
          if (g.stride == 1)
            for (std::size_t ow = lo; ow < hi; ++ow) dst[ow] = src[ow + kw - g.pad];
          else
            for (std::size_t ow = lo; ow < hi; ++ow) dst[ow] = src[ow * g.stride + kw - g.pad];
          std::fill(dst + hi, dst + g.out_w, T(0));
        }
      }
    }
  }
}

/// Adjoint of im2col: scatter-adds columns back into x.
template <class T>
void col2im(const T* col, const ConvGeometry& g, T* x) {
  const std::size_t k = g.kernel, P = g.cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    T* xc = x + c * g.in_h * g.in_w;
    for (std::size_t kh = 0; kh < k; ++kh) {
      for (std::size_t kw = 0; kw < k; ++kw) {
        const T* row = col + ((c * k + kh) * k + kw) * P;
        const auto [lo, hi] = detail::valid_span(g.out_w, g.in_w, g.stride, kw, g.pad);
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const std::size_t ih = oh * g.stride + kh;
          if (ih < g.pad || ih >= g.pad + g.in_h) continue;
          const T* src = row + oh * g.out_w;
          T* dst = xc + (ih - g.pad) * g.in_w;
          if (g.stride == 1)
            for (std::size_t ow = lo; ow < hi; ++ow) dst[ow + kw - g.pad] += src[ow];
          else
            for (std::size_t ow = lo; ow < hi; ++ow) dst[ow * g.stride + kw - g.pad] += src[ow];
        }
      }
    }
  }
}

namespace detail {

template <class T>
inline void axpy(std::size_t n, T a, const T* __restrict x, T* __restrict y) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

/// Dot product with independent partial sums so the loop vectorises.
template <class T>
inline T dot(std::size_t n, const T* __restrict a, const T* __restrict b) {
  constexpr std::size_t lanes = 16;
  T acc[lanes] = {};
  std::size_t i = 0;
  for (; i + lanes <= n; i += lanes)
    for (std::size_t j = 0; j < lanes; ++j) acc[j] += a[i + j] * b[i + j];
  T s = 0;
  for (; i < n; ++i) s += a[i] * b[i];
  for (std::size_t j = 0; j < lanes; ++j) s += acc[j];
  return s;
}

}  // namespace detail

namespace detail {

/// C[M,N] += A * B[K,N] where A(m, k) = A[m * sm + k * sk]. A 4 x 32 block of
/// C is held in registers across the whole K loop.
template <class T>
void gemm_strided(std::size_t M, std::size_t N, std::size_t K, const T* A, std::size_t sm, std::size_t sk,
                  const T* B, T* C) {
  constexpr std::size_t MB = 4, NB = 32;
  std::size_t n0 = 0;
  for (; n0 + NB <= N; n0 += NB) {
    std::size_t m0 = 0;
    for (; m0 + MB <= M; m0 += MB) {
      T acc[MB][NB];
      for (std::size_t i = 0; i < MB; ++i)
        for (std::size_t j = 0; j < NB; ++j) acc[i][j] = C[(m0 + i) * N + n0 + j];
      for (std::size_t k = 0; k < K; ++k) {
        const T* b = B + k * N + n0;
        for (std::size_t i = 0; i < MB; ++i) {
          const T a = A[(m0 + i) * sm + k * sk];
          for (std::size_t j = 0; j < NB; ++j) acc[i][j] += a * b[j];
        }
      }
      for (std::size_t i = 0; i < MB; ++i)
        for (std::size_t j = 0; j < NB; ++j) C[(m0 + i) * N + n0 + j] = acc[i][j];
    }
    for (; m0 < M; ++m0) {
      T acc[NB];
      for (std::size_t j = 0; j < NB; ++j) acc[j] = C[m0 * N + n0 + j];
      for (std::size_t k = 0; k < K; ++k) {
        const T a = A[m0 * sm + k * sk];
        const T* b = B + k * N + n0;
        for (std::size_t j = 0; j < NB; ++j) acc[j] += a * b[j];
      }
      for (std::size_t j = 0; j < NB; ++j) C[m0 * N + n0 + j] = acc[j];
    }
  }
  if (n0 < N) {
    const std::size_t nb = N - n0;
    for (std::size_t m = 0; m < M; ++m)
      for (std::size_t k = 0; k < K; ++k) axpy(nb, A[m * sm + k * sk], B + k * N + n0, C + m * N + n0);
  }
}

}  // namespace detail

/// C[M,N] += A[M,K] * B[K,N]
template <class T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  detail::gemm_strided(M, N, K, A, K, 1, B, C);
}

/// C[M,N] += A[K,M]^T * B[K,N]
template <class T>
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  detail::gemm_strided(M, N, K, A, 1, M, B, C);
}

/// C[M,K] += A[M,N] * B[K,N]^T
template <class T>
void gemm_nt(std::size_t M, std::size_t K, std::size_t N, const T* A, const T* B, T* C) {
  for (std::size_t k = 0; k < K; ++k) {
    const T* brow = B + k * N;
    for (std::size_t m = 0; m < M; ++m) C[m * K + k] += detail::dot(N, A + m * N, brow);
  }
}

inline std::size_t conv_out_size(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  if (in + 2 * pad < k) return 0;
  return (in + 2 * pad - k) / stride + 1;
}

inline std::size_t deconv_out_size(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad,
                                   std::size_t out_pad) {
  const std::size_t full = (in - 1) * stride + k + out_pad;
  return full < 2 * pad ? 0 : full - 2 * pad;
}

inline void check_conv_args(const Shape& x, const Shape& w, const Shape& b, std::size_t stride,
                            std::size_t in_channels, std::size_t out_channels, const char* op) {
  auto fail = [&](const std::string& why) {
    throw std::invalid_argument(std::string(op) + ": " + why + "; input " + to_string(x) + ", weight " +
                                to_string(w) + ", bias " + to_string(b));
  };
  if (stride != 1 && stride != 2) fail("stride must be 1 or 2");
  if (w.h != w.w || w.h == 0) fail("kernel must be square and non-empty");
  if (x.c != in_channels) fail("input channels do not match weight");
  if (b.numel() != 0 && (b.n != 1 || b.c != out_channels || b.h != 1 || b.w != 1))
    fail("bias must be (1, C_out, 1, 1)");
}

/// Cross-correlation. weight (C_out, C_in, k, k), bias (1, C_out, 1, 1) or empty.
template <class T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::size_t stride,
                         std::size_t pad) {
  check_conv_args(x.shape(), w.shape(), b.shape(), stride, w.c(), w.n(), "conv2d");
  const ConvGeometry g{x.c(), x.h(), x.w(), w.h(), stride, pad, conv_out_size(x.h(), w.h(), stride, pad),
                       conv_out_size(x.w(), w.h(), stride, pad)};
  if (g.out_h == 0 || g.out_w == 0)
    throw std::invalid_argument("conv2d: empty output for input " + to_string(x.shape()) + ", weight " +
                                to_string(w.shape()));
  const std::size_t cout = w.n();
  Tensor<T> y(Shape{x.n(), cout, g.out_h, g.out_w});
  std::vector<T> col(g.rows() * g.cols());
  for (std::size_t n = 0; n < x.n(); ++n) {
    im2col(x.sample(n), g, col.data());
    T* yn = y.sample(n);
    if (!b.empty())
      for (std::size_t co = 0; co < cout; ++co) std::fill_n(yn + co * g.cols(), g.cols(), b[co]);
    gemm_nn(cout, g.cols(), g.rows(), w.data(), col.data(), yn);
  }
  return y;
}

/// Gradients of conv2d_forward. Null outputs are skipped; non-null ones are
/// accumulated into (they must already have the matching shape).
template <class T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& gy, std::size_t stride,
                     std::size_t pad, Tensor<T>* gx, Tensor<T>* gw, Tensor<T>* gb) {
  const ConvGeometry g{x.c(), x.h(), x.w(), w.h(), stride, pad, gy.h(), gy.w()};
  const std::size_t cout = w.n();
  std::vector<T> col(g.rows() * g.cols());
  for (std::size_t n = 0; n < x.n(); ++n) {
    const T* gyn = gy.sample(n);
    if (gb)
      for (std::size_t co = 0; co < cout; ++co) {
        T s = 0;
        const T* p = gyn + co * g.cols();
        for (std::size_t i = 0; i < g.cols(); ++i) s += p[i];
        (*gb)[co] += s;
      }
    if (gw) {
      im2col(x.sample(n), g, col.data());
      gemm_nt(cout, g.rows(), g.cols(), gyn, col.data(), gw->data());
    }
    if (gx) {
      std::fill(col.begin(), col.end(), T(0));
      gemm_tn(g.rows(), g.cols(), cout, w.data(), gyn, col.data());
      col2im(col.data(), g, gx->sample(n));
    }
  }
}

/// Transposed convolution, the adjoint of conv2d_forward with the same weight.
/// weight (C_in, C_out, k, k) in the deconv's own in/out sense.
template <class T>
Tensor<T> deconv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::size_t stride,
                           std::size_t pad, std::size_t out_pad) {
  check_conv_args(x.shape(), w.shape(), b.shape(), stride, w.n(), w.c(), "deconv2d");
  if (out_pad >= stride)
    throw std::invalid_argument("deconv2d: output_padding must be smaller than stride; input " +
                                to_string(x.shape()) + ", weight " + to_string(w.shape()));
  const std::size_t k = w.h(), cout = w.c();
  const ConvGeometry g{cout, deconv_out_size(x.h(), k, stride, pad, out_pad),
                       deconv_out_size(x.w(), k, stride, pad, out_pad), k, stride, pad, x.h(), x.w()};
  if (g.in_h == 0 || g.in_w == 0)
    throw std::invalid_argument("deconv2d: empty output for input " + to_string(x.shape()) + ", weight " +
                                to_string(w.shape()));
  Tensor<T> y(Shape{x.n(), cout, g.in_h, g.in_w});
  std::vector<T> col(g.rows() * g.cols());
  for (std::size_t n = 0; n < x.n(); ++n) {
    std::fill(col.begin(), col.end(), T(0));
    gemm_tn(g.rows(), g.cols(), x.c(), w.data(), x.sample(n), col.data());
    T* yn = y.sample(n);
    col2im(col.data(), g, yn);
    if (!b.empty())
      for (std::size_t co = 0; co < cout; ++co) {
        T* p = yn + co * g.in_h * g.in_w;
        for (std::size_t i = 0; i < g.in_h * g.in_w; ++i) p[i] += b[co];
      }
  }
  return y;
}

template <class T>
void deconv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& gy, std::size_t stride,
                       std::size_t pad, Tensor<T>* gx, Tensor<T>* gw, Tensor<T>* gb) {
  const std::size_t k = w.h(), cout = w.c(), cin = w.n();
  const ConvGeometry g{cout, gy.h(), gy.w(), k, stride, pad, x.h(), x.w()};
  std::vector<T> col(g.rows() * g.cols());
  const std::size_t plane = gy.h() * gy.w();
  for (std::size_t n = 0; n < x.n(); ++n) {
    const T* gyn = gy.sample(n);
    if (gb)
      for (std::size_t co = 0; co < cout; ++co) {
        T s = 0;
        const T* p = gyn + co * plane;
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
        (*gb)[co] += s;
      }
    if (!gx && !gw) continue;
    im2col(gyn, g, col.data());
    if (gx) gemm_nn(cin, g.cols(), g.rows(), w.data(), col.data(), gx->sample(n));
    if (gw) gemm_nt(cin, g.rows(), g.cols(), x.sample(n), col.data(), gw->data());
  }
}

template <class T>
Tensor<T> lrelu_forward(const Tensor<T>& x, T slope = T(kLeakySlope)) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] >= T(0) ? x[i] : slope * x[i];
  return y;
}

/// Slope 1 is used at x == 0.
template <class T>
void lrelu_backward(const Tensor<T>& x, const Tensor<T>& gy, Tensor<T>& gx, T slope = T(kLeakySlope)) {
  for (std::size_t i = 0; i < x.size(); ++i) gx[i] += x[i] >= T(0) ? gy[i] : slope * gy[i];
}

/// 2x2 average pooling (H, W must be even).
template <class T>
Tensor<T> avg_pool2(const Tensor<T>& x) {
  if (x.h() % 2 || x.w() % 2) throw std::invalid_argument("avg_pool2: odd spatial size " + to_string(x.shape()));
  Tensor<T> y(Shape{x.n(), x.c(), x.h() / 2, x.w() / 2});
  for (std::size_t n = 0; n < x.n(); ++n)
    for (std::size_t c = 0; c < x.c(); ++c)
      for (std::size_t i = 0; i < y.h(); ++i)
        for (std::size_t j = 0; j < y.w(); ++j)
          y.at(n, c, i, j) = (x.at(n, c, 2 * i, 2 * j) + x.at(n, c, 2 * i, 2 * j + 1) + x.at(n, c, 2 * i + 1, 2 * j) +
                              x.at(n, c, 2 * i + 1, 2 * j + 1)) *
                             T(0.25);
  return y;
}

/// 2x nearest-neighbour upsampling.
template <class T>
Tensor<T> upsample_nearest2(const Tensor<T>& x) {
  Tensor<T> y(Shape{x.n(), x.c(), x.h() * 2, x.w() * 2});
  for (std::size_t n = 0; n < x.n(); ++n)
    for (std::size_t c = 0; c < x.c(); ++c)
      for (std::size_t i = 0; i < y.h(); ++i)
        for (std::size_t j = 0; j < y.w(); ++j) y.at(n, c, i, j) = x.at(n, c, i / 2, j / 2);
  return y;
}

}  // namespace msbdn::kernels
