#pragma once

// Independent oracles and shared gradient-check cases for the test binaries.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "msbdn/msbdn.hpp"

namespace msbdn::testing {

template <class T>
Tensor<T> random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(s);
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

/// Direct cross-correlation, one output value at a time.
template <class T>
Tensor<T> naive_conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::size_t s, std::size_t p) {
  const std::size_t k = w.h();
  const std::size_t oh = (x.h() + 2 * p - k) / s + 1, ow = (x.w() + 2 * p - k) / s + 1;
  Tensor<T> y(Shape{x.n(), w.n(), oh, ow});
  for (std::size_t n = 0; n < x.n(); ++n)
    for (std::size_t co = 0; co < w.n(); ++co)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          double acc = b.empty() ? 0.0 : double(b[co]);
          for (std::size_t ci = 0; ci < x.c(); ++ci)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                const long iy = long(oy * s + ky) - long(p), ix = long(ox * s + kx) - long(p);
                if (iy < 0 || ix < 0 || iy >= long(x.h()) || ix >= long(x.w())) continue;
                acc += double(w.at(co, ci, ky, kx)) * double(x.at(n, ci, std::size_t(iy), std::size_t(ix)));
              }
          y.at(n, co, oy, ox) = static_cast<T>(acc);
        }
  return y;
}

/// Transposed convolution by scattering each input value through the kernel.
/// weight (C_in, C_out, k, k).
template <class T>
Tensor<T> naive_deconv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::size_t s, std::size_t p,
                         std::size_t op) {
  const std::size_t k = w.h();
  const std::size_t oh = (x.h() - 1) * s + k - 2 * p + op, ow = (x.w() - 1) * s + k - 2 * p + op;
  Tensor<double> acc(Shape{x.n(), w.c(), oh, ow});
  for (std::size_t n = 0; n < x.n(); ++n)
    for (std::size_t ci = 0; ci < x.c(); ++ci)
      for (std::size_t iy = 0; iy < x.h(); ++iy)
        for (std::size_t ix = 0; ix < x.w(); ++ix)
          for (std::size_t co = 0; co < w.c(); ++co)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                const long oy = long(iy * s + ky) - long(p), ox = long(ix * s + kx) - long(p);
                if (oy < 0 || ox < 0 || oy >= long(oh) || ox >= long(ow)) continue;
                acc.at(n, co, std::size_t(oy), std::size_t(ox)) +=
                    double(x.at(n, ci, iy, ix)) * double(w.at(ci, co, ky, kx));
              }
  Tensor<T> y(acc.shape());
  for (std::size_t n = 0; n < y.n(); ++n)
    for (std::size_t c = 0; c < y.c(); ++c)
      for (std::size_t i = 0; i < y.h() * y.w(); ++i)
        y.plane(n, c)[i] = static_cast<T>(acc.plane(n, c)[i] + (b.empty() ? 0.0 : double(b[c])));
  return y;
}

inline double naive_lrelu(double x) { return x >= 0 ? x : 0.2 * x; }

// ---------------------------------------------------------------------------
// Gradient-check cases

struct GradCase {
  std::string name;
  GradCheckReport report;
};

/// Random values in [-1, -0.05] U [0.05, 1] so no LReLU kink sits within eps.
inline Tensor<double> away_from_zero(Shape s, Rng& rng) {
  Tensor<double> t(s);
  for (auto& v : t.values()) v = (rng.coin() ? 1.0 : -1.0) * rng.uniform(0.05, 1.0);
  return t;
}

/// Finite-difference checks of every primitive op on small float64 tensors
/// (eps 1e-3). Each op output is reduced with a fixed random cotangent.
inline std::vector<GradCase> primitive_grad_cases(std::uint64_t seed = 11, double eps = 1e-3) {
  using T = double;
  Rng rng(seed);
  std::vector<GradCase> out;
  auto run = [&](const std::string& name, ParameterStore<T>& store, const std::function<Var<T>()>& f) {
    const Shape s = f().shape();
    auto cot = random_tensor<T>(s, rng);
    out.push_back({name, grad_check<T>(store, [&] { return ops::weighted_sum(f(), cot); }, eps)});
  };
  auto add = [&](ParameterStore<T>& st, const std::string& n, ParamKind kind, Tensor<T> v) {
    st.add(n, kind, v.shape()).value = std::move(v);
  };

  struct ConvCase {
    const char* name;
    Shape x, w;
    std::size_t stride, pad;
  };
  for (const auto& c : {ConvCase{"conv2d 3x3 s1 p1", {2, 3, 6, 6}, {4, 3, 3, 3}, 1, 1},
                        ConvCase{"conv2d 3x3 s2 p1", {2, 4, 6, 6}, {3, 4, 3, 3}, 2, 1},
                        ConvCase{"conv2d 1x1 s1 p0", {1, 4, 5, 6}, {2, 4, 1, 1}, 1, 0},
                        ConvCase{"conv2d 5x5 s1 p2", {1, 2, 6, 6}, {2, 2, 5, 5}, 1, 2}}) {
    ParameterStore<T> st;
    add(st, "x", ParamKind::conv_weight, random_tensor<T>(c.x, rng));
    add(st, "w", ParamKind::conv_weight, random_tensor<T>(c.w, rng));
    add(st, "b", ParamKind::bias, random_tensor<T>(Shape{1, c.w.n, 1, 1}, rng));
    run(c.name, st, [&] { return ops::conv2d(st.var("x"), st.var("w"), st.var("b"), c.stride, c.pad); });
  }
  for (std::size_t stride : {1, 2}) {
    ParameterStore<T> st;
    add(st, "x", ParamKind::conv_weight, random_tensor<T>(Shape{2, 4, 3, 3}, rng));
    add(st, "w", ParamKind::deconv_weight, random_tensor<T>(Shape{4, 2, 3, 3}, rng));
    add(st, "b", ParamKind::bias, random_tensor<T>(Shape{1, 2, 1, 1}, rng));
    const std::size_t op = stride - 1;
    run("deconv2d 3x3 s" + std::to_string(stride), st,
        [&] { return ops::deconv2d(st.var("x"), st.var("w"), st.var("b"), stride, 1, op); });
  }
  {
    ParameterStore<T> st;
    add(st, "x", ParamKind::conv_weight, away_from_zero(Shape{2, 4, 6, 6}, rng));
    run("lrelu", st, [&] { return ops::lrelu(st.var("x")); });
  }
  {
    ParameterStore<T> st;
    add(st, "a", ParamKind::conv_weight, random_tensor<T>(Shape{2, 3, 4, 4}, rng));
    add(st, "b", ParamKind::conv_weight, random_tensor<T>(Shape{2, 3, 4, 4}, rng));
    run("add", st, [&] { return ops::add(st.var("a"), st.var("b")); });
    run("sub", st, [&] { return ops::sub(st.var("a"), st.var("b")); });
    run("mse_loss", st, [&] { return ops::mse_loss(st.var("a"), st.var("b")); });
  }
  {
    ParameterStore<T> st;
    add(st, "a", ParamKind::conv_weight, random_tensor<T>(Shape{2, 3, 4, 4}, rng));
    add(st, "b", ParamKind::conv_weight, random_tensor<T>(Shape{2, 2, 4, 4}, rng));
    run("concat_channels", st, [&] { return ops::concat_channels(st.var("a"), st.var("b")); });
  }
  {
    // Residual block parameters and input together.
    ParameterStore<T> st;
    add(st, "x", ParamKind::conv_weight, random_tensor<T>(Shape{1, 4, 6, 6}, rng));
    add(st, "rb.conv1.w", ParamKind::conv_weight, random_tensor<T>(Shape{4, 4, 3, 3}, rng, -0.5, 0.5));
    add(st, "rb.conv1.b", ParamKind::bias, random_tensor<T>(Shape{1, 4, 1, 1}, rng, -0.5, 0.5));
    add(st, "rb.conv2.w", ParamKind::conv_weight, random_tensor<T>(Shape{4, 4, 3, 3}, rng, -0.5, 0.5));
    add(st, "rb.conv2.b", ParamKind::bias, random_tensor<T>(Shape{1, 4, 1, 1}, rng, -0.5, 0.5));
    run("residual_block", st, [&] { return residual_block(st, "rb", st.var("x")); });
  }
  return out;
}

/// The tiny end-to-end model used for whole-network gradient checks.
inline NetworkConfig tiny_config(DecoderVariant v, bool dff) {
  NetworkConfig cfg;
  cfg.levels = 2;
  cfg.base_channels = 2;
  cfg.resblocks_B = 1;
  cfg.refinement_blocks = 1;
  cfg.decoder_variant = v;
  cfg.dff_enabled = dff;
  return cfg;
}

inline const std::vector<DecoderVariant>& all_variants() {
  static const std::vector<DecoderVariant> v{DecoderVariant::sos, DecoderVariant::diffusion, DecoderVariant::twicing,
                                             DecoderVariant::pyramid, DecoderVariant::unet_concat};
  return v;
}

template <class T>
struct TinyProblem {
  NetworkConfig cfg;
  ParameterStore<T> params;
  Tensor<T> image, target;
};

template <class T>
TinyProblem<T> tiny_problem(DecoderVariant v, bool dff, std::uint64_t seed = 5) {
  TinyProblem<T> p{tiny_config(v, dff), {}, {}, {}};
  p.params = make_parameters<T>(p.cfg);
  Rng rng(seed);
  init_weights(p.params, rng);
  for (auto& e : p.params)
    if (e.kind == ParamKind::bias)
      for (auto& b : e.value.values()) b = static_cast<T>(rng.uniform(-0.1, 0.1));
  p.image = random_tensor<T>(Shape{1, 3, 8, 8}, rng, 0.0, 1.0);
  p.target = random_tensor<T>(Shape{1, 3, 8, 8}, rng, 0.0, 1.0);
  return p;
}

/// mse_loss(model_forward(image), target) checked against central differences
/// on every parameter scalar, in float64.
inline GradCheckReport end_to_end_grad_check(DecoderVariant v, bool dff, double eps = 1e-6) {
  auto p = tiny_problem<double>(v, dff);
  return grad_check<double>(
      p.params,
      [&] {
        return ops::mse_loss(model_forward(p.params, p.cfg, Var<double>::constant(p.image)),
                             Var<double>::constant(p.target));
      },
      eps);
}

/// Largest per-entry relative difference ||g32 - g64|| / ||g64|| between the
/// float32 and float64 analytic gradients of the same tiny problem.
inline double float32_gradient_deviation(DecoderVariant v, bool dff) {
  auto p64 = tiny_problem<double>(v, dff);
  auto p32 = tiny_problem<float>(v, dff);
  auto grads = [](auto& p) {
    using T = typename std::decay_t<decltype(p.image)>::value_type;
    p.params.zero_grad();
    backward(ops::mse_loss(model_forward(p.params, p.cfg, Var<T>::constant(p.image)), Var<T>::constant(p.target)));
  };
  grads(p64);
  grads(p32);
  double worst = 0;
  auto it32 = p32.params.begin();
  for (auto& e : p64.params) {
    double diff = 0, ref = 0;
    for (std::size_t i = 0; i < e.grad.size(); ++i) {
      const double d = double(it32->grad[i]) - e.grad[i];
      diff += d * d;
      ref += e.grad[i] * e.grad[i];
    }
    worst = std::max(worst, std::sqrt(diff) / std::max(std::sqrt(ref), 1e-12));
    ++it32;
  }
  return worst;
}

}  // namespace msbdn::testing
