#pragma once

// Multi-scale boosted encoder/decoder with optional dense feature fusion.
//
// Levels are 1-based: level 1 is full resolution, level L the coarsest.
// Channel width at level n is min(base * 2^(n-1), max_channels).

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "msbdn/autograd.hpp"
#include "msbdn/parameters.hpp"

namespace msbdn {

enum class DecoderVariant { sos, diffusion, twicing, pyramid, unet_concat };

inline const char* to_string(DecoderVariant v) {
  switch (v) {
    case DecoderVariant::sos: return "sos";
    case DecoderVariant::diffusion: return "diffusion";
    case DecoderVariant::twicing: return "twicing";
    case DecoderVariant::pyramid: return "pyramid";
    case DecoderVariant::unet_concat: return "unet_concat";
  }
  return "?";
}

inline DecoderVariant parse_decoder_variant(const std::string& s) {
  for (auto v : {DecoderVariant::sos, DecoderVariant::diffusion, DecoderVariant::twicing, DecoderVariant::pyramid,
                 DecoderVariant::unet_concat})
    if (s == to_string(v)) return v;
  throw std::invalid_argument("unknown decoder_variant '" + s +
                              "' (expected sos, diffusion, twicing, pyramid or unet_concat)");
}

struct NetworkConfig {
  int levels = 5;
  int resblocks_B = 18;
  int base_channels = 16;
  int max_channels = 256;
  DecoderVariant decoder_variant = DecoderVariant::sos;
  bool dff_enabled = true;
  int refinement_blocks = 3;

  std::size_t channels(int level) const {
    std::size_t c = static_cast<std::size_t>(base_channels);
    for (int i = 1; i < level && c < static_cast<std::size_t>(max_channels); ++i) c *= 2;
    return std::min(c, static_cast<std::size_t>(max_channels));
  }

  /// Spatial dimensions must be divisible by this.
  std::size_t size_multiple() const { return std::size_t{1} << (levels - 1); }

  void validate() const {
    if (levels < 2) throw std::invalid_argument("levels must be >= 2, got " + std::to_string(levels));
    if (levels > 12) throw std::invalid_argument("levels must be <= 12, got " + std::to_string(levels));
    if (resblocks_B < 0) throw std::invalid_argument("resblocks_B must be >= 0");
    if (base_channels < 1) throw std::invalid_argument("base_channels must be >= 1");
    if (max_channels < base_channels) throw std::invalid_argument("max_channels must be >= base_channels");
    if (refinement_blocks < 0) throw std::invalid_argument("refinement_blocks must be >= 0");
  }

  friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

template <class T>
struct FeatureMap {
  int level = 0;
  Var<T> value;
};

// ---------------------------------------------------------------------------
// Parameter layout

namespace layout {

using Visitor = std::function<void(const std::string&, ParamKind, Shape)>;

inline void conv(const Visitor& v, const std::string& name, std::size_t cin, std::size_t cout, std::size_t k) {
  v(name + ".w", ParamKind::conv_weight, Shape{cout, cin, k, k});
  v(name + ".b", ParamKind::bias, Shape{1, cout, 1, 1});
}

inline void deconv(const Visitor& v, const std::string& name, std::size_t cin, std::size_t cout, std::size_t k) {
  v(name + ".w", ParamKind::deconv_weight, Shape{cin, cout, k, k});
  v(name + ".b", ParamKind::bias, Shape{1, cout, 1, 1});
}

inline void residual_group(const Visitor& v, const std::string& name, std::size_t c, int blocks) {
  for (int r = 0; r < blocks; ++r) {
    const std::string p = name + "." + std::to_string(r);
    conv(v, p + ".conv1", c, c, 3);
    conv(v, p + ".conv2", c, c, 3);
  }
}

// Strided stack from level `from` toward coarser (down) or finer (up) level `to`.
inline void down_stack(const Visitor& v, const NetworkConfig& cfg, const std::string& name, int from, int to) {
  for (int j = 0; from + j < to; ++j)
    conv(v, name + "." + std::to_string(j), cfg.channels(from + j), cfg.channels(from + j + 1), 3);
}

inline void up_stack(const Visitor& v, const NetworkConfig& cfg, const std::string& name, int from, int to) {
  for (int j = 0; from - j > to; ++j)
    deconv(v, name + "." + std::to_string(j), cfg.channels(from - j), cfg.channels(from - j - 1), 3);
}

inline std::string enc(int n) { return "enc" + std::to_string(n); }
inline std::string dec(int n) { return "dec" + std::to_string(n); }
inline std::string step(int t) { return ".t" + std::to_string(t); }

/// Enumerate every learnable tensor of the model, in a fixed order.
inline void visit(const NetworkConfig& cfg, const Visitor& v) {
  cfg.validate();
  const int L = cfg.levels;
  conv(v, "enc1.head", 3, cfg.channels(1), 11);
  residual_group(v, "enc1.rg", cfg.channels(1), cfg.refinement_blocks);
  for (int n = 2; n <= L; ++n) {
    conv(v, enc(n) + ".down", cfg.channels(n - 1), cfg.channels(n), 3);
    if (cfg.dff_enabled)
      for (int t = 0; t <= n - 2; ++t) {
        up_stack(v, cfg, enc(n) + ".dff" + step(t) + ".up", n, 1 + t);
        down_stack(v, cfg, enc(n) + ".dff" + step(t) + ".down", 1 + t, n);
      }
    residual_group(v, enc(n) + ".rg", cfg.channels(n), cfg.refinement_blocks);
  }
  residual_group(v, "trunk", cfg.channels(L), cfg.resblocks_B);
  for (int n = L - 1; n >= 1; --n) {
    deconv(v, dec(n) + ".up", cfg.channels(n + 1), cfg.channels(n), 3);
    if (cfg.decoder_variant == DecoderVariant::unet_concat)
      conv(v, dec(n) + ".fuse", 2 * cfg.channels(n), cfg.channels(n), 1);
    residual_group(v, dec(n) + ".rg", cfg.channels(n), cfg.refinement_blocks);
    if (cfg.dff_enabled)
      for (int t = 0; t <= L - n - 1; ++t) {
        down_stack(v, cfg, dec(n) + ".dff" + step(t) + ".down", n, L - t);
        up_stack(v, cfg, dec(n) + ".dff" + step(t) + ".up", L - t, n);
      }
  }
  conv(v, "out", cfg.channels(1), 3, 3);
}

}  // namespace layout

/// A zero-filled store holding every parameter of the configured model.
template <class T>
ParameterStore<T> make_parameters(const NetworkConfig& cfg) {
  ParameterStore<T> store;
  layout::visit(cfg, [&](const std::string& name, ParamKind kind, Shape s) { store.add(name, kind, s); });
  return store;
}

/// Exact number of learnable scalars, without allocating the model.
inline std::uint64_t count_parameters(const NetworkConfig& cfg) {
  std::uint64_t total = 0;
  layout::visit(cfg, [&](const std::string&, ParamKind, Shape s) { total += s.numel(); });
  return total;
}

/// Weight names of the last layer of every additive branch: the second conv of
/// each residual block and the final layer of each fusion back-projection stack.
inline std::vector<std::string> branch_output_weights(const NetworkConfig& cfg) {
  std::vector<std::string> names;
  const int L = cfg.levels;
  auto group = [&](const std::string& name, int blocks) {
    for (int r = 0; r < blocks; ++r) names.push_back(name + "." + std::to_string(r) + ".conv2.w");
  };
  group("enc1.rg", cfg.refinement_blocks);
  for (int n = 2; n <= L; ++n) {
    if (cfg.dff_enabled)
      for (int t = 0; t <= n - 2; ++t)
        names.push_back(layout::enc(n) + ".dff" + layout::step(t) + ".down." + std::to_string(n - 2 - t) + ".w");
    group(layout::enc(n) + ".rg", cfg.refinement_blocks);
  }
  group("trunk", cfg.resblocks_B);
  for (int n = L - 1; n >= 1; --n) {
    group(layout::dec(n) + ".rg", cfg.refinement_blocks);
    if (cfg.dff_enabled)
      for (int t = 0; t <= L - n - 1; ++t)
        names.push_back(layout::dec(n) + ".dff" + layout::step(t) + ".up." + std::to_string(L - n - t - 1) + ".w");
  }
  return names;
}

/// He initialisation followed by scaling each branch-output weight by
/// `branch_scale`. Plain He init compounds variance through the stacked
/// residual blocks (output RMS in the thousands for a 3-level model); a small
/// scale keeps every block close to identity at the start.
template <class T>
void init_model(ParameterStore<T>& store, const NetworkConfig& cfg, Rng& rng, double branch_scale) {
  init_weights(store, rng);
  if (branch_scale == 1.0) return;
  for (const auto& name : branch_output_weights(cfg))
    for (auto& v : store.at(name).value.values()) v = static_cast<T>(double(v) * branch_scale);
}

// ---------------------------------------------------------------------------
// Building blocks

template <class T>
Var<T> conv_layer(ParameterStore<T>& p, const std::string& name, const Var<T>& x, std::size_t stride,
                  std::size_t pad) {
  return ops::conv2d(x, p.var(name + ".w"), p.var(name + ".b"), stride, pad);
}

/// Stride-2, 3x3 transposed conv that doubles H and W.
template <class T>
Var<T> upsample_layer(ParameterStore<T>& p, const std::string& name, const Var<T>& x) {
  return ops::deconv2d(x, p.var(name + ".w"), p.var(name + ".b"), 2, 1, 1);
}

/// x + conv(lrelu(conv(x))), both 3x3 same-padded.
template <class T>
Var<T> residual_block(ParameterStore<T>& p, const std::string& name, const Var<T>& x) {
  const auto& w1 = p.at(name + ".conv1.w").value;
  if (w1.c() != x.shape().c)
    throw std::invalid_argument("residual_block " + name + ": channel mismatch, input " + to_string(x.shape()) +
                                ", block weight " + to_string(w1.shape()));
  auto h = ops::lrelu(conv_layer(p, name + ".conv1", x, 1, 1));
  return ops::add(x, conv_layer(p, name + ".conv2", h, 1, 1));
}

template <class T>
Var<T> residual_group(ParameterStore<T>& p, const std::string& name, Var<T> x, int blocks) {
  for (int r = 0; r < blocks; ++r) x = residual_block(p, name + "." + std::to_string(r), x);
  return x;
}

namespace detail {

template <class T>
Var<T> down_stack(ParameterStore<T>& p, const std::string& name, Var<T> x, int gap) {
  for (int j = 0; j < gap; ++j) {
    x = conv_layer(p, name + "." + std::to_string(j), x, 2, 1);
    if (j + 1 < gap) x = ops::lrelu(x);
  }
  return x;
}

template <class T>
Var<T> up_stack(ParameterStore<T>& p, const std::string& name, Var<T> x, int gap) {
  for (int j = 0; j < gap; ++j) {
    x = upsample_layer(p, name + "." + std::to_string(j), x);
    if (j + 1 < gap) x = ops::lrelu(x);
  }
  return x;
}

inline void check_level(const NetworkConfig& cfg, const Shape& s, int level, const char* what) {
  if (level < 1 || level > cfg.levels || s.c != cfg.channels(level))
    throw std::invalid_argument(std::string(what) + ": feature " + to_string(s) + " is not a level-" +
                                std::to_string(level) + " feature (expected " + std::to_string(cfg.channels(level)) +
                                " channels)");
}

}  // namespace detail

inline void check_input_size(const NetworkConfig& cfg, const Shape& s) {
  const std::size_t m = cfg.size_multiple();
  if (s.c != 3) throw std::invalid_argument("image must have 3 channels, got " + to_string(s));
  if (s.h == 0 || s.w == 0 || s.h % m != 0 || s.w % m != 0)
    throw std::invalid_argument("image height and width must be positive multiples of " + std::to_string(m) +
                                " for " + std::to_string(cfg.levels) + " levels, got " + to_string(s));
}

// ---------------------------------------------------------------------------
// Dense feature fusion

/// Decoder-side fusion at `level`. `preceding` holds the enhanced decoder
/// features of levels L, L-1, ..., level+1 in that order. Step t projects the
/// running feature down to level L-t, takes the difference with the t-th
/// preceding feature, and adds the back-projected difference.
template <class T>
FeatureMap<T> dff_decoder(ParameterStore<T>& p, const NetworkConfig& cfg, const FeatureMap<T>& j,
                          const std::vector<FeatureMap<T>>& preceding) {
  const int n = j.level, L = cfg.levels;
  if (preceding.size() != static_cast<std::size_t>(L - n))
    throw std::invalid_argument("dff_decoder at level " + std::to_string(n) + ": expected " + std::to_string(L - n) +
                                " preceding features, got " + std::to_string(preceding.size()));
  Var<T> cur = j.value;
  for (int t = 0; t < L - n; ++t) {
    const auto& prev = preceding[static_cast<std::size_t>(t)];
    if (prev.level != L - t)
      throw std::invalid_argument("dff_decoder at level " + std::to_string(n) + ": preceding[" + std::to_string(t) +
                                  "] must be level " + std::to_string(L - t) + ", got level " +
                                  std::to_string(prev.level));
    const std::string base = layout::dec(n) + ".dff" + layout::step(t);
    auto projected = detail::down_stack(p, base + ".down", cur, L - n - t);
    require_same_shape(projected.shape(), prev.value.shape(), "dff_decoder projection");
    auto err = ops::sub(projected, prev.value);
    cur = ops::add(detail::up_stack(p, base + ".up", err, L - n - t), cur);
  }
  return {n, cur};
}

/// Encoder-side fusion at `level`; `preceding` holds enhanced encoder
/// features of levels 1 .. level-1 in that order. Mirrors dff_decoder with
/// the up- and down-sampling roles exchanged.
template <class T>
FeatureMap<T> dff_encoder(ParameterStore<T>& p, const NetworkConfig& cfg, const FeatureMap<T>& i,
                          const std::vector<FeatureMap<T>>& preceding) {
  const int n = i.level;
  if (preceding.size() != static_cast<std::size_t>(n - 1))
    throw std::invalid_argument("dff_encoder at level " + std::to_string(n) + ": expected " + std::to_string(n - 1) +
                                " preceding features, got " + std::to_string(preceding.size()));
  (void)cfg;
  Var<T> cur = i.value;
  for (int t = 0; t < n - 1; ++t) {
    const auto& prev = preceding[static_cast<std::size_t>(t)];
    if (prev.level != 1 + t)
      throw std::invalid_argument("dff_encoder at level " + std::to_string(n) + ": preceding[" + std::to_string(t) +
                                  "] must be level " + std::to_string(1 + t) + ", got level " +
                                  std::to_string(prev.level));
    const std::string base = layout::enc(n) + ".dff" + layout::step(t);
    auto projected = detail::up_stack(p, base + ".up", cur, n - 1 - t);
    require_same_shape(projected.shape(), prev.value.shape(), "dff_encoder projection");
    auto err = ops::sub(projected, prev.value);
    cur = ops::add(detail::down_stack(p, base + ".down", err, n - 1 - t), cur);
  }
  return {n, cur};
}

// ---------------------------------------------------------------------------
// Encoder, trunk, decoder

/// Returns the per-level skip features i^1..i^L (residual-group outputs).
template <class T>
std::vector<FeatureMap<T>> encoder_forward(ParameterStore<T>& p, const NetworkConfig& cfg, const Var<T>& image) {
  check_input_size(cfg, image.shape());
  std::vector<FeatureMap<T>> skips, enhanced;
  Var<T> x = ops::lrelu(conv_layer(p, "enc1.head", image, 1, 5));
  enhanced.push_back({1, x});
  x = residual_group(p, "enc1.rg", x, cfg.refinement_blocks);
  skips.push_back({1, x});
  for (int n = 2; n <= cfg.levels; ++n) {
    x = ops::lrelu(conv_layer(p, layout::enc(n) + ".down", x, 2, 1));
    if (cfg.dff_enabled) {
      x = dff_encoder(p, cfg, FeatureMap<T>{n, x}, enhanced).value;
      enhanced.push_back({n, x});
    }
    x = residual_group(p, layout::enc(n) + ".rg", x, cfg.refinement_blocks);
    skips.push_back({n, x});
  }
  return skips;
}

template <class T>
FeatureMap<T> trunk_forward(ParameterStore<T>& p, const NetworkConfig& cfg, const FeatureMap<T>& i_last) {
  detail::check_level(cfg, i_last.value.shape(), cfg.levels, "trunk_forward");
  if (i_last.level != cfg.levels)
    throw std::invalid_argument("trunk_forward: input must be level " + std::to_string(cfg.levels));
  return {cfg.levels, residual_group(p, "trunk", i_last.value, cfg.resblocks_B)};
}

/// One boosted decoder module: upsample j^{n+1} with a learned deconv (u),
/// then combine with the skip feature i^n through refinement unit G:
///   sos        G(i + u) - u
///   diffusion  G(u)
///   twicing    G(i - u) + u
///   pyramid    u + G(i)
///   unet       G(fuse(concat(i, u)))
template <class T>
FeatureMap<T> decoder_module(ParameterStore<T>& p, const NetworkConfig& cfg, DecoderVariant variant,
                             const FeatureMap<T>& i_n, const FeatureMap<T>& j_next) {
  const int n = i_n.level;
  if (j_next.level != n + 1)
    throw std::invalid_argument("decoder_module: j_next must be level " + std::to_string(n + 1) + ", got level " +
                                std::to_string(j_next.level));
  detail::check_level(cfg, i_n.value.shape(), n, "decoder_module skip");
  detail::check_level(cfg, j_next.value.shape(), n + 1, "decoder_module input");
  const std::string name = layout::dec(n);
  auto u = upsample_layer(p, name + ".up", j_next.value);
  require_same_shape(u.shape(), i_n.value.shape(), "decoder_module upsampled vs skip");
  auto G = [&](const Var<T>& x) { return residual_group(p, name + ".rg", x, cfg.refinement_blocks); };
  const Var<T>& i = i_n.value;
  switch (variant) {
    case DecoderVariant::sos: return {n, ops::sub(G(ops::add(i, u)), u)};
    case DecoderVariant::diffusion: return {n, G(u)};
    case DecoderVariant::twicing: return {n, ops::add(G(ops::sub(i, u)), u)};
    case DecoderVariant::pyramid: return {n, ops::add(u, G(i))};
    case DecoderVariant::unet_concat:
      return {n, G(conv_layer(p, name + ".fuse", ops::concat_channels(i, u), 1, 0))};
  }
  throw std::invalid_argument("decoder_module: unknown variant");
}

/// Full dehazing forward pass. The output is not clamped.
template <class T>
Var<T> model_forward(ParameterStore<T>& p, const NetworkConfig& cfg, const Var<T>& image) {
  auto skips = encoder_forward(p, cfg, image);
  auto j = trunk_forward(p, cfg, skips.back());
  std::vector<FeatureMap<T>> enhanced{j};
  for (int n = cfg.levels - 1; n >= 1; --n) {
    j = decoder_module(p, cfg, cfg.decoder_variant, skips[static_cast<std::size_t>(n - 1)], j);
    if (cfg.dff_enabled) {
      j = dff_decoder(p, cfg, j, enhanced);
      enhanced.push_back(j);
    }
  }
  return conv_layer(p, "out", j.value, 1, 1);
}

template <class T>
Tensor<T> predict(ParameterStore<T>& p, const NetworkConfig& cfg, const Tensor<T>& image) {
  return model_forward(p, cfg, Var<T>::constant(image)).value();
}

}  // namespace msbdn
