#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>

#include "msbdn/autograd.hpp"
#include "msbdn/rng.hpp"
#include "msbdn/tensor.hpp"

namespace msbdn {

enum class ParamKind : std::uint8_t { conv_weight, deconv_weight, bias };

template <class T>
struct ParamEntry {
  std::string name;
  ParamKind kind;
  Tensor<T> value, grad, adam_m, adam_v;
};

/// Named learnable tensors with gradient and ADAM moment buffers, iterated in
/// insertion order. Entries live in a deque so references stay valid while
/// the store grows.
template <class T>
class ParameterStore {
 public:
  ParamEntry<T>& add(std::string name, ParamKind kind, Shape shape) {
    if (index_.contains(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    index_.emplace(name, entries_.size());
    auto& e = entries_.emplace_back(
        ParamEntry<T>{std::move(name), kind, Tensor<T>(shape), Tensor<T>(shape), Tensor<T>(shape), Tensor<T>(shape)});
    return e;
  }

  bool contains(std::string_view name) const { return index_.contains(std::string(name)); }

  ParamEntry<T>& at(std::string_view name) {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + std::string(name));
    return entries_[it->second];
  }
  const ParamEntry<T>& at(std::string_view name) const {
    return const_cast<ParameterStore*>(this)->at(name);
  }

  /// Differentiable leaf bound to the named entry.
  Var<T> var(std::string_view name) {
    auto& e = at(name);
    return Var<T>::leaf(e.value, &e.grad);
  }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  std::size_t size() const { return entries_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.grad.fill(T(0));
  }

  void zero_values() {
    for (auto& e : entries_) e.value.fill(T(0));
  }

  double grad_norm() const {
    double s = 0;
    for (const auto& e : entries_) s += dot(e.grad, e.grad);
    return std::sqrt(s);
  }

 private:
  std::deque<ParamEntry<T>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected ADAM update at step t (1-based). Gradients are left as
/// they are; the caller zeroes them.
template <class T>
void adam_step(ParameterStore<T>& store, const AdamConfig& cfg, std::int64_t t) {
  if (t < 1) throw std::invalid_argument("adam_step: step t must be >= 1, got " + std::to_string(t));
  const double c1 = 1.0 - std::pow(cfg.beta1, double(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, double(t));
  for (auto& e : store) {
    for (std::size_t i = 0; i < e.value.size(); ++i) {
      const double g = e.grad[i];
      const double m = cfg.beta1 * double(e.adam_m[i]) + (1.0 - cfg.beta1) * g;
      const double v = cfg.beta2 * double(e.adam_v[i]) + (1.0 - cfg.beta2) * g * g;
      e.adam_m[i] = static_cast<T>(m);
      e.adam_v[i] = static_cast<T>(v);
      const double mhat = m / c1, vhat = v / c2;
      e.value[i] = static_cast<T>(double(e.value[i]) - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

inline std::size_t fan_in(ParamKind kind, const Shape& s) {
  switch (kind) {
    case ParamKind::conv_weight: return s.c * s.h * s.w;
    case ParamKind::deconv_weight: return s.n * s.h * s.w;
    case ParamKind::bias: return 0;
  }
  return 0;
}

/// He (fan-in) normal initialisation for weights, zeros for biases.
template <class T>
void init_weights(ParameterStore<T>& store, Rng& rng) {
  for (auto& e : store) {
    if (e.kind == ParamKind::bias) {
      e.value.fill(T(0));
      continue;
    }
    const double stddev = std::sqrt(2.0 / double(fan_in(e.kind, e.value.shape())));
    for (auto& v : e.value.values()) v = static_cast<T>(rng.normal(0.0, stddev));
  }
}

}  // namespace msbdn
