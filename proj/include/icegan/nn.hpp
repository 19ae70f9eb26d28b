#pragma once

#include <cmath>
#include <filesystem>
#include <map>
#include <numbers>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "icegan/conv.hpp"
#include "icegan/random.hpp"
#include "icegan/serialize.hpp"
#include "icegan/tensor.hpp"

namespace icegan {

/// Named trainable tensors plus their Adam state. Insertion order is the
/// canonical iteration and serialization order.
class ParamRegistry {
 public:
  struct Entry {
    std::string name;
    Tensor value;
    std::vector<double> m, v;
    std::uint64_t steps = 0;
  };

  Tensor add(const std::string& name, Tensor value) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
    if (!value.is_leaf()) throw std::invalid_argument("parameter '" + name + "' must be a leaf tensor");
    value.set_requires_grad(true);
    index_[name] = entries_.size();
    entries_.push_back({name, value, std::vector<double>(value.numel(), 0.0), std::vector<double>(value.numel(), 0.0), 0});
    return value;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const Tensor& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter '" + name + "'");
    return entries_[it->second].value;
  }
  Entry& entry(const std::string& name) { return entries_.at(index_.at(name)); }
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.numel();
    return n;
  }
  std::size_t parameter_count(const std::string& prefix) const {
    std::size_t n = 0;
    for (const auto& e : entries_)
      if (e.name.rfind(prefix, 0) == 0) n += e.value.numel();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.value.zero_grad();
  }

  void set_trainable(bool on) {
    for (auto& e : entries_) e.value.set_requires_grad(on);
  }

  NamedTensors named_tensors(const std::string& prefix = "") const {
    NamedTensors out;
    for (const auto& e : entries_) out.emplace_back(prefix + e.name, e.value);
    return out;
  }

  /// Copies matching values from `source` (names prefixed by `prefix`).
  /// Every registered parameter must be present with the same shape.
  void load(const NamedTensors& source, const std::string& prefix = "") {
    std::unordered_map<std::string, const Tensor*> lookup;
    for (const auto& [name, t] : source) lookup[name] = &t;
    for (auto& e : entries_) {
      auto it = lookup.find(prefix + e.name);
      if (it == lookup.end()) throw FormatError("checkpoint is missing parameter '" + prefix + e.name + "'");
      if (it->second->shape() != e.value.shape()) {
        throw FormatError("parameter '" + e.name + "' has shape " + shape_str(it->second->shape()) +
                          " in checkpoint, model expects " + shape_str(e.value.shape()));
      }
      auto dst = e.value.mutable_data();
      std::copy(it->second->data().begin(), it->second->data().end(), dst.begin());
    }
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Turns gradient recording off for every parameter of a registry while in scope.
class FreezeGuard {
 public:
  explicit FreezeGuard(ParamRegistry& reg) : reg_(reg) { reg_.set_trainable(false); }
  ~FreezeGuard() { reg_.set_trainable(true); }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  ParamRegistry& reg_;
};

// ---------------------------------------------------------------------------
// Initialisation

inline Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal(0.0, stddev);
  return Tensor(std::move(shape), std::move(v));
}

inline Tensor identity_matrix(std::size_t n) {
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  return Tensor({n, n}, std::move(v));
}

inline double kaiming_std(std::size_t fan_in) { return std::sqrt(2.0 / static_cast<double>(fan_in)); }

// ---------------------------------------------------------------------------
// Layers. Each holds handles to tensors owned by a ParamRegistry.

struct Conv2d {
  ConvSpec spec;
  Tensor weight, bias;

  Conv2d() = default;
  Conv2d(ParamRegistry& reg, const std::string& name, const ConvSpec& s, Rng& rng) : spec(s) {
    const std::size_t fan_in = s.in_channels * s.kernel * s.kernel;
    weight = reg.add(name + ".weight", normal_tensor({s.out_channels, s.in_channels, s.kernel, s.kernel}, kaiming_std(fan_in), rng));
    bias = reg.add(name + ".bias", Tensor::zeros({s.out_channels}));
  }
  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, spec); }
};

struct Deconv2d {
  ConvSpec spec;
  Tensor weight, bias;

  Deconv2d() = default;
  Deconv2d(ParamRegistry& reg, const std::string& name, const ConvSpec& s, Rng& rng) : spec(s) {
    const std::size_t taps = std::max<std::size_t>(1, (s.kernel * s.kernel) / (s.stride * s.stride));
    weight = reg.add(name + ".weight",
                     normal_tensor({s.in_channels, s.out_channels, s.kernel, s.kernel}, kaiming_std(s.in_channels * taps), rng));
    bias = reg.add(name + ".bias", Tensor::zeros({s.out_channels}));
  }
  Tensor operator()(const Tensor& x) const { return deconv2d(x, weight, bias, spec); }
};

struct Linear {
  Tensor weight, bias;

  Linear() = default;
  Linear(ParamRegistry& reg, const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
    weight = reg.add(name + ".weight", normal_tensor({out, in}, kaiming_std(in), rng));
    bias = reg.add(name + ".bias", Tensor::zeros({out}));
  }
  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
};

// ---------------------------------------------------------------------------
// Optimisation

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// One Adam update over every parameter that holds a gradient. Returns the
/// names of parameters skipped because no gradient was present.
inline std::vector<std::string> adam_step(ParamRegistry& reg, double lr, const AdamConfig& cfg = {}) {
  std::vector<std::string> missing;
  for (auto& e : reg.entries()) {
    if (!e.value.has_grad()) {
      missing.push_back(e.name);
      continue;
    }
    ++e.steps;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(e.steps));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(e.steps));
    const auto g = e.value.grad();
    auto p = e.value.mutable_data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      e.m[i] = cfg.beta1 * e.m[i] + (1.0 - cfg.beta1) * g[i];
      e.v[i] = cfg.beta2 * e.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = e.m[i] / c1;
      const double vhat = e.v[i] / c2;
      p[i] -= lr * mhat / (std::sqrt(vhat) + cfg.epsilon);
    }
  }
  return missing;
}

struct LrSchedule {
  double base_lr = 1e-3;
  double t_max = 100;
  double min_lr = 0.0;
};

/// min + (base - min)(1 + cos(pi * epoch / T_max)) / 2 for epoch in [0, T_max].
inline double cosine_lr(double epoch, const LrSchedule& s) {
  if (epoch < 0.0 || epoch > s.t_max) {
    throw std::out_of_range("cosine_lr: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(s.t_max) + "]");
  }
  if (s.t_max == 0.0) return s.base_lr;
  return s.min_lr + 0.5 * (s.base_lr - s.min_lr) * (1.0 + std::cos(std::numbers::pi * epoch / s.t_max));
}

}  // namespace icegan
