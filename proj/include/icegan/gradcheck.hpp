#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "icegan/random.hpp"
#include "icegan/tensor.hpp"

namespace icegan {

struct GradcheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // Relative error is |a - n| / max(|a|, |n|, floor).
  double floor = 1e-5;
  // 0 checks every coordinate; otherwise a seeded random subset per input.
  std::size_t max_coords = 0;
  std::uint64_t seed = 7;
  // Skip coordinates whose +-step perturbation flips a relu/abs/clamp
  // region; central differences are meaningless across a kink.
  bool skip_kink_crossings = true;
};

struct GradcheckEntry {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t skipped_at_kink = 0;
  bool finite = true;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double tolerance = 0.0;

  double max_rel_error() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.max_rel_error);
    return m;
  }
  bool passed() const {
    for (const auto& e : entries)
      if (!e.finite || e.checked == 0 || !(e.max_rel_error < tolerance)) return false;
    return !entries.empty();
  }
  std::string summary() const {
    std::ostringstream os;
    for (const auto& e : entries) {
      os << "  " << e.name << ": checked " << e.checked << ", max rel err " << e.max_rel_error;
      if (e.skipped_at_kink) os << ", skipped " << e.skipped_at_kink << " at kinks";
      os << (e.finite ? "" : " (NON-FINITE)") << '\n';
    }
    return os.str();
  }
};

using ScalarFunction = std::function<Tensor(const std::vector<Tensor>&)>;

/// Compares reverse-mode gradients of a scalar function against central
/// differences. `inputs` must be leaves; their values are perturbed in place
/// and restored, and their grads are reset.
inline GradcheckReport gradcheck(const ScalarFunction& f, std::vector<Tensor> inputs,
                                 const GradcheckOptions& opts = {}, std::vector<std::string> names = {}) {
  if (opts.step <= 0.0) throw std::invalid_argument("gradcheck step must be positive");
  GradcheckReport report;
  report.tolerance = opts.tolerance;
  for (auto& in : inputs) {
    in.set_requires_grad(true);
    in.zero_grad();
  }
  Tensor loss = f(inputs);
  if (loss.numel() != 1) throw ShapeError("gradcheck needs a scalar function, got " + shape_str(loss.shape()));
  const bool loss_finite = std::isfinite(loss.item());
  backward(loss);
  loss = Tensor();

  Rng rng(opts.seed);
  auto& probe = detail::kink_probe();
  struct ProbeScope {
    detail::KinkProbe& p;
    detail::KinkProbe saved;
    explicit ProbeScope(detail::KinkProbe& probe, bool on) : p(probe), saved(probe) { p.active = on; }
    ~ProbeScope() { p = saved; }
  } scope(probe, opts.skip_kink_crossings);
  auto eval = [&](std::uint64_t* pattern) {
    NoGradScope guard;
    probe.hash = 0;
    const double v = f(inputs).item();
    if (pattern) *pattern = probe.hash;
    return v;
  };
  std::uint64_t base_pattern = 0;
  eval(&base_pattern);

  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& in = inputs[k];
    GradcheckEntry entry;
    entry.name = k < names.size() ? names[k] : "input" + std::to_string(k);
    entry.finite = loss_finite;
    std::vector<double> analytic(in.numel(), 0.0);
    if (in.has_grad()) std::copy(in.grad().begin(), in.grad().end(), analytic.begin());
    std::vector<std::size_t> coords(in.numel());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    const bool subset = opts.max_coords > 0 && coords.size() > opts.max_coords;
    if (subset) rng.shuffle(coords);
    const std::size_t want = subset ? opts.max_coords : coords.size();
    auto values = in.mutable_data();
    for (std::size_t idx : coords) {
      if (entry.checked >= want) break;
      const double orig = values[idx];
      std::uint64_t up_pattern = 0, down_pattern = 0;
      values[idx] = orig + opts.step;
      const double up = eval(&up_pattern);
      values[idx] = orig - opts.step;
      const double down = eval(&down_pattern);
      values[idx] = orig;
      if (opts.skip_kink_crossings && (up_pattern != base_pattern || down_pattern != base_pattern)) {
        ++entry.skipped_at_kink;
        continue;
      }
      if (!std::isfinite(up) || !std::isfinite(down) || !std::isfinite(analytic[idx])) {
        entry.finite = false;
        continue;
      }
      const double numeric = (up - down) / (2.0 * opts.step);
      const double err = std::abs(numeric - analytic[idx]);
      const double denom = std::max({std::abs(numeric), std::abs(analytic[idx]), opts.floor});
      entry.max_abs_error = std::max(entry.max_abs_error, err);
      entry.max_rel_error = std::max(entry.max_rel_error, err / denom);
      ++entry.checked;
    }
    in.zero_grad();
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace icegan
