#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "icegan/data.hpp"

namespace icegan {

/// Counts with rows = true class, columns = predicted class.
struct ConfusionMatrix {
  std::array<std::array<std::uint64_t, kNumClasses>, kNumClasses> counts{};

  void add(int truth, int predicted) {
    if (truth < 0 || truth >= static_cast<int>(kNumClasses) || predicted < 0 || predicted >= static_cast<int>(kNumClasses)) {
      throw std::invalid_argument("confusion matrix: class index out of range");
    }
    ++counts[static_cast<std::size_t>(truth)][static_cast<std::size_t>(predicted)];
  }
  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (const auto& r : counts)
      for (auto c : r) t += c;
    return t;
  }
  ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
    for (std::size_t i = 0; i < kNumClasses; ++i)
      for (std::size_t j = 0; j < kNumClasses; ++j) counts[i][j] += o.counts[i][j];
    return *this;
  }
  bool operator==(const ConfusionMatrix&) const = default;
};

struct ClassScores {
  std::array<double, kNumClasses> f1{}, recall{};
  double uf1 = 0.0, uar = 0.0;
};

/// Per-class F1 and recall with zero denominators scored 0.
inline ClassScores uf1_uar(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw std::invalid_argument("uf1_uar: empty confusion matrix");
  ClassScores s;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    std::uint64_t tp = cm.counts[c][c], fp = 0, fn = 0;
    for (std::size_t o = 0; o < kNumClasses; ++o) {
      if (o == c) continue;
      fp += cm.counts[o][c];
      fn += cm.counts[c][o];
    }
    const double f1_den = static_cast<double>(2 * tp + fp + fn);
    const double rec_den = static_cast<double>(tp + fn);
    s.f1[c] = f1_den > 0 ? 2.0 * static_cast<double>(tp) / f1_den : 0.0;
    s.recall[c] = rec_den > 0 ? static_cast<double>(tp) / rec_den : 0.0;
    s.uf1 += s.f1[c] / kNumClasses;
    s.uar += s.recall[c] / kNumClasses;
  }
  return s;
}

struct Prediction {
  std::string sample_id;
  std::string subject;
  std::string dataset;
  int truth = 0;
  int predicted = 0;
  double adv_len = 0.0;
  std::array<double, kNumClasses> exp_scores{};
};

inline nlohmann::json to_json(const Prediction& p) {
  return {{"sample_id", p.sample_id}, {"subject", p.subject},        {"dataset", p.dataset},
          {"adv_len", p.adv_len},     {"exp_lengths", p.exp_scores}, {"predicted", p.predicted},
          {"true", p.truth}};
}

struct MetricsReport {
  ConfusionMatrix pooled;
  ClassScores scores;
  std::map<std::string, ConfusionMatrix> per_dataset;
  std::map<std::string, ClassScores> per_dataset_scores;
  std::size_t folds = 0;
  std::size_t folds_expected = 0;
  std::vector<std::string> warnings;

  bool complete() const { return folds == folds_expected; }
  /// Macro-F1 equals UF1 here; kept as its own field for the SDE table.
  double macro_f1() const { return scores.uf1; }
};

inline MetricsReport make_report(const std::vector<Prediction>& predictions) {
  MetricsReport r;
  for (const auto& p : predictions) {
    r.pooled.add(p.truth, p.predicted);
    r.per_dataset[p.dataset].add(p.truth, p.predicted);
  }
  if (r.pooled.total() > 0) r.scores = uf1_uar(r.pooled);
  for (const auto& [name, cm] : r.per_dataset) r.per_dataset_scores[name] = uf1_uar(cm);
  return r;
}

inline nlohmann::json to_json(const ClassScores& s) {
  nlohmann::json j{{"UF1", s.uf1}, {"UAR", s.uar}, {"macro_F1", s.uf1}};
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    j["per_class"][class_name(static_cast<int>(c))] = {{"F1", s.f1[c]}, {"recall", s.recall[c]}};
  }
  return j;
}

inline nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json j = to_json(r.scores);
  j["confusion"] = nlohmann::json::array();
  for (const auto& row : r.pooled.counts) j["confusion"].push_back(row);
  j["samples"] = r.pooled.total();
  j["folds"] = r.folds;
  j["folds_expected"] = r.folds_expected;
  j["complete"] = r.complete();
  j["warnings"] = r.warnings;
  for (const auto& [name, s] : r.per_dataset_scores) {
    j["per_dataset"][name] = to_json(s);
    j["per_dataset"][name]["samples"] = r.per_dataset.at(name).total();
  }
  return j;
}

/// Fixed-width table: one row per dataset plus the pooled row.
inline std::string render_table(const MetricsReport& r, const std::string& title = "LOSO evaluation") {
  std::ostringstream os;
  os << title << (r.complete() ? "" : "  [INCOMPLETE]") << "\n";
  os << std::left << std::setw(12) << "Dataset" << std::right << std::setw(9) << "Samples" << std::setw(9) << "UF1"
     << std::setw(9) << "UAR" << std::setw(10) << "macro-F1" << "\n";
  auto row = [&](const std::string& name, std::uint64_t n, const ClassScores& s) {
    os << std::left << std::setw(12) << name << std::right << std::setw(9) << n << std::fixed << std::setprecision(4)
       << std::setw(9) << s.uf1 << std::setw(9) << s.uar << std::setw(10) << s.uf1 << "\n";
  };
  if (r.per_dataset.size() > 1)
    for (const auto& [name, s] : r.per_dataset_scores) row(name, r.per_dataset.at(name).total(), s);
  row("Composite", r.pooled.total(), r.scores);
  return os.str();
}

// ---------------------------------------------------------------------------
// Difference maps

struct RegionReport {
  bool empty = true;
  std::size_t pixels = 0;
  double centroid_y = 0.0, centroid_x = 0.0;
  std::size_t top = 0, left = 0, bottom = 0, right = 0;  // inclusive bounds
  std::vector<bool> mask;
};

struct DifferenceMap {
  std::size_t height = 0, width = 0;
  std::vector<double> values;  // min-max normalised to [0, 1]
  RegionReport region;
};

/// Squared per-pixel difference, min-max normalised, with the top `fraction`
/// of positive pixels reported as the active region.
inline DifferenceMap norm2_diff(const std::vector<double>& synthetic, const std::vector<double>& onset,
                                std::size_t height = kImageSide, std::size_t width = kImageSide, double fraction = 0.05) {
  if (synthetic.size() != onset.size() || synthetic.size() != height * width) {
    throw ShapeError("norm2_diff: image sizes " + std::to_string(synthetic.size()) + " and " + std::to_string(onset.size()));
  }
  DifferenceMap m;
  m.height = height;
  m.width = width;
  m.values.resize(synthetic.size());
  for (std::size_t i = 0; i < synthetic.size(); ++i) {
    const double d = synthetic[i] - onset[i];
    m.values[i] = d * d;
  }
  const auto [lo_it, hi_it] = std::minmax_element(m.values.begin(), m.values.end());
  const double lo = *lo_it, hi = *hi_it;
  m.region.mask.assign(m.values.size(), false);
  if (hi <= 0.0) {
    std::fill(m.values.begin(), m.values.end(), 0.0);
    return m;
  }
  for (auto& v : m.values) v = hi > lo ? (v - lo) / (hi - lo) : 1.0;

  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < m.values.size(); ++i)
    if (synthetic[i] != onset[i]) order.push_back(i);
  const std::size_t keep = std::min(order.size(), static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(m.values.size()))));
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return m.values[a] > m.values[b]; });
  order.resize(keep);

  auto& r = m.region;
  r.empty = false;
  r.pixels = keep;
  r.top = height;
  r.left = width;
  for (std::size_t i : order) {
    const std::size_t y = i / width, x = i % width;
    r.mask[i] = true;
    r.centroid_y += static_cast<double>(y) / static_cast<double>(keep);
    r.centroid_x += static_cast<double>(x) / static_cast<double>(keep);
    r.top = std::min(r.top, y);
    r.bottom = std::max(r.bottom, y);
    r.left = std::min(r.left, x);
    r.right = std::max(r.right, x);
  }
  return m;
}

inline double mask_iou(const std::vector<bool>& a, const std::vector<bool>& b) {
  if (a.size() != b.size()) throw ShapeError("mask_iou: mask sizes differ");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += a[i] && b[i];
    uni += a[i] || b[i];
  }
  return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

inline nlohmann::json to_json(const RegionReport& r) {
  if (r.empty) return {{"empty", true}};
  return {{"empty", false},
          {"pixels", r.pixels},
          {"centroid", {{"y", r.centroid_y}, {"x", r.centroid_x}}},
          {"bbox", {{"top", r.top}, {"left", r.left}, {"bottom", r.bottom}, {"right", r.right}}}};
}

}  // namespace icegan
