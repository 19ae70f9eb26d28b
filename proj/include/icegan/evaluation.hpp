#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <atomic>
#include <map>
#include <mutex>
#include <thread>
#include <memory>
#include <string>
#include <vector>

#include "icegan/data.hpp"
#include "icegan/metrics.hpp"
#include "icegan/training.hpp"

namespace icegan {

/// Anything that can be fitted on a fold's training subjects and then
/// classify held-out samples.
class FoldModel {
 public:
  virtual ~FoldModel() = default;
  virtual void fit(const std::vector<const Sample*>& train, const LosoSplit& fold) = 0;
  virtual std::vector<Prediction> predict(const std::vector<const Sample*>& test) = 0;
};

using FoldModelFactory = std::function<std::unique_ptr<FoldModel>(std::size_t fold_index)>;

namespace detail {
inline Prediction baseline_prediction(const Sample& s, int predicted) {
  Prediction p;
  p.sample_id = s.id;
  p.subject = s.subject;
  p.dataset = s.dataset;
  p.truth = s.cls;
  p.predicted = predicted;
  p.exp_scores[static_cast<std::size_t>(predicted)] = 1.0;
  return p;
}
}  // namespace detail

/// Reads the true label; a harness upper bound.
class OracleModel : public FoldModel {
 public:
  void fit(const std::vector<const Sample*>&, const LosoSplit&) override {}
  std::vector<Prediction> predict(const std::vector<const Sample*>& test) override {
    std::vector<Prediction> out;
    for (const auto* s : test) out.push_back(detail::baseline_prediction(*s, s->cls));
    return out;
  }
};

class RandomModel : public FoldModel {
 public:
  explicit RandomModel(std::uint64_t seed) : rng_(seed) {}
  void fit(const std::vector<const Sample*>&, const LosoSplit&) override {}
  std::vector<Prediction> predict(const std::vector<const Sample*>& test) override {
    std::vector<Prediction> out;
    for (const auto* s : test) out.push_back(detail::baseline_prediction(*s, static_cast<int>(rng_.below(kNumClasses))));
    return out;
  }

 private:
  Rng rng_;
};

/// Predicts the most frequent training class (lowest index on ties).
class MajorityModel : public FoldModel {
 public:
  void fit(const std::vector<const Sample*>& train, const LosoSplit&) override {
    std::array<std::size_t, kNumClasses> n{};
    for (const auto* s : train) ++n[static_cast<std::size_t>(s->cls)];
    majority_ = static_cast<int>(std::max_element(n.begin(), n.end()) - n.begin());
  }
  std::vector<Prediction> predict(const std::vector<const Sample*>& test) override {
    std::vector<Prediction> out;
    for (const auto* s : test) out.push_back(detail::baseline_prediction(*s, majority_));
    return out;
  }

 private:
  int majority_ = 0;
};

/// The full adversarial model trained per fold; prediction is the argmax of
/// the discriminator's expression scores on the held-out apex frames.
class IceGanFoldModel : public FoldModel {
 public:
  IceGanFoldModel(ModelConfig cfg, TrainOptions opts, LossWeights w, std::filesystem::path run_dir = {})
      : cfg_(std::move(cfg)), opts_(opts), weights_(w), run_dir_(std::move(run_dir)) {}

  void fit(const std::vector<const Sample*>& train_set, const LosoSplit& fold) override {
    model_ = std::make_unique<IceGan>(cfg_, opts_.seed, opts_.perceptual_seed);
    std::filesystem::path dir;
    if (!run_dir_.empty()) {
      std::string name = fold.held_out;
      for (auto& c : name)
        if (c == '/') c = '_';
      dir = run_dir_ / ("fold_" + name);
    }
    last_ = train(*model_, train_set, opts_, weights_, dir);
  }
  std::vector<Prediction> predict(const std::vector<const Sample*>& test) override { return model_->predict(test); }

  const IceGan& model() const { return *model_; }
  const TrainResult& last_training() const { return last_; }

 private:
  ModelConfig cfg_;
  TrainOptions opts_;
  LossWeights weights_;
  std::filesystem::path run_dir_;
  std::unique_ptr<IceGan> model_;
  TrainResult last_;
};

struct FoldOutcome {
  std::string held_out;
  bool ok = false;
  std::string error;
  std::vector<Prediction> predictions;
  MetricsReport report;
};

struct LosoResult {
  MetricsReport report;
  std::vector<FoldOutcome> folds;
  std::vector<Prediction> predictions;
};

struct LosoHooks {
  // Called after a fold is fitted and has predicted, with the fitted model.
  std::function<void(const LosoSplit&, FoldModel&, const std::vector<const Sample*>& test)> after_fold;
};

/// Fits one model per fold and pools predictions into a single confusion
/// matrix. A failing fold is skipped with a warning and marks the report
/// incomplete. `max_folds` (0 = all) truncates the fold list; up to `jobs`
/// folds run concurrently (hooks are serialised). The reduction is ordered
/// by fold, so the result does not depend on scheduling.
inline LosoResult evaluate_loso(const FoldModelFactory& factory, const std::vector<Sample>& corpus,
                                const std::vector<LosoSplit>& folds, std::size_t max_folds = 0,
                                const LosoHooks& hooks = {}, std::size_t jobs = 1) {
  LosoResult result;
  const std::size_t n = max_folds ? std::min(max_folds, folds.size()) : folds.size();
  result.folds.resize(n);
  std::mutex hook_mutex;
  auto run_fold = [&](std::size_t k) {
    const auto& fold = folds[k];
    FoldOutcome& outcome = result.folds[k];
    outcome.held_out = fold.held_out;
    std::vector<const Sample*> train_set, test_set;
    for (auto i : fold.train_indices) train_set.push_back(&corpus[i]);
    for (auto i : fold.test_indices) test_set.push_back(&corpus[i]);
    try {
      auto model = factory(k);
      model->fit(train_set, fold);
      outcome.predictions = model->predict(test_set);
      outcome.report = make_report(outcome.predictions);
      outcome.report.folds = outcome.report.folds_expected = 1;
      if (hooks.after_fold) {
        std::lock_guard lock(hook_mutex);
        hooks.after_fold(fold, *model, test_set);
      }
      outcome.ok = true;
    } catch (const std::exception& e) {
      outcome.ok = false;
      outcome.error = e.what();
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(jobs, n));
  if (workers == 1) {
    for (std::size_t k = 0; k < n; ++k) run_fold(k);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < workers; ++t)
      pool.emplace_back([&] {
        for (std::size_t k; (k = next.fetch_add(1)) < n;) run_fold(k);
      });
    for (auto& th : pool) th.join();
  }
  std::vector<std::string> warnings;
  for (const auto& f : result.folds) {
    if (f.ok) result.predictions.insert(result.predictions.end(), f.predictions.begin(), f.predictions.end());
    else warnings.push_back("fold " + f.held_out + " failed: " + f.error);
  }
  result.report = make_report(result.predictions);
  result.report.warnings = std::move(warnings);
  // A deliberate max_folds truncation is reported but is not incompleteness.
  result.report.folds_expected = n;
  for (const auto& f : result.folds) result.report.folds += f.ok;
  if (n < folds.size()) result.report.warnings.push_back("evaluated " + std::to_string(n) + " of " + std::to_string(folds.size()) + " folds");
  return result;
}

inline void write_predictions_jsonl(const std::filesystem::path& path, const std::vector<Prediction>& predictions) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  for (const auto& p : predictions) os << to_json(p).dump() << "\n";
}

/// Mean IoU, per class, between the difference-map top region of a synthetic
/// frame (conditioned on the sample's own class) and the toy patch region.
struct LocalityReport {
  std::array<double, kNumClasses> mean_iou{};
  std::array<std::size_t, kNumClasses> count{};
};

inline LocalityReport synthesis_locality(const IceGan& model, const std::vector<const Sample*>& samples, std::uint64_t seed) {
  LocalityReport r;
  Rng rng(seed);
  for (const auto* s : samples) {
    if (!s->patch) continue;
    auto syn = model.synthesize({&s->onset}, {s->cls}, rng);
    auto diff = norm2_diff(syn[0], s->onset);
    const auto c = static_cast<std::size_t>(s->cls);
    r.mean_iou[c] += mask_iou(diff.region.mask, s->patch->region());
    ++r.count[c];
  }
  for (std::size_t c = 0; c < kNumClasses; ++c)
    if (r.count[c]) r.mean_iou[c] /= static_cast<double>(r.count[c]);
  return r;
}

/// Mean pairwise L1 distance between synthetic frames of the same class.
inline std::array<double, kNumClasses> per_class_pairwise_l1(const std::vector<Image>& images, const std::vector<int>& classes) {
  std::array<double, kNumClasses> sum{};
  std::array<std::size_t, kNumClasses> pairs{};
  for (std::size_t i = 0; i < images.size(); ++i)
    for (std::size_t j = i + 1; j < images.size(); ++j) {
      if (classes[i] != classes[j]) continue;
      double d = 0.0;
      for (std::size_t p = 0; p < images[i].size(); ++p) d += std::abs(images[i][p] - images[j][p]);
      const auto c = static_cast<std::size_t>(classes[i]);
      sum[c] += d / static_cast<double>(images[i].size());
      ++pairs[c];
    }
  for (std::size_t c = 0; c < kNumClasses; ++c)
    if (pairs[c]) sum[c] /= static_cast<double>(pairs[c]);
  return sum;
}

}  // namespace icegan
