#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "icegan/data.hpp"
#include "icegan/discriminator.hpp"
#include "icegan/generator.hpp"
#include "icegan/losses.hpp"
#include "icegan/metrics.hpp"
#include "icegan/nn.hpp"
#include "icegan/serialize.hpp"

namespace icegan {

enum class ImageTarget { onset, apex };

struct TrainOptions {
  std::size_t epochs = 100;
  std::size_t batch = 16;
  double lr = 1e-3;
  double min_lr = 0.0;
  std::uint64_t seed = 1;
  std::size_t warmup_epochs = 10;        // before ExpCaps also sees synthetic samples
  std::size_t checkpoint_every = 10;
  std::uint64_t perceptual_seed = 7;
  ImageTarget pixel_target = ImageTarget::apex;
  ImageTarget perceptual_target = ImageTarget::onset;
  bool use_neighbors = true;             // cycle neighbour frames as real D samples
  bool discriminator_only = false;       // recognition baseline without synthesis
};

struct ModelConfig {
  GeneratorConfig generator;
  DiscriminatorConfig discriminator;

  ModelConfig thinned(std::size_t factor) const {
    if (factor <= 1) return *this;
    return {generator.thinned(factor), discriminator.thinned(factor)};
  }
};

/// Generator, discriminator, and the frozen perceptual network, each with
/// its own registry so a step on one side cannot touch the other.
class IceGan {
 public:
  IceGan(const ModelConfig& cfg, std::uint64_t seed, std::uint64_t perceptual_seed = 7)
      : cfg_(cfg),
        g_rng_(Rng::derive(seed, 0x6701)),
        d_rng_(Rng::derive(seed, 0xd001)),
        generator_(cfg.generator, g_reg_, g_rng_),
        discriminator_(cfg.discriminator, d_reg_, d_rng_),
        perceptual_(perceptual_seed) {}

  IceGan(const IceGan&) = delete;
  IceGan& operator=(const IceGan&) = delete;

  const ModelConfig& config() const { return cfg_; }
  const Generator& generator() const { return generator_; }
  const Discriminator& discriminator() const { return discriminator_; }
  const PerceptualNet& perceptual() const { return perceptual_; }
  ParamRegistry& g_params() { return g_reg_; }
  ParamRegistry& d_params() { return d_reg_; }
  const ParamRegistry& g_params() const { return g_reg_; }
  const ParamRegistry& d_params() const { return d_reg_; }

  NamedTensors state() const {
    NamedTensors all = g_reg_.named_tensors();
    for (auto& p : d_reg_.named_tensors()) all.push_back(std::move(p));
    return all;
  }
  void load(const NamedTensors& state) {
    g_reg_.load(state);
    d_reg_.load(state);
  }
  void save(const std::filesystem::path& path) const { write_checkpoint(path, state()); }

  /// Argmax of the discriminator's expression scores, without recording a tape.
  std::vector<Prediction> predict(const std::vector<const Sample*>& samples, std::size_t batch = 16) const {
    NoGradScope no_grad;
    std::vector<Prediction> out;
    for (std::size_t start = 0; start < samples.size(); start += batch) {
      const std::size_t end = std::min(samples.size(), start + batch);
      std::vector<const Image*> imgs;
      for (std::size_t i = start; i < end; ++i) imgs.push_back(&samples[i]->apex);
      auto d = discriminator_.forward(stack_images(imgs));
      const std::size_t k = cfg_.discriminator.num_classes;
      for (std::size_t i = start; i < end; ++i) {
        const std::size_t b = i - start;
        Prediction p;
        p.sample_id = samples[i]->id;
        p.subject = samples[i]->subject;
        p.dataset = samples[i]->dataset;
        p.truth = samples[i]->cls;
        p.adv_len = d.adv[b];
        for (std::size_t c = 0; c < k && c < kNumClasses; ++c) {
          p.exp_scores[c] = d.exp_scores[b * k + c];
          if (p.exp_scores[c] > p.exp_scores[static_cast<std::size_t>(p.predicted)]) p.predicted = static_cast<int>(c);
        }
        out.push_back(std::move(p));
      }
    }
    return out;
  }

  /// Synthetic apex frames in [-1, 1] for one onset per entry.
  std::vector<Image> synthesize(const std::vector<const Image*>& onsets, const std::vector<int>& classes, Rng& rng) const {
    NoGradScope no_grad;
    Tensor x = generator_.synthesize(stack_images(onsets), classes, rng);
    std::vector<Image> out(onsets.size());
    for (std::size_t b = 0; b < onsets.size(); ++b) {
      out[b].assign(x.data().begin() + static_cast<std::ptrdiff_t>(b * kImagePixels),
                    x.data().begin() + static_cast<std::ptrdiff_t>((b + 1) * kImagePixels));
    }
    return out;
  }

 private:
  ModelConfig cfg_;
  ParamRegistry g_reg_, d_reg_;
  Rng g_rng_, d_rng_;
  Generator generator_;
  Discriminator discriminator_;
  PerceptualNet perceptual_;
};

struct LossRecord {
  std::size_t epoch = 0, step = 0;
  double d_adv = 0, g_adv = 0, l_pixel = 0, l_per = 0, l_margin = 0, l_rec = 0, lr = 0;
};

inline constexpr const char* kLossCsvHeader = "epoch,step,d_adv,g_adv,l_pixel,l_per,l_margin,l_rec,lr";

inline std::string to_csv(const LossRecord& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%zu,%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g", r.epoch, r.step, r.d_adv, r.g_adv,
                r.l_pixel, r.l_per, r.l_margin, r.l_rec, r.lr);
  return buf;
}

class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(const std::string& what, const LossRecord& r) : std::runtime_error(what), record(r) {}
  LossRecord record;
};

/// One mini-batch: onset, apex target, the real frame shown to D, labels.
struct Batch {
  Tensor onset, apex, real;
  std::vector<int> classes;
};

namespace detail {
/// L_cls on the real frames: margin + beta * reconstruction for capsules,
/// cross-entropy for the CNN heads. Optionally adds the class term on the
/// synthetic frames.
inline Tensor classification_loss(const Discriminator& D, const DiscriminatorOutput& real_out,
                                  const DiscriminatorOutput* fake_out, const Batch& batch, const LossWeights& w,
                                  LossRecord& rec) {
  if (!D.is_capsule()) {
    Tensor ce = cross_entropy(real_out.exp_logits, batch.classes);
    if (fake_out) ce = add(ce, cross_entropy(fake_out->exp_logits, batch.classes));
    rec.l_margin = ce.item();
    return ce;
  }
  Tensor margin = l_margin(real_out.exp_scores, batch.classes, w);
  if (fake_out) margin = add(margin, l_margin(fake_out->exp_scores, batch.classes, w));
  Tensor target01 = scale(add_scalar(batch.real, 1.0), 0.5);
  Tensor l_rec = mse(D.reconstruct(real_out.exp_poses, batch.classes), target01);
  rec.l_margin = margin.item();
  rec.l_rec = l_rec.item();
  return add(margin, scale(l_rec, w.beta));
}
}  // namespace detail

/// One alternating update. The D step sees the real frame and a detached
/// synthetic frame; the G step sees D with its parameters frozen.
namespace detail {
inline LossRecord train_step_impl(IceGan& model, const Batch& batch, const LossWeights& w, double lr, bool margin_on_fake,
                                  Rng& noise_rng, const TrainOptions& opts) {
  const auto& G = model.generator();
  const auto& D = model.discriminator();
  const std::size_t n = batch.classes.size();
  LossRecord rec;
  rec.lr = lr;

  if (opts.discriminator_only) {
    model.d_params().zero_grad();
    auto real_out = D.forward(batch.real);
    Tensor d_loss = scale(detail::classification_loss(D, real_out, nullptr, batch, w, rec), w.mer);
    if (!std::isfinite(d_loss.item())) throw NonFiniteLoss("non-finite discriminator loss", rec);
    backward(d_loss);
    adam_step(model.d_params(), lr);
    return rec;
  }

  Tensor fake = G.forward(batch.onset, batch.classes, G.sample_noise(n, noise_rng));

  // Discriminator.
  model.d_params().zero_grad();
  {
    auto real_out = D.forward(batch.real);
    auto fake_out = D.forward(fake.detach());
    GanTerms gan = l_gan(real_out.adv, fake_out.adv);
    Tensor cls = detail::classification_loss(D, real_out, margin_on_fake ? &fake_out : nullptr, batch, w, rec);
    rec.d_adv = gan.d_term.item();
    Tensor d_loss = add(scale(gan.d_term, w.adv), scale(cls, w.mer));
    if (!std::isfinite(d_loss.item())) throw NonFiniteLoss("non-finite discriminator loss", rec);
    backward(d_loss);
    adam_step(model.d_params(), lr);
  }

  // Generator.
  model.g_params().zero_grad();
  {
    FreezeGuard frozen(model.d_params());
    auto fake_out = D.forward(fake);
    GanTerms gan = l_gan(Tensor(), fake_out.adv);
    const Tensor& pix_target = opts.pixel_target == ImageTarget::apex ? batch.apex : batch.onset;
    const Tensor& per_target = opts.perceptual_target == ImageTarget::onset ? batch.onset : batch.apex;
    Tensor pix = l_pixel(fake, pix_target);
    Tensor per = l_perceptual(per_target, fake, model.perceptual());
    rec.g_adv = gan.g_term.item();
    rec.l_pixel = pix.item();
    rec.l_per = per.item();
    Tensor g_loss = add(scale(gan.g_term, w.adv), scale(add(pix, scale(per, w.alpha)), w.mes));
    if (!std::isfinite(g_loss.item())) throw NonFiniteLoss("non-finite generator loss", rec);
    backward(g_loss);
    adam_step(model.g_params(), lr);
  }
  return rec;
}

}  // namespace detail

inline LossRecord train_step(IceGan& model, const Batch& batch, const LossWeights& w, double lr, bool margin_on_fake,
                             Rng& noise_rng, const TrainOptions& opts = {}) {
  try {
    return detail::train_step_impl(model, batch, w, lr, margin_on_fake, noise_rng, opts);
  } catch (const NonFiniteRouting& e) {
    LossRecord rec;
    rec.lr = lr;
    throw NonFiniteLoss(e.what(), rec);
  }
}

struct TrainingCallbacks {
  std::function<void(const LossRecord&)> on_step;
  std::function<void(std::size_t epoch, const IceGan&)> on_checkpoint;
};

struct TrainResult {
  std::vector<LossRecord> losses;
  std::vector<std::filesystem::path> checkpoints;
  std::size_t steps = 0;
  double seconds = 0.0;
};

namespace detail {
inline std::filesystem::path checkpoint_path(const std::filesystem::path& dir, std::size_t epoch) {
  char name[32];
  std::snprintf(name, sizeof name, "ckpt_epoch%03zu.bin", epoch);
  return dir / name;
}
}  // namespace detail

/// Trains on `train` for opts.epochs. With a run directory, writes loss.csv,
/// the initial checkpoint, one every checkpoint_every epochs, and model.bin.
/// A non-finite loss stops the run and leaves earlier checkpoints in place.
inline TrainResult train(IceGan& model, const std::vector<const Sample*>& train_set, const TrainOptions& opts,
                         const LossWeights& w, const std::filesystem::path& run_dir = {},
                         const TrainingCallbacks& callbacks = {}) {
  w.validate();
  if (opts.batch == 0) throw std::invalid_argument("batch size must be positive");
  if (train_set.empty() && opts.epochs > 0) throw std::invalid_argument("training set is empty");
  const auto start_time = std::chrono::steady_clock::now();
  TrainResult result;
  std::ofstream csv;
  if (!run_dir.empty()) {
    std::filesystem::create_directories(run_dir);
    csv.open(run_dir / "loss.csv", std::ios::trunc);
    if (!csv) throw std::runtime_error("cannot write " + (run_dir / "loss.csv").string());
    csv << kLossCsvHeader << "\n";
  }
  auto checkpoint = [&](std::size_t epoch) {
    if (callbacks.on_checkpoint) callbacks.on_checkpoint(epoch, model);
    if (run_dir.empty()) return;
    const auto path = detail::checkpoint_path(run_dir, epoch);
    model.save(path);
    result.checkpoints.push_back(path);
  };
  checkpoint(0);

  // Real frames for D: apex and its four neighbours, cycled by epoch.
  std::vector<std::vector<Sample>> variants;
  variants.reserve(train_set.size());
  for (const auto* s : train_set) {
    if (opts.use_neighbors) variants.push_back(augment_neighbors(*s));
    else variants.push_back({*s});
  }

  LrSchedule sched{opts.lr, static_cast<double>(opts.epochs), opts.min_lr};
  Rng order_rng = Rng::derive(opts.seed, 0x0de7);
  Rng noise_rng = Rng::derive(opts.seed, 0x2015e);
  std::vector<std::size_t> order(train_set.size());
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    const double lr = cosine_lr(static_cast<double>(epoch), sched);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    order_rng.shuffle(order);
    for (std::size_t start = 0, step = 0; start < order.size(); start += opts.batch, ++step) {
      const std::size_t end = std::min(order.size(), start + opts.batch);
      std::vector<const Image*> on, ap, real;
      Batch b;
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t i = order[k];
        const auto& v = variants[i];
        on.push_back(&train_set[i]->onset);
        ap.push_back(&train_set[i]->apex);
        real.push_back(&v[(epoch + i) % v.size()].apex);
        b.classes.push_back(train_set[i]->cls);
      }
      b.onset = stack_images(on);
      b.apex = stack_images(ap);
      b.real = stack_images(real);
      LossRecord r;
      try {
        r = train_step(model, b, w, lr, epoch >= opts.warmup_epochs, noise_rng, opts);
      } catch (NonFiniteLoss& e) {
        e.record.epoch = epoch;
        e.record.step = step;
        if (csv) csv.flush();
        throw;
      }
      r.epoch = epoch;
      r.step = step;
      if (csv) csv << to_csv(r) << "\n";
      if (callbacks.on_step) callbacks.on_step(r);
      result.losses.push_back(r);
      ++result.steps;
    }
    if (opts.checkpoint_every > 0 && (epoch + 1) % opts.checkpoint_every == 0) checkpoint(epoch + 1);
  }
  if (!run_dir.empty()) {
    model.save(run_dir / "model.bin");
    csv.flush();
  }
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_time).count();
  return result;
}

}  // namespace icegan
