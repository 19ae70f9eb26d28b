#pragma once

#include <array>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "icegan/grm.hpp"
#include "icegan/nn.hpp"
#include "icegan/random.hpp"
#include "icegan/tensor.hpp"

namespace icegan {

/// How encoder level i in [2, 6] reaches the decoder.
enum class SkipMode {
  none,  // plain encoder-decoder, no encoder features reach the decoder
  skip,  // identity skip connection
  se,    // squeeze-and-excitation gated skip
  grm,   // graph reasoning
};

enum class DecoderFusion { concat, add };

inline constexpr std::size_t kLevels = 6;

struct GeneratorConfig {
  std::array<std::size_t, kLevels> channels{20, 40, 80, 160, 320, 320};
  std::size_t image_size = 128;
  std::size_t noise_dim = 100;
  std::size_t num_classes = 3;
  SkipMode skip = SkipMode::grm;
  DecoderFusion fusion = DecoderFusion::concat;
  GrmOptions grm;
  // false: DCGAN-style decoder from (0, z, c) only; requires skip == none.
  bool use_encoder = true;

  std::size_t embedding_dim() const { return channels.back(); }
  std::size_t seed_dim() const { return embedding_dim() + noise_dim + num_classes; }

  /// Same ladder with every channel count divided by `factor` (at least 1).
  GeneratorConfig thinned(std::size_t factor) const {
    GeneratorConfig c = *this;
    for (auto& ch : c.channels) ch = std::max<std::size_t>(1, ch / factor);
    return c;
  }
};

/// One-hot rows [B, num_classes] for class indices.
inline Tensor one_hot(const std::vector<int>& classes, std::size_t num_classes) {
  Buffer v(classes.size() * num_classes, 0.0);
  for (std::size_t b = 0; b < classes.size(); ++b) {
    if (classes[b] < 0 || static_cast<std::size_t>(classes[b]) >= num_classes) {
      throw std::invalid_argument("class index " + std::to_string(classes[b]) + " out of range");
    }
    v[b * num_classes + static_cast<std::size_t>(classes[b])] = 1.0;
  }
  return Tensor({classes.size(), num_classes}, std::move(v));
}

/// s = concat(e, z, c) as [B, dim(e) + dim(z) + dim(c)]; c must be one-hot.
inline Tensor make_seed(const Tensor& embedding, const Tensor& noise, const Tensor& label) {
  const std::size_t batch = embedding.dim(0);
  Tensor e = reshape(embedding, {batch, embedding.numel() / batch});
  if (noise.rank() != 2 || label.rank() != 2 || noise.dim(0) != batch || label.dim(0) != batch) {
    throw ShapeError("make_seed: e " + shape_str(embedding.shape()) + ", z " + shape_str(noise.shape()) + ", c " +
                     shape_str(label.shape()));
  }
  const std::size_t k = label.dim(1);
  for (std::size_t b = 0; b < batch; ++b) {
    std::size_t ones = 0;
    for (std::size_t j = 0; j < k; ++j) {
      const double x = label[b * k + j];
      if (x == 1.0) ++ones;
      else if (x != 0.0) ones = k + 1;
    }
    if (ones != 1) throw std::invalid_argument("make_seed: class vector of sample " + std::to_string(b) + " is not one-hot");
  }
  return concat({e, noise, label}, 1);
}

class Generator {
 public:
  struct Encoding {
    Tensor embedding;                       // [B, E, 1, 1]
    std::array<Tensor, kLevels> features;   // f_1 .. f_6
  };

  Generator(const GeneratorConfig& cfg, ParamRegistry& reg, Rng& rng, const std::string& prefix = "G")
      : cfg_(cfg) {
    if (!cfg.use_encoder && cfg.skip != SkipMode::none) {
      throw std::invalid_argument("a generator without encoder cannot use skip paths");
    }
    const auto& ch = cfg.channels;
    std::size_t extent = cfg.image_size;
    for (std::size_t i = 0; i < kLevels; ++i) {
      const std::size_t in = i == 0 ? 1 : ch[i - 1];
      if (cfg.use_encoder) encoder_[i] = Conv2d(reg, prefix + ".enc" + std::to_string(i + 1), {in, ch[i], 4, 2, 1}, rng);
      if (extent % 2) throw std::invalid_argument("image size must halve cleanly through the encoder");
      extent /= 2;
    }
    if (extent != 2) throw std::invalid_argument("encoder ladder must end at 2x2 (image size 128)");
    if (cfg.use_encoder) bottleneck_ = Conv2d(reg, prefix + ".bottleneck", {ch[5], cfg.embedding_dim(), 4, 2, 1}, rng);

    for (std::size_t i = 1; i < kLevels; ++i) {
      const std::string name = prefix + ".skip" + std::to_string(i + 1);
      if (cfg.skip == SkipMode::grm) grm_[i] = GraphReasoning(reg, name, ch[i], rng, cfg.grm);
      if (cfg.skip == SkipMode::se) se_[i] = SqueezeExcite(reg, name, ch[i], rng);
    }

    entry_ = Deconv2d(reg, prefix + ".dec_entry", {cfg.seed_dim(), ch[5], 4, 2, 1}, rng);
    const bool fused = cfg.skip != SkipMode::none;
    const std::size_t widen = fused && cfg.fusion == DecoderFusion::concat ? 2 : 1;
    for (std::size_t i = kLevels - 1; i >= 1; --i) {
      decoder_[i] = Deconv2d(reg, prefix + ".dec" + std::to_string(i + 1), {ch[i] * widen, ch[i - 1], 4, 2, 1}, rng);
    }
    head_ = Deconv2d(reg, prefix + ".head", {ch[0] * widen, 1, 4, 2, 1}, rng);
  }

  const GeneratorConfig& config() const { return cfg_; }

  Encoding encode(const Tensor& x) const {
    if (x.rank() != 4 || x.dim(1) != 1 || x.dim(2) != cfg_.image_size || x.dim(3) != cfg_.image_size) {
      throw ShapeError("generator expects [B, 1, " + std::to_string(cfg_.image_size) + ", " +
                       std::to_string(cfg_.image_size) + "], got " + shape_str(x.shape()));
    }
    Encoding enc;
    if (!cfg_.use_encoder) {
      enc.embedding = Tensor::zeros({x.dim(0), cfg_.embedding_dim(), 1, 1});
      return enc;
    }
    Tensor h = x;
    for (std::size_t i = 0; i < kLevels; ++i) {
      h = relu(encoder_[i](h));
      enc.features[i] = h;
    }
    enc.embedding = bottleneck_(h);
    return enc;
  }

  /// g_i for i in [2, 6] (indices 1..5); index 0 carries f_1 unchanged.
  std::array<Tensor, kLevels> skip_features(const Encoding& enc, std::array<GrmTrace, kLevels>* traces = nullptr) const {
    std::array<Tensor, kLevels> g;
    if (cfg_.skip == SkipMode::none) return g;
    g[0] = enc.features[0];
    for (std::size_t i = 1; i < kLevels; ++i) {
      switch (cfg_.skip) {
        case SkipMode::skip: g[i] = enc.features[i]; break;
        case SkipMode::se: g[i] = se_[i](enc.features[i]); break;
        case SkipMode::grm: g[i] = grm_[i](enc.features[i], traces ? &(*traces)[i] : nullptr); break;
        case SkipMode::none: break;
      }
    }
    return g;
  }

  /// Decodes a seed [B, seed_dim] into X_syn [B, 1, H, W] in [-1, 1].
  Tensor decode(const Tensor& seed, const std::array<Tensor, kLevels>& skips) const {
    const std::size_t batch = seed.dim(0);
    if (seed.numel() != batch * cfg_.seed_dim()) {
      throw ShapeError("decode: seed " + shape_str(seed.shape()) + ", expected width " + std::to_string(cfg_.seed_dim()));
    }
    Tensor f = relu(entry_(reshape(seed, {batch, cfg_.seed_dim(), 1, 1})));
    for (std::size_t i = kLevels - 1; i >= 1; --i) {
      f = relu(decoder_[i](fuse(skips[i], f, i)));
    }
    return tanh(head_(fuse(skips[0], f, 0)));
  }

  Tensor forward(const Tensor& x_on, const std::vector<int>& classes, const Tensor& noise,
                 std::array<GrmTrace, kLevels>* traces = nullptr) const {
    Encoding enc = encode(x_on);
    auto skips = skip_features(enc, traces);
    Tensor seed = make_seed(enc.embedding, noise, one_hot(classes, cfg_.num_classes));
    return decode(seed, skips);
  }

  /// Draws z ~ N(0, I) from `rng` and synthesises.
  Tensor synthesize(const Tensor& x_on, const std::vector<int>& classes, Rng& rng) const {
    return forward(x_on, classes, sample_noise(x_on.dim(0), rng));
  }

  Tensor sample_noise(std::size_t batch, Rng& rng) const { return normal_tensor({batch, cfg_.noise_dim}, 1.0, rng); }

  const Deconv2d& head() const { return head_; }

 private:
  Tensor fuse(const Tensor& g, const Tensor& f, std::size_t level) const {
    if (cfg_.skip == SkipMode::none) return f;
    if (!g.defined() || g.shape() != f.shape()) {
      throw ShapeError("decoder fusion at level " + std::to_string(level + 1) + ": skip " +
                       (g.defined() ? shape_str(g.shape()) : std::string("<missing>")) + " vs decoder " + shape_str(f.shape()));
    }
    return cfg_.fusion == DecoderFusion::concat ? concat({g, f}, 1) : add(g, f);
  }

  GeneratorConfig cfg_;
  std::array<Conv2d, kLevels> encoder_;
  Conv2d bottleneck_;
  std::array<GraphReasoning, kLevels> grm_;
  std::array<SqueezeExcite, kLevels> se_;
  Deconv2d entry_;
  std::array<Deconv2d, kLevels> decoder_;
  Deconv2d head_;
};

}  // namespace icegan
