#pragma once

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "icegan/capsule_ops.hpp"
#include "icegan/conv.hpp"
#include "icegan/nn.hpp"
#include "icegan/tensor.hpp"

namespace icegan {

enum class DiscriminatorKind { capsule, cnn, cnn_large };

struct DiscriminatorConfig {
  DiscriminatorKind kind = DiscriminatorKind::capsule;
  std::size_t image_size = 128;
  std::array<std::size_t, 4> patch_channels{64, 128, 256, 512};
  double leaky_slope = 0.2;
  std::size_t primary_types = 8;
  std::size_t primary_dim = 16;
  std::size_t adv_dim = 256;
  std::size_t exp_dim = 32;
  std::size_t routing_iterations = 3;
  std::size_t num_classes = 3;
  std::array<std::size_t, 2> recon_hidden{512, 1024};
  std::size_t cnn_width = 128;
  std::size_t cnn_large_width = 384;

  std::size_t head_width() const { return kind == DiscriminatorKind::cnn_large ? cnn_large_width : cnn_width; }

  DiscriminatorConfig thinned(std::size_t factor) const {
    DiscriminatorConfig c = *this;
    for (auto& ch : c.patch_channels) ch = std::max<std::size_t>(1, ch / factor);
    c.adv_dim = std::max<std::size_t>(2, adv_dim / factor);
    c.exp_dim = std::max<std::size_t>(2, exp_dim / factor);
    for (auto& h : c.recon_hidden) h = std::max<std::size_t>(2, h / factor);
    c.cnn_width = std::max<std::size_t>(2, cnn_width / factor);
    c.cnn_large_width = std::max<std::size_t>(2, cnn_large_width / factor);
    return c;
  }
};

/// PatchGAN stage geometry: four k4 convs (stride 2, 2, 2, 1), then the
/// k4/s2 PrimaryCaps (or first CNN head) conv.
inline std::array<ConvSpec, 5> patch_specs(const DiscriminatorConfig& c, std::size_t fifth_out) {
  const auto& p = c.patch_channels;
  return {ConvSpec{1, p[0], 4, 2, 1}, ConvSpec{p[0], p[1], 4, 2, 1}, ConvSpec{p[1], p[2], 4, 2, 1},
          ConvSpec{p[2], p[3], 4, 1, 1}, ConvSpec{p[3], fifth_out, 4, 2, 1}};
}

/// Receptive field of one output unit after a stack of convolutions.
template <std::size_t N>
std::size_t receptive_field(const std::array<ConvSpec, N>& specs) {
  std::size_t rf = 1, jump = 1;
  for (const auto& s : specs) {
    rf += (s.kernel - 1) * jump;
    jump *= s.stride;
  }
  return rf;
}

struct DiscriminatorOutput {
  Tensor adv;         // [B] probability the input is real
  Tensor exp_scores;  // [B, K] capsule lengths or softmax probabilities
  Tensor exp_logits;  // [B, K] CNN variant only
  Tensor exp_poses;   // [B, K, d_exp] capsule variant only
};

class Discriminator {
 public:
  Discriminator(const DiscriminatorConfig& cfg, ParamRegistry& reg, Rng& rng, const std::string& prefix = "D")
      : cfg_(cfg), prefix_(prefix) {
    const bool caps = cfg.kind == DiscriminatorKind::capsule;
    const std::size_t fifth = caps ? cfg.primary_types * cfg.primary_dim : cfg.head_width();
    auto specs = patch_specs(cfg, fifth);
    for (std::size_t i = 0; i < 4; ++i) patch_[i] = Conv2d(reg, prefix + ".patch" + std::to_string(i + 1), specs[i], rng);
    grid_ = cfg.image_size;
    for (const auto& s : specs) grid_ = s.out_extent(grid_);
    if (caps) {
      primary_ = Conv2d(reg, prefix + ".primary", specs[4], rng);
      const std::size_t nin = num_primary();
      adv_w_ = reg.add(prefix + ".adv_caps",
                       normal_tensor({nin, 1, cfg.adv_dim, cfg.primary_dim}, route_std(nin, cfg.adv_dim, 1), rng));
      exp_w_ = reg.add(prefix + ".exp_caps", normal_tensor({nin, cfg.num_classes, cfg.exp_dim, cfg.primary_dim},
                                                           route_std(nin, cfg.exp_dim, cfg.num_classes), rng));
      const std::size_t side = cfg.image_size;
      recon_[0] = Linear(reg, prefix + ".recon1", cfg.num_classes * cfg.exp_dim, cfg.recon_hidden[0], rng);
      recon_[1] = Linear(reg, prefix + ".recon2", cfg.recon_hidden[0], cfg.recon_hidden[1], rng);
      recon_[2] = Linear(reg, prefix + ".recon3", cfg.recon_hidden[1], side * side, rng);
    } else {
      head1_ = Conv2d(reg, prefix + ".cnn1", specs[4], rng);
      head2_ = Conv2d(reg, prefix + ".cnn2", {cfg.head_width(), 1 + cfg.num_classes, 3, 1, 1}, rng);
    }
  }

  const DiscriminatorConfig& config() const { return cfg_; }
  bool is_capsule() const { return cfg_.kind == DiscriminatorKind::capsule; }
  std::size_t primary_grid() const { return grid_; }
  std::size_t num_primary() const { return cfg_.primary_types * grid_ * grid_; }

  /// PatchGAN features [B, 512, 15, 15] for a 128x128 input.
  Tensor encode(const Tensor& x) const {
    if (x.rank() != 4 || x.dim(1) != 1 || x.dim(2) != cfg_.image_size || x.dim(3) != cfg_.image_size) {
      throw ShapeError("discriminator expects [B, 1, " + std::to_string(cfg_.image_size) + ", " +
                       std::to_string(cfg_.image_size) + "], got " + shape_str(x.shape()));
    }
    Tensor h = x;
    for (const auto& conv : patch_) h = leaky_relu(conv(h), cfg_.leaky_slope);
    return h;
  }

  /// Squashed PrimaryCaps poses [B, Nprim, d_prim].
  Tensor primary_capsules(const Tensor& features) const {
    const std::size_t batch = features.dim(0), types = cfg_.primary_types, dim = cfg_.primary_dim;
    Tensor p = primary_(features);  // [B, types*dim, g, g]
    const std::size_t cells = grid_ * grid_;
    p = transpose(reshape(p, {batch * types, dim, cells}));  // [B*types, cells, dim]
    return squash(reshape(p, {batch, types * cells, dim}));
  }

  struct Traces {
    RoutingTrace adv, exp;
  };

  DiscriminatorOutput forward(const Tensor& x, Traces* traces = nullptr) const {
    Tensor h = encode(x);
    const std::size_t batch = x.dim(0);
    DiscriminatorOutput out;
    if (is_capsule()) {
      Tensor u = primary_capsules(h);
      Tensor adv_v = squash(dynamic_route(capsule_predict(u, adv_w_), cfg_.routing_iterations, traces ? &traces->adv : nullptr));
      out.adv = reshape(vector_norm(adv_v), {batch});
      out.exp_poses = squash(dynamic_route(capsule_predict(u, exp_w_), cfg_.routing_iterations, traces ? &traces->exp : nullptr));
      out.exp_scores = vector_norm(out.exp_poses);
    } else {
      Tensor logits = global_avg_pool(head2_(leaky_relu(head1_(h), cfg_.leaky_slope)));  // [B, 1 + K]
      out.adv = reshape(sigmoid(slice(logits, 1, 0, 1)), {batch});
      out.exp_logits = slice(logits, 1, 1, 1 + cfg_.num_classes);
      out.exp_scores = softmax(out.exp_logits);
    }
    return out;
  }

  /// Masks all but the true class poses and decodes a [B, 1, H, W] image in [0, 1].
  Tensor reconstruct(const Tensor& exp_poses, const std::vector<int>& classes) const {
    if (!is_capsule()) throw std::logic_error("reconstruction head exists only on the capsule discriminator");
    const std::size_t batch = exp_poses.dim(0), k = cfg_.num_classes, d = cfg_.exp_dim;
    if (classes.size() != batch) throw ShapeError("reconstruct: " + std::to_string(classes.size()) + " labels for batch " + std::to_string(batch));
    Buffer mask(batch * k, 0.0);
    for (std::size_t b = 0; b < batch; ++b) {
      if (classes[b] < 0 || static_cast<std::size_t>(classes[b]) >= k) {
        throw std::invalid_argument("reconstruct: class index " + std::to_string(classes[b]) + " out of range");
      }
      mask[b * k + static_cast<std::size_t>(classes[b])] = 1.0;
    }
    Tensor masked = reshape(mul(exp_poses, Tensor({batch, k, 1}, std::move(mask))), {batch, k * d});
    Tensor h = relu(recon_[0](masked));
    h = relu(recon_[1](h));
    return reshape(sigmoid(recon_[2](h)), {batch, 1, cfg_.image_size, cfg_.image_size});
  }

 private:
  // Keeps the initial pre-squash upper-capsule norm near the lower-capsule norm.
  static double route_std(std::size_t nin, std::size_t dout, std::size_t nout) {
    return static_cast<double>(nout) / std::sqrt(static_cast<double>(nin * dout));
  }

  DiscriminatorConfig cfg_;
  std::string prefix_;
  std::size_t grid_ = 0;
  std::array<Conv2d, 4> patch_;
  Conv2d primary_;
  Tensor adv_w_, exp_w_;
  std::array<Linear, 3> recon_;
  Conv2d head1_, head2_;
};

/// Parameters on the discriminating path (the reconstruction regulariser excluded).
inline std::size_t inference_parameter_count(const ParamRegistry& reg, const std::string& prefix = "D") {
  return reg.parameter_count(prefix + ".") - reg.parameter_count(prefix + ".recon");
}

}  // namespace icegan
