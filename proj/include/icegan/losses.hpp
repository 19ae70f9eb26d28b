#pragma once

#include <array>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "icegan/conv.hpp"
#include "icegan/discriminator.hpp"
#include "icegan/generator.hpp"
#include "icegan/nn.hpp"
#include "icegan/tensor.hpp"

namespace icegan {

struct LossWeights {
  double adv = 0.1;     // lambda_adv
  double mes = 1.0;     // lambda_mes
  double mer = 1.0;     // lambda_mer
  double alpha = 0.1;   // perceptual weight inside L_ip
  double beta = 5e-4;   // reconstruction weight inside L_cls
  double m_plus = 0.9;
  double m_minus = 0.1;
  double lambda_k = 0.5;

  void validate() const {
    for (double v : {adv, mes, mer, alpha, beta, m_plus, m_minus, lambda_k}) {
      if (!(v >= 0.0)) throw std::invalid_argument("loss weights must be non-negative");
    }
    if (!(m_plus > m_minus)) throw std::invalid_argument("margin loss needs m_plus > m_minus");
  }
};

inline constexpr double kProbabilityClamp = 1e-7;

namespace detail {
inline void require_same_shape(const char* what, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError(std::string(what) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}
}  // namespace detail

/// Mean absolute difference.
inline Tensor l_pixel(const Tensor& synthetic, const Tensor& target) {
  detail::require_same_shape("l_pixel", synthetic, target);
  return mean(abs(sub(synthetic, target)));
}

/// Mean squared difference.
inline Tensor mse(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("mse", a, b);
  return mean(square(sub(a, b)));
}

/// Frozen seeded conv feature extractor standing in for a pre-trained cost
/// network. Four k4/s2 conv + ReLU stages; features tapped after stages 2 and 4.
class PerceptualNet {
 public:
  explicit PerceptualNet(std::uint64_t seed, std::array<std::size_t, 4> channels = {8, 16, 16, 32}) : seed_(seed) {
    Rng rng(seed);
    std::size_t in = 1;
    for (std::size_t i = 0; i < 4; ++i) {
      layers_[i] = Conv2d(reg_, "per" + std::to_string(i + 1), {in, channels[i], 4, 2, 1}, rng);
      in = channels[i];
    }
    reg_.set_trainable(false);
  }

  std::uint64_t seed() const { return seed_; }
  const ParamRegistry& parameters() const { return reg_; }

  std::array<Tensor, 2> features(const Tensor& x) const {
    Tensor h = relu(layers_[0](x));
    Tensor t2 = relu(layers_[1](h));
    h = relu(layers_[2](t2));
    return {t2, relu(layers_[3](h))};
  }

 private:
  std::uint64_t seed_;
  ParamRegistry reg_;
  std::array<Conv2d, 4> layers_;
};

/// Mean over taps of the mean squared feature distance.
inline Tensor l_perceptual(const Tensor& target, const Tensor& synthetic, const PerceptualNet& net) {
  detail::require_same_shape("l_perceptual", target, synthetic);
  auto ft = net.features(target);
  auto fs = net.features(synthetic);
  return scale(add(mse(fs[0], ft[0]), mse(fs[1], ft[1])), 0.5);
}

/// Margin loss on class capsule lengths [B, K], summed over classes and
/// averaged over the batch.
inline Tensor l_margin(const Tensor& lengths, const std::vector<int>& classes, const LossWeights& w = {}) {
  if (lengths.rank() != 2 || lengths.dim(0) != classes.size()) {
    throw ShapeError("l_margin: lengths " + shape_str(lengths.shape()) + " for " + std::to_string(classes.size()) + " labels");
  }
  const std::size_t batch = lengths.dim(0), k = lengths.dim(1);
  Buffer present(batch * k, 0.0), absent(batch * k, w.lambda_k);
  for (std::size_t b = 0; b < batch; ++b) {
    if (classes[b] < 0 || static_cast<std::size_t>(classes[b]) >= k) throw std::invalid_argument("l_margin: bad class index");
    present[b * k + static_cast<std::size_t>(classes[b])] = 1.0;
    absent[b * k + static_cast<std::size_t>(classes[b])] = 0.0;
  }
  Tensor upper = square(relu(add_scalar(scale(lengths, -1.0), w.m_plus)));
  Tensor lower = square(relu(add_scalar(lengths, -w.m_minus)));
  Tensor per = add(mul(Tensor({batch, k}, std::move(present)), upper), mul(Tensor({batch, k}, std::move(absent)), lower));
  return scale(sum(per), 1.0 / static_cast<double>(batch));
}

/// L_margin + beta * MSE(reconstruction, target01).
inline Tensor l_cls(const Tensor& margin, const Tensor& reconstruction, const Tensor& target01, double beta) {
  return add(margin, scale(mse(reconstruction, target01), beta));
}

/// Mean cross-entropy from logits [B, K] (CNN discriminator head).
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& classes) {
  const std::size_t batch = logits.dim(0), k = logits.dim(1);
  Buffer pick(batch * k, 0.0);
  for (std::size_t b = 0; b < batch; ++b) pick[b * k + static_cast<std::size_t>(classes.at(b))] = -1.0 / static_cast<double>(batch);
  return sum(mul(log_softmax(logits), Tensor({batch, k}, std::move(pick))));
}

struct GanTerms {
  Tensor d_term;  // -[log D(real) + log(1 - D(fake))]
  Tensor g_term;  // -log D(fake)
};

/// Adversarial terms from probabilities-of-real [B]; batch means.
inline GanTerms l_gan(const Tensor& d_real, const Tensor& d_fake) {
  const double lo = kProbabilityClamp, hi = 1.0 - kProbabilityClamp;
  GanTerms t;
  if (d_real.defined()) {
    Tensor fake_c = clamp(d_fake, lo, hi);
    Tensor real_term = mean(log(clamp(d_real, lo, hi)));
    Tensor fake_term = mean(log(add_scalar(scale(fake_c, -1.0), 1.0)));
    t.d_term = scale(add(real_term, fake_term), -1.0);
  }
  t.g_term = scale(mean(log(clamp(d_fake, lo, hi))), -1.0);
  return t;
}

/// Scalar loss terms of one step.
struct LossTerms {
  Tensor d_adv, g_adv, pixel, perceptual, margin, rec;
};

/// Fused objective: adv (d + g) + mes (pixel + alpha per) + mer (margin + beta rec).
inline Tensor l_total(const LossTerms& t, const LossWeights& w) {
  Tensor adv = add(t.d_adv, t.g_adv);
  Tensor ip = add(t.pixel, scale(t.perceptual, w.alpha));
  Tensor cls = add(t.margin, scale(t.rec, w.beta));
  return add(add(scale(adv, w.adv), scale(ip, w.mes)), scale(cls, w.mer));
}

}  // namespace icegan
