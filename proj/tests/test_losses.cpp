#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "icegan/losses.hpp"
#include "icegan/training.hpp"
#include "oracles.hpp"

using namespace icegan;

namespace {

double margin_of(std::vector<double> lengths, int truth) {
  return l_margin(Tensor({1, 3}, std::move(lengths)), {truth}).item();
}

ModelConfig tiny_model() {
  ModelConfig m = ModelConfig{}.thinned(10);
  m.discriminator = DiscriminatorConfig{}.thinned(8);
  return m;
}

Batch toy_batch(const std::vector<Sample>& corpus, std::size_t n) {
  Batch b;
  std::vector<const Image*> on, ap;
  for (std::size_t i = 0; i < n; ++i) {
    on.push_back(&corpus[i].onset);
    ap.push_back(&corpus[i].apex);
    b.classes.push_back(corpus[i].cls);
  }
  b.onset = stack_images(on);
  b.apex = stack_images(ap);
  b.real = b.apex;
  return b;
}

std::vector<std::vector<double>> snapshot(const ParamRegistry& reg) {
  std::vector<std::vector<double>> out;
  for (const auto& e : reg.entries()) out.emplace_back(e.value.data().begin(), e.value.data().end());
  return out;
}

const std::vector<Sample>& small_corpus() {
  static const auto c = [] {
    ToyCorpusOptions o;
    o.subjects = 3;
    o.samples_per_subject = 3;
    return generate_toy_corpus(o);
  }();
  return c;
}

}  // namespace

TEST(Margin, HandCases) {
  EXPECT_EQ(margin_of({0.9, 0.1, 0.1}, 0), 0.0);
  EXPECT_DOUBLE_EQ(margin_of({0.0, 0.0, 0.0}, 0), 0.81);
  EXPECT_DOUBLE_EQ(margin_of({0.9, 0.6, 0.1}, 0), 0.125);
}

TEST(Margin, MatchesOracleAndIsNonNegative) {
  Rng rng(51);
  for (int t = 0; t < 100; ++t) {
    const std::size_t batch = 4;
    std::vector<double> len = oracle::random_vec(batch * 3, rng, 0.0, 0.999);
    std::vector<int> cls;
    double ref = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
      cls.push_back(static_cast<int>(rng.below(3)));
      ref += oracle::margin(std::vector<double>(len.begin() + static_cast<long>(3 * b), len.begin() + static_cast<long>(3 * b + 3)),
                            cls.back());
    }
    const double got = l_margin(Tensor({batch, 3}, len), cls).item();
    EXPECT_NEAR(got, ref / batch, 1e-10);
    EXPECT_GE(got, 0.0);
  }
  EXPECT_THROW(l_margin(Tensor({1, 3}, {0.1, 0.1, 0.1}), {3}), std::invalid_argument);
}

TEST(Margin, ZeroExactlyWhenHingesInactive) {
  EXPECT_EQ(margin_of({0.95, 0.05, 0.0}, 0), 0.0);
  EXPECT_GT(margin_of({0.89, 0.05, 0.0}, 0), 0.0);
  EXPECT_GT(margin_of({0.95, 0.11, 0.0}, 0), 0.0);
}

TEST(Gan, HandCases) {
  auto half = l_gan(Tensor({2}, {0.5, 0.5}), Tensor({2}, {0.5, 0.5}));
  EXPECT_NEAR(half.d_term.item(), 2.0 * std::log(2.0), 1e-15);
  EXPECT_NEAR(half.g_term.item(), std::log(2.0), 1e-15);
  auto perfect = l_gan(Tensor({1}, {1.0}), Tensor({1}, {0.0}));
  EXPECT_LT(perfect.d_term.item(), 1e-6);
  EXPECT_TRUE(std::isfinite(perfect.g_term.item()));
}

TEST(Gan, MatchesOracle) {
  Rng rng(52);
  for (int t = 0; t < 100; ++t) {
    auto real = oracle::random_vec(5, rng, 0.0, 1.0), fake = oracle::random_vec(5, rng, 0.0, 1.0);
    auto ref = oracle::gan(real, fake);
    auto got = l_gan(Tensor({5}, real), Tensor({5}, fake));
    EXPECT_NEAR(got.d_term.item(), ref[0], 1e-10);
    EXPECT_NEAR(got.g_term.item(), ref[1], 1e-10);
  }
}

TEST(PixelAndPerceptual, BasicIdentities) {
  Rng rng(53);
  PerceptualNet net(7);
  Tensor a({1, 1, 128, 128}, oracle::random_vec(kImagePixels, rng));
  Tensor b({1, 1, 128, 128}, oracle::random_vec(kImagePixels, rng));
  EXPECT_EQ(l_perceptual(a, a, net).item(), 0.0);
  EXPECT_DOUBLE_EQ(l_perceptual(a, b, net).item(), l_perceptual(b, a, net).item());
  EXPECT_EQ(l_pixel(a, a).item(), 0.0);
  EXPECT_DOUBLE_EQ(l_pixel(Tensor::full({2, 2}, 1.0), Tensor::zeros({2, 2})).item(), 1.0);
  EXPECT_DOUBLE_EQ(mse(Tensor::zeros({3}), Tensor::full({3}, 1.0)).item(), 1.0);
  EXPECT_THROW(l_pixel(Tensor::zeros({2}), Tensor::zeros({3})), ShapeError);
}

TEST(Cls, BetaScalesReconstructionLinearly) {
  Tensor m = Tensor::scalar(0.3);
  Tensor recon = Tensor::zeros({4}), target = Tensor::full({4}, 0.5);
  const double one = l_cls(m, recon, target, 0.1).item() - 0.3;
  const double two = l_cls(m, recon, target, 0.2).item() - 0.3;
  EXPECT_NEAR(two, 2.0 * one, 1e-15);
  EXPECT_EQ(l_cls(Tensor::scalar(0.0), target, target, 5e-4).item(), 0.0);
}

TEST(Total, DecompositionMatchesFusedValue) {
  Rng rng(54);
  LossWeights w;
  for (int t = 0; t < 50; ++t) {
    LossTerms terms{Tensor::scalar(rng.uniform(0, 3)), Tensor::scalar(rng.uniform(0, 3)), Tensor::scalar(rng.uniform(0, 1)),
                    Tensor::scalar(rng.uniform(0, 1)), Tensor::scalar(rng.uniform(0, 1)), Tensor::scalar(rng.uniform(0, 1))};
    w.adv = rng.uniform(0, 1);
    w.alpha = rng.uniform(0, 1);
    const double separate = w.adv * (terms.d_adv.item() + terms.g_adv.item()) +
                            w.mes * (terms.pixel.item() + w.alpha * terms.perceptual.item()) +
                            w.mer * (terms.margin.item() + w.beta * terms.rec.item());
    EXPECT_NEAR(l_total(terms, w).item(), separate, 1e-12);
  }
}

TEST(Weights, Validation) {
  LossWeights w;
  EXPECT_NO_THROW(w.validate());
  w.m_plus = 0.05;
  EXPECT_THROW(w.validate(), std::invalid_argument);
  w = {};
  w.adv = -1.0;
  EXPECT_THROW(w.validate(), std::invalid_argument);
}

TEST(Adam, FirstStepMovesByLrAgainstGradientSign) {
  ParamRegistry reg;
  Tensor p = reg.add("p", Tensor({3}, {1.0, -2.0, 0.5}));
  backward(sum(mul(Tensor({3}, {2.0, -3.0, 0.0}), p)));
  auto missing = adam_step(reg, 0.01);
  EXPECT_TRUE(missing.empty());
  EXPECT_NEAR(p[0], 0.99, 1e-9);
  EXPECT_NEAR(p[1], -1.99, 1e-9);
  EXPECT_DOUBLE_EQ(p[2], 0.5);
  // Reversing the gradient sign moves the parameter the other way.
  reg.zero_grad();
  backward(sum(mul(Tensor({3}, {-2.0, 3.0, 0.0}), p)));
  const double before = p[0];
  adam_step(reg, 0.01);
  EXPECT_GT(p[0], before);
  ParamRegistry other;
  other.add("q", Tensor::zeros({1}));
  EXPECT_EQ(adam_step(other, 0.1), std::vector<std::string>{"q"});
}

TEST(Cosine, Endpoints) {
  LrSchedule s{1e-3, 100, 0.0};
  EXPECT_DOUBLE_EQ(cosine_lr(0, s), 1e-3);
  EXPECT_NEAR(cosine_lr(50, s), 5e-4, 1e-18);
  EXPECT_NEAR(cosine_lr(100, s), 0.0, 1e-18);
  for (double e = 1; e <= 100; ++e) EXPECT_LE(cosine_lr(e, s), cosine_lr(e - 1, s));
  EXPECT_THROW(cosine_lr(101, s), std::out_of_range);
}

TEST(TrainStep, ZeroWeightsChangeNothing) {
  IceGan model(tiny_model(), 3);
  LossWeights w;
  w.adv = w.mes = w.mer = 0.0;
  auto g0 = snapshot(model.g_params()), d0 = snapshot(model.d_params());
  Rng noise(1);
  train_step(model, toy_batch(small_corpus(), 2), w, 1e-3, true, noise);
  EXPECT_EQ(snapshot(model.g_params()), g0);
  EXPECT_EQ(snapshot(model.d_params()), d0);
}

TEST(TrainStep, DiscriminatorStepLeavesGeneratorUntouched) {
  // Discriminator-only steps run the D half of the update; G must not move.
  IceGan model(tiny_model(), 4);
  auto g0 = snapshot(model.g_params()), d0 = snapshot(model.d_params());
  TrainOptions opts;
  opts.discriminator_only = true;
  Rng noise(1);
  train_step(model, toy_batch(small_corpus(), 2), LossWeights{}, 1e-3, true, noise, opts);
  EXPECT_EQ(snapshot(model.g_params()), g0);
  EXPECT_NE(snapshot(model.d_params()), d0);
}

TEST(TrainStep, GeneratorStepLeavesDiscriminatorUntouched) {
  // With the D objective zeroed the D half is a no-op, so any change comes
  // from the G half, which must reach G only.
  IceGan model(tiny_model(), 5);
  auto g0 = snapshot(model.g_params()), d0 = snapshot(model.d_params());
  LossWeights w;
  w.mer = 0.0;
  w.adv = 0.0;
  Rng noise(1);
  train_step(model, toy_batch(small_corpus(), 2), w, 1e-3, true, noise);
  EXPECT_EQ(snapshot(model.d_params()), d0);
  EXPECT_NE(snapshot(model.g_params()), g0);
}

TEST(TrainStep, FrozenDiscriminatorReceivesNoGradientInGeneratorPass) {
  IceGan model(tiny_model(), 6);
  Rng noise(2);
  auto b = toy_batch(small_corpus(), 2);
  Tensor fake = model.generator().forward(b.onset, b.classes, model.generator().sample_noise(2, noise));
  model.d_params().zero_grad();
  {
    FreezeGuard frozen(model.d_params());
    backward(l_gan(Tensor(), model.discriminator().forward(fake).adv).g_term);
  }
  for (const auto& e : model.d_params().entries()) EXPECT_FALSE(e.value.has_grad()) << e.name;
  bool g_has = false;
  for (const auto& e : model.g_params().entries()) g_has = g_has || e.value.has_grad();
  EXPECT_TRUE(g_has);
}

TEST(TrainStep, NonFiniteLossAborts) {
  IceGan model(tiny_model(), 7);
  auto b = toy_batch(small_corpus(), 2);
  b.apex.mutable_data()[0] = std::numeric_limits<double>::quiet_NaN();
  Rng noise(1);
  EXPECT_THROW(train_step(model, b, LossWeights{}, 1e-3, false, noise), NonFiniteLoss);
}

TEST(Train, NonFiniteRunKeepsEarlierCheckpoints) {
  auto dir = std::filesystem::temp_directory_path() / "icegan_nonfinite";
  std::filesystem::remove_all(dir);
  auto corpus = small_corpus();
  corpus[0].apex[5] = std::numeric_limits<double>::infinity();
  std::vector<const Sample*> set;
  for (const auto& s : corpus) set.push_back(&s);
  IceGan model(tiny_model(), 8);
  TrainOptions opts;
  opts.epochs = 2;
  opts.batch = 9;
  opts.use_neighbors = false;
  EXPECT_THROW(train(model, set, opts, LossWeights{}, dir), NonFiniteLoss);
  EXPECT_TRUE(std::filesystem::exists(dir / "ckpt_epoch000.bin"));
  EXPECT_FALSE(std::filesystem::exists(dir / "model.bin"));
  std::filesystem::remove_all(dir);
}

TEST(Train, ReplayIsBitIdentical) {
  std::vector<const Sample*> set;
  for (const auto& s : small_corpus()) set.push_back(&s);
  TrainOptions opts;
  opts.epochs = 2;
  opts.batch = 4;
  opts.warmup_epochs = 1;
  auto run = [&] {
    IceGan model(tiny_model(), 9);
    auto r = train(model, set, opts, LossWeights{});
    std::vector<std::string> rows;
    for (const auto& l : r.losses) rows.push_back(to_csv(l));
    return std::make_pair(rows, snapshot(model.d_params()));
  };
  auto a = run(), b = run();
  EXPECT_EQ(a.first.size(), 6u);
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

TEST(Train, CheckpointsRoundTrip) {
  auto dir = std::filesystem::temp_directory_path() / "icegan_ckpt_rt";
  std::filesystem::remove_all(dir);
  std::vector<const Sample*> set;
  for (const auto& s : small_corpus()) set.push_back(&s);
  TrainOptions opts;
  opts.epochs = 1;
  opts.batch = 9;
  opts.checkpoint_every = 1;
  IceGan model(tiny_model(), 10);
  auto r = train(model, set, opts, LossWeights{}, dir);
  EXPECT_EQ(r.checkpoints.size(), 2u);
  IceGan copy(tiny_model(), 99);
  copy.load(read_checkpoint(dir / "model.bin"));
  auto pa = model.predict(set), pb = copy.predict(set);
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i].exp_scores, pb[i].exp_scores);
  std::ifstream csv(dir / "loss.csv");
  std::string header;
  std::getline(csv, header);
  EXPECT_EQ(header, kLossCsvHeader);
  std::filesystem::remove_all(dir);
}
