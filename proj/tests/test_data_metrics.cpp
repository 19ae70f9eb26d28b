#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "icegan/config.hpp"
#include "icegan/data.hpp"
#include "icegan/evaluation.hpp"
#include "icegan/metrics.hpp"
#include "oracles.hpp"

using namespace icegan;
namespace fs = std::filesystem;

namespace {

ToyCorpusOptions small_toy(std::size_t subjects = 4) {
  ToyCorpusOptions o;
  o.subjects = subjects;
  o.samples_per_subject = 3;
  return o;
}

fs::path fresh_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

void write_flat_pgm(const fs::path& p, std::size_t side, double v) {
  write_pgm(p, side, side, std::vector<double>(side * side, v));
}

ConfusionMatrix random_matrix(Rng& rng) {
  ConfusionMatrix cm;
  do {
    for (auto& row : cm.counts)
      for (auto& c : row) c = rng.below(6);
  } while (cm.total() == 0);
  return cm;
}

std::vector<std::pair<int, int>> pairs_of(const ConfusionMatrix& cm) {
  std::vector<std::pair<int, int>> out;
  for (int t = 0; t < 3; ++t)
    for (int p = 0; p < 3; ++p)
      for (std::uint64_t k = 0; k < cm.counts[t][p]; ++k) out.emplace_back(t, p);
  return out;
}

}  // namespace

TEST(Toy, DeterministicForASeed) {
  auto a = generate_toy_corpus(small_toy()), b = generate_toy_corpus(small_toy());
  ASSERT_EQ(a.size(), 12u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].id, b[i].id);
    EXPECT_EQ(a[i].apex, b[i].apex);
    EXPECT_EQ(a[i].onset, b[i].onset);
  }
  auto other = small_toy();
  other.seed = 99;
  EXPECT_NE(generate_toy_corpus(other)[0].apex, a[0].apex);
}

TEST(Toy, ClassesBalancedAndPatchesDisjoint) {
  auto corpus = generate_toy_corpus(small_toy());
  std::array<int, 3> n{};
  for (const auto& s : corpus) ++n[static_cast<std::size_t>(s.cls)];
  EXPECT_EQ(n, (std::array<int, 3>{4, 4, 4}));
  for (std::size_t s = 0; s < corpus.size(); s += 3) {
    auto r0 = corpus[s].patch->region(), r1 = corpus[s + 1].patch->region(), r2 = corpus[s + 2].patch->region();
    EXPECT_EQ(mask_iou(r0, r1), 0.0);
    EXPECT_EQ(mask_iou(r0, r2), 0.0);
    EXPECT_EQ(mask_iou(r1, r2), 0.0);
  }
}

TEST(Toy, ApexDiffersFromOnsetMostlyInsidePatch) {
  auto corpus = generate_toy_corpus(small_toy());
  for (const auto& s : corpus) {
    auto region = s.patch->region();
    double inside = 0.0, outside = 0.0;
    std::size_t ni = 0, no = 0;
    for (std::size_t i = 0; i < kImagePixels; ++i) {
      const double d = std::abs(s.apex[i] - s.onset[i]);
      (region[i] ? inside : outside) += d;
      ++(region[i] ? ni : no);
    }
    EXPECT_GT(inside / static_cast<double>(ni), 5.0 * outside / static_cast<double>(no)) << s.id;
  }
}

TEST(Toy, RangeAndNormalisationRoundTrip) {
  for (const auto& s : generate_toy_corpus(small_toy(3)))
    for (double v : s.apex) {
      ASSERT_GE(v, -1.0);
      ASSERT_LE(v, 1.0);
    }
  for (double v : {0.0, 0.25, 0.5, 1.0}) EXPECT_DOUBLE_EQ(to_disk(to_memory(v)), v);
  EXPECT_THROW(generate_toy_corpus(small_toy(2)), std::invalid_argument);
}

TEST(Toy, NeighboursShareLabelsAndCentreIsApex) {
  auto s = generate_toy_corpus(small_toy(3))[4];
  auto n = augment_neighbors(s);
  ASSERT_EQ(n.size(), 5u);
  std::set<std::string> ids;
  for (const auto& x : n) {
    EXPECT_EQ(x.cls, s.cls);
    EXPECT_EQ(x.subject, s.subject);
    ids.insert(x.id);
  }
  EXPECT_EQ(ids.size(), 5u);
  EXPECT_EQ(n[2].apex, s.apex);
  EXPECT_NE(n[0].apex, s.apex);
  EXPECT_EQ(n[0].apex_neighbor_index, -2);
  EXPECT_EQ(augment_neighbors(s)[1].apex, n[1].apex);
}

TEST(Pgm, RoundTripWithinQuantisation) {
  auto dir = fresh_dir("icegan_pgm");
  Rng rng(61);
  auto v = oracle::random_vec(12 * 7, rng, 0.0, 1.0);
  write_pgm(dir / "a.pgm", 12, 7, v);
  auto img = read_pgm(dir / "a.pgm");
  EXPECT_EQ(img.width, 12u);
  EXPECT_EQ(img.height, 7u);
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_LE(std::abs(img.disk01[i] - v[i]), 0.5 / 255 + 1e-12);
  std::ofstream(dir / "bad.pgm") << "P2\n1 1\n255\n0\n";
  EXPECT_THROW(read_pgm(dir / "bad.pgm"), std::runtime_error);
  fs::remove_all(dir);
}

TEST(Ingest, ReadsManifestAndMapsLabels) {
  auto dir = fresh_dir("icegan_ingest_ok");
  write_flat_pgm(dir / "on.pgm", 128, 0.2);
  write_flat_pgm(dir / "ap.pgm", 128, 0.6);
  std::ofstream(dir / "m.csv") << "subject,dataset,class,onset_path,apex_path\n"
                                  "s1,casme2,happiness,on.pgm,ap.pgm\n"
                                  "s2,samm,Surprise,on.pgm,ap.pgm\n"
                                  "s2,samm,repression,on.pgm,ap.pgm\n";
  auto r = ingest_real(dir / "m.csv");
  ASSERT_EQ(r.samples.size(), 3u);
  EXPECT_EQ(r.samples[0].cls, 0);
  EXPECT_EQ(r.samples[1].cls, 2);
  EXPECT_EQ(r.samples[2].cls, 1);
  EXPECT_EQ(r.samples[1].subject_key(), "samm/s2");
  EXPECT_NEAR(r.samples[0].apex[0], to_memory(153.0 / 255.0), 1e-12);
  fs::remove_all(dir);
}

TEST(Ingest, ItemisesEveryProblem) {
  auto dir = fresh_dir("icegan_ingest_bad");
  write_flat_pgm(dir / "ok.pgm", 128, 0.5);
  write_flat_pgm(dir / "small.pgm", 64, 0.5);
  std::ofstream(dir / "m.csv") << "subject,dataset,class,onset_path,apex_path\n"
                                  "s1,casme2,happiness,ok.pgm,missing.pgm\n"
                                  "s1,casme2,boredom,ok.pgm,ok.pgm\n"
                                  "s2,casme2,surprise,small.pgm,ok.pgm\n";
  try {
    ingest_real(dir / "m.csv");
    FAIL() << "expected IngestError";
  } catch (const IngestError& e) {
    ASSERT_EQ(e.items().size(), 3u);
    EXPECT_NE(e.items()[0].find("not found"), std::string::npos);
    EXPECT_NE(e.items()[1].find("boredom"), std::string::npos);
    EXPECT_NE(e.items()[2].find("64x64"), std::string::npos);
  }
  std::ofstream(dir / "h.csv") << "subject,class\n";
  EXPECT_THROW(ingest_real(dir / "h.csv"), IngestError);
  fs::remove_all(dir);
}

TEST(Loso, NoSubjectLeaksAcrossSplit) {
  auto corpus = generate_toy_corpus(small_toy(5));
  auto folds = loso_folds(corpus, EvalMode::cde);
  ASSERT_EQ(folds.size(), 5u);
  std::size_t tested = 0;
  for (const auto& f : folds) {
    for (auto i : f.test_indices) EXPECT_EQ(corpus[i].subject_key(), f.held_out);
    for (auto i : f.train_indices) EXPECT_NE(corpus[i].subject_key(), f.held_out);
    EXPECT_EQ(f.train_indices.size() + f.test_indices.size(), corpus.size());
    EXPECT_EQ(f.train_subjects.count(f.held_out), 0u);
    tested += f.test_indices.size();
  }
  EXPECT_EQ(tested, corpus.size());
}

TEST(Loso, SdeFiltersToOneDataset) {
  auto corpus = generate_toy_corpus(small_toy(4));
  for (std::size_t i = 0; i < 6; ++i) corpus[i].dataset = "other";
  auto folds = loso_folds(corpus, EvalMode::sde, "toy");
  EXPECT_EQ(folds.size(), 2u);
  for (const auto& f : folds)
    for (auto i : f.train_indices) EXPECT_EQ(corpus[i].dataset, "toy");
  EXPECT_THROW(loso_folds(corpus, EvalMode::sde), std::invalid_argument);
}

TEST(Metrics, BruteForceAgreementIsExact) {
  Rng rng(71);
  for (int t = 0; t < 1000; ++t) {
    auto cm = random_matrix(rng);
    auto s = uf1_uar(cm);
    auto ref = oracle::brute_force_scores(pairs_of(cm));
    EXPECT_EQ(s.uf1, ref.uf1);
    EXPECT_EQ(s.uar, ref.uar);
  }
}

TEST(Metrics, DiagonalAndSingleColumn) {
  ConfusionMatrix diag, column;
  for (int c = 0; c < 3; ++c) {
    diag.counts[c][c] = 5;
    column.counts[c][0] = 5;
  }
  EXPECT_EQ(uf1_uar(diag).uf1, 1.0);
  EXPECT_EQ(uf1_uar(diag).uar, 1.0);
  EXPECT_DOUBLE_EQ(uf1_uar(column).uar, 1.0 / 3.0);
  EXPECT_THROW(uf1_uar(ConfusionMatrix{}), std::invalid_argument);
}

TEST(Metrics, InvariantToRelabellingAndScaling) {
  Rng rng(72);
  const std::array<int, 3> perm{2, 0, 1};
  for (int t = 0; t < 200; ++t) {
    auto cm = random_matrix(rng);
    ConfusionMatrix permuted, scaled;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        permuted.counts[perm[i]][perm[j]] = cm.counts[i][j];
        scaled.counts[i][j] = 7 * cm.counts[i][j];
      }
    EXPECT_NEAR(uf1_uar(permuted).uf1, uf1_uar(cm).uf1, 1e-15);
    EXPECT_NEAR(uf1_uar(permuted).uar, uf1_uar(cm).uar, 1e-15);
    EXPECT_EQ(uf1_uar(scaled).uf1, uf1_uar(cm).uf1);
    EXPECT_EQ(uf1_uar(scaled).uar, uf1_uar(cm).uar);
  }
}

TEST(Metrics, CompositeIsSumOfDatasets) {
  Rng rng(73);
  std::vector<Prediction> preds;
  for (int i = 0; i < 300; ++i) {
    Prediction p;
    p.dataset = std::array<const char*, 3>{"smic", "casme2", "samm"}[rng.below(3)];
    p.truth = static_cast<int>(rng.below(3));
    p.predicted = static_cast<int>(rng.below(3));
    preds.push_back(p);
  }
  auto r = make_report(preds);
  ConfusionMatrix sum;
  for (const auto& [name, cm] : r.per_dataset) sum += cm;
  EXPECT_EQ(sum, r.pooled);
  EXPECT_EQ(r.per_dataset.size(), 3u);
  EXPECT_NE(render_table(r).find("Composite"), std::string::npos);
}

TEST(DiffMap, Cases) {
  std::vector<double> a(64, 0.0), b = a;
  auto same = norm2_diff(a, b, 8, 8);
  EXPECT_TRUE(same.region.empty);
  for (double v : same.values) EXPECT_EQ(v, 0.0);

  b[8 * 3 + 5] = 0.5;
  auto one = norm2_diff(b, a, 8, 8);
  EXPECT_FALSE(one.region.empty);
  EXPECT_EQ(one.region.pixels, 1u);
  EXPECT_EQ(one.values[8 * 3 + 5], 1.0);
  EXPECT_EQ(one.region.centroid_y, 3.0);
  EXPECT_EQ(one.region.centroid_x, 5.0);

  // Top 5% of 400 pixels = 20: a 4x5 block of large changes wins over small noise.
  std::vector<double> on(400, 0.0), syn(400, 0.01);
  for (std::size_t y = 2; y < 6; ++y)
    for (std::size_t x = 10; x < 15; ++x) syn[y * 20 + x] = 0.8;
  auto block = norm2_diff(syn, on, 20, 20);
  EXPECT_EQ(block.region.pixels, 20u);
  EXPECT_EQ(block.region.top, 2u);
  EXPECT_EQ(block.region.bottom, 5u);
  EXPECT_EQ(block.region.left, 10u);
  EXPECT_EQ(block.region.right, 14u);
  EXPECT_THROW(norm2_diff(a, std::vector<double>(3), 8, 8), ShapeError);
}

TEST(MaskIou, Cases) {
  std::vector<bool> a{true, true, false, false}, b{false, true, true, false};
  EXPECT_DOUBLE_EQ(mask_iou(a, b), 1.0 / 3.0);
  EXPECT_EQ(mask_iou(a, a), 1.0);
  EXPECT_EQ(mask_iou(std::vector<bool>(4, false), std::vector<bool>(4, false)), 0.0);
}

TEST(Baselines, OracleRandomMajority) {
  ToyCorpusOptions o = small_toy(6);
  o.samples_per_subject = 60;
  auto corpus = generate_toy_corpus(o);
  auto folds = loso_folds(corpus, EvalMode::cde);

  auto oracle = evaluate_loso([](std::size_t) { return std::make_unique<OracleModel>(); }, corpus, folds);
  EXPECT_EQ(oracle.report.scores.uf1, 1.0);
  EXPECT_TRUE(oracle.report.complete());

  auto random = evaluate_loso([](std::size_t k) { return std::make_unique<RandomModel>(1000 + k); }, corpus, folds);
  ASSERT_GE(random.predictions.size(), 300u);
  EXPECT_NEAR(random.report.scores.uar, 1.0 / 3.0, 0.1);

  auto majority = evaluate_loso([](std::size_t) { return std::make_unique<MajorityModel>(); }, corpus, folds);
  EXPECT_DOUBLE_EQ(majority.report.scores.uar, 1.0 / 3.0);
}

TEST(Loso, FailingFoldMarksReportIncomplete) {
  auto corpus = generate_toy_corpus(small_toy(3));
  auto folds = loso_folds(corpus, EvalMode::cde);
  struct Broken : FoldModel {
    void fit(const std::vector<const Sample*>&, const LosoSplit&) override { throw std::runtime_error("boom"); }
    std::vector<Prediction> predict(const std::vector<const Sample*>&) override { return {}; }
  };
  auto r = evaluate_loso(
      [](std::size_t k) -> std::unique_ptr<FoldModel> {
        if (k == 1) return std::make_unique<Broken>();
        return std::make_unique<OracleModel>();
      },
      corpus, folds);
  EXPECT_FALSE(r.report.complete());
  EXPECT_EQ(r.report.folds, 2u);
  ASSERT_EQ(r.report.warnings.size(), 1u);
  EXPECT_NE(r.report.warnings[0].find("boom"), std::string::npos);
}

TEST(Loso, ParallelFoldsMatchSerial) {
  auto corpus = generate_toy_corpus(small_toy(5));
  auto folds = loso_folds(corpus, EvalMode::cde);
  auto factory = [](std::size_t k) { return std::make_unique<RandomModel>(k); };
  auto serial = evaluate_loso(factory, corpus, folds, 0, {}, 1);
  auto parallel = evaluate_loso(factory, corpus, folds, 0, {}, 3);
  ASSERT_EQ(serial.predictions.size(), parallel.predictions.size());
  for (std::size_t i = 0; i < serial.predictions.size(); ++i) {
    EXPECT_EQ(serial.predictions[i].sample_id, parallel.predictions[i].sample_id);
    EXPECT_EQ(serial.predictions[i].predicted, parallel.predictions[i].predicted);
  }
  auto truncated = evaluate_loso(factory, corpus, folds, 2);
  EXPECT_EQ(truncated.folds.size(), 2u);
  EXPECT_TRUE(truncated.report.complete());
  EXPECT_EQ(truncated.report.warnings.back(), "evaluated 2 of 5 folds");
}

TEST(Config, JsonRoundTrip) {
  RunConfig c;
  c.model.generator.skip = SkipMode::se;
  c.model.discriminator.kind = DiscriminatorKind::cnn_large;
  c.model.discriminator.exp_dim = 16;
  c.train.lr = 2.5e-4;
  c.corpus.toy.subjects = 7;
  c.loss.beta = 1e-3;
  c.max_folds = 3;
  auto back = from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(back.model.generator.skip, SkipMode::se);
  EXPECT_EQ(back.train.lr, 2.5e-4);
}

TEST(Config, RejectsUnknownKeysAndBadEnums) {
  try {
    from_json(nlohmann::json::parse(R"({"model": {"grm_mdoe": "grm"}})"));
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("model.grm_mdoe"), std::string::npos);
  }
  try {
    from_json(nlohmann::json::parse(R"({"model": {"grm_mode": "graph"}})"));
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("none, skip, se, grm"), std::string::npos);
  }
  EXPECT_THROW(from_json(nlohmann::json::parse(R"({"optimizer": {"lr": "fast"}})")), ConfigError);
  RunConfig bad;
  bad.train.batch = 0;
  EXPECT_THROW(validate(bad), ConfigError);
  bad = {};
  bad.model.generator.use_encoder = false;
  EXPECT_THROW(validate(bad), ConfigError);
}

TEST(Config, FileOverlaysDefaults) {
  auto dir = fresh_dir("icegan_cfg");
  std::ofstream(dir / "c.json") << R"({"optimizer": {"epochs": 3}, "model": {"d_exp": 8}})";
  auto c = load_config(dir / "c.json");
  EXPECT_EQ(c.train.epochs, 3u);
  EXPECT_EQ(c.model.discriminator.exp_dim, 8u);
  EXPECT_EQ(c.train.batch, 16u);
  std::ofstream(dir / "broken.json") << "{";
  EXPECT_THROW(load_config(dir / "broken.json"), ConfigError);
  fs::remove_all(dir);
}
