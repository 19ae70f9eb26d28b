// Acceptance runner: one PASS/FAIL line per criterion.
//
//   acceptance                 all criteria
//   acceptance --criterion N   one criterion (exit 1 on FAIL)
//
// Training-based criteria (6-8) run under the budget protocols in
// protocol(); ICEGAN_ACCEPT_FULL=1 switches 6 to the literal default run.
// Trained fold models are cached under ICEGAN_ACCEPT_WORK (default
// ./acceptance_work) keyed by their full configuration, so criteria sharing
// a protocol train once.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "icegan/icegan.hpp"
#include "oracles.hpp"

using namespace icegan;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;
double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

fs::path work_root() {
  if (const char* w = std::getenv("ICEGAN_ACCEPT_WORK"); w && *w) return w;
  return "acceptance_work";
}

// ---------------------------------------------------------------------------
// 1. Gradient integrity

Verdict c1() {
  const auto t0 = Clock::now();
  std::ostringstream sink;
  auto run = cmd_gradcheck(false, "", sink);
  const double secs = since(t0);
  double worst = 0.0;
  std::string failed;
  for (const auto& s : run.suites) {
    worst = std::max(worst, s.report.max_rel_error());
    if (!s.report.passed()) failed += " " + s.name;
  }
  // The checker must also catch a wrong backward rule.
  auto control = cmd_gradcheck(true, "elementwise", sink);
  const bool ok = run.passed() && worst < 1e-4 && secs < 300.0 && !control.passed();
  std::string d = std::to_string(run.suites.size()) + " suites, max rel err " + fmt(worst, 3) + " (< 1e-4), " +
                  fmt(secs, 3) + " s (< 300 s), injected bug " + (control.passed() ? "MISSED" : "detected");
  if (!failed.empty()) d += "; failing:" + failed;
  return {ok, d};
}

// ---------------------------------------------------------------------------
// 2. Equation oracles

Verdict c2() {
  Rng rng(20260);
  double e_sim = 0.0, e_gcn = 0.0, e_margin = 0.0, e_gan = 0.0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t c = 2 + rng.below(6), h = 2 * (1 + rng.below(4)), w = 2 * (1 + rng.below(4)), ns = (h / 2) * (w / 2);
    Tensor f({1, c, h, w}, oracle::random_vec(c * h * w, rng));
    auto fhat = supernode_transform(f, Tensor({c, c, 3, 3}, oracle::random_vec(c * c * 9, rng, -0.5, 0.5)),
                                    Tensor({c}, oracle::random_vec(c, rng)));
    Tensor phi({c, c}, oracle::random_vec(c * c, rng)), theta({c, c}, oracle::random_vec(c * c, rng));
    Tensor m = similarity_map(fhat, phi, theta);
    const auto ref_m = oracle::similarity(values(fhat.features), values(phi), values(theta), c, ns);
    for (std::size_t i = 0; i < ref_m.size(); ++i) e_sim = std::max(e_sim, std::abs(m[i] - ref_m[i]));

    Tensor a({c, c}, oracle::random_vec(c * c, rng)), wt({c, c}, oracle::random_vec(c * c, rng));
    Tensor mi({1, c, c}, oracle::random_vec(c * c, rng));
    Tensor mhat = gcn_update(mi, a, wt);
    const auto ref_h = oracle::gcn(values(mi), values(a), values(wt), c);
    for (std::size_t i = 0; i < ref_h.size(); ++i) e_gcn = std::max(e_gcn, std::abs(mhat[i] - ref_h[i]));

    const auto len = oracle::random_vec(3, rng, 0.0, 0.999);
    const int truth = static_cast<int>(rng.below(3));
    e_margin = std::max(e_margin, std::abs(l_margin(Tensor({1, 3}, len), {truth}).item() - oracle::margin(len, truth)));

    const std::size_t b = 1 + rng.below(8);
    const auto real = oracle::random_vec(b, rng, 0.0, 1.0), fake = oracle::random_vec(b, rng, 0.0, 1.0);
    const auto ref = oracle::gan(real, fake);
    auto got = l_gan(Tensor({b}, real), Tensor({b}, fake));
    e_gan = std::max({e_gan, std::abs(got.d_term.item() - ref[0]), std::abs(got.g_term.item() - ref[1])});
  }
  auto margin = [](std::vector<double> l) { return l_margin(Tensor({1, 3}, std::move(l)), {0}).item(); };
  const double h0 = margin({0.9, 0.1, 0.1}), h1 = margin({0.0, 0.0, 0.0}), h2 = margin({0.9, 0.6, 0.1});
  const bool hand = h0 == 0.0 && h1 == 0.81 && h2 == 0.125;
  const double worst = std::max({e_sim, e_gcn, e_margin, e_gan});
  return {worst < 1e-10 && hand,
          "100 instances each: similarity " + fmt(e_sim, 2) + ", gcn " + fmt(e_gcn, 2) + ", margin " + fmt(e_margin, 2) +
              ", gan " + fmt(e_gan, 2) + " (< 1e-10); hand cases " + fmt(h0, 17) + ", " + fmt(h1, 17) + ", " + fmt(h2, 17) +
              (hand ? " exact" : " NOT exact")};
}

// ---------------------------------------------------------------------------
// 3. Capsule invariants

double coupling_entropy(const std::vector<double>& c, std::size_t nout) {
  double h = 0.0;
  for (std::size_t r = 0; r < c.size() / nout; ++r)
    for (std::size_t j = 0; j < nout; ++j)
      if (c[r * nout + j] > 0.0) h -= c[r * nout + j] * std::log(c[r * nout + j]);
  return h;
}

Verdict c3() {
  Rng rng(20261);
  // Norms from 1e-3 to 1e3 in a log spread.
  std::vector<double> s;
  for (int i = 0; i < 10000; ++i) {
    const std::size_t d = 16;
    auto v = oracle::random_vec(d, rng);
    double n = 0.0;
    for (double x : v) n += x * x;
    const double target = std::pow(10.0, rng.uniform(-3.0, 3.0)) / std::sqrt(n);
    for (double x : v) s.push_back(x * target);
  }
  Tensor sq = vector_norm(squash(Tensor({10000, 16}, s)));
  double max_norm = 0.0;
  for (double v : sq.data()) max_norm = std::max(max_norm, v);

  double worst_sum = 0.0;
  std::size_t iterations_seen = 0;
  for (int t = 0; t < 50; ++t) {
    const std::size_t nin = 1 + rng.below(40), nout = 1 + rng.below(6), d = 2 + rng.below(10), r = 1 + rng.below(5);
    Tensor u({2, nin, nout, d}, oracle::random_vec(2 * nin * nout * d, rng, -2.0, 2.0));
    RoutingTrace trace;
    dynamic_route(u, r, &trace);
    for (const auto& c : trace.couplings) {
      ++iterations_seen;
      for (std::size_t row = 0; row < 2 * nin; ++row) {
        double sum = 0.0;
        for (std::size_t j = 0; j < nout; ++j) sum += c[row * nout + j];
        worst_sum = std::max(worst_sum, std::abs(sum - 1.0));
      }
    }
  }

  // Every lower capsule predicts u* for upper 0; the others get small, varied vectors.
  const std::size_t nin = 8, nout = 3, d = 4;
  const std::vector<double> ustar{0.7, -0.5, 0.4, 0.6};
  std::vector<double> uh(nin * nout * d);
  for (std::size_t i = 0; i < nin; ++i)
    for (std::size_t j = 0; j < nout; ++j)
      for (std::size_t k = 0; k < d; ++k)
        uh[(i * nout + j) * d + k] = j == 0 ? ustar[k] : 0.15 * std::sin(static_cast<double>(5 * i + 11 * j + 3 * k + 1));
  RoutingTrace trace;
  dynamic_route(Tensor({1, nin, nout, d}, uh), 8, &trace);
  bool monotone = true;
  std::string ent;
  for (std::size_t t = 0; t < trace.couplings.size(); ++t) {
    const double h = coupling_entropy(trace.couplings[t], nout);
    if (t > 0 && h > coupling_entropy(trace.couplings[t - 1], nout) + 1e-15) monotone = false;
    ent += (t ? " " : "") + fmt(h, 4);
  }
  const bool ok = max_norm < 1.0 && worst_sum <= 1e-12 && monotone;
  return {ok, "max |squash| " + fmt(max_norm, 17) + " over 1e4 vectors; max |sum c - 1| " + fmt(worst_sum, 2) + " over " +
                  std::to_string(iterations_seen) + " routing iterations; entropy " + ent +
                  (monotone ? " non-increasing" : " INCREASED")};
}

// ---------------------------------------------------------------------------
// 4. GRM reduction

Verdict c4() {
  Rng rng(20262);
  std::size_t checked = 0, mismatched = 0;
  for (std::size_t c : {1u, 3u, 8u, 20u}) {
    ParamRegistry reg;
    GrmOptions opts;
    opts.zero_init_inverse = false;  // zeroed explicitly below
    GraphReasoning grm(reg, "g", c, rng, opts);
    for (auto& v : grm.adjacency.mutable_data()) v = 0.0;
    auto eye = identity_matrix(c);
    std::copy(eye.data().begin(), eye.data().end(), grm.weight.mutable_data().begin());
    std::copy(eye.data().begin(), eye.data().end(), grm.phi.mutable_data().begin());
    std::copy(eye.data().begin(), eye.data().end(), grm.theta.mutable_data().begin());
    for (auto& v : grm.inverse_weight.mutable_data()) v = 0.0;
    for (auto& v : grm.inverse_bias.mutable_data()) v = 0.0;
    for (std::size_t side : {2u, 8u, 16u}) {
      Tensor f({2, c, side, side}, oracle::random_vec(2 * c * side * side, rng, -3.0, 3.0));
      Tensor g = grm(f);
      for (std::size_t i = 0; i < f.numel(); ++i, ++checked) mismatched += g[i] != f[i];
    }
  }
  return {mismatched == 0, std::to_string(checked) + " values compared, " + std::to_string(mismatched) + " differ from the plain skip"};
}

// ---------------------------------------------------------------------------
// 5. Metric oracle

Verdict c5() {
  Rng rng(20263);
  std::size_t mismatches = 0;
  for (int t = 0; t < 1000; ++t) {
    ConfusionMatrix cm;
    do {
      for (auto& row : cm.counts)
        for (auto& v : row) v = rng.below(20);
    } while (cm.total() == 0);
    std::vector<std::pair<int, int>> pairs;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        for (std::uint64_t k = 0; k < cm.counts[i][j]; ++k) pairs.emplace_back(i, j);
    const auto got = uf1_uar(cm);
    const auto ref = oracle::brute_force_scores(pairs);
    mismatches += got.uf1 != ref.uf1 || got.uar != ref.uar;
  }
  ConfusionMatrix diag, column;
  for (int c = 0; c < 3; ++c) {
    diag.counts[c][c] = 4;
    column.counts[c][1] = 4;
  }
  const auto d = uf1_uar(diag), col = uf1_uar(column);
  const bool ok = mismatches == 0 && d.uf1 == 1.0 && d.uar == 1.0 && col.uar == 1.0 / 3.0;
  return {ok, std::to_string(mismatches) + "/1000 mismatches; diagonal UF1 " + fmt(d.uf1, 17) + " UAR " + fmt(d.uar, 17) +
                  "; single column UAR " + fmt(col.uar, 17)};
}

// ---------------------------------------------------------------------------
// Training protocols

struct Protocol {
  std::string name;
  RunConfig cfg;
  std::size_t folds = 0;  // 0 = every LOSO fold
};

std::string config_key(const RunConfig& c) {
  auto j = to_json(c);
  j.erase("output");
  j.erase("jobs");
  return j.dump();
}

/// Trains (or reloads) one IceGan per fold and keeps it for inspection.
class CachedFoldModel : public FoldModel {
 public:
  CachedFoldModel(RunConfig cfg, fs::path dir) : cfg_(std::move(cfg)), dir_(std::move(dir)) {}
  void fit(const std::vector<const Sample*>& train_set, const LosoSplit& fold) override {
    std::string name = fold.held_out;
    std::replace(name.begin(), name.end(), '/', '_');
    const fs::path d = dir_ / ("fold_" + name);
    model_ = std::make_unique<IceGan>(cfg_.model, cfg_.train.seed, cfg_.train.perceptual_seed);
    const auto key_file = d / "config.key";
    if (fs::exists(d / "model.bin") && fs::exists(key_file)) {
      std::ifstream is(key_file);
      std::string key((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
      if (key == config_key(cfg_)) {
        model_->load(read_checkpoint(d / "model.bin"));
        reused_ = true;
        return;
      }
    }
    fs::remove_all(d);
    const auto t0 = Clock::now();
    train(*model_, train_set, cfg_.train, cfg_.loss, d);
    seconds_ = since(t0);
    std::ofstream(key_file) << config_key(cfg_);
  }
  std::vector<Prediction> predict(const std::vector<const Sample*>& test) override { return model_->predict(test); }
  const IceGan& model() const { return *model_; }
  bool reused() const { return reused_; }
  double seconds() const { return seconds_; }

 private:
  RunConfig cfg_;
  fs::path dir_;
  std::unique_ptr<IceGan> model_;
  bool reused_ = false;
  double seconds_ = 0.0;
};

struct ProtocolRun {
  MetricsReport report;
  LocalityReport locality{};
  std::array<double, kNumClasses> pairwise_l1{};
  double train_seconds = 0.0;
  std::size_t reused = 0, folds = 0;
};

ProtocolRun run_protocol(const Protocol& p) {
  const auto corpus = load_corpus(p.cfg.corpus);
  const auto folds = loso_folds(corpus, p.cfg.corpus.mode, p.cfg.corpus.dataset);
  const fs::path dir = work_root() / p.name;
  fs::create_directories(dir);
  ProtocolRun out;
  std::array<double, kNumClasses> iou_sum{};
  std::array<std::size_t, kNumClasses> iou_n{};
  std::vector<Image> synthetic;
  std::vector<int> synthetic_cls;
  LosoHooks hooks;
  hooks.after_fold = [&](const LosoSplit&, FoldModel& m, const std::vector<const Sample*>& test) {
    auto& fm = dynamic_cast<CachedFoldModel&>(m);
    out.train_seconds += fm.seconds();
    out.reused += fm.reused();
    ++out.folds;
    auto loc = synthesis_locality(fm.model(), test, p.cfg.train.seed);
    for (std::size_t c = 0; c < kNumClasses; ++c) {
      iou_sum[c] += loc.mean_iou[c] * static_cast<double>(loc.count[c]);
      iou_n[c] += loc.count[c];
    }
    Rng rng = Rng::derive(p.cfg.train.seed, 0x5e7);
    for (const auto* s : test) {
      synthetic.push_back(fm.model().synthesize({&s->onset}, {s->cls}, rng)[0]);
      synthetic_cls.push_back(s->cls);
    }
  };
  const RunConfig cfg = p.cfg;
  auto result = evaluate_loso([cfg, dir](std::size_t) { return std::make_unique<CachedFoldModel>(cfg, dir); }, corpus, folds,
                              p.folds, hooks, 1);
  out.report = result.report;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    out.locality.count[c] = iou_n[c];
    out.locality.mean_iou[c] = iou_n[c] ? iou_sum[c] / static_cast<double>(iou_n[c]) : 0.0;
  }
  out.pairwise_l1 = per_class_pairwise_l1(synthetic, synthetic_cls);
  return out;
}

RunConfig budget_base(std::size_t thin, std::size_t subjects, std::size_t epochs, std::size_t batch) {
  RunConfig c;
  c.model = c.model.thinned(thin);
  c.corpus.toy.subjects = subjects;
  c.train.epochs = epochs;
  c.train.batch = batch;
  c.train.warmup_epochs = std::max<std::size_t>(1, epochs / 10);
  c.train.checkpoint_every = 0;
  return c;
}

/// Budget protocol shared by criteria 6 and 7.
Protocol synthesis_protocol() {
  return {"synthesis", budget_base(4, 20, 60, 4), 3};
}

// ---------------------------------------------------------------------------
// 6. Toy end-to-end

Verdict c6() {
  const RunConfig full;  // the literal default run: full width, 100 epochs, batch 16, 20 subjects
  const auto corpus = load_corpus(full.corpus);
  const auto folds = loso_folds(corpus, full.corpus.mode);
  const std::size_t train_samples = folds[0].train_indices.size();
  const std::size_t steps_per_epoch = (train_samples + full.train.batch - 1) / full.train.batch;
  const double total_steps = static_cast<double>(steps_per_epoch * full.train.epochs * folds.size());

  if (const char* f = std::getenv("ICEGAN_ACCEPT_FULL"); f && std::string(f) == "1") {
    const auto t0 = Clock::now();
    Protocol p{"c6_full", full, 0};
    auto r = run_protocol(p);
    const double secs = since(t0);
    const double min_l1 = *std::min_element(r.pairwise_l1.begin(), r.pairwise_l1.end());
    const bool ok = r.report.complete() && r.report.scores.uf1 >= 0.8 && r.report.scores.uar >= 0.8 && secs <= 7200 && min_l1 > 0.01;
    return {ok, "full run: UF1 " + fmt(r.report.scores.uf1) + " UAR " + fmt(r.report.scores.uar) + " in " + fmt(secs, 5) +
                    " s; min per-class pairwise L1 " + fmt(min_l1)};
  }

  // Time real default-size training steps and project the full run.
  IceGan model(full.model, full.train.seed, full.train.perceptual_seed);
  std::vector<const Sample*> set;
  for (std::size_t i = 0; i < full.train.batch; ++i) set.push_back(&corpus[folds[0].train_indices[i]]);
  Batch b;
  std::vector<const Image*> on, ap;
  for (const auto* s : set) {
    on.push_back(&s->onset);
    ap.push_back(&s->apex);
    b.classes.push_back(s->cls);
  }
  b.onset = stack_images(on);
  b.apex = stack_images(ap);
  b.real = b.apex;
  Rng noise(1);
  train_step(model, b, full.loss, full.train.lr, false, noise);  // warm-up, untimed
  const int timed = 2;
  const auto t0 = Clock::now();
  for (int i = 0; i < timed; ++i) train_step(model, b, full.loss, full.train.lr, true, noise);
  const double per_step = since(t0) / timed;
  const double projected = per_step * total_steps;

  // Quality at the budget protocol, reported alongside.
  const auto budget = run_protocol(synthesis_protocol());
  const double min_l1 = *std::min_element(budget.pairwise_l1.begin(), budget.pairwise_l1.end());

  std::string d = "default run projected at " + fmt(projected / 3600.0, 3) + " h (" + fmt(per_step, 3) + " s/step x " +
                  fmt(total_steps, 6) + " steps; limit 2 h). Budget protocol (" + std::to_string(budget.folds) +
                  " folds): UF1 " + fmt(budget.report.scores.uf1) + " UAR " + fmt(budget.report.scores.uar) +
                  ", min per-class pairwise L1 " + fmt(min_l1);
  // The runtime bound is part of the criterion; it cannot hold here.
  return {false, d};
}

// ---------------------------------------------------------------------------
// 7. Synthesis locality

Verdict c7() {
  const auto r = run_protocol(synthesis_protocol());
  const auto& iou = r.locality.mean_iou;
  const bool ok = r.report.complete() && iou[0] > 0.3 && iou[2] > 0.3;
  return {ok, "top-5% IoU over " + std::to_string(r.locality.count[0] + r.locality.count[1] + r.locality.count[2]) +
                  " held-out samples in " + std::to_string(r.folds) + " folds: positive " + fmt(iou[0]) + ", negative " +
                  fmt(iou[1]) + ", surprise " + fmt(iou[2]) + " (> 0.3 for positive and surprise)"};
}

// ---------------------------------------------------------------------------
// 8. Ablation direction

Verdict c8() {
  const RunConfig base = budget_base(8, 8, 20, 4);
  const std::vector<std::string> variants{"F", "D", "C", "F+cnn_large"};
  const std::vector<std::uint64_t> seeds{1, 2, 3};
  std::map<std::string, double> median;
  std::string d;
  for (const auto& v : variants) {
    std::vector<double> uf1;
    for (auto seed : seeds) {
      RunConfig c = apply_variant(base, v);
      c.train.seed = seed;
      std::string name = "ablation_" + v + "_seed" + std::to_string(seed);
      std::replace(name.begin(), name.end(), '+', '_');
      uf1.push_back(run_protocol({name, c, 4}).report.scores.uf1);
    }
    std::sort(uf1.begin(), uf1.end());
    median[v] = uf1[1];
    d += (d.empty() ? "" : ", ") + v + " " + fmt(uf1[0], 3) + "/" + fmt(uf1[1], 3) + "/" + fmt(uf1[2], 3);
  }
  const bool ok = median["F"] >= median["D"] && median["D"] >= median["C"] && median["F"] >= median["F+cnn_large"];
  return {ok, "median UF1 grm " + fmt(median["F"]) + " >= skip " + fmt(median["D"]) + " >= none " + fmt(median["C"]) +
                  "; capsule " + fmt(median["F"]) + " >= cnn_large " + fmt(median["F+cnn_large"]) + " [sorted per seed: " + d + "]"};
}

// ---------------------------------------------------------------------------
// 9. Determinism

Verdict c9() {
  RunConfig c = budget_base(16, 3, 3, 4);
  c.train.checkpoint_every = 1;
  std::vector<std::string> reports, csvs;
  for (int rep = 0; rep < 2; ++rep) {
    c.output = (work_root() / ("determinism_" + std::to_string(rep))).string();
    fs::remove_all(c.output);
    std::ostringstream sink;
    auto run = cmd_eval(c, EvalRequest{"", BaselineKind::icegan, "eval"}, sink);
    auto j = to_json(run.report);
    reports.push_back(j.dump());
    std::string all;
    for (const auto& e : fs::recursive_directory_iterator(run.dir))
      if (e.path().filename() == "loss.csv") {
        std::ifstream is(e.path());
        all += e.path().parent_path().filename().string() + "\n" +
               std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
      }
    csvs.push_back(all);
  }
  const bool ok = !csvs[0].empty() && csvs[0] == csvs[1] && reports[0] == reports[1];
  return {ok, "loss CSVs " + std::string(csvs[0] == csvs[1] ? "identical" : "DIFFER") + " (" + std::to_string(csvs[0].size()) +
                  " bytes), final metrics " + (reports[0] == reports[1] ? "identical" : "DIFFER")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  int only = 0;
  app.add_option("--criterion", only, "run one criterion (1-9)")->check(CLI::Range(1, 9));
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<const char*, std::function<Verdict()>>> criteria{
      {"gradient integrity", c1}, {"equation oracles", c2},   {"capsule invariants", c3},
      {"GRM reduction", c4},      {"metric oracle", c5},      {"toy end-to-end", c6},
      {"synthesis locality", c7}, {"ablation direction", c8}, {"determinism", c9}};
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (only && static_cast<std::size_t>(only) != i + 1) continue;
    Verdict v;
    const auto t0 = Clock::now();
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    std::cout << "C" << i + 1 << " " << (v.pass ? "PASS" : "FAIL") << "  " << criteria[i].first << ": " << v.detail << "  ["
              << fmt(since(t0), 4) << " s]" << std::endl;
    all = all && v.pass;
  }
  return all ? 0 : 1;
}
