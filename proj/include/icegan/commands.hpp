#pragma once

// The five CLI commands as library calls. Each takes a validated RunConfig,
// writes its artefacts under output_root(cfg) / run name, and returns what
// it wrote so tests and the acceptance runner can inspect results directly.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "icegan/config.hpp"
#include "icegan/data.hpp"
#include "icegan/evaluation.hpp"
#include "icegan/gradcheck_suites.hpp"
#include "icegan/metrics.hpp"
#include "icegan/training.hpp"

namespace icegan {

namespace detail {
inline std::filesystem::path run_dir(const RunConfig& cfg, const std::string& name) {
  auto dir = output_root(cfg) / name;
  std::filesystem::create_directories(dir);
  return dir;
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << j.dump(2) << "\n";
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

inline std::vector<const Sample*> pointers(const std::vector<Sample>& corpus) {
  std::vector<const Sample*> out;
  for (const auto& s : corpus) out.push_back(&s);
  return out;
}

inline std::string safe_name(std::string s) {
  for (auto& c : s)
    if (c == '/' || c == '\\' || c == ' ') c = '_';
  return s;
}

inline nlohmann::json parameter_counts(const IceGan& m) {
  return {{"generator", m.g_params().parameter_count()},
          {"discriminator", m.d_params().parameter_count()},
          {"discriminator_inference", inference_parameter_count(m.d_params())}};
}

inline nlohmann::json corpus_manifest(const RunConfig& cfg, const std::vector<Sample>& corpus) {
  std::set<std::string> subjects;
  for (const auto& s : corpus) subjects.insert(s.subject_key());
  nlohmann::json j{{"source", cfg.corpus.manifest.empty() ? "toy" : cfg.corpus.manifest},
                   {"samples", corpus.size()},
                   {"subjects", subjects.size()}};
  if (cfg.corpus.manifest.empty()) j["seed"] = cfg.corpus.toy.seed;
  return j;
}

inline std::vector<Sample> load_eval_corpus(const RunConfig& cfg, std::vector<std::string>& warnings) {
  auto corpus = load_corpus(cfg.corpus, &warnings);
  if (corpus.empty()) throw ConfigError("corpus is empty");
  return corpus;
}
}  // namespace detail

// ---------------------------------------------------------------------------
// train

struct TrainRun {
  std::filesystem::path dir;
  TrainResult result;
};

inline TrainRun cmd_train(const RunConfig& cfg, const std::string& run_name = "train", std::ostream& log = std::cout) {
  validate(cfg);
  std::vector<std::string> warnings;
  auto corpus = detail::load_eval_corpus(cfg, warnings);
  for (const auto& w : warnings) log << "warning: " << w << "\n";
  TrainRun run;
  run.dir = detail::run_dir(cfg, run_name);
  save_config(run.dir / "config.json", cfg);

  IceGan model(cfg.model, cfg.train.seed, cfg.train.perceptual_seed);
  TrainingCallbacks cb;
  cb.on_step = [&](const LossRecord& r) {
    if (r.step == 0)
      log << "epoch " << r.epoch << "  lr " << r.lr << "  d_adv " << r.d_adv << "  g_adv " << r.g_adv << "  l_pixel "
          << r.l_pixel << "  l_margin " << r.l_margin << "\n";
  };
  run.result = train(model, detail::pointers(corpus), cfg.train, cfg.loss, run.dir, cb);

  nlohmann::json manifest{{"corpus", detail::corpus_manifest(cfg, corpus)},
                          {"perceptual_seed", cfg.train.perceptual_seed},
                          {"seed", cfg.train.seed},
                          {"parameters", detail::parameter_counts(model)},
                          {"epochs", cfg.train.epochs},
                          {"steps", run.result.steps},
                          {"seconds", run.result.seconds},
                          {"warnings", warnings}};
  for (const auto& p : run.result.checkpoints) manifest["checkpoints"].push_back(p.filename().string());
  detail::write_json(run.dir / "manifest.json", manifest);
  log << "wrote " << run.result.checkpoints.size() << " checkpoints to " << run.dir.string() << "\n";
  return run;
}

// ---------------------------------------------------------------------------
// eval

enum class BaselineKind { icegan, oracle, random, majority };

inline const char* to_string(BaselineKind k) {
  switch (k) {
    case BaselineKind::icegan: return "icegan";
    case BaselineKind::oracle: return "oracle";
    case BaselineKind::random: return "random";
    case BaselineKind::majority: return "majority";
  }
  return "?";
}
inline BaselineKind parse_baseline(const std::string& s) {
  return detail::parse_enum(s, "model", std::array{BaselineKind::icegan, BaselineKind::oracle, BaselineKind::random, BaselineKind::majority});
}

struct EvalRequest {
  std::string checkpoint;  // empty: LOSO
  BaselineKind model = BaselineKind::icegan;
  std::string run_name = "eval";
};

struct EvalRun {
  std::filesystem::path dir;
  MetricsReport report;
  std::vector<FoldOutcome> folds;
};

inline FoldModelFactory fold_factory(const RunConfig& cfg, BaselineKind kind, const std::filesystem::path& fold_root = {}) {
  return [cfg, kind, fold_root](std::size_t k) -> std::unique_ptr<FoldModel> {
    switch (kind) {
      case BaselineKind::oracle: return std::make_unique<OracleModel>();
      case BaselineKind::random: return std::make_unique<RandomModel>(Rng::derive(cfg.train.seed, 0x7a4d + k).next_u64());
      case BaselineKind::majority: return std::make_unique<MajorityModel>();
      case BaselineKind::icegan: break;
    }
    return std::make_unique<IceGanFoldModel>(cfg.model, cfg.train, cfg.loss, fold_root);
  };
}

inline EvalRun cmd_eval(const RunConfig& cfg, const EvalRequest& req, std::ostream& log = std::cout) {
  validate(cfg);
  if (!req.checkpoint.empty() && !std::filesystem::is_regular_file(req.checkpoint)) {
    std::string msg = "eval: checkpoint not usable:\n  - " + req.checkpoint +
                      (std::filesystem::exists(req.checkpoint) ? " is not a regular file" : " does not exist");
    if (req.model != BaselineKind::icegan) msg += "\n  - --model " + std::string(to_string(req.model)) + " takes no checkpoint";
    throw ConfigError(msg);
  }
  std::vector<std::string> warnings;
  auto corpus = detail::load_eval_corpus(cfg, warnings);
  EvalRun run;
  run.dir = detail::run_dir(cfg, req.run_name);
  save_config(run.dir / "config.json", cfg);
  std::vector<Prediction> predictions;

  if (!req.checkpoint.empty()) {
    IceGan model(cfg.model, cfg.train.seed, cfg.train.perceptual_seed);
    model.load(read_checkpoint(req.checkpoint));
    std::vector<const Sample*> test;
    for (const auto& s : corpus)
      if (cfg.corpus.mode == EvalMode::cde || s.dataset == cfg.corpus.dataset) test.push_back(&s);
    predictions = model.predict(test);
    run.report = make_report(predictions);
    run.report.folds = run.report.folds_expected = 1;
  } else {
    auto folds = loso_folds(corpus, cfg.corpus.mode, cfg.corpus.dataset);
    LosoHooks hooks;
    hooks.after_fold = [&](const LosoSplit& fold, FoldModel&, const std::vector<const Sample*>& test) {
      log << "fold " << fold.held_out << ": " << test.size() << " test samples\n";
    };
    auto result = evaluate_loso(fold_factory(cfg, req.model, run.dir / "folds"), corpus, folds, cfg.max_folds, hooks, cfg.jobs);
    for (const auto& f : result.folds) {
      if (!f.ok) continue;
      const auto dir = run.dir / "folds" / detail::safe_name(f.held_out);
      std::filesystem::create_directories(dir);
      detail::write_json(dir / "report.json", to_json(f.report));
    }
    predictions = std::move(result.predictions);
    run.report = std::move(result.report);
    run.folds = std::move(result.folds);
  }
  run.report.warnings.insert(run.report.warnings.begin(), warnings.begin(), warnings.end());

  const std::string title = std::string(cfg.corpus.mode == EvalMode::cde ? "CDE" : "SDE") + " " +
                            (req.checkpoint.empty() ? "LOSO" : "checkpoint") + " evaluation (" + to_string(req.model) + ")";
  detail::write_json(run.dir / "report.json", to_json(run.report));
  detail::write_text(run.dir / "report.txt", render_table(run.report, title));
  write_predictions_jsonl(run.dir / "predictions.jsonl", predictions);
  log << render_table(run.report, title);
  for (const auto& w : run.report.warnings) log << "warning: " << w << "\n";
  return run;
}

// ---------------------------------------------------------------------------
// synthesize

struct SynthRequest {
  std::string checkpoint;
  std::string onset;               // PGM path, or toy:<sample id>
  std::vector<int> classes{0, 1, 2};
  std::uint64_t seed = 0;
  bool diff = false;
  std::string run_name = "synth";
};

struct SynthOutput {
  std::string onset_id;
  int cls = 0;
  std::filesystem::path image, diff_image, diff_report;
  Image pixels;
  DifferenceMap diff;
};

inline std::vector<SynthOutput> cmd_synthesize(const RunConfig& cfg, const SynthRequest& req, std::ostream& log = std::cout) {
  validate(cfg);
  std::vector<std::string> problems;
  if (req.checkpoint.empty()) problems.push_back("--checkpoint is required");
  else if (!std::filesystem::is_regular_file(req.checkpoint)) problems.push_back("checkpoint " + req.checkpoint + " does not exist");
  if (req.onset.empty()) problems.push_back("--onset is required (a PGM path or toy:<sample id>)");
  if (req.classes.empty()) problems.push_back("at least one class is required");
  for (int c : req.classes)
    if (c < 0 || c >= static_cast<int>(kNumClasses)) problems.push_back("class index " + std::to_string(c) + " out of range");

  Image onset;
  std::string onset_id;
  if (!req.onset.empty()) {
    if (req.onset.rfind("toy:", 0) == 0) {
      onset_id = req.onset.substr(4);
      for (const auto& s : generate_toy_corpus(cfg.corpus.toy))
        if (s.id == onset_id) onset = s.onset;
      if (onset.empty()) problems.push_back("no toy sample with id '" + onset_id + "'");
    } else if (!std::filesystem::is_regular_file(req.onset)) {
      problems.push_back("onset image " + req.onset + " does not exist");
    } else {
      auto pgm = read_pgm(req.onset);
      if (pgm.width != kImageSide || pgm.height != kImageSide) {
        problems.push_back("onset image " + req.onset + " is " + std::to_string(pgm.width) + "x" + std::to_string(pgm.height) +
                           ", expected 128x128");
      } else {
        for (double v : pgm.disk01) onset.push_back(to_memory(v));
      }
      onset_id = std::filesystem::path(req.onset).stem().string();
    }
  }
  if (!problems.empty()) {
    std::string msg = "synthesize:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw ConfigError(msg);
  }

  IceGan model(cfg.model, cfg.train.seed, cfg.train.perceptual_seed);
  model.load(read_checkpoint(req.checkpoint));
  const auto dir = detail::run_dir(cfg, req.run_name);
  std::ofstream manifest(dir / "manifest.jsonl", std::ios::trunc);
  std::vector<SynthOutput> out;
  for (int c : req.classes) {
    // Each (onset, class, seed) gets its own stream, so outputs do not depend
    // on which other classes were requested.
    Rng rng = Rng::derive(req.seed, static_cast<std::uint64_t>(c));
    SynthOutput o;
    o.onset_id = onset_id;
    o.cls = c;
    o.pixels = model.synthesize({&onset}, {c}, rng)[0];
    const std::string stem = detail::safe_name(onset_id) + "_" + class_name(c) + "_seed" + std::to_string(req.seed);
    o.image = dir / (stem + ".pgm");
    write_pgm_image(o.image, o.pixels);
    nlohmann::json line{{"onset_id", onset_id}, {"class", c}, {"class_name", class_name(c)}, {"seed", req.seed},
                        {"path", o.image.filename().string()}};
    if (req.diff) {
      o.diff = norm2_diff(o.pixels, onset);
      o.diff_image = dir / (stem + "_diff.pgm");
      o.diff_report = dir / (stem + "_diff.json");
      write_pgm(o.diff_image, o.diff.width, o.diff.height, o.diff.values);
      detail::write_json(o.diff_report, to_json(o.diff.region));
      line["diff_path"] = o.diff_image.filename().string();
      line["region"] = to_json(o.diff.region);
    }
    manifest << line.dump() << "\n";
    log << "wrote " << o.image.string() << "\n";
    out.push_back(std::move(o));
  }
  return out;
}

// ---------------------------------------------------------------------------
// ablate

/// Applies one '+'-joined variant label to a configuration. Tokens:
/// A|disc_only, B|dcgan, C|none, D|skip, E|se, F|grm, capsule, cnn,
/// cnn_large, dexp=N.
inline RunConfig apply_variant(RunConfig cfg, const std::string& label) {
  std::stringstream ss(label);
  std::string tok;
  auto& g = cfg.model.generator;
  auto& d = cfg.model.discriminator;
  if (label.empty()) throw ConfigError("empty ablation variant");
  while (std::getline(ss, tok, '+')) {
    if (tok == "A" || tok == "disc_only") {
      cfg.train.discriminator_only = true;
    } else if (tok == "B" || tok == "dcgan") {
      g.use_encoder = false;
      g.skip = SkipMode::none;
    } else if (tok == "C" || tok == "none") {
      g.skip = SkipMode::none;
    } else if (tok == "D" || tok == "skip") {
      g.skip = SkipMode::skip;
    } else if (tok == "E" || tok == "se") {
      g.skip = SkipMode::se;
    } else if (tok == "F" || tok == "grm") {
      g.skip = SkipMode::grm;
    } else if (tok == "capsule" || tok == "cnn" || tok == "cnn_large") {
      d.kind = parse_discriminator(tok);
    } else if (tok.rfind("dexp=", 0) == 0) {
      try {
        std::size_t used = 0;
        const long v = std::stol(tok.substr(5), &used);
        if (v <= 0 || used != tok.size() - 5) throw std::invalid_argument(tok);
        d.exp_dim = static_cast<std::size_t>(v);
      } catch (const std::exception&) {
        throw ConfigError("ablation: bad d_exp in '" + tok + "'");
      }
    } else {
      throw ConfigError("ablation: unknown variant token '" + tok + "' in '" + label + "'");
    }
  }
  validate(cfg);
  return cfg;
}

struct AblationRow {
  std::string variant;
  std::size_t g_params = 0, d_params = 0;
  std::vector<std::uint64_t> seeds;
  std::vector<double> uf1, uar;
  std::vector<bool> complete;

  static double median(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  }
  double median_uf1() const { return median(uf1); }
  double median_uar() const { return median(uar); }
};

inline nlohmann::json to_json(const AblationRow& r) {
  return {{"variant", r.variant},       {"generator_parameters", r.g_params}, {"discriminator_parameters", r.d_params},
          {"seeds", r.seeds},           {"UF1", r.uf1},                      {"UAR", r.uar},
          {"complete", r.complete},     {"median_UF1", r.median_uf1()},      {"median_UAR", r.median_uar()}};
}

inline std::string render_ablation(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  std::size_t w = 8;
  for (const auto& r : rows) w = std::max(w, r.variant.size() + 2);
  os << std::left << std::setw(static_cast<int>(w)) << "Variant" << std::right << std::setw(12) << "G params" << std::setw(12)
     << "D params" << std::setw(8) << "seeds" << std::setw(9) << "UF1" << std::setw(9) << "UAR" << "\n";
  for (const auto& r : rows) {
    os << std::left << std::setw(static_cast<int>(w)) << r.variant << std::right << std::setw(12) << r.g_params << std::setw(12)
       << r.d_params << std::setw(8) << r.seeds.size() << std::fixed << std::setprecision(4) << std::setw(9) << r.median_uf1()
       << std::setw(9) << r.median_uar();
    if (std::find(r.complete.begin(), r.complete.end(), false) != r.complete.end()) os << "  [INCOMPLETE]";
    os << "\n";
  }
  os << "UF1/UAR: median over seeds of the pooled LOSO scores; D params exclude the training-only reconstruction head.\n";
  return os.str();
}

struct AblateRequest {
  std::vector<std::string> variants{"C", "D", "E", "F"};
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::string run_name = "ablate";
};

struct AblateRun {
  std::filesystem::path dir;
  std::vector<AblationRow> rows;
};

inline AblateRun cmd_ablate(const RunConfig& cfg, const AblateRequest& req, std::ostream& log = std::cout) {
  validate(cfg);
  if (req.variants.empty()) throw ConfigError("ablate: no variants given");
  if (req.seeds.empty()) throw ConfigError("ablate: no seeds given");
  std::vector<RunConfig> configs;
  for (const auto& v : req.variants) configs.push_back(apply_variant(cfg, v));

  std::vector<std::string> warnings;
  auto corpus = detail::load_eval_corpus(cfg, warnings);
  auto folds = loso_folds(corpus, cfg.corpus.mode, cfg.corpus.dataset);
  AblateRun run;
  run.dir = detail::run_dir(cfg, req.run_name);
  save_config(run.dir / "config.json", cfg);
  for (std::size_t i = 0; i < configs.size(); ++i) {
    AblationRow row;
    row.variant = req.variants[i];
    {
      IceGan probe(configs[i].model, 0);
      row.g_params = configs[i].train.discriminator_only ? 0 : probe.g_params().parameter_count();
      row.d_params = inference_parameter_count(probe.d_params());
    }
    for (auto seed : req.seeds) {
      RunConfig c = configs[i];
      c.train.seed = seed;
      auto result = evaluate_loso(fold_factory(c, BaselineKind::icegan), corpus, folds, c.max_folds, {}, c.jobs);
      row.seeds.push_back(seed);
      row.uf1.push_back(result.report.scores.uf1);
      row.uar.push_back(result.report.scores.uar);
      row.complete.push_back(result.report.complete());
      log << row.variant << " seed " << seed << ": UF1 " << result.report.scores.uf1 << " UAR " << result.report.scores.uar
          << "\n";
    }
    run.rows.push_back(std::move(row));
  }
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : run.rows) j.push_back(to_json(r));
  detail::write_json(run.dir / "ablation.json", j);
  const std::string table = render_ablation(run.rows);
  detail::write_text(run.dir / "ablation.txt", table);
  log << table;
  return run;
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradcheckRun {
  std::vector<SuiteResult> suites;
  double seconds = 0.0;
  bool passed() const {
    if (suites.empty()) return false;
    for (const auto& s : suites)
      if (!s.report.passed()) return false;
    return true;
  }
};

inline GradcheckRun cmd_gradcheck(bool inject_bug, const std::string& filter = "", std::ostream& log = std::cout) {
  GradcheckRun run;
  run.suites = run_gradcheck_suites(inject_bug, filter);
  if (run.suites.empty()) throw ConfigError("gradcheck: no suite matches '" + filter + "'");
  for (const auto& s : run.suites) {
    run.seconds += s.seconds;
    log << (s.report.passed() ? "PASS " : "FAIL ") << std::left << std::setw(18) << s.name << std::right
        << " max rel err " << std::scientific << std::setprecision(2) << s.report.max_rel_error() << std::defaultfloat
        << "  (" << std::fixed << std::setprecision(2) << s.seconds << " s)" << std::defaultfloat << "\n";
    log << s.report.summary();
  }
  log << (run.passed() ? "all suites passed" : "gradient check FAILED") << (inject_bug ? " [injected bug]" : "") << " in "
      << std::fixed << std::setprecision(1) << run.seconds << " s" << std::defaultfloat << "\n";
  return run;
}

}  // namespace icegan
