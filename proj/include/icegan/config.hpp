#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>
#include <string>

#include "json.hpp"

#include "icegan/data.hpp"
#include "icegan/training.hpp"

namespace icegan {

/// Invalid configuration or command line; maps to exit code 2.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct CorpusConfig {
  std::string manifest;  // empty: procedural toy corpus
  ToyCorpusOptions toy;
  EvalMode mode = EvalMode::cde;
  std::string dataset;   // SDE only
};

struct RunConfig {
  CorpusConfig corpus;
  ModelConfig model;
  TrainOptions train;
  LossWeights loss;
  std::string output = "runs";
  std::size_t max_folds = 0;
  std::size_t jobs = 1;
};

// ---------------------------------------------------------------------------
// Enum names

inline const char* to_string(SkipMode m) {
  switch (m) {
    case SkipMode::none: return "none";
    case SkipMode::skip: return "skip";
    case SkipMode::se: return "se";
    case SkipMode::grm: return "grm";
  }
  return "?";
}
inline const char* to_string(DiscriminatorKind k) {
  switch (k) {
    case DiscriminatorKind::capsule: return "capsule";
    case DiscriminatorKind::cnn: return "cnn";
    case DiscriminatorKind::cnn_large: return "cnn_large";
  }
  return "?";
}
inline const char* to_string(DecoderFusion f) { return f == DecoderFusion::concat ? "concat" : "add"; }
inline const char* to_string(InverseProjection p) {
  return p == InverseProjection::project_deconv ? "project_deconv" : "channel_attention";
}
inline const char* to_string(EvalMode m) { return m == EvalMode::cde ? "cde" : "sde"; }
inline const char* to_string(ImageTarget t) { return t == ImageTarget::apex ? "apex" : "onset"; }

namespace detail {
template <typename E, std::size_t N>
E parse_enum(const std::string& s, const char* what, const std::array<E, N>& values) {
  std::string allowed;
  for (E v : values) {
    if (s == to_string(v)) return v;
    allowed += (allowed.empty() ? "" : ", ") + std::string(to_string(v));
  }
  throw ConfigError(std::string("invalid ") + what + " '" + s + "' (expected one of: " + allowed + ")");
}
}  // namespace detail

inline SkipMode parse_skip_mode(const std::string& s) {
  return detail::parse_enum(s, "grm_mode", std::array{SkipMode::none, SkipMode::skip, SkipMode::se, SkipMode::grm});
}
inline DiscriminatorKind parse_discriminator(const std::string& s) {
  return detail::parse_enum(s, "discriminator",
                            std::array{DiscriminatorKind::capsule, DiscriminatorKind::cnn, DiscriminatorKind::cnn_large});
}
inline DecoderFusion parse_fusion(const std::string& s) {
  return detail::parse_enum(s, "fusion", std::array{DecoderFusion::concat, DecoderFusion::add});
}
inline InverseProjection parse_inverse(const std::string& s) {
  return detail::parse_enum(s, "grm_inverse", std::array{InverseProjection::project_deconv, InverseProjection::channel_attention});
}
inline EvalMode parse_eval_mode(const std::string& s) {
  return detail::parse_enum(s, "mode", std::array{EvalMode::cde, EvalMode::sde});
}
inline ImageTarget parse_target(const std::string& s) {
  return detail::parse_enum(s, "image target", std::array{ImageTarget::apex, ImageTarget::onset});
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const RunConfig& c) {
  using nlohmann::json;
  const auto& g = c.model.generator;
  const auto& d = c.model.discriminator;
  const auto& t = c.corpus.toy;
  return json{
      {"corpus",
       {{"manifest", c.corpus.manifest},
        {"mode", to_string(c.corpus.mode)},
        {"dataset", c.corpus.dataset},
        {"toy",
         {{"subjects", t.subjects},
          {"samples_per_subject", t.samples_per_subject},
          {"seed", t.seed},
          {"amplitude_lo", t.amplitude_lo},
          {"amplitude_hi", t.amplitude_hi},
          {"noise_std", t.noise_std},
          {"brightness_jitter", t.brightness_jitter},
          {"neighbor_jitter", t.neighbor_jitter}}}}},
      {"model",
       {{"channels", g.channels},
        {"noise_dim", g.noise_dim},
        {"grm_mode", to_string(g.skip)},
        {"use_encoder", g.use_encoder},
        {"fusion", to_string(g.fusion)},
        {"grm_inverse", to_string(g.grm.inverse)},
        {"grm_scale_attention", g.grm.scale_attention},
        {"grm_adjacency_std", g.grm.adjacency_init_std},
        {"discriminator", to_string(d.kind)},
        {"patch_channels", d.patch_channels},
        {"primary_types", d.primary_types},
        {"d_prim", d.primary_dim},
        {"d_adv", d.adv_dim},
        {"d_exp", d.exp_dim},
        {"routing_iterations", d.routing_iterations},
        {"recon_hidden", d.recon_hidden},
        {"cnn_width", d.cnn_width},
        {"cnn_large_width", d.cnn_large_width}}},
      {"optimizer",
       {{"lr", c.train.lr},
        {"min_lr", c.train.min_lr},
        {"batch", c.train.batch},
        {"epochs", c.train.epochs},
        {"seed", c.train.seed},
        {"warmup_epochs", c.train.warmup_epochs},
        {"checkpoint_every", c.train.checkpoint_every},
        {"use_neighbors", c.train.use_neighbors},
        {"discriminator_only", c.train.discriminator_only}}},
      {"loss",
       {{"lambda_adv", c.loss.adv},
        {"lambda_mes", c.loss.mes},
        {"lambda_mer", c.loss.mer},
        {"alpha", c.loss.alpha},
        {"beta", c.loss.beta},
        {"m_plus", c.loss.m_plus},
        {"m_minus", c.loss.m_minus},
        {"lambda_k", c.loss.lambda_k},
        {"perceptual_seed", c.train.perceptual_seed},
        {"pixel_target", to_string(c.train.pixel_target)},
        {"perceptual_target", to_string(c.train.perceptual_target)}}},
      {"output", c.output},
      {"max_folds", c.max_folds},
      {"jobs", c.jobs}};
}

namespace detail {
class JsonReader {
 public:
  JsonReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("config: '" + path_ + "' must be an object");
    for (auto it = j_.begin(); it != j_.end(); ++it) unseen_.insert(it.key());
  }
  /// Rejects keys that no getter consumed.
  void done() const {
    if (!unseen_.empty()) throw ConfigError("config: unknown key '" + prefix() + *unseen_.begin() + "'");
  }

  template <typename T>
  void get(const char* key, T& out) {
    if (!j_.contains(key)) return;
    unseen_.erase(key);
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config: bad value for '" + prefix() + key + "': " + e.what());
    }
  }
  template <typename E>
  void get_enum(const char* key, E& out, E (*parse)(const std::string&)) {
    std::string s;
    if (!j_.contains(key)) return;
    get(key, s);
    out = parse(s);
  }
  bool has(const char* key) const { return j_.contains(key); }
  JsonReader child(const char* key) {
    unseen_.erase(key);
    return JsonReader(j_.at(key), prefix() + key);
  }

 private:
  std::string prefix() const { return path_.empty() ? "" : path_ + "."; }
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> unseen_;
};
}  // namespace detail

/// Overlays the keys present in `j` on top of `base`; unknown keys are errors.
inline RunConfig from_json(const nlohmann::json& j, RunConfig c = {}) {
  detail::JsonReader root(j, "");
  if (root.has("corpus")) {
    auto r = root.child("corpus");
    r.get("manifest", c.corpus.manifest);
    r.get_enum("mode", c.corpus.mode, parse_eval_mode);
    r.get("dataset", c.corpus.dataset);
    if (r.has("toy")) {
      auto t = r.child("toy");
      auto& o = c.corpus.toy;
      t.get("subjects", o.subjects);
      t.get("samples_per_subject", o.samples_per_subject);
      t.get("seed", o.seed);
      t.get("amplitude_lo", o.amplitude_lo);
      t.get("amplitude_hi", o.amplitude_hi);
      t.get("noise_std", o.noise_std);
      t.get("brightness_jitter", o.brightness_jitter);
      t.get("neighbor_jitter", o.neighbor_jitter);
      t.done();
    }
    r.done();
  }
  if (root.has("model")) {
    auto m = root.child("model");
    auto& g = c.model.generator;
    auto& d = c.model.discriminator;
    m.get("channels", g.channels);
    m.get("noise_dim", g.noise_dim);
    m.get_enum("grm_mode", g.skip, parse_skip_mode);
    m.get("use_encoder", g.use_encoder);
    m.get_enum("fusion", g.fusion, parse_fusion);
    m.get_enum("grm_inverse", g.grm.inverse, parse_inverse);
    m.get("grm_scale_attention", g.grm.scale_attention);
    m.get("grm_adjacency_std", g.grm.adjacency_init_std);
    m.get_enum("discriminator", d.kind, parse_discriminator);
    m.get("patch_channels", d.patch_channels);
    m.get("primary_types", d.primary_types);
    m.get("d_prim", d.primary_dim);
    m.get("d_adv", d.adv_dim);
    m.get("d_exp", d.exp_dim);
    m.get("routing_iterations", d.routing_iterations);
    m.get("recon_hidden", d.recon_hidden);
    m.get("cnn_width", d.cnn_width);
    m.get("cnn_large_width", d.cnn_large_width);
    m.done();
  }
  if (root.has("optimizer")) {
    auto o = root.child("optimizer");
    o.get("lr", c.train.lr);
    o.get("min_lr", c.train.min_lr);
    o.get("batch", c.train.batch);
    o.get("epochs", c.train.epochs);
    o.get("seed", c.train.seed);
    o.get("warmup_epochs", c.train.warmup_epochs);
    o.get("checkpoint_every", c.train.checkpoint_every);
    o.get("use_neighbors", c.train.use_neighbors);
    o.get("discriminator_only", c.train.discriminator_only);
    o.done();
  }
  if (root.has("loss")) {
    auto l = root.child("loss");
    l.get("lambda_adv", c.loss.adv);
    l.get("lambda_mes", c.loss.mes);
    l.get("lambda_mer", c.loss.mer);
    l.get("alpha", c.loss.alpha);
    l.get("beta", c.loss.beta);
    l.get("m_plus", c.loss.m_plus);
    l.get("m_minus", c.loss.m_minus);
    l.get("lambda_k", c.loss.lambda_k);
    l.get("perceptual_seed", c.train.perceptual_seed);
    l.get_enum("pixel_target", c.train.pixel_target, parse_target);
    l.get_enum("perceptual_target", c.train.perceptual_target, parse_target);
    l.done();
  }
  root.get("output", c.output);
  root.get("max_folds", c.max_folds);
  root.get("jobs", c.jobs);
  root.done();
  return c;
}

inline void validate(const RunConfig& c) {
  try {
    c.loss.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  const auto& g = c.model.generator;
  const auto& d = c.model.discriminator;
  for (auto ch : g.channels)
    if (ch == 0) throw ConfigError("model.channels entries must be positive");
  if (!g.use_encoder && g.skip != SkipMode::none) throw ConfigError("model.use_encoder=false requires grm_mode 'none'");
  for (auto ch : d.patch_channels)
    if (ch == 0) throw ConfigError("model.patch_channels entries must be positive");
  if (d.routing_iterations == 0) throw ConfigError("model.routing_iterations must be >= 1");
  if (d.exp_dim == 0 || d.adv_dim == 0 || d.primary_dim == 0 || d.primary_types == 0) {
    throw ConfigError("capsule dimensions must be positive");
  }
  if (c.train.batch == 0) throw ConfigError("optimizer.batch must be positive");
  if (!(c.train.lr > 0.0) || c.train.min_lr < 0.0 || c.train.min_lr > c.train.lr) {
    throw ConfigError("optimizer.lr must be positive and >= min_lr >= 0");
  }
  if (c.corpus.manifest.empty() && c.corpus.toy.subjects < 3) throw ConfigError("corpus.toy.subjects must be >= 3");
  if (c.corpus.mode == EvalMode::sde && c.corpus.dataset.empty()) throw ConfigError("SDE mode needs corpus.dataset");
  if (c.jobs == 0) throw ConfigError("jobs must be >= 1");
}

inline RunConfig load_config(const std::filesystem::path& path, RunConfig base = {}) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return from_json(j, std::move(base));
}

inline void save_config(const std::filesystem::path& path, const RunConfig& c) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << to_json(c).dump(2) << "\n";
}

/// Output root: ICEGAN_OUT when set, otherwise the configured directory.
inline std::filesystem::path output_root(const RunConfig& c) {
  if (const char* env = std::getenv("ICEGAN_OUT"); env && *env) return env;
  return c.output;
}

/// Training or evaluation corpus named by the configuration.
inline std::vector<Sample> load_corpus(const CorpusConfig& c, std::vector<std::string>* warnings = nullptr) {
  if (c.manifest.empty()) return generate_toy_corpus(c.toy);
  auto r = ingest_real(c.manifest);
  if (warnings) warnings->insert(warnings->end(), r.warnings.begin(), r.warnings.end());
  return std::move(r.samples);
}

}  // namespace icegan
