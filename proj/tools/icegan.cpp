// icegan: train, eval, synthesize, ablate, gradcheck.
//
// Precedence: built-in defaults < --config file < command-line flags.
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "icegan/icegan.hpp"

namespace {

using namespace icegan;

struct Overrides {
  std::string config;
  std::optional<std::string> manifest, mode, dataset, grm_mode, discriminator, output;
  std::optional<std::size_t> epochs, batch, d_exp, routing, subjects, max_folds, jobs, thin;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* app, Overrides& o) {
  app->add_option("--config", o.config, "JSON config file");
  app->add_option("--manifest", o.manifest, "real-corpus CSV manifest (default: toy corpus)");
  app->add_option("--mode", o.mode, "cde or sde");
  app->add_option("--dataset", o.dataset, "dataset for SDE");
  app->add_option("--grm-mode", o.grm_mode, "none, skip, se or grm");
  app->add_option("--discriminator", o.discriminator, "capsule, cnn or cnn_large");
  app->add_option("--d-exp", o.d_exp, "ExpCaps dimension");
  app->add_option("--routing", o.routing, "routing iterations");
  app->add_option("--epochs", o.epochs);
  app->add_option("--batch", o.batch);
  app->add_option("--lr", o.lr);
  app->add_option("--seed", o.seed);
  app->add_option("--subjects", o.subjects, "toy corpus subjects");
  app->add_option("--max-folds", o.max_folds, "evaluate only the first N LOSO folds (0 = all)");
  app->add_option("--jobs", o.jobs, "folds trained concurrently");
  app->add_option("--thin", o.thin, "divide every channel width by N");
  app->add_option("--output", o.output, "output root (ICEGAN_OUT takes precedence)");
}

RunConfig resolve(const Overrides& o) {
  RunConfig c;
  if (!o.config.empty()) c = load_config(o.config, c);
  if (o.thin) {
    if (*o.thin == 0) throw ConfigError("--thin must be >= 1");
    c.model = c.model.thinned(*o.thin);
  }
  if (o.manifest) c.corpus.manifest = *o.manifest;
  if (o.mode) c.corpus.mode = parse_eval_mode(*o.mode);
  if (o.dataset) c.corpus.dataset = *o.dataset;
  if (o.grm_mode) c.model.generator.skip = parse_skip_mode(*o.grm_mode);
  if (o.discriminator) c.model.discriminator.kind = parse_discriminator(*o.discriminator);
  if (o.d_exp) c.model.discriminator.exp_dim = *o.d_exp;
  if (o.routing) c.model.discriminator.routing_iterations = *o.routing;
  if (o.epochs) c.train.epochs = *o.epochs;
  if (o.batch) c.train.batch = *o.batch;
  if (o.lr) c.train.lr = *o.lr;
  if (o.seed) c.train.seed = *o.seed;
  if (o.subjects) c.corpus.toy.subjects = *o.subjects;
  if (o.max_folds) c.max_folds = *o.max_folds;
  if (o.jobs) c.jobs = *o.jobs;
  if (o.output) c.output = *o.output;
  validate(c);
  return c;
}

template <typename T>
std::vector<T> split_list(const std::string& s, const char* what) {
  std::vector<T> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    if constexpr (std::is_same_v<T, std::string>) {
      out.push_back(tok);
    } else {
      try {
        std::size_t used = 0;
        const long long v = std::stoll(tok, &used);
        if (used != tok.size() || v < 0) throw std::invalid_argument(tok);
        out.push_back(static_cast<T>(v));
      } catch (const std::exception&) {
        throw ConfigError(std::string("bad ") + what + " '" + tok + "'");
      }
    }
  }
  return out;
}

std::vector<int> parse_classes(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    bool found = false;
    for (int c = 0; c < static_cast<int>(kNumClasses); ++c)
      if (tok == class_name(c) || tok == std::to_string(c)) {
        out.push_back(c);
        found = true;
      }
    if (!found) throw ConfigError("unknown class '" + tok + "' (expected positive, negative, surprise or 0-2)");
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Identity-aware capsule GAN for micro-expression recognition and synthesis"};
  app.require_subcommand(1);

  Overrides train_o, eval_o, synth_o, ablate_o;
  std::string run_name;

  auto* train_cmd = app.add_subcommand("train", "train on the whole corpus and write checkpoints");
  add_common(train_cmd, train_o);
  train_cmd->add_option("--name", run_name, "run directory name")->default_val("train");

  auto* eval_cmd = app.add_subcommand("eval", "LOSO evaluation, or scoring of one checkpoint");
  add_common(eval_cmd, eval_o);
  EvalRequest eval_req;
  std::string eval_model = "icegan";
  eval_cmd->add_option("--checkpoint", eval_req.checkpoint, "score this checkpoint instead of running LOSO");
  eval_cmd->add_option("--model", eval_model, "icegan, oracle, random or majority");
  eval_cmd->add_option("--name", eval_req.run_name, "run directory name");

  auto* synth_cmd = app.add_subcommand("synthesize", "synthesise apex frames from an onset frame");
  add_common(synth_cmd, synth_o);
  SynthRequest synth_req;
  std::string synth_classes = "positive,negative,surprise";
  std::uint64_t synth_seed = 0;
  synth_cmd->add_option("--checkpoint", synth_req.checkpoint, "model checkpoint")->required();
  synth_cmd->add_option("--onset", synth_req.onset, "onset PGM, or toy:<sample id>")->required();
  synth_cmd->add_option("--classes", synth_classes, "comma-separated classes");
  synth_cmd->add_option("--noise-seed", synth_seed, "seed for z");
  synth_cmd->add_flag("--diff", synth_req.diff, "also write difference maps");
  synth_cmd->add_option("--name", synth_req.run_name, "run directory name");

  auto* ablate_cmd = app.add_subcommand("ablate", "train a grid of variants and tabulate LOSO scores");
  add_common(ablate_cmd, ablate_o);
  AblateRequest ablate_req;
  std::string variants = "C,D,E,F", seeds = "1,2,3";
  ablate_cmd->add_option("--variants", variants,
                         "comma-separated; tokens A|disc_only B|dcgan C|none D|skip E|se F|grm capsule cnn cnn_large dexp=N, "
                         "joined with +");
  ablate_cmd->add_option("--seeds", seeds, "comma-separated training seeds");
  ablate_cmd->add_option("--name", ablate_req.run_name, "run directory name");

  auto* grad_cmd = app.add_subcommand("gradcheck", "central-difference check of every layer and loss");
  bool inject = false;
  std::string filter;
  grad_cmd->add_flag("--inject-bug", inject, "corrupt one backward rule; the check must then fail");
  grad_cmd->add_option("--filter", filter, "run suites whose name contains this");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (train_cmd->parsed()) {
      cmd_train(resolve(train_o), run_name);
    } else if (eval_cmd->parsed()) {
      eval_req.model = parse_baseline(eval_model);
      const auto run = cmd_eval(resolve(eval_o), eval_req);
      if (!run.report.complete()) return 1;
    } else if (synth_cmd->parsed()) {
      synth_req.classes = parse_classes(synth_classes);
      synth_req.seed = synth_seed;
      cmd_synthesize(resolve(synth_o), synth_req);
    } else if (ablate_cmd->parsed()) {
      ablate_req.variants = split_list<std::string>(variants, "variant");
      ablate_req.seeds = split_list<std::uint64_t>(seeds, "seed");
      cmd_ablate(resolve(ablate_o), ablate_req);
    } else if (grad_cmd->parsed()) {
      return cmd_gradcheck(inject, filter).passed() ? 0 : 1;
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
