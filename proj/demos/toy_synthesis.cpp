// Trains a narrow model on the procedural toy corpus, holds one subject out,
// and writes a synthetic apex for each class next to the real frames.
//
//   demo_toy_synthesis [out_dir] [epochs]

#include <filesystem>
#include <iostream>
#include <string>

#include "icegan/icegan.hpp"

using namespace icegan;

namespace {

void save(const std::filesystem::path& path, const Image& img) {
  std::vector<double> disk(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) disk[i] = to_disk(img[i]);
  write_pgm(path, kImageSide, kImageSide, disk);
}

}  // namespace

int main(int argc, char** argv) {
  const std::filesystem::path out = argc > 1 ? argv[1] : "toy_synthesis";
  const std::size_t epochs = argc > 2 ? std::stoul(argv[2]) : 10;
  std::filesystem::create_directories(out);

  ToyCorpusOptions toy;
  toy.subjects = 6;
  const auto corpus = generate_toy_corpus(toy);
  const auto folds = loso_folds(corpus, EvalMode::cde);
  const auto& fold = folds.front();
  std::vector<const Sample*> train_set, test_set;
  for (auto i : fold.train_indices) train_set.push_back(&corpus[i]);
  for (auto i : fold.test_indices) test_set.push_back(&corpus[i]);

  TrainOptions opts;
  opts.epochs = epochs;
  opts.batch = 4;
  opts.warmup_epochs = 1;
  IceGan model(ModelConfig{}.thinned(8), opts.seed);
  std::cout << "training on " << train_set.size() << " samples, holding out " << fold.held_out << "\n";
  TrainingCallbacks cb;
  cb.on_step = [](const LossRecord& r) {
    if (r.step == 0) std::cout << "  epoch " << r.epoch << "  pixel " << r.l_pixel << "  margin " << r.l_margin << "\n";
  };
  train(model, train_set, opts, LossWeights{}, {}, cb);

  const Sample& s = *test_set.front();
  save(out / (s.id + "_onset.pgm"), s.onset);
  save(out / (s.id + "_apex.pgm"), s.apex);
  Rng rng(5);
  for (int c = 0; c < static_cast<int>(kNumClasses); ++c) {
    const Image syn = model.synthesize({&s.onset}, {c}, rng)[0];
    save(out / (s.id + "_" + class_name(c) + ".pgm"), syn);
    const auto diff = norm2_diff(syn, s.onset);
    std::cout << class_name(c) << ": changed region rows " << diff.region.top << "-" << diff.region.bottom << ", cols "
              << diff.region.left << "-" << diff.region.right;
    if (s.patch && c == s.cls) std::cout << "  (IoU with the true patch " << mask_iou(diff.region.mask, s.patch->region()) << ")";
    std::cout << "\n";
  }

  const auto pred = model.predict(test_set);
  std::size_t hits = 0;
  for (const auto& p : pred) hits += p.truth == p.predicted;
  std::cout << "held-out accuracy " << hits << "/" << pred.size() << "\nwrote " << out.string() << "\n";
}
