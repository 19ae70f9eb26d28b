#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "icegan/random.hpp"
#include "icegan/tensor.hpp"

namespace icegan {

inline constexpr std::size_t kImageSide = 128;
inline constexpr std::size_t kImagePixels = kImageSide * kImageSide;
inline constexpr std::size_t kNumClasses = 3;

enum class ExpressionClass { positive = 0, negative = 1, surprise = 2 };

inline const char* class_name(int c) {
  static const char* names[] = {"positive", "negative", "surprise"};
  return (c >= 0 && c < 3) ? names[c] : "?";
}

/// Grayscale image in memory range [-1, 1], row-major kImageSide^2.
using Image = std::vector<double>;

inline double to_memory(double disk01) { return disk01 * 2.0 - 1.0; }
inline double to_disk(double memory) { return (memory + 1.0) * 0.5; }

/// Additive Gaussian blobs making up a toy expression patch.
struct ToyPatch {
  struct Blob {
    double y, x, sigma;
  };
  std::vector<Blob> blobs;
  double amplitude = 0.0;  // disk units

  /// Patch intensity at a pixel, before amplitude scaling.
  double shape_at(double y, double x) const {
    double v = 0.0;
    for (const auto& b : blobs) {
      const double dy = y - b.y, dx = x - b.x;
      v += std::exp(-(dy * dy + dx * dx) / (2.0 * b.sigma * b.sigma));
    }
    return v;
  }
  /// Ground-truth region: within two sigma of any blob centre.
  std::vector<bool> region() const {
    std::vector<bool> mask(kImagePixels, false);
    for (std::size_t y = 0; y < kImageSide; ++y)
      for (std::size_t x = 0; x < kImageSide; ++x)
        for (const auto& b : blobs) {
          const double dy = static_cast<double>(y) - b.y, dx = static_cast<double>(x) - b.x;
          if (dy * dy + dx * dx <= 4.0 * b.sigma * b.sigma) mask[y * kImageSide + x] = true;
        }
    return mask;
  }
};

struct Sample {
  std::string id;
  std::string subject;
  std::string dataset = "toy";
  int cls = 0;
  Image onset;
  Image apex;
  int apex_neighbor_index = 0;
  std::optional<ToyPatch> patch;     // toy corpora only
  std::uint64_t variant_seed = 0;    // toy corpora only
  std::vector<Image> neighbors;      // real corpora: adjacent frames, if known

  std::string subject_key() const { return dataset + "/" + subject; }
};

// ---------------------------------------------------------------------------
// Toy faces

/// Identity geometry of one toy subject (pixel coordinates).
struct ToyFaceSpec {
  std::uint64_t texture_seed = 0;
  double face_cy = 66, face_cx = 64, face_ry = 54, face_rx = 44;
  double skin = 0.55;
  double eye_y = 52, eye_dx = 22;
  double brow_y = 40;
  double mouth_y = 94, mouth_dx = 18;
  std::array<double, 4> texture_amp{}, texture_fy{}, texture_fx{}, texture_phase{};

  static ToyFaceSpec random(Rng& rng) {
    ToyFaceSpec s;
    s.texture_seed = rng.next_u64();
    s.face_cy = 66 + rng.uniform(-2, 2);
    s.face_cx = 64 + rng.uniform(-2, 2);
    s.face_ry = 54 + rng.uniform(-3, 3);
    s.face_rx = 44 + rng.uniform(-3, 3);
    s.skin = 0.55 + rng.uniform(-0.05, 0.05);
    s.eye_y = 52 + rng.uniform(-2, 2);
    s.eye_dx = 22 + rng.uniform(-2, 2);
    s.brow_y = s.eye_y - 12 + rng.uniform(-1, 1);
    s.mouth_y = 94 + rng.uniform(-3, 3);
    s.mouth_dx = 18 + rng.uniform(-2, 2);
    for (std::size_t i = 0; i < 4; ++i) {
      s.texture_amp[i] = rng.uniform(0.005, 0.02);
      s.texture_fy[i] = rng.uniform(0.02, 0.12);
      s.texture_fx[i] = rng.uniform(0.02, 0.12);
      s.texture_phase[i] = rng.uniform(0, 6.283185307179586);
    }
    return s;
  }

  /// The class patch is a pure function of subject geometry and class.
  ToyPatch patch(int cls, double amplitude) const {
    constexpr double sigma = 5.0;
    ToyPatch p;
    p.amplitude = amplitude;
    switch (cls) {
      case 0:  // positive: mouth corners
        p.blobs = {{mouth_y - 3, face_cx - mouth_dx - 2, sigma}, {mouth_y - 3, face_cx + mouth_dx + 2, sigma}};
        break;
      case 1:  // negative: inner brow
        p.blobs = {{brow_y - 1, face_cx, sigma}};
        break;
      case 2:  // surprise: raised outer brows
        p.blobs = {{brow_y - 4, face_cx - eye_dx - 6, sigma}, {brow_y - 4, face_cx + eye_dx + 6, sigma}};
        break;
      default: throw std::invalid_argument("toy patch: class index out of range");
    }
    return p;
  }

  /// Neutral face in disk units [0, 1].
  std::vector<double> base_face() const {
    std::vector<double> img(kImagePixels);
    auto ellipse = [](double y, double x, double cy, double cx, double ry, double rx) {
      const double dy = (y - cy) / ry, dx = (x - cx) / rx;
      return dy * dy + dx * dx;
    };
    for (std::size_t yi = 0; yi < kImageSide; ++yi) {
      for (std::size_t xi = 0; xi < kImageSide; ++xi) {
        const double y = static_cast<double>(yi), x = static_cast<double>(xi);
        double v = 0.15;
        const double face = ellipse(y, x, face_cy, face_cx, face_ry, face_rx);
        if (face <= 1.0) {
          v = skin - 0.08 * face;
          for (std::size_t i = 0; i < 4; ++i) v += texture_amp[i] * std::sin(texture_fy[i] * y + texture_fx[i] * x + texture_phase[i]);
          for (double side : {-1.0, 1.0}) {
            if (ellipse(y, x, eye_y, face_cx + side * eye_dx, 3.0, 6.5) <= 1.0) v -= 0.3;
            if (ellipse(y, x, brow_y, face_cx + side * eye_dx, 1.6, 8.0) <= 1.0) v -= 0.22;
          }
          if (ellipse(y, x, mouth_y, face_cx, 3.0, mouth_dx) <= 1.0) v -= 0.25;
          if (ellipse(y, x, (eye_y + mouth_y) / 2.0 + 2.0, face_cx, 8.0, 3.0) <= 1.0) v -= 0.06;
        }
        img[yi * kImageSide + xi] = v;
      }
    }
    return img;
  }
};

struct ToyCorpusOptions {
  std::size_t subjects = 20;
  std::size_t samples_per_subject = 9;
  std::uint64_t seed = 2024;
  double amplitude_lo = 0.1;
  double amplitude_hi = 0.3;
  double neighbor_jitter = 0.1;
  // Off by default: onset is the base face exactly. Both exist to make the
  // toy task harder.
  double noise_std = 0.0;
  double brightness_jitter = 0.0;
};

namespace detail {
inline Image finish_image(const std::vector<double>& disk) {
  Image out(disk.size());
  for (std::size_t i = 0; i < disk.size(); ++i) out[i] = to_memory(std::clamp(disk[i], 0.0, 1.0));
  return out;
}

/// Expressive frame: base + brightness offset + scaled patch + pixel noise.
inline Image render_expressive(const std::vector<double>& base, double brightness, const ToyPatch& patch,
                               double amplitude, double noise_std, Rng& rng) {
  std::vector<double> img(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    const double y = static_cast<double>(i / kImageSide), x = static_cast<double>(i % kImageSide);
    img[i] = base[i] + brightness + amplitude * patch.shape_at(y, x) + rng.normal(0.0, noise_std);
  }
  return finish_image(img);
}
}  // namespace detail

/// Deterministic toy corpus with balanced classes per subject.
inline std::vector<Sample> generate_toy_corpus(const ToyCorpusOptions& opts) {
  if (opts.subjects < 3) throw std::invalid_argument("toy corpus needs at least 3 subjects");
  if (opts.samples_per_subject < 1) throw std::invalid_argument("toy corpus needs at least one sample per subject");
  std::vector<Sample> corpus;
  for (std::size_t s = 0; s < opts.subjects; ++s) {
    Rng subject_rng = Rng::derive(opts.seed, s);
    const ToyFaceSpec face = ToyFaceSpec::random(subject_rng);
    const auto base = face.base_face();
    char subject[16];
    std::snprintf(subject, sizeof subject, "s%02zu", s + 1);
    for (std::size_t k = 0; k < opts.samples_per_subject; ++k) {
      Sample smp;
      smp.subject = subject;
      smp.cls = static_cast<int>(k % kNumClasses);
      char id[32];
      std::snprintf(id, sizeof id, "toy_%s_%02zu", subject, k);
      smp.id = id;
      smp.variant_seed = subject_rng.next_u64();
      Rng frame_rng(smp.variant_seed);
      const double brightness = opts.brightness_jitter * frame_rng.uniform(-1.0, 1.0);
      const double amplitude = frame_rng.uniform(opts.amplitude_lo, opts.amplitude_hi);
      ToyPatch patch = face.patch(smp.cls, amplitude);
      smp.onset = detail::render_expressive(base, brightness, patch, 0.0, opts.noise_std, frame_rng);
      smp.apex = detail::render_expressive(base, brightness, patch, amplitude, opts.noise_std, frame_rng);
      smp.patch = patch;
      corpus.push_back(std::move(smp));
    }
  }
  return corpus;
}

/// Apex plus four neighbours (indices -2..2), all sharing subject and class.
/// Toy neighbours rescale the patch by 1 +- jitter with fresh pixel noise;
/// real samples use the recorded adjacent frames, falling back to the apex.
inline std::vector<Sample> augment_neighbors(const Sample& sample, const ToyCorpusOptions& toy = {}) {
  std::vector<Sample> out;
  for (int offset = -2; offset <= 2; ++offset) {
    Sample n = sample;
    n.apex_neighbor_index = offset;
    n.neighbors.clear();
    if (offset != 0) {
      n.id = sample.id + (offset < 0 ? "_m" : "_p") + std::to_string(std::abs(offset));
      if (sample.patch) {
        Rng jitter_rng = Rng::derive(sample.variant_seed, static_cast<std::uint64_t>(offset + 2));
        const double scale = 1.0 + jitter_rng.uniform(-toy.neighbor_jitter, toy.neighbor_jitter);
        const double extra = (scale - 1.0) * sample.patch->amplitude;
        for (std::size_t i = 0; i < n.apex.size(); ++i) {
          const double y = static_cast<double>(i / kImageSide), x = static_cast<double>(i % kImageSide);
          const double disk = to_disk(sample.apex[i]) + extra * sample.patch->shape_at(y, x) + jitter_rng.normal(0.0, toy.noise_std);
          n.apex[i] = to_memory(std::clamp(disk, 0.0, 1.0));
        }
      } else {
        const std::size_t slot = static_cast<std::size_t>(offset < 0 ? offset + 2 : offset + 1);
        if (slot < sample.neighbors.size()) n.apex = sample.neighbors[slot];
      }
    }
    out.push_back(std::move(n));
  }
  return out;
}

// ---------------------------------------------------------------------------
// PGM (binary P5, 8-bit)

/// Writes disk-range [0, 1] values as 8-bit P5.
inline void write_pgm(const std::filesystem::path& path, std::size_t width, std::size_t height, const std::vector<double>& disk01) {
  if (disk01.size() != width * height) throw std::invalid_argument("write_pgm: pixel count mismatch");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "P5\n" << width << ' ' << height << "\n255\n";
  std::vector<unsigned char> bytes(disk01.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    bytes[i] = static_cast<unsigned char>(std::lround(std::clamp(disk01[i], 0.0, 1.0) * 255.0));
  }
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline void write_pgm_image(const std::filesystem::path& path, const Image& memory) {
  std::vector<double> disk(memory.size());
  for (std::size_t i = 0; i < disk.size(); ++i) disk[i] = to_disk(memory[i]);
  write_pgm(path, kImageSide, kImageSide, disk);
}

struct PgmImage {
  std::size_t width = 0, height = 0;
  std::vector<double> disk01;
};

inline PgmImage read_pgm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open image " + path.string());
  auto token = [&]() {
    std::string t;
    char c;
    while (is.get(c)) {
      if (c == '#') {
        std::string line;
        std::getline(is, line);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(c))) {
        if (!t.empty()) break;
        continue;
      }
      t.push_back(c);
    }
    return t;
  };
  if (token() != "P5") throw std::runtime_error(path.string() + ": not a binary PGM (P5)");
  PgmImage img;
  try {
    img.width = std::stoul(token());
    img.height = std::stoul(token());
    const unsigned long maxval = std::stoul(token());
    if (maxval == 0 || maxval > 255) throw std::runtime_error("unsupported maxval");
    std::vector<unsigned char> bytes(img.width * img.height);
    if (!is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()))) {
      throw std::runtime_error("truncated pixel data");
    }
    img.disk01.resize(bytes.size());
    for (std::size_t i = 0; i < bytes.size(); ++i) img.disk01[i] = bytes[i] / static_cast<double>(maxval);
  } catch (const std::logic_error&) {
    throw std::runtime_error(path.string() + ": malformed PGM header");
  }
  return img;
}

// ---------------------------------------------------------------------------
// Real-corpus manifest ingestion

/// Maps corpus emotion labels onto the three-class scheme.
inline std::optional<int> map_class_label(std::string label) {
  std::transform(label.begin(), label.end(), label.begin(), [](unsigned char c) { return std::tolower(c); });
  static const std::map<std::string, int> table{
      {"positive", 0}, {"happiness", 0}, {"happy", 0},
      {"negative", 1}, {"disgust", 1},   {"repression", 1}, {"anger", 1}, {"contempt", 1},
      {"fear", 1},     {"sadness", 1},   {"sad", 1},
      {"surprise", 2}};
  auto it = table.find(label);
  if (it == table.end()) return std::nullopt;
  return it->second;
}

class IngestError : public std::runtime_error {
 public:
  explicit IngestError(std::vector<std::string> items)
      : std::runtime_error(join(items)), items_(std::move(items)) {}
  const std::vector<std::string>& items() const { return items_; }

 private:
  static std::string join(const std::vector<std::string>& items) {
    std::string s = std::to_string(items.size()) + " manifest error(s):";
    for (const auto& i : items) s += "\n  " + i;
    return s;
  }
  std::vector<std::string> items_;
};

struct IngestResult {
  std::vector<Sample> samples;
  std::vector<std::string> warnings;
};

namespace detail {
inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  bool quoted = false;
  for (char c : line) {
    if (c == '"') quoted = !quoted;
    else if (c == ',' && !quoted) {
      cells.push_back(cur);
      cur.clear();
    } else if (c != '\r') cur.push_back(c);
  }
  cells.push_back(cur);
  for (auto& s : cells) {
    const auto b = s.find_first_not_of(" \t");
    const auto e = s.find_last_not_of(" \t");
    s = b == std::string::npos ? "" : s.substr(b, e - b + 1);
  }
  return cells;
}
}  // namespace detail

/// Reads `subject,dataset,class,onset_path,apex_path[,neighbors]` where
/// neighbors is an optional ';'-separated list of four adjacent frames.
/// Relative paths resolve against the manifest directory. All problems are
/// collected and thrown together.
inline IngestResult ingest_real(const std::filesystem::path& manifest) {
  std::ifstream is(manifest);
  if (!is) throw IngestError({"cannot open manifest " + manifest.string()});
  const auto root = manifest.parent_path();
  IngestResult result;
  std::vector<std::string> errors;
  std::string line;
  if (!std::getline(is, line)) {
    result.warnings.push_back("manifest " + manifest.string() + " is empty");
    return result;
  }
  const auto header = detail::split_csv_line(line);
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
  for (const char* need : {"subject", "dataset", "class", "onset_path", "apex_path"}) {
    if (!col.count(need)) errors.push_back(std::string("header is missing column '") + need + "'");
  }
  if (!errors.empty()) throw IngestError(errors);
  auto load = [&](const std::string& rel, std::size_t row, const char* what, Image& out) {
    std::filesystem::path p(rel);
    if (p.is_relative()) p = root / p;
    if (!std::filesystem::exists(p)) {
      errors.push_back("row " + std::to_string(row) + ": " + what + " file not found: " + p.string());
      return;
    }
    try {
      auto img = read_pgm(p);
      if (img.width != kImageSide || img.height != kImageSide) {
        errors.push_back("row " + std::to_string(row) + ": " + what + " image " + p.string() + " is " +
                         std::to_string(img.width) + "x" + std::to_string(img.height) + ", expected 128x128");
        return;
      }
      out = detail::finish_image(img.disk01);
    } catch (const std::exception& e) {
      errors.push_back("row " + std::to_string(row) + ": " + e.what());
    }
  };
  std::size_t row = 1;
  while (std::getline(is, line)) {
    ++row;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() < header.size() && cells.size() < 5) {
      errors.push_back("row " + std::to_string(row) + ": expected " + std::to_string(header.size()) + " columns");
      continue;
    }
    auto cell = [&](const char* name) { return col[name] < cells.size() ? cells[col[name]] : std::string(); };
    Sample s;
    s.subject = cell("subject");
    s.dataset = cell("dataset");
    const auto cls = map_class_label(cell("class"));
    if (!cls) errors.push_back("row " + std::to_string(row) + ": unknown class label '" + cell("class") + "'");
    else s.cls = *cls;
    if (s.subject.empty()) errors.push_back("row " + std::to_string(row) + ": empty subject");
    load(cell("onset_path"), row, "onset", s.onset);
    load(cell("apex_path"), row, "apex", s.apex);
    if (col.count("neighbors") && !cell("neighbors").empty()) {
      std::stringstream ss(cell("neighbors"));
      std::string item;
      while (std::getline(ss, item, ';')) {
        Image img;
        load(item, row, "neighbor", img);
        if (!img.empty()) s.neighbors.push_back(std::move(img));
      }
    }
    s.id = s.dataset + "_" + s.subject + "_" + std::to_string(row - 1);
    result.samples.push_back(std::move(s));
  }
  if (!errors.empty()) throw IngestError(errors);
  if (result.samples.empty()) result.warnings.push_back("manifest " + manifest.string() + " lists no samples");
  return result;
}

// ---------------------------------------------------------------------------
// Leave-one-subject-out splits

enum class EvalMode { cde, sde };

struct LosoSplit {
  std::string held_out;              // subject key dataset/subject
  std::set<std::string> train_subjects;
  EvalMode mode = EvalMode::cde;
  std::string dataset;               // SDE only
  std::vector<std::size_t> train_indices, test_indices;
};

/// One fold per subject, ordered by subject key. SDE restricts the corpus
/// to `dataset` first.
inline std::vector<LosoSplit> loso_folds(const std::vector<Sample>& corpus, EvalMode mode, const std::string& dataset = "") {
  if (mode == EvalMode::sde && dataset.empty()) throw std::invalid_argument("SDE folds need a dataset name");
  std::set<std::string> subjects;
  for (const auto& s : corpus)
    if (mode == EvalMode::cde || s.dataset == dataset) subjects.insert(s.subject_key());
  if (subjects.size() < 2) throw std::invalid_argument("LOSO needs at least 2 subjects, corpus has " + std::to_string(subjects.size()));
  std::vector<LosoSplit> folds;
  for (const auto& held : subjects) {
    LosoSplit f;
    f.held_out = held;
    f.mode = mode;
    f.dataset = dataset;
    for (const auto& s : subjects)
      if (s != held) f.train_subjects.insert(s);
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      const auto& smp = corpus[i];
      if (mode == EvalMode::sde && smp.dataset != dataset) continue;
      (smp.subject_key() == held ? f.test_indices : f.train_indices).push_back(i);
    }
    folds.push_back(std::move(f));
  }
  return folds;
}

/// Stacks images into [B, 1, 128, 128].
inline Tensor stack_images(const std::vector<const Image*>& images) {
  Buffer v;
  v.reserve(images.size() * kImagePixels);
  for (const auto* img : images) {
    if (img->size() != kImagePixels) throw ShapeError("stack_images: image with " + std::to_string(img->size()) + " pixels");
    v.insert(v.end(), img->begin(), img->end());
  }
  return Tensor({images.size(), 1, kImageSide, kImageSide}, std::move(v));
}

}  // namespace icegan
