#include "lrdg/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "lrdg/random.hpp"

namespace lrdg {

std::string to_string(CueKind kind) {
  switch (kind) {
    case CueKind::tint: return "tint";
    case CueKind::stripe: return "stripe";
    case CueKind::watermark: return "watermark";
    case CueKind::frame: return "frame";
    case CueKind::none: return "none";
  }
  return "none";
}

CueKind parse_cue_kind(const std::string& name) {
  for (CueKind k : {CueKind::tint, CueKind::stripe, CueKind::watermark, CueKind::frame,
                    CueKind::none}) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown cue kind '" + name + "'");
}

std::string to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

std::vector<int> Domain::indices(Split split) const {
  std::vector<int> out;
  for (int i = 0; i < static_cast<int>(samples.size()); ++i) {
    if (samples[static_cast<std::size_t>(i)].split == split) out.push_back(i);
  }
  return out;
}

std::vector<int> Domain::all_indices() const {
  std::vector<int> out(samples.size());
  for (int i = 0; i < static_cast<int>(out.size()); ++i) out[static_cast<std::size_t>(i)] = i;
  return out;
}

int MultiDomainDataset::domain_index(const std::string& name) const {
  for (int i = 0; i < num_domains(); ++i) {
    if (domains[static_cast<std::size_t>(i)].name == name) return i;
  }
  throw ConfigError("unknown domain '" + name + "'");
}

void MultiDomainDataset::validate() const {
  const int classes = num_classes();
  if (classes < 2) throw ConfigError("dataset needs at least two classes");
  for (int d = 0; d < num_domains(); ++d) {
    const Domain& domain = domains[static_cast<std::size_t>(d)];
    std::vector<int> train_counts(static_cast<std::size_t>(classes), 0);
    for (const Sample& s : domain.samples) {
      if (s.label < 0 || s.label >= classes) {
        throw Error("domain " + domain.name + ": label out of range");
      }
      if (s.domain_id != d) throw Error("domain " + domain.name + ": inconsistent domain id");
      if (s.image.rows() != shape.channels || s.image.cols() != shape.pixels()) {
        throw ShapeError("domain " + domain.name + ": image shape mismatch");
      }
      if (s.image.size() > 0 && (s.image.minCoeff() < 0.0f || s.image.maxCoeff() > 1.0f)) {
        throw Error("domain " + domain.name + ": pixel values outside [0,1]");
      }
      if (s.split == Split::train) ++train_counts[static_cast<std::size_t>(s.label)];
    }
    for (int c = 0; c < classes; ++c) {
      if (train_counts[static_cast<std::size_t>(c)] == 0) {
        throw Error("domain " + domain.name + " has no training sample of class " +
                    class_names[static_cast<std::size_t>(c)]);
      }
    }
  }
}

void assign_splits(std::vector<Sample>& samples, int num_classes, SplitFractions fractions,
                   Rng& rng) {
  if (!(fractions.train > 0.0) || fractions.val < 0.0 || !(fractions.train + fractions.val < 1.0)) {
    throw ConfigError("split fractions must satisfy train > 0, val >= 0 and train + val < 1");
  }
  for (int c = 0; c < num_classes; ++c) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      if (samples[i].label == c) members.push_back(i);
    }
    rng.shuffle(members);
    const auto n = static_cast<double>(members.size());
    auto n_train = static_cast<std::size_t>(std::floor(fractions.train * n + 0.5));
    auto n_val = static_cast<std::size_t>(std::floor(fractions.val * n + 0.5));
    n_train = std::clamp<std::size_t>(n_train, members.empty() ? 0 : 1, members.size());
    n_val = std::min(n_val, members.size() - n_train);
    for (std::size_t k = 0; k < members.size(); ++k) {
      Split s = k < n_train ? Split::train : (k < n_train + n_val ? Split::val : Split::test);
      samples[members[k]].split = s;
    }
  }
}

std::vector<LooFold> make_loo_splits(const MultiDomainDataset& dataset) {
  const int n = dataset.num_domains();
  if (n < 2) throw ConfigError("leave-one-domain-out needs at least two domains");
  std::vector<LooFold> folds;
  for (int t = 0; t < n; ++t) {
    LooFold fold;
    fold.target = t;
    for (int s = 0; s < n; ++s) {
      if (s != t) fold.sources.push_back(s);
    }
    folds.push_back(std::move(fold));
  }
  return folds;
}

MatrixR stack_images(const Domain& domain, std::span<const int> indices) {
  if (indices.empty()) return {};
  const Image& first = domain.samples[static_cast<std::size_t>(indices[0])].image;
  const Eigen::Index pixels = first.cols();
  MatrixR out(first.rows(), pixels * static_cast<Eigen::Index>(indices.size()));
  for (std::size_t k = 0; k < indices.size(); ++k) {
    out.middleCols(static_cast<Eigen::Index>(k) * pixels, pixels) =
        domain.samples[static_cast<std::size_t>(indices[k])].image;
  }
  return out;
}

MatrixR stack_images(std::span<const Image> images) {
  if (images.empty()) return {};
  const Eigen::Index pixels = images[0].cols();
  MatrixR out(images[0].rows(), pixels * static_cast<Eigen::Index>(images.size()));
  for (std::size_t k = 0; k < images.size(); ++k) {
    if (images[k].cols() != pixels || images[k].rows() != images[0].rows()) {
      throw ShapeError("stack_images: inconsistent image shapes");
    }
    out.middleCols(static_cast<Eigen::Index>(k) * pixels, pixels) = images[k];
  }
  return out;
}

std::vector<std::uint8_t> to_rgb8(const Image& image, const ImageShape& shape) {
  std::vector<std::uint8_t> out(static_cast<std::size_t>(shape.pixels()) * 3);
  for (int p = 0; p < shape.pixels(); ++p) {
    for (int c = 0; c < 3; ++c) {
      const int src = shape.channels == 1 ? 0 : c;
      const float v = std::clamp(image(src, p), 0.0f, 1.0f);
      out[static_cast<std::size_t>(p) * 3 + static_cast<std::size_t>(c)] =
          static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
  }
  return out;
}

}  // namespace lrdg
