#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>

#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "lrdg/dataset.hpp"
#include "lrdg/random.hpp"

namespace fs = std::filesystem;

namespace lrdg {
namespace {

std::vector<fs::path> sorted_entries(const fs::path& dir, bool directories) {
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (directories ? entry.is_directory() : entry.is_regular_file()) out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

Image read_image(const fs::path& path, int image_size) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw Error("unreadable image file: " + path.string());
  cv::Mat resized;
  cv::resize(bgr, resized, cv::Size(image_size, image_size), 0, 0, cv::INTER_AREA);
  Image img(3, image_size * image_size);
  for (int y = 0; y < image_size; ++y) {
    const auto* row = resized.ptr<cv::Vec3b>(y);
    for (int x = 0; x < image_size; ++x) {
      for (int c = 0; c < 3; ++c) {
        // OpenCV is BGR; store RGB.
        img(c, y * image_size + x) = static_cast<Real>(row[x][2 - c]) / 255.0f;
      }
    }
  }
  return img;
}

MultiDomainDataset load_image_folder(const fs::path& root, int image_size,
                                     SplitFractions fractions, std::uint64_t seed) {
  if (!(fractions.train > 0.0) || fractions.val < 0.0 || !(fractions.train + fractions.val < 1.0)) {
    throw ConfigError("split fractions must satisfy train > 0, val >= 0 and train + val < 1");
  }
  if (image_size < 8) throw ConfigError("image_size must be at least 8");
  if (!fs::is_directory(root)) throw Error("dataset root is not a directory: " + root.string());

  const auto domain_dirs = sorted_entries(root, true);
  if (domain_dirs.size() < 2) throw Error("dataset root must contain at least two domain directories");

  std::map<std::string, std::set<std::string>> classes_per_domain;
  std::set<std::string> all_classes;
  for (const auto& d : domain_dirs) {
    for (const auto& c : sorted_entries(d, true)) {
      classes_per_domain[d.filename().string()].insert(c.filename().string());
      all_classes.insert(c.filename().string());
    }
  }
  for (const auto& d : domain_dirs) {
    const std::string name = d.filename().string();
    const auto& have = classes_per_domain[name];
    if (have.size() == 1) throw Error("domain " + name + " has a single class");
    for (const auto& c : all_classes) {
      if (!have.contains(c)) throw Error("domain " + name + " missing class " + c);
    }
  }

  MultiDomainDataset ds;
  ds.shape = {image_size, image_size, 3};
  ds.class_names.assign(all_classes.begin(), all_classes.end());  // lexicographic
  for (std::size_t d = 0; d < domain_dirs.size(); ++d) {
    Domain domain;
    domain.name = domain_dirs[d].filename().string();
    for (int label = 0; label < ds.num_classes(); ++label) {
      const fs::path class_dir = domain_dirs[d] / ds.class_names[static_cast<std::size_t>(label)];
      const auto files = sorted_entries(class_dir, false);
      if (files.empty()) throw Error("domain " + domain.name + " missing class " +
                                     ds.class_names[static_cast<std::size_t>(label)]);
      for (const auto& f : files) {
        Sample s;
        s.image = read_image(f, image_size);
        s.label = label;
        s.domain_id = static_cast<int>(d);
        domain.samples.push_back(std::move(s));
      }
    }
    // Split streams are keyed by domain name so that enumeration order does
    // not change a domain's assignment.
    Fnv1a h;
    h.update(domain.name);
    Rng rng = Rng::derived(seed, h.digest());
    assign_splits(domain.samples, ds.num_classes(), fractions, rng);
    ds.domains.push_back(std::move(domain));
  }
  ds.validate();
  return ds;
}

void export_dataset(const MultiDomainDataset& dataset, const fs::path& root,
                    const SyntheticDomainSpec* spec, std::uint64_t seed) {
  fs::create_directories(root);
  nlohmann::json manifest;
  manifest["format"] = "lrdg-dataset-manifest";
  manifest["version"] = 1;
  manifest["seed"] = seed;
  manifest["image_shape"] = {dataset.shape.height, dataset.shape.width, dataset.shape.channels};
  manifest["class_names"] = dataset.class_names;
  if (spec != nullptr) {
    nlohmann::json s;
    s["num_classes"] = spec->num_classes;
    s["samples_per_class_per_domain"] = spec->samples_per_class_per_domain;
    s["image_size"] = spec->image_size;
    std::vector<std::string> kinds;
    for (CueKind k : spec->cue_kinds) kinds.push_back(to_string(k));
    s["cue_kinds"] = kinds;
    s["cue_strength"] = spec->cue_strength;
    s["noise_level"] = spec->noise_level;
    s["foreign_cues"] = spec->foreign_cues == ForeignCueMode::omitted ? "omitted" : "random";
    s["split"] = {spec->split.train, spec->split.val};
    manifest["spec"] = s;
  }
  nlohmann::json domains = nlohmann::json::array();
  for (const Domain& domain : dataset.domains) {
    nlohmann::json jd;
    jd["name"] = domain.name;
    jd["cue_kind"] = to_string(domain.cue_kind);
    nlohmann::json samples = nlohmann::json::array();
    for (std::size_t i = 0; i < domain.samples.size(); ++i) {
      const Sample& s = domain.samples[i];
      const std::string cls = dataset.class_names[static_cast<std::size_t>(s.label)];
      char file_name[32];
      std::snprintf(file_name, sizeof(file_name), "%05zu.png", i);
      const fs::path rel = fs::path(domain.name) / cls / file_name;
      fs::create_directories(root / rel.parent_path());

      const auto rgb = to_rgb8(s.image, dataset.shape);
      cv::Mat bgr(dataset.shape.height, dataset.shape.width, CV_8UC3);
      for (int p = 0; p < dataset.shape.pixels(); ++p) {
        auto& px = bgr.at<cv::Vec3b>(p / dataset.shape.width, p % dataset.shape.width);
        for (int c = 0; c < 3; ++c) px[2 - c] = rgb[static_cast<std::size_t>(p) * 3 + static_cast<std::size_t>(c)];
      }
      if (!cv::imwrite((root / rel).string(), bgr)) {
        throw Error("failed to write " + (root / rel).string());
      }
      nlohmann::json js;
      js["file"] = rel.generic_string();
      js["label"] = s.label;
      js["split"] = to_string(s.split);
      nlohmann::json cues = nlohmann::json::array();
      for (const CueDescriptor& c : s.cues) {
        cues.push_back({{"kind", to_string(c.kind)}, {"parameter", c.parameter},
                        {"class_keyed", c.class_keyed}});
      }
      js["cues"] = cues;
      samples.push_back(js);
    }
    jd["samples"] = samples;
    domains.push_back(jd);
  }
  manifest["domains"] = domains;
  std::ofstream out(root / "manifest.json");
  out << manifest.dump(2) << '\n';
  if (!out) throw Error("failed to write manifest in " + root.string());
}

}  // namespace lrdg
