#include "lrdg/experiment.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <map>

#include <spdlog/spdlog.h>
#include <yaml-cpp/yaml.h>

#include "lrdg/nn/checkpoint.hpp"
#include "lrdg/plot.hpp"

namespace fs = std::filesystem;

namespace lrdg {

namespace {

// ---------------------------------------------------------------------------
// YAML reading with line-anchored errors

class Reader {
 public:
  explicit Reader(std::string name) : name_(std::move(name)) {}

  [[nodiscard]] std::string where(const YAML::Node& node) const {
    const YAML::Mark m = node.Mark();
    if (m.is_null() || m.line < 0) return name_ + ": (--set)";
    return name_ + ":" + std::to_string(m.line + 1) + ":" + std::to_string(m.column + 1);
  }

  [[noreturn]] void fail(const YAML::Node& node, const std::string& message) const {
    throw ConfigError(where(node) + ": " + message);
  }

  void expect_map(const YAML::Node& node, const std::string& key) const {
    if (!node.IsMap()) fail(node, key + ": expected a mapping");
  }

  void check_keys(const YAML::Node& map, const std::string& section, std::initializer_list<std::string_view> allowed) const {
    for (auto it = map.begin(); it != map.end(); ++it) {
      const auto key = it->first.as<std::string>();
      if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
        fail(it->first, "unknown key '" + (section.empty() ? key : section + "." + key) + "'");
      }
    }
  }

  template <typename T>
  T as(const YAML::Node& node, const std::string& key) const {
    try {
      return node.as<T>();
    } catch (const YAML::Exception&) {
      fail(node, key + ": expected " + type_name<T>());
    }
  }

  /// Reads map[key] into `out` when present.
  template <typename T>
  void read(const YAML::Node& map, const std::string& section, const char* key, T& out) const {
    const YAML::Node node = map[key];
    if (node) out = as<T>(node, section + "." + key);
  }

  /// Runs `check`, re-anchoring any ConfigError at `node`.
  template <typename F>
  void guard(const YAML::Node& node, F&& check) const {
    try {
      check();
    } catch (const ConfigError& e) {
      fail(node, e.what());
    }
  }

 private:
  template <typename T>
  static std::string type_name() {
    if constexpr (std::is_same_v<T, bool>) return "a boolean";
    if constexpr (std::is_integral_v<T>) return "an integer";
    if constexpr (std::is_floating_point_v<T>) return "a number";
    if constexpr (std::is_same_v<T, std::string>) return "a string";
    return "a list";
  }

  std::string name_;
};

void apply_override(YAML::Node& root, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set " + assignment + ": expected key=value");
  const std::string key = assignment.substr(0, eq);
  YAML::Node value;
  try {
    value = YAML::Load(assignment.substr(eq + 1));
  } catch (const YAML::Exception& e) {
    throw ConfigError("--set " + assignment + ": " + e.msg);
  }
  if (!root.IsMap()) root = YAML::Node(YAML::NodeType::Map);
  YAML::Node cur = root;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("--set " + assignment + ": empty key component");
    if (dot == std::string::npos) {
      cur[part] = value;
      return;
    }
    if (!cur[part] || !cur[part].IsMap()) cur[part] = YAML::Node(YAML::NodeType::Map);
    // Rebind rather than assign: plain assignment would overwrite the parent's value.
    cur.reset(cur[part]);
    start = dot + 1;
  }
}

SyntheticDomainSpec read_synthetic(const Reader& r, const YAML::Node& node) {
  r.expect_map(node, "dataset.synthetic");
  r.check_keys(node, "dataset.synthetic",
               {"num_classes", "samples_per_class_per_domain", "image_size", "cue_kinds", "domain_names",
                "cue_strength", "noise_level", "foreign_cues"});
  SyntheticDomainSpec s;
  const std::string sec = "dataset.synthetic";
  r.read(node, sec, "num_classes", s.num_classes);
  r.read(node, sec, "samples_per_class_per_domain", s.samples_per_class_per_domain);
  r.read(node, sec, "image_size", s.image_size);
  r.read(node, sec, "cue_strength", s.cue_strength);
  r.read(node, sec, "noise_level", s.noise_level);
  r.read(node, sec, "domain_names", s.domain_names);
  if (const YAML::Node kinds = node["cue_kinds"]) {
    s.cue_kinds.clear();
    for (const std::string& k : r.as<std::vector<std::string>>(kinds, sec + ".cue_kinds")) {
      r.guard(kinds, [&] { s.cue_kinds.push_back(parse_cue_kind(k)); });
    }
  }
  if (const YAML::Node mode = node["foreign_cues"]) {
    const auto m = r.as<std::string>(mode, sec + ".foreign_cues");
    if (m == "omitted") {
      s.foreign_cues = ForeignCueMode::omitted;
    } else if (m == "random") {
      s.foreign_cues = ForeignCueMode::random;
    } else {
      r.fail(mode, "dataset.synthetic.foreign_cues: expected omitted or random, got '" + m + "'");
    }
  }
  return s;
}

void read_dataset(const Reader& r, const YAML::Node& node, DatasetSource& d) {
  r.expect_map(node, "dataset");
  r.check_keys(node, "dataset", {"synthetic", "folder", "image_size", "split", "seed"});
  if (node["synthetic"] && node["folder"]) r.fail(node, "dataset: give either synthetic or folder, not both");
  if (node["folder"]) {
    d.folder = r.as<std::string>(node["folder"], "dataset.folder");
    d.synthetic.reset();
  } else if (node["synthetic"]) {
    d.synthetic = read_synthetic(r, node["synthetic"]);
  }
  r.read(node, "dataset", "image_size", d.image_size);
  r.read(node, "dataset", "seed", d.seed);
  if (const YAML::Node split = node["split"]) {
    r.expect_map(split, "dataset.split");
    r.check_keys(split, "dataset.split", {"train", "val"});
    r.read(split, "dataset.split", "train", d.split.train);
    r.read(split, "dataset.split", "val", d.split.val);
    if (!(d.split.train > 0.0) || d.split.val < 0.0 || !(d.split.train + d.split.val < 1.0)) {
      r.fail(split, "dataset.split: need train > 0, val >= 0 and train + val < 1 (the rest is test)");
    }
  }
  if (d.synthetic) {
    d.synthetic->split = d.split;
    r.guard(node, [&] { d.synthetic->validate(); });
  } else if (d.folder.empty()) {
    r.fail(node, "dataset: either synthetic or folder is required");
  }
}

void read_train(const Reader& r, const YAML::Node& node, TrainConfig& t) {
  r.expect_map(node, "train");
  r.check_keys(node, "train",
               {"learning_rates", "momentum", "epochs_specific", "epochs_invariant", "epochs_baseline", "patience",
                "batch_per_domain", "specific_noise", "seed", "uncertainty", "reconstruction", "lambda1", "lambda2", "lambda3",
                "lambda2_grid", "lambda3_grid", "classifier", "mapper"});
  const std::string sec = "train";
  r.read(node, sec, "learning_rates", t.learning_rates);
  r.read(node, sec, "momentum", t.momentum);
  r.read(node, sec, "epochs_specific", t.epochs_specific);
  r.read(node, sec, "epochs_invariant", t.epochs_invariant);
  r.read(node, sec, "epochs_baseline", t.epochs_baseline);
  r.read(node, sec, "patience", t.patience);
  r.read(node, sec, "batch_per_domain", t.batch_per_domain);
  r.read(node, sec, "specific_noise", t.specific_noise);
  r.read(node, sec, "seed", t.seed);
  r.read(node, sec, "lambda1", t.weights.lambda1);
  r.read(node, sec, "lambda2", t.weights.lambda2);
  r.read(node, sec, "lambda3", t.weights.lambda3);
  r.read(node, sec, "lambda2_grid", t.lambda2_grid);
  r.read(node, sec, "lambda3_grid", t.lambda3_grid);
  if (const YAML::Node u = node["uncertainty"]) {
    r.guard(u, [&] { t.uncertainty = parse_uncertainty_variant(r.as<std::string>(u, "train.uncertainty")); });
  }
  if (const YAML::Node k = node["reconstruction"]) {
    r.guard(k, [&] { t.reconstruction = parse_reconstruction_kind(r.as<std::string>(k, "train.reconstruction")); });
  }
  if (const YAML::Node c = node["classifier"]) {
    r.expect_map(c, "train.classifier");
    r.check_keys(c, "train.classifier", {"widths"});
    r.read(c, "train.classifier", "widths", t.classifier.widths);
  }
  if (const YAML::Node m = node["mapper"]) {
    r.expect_map(m, "train.mapper");
    r.check_keys(m, "train.mapper", {"depth", "base_channels", "identity_init"});
    r.read(m, "train.mapper", "depth", t.mapper.depth);
    r.read(m, "train.mapper", "base_channels", t.mapper.base_channels);
    r.read(m, "train.mapper", "identity_init", t.mapper.identity_init);
  }
}

void read_divergence(const Reader& r, const YAML::Node& node, DivergenceSettings& d) {
  r.expect_map(node, "divergence");
  r.check_keys(node, "divergence", {"enabled", "reg_grid", "seed", "step_tenths", "max_samples_per_domain"});
  r.read(node, "divergence", "enabled", d.enabled);
  r.read(node, "divergence", "reg_grid", d.reg_grid);
  r.read(node, "divergence", "seed", d.seed);
  r.read(node, "divergence", "step_tenths", d.step_tenths);
  r.read(node, "divergence", "max_samples_per_domain", d.max_samples_per_domain);
  if (d.reg_grid.empty()) r.fail(node, "divergence.reg_grid must not be empty");
  for (double v : d.reg_grid) {
    if (!(v > 0.0)) r.fail(node, "divergence.reg_grid values must be > 0");
  }
  if (d.step_tenths < 1 || 10 % d.step_tenths != 0) r.fail(node, "divergence.step_tenths must divide 10");
  if (d.max_samples_per_domain < 0) r.fail(node, "divergence.max_samples_per_domain must be >= 0");
}

std::vector<std::string> synthetic_domain_names(const SyntheticDomainSpec& s) {
  if (!s.domain_names.empty()) return s.domain_names;
  std::vector<std::string> out;
  for (CueKind k : s.cue_kinds) out.push_back(to_string(k));
  return out;
}

/// Network input/output shapes follow the dataset.
void bind_shapes(ExperimentConfig& c, int num_classes, int image_size) {
  c.train.classifier.num_classes = num_classes;
  c.train.classifier.in_channels = 3;
  c.train.classifier.image_size = image_size;
  c.train.mapper.in_channels = 3;
  c.train.mapper.image_size = image_size;
}

nlohmann::json synthetic_to_json(const SyntheticDomainSpec& s) {
  std::vector<std::string> kinds;
  for (CueKind k : s.cue_kinds) kinds.push_back(to_string(k));
  return {{"num_classes", s.num_classes},
          {"samples_per_class_per_domain", s.samples_per_class_per_domain},
          {"image_size", s.image_size},
          {"cue_kinds", kinds},
          {"domain_names", s.domain_names},
          {"cue_strength", s.cue_strength},
          {"noise_level", s.noise_level},
          {"foreign_cues", s.foreign_cues == ForeignCueMode::omitted ? "omitted" : "random"}};
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json ds = {{"split", {{"train", dataset.split.train}, {"val", dataset.split.val}}}, {"seed", dataset.seed}};
  if (dataset.synthetic) {
    ds["synthetic"] = synthetic_to_json(*dataset.synthetic);
  } else {
    ds["folder"] = dataset.folder.string();
    ds["image_size"] = dataset.image_size;
  }
  std::vector<std::string> method_names;
  for (Method m : methods) method_names.push_back(lrdg::to_string(m));
  return {{"dataset", ds},
          {"protocol", {{"targets", targets}, {"methods", method_names}, {"seeds", seeds}}},
          {"train", train.to_json()},
          {"divergence",
           {{"enabled", divergence.enabled},
            {"reg_grid", divergence.reg_grid},
            {"seed", divergence.seed},
            {"step_tenths", divergence.step_tenths},
            {"max_samples_per_domain", divergence.max_samples_per_domain}}},
          {"output_dir", output_dir.string()}};
}

std::string ExperimentConfig::digest() const {
  nlohmann::json j = to_json();
  j.erase("output_dir");
  Fnv1a h;
  h.update(j.dump());
  return to_hex(h.digest());
}

fs::path ExperimentConfig::run_dir(std::uint64_t seed) const {
  return output_dir / (digest() + "-s" + std::to_string(seed));
}

ExperimentConfig parse_experiment_config(const std::string& text, const std::string& name,
                                         const std::vector<std::string>& overrides) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    throw ConfigError(name + ":" + std::to_string(e.mark.line + 1) + ":" + std::to_string(e.mark.column + 1) +
                      ": " + e.msg);
  }
  for (const std::string& o : overrides) apply_override(root, o);
  const Reader r(name);
  if (!root.IsMap()) r.fail(root, "expected a mapping at the top level");
  r.check_keys(root, "", {"dataset", "protocol", "train", "divergence", "output_dir"});

  ExperimentConfig c;
  if (!root["dataset"]) r.fail(root, "dataset section is required");
  read_dataset(r, root["dataset"], c.dataset);
  if (const YAML::Node t = root["train"]) read_train(r, t, c.train);
  if (const YAML::Node d = root["divergence"]) read_divergence(r, d, c.divergence);
  if (const YAML::Node o = root["output_dir"]) c.output_dir = r.as<std::string>(o, "output_dir");

  if (const YAML::Node p = root["protocol"]) {
    r.expect_map(p, "protocol");
    r.check_keys(p, "protocol", {"targets", "methods", "seeds"});
    r.read(p, "protocol", "targets", c.targets);
    r.read(p, "protocol", "seeds", c.seeds);
    if (const YAML::Node m = p["methods"]) {
      c.methods.clear();
      for (const std::string& name_m : r.as<std::vector<std::string>>(m, "protocol.methods")) {
        r.guard(m, [&] { c.methods.push_back(parse_method(name_m)); });
      }
      if (c.methods.empty()) r.fail(m, "protocol.methods must not be empty");
    }
    if (c.dataset.synthetic) {
      const auto names = synthetic_domain_names(*c.dataset.synthetic);
      for (const std::string& t : c.targets) {
        if (std::find(names.begin(), names.end(), t) == names.end()) {
          r.fail(p["targets"], "protocol.targets: unknown domain '" + t + "'");
        }
      }
    }
  }

  if (c.dataset.synthetic) {
    bind_shapes(c, c.dataset.synthetic->num_classes, c.dataset.synthetic->image_size);
  } else {
    bind_shapes(c, c.train.classifier.num_classes, c.dataset.image_size);
  }
  const YAML::Node train_node = root["train"] ? root["train"] : root;
  r.guard(train_node, [&] { c.train.validate(); });
  return c;
}

ExperimentConfig load_experiment_config(const fs::path& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return parse_experiment_config(text.str(), path.string(), overrides);
}

MultiDomainDataset load_dataset(const ExperimentConfig& config) {
  const DatasetSource& d = config.dataset;
  if (d.synthetic) return generate_synthetic(*d.synthetic, d.seed);
  return load_image_folder(d.folder, d.image_size, d.split, d.seed);
}

namespace {

/// Loads the dataset and fixes the class count of folder datasets, which is
/// only known after loading.
MultiDomainDataset load_bound(ExperimentConfig& config) {
  MultiDomainDataset data = load_dataset(config);
  bind_shapes(config, data.num_classes(), data.shape.height);
  return data;
}

int domain_or_throw(const MultiDomainDataset& data, const std::string& name) {
  for (int d = 0; d < data.num_domains(); ++d) {
    if (data.domains[static_cast<std::size_t>(d)].name == name) return d;
  }
  std::string known;
  for (const auto& dom : data.domains) known += (known.empty() ? "" : ", ") + dom.name;
  throw ConfigError("unknown domain '" + name + "' (known: " + known + ")");
}

std::vector<int> feature_columns(int n, int max_samples, std::uint64_t seed, int domain) {
  std::vector<int> idx(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  if (max_samples > 0 && max_samples < n) {
    Rng rng = Rng::derived(seed, 0x66656174ULL + static_cast<std::uint64_t>(domain));
    rng.shuffle(idx);
    idx.resize(static_cast<std::size_t>(max_samples));
    std::sort(idx.begin(), idx.end());
  }
  return idx;
}

template <typename Model>
FeatureMatrix features_impl(const Model& model, const MultiDomainDataset& data, int domain, int max_samples) {
  const Domain& d = data.domains.at(static_cast<std::size_t>(domain));
  const std::vector<int> cols =
      feature_columns(static_cast<int>(d.samples.size()), max_samples, 0, domain);
  FeatureMatrix out;
  constexpr std::size_t kChunk = 128;
  for (std::size_t first = 0; first < cols.size(); first += kChunk) {
    const std::size_t count = std::min(kChunk, cols.size() - first);
    const MatrixR images = stack_images(d, std::span(cols).subspan(first, count));
    const MatrixR f = model.features(images);
    if (out.size() == 0) out.resize(f.rows(), static_cast<Eigen::Index>(cols.size()));
    out.middleCols(static_cast<Eigen::Index>(first), static_cast<Eigen::Index>(count)) = f.template cast<double>();
  }
  return out;
}

double source_risk(const nn::Classifier<Real>& m, const MultiDomainDataset& data, int d) {
  const bool has_val = !data.domains[static_cast<std::size_t>(d)].indices(Split::val).empty();
  return 1.0 - evaluate(m, data, d, has_val ? std::optional(Split::val) : std::nullopt);
}
double source_risk(const InvariantModel& m, const MultiDomainDataset& data, int d) {
  const bool has_val = !data.domains[static_cast<std::size_t>(d)].indices(Split::val).empty();
  return 1.0 - evaluate(m, data, d, has_val ? std::optional(Split::val) : std::nullopt);
}

}  // namespace

FeatureMatrix domain_features(const nn::Classifier<Real>& model, const MultiDomainDataset& data, int domain,
                              int max_samples) {
  return features_impl(model, data, domain, max_samples);
}

FeatureMatrix domain_features(const InvariantModel& model, const MultiDomainDataset& data, int domain,
                              int max_samples) {
  return features_impl(model, data, domain, max_samples);
}

// ---------------------------------------------------------------------------
// Divergence analysis

template <typename Model>
ModelDivergence analyze_divergence(const Model& model, const std::string& name, const MultiDomainDataset& data,
                                   const LooFold& fold, const DivergenceSettings& settings) {
  ModelDivergence out;
  out.model = name;
  const std::string tag = name + "/penultimate";
  std::vector<FeatureMatrix> sources;
  std::vector<std::string> names;
  std::vector<double> risks;
  for (int s : fold.sources) {
    sources.push_back(domain_features(model, data, s, settings.max_samples_per_domain));
    names.push_back(data.domains[static_cast<std::size_t>(s)].name);
    risks.push_back(source_risk(model, data, s));
  }
  const FeatureMatrix target = domain_features(model, data, fold.target, settings.max_samples_per_domain);
  out.pairwise = pairwise_source_pads(sources, names, settings.reg_grid, settings.seed, tag);
  out.closest = closest_mixture(sources, target, settings.reg_grid, settings.seed, tag, settings.step_tenths);
  out.closest.result.label =
      out.closest.spec.to_string() + "|" + data.domains[static_cast<std::size_t>(fold.target)].name;
  out.bound = bound_report(out.pairwise, out.closest.result, risks, out.closest.spec);
  spdlog::info("{}: closest mixture {} pad {:.3f}; {}", name, out.closest.spec.to_string(), out.closest.result.pad,
               out.bound.describe());
  return out;
}

template ModelDivergence analyze_divergence<nn::Classifier<Real>>(const nn::Classifier<Real>&, const std::string&,
                                                                  const MultiDomainDataset&, const LooFold&,
                                                                  const DivergenceSettings&);
template ModelDivergence analyze_divergence<InvariantModel>(const InvariantModel&, const std::string&,
                                                            const MultiDomainDataset&, const LooFold&,
                                                            const DivergenceSettings&);

void write_divergence_artifacts(const fs::path& dir, const ModelDivergence& baseline, const ModelDivergence& lrdg,
                                const std::string& digest, std::uint64_t seed) {
  fs::create_directories(dir);
  std::vector<PadRecord> records;
  for (const ModelDivergence* m : {&baseline, &lrdg}) {
    for (const PADResult& r : m->pairwise) records.push_back(PadRecord{"pairwise", r});
    records.push_back(PadRecord{"source-target", m->closest.result});
  }
  write_pad_report(dir / "pad_report.tsv", records, digest, seed);

  if (baseline.pairwise.size() != lrdg.pairwise.size()) throw Error("PAD analyses cover different source pairs");
  std::vector<ScatterPoint> points;
  for (std::size_t k = 0; k < baseline.pairwise.size(); ++k) {
    points.push_back(ScatterPoint{baseline.pairwise[k].label, "pairwise", baseline.pairwise[k].pad, lrdg.pairwise[k].pad});
  }
  const std::string target = baseline.closest.result.label.substr(baseline.closest.result.label.rfind('|') + 1);
  points.push_back(ScatterPoint{"closest mixture|" + target, "source-target", baseline.closest.result.pad,
                                lrdg.closest.result.pad});
  write_pad_scatter(dir / "pad_scatter.png", points, "target " + target + "  " + digest + " s" + std::to_string(seed));

  nlohmann::json bound = {{"config_digest", digest},
                          {"seed", seed},
                          {"target", target},
                          {"baseline", baseline.bound.to_json()},
                          {"lrdg", lrdg.bound.to_json()}};
  bound["baseline"]["summary"] = baseline.bound.describe();
  bound["lrdg"]["summary"] = lrdg.bound.describe();
  std::ofstream(dir / "bound.json") << bound.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Mapper inspection

double tint_between_class_variance(std::span<const Image> images, std::span<const int> labels) {
  if (images.size() != labels.size()) throw ShapeError("tint statistic: one label per image is required");
  if (images.empty()) return 0.0;
  std::map<int, std::pair<Eigen::Vector3d, int>> per_class;
  Eigen::Vector3d overall = Eigen::Vector3d::Zero();
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Eigen::Vector3d mean = images[i].rowwise().mean().cast<double>().head<3>();
    const Eigen::Vector3d chroma = mean.array() - mean.mean();
    auto& [sum, n] = per_class.try_emplace(labels[i], Eigen::Vector3d::Zero(), 0).first->second;
    sum += chroma;
    ++n;
    overall += chroma;
  }
  overall /= static_cast<double>(images.size());
  double var = 0;
  for (const auto& [label, entry] : per_class) {
    const Eigen::Vector3d mean = entry.first / entry.second;
    var += entry.second * (mean - overall).squaredNorm();
  }
  return var / static_cast<double>(images.size());
}

namespace {

std::vector<Image> map_images(const nn::Mapper<Real>& mapper, std::span<const Image> images) {
  std::vector<Image> out;
  constexpr std::size_t kChunk = 64;
  for (std::size_t first = 0; first < images.size(); first += kChunk) {
    const std::size_t count = std::min(kChunk, images.size() - first);
    const MatrixR mapped = mapper.forward(stack_images(images.subspan(first, count)));
    const Eigen::Index pixels = images[0].cols();
    for (std::size_t k = 0; k < count; ++k) out.push_back(mapped.middleCols(static_cast<Eigen::Index>(k) * pixels, pixels));
  }
  return out;
}

}  // namespace

MapperInspection inspect_mapper(const nn::Mapper<Real>& mapper, std::span<const Image> images,
                                std::span<const int> labels) {
  MapperInspection out;
  if (images.empty()) return out;
  const int size = mapper.spec().image_size;
  for (const Image& img : images) {
    if (img.rows() != mapper.spec().in_channels || img.cols() != size * size) {
      throw ShapeError("inspect: image shape does not match the mapper (" + std::to_string(size) + "x" +
                       std::to_string(size) + ")");
    }
  }
  const std::vector<Image> mapped = map_images(mapper, images);
  double total = 0;
  Eigen::Index count = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    total += (images[i] - mapped[i]).cwiseAbs().cast<double>().sum();
    count += images[i].size();
  }
  out.mean_abs_change = total / static_cast<double>(count);
  if (!labels.empty()) {
    out.tint_variance_input = tint_between_class_variance(images, labels);
    out.tint_variance_mapped = tint_between_class_variance(mapped, labels);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Subcommands

namespace {

std::string strip_run_tag(const std::string& tag) {
  // "<run>-<config hash>-lr<i>" -> "<run>"
  std::string s = tag;
  for (int k = 0; k < 2; ++k) {
    const auto dash = s.rfind('-');
    if (dash == std::string::npos) break;
    s.resize(dash);
  }
  return s;
}

nlohmann::json provenance(const std::string& digest, std::uint64_t seed, const std::string& target) {
  return {{"config_digest", digest}, {"seed", seed}, {"target", target}};
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

std::string digest_of(const nn::Checkpoint& c) { return c.metadata.value("config_digest", std::string()); }

}  // namespace

int cmd_run(const RunOptions& options) {
  ExperimentConfig config = load_experiment_config(options.config, options.overrides);
  const MultiDomainDataset data = load_bound(config);
  const std::string digest = config.digest();
  std::vector<int> targets;
  for (const std::string& t : config.targets) targets.push_back(domain_or_throw(data, t));
  std::vector<std::uint64_t> seeds = config.seeds;
  if (seeds.empty()) seeds.push_back(config.train.seed);

  for (std::uint64_t seed : seeds) {
    const fs::path dir = config.run_dir(seed);
    fs::create_directories(dir);
    write_json(dir / "config.json", {{"config_digest", digest}, {"seed", seed}, {"config", config.to_json()}});
    spdlog::info("run {} seed {} -> {}", digest, seed, dir.string());

    auto fold_dir = [&](const FoldOutcome& out) {
      return dir / ("fold-" + data.domains[static_cast<std::size_t>(out.fold.target)].name);
    };
    ProtocolOptions po;
    po.methods = config.methods;
    po.seeds = {seed};
    po.targets = targets;
    po.digest = digest;
    po.hooks_for = [&](const FoldOutcome& out, const std::string& run) {
      const fs::path fdir = fold_dir(out);
      fs::create_directories(fdir / "metrics");
      fs::create_directories(fdir / "state");
      TrainHooks h;
      h.state_path = fdir / "state" / (run + ".state");
      h.on_epoch = [metrics = fdir / "metrics", run, digest, seed](const nlohmann::json& record) {
        const std::string name = run == "lambdas" ? run : strip_run_tag(record.value("run", run));
        nlohmann::json line = record;
        line["config_digest"] = digest;
        line["seed"] = seed;
        std::ofstream(metrics / (name + ".jsonl"), std::ios::app) << line.dump() << '\n';
      };
      return h;
    };
    ProtocolResult partial;
    po.on_fold = [&](const FoldOutcome& out, std::span<const ProtocolRecord> rows) {
      const fs::path fdir = fold_dir(out);
      const std::string target = data.domains[static_cast<std::size_t>(out.fold.target)].name;
      const nlohmann::json meta = provenance(digest, seed, target);
      if (out.baseline) {
        nlohmann::json m = meta;
        m["val_accuracy"] = out.baseline->metrics.val_accuracy;
        nn::save_checkpoint(fdir / "baseline.ckpt", nn::make_checkpoint(out.baseline->model, nn::StageTag::baseline, seed, m));
      }
      if (out.bank) {
        for (int i = 0; i < out.bank->size(); ++i) {
          const std::string dom = data.domains[static_cast<std::size_t>(out.bank->domains()[static_cast<std::size_t>(i)])].name;
          nlohmann::json m = meta;
          m["domain"] = dom;
          m["own_accuracy"] = out.bank->metrics(i).own_accuracy;
          m["other_accuracy"] = out.bank->metrics(i).other_accuracy;
          m["other_entropy"] = out.bank->metrics(i).other_entropy;
          m["checksum"] = to_hex(out.bank->frozen_checksums()[static_cast<std::size_t>(i)]);
          nn::save_checkpoint(fdir / ("specific-" + dom + ".ckpt"),
                              nn::make_checkpoint(out.bank->classifier(i), nn::StageTag::specific, seed, m));
        }
      }
      if (out.lrdg) {
        nlohmann::json m = meta;
        m["val_accuracy"] = out.lrdg->metrics.val_accuracy;
        nn::save_checkpoint(fdir / "mapper.ckpt", nn::make_checkpoint(out.lrdg->model.mapper, seed, m));
        nn::save_checkpoint(fdir / "invariant.ckpt",
                            nn::make_checkpoint(out.lrdg->model.classifier, nn::StageTag::invariant, seed, m));
      }
      if (out.lambdas) {
        nlohmann::json j = meta;
        j["lambda2"] = out.lambdas->lambda2;
        j["lambda3"] = out.lambdas->lambda3;
        j["scores"] = nlohmann::json::array();
        for (const GridScore& g : out.lambdas->scores) {
          j["scores"].push_back({{"lambda2", g.lambda2}, {"lambda3", g.lambda3}, {"fold_scores", g.fold_scores}, {"mean", g.mean}});
        }
        write_json(fdir / "lambdas.json", j);
      }
      if (config.divergence.enabled && out.baseline && out.lrdg) {
        const ModelDivergence b = analyze_divergence(out.baseline->model, "baseline", data, out.fold, config.divergence);
        const ModelDivergence l = analyze_divergence(out.lrdg->model, "lrdg", data, out.fold, config.divergence);
        write_divergence_artifacts(fdir, b, l, digest, seed);
      }
      partial.records.insert(partial.records.end(), rows.begin(), rows.end());
      write_protocol_table(dir / "results.partial.tsv", partial);
    };

    TrainConfig train = config.train;
    train.seed = seed;
    const ProtocolResult result = run_protocol(data, train, po);
    write_protocol_table(dir / "results.tsv", result);
    nlohmann::json summary = result.summary();
    summary["config_digest"] = digest;
    summary["seed"] = seed;
    write_json(dir / "results.json", summary);
    fs::remove(dir / "results.partial.tsv");
    for (Method m : result.methods()) {
      spdlog::info("seed {} {} average accuracy {:.4f}", seed, to_string(m), result.average(m));
    }
  }
  return 0;
}

int cmd_pad(const PadOptions& options) {
  ExperimentConfig config = load_experiment_config(options.config, options.overrides);
  const MultiDomainDataset data = load_bound(config);
  const int target = domain_or_throw(data, options.target);

  const nn::Checkpoint base_ck = nn::load_checkpoint(options.baseline);
  const nn::Checkpoint map_ck = nn::load_checkpoint(options.mapper);
  const nn::Checkpoint inv_ck = nn::load_checkpoint(options.invariant);
  auto expect = [](const nn::Checkpoint& c, const fs::path& p, const std::string& network, nn::StageTag stage) {
    if (c.network != network || c.stage != stage) {
      throw Error("stage-tag mismatch: " + p.string() + " holds a " + c.network + " (" + nn::to_string(c.stage) +
                  "), expected a " + network + " (" + nn::to_string(stage) + ")");
    }
  };
  expect(base_ck, options.baseline, "classifier", nn::StageTag::baseline);
  expect(map_ck, options.mapper, "mapper", nn::StageTag::invariant);
  expect(inv_ck, options.invariant, "classifier", nn::StageTag::invariant);
  if (digest_of(map_ck) != digest_of(inv_ck) || map_ck.seed != inv_ck.seed) {
    throw ConfigError("mapper and invariant classifier come from different runs");
  }
  if (digest_of(base_ck) != digest_of(inv_ck) || base_ck.seed != inv_ck.seed) {
    throw ConfigError("baseline and LRDG checkpoints come from different configurations or seeds");
  }

  LooFold fold;
  fold.target = target;
  for (int d = 0; d < data.num_domains(); ++d) {
    if (d != target) fold.sources.push_back(d);
  }
  const nn::Classifier<Real> baseline = nn::classifier_from(base_ck);
  const InvariantModel lrdg{nn::mapper_from(map_ck), nn::classifier_from(inv_ck)};
  const ModelDivergence b = analyze_divergence(baseline, "baseline", data, fold, config.divergence);
  const ModelDivergence l = analyze_divergence(lrdg, "lrdg", data, fold, config.divergence);
  const std::string digest = digest_of(inv_ck).empty() ? config.digest() : digest_of(inv_ck);
  const fs::path out = options.output.empty() ? config.run_dir(inv_ck.seed) / ("fold-" + options.target) / "pad"
                                              : options.output;
  write_divergence_artifacts(out, b, l, digest, inv_ck.seed);
  std::cout << "baseline: " << b.bound.describe() << "\nlrdg:     " << l.bound.describe() << "\nwritten to "
            << out.string() << '\n';
  return 0;
}

int cmd_inspect(const InspectOptions& options) {
  const nn::Checkpoint ck = nn::load_checkpoint(options.mapper);
  const nn::Mapper<Real> mapper = nn::mapper_from(ck);
  const int size = mapper.spec().image_size;
  std::vector<Image> images;
  std::vector<int> labels;
  std::vector<Image> grid;
  if (!options.images.empty()) {
    std::vector<fs::path> files;
    if (fs::is_directory(options.images)) {
      for (const auto& e : fs::directory_iterator(options.images)) {
        if (e.is_regular_file()) files.push_back(e.path());
      }
      std::sort(files.begin(), files.end());
    } else {
      files.push_back(options.images);
    }
    if (files.empty()) throw Error("no images under " + options.images.string());
    for (const fs::path& f : files) {
      if (static_cast<int>(images.size()) >= options.count) break;
      images.push_back(read_image(f, size));
    }
    grid = images;
  } else {
    if (options.config.empty() || options.domain.empty()) {
      throw ConfigError("inspect needs --images, or --config together with --domain");
    }
    ExperimentConfig config = load_experiment_config(options.config, options.overrides);
    const MultiDomainDataset data = load_bound(config);
    if (data.shape.height != size) {
      throw ShapeError("dataset images are " + std::to_string(data.shape.height) + "x" +
                       std::to_string(data.shape.width) + " but the mapper expects " + std::to_string(size));
    }
    const Domain& d = data.domains[static_cast<std::size_t>(domain_or_throw(data, options.domain))];
    std::vector<std::vector<int>> by_class(static_cast<std::size_t>(data.num_classes()));
    for (std::size_t i = 0; i < d.samples.size(); ++i) {
      images.push_back(d.samples[i].image);
      labels.push_back(d.samples[i].label);
      by_class[static_cast<std::size_t>(d.samples[i].label)].push_back(static_cast<int>(i));
    }
    // Grid columns cycle through the classes.
    for (std::size_t round = 0; static_cast<int>(grid.size()) < options.count; ++round) {
      bool any = false;
      for (const auto& members : by_class) {
        if (round < members.size() && static_cast<int>(grid.size()) < options.count) {
          grid.push_back(d.samples[static_cast<std::size_t>(members[round])].image);
          any = true;
        }
      }
      if (!any) break;
    }
  }
  const MapperInspection stats = inspect_mapper(mapper, images, labels);
  const std::vector<Image> mapped = map_images(mapper, grid);
  const fs::path png = options.output.empty() ? fs::path("inspect.png") : options.output;
  if (png.has_parent_path()) fs::create_directories(png.parent_path());
  write_image_grid(png, grid, mapped, ImageShape{size, size, 3});
  nlohmann::json report = {{"mapper", options.mapper.string()},
                           {"config_digest", digest_of(ck)},
                           {"seed", ck.seed},
                           {"images", images.size()},
                           {"mean_abs_change", stats.mean_abs_change}};
  if (!labels.empty()) {
    report["tint_variance_input"] = stats.tint_variance_input;
    report["tint_variance_mapped"] = stats.tint_variance_mapped;
  }
  fs::path sidecar = png;
  sidecar.replace_extension(".json");
  write_json(sidecar, report);
  std::cout << report.dump(2) << '\n';
  return 0;
}

int cmd_synth_gen(const SynthGenOptions& options) {
  const ExperimentConfig config = load_experiment_config(options.config, options.overrides);
  if (!config.dataset.synthetic) throw ConfigError("synth-gen needs a dataset.synthetic section");
  const MultiDomainDataset data = generate_synthetic(*config.dataset.synthetic, config.dataset.seed);
  const fs::path out = options.output.empty() ? config.output_dir / (config.digest() + "-data") : options.output;
  export_dataset(data, out, &*config.dataset.synthetic, config.dataset.seed);
  std::size_t n = 0;
  for (const auto& d : data.domains) n += d.samples.size();
  std::cout << "wrote " << n << " images in " << data.num_domains() << " domains to " << out.string() << '\n';
  return 0;
}

int cmd_eval(const EvalOptions& options) {
  ExperimentConfig config = load_experiment_config(options.config, options.overrides);
  const MultiDomainDataset data = load_bound(config);
  const int domain = domain_or_throw(data, options.domain);
  std::optional<Split> split;
  if (options.split == "train") {
    split = Split::train;
  } else if (options.split == "val") {
    split = Split::val;
  } else if (options.split == "test") {
    split = Split::test;
  } else if (options.split != "all" && !options.split.empty()) {
    throw ConfigError("unknown split '" + options.split + "' (train, val, test or all)");
  }
  const nn::Checkpoint ck = nn::load_checkpoint(options.classifier);
  double acc = 0;
  if (options.mapper.empty()) {
    acc = evaluate(nn::classifier_from(ck), data, domain, split);
  } else {
    const nn::Checkpoint mk = nn::load_checkpoint(options.mapper);
    if (ck.stage != nn::StageTag::invariant) {
      throw Error("stage-tag mismatch: a mapper pairs with an invariant classifier, got " + nn::to_string(ck.stage));
    }
    acc = evaluate(InvariantModel{nn::mapper_from(mk), nn::classifier_from(ck)}, data, domain, split);
  }
  const nlohmann::json out = {{"domain", options.domain},
                              {"split", split ? to_string(*split) : "all"},
                              {"stage", nn::to_string(ck.stage)},
                              {"config_digest", digest_of(ck)},
                              {"seed", ck.seed},
                              {"accuracy", acc}};
  std::cout << out.dump() << '\n';
  return 0;
}

}  // namespace lrdg
