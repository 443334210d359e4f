#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <doctest.h>
#include <nlohmann/json.hpp>

#include "lrdg/experiment.hpp"
#include "lrdg/nn/checkpoint.hpp"

using namespace lrdg;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string tiny_yaml(const fs::path& out) {
  return R"(dataset:
  synthetic:
    num_classes: 3
    samples_per_class_per_domain: 10
    image_size: 16
    cue_kinds: [tint, stripe, watermark]
  seed: 4
protocol:
  targets: [tint]
  seeds: [1]
train:
  learning_rates: [0.03]
  epochs_specific: 1
  epochs_invariant: 1
  epochs_baseline: 1
  batch_per_domain: 8
  lambda2_grid: [1.0]
  lambda3_grid: [1.0]
  classifier:
    widths: [4, 8]
  mapper:
    depth: 2
    base_channels: 4
divergence:
  reg_grid: [1.0]
  step_tenths: 5
output_dir: )" +
         out.string() + "\n";
}

fs::path write_config(const fs::path& dir, const std::string& text) {
  const fs::path p = dir / "config.yaml";
  std::ofstream(p) << text;
  return p;
}

std::string read_text(const fs::path& p) {
  std::stringstream s;
  s << std::ifstream(p).rdbuf();
  return s.str();
}

std::string config_error(const std::string& text, const std::vector<std::string>& overrides = {}) {
  try {
    parse_experiment_config(text, "cfg.yaml", overrides);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("experiment config: defaults, binding and digest") {
  const ExperimentConfig c = parse_experiment_config("dataset:\n  synthetic: {}\n", "cfg.yaml");
  REQUIRE(c.dataset.synthetic);
  CHECK(c.dataset.synthetic->num_classes == 5);
  CHECK(c.train.classifier.num_classes == 5);
  CHECK(c.train.classifier.image_size == 32);
  CHECK(c.train.mapper.image_size == 32);
  CHECK(c.methods.size() == 2);
  CHECK(c.divergence.reg_grid == kDefaultRegGrid);

  const ExperimentConfig d = parse_experiment_config(tiny_yaml("a"), "x.yaml");
  const ExperimentConfig e = parse_experiment_config(tiny_yaml("b"), "y.yaml");
  CHECK(d.digest() == e.digest());  // the output directory is not part of the experiment
  CHECK(d.train.classifier.image_size == 16);
  CHECK(d.train.classifier.num_classes == 3);
  CHECK(d.targets == std::vector<std::string>{"tint"});
  CHECK(d.run_dir(1) == fs::path("a") / (d.digest() + "-s1"));
  const ExperimentConfig f = parse_experiment_config(tiny_yaml("a"), "x.yaml", {"train.momentum=0.5"});
  CHECK(f.train.momentum == 0.5);
  CHECK(f.digest() != d.digest());
}

TEST_CASE("experiment config: overrides reach nested keys") {
  const ExperimentConfig c = parse_experiment_config(
      tiny_yaml("o"), "x.yaml", {"train.mapper.depth=3", "protocol.seeds=[2, 3]", "divergence.enabled=false"});
  CHECK(c.train.mapper.depth == 3);
  CHECK(c.seeds == std::vector<std::uint64_t>{2, 3});
  CHECK_FALSE(c.divergence.enabled);
  CHECK(config_error(tiny_yaml("o"), {"train.momentum"}).find("key=value") != std::string::npos);
}

TEST_CASE("experiment config errors name the file, line and key") {
  const std::string unknown = config_error("dataset:\n  synthetic: {}\ntrain:\n  epochz: 3\n");
  CHECK(unknown.find("cfg.yaml:4:3") != std::string::npos);
  CHECK(unknown.find("train.epochz") != std::string::npos);

  const std::string type = config_error("dataset:\n  synthetic:\n    num_classes: many\n");
  CHECK(type.find("cfg.yaml:3:") != std::string::npos);
  CHECK(type.find("num_classes") != std::string::npos);

  const std::string target = config_error("dataset:\n  synthetic: {}\nprotocol:\n  targets: [sketch]\n");
  CHECK(target.find("sketch") != std::string::npos);
  CHECK(target.find("cfg.yaml:4:") != std::string::npos);

  CHECK(config_error("dataset:\n  synthetic: {}\ntrain:\n  momentum: 1.5\n").find("momentum") != std::string::npos);
  CHECK(config_error("dataset:\n  synthetic: {}\nprotocol:\n  methods: [dann]\n").find("dann") != std::string::npos);
  CHECK(config_error("dataset: [").find("cfg.yaml:") == 0);
  CHECK_FALSE(config_error("train: {}\n").empty());
  CHECK_THROWS_AS(load_experiment_config("/nonexistent/config.yaml"), ConfigError);
}

TEST_CASE("run writes checkpoints, metrics, results and divergence artifacts") {
  const fs::path root = fresh_dir("lrdg_run_test");
  const fs::path cfg_path = write_config(root, tiny_yaml(root / "runs"));
  const ExperimentConfig config = load_experiment_config(cfg_path);
  REQUIRE(cmd_run(RunOptions{cfg_path, {}}) == 0);

  const fs::path run = config.run_dir(1);
  const fs::path fold = run / "fold-tint";
  CHECK(fs::exists(run / "config.json"));
  CHECK(fs::exists(run / "results.tsv"));
  CHECK(fs::exists(run / "results.json"));
  CHECK_FALSE(fs::exists(run / "results.partial.tsv"));
  // N = 2 sources: N specific classifiers, the mapper, the invariant classifier and the baseline.
  for (const char* f : {"specific-stripe.ckpt", "specific-watermark.ckpt", "mapper.ckpt", "invariant.ckpt",
                        "baseline.ckpt", "lambdas.json", "pad_report.tsv", "pad_scatter.png", "pad_scatter.json",
                        "bound.json"}) {
    INFO(f);
    CHECK(fs::exists(fold / f));
  }
  CHECK_FALSE(fs::exists(fold / "specific-tint.ckpt"));

  const nn::Checkpoint spec = nn::load_checkpoint(fold / "specific-stripe.ckpt");
  CHECK(spec.stage == nn::StageTag::specific);
  CHECK(spec.metadata.at("config_digest") == config.digest());
  CHECK(spec.metadata.at("checksum") == to_hex(nn::classifier_from(spec).params().checksum()));

  for (const auto& entry : fs::directory_iterator(fold / "metrics")) {
    std::ifstream in(entry.path());
    std::string line;
    int n = 0;
    while (std::getline(in, line)) {
      const auto j = nlohmann::json::parse(line);
      CHECK(j.at("config_digest") == config.digest());
      CHECK(j.at("seed") == 1);
      ++n;
    }
    CHECK(n >= 1);
  }
  CHECK(fs::exists(fold / "metrics" / "baseline.jsonl"));
  CHECK(fs::exists(fold / "metrics" / "invariant.jsonl"));

  const auto report = read_pad_report(fold / "pad_report.tsv");
  CHECK(report.size() == 2 * (1 + 1));  // one source pair and one source-target row per model
  CHECK(read_text(fold / "pad_report.tsv").rfind("# config_digest=" + config.digest() + " seed=1", 0) == 0);
  const auto bound = nlohmann::json::parse(read_text(fold / "bound.json"));
  CHECK(bound.at("lrdg").contains("summary"));

  const ProtocolResult first = read_protocol_table(run / "results.tsv");
  CHECK(first.records.size() == 2);
  const std::string before = read_text(run / "results.tsv");
  REQUIRE(cmd_run(RunOptions{cfg_path, {}}) == 0);
  CHECK(read_text(run / "results.tsv") == before);

  SUBCASE("eval reproduces the recorded accuracy") {
    std::ostringstream captured;
    auto* old = std::cout.rdbuf(captured.rdbuf());
    EvalOptions eo{cfg_path, {}, fold / "invariant.ckpt", fold / "mapper.ckpt", "tint", "test"};
    const int code = cmd_eval(eo);
    std::cout.rdbuf(old);
    REQUIRE(code == 0);
    const auto j = nlohmann::json::parse(captured.str());
    double recorded = -1;
    for (const auto& r : first.records) {
      if (r.method == Method::lrdg) recorded = r.accuracy;
    }
    CHECK(j.at("accuracy").get<double>() == recorded);
    EvalOptions bad = eo;
    bad.classifier = fold / "baseline.ckpt";
    CHECK_THROWS_AS(cmd_eval(bad), Error);
  }

  SUBCASE("pad rejects swapped checkpoints and recomputes the report") {
    PadOptions po{cfg_path, {}, "tint", fold / "invariant.ckpt", fold / "mapper.ckpt", fold / "invariant.ckpt", {}};
    try {
      cmd_pad(po);
      FAIL("expected a stage-tag mismatch");
    } catch (const Error& e) {
      CHECK(std::string(e.what()).find("stage-tag mismatch") != std::string::npos);
    }
    po.baseline = fold / "baseline.ckpt";
    po.output = root / "pad";
    std::ostringstream captured;
    auto* old = std::cout.rdbuf(captured.rdbuf());
    const int code = cmd_pad(po);
    std::cout.rdbuf(old);
    CHECK(code == 0);
    CHECK(read_text(root / "pad" / "pad_report.tsv") == read_text(fold / "pad_report.tsv"));
  }

  SUBCASE("inspect on the trained mapper") {
    std::ostringstream captured;
    auto* old = std::cout.rdbuf(captured.rdbuf());
    InspectOptions io;
    io.mapper = fold / "mapper.ckpt";
    io.config = cfg_path;
    io.domain = "tint";
    io.count = 6;
    io.output = root / "inspect" / "grid.png";
    const int code = cmd_inspect(io);
    std::cout.rdbuf(old);
    CHECK(code == 0);
    CHECK(fs::exists(root / "inspect" / "grid.png"));
    const auto j = nlohmann::json::parse(read_text(root / "inspect" / "grid.json"));
    CHECK(j.at("config_digest") == config.digest());
    CHECK(j.contains("tint_variance_mapped"));
  }
  fs::remove_all(root);
}

TEST_CASE("a lambda grid with only two source domains is rejected") {
  const fs::path root = fresh_dir("lrdg_two_sources");
  const fs::path cfg = write_config(root, tiny_yaml(root / "runs"));
  try {
    cmd_run(RunOptions{cfg, {"train.lambda2_grid=[0.1, 1.0]", "divergence.enabled=false"}});
    FAIL("expected a ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("lambda selection needs at least 3 source domains") != std::string::npos);
  }
  fs::remove_all(root);
}

TEST_CASE("mapper inspection statistics") {
  nn::MapperSpec spec;
  spec.depth = 2;
  spec.base_channels = 4;
  spec.image_size = 16;
  spec.identity_init = true;
  Rng rng(1);
  const nn::Mapper<Real> identity(spec, rng);

  SyntheticDomainSpec ds;
  ds.num_classes = 3;
  ds.samples_per_class_per_domain = 4;
  ds.image_size = 16;
  ds.cue_kinds = {CueKind::tint, CueKind::stripe};
  const MultiDomainDataset data = generate_synthetic(ds, 2);
  std::vector<Image> images;
  std::vector<int> labels;
  for (const Sample& s : data.domains[0].samples) {
    images.push_back(s.image);
    labels.push_back(s.label);
  }
  const MapperInspection a = inspect_mapper(identity, images, labels);
  CHECK(a.mean_abs_change <= nn::kMapperEps + 1e-6);
  CHECK(a.tint_variance_mapped == doctest::Approx(a.tint_variance_input).epsilon(0.01));
  CHECK(a.tint_variance_input > 1e-3);  // the tint domain is colour-keyed by class
  const MapperInspection b = inspect_mapper(identity, images, labels);
  CHECK(a.mean_abs_change == b.mean_abs_change);

  std::vector<Image> wrong = {Image::Zero(3, 8 * 8)};
  CHECK_THROWS_AS(inspect_mapper(identity, wrong, std::vector<int>{0}), ShapeError);
}

TEST_CASE("tint statistic against a direct computation") {
  // Two classes of flat images: chroma means (+d, 0, -d) and (-d, 0, +d).
  auto flat = [](float r, float g, float b) {
    Image img(3, 4);
    img.row(0).setConstant(r);
    img.row(1).setConstant(g);
    img.row(2).setConstant(b);
    return img;
  };
  const std::vector<Image> images = {flat(0.6f, 0.5f, 0.4f), flat(0.6f, 0.5f, 0.4f), flat(0.4f, 0.5f, 0.6f),
                                     flat(0.4f, 0.5f, 0.6f)};
  const std::vector<int> labels = {0, 0, 1, 1};
  // Overall chroma mean is 0; each class sits at distance^2 = 2 * 0.1^2.
  CHECK(tint_between_class_variance(images, labels) == doctest::Approx(0.02).epsilon(1e-5));
  const std::vector<int> same = {0, 0, 0, 0};
  CHECK(tint_between_class_variance(images, same) == doctest::Approx(0.0));
  const std::vector<Image> grey = {flat(0.3f, 0.3f, 0.3f), flat(0.7f, 0.7f, 0.7f)};
  CHECK(tint_between_class_variance(grey, std::vector<int>{0, 1}) == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("synth-gen exports a loadable dataset") {
  const fs::path root = fresh_dir("lrdg_synth_gen");
  const fs::path cfg = write_config(root, tiny_yaml(root / "runs"));
  std::ostringstream captured;
  auto* old = std::cout.rdbuf(captured.rdbuf());
  const int code = cmd_synth_gen(SynthGenOptions{cfg, {}, root / "data"});
  std::cout.rdbuf(old);
  REQUIRE(code == 0);
  const MultiDomainDataset data = load_image_folder(root / "data", 16, SplitFractions{}, 0);
  CHECK(data.num_domains() == 3);
  CHECK(data.num_classes() == 3);
  fs::remove_all(root);
}
