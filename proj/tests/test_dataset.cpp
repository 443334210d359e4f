#include <filesystem>
#include <fstream>
#include <set>

#include <doctest.h>

#include "lrdg/dataset.hpp"
#include "lrdg/evaluation.hpp"
#include "lrdg/random.hpp"
#include "lrdg/training.hpp"

using namespace lrdg;
namespace fs = std::filesystem;

namespace {

SyntheticDomainSpec small_spec() {
  SyntheticDomainSpec s;
  s.num_classes = 3;
  s.samples_per_class_per_domain = 10;
  s.image_size = 16;
  s.cue_kinds = {CueKind::tint, CueKind::stripe};
  return s;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

/// Nearest-centroid accuracy of `test` against class means of `train`.
double nearest_centroid_accuracy(const std::vector<const Sample*>& train, const std::vector<const Sample*>& test,
                                 int classes) {
  std::vector<Eigen::MatrixXd> sum(static_cast<std::size_t>(classes));
  std::vector<int> count(static_cast<std::size_t>(classes), 0);
  for (const Sample* s : train) {
    auto& m = sum[static_cast<std::size_t>(s->label)];
    if (m.size() == 0) m = Eigen::MatrixXd::Zero(s->image.rows(), s->image.cols());
    m += s->image.cast<double>();
    ++count[static_cast<std::size_t>(s->label)];
  }
  for (int c = 0; c < classes; ++c) sum[static_cast<std::size_t>(c)] /= count[static_cast<std::size_t>(c)];
  int correct = 0;
  for (const Sample* s : test) {
    int best = 0;
    double best_d = 1e300;
    for (int c = 0; c < classes; ++c) {
      const double d = (s->image.cast<double>() - sum[static_cast<std::size_t>(c)]).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    correct += best == s->label ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

}  // namespace

TEST_CASE("synthetic benchmark structure") {
  SyntheticDomainSpec spec;  // C=5, 4 domains, 100 per class, 32x32
  const MultiDomainDataset ds = generate_synthetic(spec, 1);
  CHECK(ds.num_domains() == 4);
  CHECK(ds.num_classes() == 5);
  std::size_t total = 0;
  std::set<CueKind> kinds;
  for (const Domain& d : ds.domains) {
    total += d.samples.size();
    kinds.insert(d.cue_kind);
    CHECK(d.name == to_string(d.cue_kind));
  }
  CHECK(total == 2000);
  CHECK(kinds.size() == 4);

  for (const Domain& d : ds.domains) {
    std::vector<int> per_split(3, 0);
    for (const Sample& s : d.samples) {
      ++per_split[static_cast<std::size_t>(s.split)];
      CHECK(s.image.rows() == 3);
      CHECK(s.image.cols() == 32 * 32);
      CHECK(s.image.minCoeff() >= 0.0f);
      CHECK(s.image.maxCoeff() <= 1.0f);
      // The domain's own cue is class-keyed; no other domain's cue kind is present.
      REQUIRE(s.cues.size() == 1);
      CHECK(s.cues[0].kind == d.cue_kind);
      CHECK(s.cues[0].class_keyed);
      CHECK(s.cues[0].parameter == s.label);
    }
    // 80/10/10 stratified: 80/10/10 per class of 100.
    CHECK(per_split[0] == 400);
    CHECK(per_split[1] == 50);
    CHECK(per_split[2] == 50);
  }
}

TEST_CASE("synthetic generation is deterministic and seed dependent") {
  const MultiDomainDataset a = generate_synthetic(small_spec(), 5);
  const MultiDomainDataset b = generate_synthetic(small_spec(), 5);
  const MultiDomainDataset c = generate_synthetic(small_spec(), 6);
  bool differs = false;
  for (std::size_t d = 0; d < a.domains.size(); ++d) {
    for (std::size_t i = 0; i < a.domains[d].samples.size(); ++i) {
      CHECK(a.domains[d].samples[i].image == b.domains[d].samples[i].image);
      CHECK(a.domains[d].samples[i].split == b.domains[d].samples[i].split);
      differs = differs || a.domains[d].samples[i].image != c.domains[d].samples[i].image;
    }
  }
  CHECK(differs);
}

TEST_CASE("random foreign cues are drawn independently of the class") {
  SyntheticDomainSpec spec = small_spec();
  spec.foreign_cues = ForeignCueMode::random;
  spec.samples_per_class_per_domain = 60;
  const MultiDomainDataset ds = generate_synthetic(spec, 2);
  for (const Domain& d : ds.domains) {
    int agree = 0;
    for (const Sample& s : d.samples) {
      REQUIRE(s.cues.size() == 2);
      CHECK(s.cues[0].class_keyed);
      CHECK_FALSE(s.cues[1].class_keyed);
      CHECK(s.cues[1].kind != d.cue_kind);
      agree += s.cues[1].parameter == s.label ? 1 : 0;
    }
    // Agreement with the label is at chance (1/3), far from the 100% of a keyed cue.
    CHECK(static_cast<double>(agree) / d.samples.size() < 0.5);
  }
}

TEST_CASE("invalid synthetic specs are configuration errors") {
  SyntheticDomainSpec dup = small_spec();
  dup.cue_kinds = {CueKind::tint, CueKind::tint};
  CHECK_THROWS_AS(generate_synthetic(dup, 0), ConfigError);
  SyntheticDomainSpec one = small_spec();
  one.num_classes = 1;
  CHECK_THROWS_AS(generate_synthetic(one, 0), ConfigError);
  SyntheticDomainSpec split = small_spec();
  split.split = {0.9, 0.1};
  CHECK_THROWS_AS(generate_synthetic(split, 0), ConfigError);
  CHECK_THROWS_AS(parse_cue_kind("plaid"), ConfigError);
}

TEST_CASE("leave-one-domain-out splits") {
  SyntheticDomainSpec spec = small_spec();
  spec.cue_kinds = {CueKind::tint, CueKind::stripe, CueKind::watermark, CueKind::frame};
  const auto folds4 = make_loo_splits(generate_synthetic(spec, 0));
  REQUIRE(folds4.size() == 4);
  std::set<int> targets;
  for (const LooFold& f : folds4) {
    targets.insert(f.target);
    CHECK(f.sources.size() == 3);
    CHECK(std::find(f.sources.begin(), f.sources.end(), f.target) == f.sources.end());
  }
  CHECK(targets.size() == 4);
  const auto folds2 = make_loo_splits(generate_synthetic(small_spec(), 0));
  REQUIRE(folds2.size() == 2);
  CHECK(folds2[0].sources == std::vector<int>{1});
  CHECK(folds2[1].sources == std::vector<int>{0});
}

TEST_CASE("zero cue strength: domains are indistinguishable to a domain probe") {
  SyntheticDomainSpec spec;
  spec.cue_strength = 0.0;
  spec.samples_per_class_per_domain = 60;
  const MultiDomainDataset ds = generate_synthetic(spec, 4);
  // Relabel samples by domain and fit a nearest-centroid domain probe.
  std::vector<Sample> relabeled;
  for (const Domain& d : ds.domains) {
    for (const Sample& s : d.samples) {
      Sample r = s;
      r.label = s.domain_id;
      relabeled.push_back(std::move(r));
    }
  }
  std::vector<const Sample*> train, test;
  for (const Sample& s : relabeled) (s.split == Split::train ? train : test).push_back(&s);
  const double acc = nearest_centroid_accuracy(train, test, ds.num_domains());
  INFO("domain probe accuracy ", acc);
  CHECK(std::abs(acc - 0.25) <= 0.05);
}

TEST_CASE("cues are learnable within their domain and do not transfer") {
  SyntheticDomainSpec spec;  // cue strength 0.9
  spec.samples_per_class_per_domain = 60;
  const MultiDomainDataset ds = generate_synthetic(spec, 8);
  for (int d = 0; d < ds.num_domains(); ++d) {
    // Cue pixels alone: the domain's class-keyed cue without any glyph.
    MultiDomainDataset cue_only;
    cue_only.shape = ds.shape;
    cue_only.class_names = ds.class_names;
    cue_only.synthetic = true;
    Domain dom;
    dom.name = "cue";
    Rng rng(100 + static_cast<std::uint64_t>(d));
    for (int i = 0; i < 1000; ++i) {
      RenderRequest req;
      req.draw_shape = false;
      req.shape_class = i % ds.num_classes();
      req.cues = {{ds.domains[static_cast<std::size_t>(d)].cue_kind, i % ds.num_classes(), true}};
      // The other cue kinds appear with random parameters, so the only
      // label information is the domain's own cue.
      for (const Domain& other : ds.domains) {
        if (other.cue_kind == req.cues[0].kind) continue;
        req.cues.push_back({other.cue_kind, static_cast<int>(rng.below(static_cast<std::uint64_t>(ds.num_classes()))), false});
      }
      Sample s;
      s.image = render_synthetic(req, rng);
      s.label = i % ds.num_classes();
      dom.samples.push_back(std::move(s));
    }
    assign_splits(dom.samples, ds.num_classes(), {0.8, 0.1}, rng);
    cue_only.domains.push_back(std::move(dom));

    TrainConfig cfg;
    cfg.learning_rates = {0.05};
    cfg.epochs_baseline = 30;
    cfg.patience = 0;
    cfg.classifier.num_classes = ds.num_classes();
    cfg.classifier.widths = {16, 32, 32};
    const std::vector<int> sources = {0};
    const BaselineResult probe = train_erm_baseline(cue_only, sources, cfg);
    const std::string name = ds.domains[static_cast<std::size_t>(d)].name;
    INFO("cue domain ", name);
    CHECK(evaluate(probe.model, cue_only, 0, Split::test) >= 0.95);
    for (int o = 0; o < ds.num_domains(); ++o) {
      if (o == d) continue;
      INFO("applied to ", ds.domains[static_cast<std::size_t>(o)].name);
      CHECK(evaluate(probe.model, ds, o, std::nullopt) <= 1.0 / ds.num_classes() + 0.10);
    }
  }
}

TEST_CASE("image folder loader") {
  const fs::path root = fresh_dir("lrdg_folder_test");
  SyntheticDomainSpec spec = small_spec();
  spec.samples_per_class_per_domain = 4;
  const MultiDomainDataset src = generate_synthetic(spec, 3);
  export_dataset(src, root, &spec, 3);
  CHECK(fs::exists(root / "manifest.json"));

  const MultiDomainDataset a = load_image_folder(root, 16, {0.5, 0.25}, 9);
  CHECK(a.num_domains() == 2);
  CHECK(a.num_classes() == 3);
  std::vector<std::string> sorted = a.class_names;
  std::sort(sorted.begin(), sorted.end());
  CHECK(a.class_names == sorted);
  for (const Domain& d : a.domains) CHECK(d.samples.size() == 12);
  // 8-bit export: pixels agree to quantization.
  CHECK(a.domains[0].samples.size() == src.domains[0].samples.size());

  const MultiDomainDataset b = load_image_folder(root, 16, {0.5, 0.25}, 9);
  for (std::size_t d = 0; d < a.domains.size(); ++d) {
    for (std::size_t i = 0; i < a.domains[d].samples.size(); ++i) {
      CHECK(a.domains[d].samples[i].split == b.domains[d].samples[i].split);
      CHECK(a.domains[d].samples[i].image == b.domains[d].samples[i].image);
    }
  }

  SUBCASE("label indices do not depend on domain enumeration") {
    const std::string first = a.domains[0].name;
    fs::rename(root / first, root / ("zz_" + first));
    const MultiDomainDataset c = load_image_folder(root, 16, {0.5, 0.25}, 9);
    CHECK(c.class_names == a.class_names);
  }
  SUBCASE("missing class") {
    const std::string dom = a.domains[1].name;
    const std::string cls = a.class_names.back();
    fs::remove_all(root / dom / cls);
    try {
      load_image_folder(root, 16, {0.5, 0.25}, 9);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(std::string(e.what()).find("domain " + dom + " missing class " + cls) != std::string::npos);
    }
  }
  SUBCASE("unreadable image") {
    const fs::path bad = root / a.domains[0].name / a.class_names[0] / "broken.png";
    std::ofstream(bad) << "garbage";
    try {
      load_image_folder(root, 16, {0.5, 0.25}, 9);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(std::string(e.what()).find(bad.string()) != std::string::npos);
    }
  }
  SUBCASE("bad split fractions") {
    CHECK_THROWS_AS(load_image_folder(root, 16, {0.8, 0.2}, 9), ConfigError);
  }
  fs::remove_all(root);
}
