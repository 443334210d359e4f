#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <doctest.h>

#include "lrdg/evaluation.hpp"
#include "lrdg/random.hpp"

using namespace lrdg;
namespace fs = std::filesystem;

namespace {

ProtocolResult sample_result() {
  ProtocolResult r;
  const std::vector<std::string> targets = {"tint", "stripe"};
  const double acc[2][2][2] = {{{0.5, 0.25}, {0.75, 0.125}}, {{0.625, 0.375}, {0.875, 0.5}}};
  for (int s = 0; s < 2; ++s) {
    for (int t = 0; t < 2; ++t) {
      for (int m = 0; m < 2; ++m) {
        r.records.push_back(ProtocolRecord{targets[static_cast<std::size_t>(t)], m == 0 ? Method::baseline : Method::lrdg,
                                           acc[s][t][m], static_cast<std::uint64_t>(s + 1), "d1g3st"});
      }
    }
  }
  return r;
}

}  // namespace

TEST_CASE("accuracy and argmax") {
  const std::vector<int> p = {0, 1, 2, 2};
  const std::vector<int> l = {0, 1, 1, 2};
  CHECK(accuracy(p, l) == 0.75);
  CHECK_THROWS_AS(accuracy(p, std::vector<int>{0}), ShapeError);
  CHECK_THROWS_AS(accuracy(std::vector<int>{}, std::vector<int>{}), Error);
  MatrixR logits(3, 2);
  logits << 0, 1, 2, 1, 1, 0;
  CHECK(argmax_columns(logits) == std::vector<int>{1, 0});  // ties go to the lower index
}

TEST_CASE("method names round-trip") {
  CHECK(parse_method("baseline") == Method::baseline);
  CHECK(parse_method(to_string(Method::lrdg)) == Method::lrdg);
  CHECK_THROWS_AS(parse_method("dann"), ConfigError);
}

TEST_CASE("averages over targets and seeds") {
  const ProtocolResult r = sample_result();
  CHECK(r.average(Method::baseline) == doctest::Approx((0.5 + 0.75 + 0.625 + 0.875) / 4));
  CHECK(r.average(Method::lrdg) == doctest::Approx((0.25 + 0.125 + 0.375 + 0.5) / 4));
  const auto [mean, sd] = r.seed_mean_std(Method::baseline);
  // Per-seed averages 0.625 and 0.75.
  CHECK(mean == doctest::Approx(0.6875));
  CHECK(sd == doctest::Approx(std::sqrt(2 * 0.0625 * 0.0625)));
  CHECK(r.seeds() == std::vector<std::uint64_t>{1, 2});
  CHECK(r.methods().size() == 2);
  const auto j = r.summary();
  CHECK(j.at("average").at("lrdg").at("accuracy").get<double>() == doctest::Approx(r.average(Method::lrdg)));
}

TEST_CASE("protocol table round-trips and detects tampered averages") {
  const fs::path path = fs::temp_directory_path() / "lrdg_results_test.tsv";
  const ProtocolResult r = sample_result();
  write_protocol_table(path, r);
  const ProtocolResult back = read_protocol_table(path);
  REQUIRE(back.records.size() == r.records.size());
  for (std::size_t i = 0; i < r.records.size(); ++i) {
    CHECK(back.records[i].target == r.records[i].target);
    CHECK(back.records[i].method == r.records[i].method);
    CHECK(back.records[i].accuracy == r.records[i].accuracy);
    CHECK(back.records[i].seed == r.records[i].seed);
    CHECK(back.records[i].digest == "d1g3st");
  }

  std::stringstream text;
  text << std::ifstream(path).rdbuf();
  std::string s = text.str();
  const auto avg = s.find("Avg.\tbaseline");
  REQUIRE(avg != std::string::npos);
  const auto value = s.find('\t', s.find('\t', avg + 5) + 1) + 1;
  s.replace(value, 3, "0.9");
  std::ofstream(path) << s;
  CHECK_THROWS_AS(read_protocol_table(path), Error);

  std::ofstream(path) << "wrong header\n";
  CHECK_THROWS_AS(read_protocol_table(path), Error);
  fs::remove(path);
}

TEST_CASE("evaluation rejects a model with the wrong class count") {
  SyntheticDomainSpec spec;
  spec.num_classes = 3;
  spec.samples_per_class_per_domain = 10;
  spec.image_size = 16;
  spec.cue_kinds = {CueKind::tint, CueKind::stripe};
  const MultiDomainDataset data = generate_synthetic(spec, 1);
  nn::ClassifierSpec cs;
  cs.num_classes = 4;
  cs.image_size = 16;
  cs.widths = {4};
  Rng rng(1);
  const nn::Classifier<Real> wrong(cs, rng);
  CHECK_THROWS_AS(evaluate(wrong, data, 0, Split::test), ConfigError);
  cs.num_classes = 3;
  const nn::Classifier<Real> right(cs, rng);
  const double acc = evaluate(right, data, 0, Split::test);
  CHECK(acc >= 0.0);
  CHECK(acc <= 1.0);
  CHECK(target_split(data) == Split::test);
}

TEST_CASE("leave-one-domain-out protocol on a tiny benchmark") {
  SyntheticDomainSpec spec;
  spec.num_classes = 3;
  spec.samples_per_class_per_domain = 10;
  spec.image_size = 16;
  spec.cue_kinds = {CueKind::tint, CueKind::stripe, CueKind::watermark};
  const MultiDomainDataset data = generate_synthetic(spec, 2);
  TrainConfig config;
  config.learning_rates = {0.03};
  config.epochs_specific = config.epochs_invariant = config.epochs_baseline = 1;
  config.batch_per_domain = 8;
  config.classifier.image_size = config.mapper.image_size = 16;
  config.classifier.widths = {4, 8};
  config.mapper.depth = 2;
  config.mapper.base_channels = 4;
  config.lambda2_grid = {1.0};
  config.lambda3_grid = {1.0};

  ProtocolOptions options;
  options.seeds = {1, 2};
  options.targets = {0, 2};
  options.digest = "abc";
  int folds = 0;
  options.on_fold = [&](const FoldOutcome& out, std::span<const ProtocolRecord> rows) {
    ++folds;
    CHECK(out.bank->frozen());
    CHECK(out.bank->size() == 2);
    CHECK_FALSE(out.audit.touched(out.fold.target));
    CHECK(rows.size() == 2);
  };
  const ProtocolResult r = run_protocol(data, config, options);
  CHECK(folds == 4);
  CHECK(r.records.size() == 8);
  for (const auto& rec : r.records) {
    CHECK(rec.digest == "abc");
    CHECK(rec.target != "stripe");
  }

  SyntheticDomainSpec small = spec;
  small.cue_kinds = {CueKind::tint, CueKind::stripe};
  CHECK_THROWS_AS(run_protocol(generate_synthetic(small, 2), config), ConfigError);
  ProtocolOptions baseline_only;
  baseline_only.methods = {Method::baseline};
  CHECK(run_protocol(generate_synthetic(small, 2), config, baseline_only).records.size() == 2);
}
