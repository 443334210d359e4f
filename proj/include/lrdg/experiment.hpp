#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lrdg/dataset.hpp"
#include "lrdg/divergence.hpp"
#include "lrdg/evaluation.hpp"
#include "lrdg/training.hpp"

namespace lrdg {

struct DatasetSource {
  std::optional<SyntheticDomainSpec> synthetic;
  std::filesystem::path folder;
  int image_size = 32;  // folder datasets only; synthetic uses its own size
  SplitFractions split;
  std::uint64_t seed = 0;  // generation and split seed, shared by every training seed
};

struct DivergenceSettings {
  bool enabled = true;
  std::vector<double> reg_grid = kDefaultRegGrid;
  std::uint64_t seed = 0;
  int step_tenths = 1;
  int max_samples_per_domain = 0;  // 0 = all samples
};

/// Everything a run needs; see docs/config.md for the file schema.
struct ExperimentConfig {
  DatasetSource dataset;
  std::vector<std::string> targets;  // empty: every domain
  std::vector<Method> methods = {Method::baseline, Method::lrdg};
  std::vector<std::uint64_t> seeds;  // empty: train.seed only
  TrainConfig train;
  DivergenceSettings divergence;
  std::filesystem::path output_dir = "runs";

  [[nodiscard]] nlohmann::json to_json() const;
  /// Hash of every field except output_dir.
  [[nodiscard]] std::string digest() const;
  /// <output_dir>/<digest>-s<seed>
  [[nodiscard]] std::filesystem::path run_dir(std::uint64_t seed) const;
};

/// Parses YAML text. `overrides` are "dotted.key=value" strings applied
/// before parsing. Errors are ConfigError prefixed with "<name>:<line>:<col>".
ExperimentConfig parse_experiment_config(const std::string& text, const std::string& name,
                                         const std::vector<std::string>& overrides = {});
ExperimentConfig load_experiment_config(const std::filesystem::path& path,
                                        const std::vector<std::string>& overrides = {});

MultiDomainDataset load_dataset(const ExperimentConfig& config);

/// Penultimate features of every sample of a domain (optionally capped), as doubles.
FeatureMatrix domain_features(const nn::Classifier<Real>& model, const MultiDomainDataset& data, int domain,
                              int max_samples = 0);
FeatureMatrix domain_features(const InvariantModel& model, const MultiDomainDataset& data, int domain,
                              int max_samples = 0);

/// PAD analysis of one model on one fold.
struct ModelDivergence {
  std::string model;
  std::vector<PADResult> pairwise;
  ClosestMixture closest;
  BoundReport bound;
};

template <typename Model>
ModelDivergence analyze_divergence(const Model& model, const std::string& name, const MultiDomainDataset& data,
                                   const LooFold& fold, const DivergenceSettings& settings);

/// Writes the PAD report, scatter plot and bound summary for one fold.
void write_divergence_artifacts(const std::filesystem::path& dir, const ModelDivergence& baseline,
                                const ModelDivergence& lrdg, const std::string& digest, std::uint64_t seed);

/// Mean over the batch of |x - M(x)|, and the between-class variance of the
/// per-image mean chroma (colour minus its grey level), for x and M(x).
struct MapperInspection {
  double mean_abs_change = 0;
  double tint_variance_input = 0;
  double tint_variance_mapped = 0;
};
MapperInspection inspect_mapper(const nn::Mapper<Real>& mapper, std::span<const Image> images,
                                std::span<const int> labels);
double tint_between_class_variance(std::span<const Image> images, std::span<const int> labels);

// Subcommands. Each returns a process exit code and throws lrdg::Error on failure.
struct RunOptions {
  std::filesystem::path config;
  std::vector<std::string> overrides;
};
int cmd_run(const RunOptions& options);

struct PadOptions {
  std::filesystem::path config;
  std::vector<std::string> overrides;
  std::string target;
  std::filesystem::path baseline;   // classifier checkpoint, stage baseline
  std::filesystem::path mapper;     // mapper checkpoint, stage invariant
  std::filesystem::path invariant;  // classifier checkpoint, stage invariant
  std::filesystem::path output;     // directory
};
int cmd_pad(const PadOptions& options);

struct InspectOptions {
  std::filesystem::path mapper;
  std::filesystem::path images;  // image file or directory
  std::filesystem::path config;  // alternatively: dataset from a config
  std::vector<std::string> overrides;
  std::string domain;
  int count = 10;
  std::filesystem::path output;  // PNG path
};
int cmd_inspect(const InspectOptions& options);

struct SynthGenOptions {
  std::filesystem::path config;
  std::vector<std::string> overrides;
  std::filesystem::path output;
};
int cmd_synth_gen(const SynthGenOptions& options);

struct EvalOptions {
  std::filesystem::path config;
  std::vector<std::string> overrides;
  std::filesystem::path classifier;
  std::filesystem::path mapper;  // optional: evaluate F(M(x))
  std::string domain;
  std::string split;  // train, val, test or all
};
int cmd_eval(const EvalOptions& options);

}  // namespace lrdg
