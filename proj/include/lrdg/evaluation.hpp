#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lrdg/dataset.hpp"
#include "lrdg/training.hpp"

namespace lrdg {

enum class Method { baseline, lrdg };
std::string to_string(Method m);
Method parse_method(const std::string& name);

/// Top-1 accuracy of a classifier or of F(M(x)) on the given samples of one domain.
double evaluate(const nn::Classifier<Real>& model, const MultiDomainDataset& data, int domain,
                std::optional<Split> split);
double evaluate(const InvariantModel& model, const MultiDomainDataset& data, int domain, std::optional<Split> split);

/// Fraction of positions where predictions equal labels.
double accuracy(std::span<const int> predictions, std::span<const int> labels);
std::vector<int> argmax_columns(const MatrixR& logits);

/// Split evaluated on the target: the test split for synthetic data, the full
/// domain for loaded folders.
std::optional<Split> target_split(const MultiDomainDataset& data);

struct ProtocolRecord {
  std::string target;
  Method method = Method::baseline;
  double accuracy = 0;
  std::uint64_t seed = 0;
  std::string digest;
};

struct ProtocolResult {
  std::vector<ProtocolRecord> records;

  /// Mean over targets (and seeds) of one method.
  [[nodiscard]] double average(Method m) const;
  /// Mean and sample standard deviation over seeds of the per-seed averages.
  [[nodiscard]] std::pair<double, double> seed_mean_std(Method m) const;
  [[nodiscard]] std::vector<Method> methods() const;
  [[nodiscard]] std::vector<std::uint64_t> seeds() const;
  [[nodiscard]] nlohmann::json summary() const;
};

/// Everything trained for one leave-one-out fold.
struct FoldOutcome {
  LooFold fold;
  std::uint64_t seed = 0;
  std::optional<BaselineResult> baseline;
  std::optional<SpecificClassifierBank> bank;
  std::optional<InvariantResult> lrdg;
  std::optional<LambdaSelection> lambdas;
  SampleAudit audit;
};

struct ProtocolOptions {
  std::vector<Method> methods = {Method::baseline, Method::lrdg};
  std::vector<std::uint64_t> seeds;  // empty: the config seed
  std::vector<int> targets;          // empty: every domain
  std::string digest;
  /// Hooks for a named training run of one fold ("baseline", "specific", "invariant", "lambdas").
  std::function<TrainHooks(const FoldOutcome&, const std::string&)> hooks_for;
  /// Called once per fold after evaluation, before the models are released.
  std::function<void(const FoldOutcome&, std::span<const ProtocolRecord>)> on_fold;
};

/// Leave-one-domain-out protocol. Throws if any target sample reaches a
/// training or selection batch.
ProtocolResult run_protocol(const MultiDomainDataset& data, const TrainConfig& config,
                            const ProtocolOptions& options = {});

/// Tab-separated table: one row per (target, method, seed) plus an "Avg." row per method.
void write_protocol_table(const std::filesystem::path& path, const ProtocolResult& result);
ProtocolResult read_protocol_table(const std::filesystem::path& path);

}  // namespace lrdg
