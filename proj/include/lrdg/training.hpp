#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lrdg/dataset.hpp"
#include "lrdg/losses.hpp"
#include "lrdg/nn/classifier.hpp"
#include "lrdg/nn/mapper.hpp"
#include "lrdg/random.hpp"

namespace lrdg {

struct TrainConfig {
  std::vector<double> learning_rates = {0.1, 0.03, 0.01};
  double momentum = 0.9;
  int epochs_specific = 30;
  int epochs_invariant = 30;
  int epochs_baseline = 30;
  int patience = 5;  // epochs without improvement before stopping; 0 disables
  int batch_per_domain = 32;
  /// Std of clipped Gaussian pixel noise on stage-1 training batches; 0 = none.
  double specific_noise = 0.0;
  std::uint64_t seed = 0;
  UncertaintyVariant uncertainty = UncertaintyVariant::entropy;
  ReconstructionKind reconstruction = ReconstructionKind::l2;
  LossWeights weights;
  std::vector<double> lambda2_grid = {0.1, 1.0, 10.0};
  std::vector<double> lambda3_grid = {0.1, 1.0, 10.0};
  nn::ClassifierSpec classifier;
  nn::MapperSpec mapper;

  void validate() const;
  [[nodiscard]] nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Records every sample id that enters a training, validation or selection batch.
class SampleAudit {
 public:
  void record(int domain, std::span<const int> indices) {
    for (int i : indices) seen_.insert(SampleId{domain, i});
  }
  [[nodiscard]] bool touched(int domain) const {
    auto it = seen_.lower_bound(SampleId{domain, 0});
    return it != seen_.end() && it->domain == domain;
  }
  [[nodiscard]] const std::set<SampleId>& seen() const { return seen_; }

 private:
  std::set<SampleId> seen_;
};

/// Optional observers and controls for a training run.
struct TrainHooks {
  std::function<void(const nlohmann::json&)> on_epoch;  // one record per epoch
  SampleAudit* audit = nullptr;
  /// When set, training state is written here after every epoch and a
  /// matching state file is resumed from.
  std::filesystem::path state_path;
  /// Stop (as if interrupted) after this many epochs of the current call; 0 = never.
  int interrupt_after = 0;
};

/// Thrown when `TrainHooks::interrupt_after` stops a run.
class TrainingInterrupted : public Error {
 public:
  using Error::Error;
};

/// Images, labels and ids of one domain split, packed in batch layout.
struct DomainTensor {
  int domain = 0;
  int pixels = 0;
  MatrixR images;
  std::vector<int> labels;
  std::vector<int> indices;  // sample index within the domain

  [[nodiscard]] int size() const { return static_cast<int>(labels.size()); }
  [[nodiscard]] MatrixR gather(std::span<const int> rows) const;
};

DomainTensor pack_domain(const MultiDomainDataset& data, int domain, std::optional<Split> split);

/// Endless shuffled pass over [0, n). Reshuffles on wrap-around.
class DomainSampler {
 public:
  DomainSampler(int n, Rng rng);
  std::vector<int> next(int count);
  [[nodiscard]] nlohmann::json state() const;
  void restore(const nlohmann::json& state);

 private:
  void reshuffle();
  int n_;
  Rng rng_;
  std::vector<int> order_;
  std::size_t position_ = 0;
};

/// SGD with heavy-ball momentum: v <- mu v + g; p <- p - lr v.
class Sgd {
 public:
  Sgd(double lr, double momentum) : lr_(lr), momentum_(momentum) {}
  void step(nn::ParameterSet<Real>& params, const nn::ParameterSet<Real>& grads);
  [[nodiscard]] const nn::ParameterSet<Real>& velocity() const { return velocity_; }
  void set_velocity(nn::ParameterSet<Real> v) { velocity_ = std::move(v); }
  [[nodiscard]] double learning_rate() const { return lr_; }

 private:
  double lr_;
  double momentum_;
  nn::ParameterSet<Real> velocity_;
};

/// Per-classifier stage-1 diagnostics on validation data.
struct SpecificMetrics {
  int domain = 0;
  double learning_rate = 0;
  int epochs_run = 0;
  int best_epoch = 0;
  double own_accuracy = 0;
  double other_accuracy = 0;
  double other_entropy = 0;  // mean prediction entropy on the other sources
  double val_objective = 0;
};

struct SpecificResult {
  nn::Classifier<Real> model;
  SpecificMetrics metrics;
  std::vector<nlohmann::json> curve;
};

/// Trains the domain-specific classifier of `domain`; `sources` lists all
/// source domain ids (including `domain`).
SpecificResult train_domain_specific(const MultiDomainDataset& data, std::span<const int> sources, int domain,
                                     const TrainConfig& config, const TrainHooks& hooks = {});

/// N domain-specific classifiers, index-aligned with the source list.
class SpecificClassifierBank {
 public:
  void add(int domain, nn::Classifier<Real> model, SpecificMetrics metrics);
  /// Records parameter checksums and makes the bank read-only. Idempotent.
  void freeze();
  [[nodiscard]] bool frozen() const { return frozen_; }
  [[nodiscard]] int size() const { return static_cast<int>(models_.size()); }
  [[nodiscard]] const std::vector<int>& domains() const { return domains_; }
  [[nodiscard]] const nn::Classifier<Real>& classifier(int i) const;
  /// Mutable access; throws once frozen.
  nn::Classifier<Real>& mutable_classifier(int i);
  [[nodiscard]] const SpecificMetrics& metrics(int i) const;
  [[nodiscard]] const std::vector<std::uint64_t>& frozen_checksums() const { return checksums_; }
  [[nodiscard]] std::vector<std::uint64_t> current_checksums() const;
  /// Throws if any parameter changed since freeze().
  void verify() const;

 private:
  std::vector<int> domains_;
  std::vector<nn::Classifier<Real>> models_;
  std::vector<SpecificMetrics> metrics_;
  std::vector<std::uint64_t> checksums_;
  bool frozen_ = false;
};

SpecificClassifierBank train_specific_bank(const MultiDomainDataset& data, std::span<const int> sources,
                                           const TrainConfig& config, const TrainHooks& hooks = {});

/// Deployed pipeline F(M(x)).
struct InvariantModel {
  nn::Mapper<Real> mapper;
  nn::Classifier<Real> classifier;

  [[nodiscard]] MatrixR logits(const MatrixR& images) const { return classifier.forward(mapper.forward(images)); }
  [[nodiscard]] MatrixR features(const MatrixR& images) const { return classifier.features(mapper.forward(images)); }
};

struct InvariantMetrics {
  double learning_rate = 0;
  int epochs_run = 0;
  int best_epoch = 0;
  double val_accuracy = 0;  // F(M(x)) on the sources' validation splits
  double val_entropy = 0;   // mean entropy of F_i(M(x_i))
  double val_reconstruction = 0;
  double val_objective = 0;
};

struct InvariantResult {
  InvariantModel model;
  InvariantMetrics metrics;
  std::vector<nlohmann::json> curve;
};

/// Jointly trains mapper and domain-invariant classifier against a frozen bank.
InvariantResult train_domain_invariant(const MultiDomainDataset& data, const SpecificClassifierBank& bank,
                                       const TrainConfig& config, const TrainHooks& hooks = {});

struct BaselineMetrics {
  double learning_rate = 0;
  int epochs_run = 0;
  int best_epoch = 0;
  double val_accuracy = 0;
  double train_accuracy = 0;
};

struct BaselineResult {
  nn::Classifier<Real> model;
  BaselineMetrics metrics;
  std::vector<nlohmann::json> curve;
};

/// Single classifier on pooled sources (one balanced batch per source per step).
BaselineResult train_erm_baseline(const MultiDomainDataset& data, std::span<const int> sources,
                                  const TrainConfig& config, const TrainHooks& hooks = {});

/// One stage-1 step's loss and parameter gradient on given batches.
struct StepGradient {
  double loss = 0;
  nn::ParameterSet<Real> grads;
};
StepGradient specific_step_gradient(const nn::Classifier<Real>& model, const MatrixR& own,
                                    std::span<const int> labels, std::span<const MatrixR> others,
                                    const TrainConfig& config);
StepGradient erm_step_gradient(const nn::Classifier<Real>& model, const MatrixR& images,
                               std::span<const int> labels);

/// Gradients of one stage-2 step for the mapper and invariant classifier.
/// The bank is only read; its classifiers contribute input gradients.
struct InvariantStep {
  Stage2Loss<Real> loss;
  nn::ParameterSet<Real> mapper_grads;
  nn::ParameterSet<Real> classifier_grads;
};
InvariantStep invariant_step_gradient(const InvariantModel& model, const SpecificClassifierBank& bank,
                                      std::span<const MatrixR> domain_batches,
                                      std::span<const std::vector<int>> domain_labels, const TrainConfig& config);

struct GridScore {
  double lambda2 = 0;
  double lambda3 = 0;
  std::vector<double> fold_scores;  // held-out source accuracy per inner fold
  double mean = 0;
};

struct LambdaSelection {
  double lambda2 = 0;
  double lambda3 = 0;
  std::vector<GridScore> scores;  // empty for a singleton grid
};

/// Inner leave-one-source-out search over lambda2 x lambda3.
LambdaSelection select_lambdas(const MultiDomainDataset& data, std::span<const int> sources,
                               const TrainConfig& config, const TrainHooks& hooks = {});

/// Picks the best grid entry: highest mean, ties to smaller lambda2 then lambda3.
LambdaSelection pick_lambdas(std::vector<GridScore> scores);

/// Top-1 accuracy and mean CE of logits (classes x n).
struct Scored {
  double accuracy = 0;
  double loss = 0;
};
Scored score_logits(const MatrixR& logits, std::span<const int> labels);

/// Logits of `model` on images in chunks, to bound memory.
template <typename Model>
MatrixR batched_logits(const Model& model, const MatrixR& images, int pixels, int chunk = 128) {
  const Eigen::Index n = images.cols() / pixels;
  MatrixR out;
  for (Eigen::Index first = 0; first < n; first += chunk) {
    const Eigen::Index count = std::min<Eigen::Index>(chunk, n - first);
    MatrixR part;
    if constexpr (requires { model.logits(images); }) {
      part = model.logits(images.middleCols(first * pixels, count * pixels));
    } else {
      part = model.forward(images.middleCols(first * pixels, count * pixels));
    }
    if (out.size() == 0) out.resize(part.rows(), n);
    out.middleCols(first, count) = part;
  }
  return out;
}

}  // namespace lrdg
