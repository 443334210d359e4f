#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "lrdg/common.hpp"

namespace lrdg {

/// Feature sets are (dim x n) double matrices, one sample per column.
using FeatureMatrix = Eigen::MatrixXd;

struct LinearSvm {
  Eigen::VectorXd weights;
  double bias = 0;

  [[nodiscard]] double decision(const Eigen::Ref<const Eigen::VectorXd>& x) const { return weights.dot(x) + bias; }
  [[nodiscard]] int predict(const Eigen::Ref<const Eigen::VectorXd>& x) const { return decision(x) > 0 ? 1 : 0; }
  /// Fraction of misclassified columns; labels in {0, 1}.
  [[nodiscard]] double error(const FeatureMatrix& x, std::span<const int> labels) const;
};

struct SvmOptions {
  int epochs = 200;
};

/// L2-regularized hinge loss  reg/2 |w|^2 + mean_j max(0, 1 - s_j (w.x_j + b)),
/// s_j = 2 label_j - 1, minimized by stochastic subgradient descent with step
/// 1 / (reg (t + t0)) over seeded shuffles. The bias is a regularized
/// constant feature.
LinearSvm train_linear_svm(const FeatureMatrix& x, std::span<const int> labels, double reg, std::uint64_t seed,
                           SvmOptions options = {});

inline const std::vector<double> kDefaultRegGrid = {1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0};

/// 2 (1 - 2 eps), clamped at 0.
double pad_from_error(double epsilon);

struct PADResult {
  std::string label;     // pair or mixture descriptor
  std::string features;  // which model produced the features
  double epsilon = 0.5;
  double pad = 0;
  double reg = 0;
  std::uint64_t seed = 0;
};

/// Proxy A-distance: pool A (label 1) and B (label 0), split 50/50 with
/// `seed`, standardize on the train half, fit one SVM per grid value and
/// take the lowest test error.
PADResult pad(const FeatureMatrix& a, const FeatureMatrix& b, std::span<const double> reg_grid, std::uint64_t seed,
              std::string label = {}, std::string features = {});

/// One result per unordered pair (i < j), in lexicographic pair order.
std::vector<PADResult> pairwise_source_pads(std::span<const FeatureMatrix> sources,
                                            std::span<const std::string> names, std::span<const double> reg_grid,
                                            std::uint64_t seed, const std::string& features = {});

/// Mixture weights in integer tenths.
struct MixtureSpec {
  std::vector<int> tenths;

  void validate() const;
  [[nodiscard]] double weight(int i) const { return tenths.at(static_cast<std::size_t>(i)) / 10.0; }
  [[nodiscard]] std::string to_string() const;  // "(2,8,0)/10"
  friend auto operator<=>(const MixtureSpec&, const MixtureSpec&) = default;
  friend bool operator==(const MixtureSpec&, const MixtureSpec&) = default;
};

/// All compositions of 10 into `n` parts that are multiples of `step_tenths`,
/// in lexicographic order.
std::vector<MixtureSpec> enumerate_mixtures(int n, int step_tenths = 1);

/// pi_i * n_t rounded by largest remainder (ties to the lower index); sums to n_t.
std::vector<int> mixture_counts(const MixtureSpec& spec, int n_t);

struct MixtureDraw {
  std::vector<int> counts;
  std::vector<std::pair<int, int>> picks;  // (source, column)
  std::vector<bool> with_replacement;      // per source
};

/// Draws n_t samples without replacement (falling back to replacement, with a
/// warning, for sources that are too small).
MixtureDraw sample_mixture(const MixtureSpec& spec, std::span<const int> source_sizes, int n_t, std::uint64_t seed);

FeatureMatrix gather_mixture(const MixtureDraw& draw, std::span<const FeatureMatrix> sources);

struct ClosestMixture {
  MixtureSpec spec;
  PADResult result;
  std::vector<std::pair<MixtureSpec, PADResult>> evaluated;
};

/// Evaluates pad(mixture, target) for every enumerated mixture; ties go to
/// the lexicographically smallest spec.
ClosestMixture closest_mixture(std::span<const FeatureMatrix> sources, const FeatureMatrix& target,
                               std::span<const double> reg_grid, std::uint64_t seed, const std::string& features = {},
                               int step_tenths = 1);

struct BoundReport {
  std::string features;
  double epsilon_hat = 0;
  double gamma_hat = 0;
  double weighted_risk = 0;
  std::vector<double> source_risks;
  MixtureSpec pi;
  [[nodiscard]] double partial_bound() const { return weighted_risk + 0.5 * (gamma_hat + epsilon_hat); }
  [[nodiscard]] nlohmann::json to_json() const;
  [[nodiscard]] std::string describe() const;
};

/// Risks are 1 - source validation accuracy, index-aligned with `pi`.
BoundReport bound_report(std::span<const PADResult> pairwise, const PADResult& closest,
                         std::span<const double> source_risks, const MixtureSpec& pi);

/// PAD report: tab-separated, one record per pair or mixture, after a comment
/// line carrying the config digest and training seed. The seed column is the
/// split seed of the PAD estimate.
struct PadRecord {
  std::string kind;  // "pairwise" or "source-target"
  PADResult result;
};
void write_pad_report(const std::filesystem::path& path, std::span<const PadRecord> records,
                      const std::string& digest, std::uint64_t run_seed);
std::vector<PadRecord> read_pad_report(const std::filesystem::path& path);

}  // namespace lrdg
