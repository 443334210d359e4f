#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "lrdg/common.hpp"

namespace lrdg {

/// Weights of the two stage objectives:
///   stage 1: CE(own) + lambda1 * U(other domains)
///   stage 2: CE(F(M(x))) + lambda2 * U(F_i(M(x))) + lambda3 * R(M(x), x)
struct LossWeights {
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  double lambda3 = 1.0;

  void validate() const {
    if (lambda1 < 0.0 || lambda2 < 0.0 || lambda3 < 0.0) throw ConfigError("loss weights must be >= 0");
  }
};

enum class UncertaintyVariant { entropy, least_likely };
enum class ReconstructionKind { l2, l1 };

UncertaintyVariant parse_uncertainty_variant(const std::string& name);
ReconstructionKind parse_reconstruction_kind(const std::string& name);
std::string to_string(UncertaintyVariant v);
std::string to_string(ReconstructionKind k);

inline constexpr double kProbabilityFloor = 1e-12;

template <typename Derived>
auto softmax(const Eigen::MatrixBase<Derived>& logits) {
  using Scalar = typename Derived::Scalar;
  Vector<Scalar> p = (logits.array() - logits.maxCoeff()).exp().matrix();
  p /= p.sum();
  return p;
}

template <typename Derived>
typename Derived::Scalar log_sum_exp(const Eigen::MatrixBase<Derived>& logits) {
  const auto m = logits.maxCoeff();
  return m + std::log((logits.array() - m).exp().sum());
}

/// -log softmax(logits)[label], computed as logsumexp(logits) - logits[label].
template <typename Derived>
typename Derived::Scalar cross_entropy(const Eigen::MatrixBase<Derived>& logits, int label) {
  if (label < 0 || label >= logits.size()) {
    throw Error("cross_entropy: label " + std::to_string(label) + " out of range for " +
                std::to_string(logits.size()) + " classes");
  }
  return log_sum_exp(logits) - logits(label);
}

/// Natural-log entropy of softmax(logits) with probabilities floored at 1e-12 inside the log.
template <typename Derived>
typename Derived::Scalar entropy(const Eigen::MatrixBase<Derived>& logits) {
  using Scalar = typename Derived::Scalar;
  const Vector<Scalar> p = softmax(logits);
  const Scalar floor = static_cast<Scalar>(kProbabilityFloor);
  return -(p.array() * p.array().max(floor).log()).sum();
}

/// Index of the least likely class; ties go to the lowest index.
template <typename Derived>
int least_likely_class(const Eigen::MatrixBase<Derived>& logits) {
  int best = 0;
  for (int k = 1; k < logits.size(); ++k) {
    if (logits(k) < logits(best)) best = k;
  }
  return best;
}

/// Uncertainty objective in minimization form: -entropy, or cross-entropy
/// toward the least likely class (label treated as a constant).
template <typename Derived>
typename Derived::Scalar uncertainty_loss(const Eigen::MatrixBase<Derived>& logits, UncertaintyVariant variant) {
  if (variant == UncertaintyVariant::entropy) return -entropy(logits);
  return cross_entropy(logits, least_likely_class(logits));
}

template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar reconstruction_loss(const Eigen::MatrixBase<DerivedA>& mapped,
                                              const Eigen::MatrixBase<DerivedB>& original,
                                              ReconstructionKind kind) {
  if (mapped.rows() != original.rows() || mapped.cols() != original.cols()) {
    throw ShapeError("reconstruction_loss: image shapes differ");
  }
  if (mapped.size() == 0) throw ShapeError("reconstruction_loss: empty images");
  const auto diff = (mapped.derived() - original.derived()).array();
  return kind == ReconstructionKind::l2 ? diff.square().mean() : diff.abs().mean();
}

/// A scalar objective value and its gradient with respect to one input.
template <typename Scalar>
struct LossResult {
  Scalar value = 0;
  Matrix<Scalar> grad;
};

/// Mean cross-entropy over the columns of `logits` (classes x batch).
template <typename Scalar>
LossResult<Scalar> cross_entropy_batch(const Matrix<Scalar>& logits, std::span<const int> labels) {
  if (static_cast<Eigen::Index>(labels.size()) != logits.cols() || logits.cols() == 0) {
    throw ShapeError("cross_entropy_batch: label count does not match batch");
  }
  LossResult<Scalar> r;
  r.grad.resize(logits.rows(), logits.cols());
  const Scalar inv_n = Scalar(1) / static_cast<Scalar>(logits.cols());
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    const int y = labels[static_cast<std::size_t>(j)];
    r.value += cross_entropy(logits.col(j), y);
    r.grad.col(j) = softmax(logits.col(j));
    r.grad(y, j) -= Scalar(1);
  }
  r.value *= inv_n;
  r.grad *= inv_n;
  return r;
}

/// Gradient of entropy(logits) with respect to the logits, consistent with the floored log.
template <typename Derived>
Vector<typename Derived::Scalar> entropy_gradient(const Eigen::MatrixBase<Derived>& logits) {
  using Scalar = typename Derived::Scalar;
  const Vector<Scalar> p = softmax(logits);
  const Scalar floor = static_cast<Scalar>(kProbabilityFloor);
  Vector<Scalar> a(p.size());
  for (Eigen::Index j = 0; j < p.size(); ++j) {
    a(j) = std::log(std::max(p(j), floor)) + (p(j) > floor ? Scalar(1) : Scalar(0));
  }
  const Scalar mean_a = p.dot(a);
  return -(p.array() * (a.array() - mean_a)).matrix();
}

/// Mean uncertainty loss over the columns of `logits`.
template <typename Scalar>
LossResult<Scalar> uncertainty_batch(const Matrix<Scalar>& logits, UncertaintyVariant variant) {
  if (logits.cols() == 0) throw ShapeError("uncertainty_batch: empty batch");
  LossResult<Scalar> r;
  r.grad.resize(logits.rows(), logits.cols());
  const Scalar inv_n = Scalar(1) / static_cast<Scalar>(logits.cols());
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    r.value += uncertainty_loss(logits.col(j), variant);
    if (variant == UncertaintyVariant::entropy) {
      r.grad.col(j) = -entropy_gradient(logits.col(j));
    } else {
      r.grad.col(j) = softmax(logits.col(j));
      r.grad(least_likely_class(logits.col(j)), j) -= Scalar(1);
    }
  }
  r.value *= inv_n;
  r.grad *= inv_n;
  return r;
}

/// Reconstruction loss with gradient with respect to `mapped`.
template <typename Scalar>
LossResult<Scalar> reconstruction_batch(const Matrix<Scalar>& mapped, const Matrix<Scalar>& original,
                                        ReconstructionKind kind) {
  LossResult<Scalar> r;
  r.value = reconstruction_loss(mapped, original, kind);
  const Scalar inv_n = Scalar(1) / static_cast<Scalar>(mapped.size());
  if (kind == ReconstructionKind::l2) {
    r.grad = (Scalar(2) * inv_n) * (mapped - original);
  } else {
    r.grad = (mapped - original).unaryExpr([inv_n](Scalar d) {
      return d > Scalar(0) ? inv_n : (d < Scalar(0) ? -inv_n : Scalar(0));
    });
  }
  return r;
}

template <typename Scalar>
struct Stage1Loss {
  Scalar total = 0;
  Scalar classification = 0;
  Scalar uncertainty = 0;
  Matrix<Scalar> grad_own;                   // d total / d own logits
  std::vector<Matrix<Scalar>> grad_others;   // one per other-domain batch
};

/// Domain-specific classifier objective: mean CE on its own domain plus
/// lambda1 times the mean uncertainty loss pooled over the other domains' batches.
template <typename Scalar>
Stage1Loss<Scalar> stage1_loss(const Matrix<Scalar>& own_logits, std::span<const int> own_labels,
                               std::span<const Matrix<Scalar>> other_logits, const LossWeights& weights,
                               UncertaintyVariant variant) {
  weights.validate();
  if (own_logits.cols() == 0) throw ShapeError("stage1_loss: own-domain batch is empty");
  if (other_logits.empty()) throw ConfigError("stage1_loss: no other-domain batches");
  Stage1Loss<Scalar> r;
  LossResult<Scalar> ce = cross_entropy_batch(own_logits, own_labels);
  r.classification = ce.value;
  r.grad_own = std::move(ce.grad);

  Eigen::Index pooled = 0;
  for (const auto& m : other_logits) pooled += m.cols();
  if (pooled == 0) throw ConfigError("stage1_loss: other-domain batches are empty");
  Matrix<Scalar> all(own_logits.rows(), pooled);
  Eigen::Index offset = 0;
  for (const auto& m : other_logits) {
    all.middleCols(offset, m.cols()) = m;
    offset += m.cols();
  }
  LossResult<Scalar> u = uncertainty_batch(all, variant);
  r.uncertainty = u.value;
  const auto l1 = static_cast<Scalar>(weights.lambda1);
  offset = 0;
  for (const auto& m : other_logits) {
    r.grad_others.push_back(l1 * u.grad.middleCols(offset, m.cols()));
    offset += m.cols();
  }
  r.total = r.classification + l1 * r.uncertainty;
  return r;
}

template <typename Scalar>
struct Stage2Loss {
  Scalar total = 0;
  Scalar classification = 0;
  Scalar uncertainty = 0;
  Scalar reconstruction = 0;
  Matrix<Scalar> grad_invariant_logits;
  std::vector<Matrix<Scalar>> grad_bank_logits;  // one per source domain
  Matrix<Scalar> grad_mapped;                    // reconstruction term only
};

/// Domain-invariant objective. `bank_logits[i]` are the frozen classifier
/// F_i's logits on domain i's mapped samples; the pooled batch (mapped,
/// original, invariant logits, labels) is the concatenation of those domain
/// batches in the same order.
template <typename Scalar>
Stage2Loss<Scalar> stage2_loss(const Matrix<Scalar>& invariant_logits, std::span<const int> labels,
                               std::span<const Matrix<Scalar>> bank_logits, const Matrix<Scalar>& mapped,
                               const Matrix<Scalar>& original, const LossWeights& weights,
                               UncertaintyVariant variant, ReconstructionKind recon) {
  weights.validate();
  Eigen::Index pooled = 0;
  for (const auto& m : bank_logits) {
    if (m.cols() == 0) throw ConfigError("stage2_loss: missing frozen classifier output for a source domain");
    pooled += m.cols();
  }
  if (bank_logits.empty() || pooled != invariant_logits.cols()) {
    throw ConfigError("stage2_loss: frozen classifier outputs do not cover every source domain batch");
  }
  Stage2Loss<Scalar> r;
  LossResult<Scalar> ce = cross_entropy_batch(invariant_logits, labels);
  r.classification = ce.value;
  r.grad_invariant_logits = std::move(ce.grad);

  Matrix<Scalar> all(bank_logits[0].rows(), pooled);
  Eigen::Index offset = 0;
  for (const auto& m : bank_logits) {
    all.middleCols(offset, m.cols()) = m;
    offset += m.cols();
  }
  LossResult<Scalar> u = uncertainty_batch(all, variant);
  r.uncertainty = u.value;
  const auto l2 = static_cast<Scalar>(weights.lambda2);
  offset = 0;
  for (const auto& m : bank_logits) {
    r.grad_bank_logits.push_back(l2 * u.grad.middleCols(offset, m.cols()));
    offset += m.cols();
  }

  LossResult<Scalar> rec = reconstruction_batch(mapped, original, recon);
  r.reconstruction = rec.value;
  const auto l3 = static_cast<Scalar>(weights.lambda3);
  r.grad_mapped = l3 * rec.grad;
  r.total = r.classification + l2 * r.uncertainty + l3 * r.reconstruction;
  return r;
}

}  // namespace lrdg
