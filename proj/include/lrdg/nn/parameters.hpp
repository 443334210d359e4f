#pragma once

#include <string>
#include <vector>

#include "lrdg/common.hpp"
#include "lrdg/random.hpp"

namespace lrdg::nn {

/// Ordered, named list of parameter tensors. Biases are stored as (n x 1).
template <typename Scalar>
class ParameterSet {
 public:
  int add(std::string name, Matrix<Scalar> value) {
    names_.push_back(std::move(name));
    tensors_.push_back(std::move(value));
    return static_cast<int>(tensors_.size()) - 1;
  }

  [[nodiscard]] int count() const { return static_cast<int>(tensors_.size()); }
  [[nodiscard]] const std::string& name(int i) const { return names_[static_cast<std::size_t>(i)]; }
  [[nodiscard]] const Matrix<Scalar>& operator[](int i) const { return tensors_[static_cast<std::size_t>(i)]; }
  [[nodiscard]] Matrix<Scalar>& operator[](int i) { return tensors_[static_cast<std::size_t>(i)]; }
  [[nodiscard]] const std::vector<std::string>& names() const { return names_; }

  [[nodiscard]] Eigen::Index total_size() const {
    Eigen::Index n = 0;
    for (const auto& t : tensors_) n += t.size();
    return n;
  }

  /// Same names and shapes, all zeros.
  [[nodiscard]] ParameterSet zeros_like() const {
    ParameterSet out;
    for (std::size_t i = 0; i < tensors_.size(); ++i) {
      out.add(names_[i], Matrix<Scalar>::Zero(tensors_[i].rows(), tensors_[i].cols()));
    }
    return out;
  }

  template <typename Other>
  [[nodiscard]] ParameterSet<Other> cast() const {
    ParameterSet<Other> out;
    for (std::size_t i = 0; i < tensors_.size(); ++i) out.add(names_[i], tensors_[i].template cast<Other>());
    return out;
  }

  [[nodiscard]] bool same_layout(const ParameterSet& other) const {
    if (other.count() != count()) return false;
    for (std::size_t i = 0; i < tensors_.size(); ++i) {
      if (names_[i] != other.names_[i] || tensors_[i].rows() != other.tensors_[i].rows() ||
          tensors_[i].cols() != other.tensors_[i].cols()) {
        return false;
      }
    }
    return true;
  }

  [[nodiscard]] bool all_finite() const {
    for (const auto& t : tensors_) {
      if (!t.allFinite()) return false;
    }
    return true;
  }

  /// Checksum over names, shapes and raw values; bitwise sensitive.
  [[nodiscard]] std::uint64_t checksum() const {
    Fnv1a h;
    for (std::size_t i = 0; i < tensors_.size(); ++i) {
      h.update(names_[i]);
      h.update_pod(static_cast<std::int64_t>(tensors_[i].rows()));
      h.update_pod(static_cast<std::int64_t>(tensors_[i].cols()));
      h.update(std::as_bytes(std::span(tensors_[i].data(), static_cast<std::size_t>(tensors_[i].size()))));
    }
    return h.digest();
  }

  friend bool operator==(const ParameterSet& a, const ParameterSet& b) {
    if (!a.same_layout(b)) return false;
    for (std::size_t i = 0; i < a.tensors_.size(); ++i) {
      if (a.tensors_[i] != b.tensors_[i]) return false;
    }
    return true;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Matrix<Scalar>> tensors_;
};

/// Fan-in scaled Gaussian initialization: N(0, gain^2 / fan_in).
template <typename Scalar>
Matrix<Scalar> fan_in_normal(Eigen::Index rows, Eigen::Index cols, double gain, Rng& rng) {
  Matrix<Scalar> m(rows, cols);
  const double stddev = gain / std::sqrt(static_cast<double>(cols));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(stddev * rng.normal());
  return m;
}

}  // namespace lrdg::nn
