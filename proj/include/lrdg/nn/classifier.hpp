#pragma once

#include <string>
#include <vector>

#include "lrdg/nn/layers.hpp"
#include "lrdg/nn/parameters.hpp"

namespace lrdg::nn {

/// Convolutional classifier: one stride-2 3x3 conv + ELU per block, global
/// average pool, linear head. The default widths give the desk backbone;
/// other width lists give larger variants with the same contract.
struct ClassifierSpec {
  int num_classes = 5;
  int in_channels = 3;
  int image_size = 32;
  std::vector<int> widths = {32, 64, 128};

  [[nodiscard]] int feature_dim() const { return widths.back(); }
  void validate() const {
    if (num_classes < 2) throw ConfigError("classifier needs at least two classes");
    if (widths.empty()) throw ConfigError("classifier needs at least one block");
    if (image_size < 1 || in_channels < 1) throw ConfigError("invalid classifier input shape");
    for (int w : widths) {
      if (w < 1) throw ConfigError("classifier widths must be positive");
    }
  }
  friend bool operator==(const ClassifierSpec&, const ClassifierSpec&) = default;
};

enum class FeatureLayer { penultimate };

FeatureLayer parse_feature_layer(const std::string& tag);

template <typename Scalar>
class Classifier {
 public:
  struct Tape {
    int batch = 0;
    FeatureMap<Scalar> input;
    std::vector<FeatureMap<Scalar>> activations;  // post-ELU output of each block
    Matrix<Scalar> features;
  };

  struct Gradients {
    ParameterSet<Scalar> params;
    Matrix<Scalar> input;  // same layout as the input batch
  };

  Classifier() = default;

  Classifier(ClassifierSpec spec, Rng& rng) : spec_(std::move(spec)) {
    spec_.validate();
    int c_in = spec_.in_channels;
    for (std::size_t b = 0; b < spec_.widths.size(); ++b) {
      const int c_out = spec_.widths[b];
      params_.add("block" + std::to_string(b) + ".weight",
                  fan_in_normal<Scalar>(c_out, 9 * c_in, std::sqrt(2.0), rng));
      params_.add("block" + std::to_string(b) + ".bias", Matrix<Scalar>::Zero(c_out, 1));
      c_in = c_out;
    }
    params_.add("head.weight", fan_in_normal<Scalar>(spec_.num_classes, c_in, 1.0, rng));
    params_.add("head.bias", Matrix<Scalar>::Zero(spec_.num_classes, 1));
  }

  Classifier(ClassifierSpec spec, ParameterSet<Scalar> params)
      : spec_(std::move(spec)), params_(std::move(params)) {
    spec_.validate();
    Rng rng(0);
    Classifier reference(spec_, rng);
    if (!reference.params_.same_layout(params_)) {
      throw ShapeError("classifier parameters do not match the spec");
    }
  }

  [[nodiscard]] const ClassifierSpec& spec() const { return spec_; }
  [[nodiscard]] const ParameterSet<Scalar>& params() const { return params_; }
  [[nodiscard]] ParameterSet<Scalar>& params() { return params_; }

  [[nodiscard]] int batch_of(const Matrix<Scalar>& images) const {
    const Eigen::Index hw = static_cast<Eigen::Index>(spec_.image_size) * spec_.image_size;
    if (images.rows() != spec_.in_channels || images.cols() % hw != 0 || images.cols() == 0) {
      throw ShapeError("classifier input has shape " + std::to_string(images.rows()) + "x" +
                       std::to_string(images.cols()) + ", expected " +
                       std::to_string(spec_.in_channels) + " x k*" + std::to_string(hw));
    }
    return static_cast<int>(images.cols() / hw);
  }

  /// Logits (num_classes x batch). Fills `tape` when given.
  Matrix<Scalar> forward(const Matrix<Scalar>& images, Tape* tape = nullptr) const {
    const int batch = batch_of(images);
    FeatureMap<Scalar> x{images, batch, spec_.image_size, spec_.image_size};
    Tape local;
    Tape& t = tape ? *tape : local;
    t.batch = batch;
    t.activations.clear();
    if (tape) t.input = x;
    for (std::size_t b = 0; b < spec_.widths.size(); ++b) {
      const int w = static_cast<int>(2 * b);
      FeatureMap<Scalar> y = conv2d(x, params_[w], params_[w + 1], ConvGeometry{3, 2});
      elu_inplace(y.data);
      if (tape) t.activations.push_back(y);
      x = std::move(y);
    }
    t.features = global_average_pool(x);
    const int head = static_cast<int>(2 * spec_.widths.size());
    Matrix<Scalar> logits = params_[head] * t.features;
    logits.colwise() += params_[head + 1].col(0);
    return logits;
  }

  /// Penultimate (pooled) representation, (feature_dim x batch).
  Matrix<Scalar> features(const Matrix<Scalar>& images, FeatureLayer layer = FeatureLayer::penultimate) const {
    (void)layer;
    Tape t;
    forward(images, &t);
    return t.features;
  }

  Gradients backward(const Tape& tape, const Matrix<Scalar>& dlogits, bool param_grads = true,
                     bool input_grad = false) const {
    Gradients g;
    if (param_grads) g.params = params_.zeros_like();
    const int head = static_cast<int>(2 * spec_.widths.size());
    if (param_grads) {
      g.params[head].noalias() = dlogits * tape.features.transpose();
      g.params[head + 1] = dlogits.rowwise().sum();
    }
    const Matrix<Scalar> dfeatures = params_[head].transpose() * dlogits;
    const FeatureMap<Scalar>& last = tape.activations.back();
    FeatureMap<Scalar> dy = global_average_pool_backward(dfeatures, tape.batch, last.height, last.width);
    for (int b = static_cast<int>(spec_.widths.size()) - 1; b >= 0; --b) {
      const auto bi = static_cast<std::size_t>(b);
      elu_backward_inplace(dy.data, tape.activations[bi].data);
      const FeatureMap<Scalar>& in = b == 0 ? tape.input : tape.activations[bi - 1];
      const bool need_input = b > 0 || input_grad;
      ConvGrads<Scalar> cg = conv2d_backward(dy.data, in, params_[2 * b], ConvGeometry{3, 2}, param_grads,
                                             need_input);
      if (param_grads) {
        g.params[2 * b] = std::move(cg.weight);
        g.params[2 * b + 1] = std::move(cg.bias);
      }
      if (b > 0) {
        dy = std::move(cg.input);
      } else if (input_grad) {
        g.input = std::move(cg.input.data);
      }
    }
    return g;
  }

  template <typename Other>
  [[nodiscard]] Classifier<Other> cast() const {
    return Classifier<Other>(spec_, params_.template cast<Other>());
  }

 private:
  ClassifierSpec spec_;
  ParameterSet<Scalar> params_;
};

inline FeatureLayer parse_feature_layer(const std::string& tag) {
  if (tag == "penultimate") return FeatureLayer::penultimate;
  throw ConfigError("unknown feature layer '" + tag + "'");
}

}  // namespace lrdg::nn
