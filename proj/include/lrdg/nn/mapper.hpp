#pragma once

#include <string>
#include <vector>

#include "lrdg/nn/layers.hpp"
#include "lrdg/nn/parameters.hpp"

namespace lrdg::nn {

/// Symmetric encoder-decoder with skip connections between matching stages.
///
/// Encoder: a stride-1 stem followed by `depth` stride-2 convs (channels
/// base * 2^level, capped at the last stage). Decoder: at each level, nearest
/// 2x upsampling, concatenation with the encoder activation of that level and
/// a 3x3 conv. The head is a 1x1 conv added in logit space to the input:
///
///   M(x) = sigmoid(logit(eps + (1 - 2 eps) x) + head(decoder(x)))
///
/// so the output always lies in (0, 1), and a zero head is the identity up to
/// eps.
struct MapperSpec {
  int depth = 3;
  int base_channels = 16;
  int in_channels = 3;
  int image_size = 32;
  bool identity_init = true;

  [[nodiscard]] int channels_at(int level) const {
    return base_channels << std::min(level, depth - 1);
  }
  void validate() const {
    if (depth < 1) throw ConfigError("mapper depth must be >= 1");
    if (base_channels < 1 || in_channels < 1) throw ConfigError("invalid mapper channels");
    if (image_size % (1 << depth) != 0) {
      throw ConfigError("mapper image_size must be divisible by 2^depth");
    }
  }
  friend bool operator==(const MapperSpec&, const MapperSpec&) = default;
};

inline constexpr double kMapperEps = 1e-3;

template <typename Scalar>
class Mapper {
 public:
  struct Tape {
    int batch = 0;
    FeatureMap<Scalar> input;
    std::vector<FeatureMap<Scalar>> enc;      // level 0..depth
    std::vector<FeatureMap<Scalar>> dec_in;   // concatenated decoder inputs, by level
    std::vector<FeatureMap<Scalar>> dec;      // decoder outputs, by level
    Matrix<Scalar> output;
  };

  struct Gradients {
    ParameterSet<Scalar> params;
    Matrix<Scalar> input;
  };

  Mapper() = default;

  Mapper(MapperSpec spec, Rng& rng) : spec_(spec) {
    spec_.validate();
    const double gain = std::sqrt(2.0);
    int c_in = spec_.in_channels;
    for (int l = 0; l <= spec_.depth; ++l) {
      const int c_out = spec_.channels_at(l);
      params_.add("enc" + std::to_string(l) + ".weight", fan_in_normal<Scalar>(c_out, 9 * c_in, gain, rng));
      params_.add("enc" + std::to_string(l) + ".bias", Matrix<Scalar>::Zero(c_out, 1));
      c_in = c_out;
    }
    int c_h = spec_.channels_at(spec_.depth);
    for (int l = spec_.depth - 1; l >= 0; --l) {
      const int c_out = spec_.channels_at(l);
      const int c_cat = c_h + spec_.channels_at(l);
      params_.add("dec" + std::to_string(l) + ".weight", fan_in_normal<Scalar>(c_out, 9 * c_cat, gain, rng));
      params_.add("dec" + std::to_string(l) + ".bias", Matrix<Scalar>::Zero(c_out, 1));
      c_h = c_out;
    }
    if (spec_.identity_init) {
      params_.add("head.weight", Matrix<Scalar>::Zero(spec_.in_channels, c_h));
    } else {
      params_.add("head.weight", fan_in_normal<Scalar>(spec_.in_channels, c_h, 1.0, rng));
    }
    params_.add("head.bias", Matrix<Scalar>::Zero(spec_.in_channels, 1));
  }

  Mapper(MapperSpec spec, ParameterSet<Scalar> params) : spec_(spec), params_(std::move(params)) {
    spec_.validate();
    Rng rng(0);
    Mapper reference(spec_, rng);
    if (!reference.params_.same_layout(params_)) throw ShapeError("mapper parameters do not match the spec");
  }

  [[nodiscard]] const MapperSpec& spec() const { return spec_; }
  [[nodiscard]] const ParameterSet<Scalar>& params() const { return params_; }
  [[nodiscard]] ParameterSet<Scalar>& params() { return params_; }

  Matrix<Scalar> forward(const Matrix<Scalar>& images, Tape* tape = nullptr) const {
    const Eigen::Index hw = static_cast<Eigen::Index>(spec_.image_size) * spec_.image_size;
    if (images.rows() != spec_.in_channels || images.cols() == 0 || images.cols() % hw != 0) {
      throw ShapeError("mapper input shape mismatch");
    }
    const int batch = static_cast<int>(images.cols() / hw);
    const int d = spec_.depth;
    Tape local;
    Tape& t = tape ? *tape : local;
    t.batch = batch;
    t.enc.assign(static_cast<std::size_t>(d + 1), {});
    t.dec_in.assign(static_cast<std::size_t>(d), {});
    t.dec.assign(static_cast<std::size_t>(d), {});

    t.input = FeatureMap<Scalar>{images, batch, spec_.image_size, spec_.image_size};
    for (int l = 0; l <= d; ++l) {
      const auto li = static_cast<std::size_t>(l);
      const FeatureMap<Scalar>& in = l == 0 ? t.input : t.enc[li - 1];
      t.enc[li] = conv2d(in, params_[enc_w(l)], params_[enc_w(l) + 1], ConvGeometry{3, l == 0 ? 1 : 2});
      elu_inplace(t.enc[li].data);
    }
    const FeatureMap<Scalar>* h = &t.enc[static_cast<std::size_t>(d)];
    for (int l = d - 1; l >= 0; --l) {
      const auto li = static_cast<std::size_t>(l);
      t.dec_in[li] = concat_channels(upsample2x(*h), t.enc[li]);
      t.dec[li] = conv2d(t.dec_in[li], params_[dec_w(l)], params_[dec_w(l) + 1], ConvGeometry{3, 1});
      elu_inplace(t.dec[li].data);
      h = &t.dec[li];
    }
    FeatureMap<Scalar> residual = conv2d(*h, params_[head_w()], params_[head_w() + 1], ConvGeometry{1, 1});
    const Scalar eps = static_cast<Scalar>(kMapperEps);
    Matrix<Scalar> out = images.unaryExpr([eps](Scalar v) {
      const Scalar q = eps + (Scalar(1) - Scalar(2) * eps) * v;
      return std::log(q / (Scalar(1) - q));
    });
    out += residual.data;
    out = out.unaryExpr([](Scalar v) { return sigmoid(v); });
    if (tape) t.output = out;
    return out;
  }

  /// `dout` is the gradient with respect to the mapped images.
  Gradients backward(const Tape& t, const Matrix<Scalar>& dout, bool param_grads = true,
                     bool input_grad = false) const {
    const int d = spec_.depth;
    const int size = spec_.image_size;
    Gradients g;
    if (param_grads) g.params = params_.zeros_like();

    Matrix<Scalar> dlogit = dout.array() * t.output.array() * (Scalar(1) - t.output.array());
    if (input_grad) {
      const Scalar eps = static_cast<Scalar>(kMapperEps);
      const Scalar slope = Scalar(1) - Scalar(2) * eps;
      g.input = dlogit.array() * t.input.data.array().unaryExpr([eps, slope](Scalar v) {
        const Scalar q = eps + slope * v;
        return slope / (q * (Scalar(1) - q));
      });
    }

    const FeatureMap<Scalar>& top = t.dec.empty() ? t.enc[0] : t.dec[0];
    ConvGrads<Scalar> hg = conv2d_backward(dlogit, top, params_[head_w()], ConvGeometry{1, 1}, param_grads, true);
    if (param_grads) {
      g.params[head_w()] = std::move(hg.weight);
      g.params[head_w() + 1] = std::move(hg.bias);
    }

    std::vector<Matrix<Scalar>> denc(static_cast<std::size_t>(d + 1));
    Matrix<Scalar> dh = std::move(hg.input.data);
    for (int l = 0; l < d; ++l) {
      const auto li = static_cast<std::size_t>(l);
      elu_backward_inplace(dh, t.dec[li].data);
      const int level_size = size >> l;
      const int c_up = l + 1 < d ? t.dec[li + 1].channels() : t.enc[static_cast<std::size_t>(d)].channels();
      const int c_skip = t.enc[li].channels();
      ConvGrads<Scalar> cg = conv2d_backward(dh, t.dec_in[li], params_[dec_w(l)], ConvGeometry{3, 1}, param_grads, true);
      if (param_grads) {
        g.params[dec_w(l)] = std::move(cg.weight);
        g.params[dec_w(l) + 1] = std::move(cg.bias);
      }
      denc[li] = cg.input.data.bottomRows(c_skip);
      FeatureMap<Scalar> dup{cg.input.data.topRows(c_up), t.batch, level_size, level_size};
      Matrix<Scalar> dnext = upsample2x_backward(dup).data;
      if (l + 1 < d) {
        dh = std::move(dnext);
      } else {
        denc[static_cast<std::size_t>(d)] = std::move(dnext);
      }
    }

    for (int l = d; l >= 0; --l) {
      const auto li = static_cast<std::size_t>(l);
      Matrix<Scalar>& dy = denc[li];
      elu_backward_inplace(dy, t.enc[li].data);
      const bool need_input = l > 0 || input_grad;
      const FeatureMap<Scalar>& in = l == 0 ? t.input : t.enc[li - 1];
      ConvGrads<Scalar> cg = conv2d_backward(dy, in, params_[enc_w(l)], ConvGeometry{3, l == 0 ? 1 : 2}, param_grads,
                                             need_input);
      if (param_grads) {
        g.params[enc_w(l)] = std::move(cg.weight);
        g.params[enc_w(l) + 1] = std::move(cg.bias);
      }
      if (l > 0) {
        denc[li - 1] += cg.input.data;
      } else if (input_grad) {
        g.input += cg.input.data;
      }
    }
    return g;
  }

  template <typename Other>
  [[nodiscard]] Mapper<Other> cast() const {
    return Mapper<Other>(spec_, params_.template cast<Other>());
  }

 private:
  [[nodiscard]] int enc_w(int level) const { return 2 * level; }
  [[nodiscard]] int dec_w(int level) const { return 2 * (spec_.depth + 1) + 2 * (spec_.depth - 1 - level); }
  [[nodiscard]] int head_w() const { return 2 * (2 * spec_.depth + 1); }

  MapperSpec spec_;
  ParameterSet<Scalar> params_;
};

}  // namespace lrdg::nn
