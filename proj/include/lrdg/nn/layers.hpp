#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>

#include "lrdg/common.hpp"

namespace lrdg::nn {

/// A batch of feature maps. `data` is (channels x batch*height*width); the
/// column index is b*H*W + y*W + x, so each pixel's channels are contiguous.
template <typename Scalar>
struct FeatureMap {
  Matrix<Scalar> data;
  int batch = 0;
  int height = 0;
  int width = 0;

  [[nodiscard]] int channels() const { return static_cast<int>(data.rows()); }
  [[nodiscard]] int pixels() const { return height * width; }
};

struct ConvGeometry {
  int kernel = 3;
  int stride = 1;
  [[nodiscard]] int pad() const { return kernel / 2; }
  [[nodiscard]] int out_size(int in) const { return (in + 2 * pad() - kernel) / stride + 1; }
};

/// Unfolds images [first, first+count) of `x` into a (kernel*kernel*C_in x
/// count*Ho*Wo) patch matrix whose row order is (tap, channel), matching the
/// weight layout (C_out x kernel*kernel*C_in).
template <typename Scalar>
void im2col(const FeatureMap<Scalar>& x, ConvGeometry g, int first, int count, Matrix<Scalar>& cols) {
  const int c_in = x.channels();
  const int ho = g.out_size(x.height);
  const int wo = g.out_size(x.width);
  const int taps = g.kernel * g.kernel;
  cols.setZero(static_cast<Eigen::Index>(taps) * c_in, static_cast<Eigen::Index>(count) * ho * wo);
  const Scalar* src = x.data.data();
  Scalar* dst = cols.data();
  const Eigen::Index col_stride = cols.rows();
  for (int b = 0; b < count; ++b) {
    const Eigen::Index image = static_cast<Eigen::Index>(first + b) * x.height * x.width;
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        Scalar* column = dst + (static_cast<Eigen::Index>(b) * ho * wo + oy * wo + ox) * col_stride;
        for (int ky = 0; ky < g.kernel; ++ky) {
          const int iy = oy * g.stride - g.pad() + ky;
          if (iy < 0 || iy >= x.height) continue;
          for (int kx = 0; kx < g.kernel; ++kx) {
            const int ix = ox * g.stride - g.pad() + kx;
            if (ix < 0 || ix >= x.width) continue;
            const Scalar* pixel = src + (image + iy * x.width + ix) * c_in;
            std::memcpy(column + (ky * g.kernel + kx) * c_in, pixel,
                        sizeof(Scalar) * static_cast<std::size_t>(c_in));
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: accumulates patch gradients of images [first,
/// first+count) onto `dx`.
template <typename Scalar>
void col2im_add(const Matrix<Scalar>& dcols, ConvGeometry g, int first, int count, FeatureMap<Scalar>& dx) {
  const int channels = dx.channels();
  const int ho = g.out_size(dx.height);
  const int wo = g.out_size(dx.width);
  Scalar* dst = dx.data.data();
  const Scalar* src = dcols.data();
  const Eigen::Index col_stride = dcols.rows();
  for (int b = 0; b < count; ++b) {
    const Eigen::Index image = static_cast<Eigen::Index>(first + b) * dx.height * dx.width;
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        const Scalar* column = src + (static_cast<Eigen::Index>(b) * ho * wo + oy * wo + ox) * col_stride;
        for (int ky = 0; ky < g.kernel; ++ky) {
          const int iy = oy * g.stride - g.pad() + ky;
          if (iy < 0 || iy >= dx.height) continue;
          for (int kx = 0; kx < g.kernel; ++kx) {
            const int ix = ox * g.stride - g.pad() + kx;
            if (ix < 0 || ix >= dx.width) continue;
            Scalar* pixel = dst + (image + iy * dx.width + ix) * channels;
            const Scalar* patch = column + (ky * g.kernel + kx) * channels;
            for (int c = 0; c < channels; ++c) pixel[c] += patch[c];
          }
        }
      }
    }
  }
}

/// Images per im2col chunk, sized so a patch matrix stays cache resident.
inline int conv_chunk(int patch_rows, int out_pixels, int batch) {
  constexpr long kTargetFloats = 1L << 17;
  const long per_image = static_cast<long>(patch_rows) * out_pixels;
  return static_cast<int>(std::clamp<long>(kTargetFloats / std::max(1L, per_image), 1L, batch));
}

/// 2-D convolution with zero padding kernel/2 and weight (C_out x kernel*kernel*C_in).
template <typename Scalar>
FeatureMap<Scalar> conv2d(const FeatureMap<Scalar>& x, const Matrix<Scalar>& weight,
                          const Matrix<Scalar>& bias, ConvGeometry g) {
  const Eigen::Index patch_rows = static_cast<Eigen::Index>(g.kernel) * g.kernel * x.channels();
  if (weight.cols() != patch_rows) throw ShapeError("conv2d: weight does not match input channels");
  FeatureMap<Scalar> y;
  y.batch = x.batch;
  y.height = g.out_size(x.height);
  y.width = g.out_size(x.width);
  const int out_px = y.height * y.width;
  y.data.resize(weight.rows(), static_cast<Eigen::Index>(x.batch) * out_px);
  const int chunk = conv_chunk(static_cast<int>(patch_rows), out_px, x.batch);
  Matrix<Scalar> cols;
  for (int first = 0; first < x.batch; first += chunk) {
    const int count = std::min(chunk, x.batch - first);
    im2col(x, g, first, count, cols);
    y.data.middleCols(static_cast<Eigen::Index>(first) * out_px, cols.cols()).noalias() = weight * cols;
  }
  y.data.colwise() += bias.col(0);
  return y;
}

template <typename Scalar>
struct ConvGrads {
  Matrix<Scalar> weight;
  Matrix<Scalar> bias;
  FeatureMap<Scalar> input;
};

/// Backward pass of conv2d; `x` is the forward input.
template <typename Scalar>
ConvGrads<Scalar> conv2d_backward(const Matrix<Scalar>& dy, const FeatureMap<Scalar>& x,
                                  const Matrix<Scalar>& weight, ConvGeometry g, bool param_grads,
                                  bool input_grad) {
  ConvGrads<Scalar> out;
  const int out_px = g.out_size(x.height) * g.out_size(x.width);
  const Eigen::Index patch_rows = weight.cols();
  if (param_grads) {
    out.weight.setZero(weight.rows(), weight.cols());
    out.bias = dy.rowwise().sum();
  }
  if (input_grad) {
    out.input = FeatureMap<Scalar>{Matrix<Scalar>::Zero(x.data.rows(), x.data.cols()), x.batch, x.height, x.width};
  }
  if (!param_grads && !input_grad) return out;
  const int chunk = conv_chunk(static_cast<int>(patch_rows), out_px, x.batch);
  Matrix<Scalar> cols;
  Matrix<Scalar> dcols;
  for (int first = 0; first < x.batch; first += chunk) {
    const int count = std::min(chunk, x.batch - first);
    const auto dy_chunk = dy.middleCols(static_cast<Eigen::Index>(first) * out_px,
                                        static_cast<Eigen::Index>(count) * out_px);
    if (param_grads) {
      im2col(x, g, first, count, cols);
      out.weight.noalias() += dy_chunk * cols.transpose();
    }
    if (input_grad) {
      dcols.noalias() = weight.transpose() * dy_chunk;
      col2im_add(dcols, g, first, count, out.input);
    }
  }
  return out;
}

/// ELU with alpha = 1; its derivative is continuous at zero, which keeps
/// finite-difference checks free of kink artifacts.
template <typename Scalar>
void elu_inplace(Matrix<Scalar>& x) {
  x = x.unaryExpr([](Scalar v) { return v > Scalar(0) ? v : std::expm1(v); });
}

/// Multiplies `grad` by the ELU derivative, expressed through the ELU output.
template <typename Scalar>
void elu_backward_inplace(Matrix<Scalar>& grad, const Matrix<Scalar>& output) {
  grad.array() *= output.array().unaryExpr([](Scalar y) { return y > Scalar(0) ? Scalar(1) : y + Scalar(1); });
}

template <typename Scalar>
FeatureMap<Scalar> upsample2x(const FeatureMap<Scalar>& x) {
  FeatureMap<Scalar> y;
  y.batch = x.batch;
  y.height = x.height * 2;
  y.width = x.width * 2;
  y.data.resize(x.data.rows(), static_cast<Eigen::Index>(y.batch) * y.height * y.width);
  for (int b = 0; b < x.batch; ++b) {
    for (int oy = 0; oy < y.height; ++oy) {
      for (int ox = 0; ox < y.width; ++ox) {
        y.data.col(static_cast<Eigen::Index>(b) * y.height * y.width + oy * y.width + ox) =
            x.data.col(static_cast<Eigen::Index>(b) * x.height * x.width + (oy / 2) * x.width + ox / 2);
      }
    }
  }
  return y;
}

template <typename Scalar>
FeatureMap<Scalar> upsample2x_backward(const FeatureMap<Scalar>& dy) {
  FeatureMap<Scalar> dx;
  dx.batch = dy.batch;
  dx.height = dy.height / 2;
  dx.width = dy.width / 2;
  dx.data = Matrix<Scalar>::Zero(dy.data.rows(), static_cast<Eigen::Index>(dx.batch) * dx.height * dx.width);
  for (int b = 0; b < dy.batch; ++b) {
    for (int oy = 0; oy < dy.height; ++oy) {
      for (int ox = 0; ox < dy.width; ++ox) {
        dx.data.col(static_cast<Eigen::Index>(b) * dx.height * dx.width + (oy / 2) * dx.width + ox / 2) +=
            dy.data.col(static_cast<Eigen::Index>(b) * dy.height * dy.width + oy * dy.width + ox);
      }
    }
  }
  return dx;
}

template <typename Scalar>
FeatureMap<Scalar> concat_channels(const FeatureMap<Scalar>& a, const FeatureMap<Scalar>& b) {
  if (a.batch != b.batch || a.height != b.height || a.width != b.width) {
    throw ShapeError("concat_channels: spatial shapes differ");
  }
  FeatureMap<Scalar> y{Matrix<Scalar>(a.data.rows() + b.data.rows(), a.data.cols()), a.batch, a.height, a.width};
  y.data.topRows(a.data.rows()) = a.data;
  y.data.bottomRows(b.data.rows()) = b.data;
  return y;
}

/// Global average pool: returns (channels x batch).
template <typename Scalar>
Matrix<Scalar> global_average_pool(const FeatureMap<Scalar>& x) {
  const int hw = x.pixels();
  Matrix<Scalar> out(x.data.rows(), x.batch);
  for (int b = 0; b < x.batch; ++b) {
    out.col(b) = x.data.middleCols(static_cast<Eigen::Index>(b) * hw, hw).rowwise().mean();
  }
  return out;
}

template <typename Scalar>
FeatureMap<Scalar> global_average_pool_backward(const Matrix<Scalar>& dpooled, int batch, int height,
                                                int width) {
  const int hw = height * width;
  FeatureMap<Scalar> dx{Matrix<Scalar>(dpooled.rows(), static_cast<Eigen::Index>(batch) * hw), batch, height, width};
  for (int b = 0; b < batch; ++b) {
    dx.data.middleCols(static_cast<Eigen::Index>(b) * hw, hw).colwise() = dpooled.col(b) / Scalar(hw);
  }
  return dx;
}

template <typename Scalar>
Scalar sigmoid(Scalar v) {
  return Scalar(1) / (Scalar(1) + std::exp(-v));
}

}  // namespace lrdg::nn
