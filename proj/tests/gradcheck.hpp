#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "lrdg/common.hpp"

namespace lrdg::test {

/// Central differences of a scalar function of a matrix.
inline Matrix<double> numeric_gradient(const std::function<double(const Matrix<double>&)>& f, Matrix<double> x,
                                       double h = 1e-6) {
  Matrix<double> g(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double saved = x.data()[i];
    x.data()[i] = saved + h;
    const double up = f(x);
    x.data()[i] = saved - h;
    const double down = f(x);
    x.data()[i] = saved;
    g.data()[i] = (up - down) / (2 * h);
  }
  return g;
}

/// |a - b| / max(|a|, |b|) in the Frobenius norm; 0 when both vanish.
inline double relative_error(const Matrix<double>& a, const Matrix<double>& b) {
  const double scale = std::max(a.norm(), b.norm());
  if (scale == 0.0) return 0.0;
  return (a - b).norm() / scale;
}

}  // namespace lrdg::test
