#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <unistd.h>

#include "capsamc/rng.hpp"
#include "capsamc/tensor.hpp"

namespace testutil {

using capsamc::Shape;
using capsamc::Tensor;

template <typename T = double>
Tensor<T> random_tensor(const Shape& shape, capsamc::Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

// Fourth-order central-difference gradient of f at x, perturbing x in
// place and restoring it. Truncation error is O(h^4), so h can stay large
// enough that cancellation does not dominate.
inline Tensor<double> numeric_gradient(const std::function<double()>& f, Tensor<double>& x, double h = 1e-4) {
  Tensor<double> g(x.shape());
  auto at = [&](std::size_t i, double v) {
    x[i] = v;
    return f();
  };
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    const double d1 = at(i, keep + h) - at(i, keep - h);
    const double d2 = at(i, keep + 2 * h) - at(i, keep - 2 * h);
    x[i] = keep;
    g[i] = (8.0 * d1 - d2) / (12.0 * h);
  }
  return g;
}

// Largest elementwise relative error, with entries measured against
// max(|reference|, floor * max|reference|) so that components that are
// numerically zero do not dominate. A positive `scale` replaces the
// tensor's own max|reference|, e.g. with a model-wide gradient magnitude.
template <typename T>
double max_relative_error(const Tensor<T>& analytic, const Tensor<double>& reference, double floor = 1e-3,
                          double scale = 0.0) {
  if (scale <= 0.0)
    for (std::size_t i = 0; i < reference.size(); ++i) scale = std::max(scale, std::abs(reference[i]));
  const double denom_floor = std::max(scale * floor, 1e-300);
  double worst = 0.0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    const double a = static_cast<double>(analytic[i]);
    const double err = std::abs(a - reference[i]) / std::max(std::abs(reference[i]), denom_floor);
    worst = std::max(worst, err);
  }
  return worst;
}

// Weighted sum <out, w>; a generic scalar loss for gradient checks.
template <typename T>
double project(const Tensor<T>& out, const Tensor<double>& w) {
  double s = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) s += static_cast<double>(out[i]) * w[i];
  return s;
}

// Naive valid strided cross-correlation, B x Cin x L input.
inline Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& k, const Tensor<double>& b,
                                 std::size_t stride) {
  const std::size_t batch = x.dim(0), cin = x.dim(1), len = x.dim(2);
  const std::size_t cout = k.dim(0), kw = k.dim(2);
  const std::size_t lout = (len - kw) / stride + 1;
  Tensor<double> y(Shape{batch, cout, lout});
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t c = 0; c < cout; ++c)
      for (std::size_t t = 0; t < lout; ++t) {
        double s = b[c];
        for (std::size_t i = 0; i < cin; ++i)
          for (std::size_t j = 0; j < kw; ++j) s += x.at(n, i, t * stride + j) * k.at(c, i, j);
        y.at(n, c, t) = s;
      }
  return y;
}

// Fresh scratch directory under the build tree's temp area.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("capsamc_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testutil
