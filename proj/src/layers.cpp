#include "capsamc/layers.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>

namespace capsamc {
namespace {

template <typename T>
using ColMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

template <typename T>
using ConstMap = Eigen::Map<const ColMat<T>>;

template <typename T>
using MutMap = Eigen::Map<ColMat<T>>;

// Upper bound on im2col buffer elements per chunk of samples.
constexpr std::size_t kMaxColumnElements = std::size_t{1} << 19;

struct ConvDims {
  std::size_t batch, in_channels, length, out_channels, kernel, stride, out_length;
  bool batched;
};

template <typename T>
ConvDims conv_dims(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t stride) {
  if (stride == 0) throw ValueError("conv1d stride must be positive");
  if (kernel.rank() != 3) throw ShapeError("conv1d kernel must be C_out x C_in x K, got " + shape_str(kernel.shape()));
  ConvDims d{};
  if (input.rank() == 2) {
    d.batched = false;
    d.batch = 1;
    d.in_channels = input.dim(0);
    d.length = input.dim(1);
  } else if (input.rank() == 3) {
    d.batched = true;
    d.batch = input.dim(0);
    d.in_channels = input.dim(1);
    d.length = input.dim(2);
  } else {
    throw ShapeError("conv1d input must be C x L or B x C x L, got " + shape_str(input.shape()));
  }
  if (kernel.dim(1) != d.in_channels) {
    throw ShapeError("conv1d kernel expects " + std::to_string(kernel.dim(1)) +
                     " input channels but input has " + std::to_string(d.in_channels));
  }
  d.out_channels = kernel.dim(0);
  d.kernel = kernel.dim(2);
  d.stride = stride;
  d.out_length = valid_output_length(d.length, d.kernel, stride);
  return d;
}

std::size_t samples_per_chunk(const ConvDims& d) {
  const std::size_t per_sample = d.in_channels * d.kernel * d.out_length;
  return std::clamp<std::size_t>(kMaxColumnElements / std::max<std::size_t>(per_sample, 1), 1, d.batch);
}

// Column j*L_out + t of `cols` holds the receptive field of output t of
// sample b0 + j: cols(i*K + k, j*L_out + t) = in[b0 + j, i, t*stride + k].
template <typename T>
void im2col(const T* in, const ConvDims& d, std::size_t b0, std::size_t nb, ColMat<T>& cols) {
  const std::size_t ck = d.in_channels * d.kernel;
  cols.resize(static_cast<Eigen::Index>(ck), static_cast<Eigen::Index>(nb * d.out_length));
  for (std::size_t j = 0; j < nb; ++j) {
    for (std::size_t t = 0; t < d.out_length; ++t) {
      T* patch = cols.data() + (j * d.out_length + t) * ck;
      for (std::size_t i = 0; i < d.in_channels; ++i) {
        const T* src = in + ((b0 + j) * d.in_channels + i) * d.length + t * d.stride;
        std::copy(src, src + d.kernel, patch + i * d.kernel);
      }
    }
  }
}

template <typename T>
void col2im_add(const ColMat<T>& cols, const ConvDims& d, std::size_t b0, std::size_t nb, T* out) {
  const std::size_t ck = d.in_channels * d.kernel;
  for (std::size_t j = 0; j < nb; ++j) {
    for (std::size_t t = 0; t < d.out_length; ++t) {
      const T* patch = cols.data() + (j * d.out_length + t) * ck;
      for (std::size_t i = 0; i < d.in_channels; ++i) {
        T* dst = out + ((b0 + j) * d.in_channels + i) * d.length + t * d.stride;
        for (std::size_t k = 0; k < d.kernel; ++k) dst[k] += patch[i * d.kernel + k];
      }
    }
  }
}

// Splits a B x C x L (or B x C) tensor into its batch, channel and length extents.
struct ChannelDims {
  std::size_t batch, channels, length;
};

ChannelDims channel_dims(const Shape& shape, const char* op) {
  if (shape.size() == 2) return {shape[0], shape[1], 1};
  if (shape.size() == 3) return {shape[0], shape[1], shape[2]};
  throw ShapeError(std::string(op) + " expects B x C or B x C x L, got " + shape_str(shape));
}

void check_vector(const Shape& shape, std::size_t n, const char* what) {
  if (shape.size() != 1 || shape[0] != n) {
    throw ShapeError(std::string(what) + " must have shape [" + std::to_string(n) + "], got " +
                     shape_str(shape));
  }
}

struct PoolDims {
  std::size_t rows, length, out_length;
};

PoolDims pool_dims(const Shape& shape, std::size_t window, std::size_t stride) {
  if (window == 0 || stride == 0) throw ValueError("avgpool1d window and stride must be positive");
  if (shape.size() < 2) throw ShapeError("avgpool1d expects C x L or B x C x L, got " + shape_str(shape));
  const std::size_t length = shape.back();
  if (window > length) {
    throw ShapeError("avgpool1d window " + std::to_string(window) + " exceeds length " +
                     std::to_string(length));
  }
  return {shape_size(shape) / length, length, valid_output_length(length, window, stride)};
}

struct FcDims {
  std::size_t batch, in_dim;
  bool batched;
};

template <typename T>
FcDims fc_dims(const Tensor<T>& input, const Tensor<T>& weights) {
  if (weights.rank() != 2) throw ShapeError("fully_connected weights must be D_out x D_in");
  FcDims d{};
  if (input.rank() == 1) {
    d = {1, input.dim(0), false};
  } else if (input.rank() >= 2) {
    d = {input.dim(0), input.size() / input.dim(0), true};
  } else {
    throw ShapeError("fully_connected input must not be empty");
  }
  if (d.in_dim != weights.dim(1)) {
    throw ShapeError("fully_connected input dimension " + std::to_string(d.in_dim) +
                     " does not match weight columns " + std::to_string(weights.dim(1)));
  }
  return d;
}

}  // namespace

std::size_t valid_output_length(std::size_t length, std::size_t window, std::size_t stride) {
  if (stride == 0 || window == 0) throw ValueError("window and stride must be positive");
  if (length < window) {
    throw ShapeError("input length " + std::to_string(length) + " is shorter than window " +
                     std::to_string(window));
  }
  return (length - window) / stride + 1;
}

template <typename T>
Tensor<T> conv1d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                 std::size_t stride) {
  const ConvDims d = conv_dims(input, kernel, stride);
  check_vector(bias.shape(), d.out_channels, "conv1d bias");
  Shape out_shape = d.batched ? Shape{d.batch, d.out_channels, d.out_length}
                              : Shape{d.out_channels, d.out_length};
  Tensor<T> out(out_shape);
  // The row-major C_out x (C_in*K) kernel is the column-major (C_in*K) x C_out matrix W^T.
  const auto wt = ConstMap<T>(kernel.ptr(), static_cast<Eigen::Index>(d.in_channels * d.kernel),
                              static_cast<Eigen::Index>(d.out_channels));
  ColMat<T> cols;
  ColMat<T> y;
  const std::size_t chunk = samples_per_chunk(d);
  for (std::size_t b0 = 0; b0 < d.batch; b0 += chunk) {
    const std::size_t nb = std::min(chunk, d.batch - b0);
    im2col(input.ptr(), d, b0, nb, cols);
    y.noalias() = wt.transpose() * cols;
    for (std::size_t j = 0; j < nb; ++j) {
      for (std::size_t t = 0; t < d.out_length; ++t) {
        const T* src = y.data() + (j * d.out_length + t) * d.out_channels;
        T* dst = out.ptr() + (b0 + j) * d.out_channels * d.out_length + t;
        for (std::size_t c = 0; c < d.out_channels; ++c) dst[c * d.out_length] = src[c] + bias[c];
      }
    }
  }
  return out;
}

template <typename T>
LayerGrad<T> conv1d_backward(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t stride,
                             const Tensor<T>& grad_output) {
  const ConvDims d = conv_dims(input, kernel, stride);
  const Shape expected = d.batched ? Shape{d.batch, d.out_channels, d.out_length}
                                   : Shape{d.out_channels, d.out_length};
  if (grad_output.shape() != expected) {
    throw ShapeError("conv1d upstream gradient has shape " + shape_str(grad_output.shape()) +
                     ", expected " + shape_str(expected));
  }
  LayerGrad<T> g;
  g.input = Tensor<T>(input.shape());
  Tensor<T> dkernel(kernel.shape());
  Tensor<T> dbias(Shape{d.out_channels});
  const auto rows = static_cast<Eigen::Index>(d.out_channels);
  const auto ck = static_cast<Eigen::Index>(d.in_channels * d.kernel);
  const auto wt = ConstMap<T>(kernel.ptr(), ck, rows);
  MutMap<T> dwt(dkernel.ptr(), ck, rows);
  ColMat<T> cols;
  ColMat<T> dy;
  ColMat<T> dcols;
  const std::size_t chunk = samples_per_chunk(d);
  for (std::size_t b0 = 0; b0 < d.batch; b0 += chunk) {
    const std::size_t nb = std::min(chunk, d.batch - b0);
    dy.resize(rows, static_cast<Eigen::Index>(nb * d.out_length));
    for (std::size_t j = 0; j < nb; ++j) {
      for (std::size_t t = 0; t < d.out_length; ++t) {
        const T* src = grad_output.ptr() + (b0 + j) * d.out_channels * d.out_length + t;
        T* dst = dy.data() + (j * d.out_length + t) * d.out_channels;
        for (std::size_t c = 0; c < d.out_channels; ++c) dst[c] = src[c * d.out_length];
      }
    }
    im2col(input.ptr(), d, b0, nb, cols);
    dwt.noalias() += cols * dy.transpose();
    for (std::size_t c = 0; c < d.out_channels; ++c) {
      const T* src = grad_output.ptr() + c * d.out_length;
      T acc = 0;
      for (std::size_t j = 0; j < nb; ++j) {
        const T* lane = src + (b0 + j) * d.out_channels * d.out_length;
        for (std::size_t t = 0; t < d.out_length; ++t) acc += lane[t];
      }
      dbias[c] += acc;
    }
    dcols.noalias() = wt * dy;
    col2im_add(dcols, d, b0, nb, g.input.ptr());
  }
  g.params.emplace("weight", std::move(dkernel));
  g.params.emplace("bias", std::move(dbias));
  return g;
}

template <typename T>
Tensor<T> batchnorm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                    Mode mode, Tensor<T>& running_mean, Tensor<T>& running_var,
                    BatchNormCache<T>* cache, const BatchNormOptions& options) {
  if (input.empty()) throw ValueError("batchnorm received an empty batch");
  const ChannelDims d = channel_dims(input.shape(), "batchnorm");
  check_vector(gamma.shape(), d.channels, "batchnorm gamma");
  check_vector(beta.shape(), d.channels, "batchnorm beta");
  check_vector(running_mean.shape(), d.channels, "batchnorm running mean");
  check_vector(running_var.shape(), d.channels, "batchnorm running variance");
  const std::size_t count = d.batch * d.length;
  if (mode == Mode::kTrain && count < 2) {
    throw ValueError("batchnorm train mode needs at least two values per channel, got " +
                     std::to_string(count));
  }
  Tensor<T> out(input.shape());
  Tensor<T> normalized(input.shape());
  std::vector<double> inv_std(d.channels);
  for (std::size_t c = 0; c < d.channels; ++c) {
    double mean = 0.0;
    double var = 0.0;
    if (mode == Mode::kTrain) {
      for (std::size_t b = 0; b < d.batch; ++b) {
        const T* lane = input.ptr() + (b * d.channels + c) * d.length;
        for (std::size_t t = 0; t < d.length; ++t) mean += lane[t];
      }
      mean /= static_cast<double>(count);
      for (std::size_t b = 0; b < d.batch; ++b) {
        const T* lane = input.ptr() + (b * d.channels + c) * d.length;
        for (std::size_t t = 0; t < d.length; ++t) {
          const double dev = lane[t] - mean;
          var += dev * dev;
        }
      }
      var /= static_cast<double>(count);
      const double unbiased = var * static_cast<double>(count) / static_cast<double>(count - 1);
      running_mean[c] = static_cast<T>(options.momentum * running_mean[c] + (1.0 - options.momentum) * mean);
      running_var[c] = static_cast<T>(options.momentum * running_var[c] + (1.0 - options.momentum) * unbiased);
    } else {
      mean = running_mean[c];
      var = running_var[c];
    }
    inv_std[c] = 1.0 / std::sqrt(var + options.epsilon);
    for (std::size_t b = 0; b < d.batch; ++b) {
      const std::size_t base = (b * d.channels + c) * d.length;
      for (std::size_t t = 0; t < d.length; ++t) {
        const T xhat = static_cast<T>((input[base + t] - mean) * inv_std[c]);
        normalized[base + t] = xhat;
        out[base + t] = gamma[c] * xhat + beta[c];
      }
    }
  }
  if (cache != nullptr) {
    cache->mode = mode;
    cache->shape = input.shape();
    cache->normalized = std::move(normalized);
    cache->inv_std = std::move(inv_std);
  }
  return out;
}

template <typename T>
LayerGrad<T> batchnorm_backward(const BatchNormCache<T>& cache, const Tensor<T>& gamma,
                                const Tensor<T>& grad_output) {
  if (grad_output.shape() != cache.shape) {
    throw ShapeError("batchnorm upstream gradient shape " + shape_str(grad_output.shape()) +
                     " does not match cached input " + shape_str(cache.shape));
  }
  const ChannelDims d = channel_dims(cache.shape, "batchnorm_backward");
  check_vector(gamma.shape(), d.channels, "batchnorm gamma");
  const double count = static_cast<double>(d.batch * d.length);
  LayerGrad<T> g;
  g.input = Tensor<T>(cache.shape);
  Tensor<T> dgamma(Shape{d.channels});
  Tensor<T> dbeta(Shape{d.channels});
  for (std::size_t c = 0; c < d.channels; ++c) {
    double sum_dy = 0.0;
    double sum_dy_xhat = 0.0;
    for (std::size_t b = 0; b < d.batch; ++b) {
      const std::size_t base = (b * d.channels + c) * d.length;
      for (std::size_t t = 0; t < d.length; ++t) {
        sum_dy += grad_output[base + t];
        sum_dy_xhat += static_cast<double>(grad_output[base + t]) * cache.normalized[base + t];
      }
    }
    dgamma[c] = static_cast<T>(sum_dy_xhat);
    dbeta[c] = static_cast<T>(sum_dy);
    const double scale = gamma[c] * cache.inv_std[c];
    for (std::size_t b = 0; b < d.batch; ++b) {
      const std::size_t base = (b * d.channels + c) * d.length;
      for (std::size_t t = 0; t < d.length; ++t) {
        if (cache.mode == Mode::kTrain) {
          g.input[base + t] = static_cast<T>(
              scale * (grad_output[base + t] - sum_dy / count -
                       cache.normalized[base + t] * sum_dy_xhat / count));
        } else {
          g.input[base + t] = static_cast<T>(scale * grad_output[base + t]);
        }
      }
    }
  }
  g.params.emplace("gamma", std::move(dgamma));
  g.params.emplace("beta", std::move(dbeta));
  return g;
}

template <typename T>
Tensor<T> activation(const Tensor<T>& input, Activation kind) {
  Tensor<T> out(input.shape());
  if (kind == Activation::kTanh) {
    const auto n = static_cast<Eigen::Index>(input.size());
    Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>(out.ptr(), n) =
        Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>(input.ptr(), n).tanh();
  } else {
    for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] > T(0) ? input[i] : T(0);
  }
  return out;
}

template <typename T>
Tensor<T> activation_backward(Activation kind, const Tensor<T>& input, const Tensor<T>& output,
                              const Tensor<T>& grad_output) {
  if (grad_output.shape() != input.shape() || output.shape() != input.shape()) {
    throw ShapeError("activation_backward shape mismatch");
  }
  Tensor<T> g(input.shape());
  if (kind == Activation::kTanh) {
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = grad_output[i] * (T(1) - output[i] * output[i]);
  } else {
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = input[i] > T(0) ? grad_output[i] : T(0);
  }
  return g;
}

template <typename T>
Tensor<T> avgpool1d(const Tensor<T>& input, std::size_t window, std::size_t stride) {
  const PoolDims d = pool_dims(input.shape(), window, stride);
  Shape out_shape = input.shape();
  out_shape.back() = d.out_length;
  Tensor<T> out(out_shape);
  const T inv = T(1) / static_cast<T>(window);
  for (std::size_t r = 0; r < d.rows; ++r) {
    const T* lane = input.ptr() + r * d.length;
    T* dst = out.ptr() + r * d.out_length;
    for (std::size_t t = 0; t < d.out_length; ++t) {
      T acc = 0;
      for (std::size_t k = 0; k < window; ++k) acc += lane[t * stride + k];
      dst[t] = acc * inv;
    }
  }
  return out;
}

template <typename T>
Tensor<T> avgpool1d_backward(const Shape& input_shape, std::size_t window, std::size_t stride,
                             const Tensor<T>& grad_output) {
  const PoolDims d = pool_dims(input_shape, window, stride);
  Shape out_shape = input_shape;
  out_shape.back() = d.out_length;
  if (grad_output.shape() != out_shape) throw ShapeError("avgpool1d upstream gradient shape mismatch");
  Tensor<T> g(input_shape);
  const T inv = T(1) / static_cast<T>(window);
  for (std::size_t r = 0; r < d.rows; ++r) {
    T* lane = g.ptr() + r * d.length;
    const T* src = grad_output.ptr() + r * d.out_length;
    for (std::size_t t = 0; t < d.out_length; ++t) {
      const T share = src[t] * inv;
      for (std::size_t k = 0; k < window; ++k) lane[t * stride + k] += share;
    }
  }
  return g;
}

template <typename T>
Tensor<T> fully_connected(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias) {
  const FcDims d = fc_dims(input, weights);
  const std::size_t out_dim = weights.dim(0);
  check_vector(bias.shape(), out_dim, "fully_connected bias");
  Tensor<T> out(d.batched ? Shape{d.batch, out_dim} : Shape{out_dim});
  // Row-major B x D matrices are viewed as column-major D x B.
  const auto x = ConstMap<T>(input.ptr(), static_cast<Eigen::Index>(d.in_dim), static_cast<Eigen::Index>(d.batch));
  const auto w = ConstMap<T>(weights.ptr(), static_cast<Eigen::Index>(d.in_dim), static_cast<Eigen::Index>(out_dim));
  MutMap<T>(out.ptr(), static_cast<Eigen::Index>(out_dim), static_cast<Eigen::Index>(d.batch)).noalias() =
      w.transpose() * x;
  for (std::size_t b = 0; b < d.batch; ++b) {
    for (std::size_t o = 0; o < out_dim; ++o) out[b * out_dim + o] += bias[o];
  }
  return out;
}

template <typename T>
LayerGrad<T> fully_connected_backward(const Tensor<T>& input, const Tensor<T>& weights,
                                      const Tensor<T>& grad_output) {
  const FcDims d = fc_dims(input, weights);
  const std::size_t out_dim = weights.dim(0);
  if (grad_output.size() != d.batch * out_dim) {
    throw ShapeError("fully_connected upstream gradient shape " + shape_str(grad_output.shape()) +
                     " does not match output");
  }
  const auto cols = static_cast<Eigen::Index>(d.batch);
  const auto in = static_cast<Eigen::Index>(d.in_dim);
  const auto outs = static_cast<Eigen::Index>(out_dim);
  const auto x = ConstMap<T>(input.ptr(), in, cols);
  const auto w = ConstMap<T>(weights.ptr(), in, outs);
  const auto dy = ConstMap<T>(grad_output.ptr(), outs, cols);
  LayerGrad<T> g;
  g.input = Tensor<T>(input.shape());
  Tensor<T> dw(weights.shape());
  Tensor<T> db(Shape{out_dim});
  MutMap<T>(g.input.ptr(), in, cols).noalias() = w * dy;
  MutMap<T>(dw.ptr(), in, outs).noalias() = x * dy.transpose();
  for (std::size_t b = 0; b < d.batch; ++b) {
    for (std::size_t o = 0; o < out_dim; ++o) db[o] += grad_output[b * out_dim + o];
  }
  g.params.emplace("weight", std::move(dw));
  g.params.emplace("bias", std::move(db));
  return g;
}

template <typename T>
Tensor<T> depth_concat(std::span<const Tensor<T>> inputs, std::size_t expected_count) {
  if (inputs.size() != expected_count) {
    throw ShapeError("depth_concat expects " + std::to_string(expected_count) + " branch outputs, got " +
                     std::to_string(inputs.size()));
  }
  if (inputs.empty()) throw ShapeError("depth_concat needs at least one input");
  const std::size_t batch = inputs[0].dim(0);
  for (const auto& in : inputs) {
    const bool ok = (in.rank() == 1 && in.dim(0) == batch) ||
                    (in.rank() == 2 && in.dim(0) == batch && in.dim(1) == 1);
    if (!ok) throw ShapeError("depth_concat inputs must all be [B] or [B, 1], got " + shape_str(in.shape()));
  }
  const std::size_t n = inputs.size();
  Tensor<T> out(Shape{batch, n});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t b = 0; b < batch; ++b) out[b * n + i] = inputs[i][b];
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>> depth_concat_backward(const Tensor<T>& grad_output) {
  if (grad_output.rank() != 2) throw ShapeError("depth_concat gradient must be B x n");
  const std::size_t batch = grad_output.dim(0);
  const std::size_t n = grad_output.dim(1);
  std::vector<Tensor<T>> grads;
  grads.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Tensor<T> g(Shape{batch, 1});
    for (std::size_t b = 0; b < batch; ++b) g[b] = grad_output[b * n + i];
    grads.push_back(std::move(g));
  }
  return grads;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
  if (logits.rank() != 1 && logits.rank() != 2) throw ShapeError("softmax expects [n] or [B, n]");
  require_finite(logits, "softmax logits");
  const std::size_t n = logits.shape().back();
  const std::size_t rows = logits.size() / n;
  Tensor<T> out(logits.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* z = logits.ptr() + r * n;
    T* p = out.ptr() + r * n;
    const T peak = *std::max_element(z, z + n);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += std::exp(static_cast<double>(z[i] - peak));
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = static_cast<T>(std::exp(static_cast<double>(z[i] - peak)) / total);
    }
  }
  return out;
}

template <typename T>
double cross_entropy(const Tensor<T>& probabilities, std::size_t label) {
  if (probabilities.rank() != 1) throw ShapeError("cross_entropy expects a probability vector");
  if (label >= probabilities.size()) {
    throw ValueError("label " + std::to_string(label) + " outside [0, " +
                     std::to_string(probabilities.size()) + ")");
  }
  return -std::log(std::max(static_cast<double>(probabilities[label]), 1e-12));
}

template <typename T>
double cross_entropy(const Tensor<T>& probabilities, std::span<const std::size_t> labels) {
  if (probabilities.rank() != 2 || probabilities.dim(0) != labels.size()) {
    throw ShapeError("cross_entropy expects B x n probabilities and B labels");
  }
  const std::size_t n = probabilities.dim(1);
  double total = 0.0;
  for (std::size_t b = 0; b < labels.size(); ++b) {
    if (labels[b] >= n) throw ValueError("label " + std::to_string(labels[b]) + " outside [0, " + std::to_string(n) + ")");
    total += -std::log(std::max(static_cast<double>(probabilities[b * n + labels[b]]), 1e-12));
  }
  return total / static_cast<double>(labels.size());
}

template <typename T>
Tensor<T> softmax_cross_entropy_backward(const Tensor<T>& probabilities,
                                         std::span<const std::size_t> labels) {
  if (probabilities.rank() != 2 || probabilities.dim(0) != labels.size()) {
    throw ShapeError("softmax_cross_entropy_backward expects B x n probabilities and B labels");
  }
  const std::size_t n = probabilities.dim(1);
  const T inv_batch = T(1) / static_cast<T>(labels.size());
  Tensor<T> g(probabilities.shape());
  for (std::size_t b = 0; b < labels.size(); ++b) {
    if (labels[b] >= n) throw ValueError("label " + std::to_string(labels[b]) + " outside [0, " + std::to_string(n) + ")");
    for (std::size_t i = 0; i < n; ++i) {
      const T onehot = i == labels[b] ? T(1) : T(0);
      g[b * n + i] = (probabilities[b * n + i] - onehot) * inv_batch;
    }
  }
  return g;
}

#define CAPSAMC_INSTANTIATE_LAYERS(T)                                                             \
  template Tensor<T> conv1d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t);  \
  template LayerGrad<T> conv1d_backward(const Tensor<T>&, const Tensor<T>&, std::size_t,         \
                                        const Tensor<T>&);                                       \
  template Tensor<T> batchnorm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Mode,       \
                               Tensor<T>&, Tensor<T>&, BatchNormCache<T>*,                        \
                               const BatchNormOptions&);                                          \
  template LayerGrad<T> batchnorm_backward(const BatchNormCache<T>&, const Tensor<T>&,           \
                                           const Tensor<T>&);                                    \
  template Tensor<T> activation(const Tensor<T>&, Activation);                                   \
  template Tensor<T> activation_backward(Activation, const Tensor<T>&, const Tensor<T>&,         \
                                         const Tensor<T>&);                                      \
  template Tensor<T> avgpool1d(const Tensor<T>&, std::size_t, std::size_t);                      \
  template Tensor<T> avgpool1d_backward(const Shape&, std::size_t, std::size_t,                  \
                                        const Tensor<T>&);                                       \
  template Tensor<T> fully_connected(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);      \
  template LayerGrad<T> fully_connected_backward(const Tensor<T>&, const Tensor<T>&,             \
                                                 const Tensor<T>&);                              \
  template Tensor<T> depth_concat(std::span<const Tensor<T>>, std::size_t);                      \
  template std::vector<Tensor<T>> depth_concat_backward(const Tensor<T>&);                       \
  template Tensor<T> softmax(const Tensor<T>&);                                                  \
  template double cross_entropy(const Tensor<T>&, std::size_t);                                  \
  template double cross_entropy(const Tensor<T>&, std::span<const std::size_t>);                 \
  template Tensor<T> softmax_cross_entropy_backward(const Tensor<T>&,                            \
                                                    std::span<const std::size_t>);

CAPSAMC_INSTANTIATE_LAYERS(float)
CAPSAMC_INSTANTIATE_LAYERS(double)

#undef CAPSAMC_INSTANTIATE_LAYERS

}  // namespace capsamc
