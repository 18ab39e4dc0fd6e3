#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "capsamc/tensor.hpp"

namespace capsamc {

enum class Mode { kTrain, kInference };

enum class Activation { kTanh, kRelu };

/// Reverse-pass result of a layer: gradient w.r.t. its input plus one entry
/// per learnable parameter, keyed by parameter name ("weight", "bias",
/// "gamma", "beta").
template <typename T>
struct LayerGrad {
  Tensor<T> input;
  std::map<std::string, Tensor<T>> params;
};

/// floor((length - window) / stride) + 1; throws ShapeError when the window
/// does not fit.
std::size_t valid_output_length(std::size_t length, std::size_t window, std::size_t stride);

// Convolution ---------------------------------------------------------------
//
// Valid (unpadded) strided 1-D cross-correlation:
//   out[b, c, t] = bias[c] + sum_{i,k} in[b, i, t*stride + k] * kernel[c, i, k]
// `input` is C_in x L or B x C_in x L; the output has the same rank.
// Samples past the last full window are dropped.

template <typename T>
Tensor<T> conv1d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                 std::size_t stride);

template <typename T>
LayerGrad<T> conv1d_backward(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t stride,
                             const Tensor<T>& grad_output);

// Batch normalization -------------------------------------------------------

struct BatchNormOptions {
  double epsilon = 1e-5;
  /// Weight kept by the running statistics on each train-mode update.
  double momentum = 0.9;
};

template <typename T>
struct BatchNormCache {
  Mode mode = Mode::kTrain;
  Shape shape;
  Tensor<T> normalized;
  std::vector<double> inv_std;
};

/// Per-channel normalization of a B x C or B x C x L tensor. Train mode uses
/// batch statistics over (B, L) and folds them into the running statistics;
/// inference mode uses the running statistics unchanged.
template <typename T>
Tensor<T> batchnorm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                    Mode mode, Tensor<T>& running_mean, Tensor<T>& running_var,
                    BatchNormCache<T>* cache = nullptr, const BatchNormOptions& options = {});

template <typename T>
LayerGrad<T> batchnorm_backward(const BatchNormCache<T>& cache, const Tensor<T>& gamma,
                                const Tensor<T>& grad_output);

// Elementwise activations ---------------------------------------------------

template <typename T>
Tensor<T> activation(const Tensor<T>& input, Activation kind);

/// `output` must be activation(input, kind).
template <typename T>
Tensor<T> activation_backward(Activation kind, const Tensor<T>& input, const Tensor<T>& output,
                              const Tensor<T>& grad_output);

// Average pooling along the length axis -------------------------------------

template <typename T>
Tensor<T> avgpool1d(const Tensor<T>& input, std::size_t window, std::size_t stride);

template <typename T>
Tensor<T> avgpool1d_backward(const Shape& input_shape, std::size_t window, std::size_t stride,
                             const Tensor<T>& grad_output);

// Fully connected -----------------------------------------------------------
//
// A rank-1 input is a single vector; higher ranks are B x (flattened rest) in
// row-major order, so a B x C x L activation flattens channel-major.

template <typename T>
Tensor<T> fully_connected(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias);

template <typename T>
LayerGrad<T> fully_connected_backward(const Tensor<T>& input, const Tensor<T>& weights,
                                      const Tensor<T>& grad_output);

// Depth concatenation -------------------------------------------------------

/// Stacks one scalar per branch (each input is [B] or [B, 1]) into B x n with
/// column i taken from inputs[i].
template <typename T>
Tensor<T> depth_concat(std::span<const Tensor<T>> inputs, std::size_t expected_count);

/// Routes column i of a B x n gradient back to branch i as a [B, 1] tensor.
template <typename T>
std::vector<Tensor<T>> depth_concat_backward(const Tensor<T>& grad_output);

// Classification head -------------------------------------------------------

/// Row-wise softmax with max subtraction. Accepts [n] or [B, n].
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits);

/// -log(max(p[label], 1e-12)) for a single probability vector.
template <typename T>
double cross_entropy(const Tensor<T>& probabilities, std::size_t label);

/// Mean cross entropy over the rows of a B x n probability matrix.
template <typename T>
double cross_entropy(const Tensor<T>& probabilities, std::span<const std::size_t> labels);

/// Gradient of the mean softmax + cross-entropy loss w.r.t. the logits:
/// (p - onehot(label)) / B per row.
template <typename T>
Tensor<T> softmax_cross_entropy_backward(const Tensor<T>& probabilities,
                                         std::span<const std::size_t> labels);

}  // namespace capsamc
