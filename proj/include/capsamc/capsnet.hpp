#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "capsamc/layers.hpp"
#include "capsamc/modsig.hpp"
#include "capsamc/optimizer.hpp"
#include "capsamc/tensor.hpp"

namespace capsamc {

struct ConvSpec {
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t out_channels = 1;
  friend bool operator==(const ConvSpec&, const ConvSpec&) = default;
};

struct PoolSpec {
  std::size_t window = 1;
  std::size_t stride = 1;
  friend bool operator==(const PoolSpec&, const PoolSpec&) = default;
};

/// Layer stack of the capsule network. One primary-caps branch is built per
/// entry of `classes`; branch i produces logit i.
///
///   input C x L
///   feature:  conv -> batchnorm -> tanh
///   branch i: conv1 -> bn1 -> tanh -> conv2 -> bn2 -> tanh -> avgpool
///             -> fc (capsule_width) -> bn3 -> relu -> point fc (1)
///   depth concat -> softmax
struct NetworkConfig {
  std::size_t in_channels = 2;
  std::size_t input_length = kDefaultFrameLength;
  std::vector<Scheme> classes{all_schemes().begin(), all_schemes().end()};
  ConvSpec feature{22, 9, 64};
  ConvSpec branch_conv1{23, 7, 48};
  ConvSpec branch_conv2{22, 8, 64};
  PoolSpec pool{8, 1};
  std::size_t capsule_width = 32;
  std::uint64_t seed = 1;

  std::size_t branch_count() const { return classes.size(); }

  /// key=value lines; parse(serialize()) == *this.
  std::string serialize() const;
  static NetworkConfig parse(const std::string& text);
  /// CRC-32 of serialize().
  std::uint32_t digest() const;

  friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

/// Desk-scale variant for 2 x `length` frames: same widths and kernels, the
/// second branch convolution uses stride 2 so the stack stays valid at 4096.
NetworkConfig toy_network_config(std::size_t length = 4096);

/// Activation lengths through the stack.
struct ShapeTrace {
  std::size_t feature_length = 0;
  std::size_t conv1_length = 0;
  std::size_t conv2_length = 0;
  std::size_t pool_length = 0;
  std::size_t fc_inputs = 0;

  /// e.g. "64x3639 -> 48x517 -> 64x62 -> 64x55 -> 32 -> 1 -> 8"
  std::string describe(const NetworkConfig& config) const;
};

/// Validates the config and returns the shape trace; throws ShapeError naming
/// the first layer whose output would be empty.
ShapeTrace shape_trace(const NetworkConfig& config);

struct Provenance {
  std::string dataset_tag;
  std::int64_t epoch = -1;
  double validation_accuracy = 0.0;
  friend bool operator==(const Provenance&, const Provenance&) = default;
};

/// Learnable parameters and batch-norm running statistics, keyed by layer
/// path ("feature.conv.weight", "branch3.bn2.gamma", ...).
template <typename T>
struct Model {
  NetworkConfig config;
  ShapeTrace trace;
  ParamMap<T> params;
  ParamMap<T> buffers;
  Provenance provenance;
};

/// Glorot-uniform conv/FC weights, zero biases, gamma 1, beta 0, running
/// mean 0 and variance 1. Deterministic in config.seed.
template <typename T>
Model<T> build(const NetworkConfig& config);

template <typename To, typename From>
Model<To> cast_model(const Model<From>& model) {
  Model<To> out;
  out.config = model.config;
  out.trace = model.trace;
  out.provenance = model.provenance;
  for (const auto& [k, v] : model.params) out.params.emplace(k, v.template cast<To>());
  for (const auto& [k, v] : model.buffers) out.buffers.emplace(k, v.template cast<To>());
  return out;
}

template <typename T>
struct BranchCache {
  BatchNormCache<T> bn1;
  Tensor<T> act1;
  BatchNormCache<T> bn2;
  Tensor<T> act2;
  Tensor<T> pooled;
  BatchNormCache<T> bn3;
  Tensor<T> bn3_out;
  Tensor<T> relu_out;
};

/// Activations kept by a train-mode forward pass for the reverse pass.
template <typename T>
struct ForwardCache {
  Mode mode = Mode::kInference;
  Tensor<T> input;
  BatchNormCache<T> feature_bn;
  Tensor<T> feature_act;
  std::vector<BranchCache<T>> branches;
  Tensor<T> probabilities;
};

template <typename T>
struct ForwardResult {
  Tensor<T> logits;         // B x n
  Tensor<T> probabilities;  // B x n
  ForwardCache<T> cache;
};

/// Runs the network on a B x C x L batch. Train mode updates the batch-norm
/// running statistics. `threads` > 1 evaluates branches concurrently; the
/// result does not depend on the thread count.
template <typename T>
ForwardResult<T> forward(Model<T>& model, const Tensor<T>& batch, Mode mode, std::size_t threads = 1);

/// Inference-mode probabilities without caching activations.
template <typename T>
Tensor<T> infer(const Model<T>& model, const Tensor<T>& batch, std::size_t threads = 1);

template <typename T>
struct Gradients {
  ParamMap<T> params;
  /// Mean cross-entropy over the batch.
  double loss = 0.0;
};

/// Gradients of the mean cross-entropy for `labels` (class indices into
/// config.classes), given the cache of a train-mode forward on the batch.
template <typename T>
Gradients<T> backward(const Model<T>& model, const ForwardCache<T>& cache,
                      std::span<const std::size_t> labels, std::size_t threads = 1);

/// Index of the largest entry; ties go to the lowest index.
std::size_t argmax_lowest(std::span<const double> values);

struct Prediction {
  std::size_t class_index = 0;
  Scheme scheme = Scheme::kBpsk;
  std::vector<double> probabilities;
};

/// Packs frames as 2 x L (I then Q) rows of a B x 2 x L tensor, optionally
/// scaling each frame to unit power first.
template <typename T>
Tensor<T> pack_frames(std::span<const ComplexSignal* const> frames, bool normalize);

template <typename T>
Prediction predict(const Model<T>& model, const ComplexSignal& signal, bool normalize = true);

/// Little-endian checkpoint: magic, version, config digest, config text,
/// provenance, then named tensors, closed by a CRC-32 of all prior bytes.
template <typename T>
void save_model(const Model<T>& model, const std::filesystem::path& path);

/// Loads a checkpoint. When `expected` is given its config must match the
/// stored one exactly.
template <typename T>
Model<T> load_model(const std::filesystem::path& path, const NetworkConfig* expected = nullptr);

inline constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace capsamc
