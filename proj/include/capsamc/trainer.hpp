#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "capsamc/capsnet.hpp"
#include "capsamc/modsig.hpp"

namespace capsamc {

struct TrainConfig {
  /// At least 2: the capsule batch norm normalizes over the batch alone.
  std::size_t batch_size = 250;
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::size_t max_epochs = 30;
  /// Learning rate is multiplied by decay_factor every decay_period epochs;
  /// a period of 0 disables decay.
  double decay_factor = 0.1;
  std::size_t decay_period = 10;
  /// Stop after this many validation evaluations without improvement.
  std::size_t patience = 5;
  std::uint64_t seed = 1;
  /// Leaves wall-clock time out of the report so reruns compare equal.
  bool deterministic = true;
  bool normalize_input = true;
  std::size_t threads = 1;
  /// Recorded in the checkpoint provenance.
  std::string dataset_tag;

  void validate() const;
  double learning_rate_at(std::size_t epoch) const;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double learning_rate = 0.0;
  std::size_t steps = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double validation_loss = 0.0;
  double validation_accuracy = 0.0;
  double seconds = 0.0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  /// Loss of the very first mini-batch, before any update.
  double initial_batch_loss = std::numeric_limits<double>::quiet_NaN();
  /// Per-batch losses of epoch 1 in step order.
  std::vector<double> first_epoch_batch_losses;
  std::optional<std::size_t> best_epoch;
  double best_validation_accuracy = 0.0;
  std::string stop_reason;
  double seconds = 0.0;
  bool timed = false;

  /// One "key=value ..." line per epoch, then a summary line. Times appear
  /// only when the report was produced outside deterministic mode.
  std::string to_text() const;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

template <typename T>
struct TrainOutcome {
  Model<T> model;
  TrainReport report;
};

/// Mini-batch SGD with momentum over frames[train_indices], selecting the
/// epoch with the best accuracy on frames[validation_indices]. Every frame's
/// scheme must be one of model.config.classes.
template <typename T>
TrainOutcome<T> train(Model<T> model, std::span<const ComplexSignal> frames,
                      std::span<const std::size_t> train_indices,
                      std::span<const std::size_t> validation_indices, const TrainConfig& config,
                      const EpochCallback& on_epoch = {});

/// Batch sizes for one epoch over n frames: ceil(n / batch_size) batches,
/// the last one short. A trailing single-frame batch borrows one frame from
/// its predecessor so every batch has at least two frames; with batch_size 2
/// it joins the predecessor instead.
std::vector<std::size_t> batch_sizes(std::size_t n, std::size_t batch_size);

/// Inference over frames[indices] in mini-batches.
struct Classification {
  /// Scheme labels (0..7).
  std::vector<std::size_t> true_labels;
  std::vector<std::size_t> predicted_labels;
  std::vector<double> snr_db;
  /// Mean cross-entropy of the true class.
  double mean_loss = 0.0;
};

template <typename T>
Classification classify(const Model<T>& model, std::span<const ComplexSignal> frames,
                        std::span<const std::size_t> indices, bool normalize = true,
                        std::size_t threads = 1, std::size_t batch_size = 250);

struct SplitEvaluation {
  std::size_t total = 0;
  std::size_t correct = 0;
  double accuracy = 0.0;
  double loss = 0.0;
  /// Indexed by scheme label; NaN for schemes absent from the set.
  std::array<double, kNumSchemes> per_class_accuracy{};
};

SplitEvaluation summarize(const Classification& c);

template <typename T>
SplitEvaluation evaluate_split(const Model<T>& model, std::span<const ComplexSignal> frames,
                               std::span<const std::size_t> indices, bool normalize = true,
                               std::size_t threads = 1);

}  // namespace capsamc
