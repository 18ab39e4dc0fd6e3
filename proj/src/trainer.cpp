#include "capsamc/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

#include "capsamc/error.hpp"

namespace capsamc {

namespace {

std::string num(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

// Maps scheme label -> class index of the model, or npos.
std::array<std::size_t, kNumSchemes> class_lookup(const NetworkConfig& config) {
  std::array<std::size_t, kNumSchemes> lut;
  lut.fill(static_cast<std::size_t>(-1));
  for (std::size_t i = 0; i < config.classes.size(); ++i) lut[label_of(config.classes[i])] = i;
  return lut;
}

std::size_t class_index(const std::array<std::size_t, kNumSchemes>& lut, const ComplexSignal& frame,
                        std::size_t frame_index) {
  const auto c = lut[label_of(frame.meta.scheme)];
  if (c == static_cast<std::size_t>(-1)) {
    throw ValueError("frame " + std::to_string(frame_index) + " is " + std::string(scheme_name(frame.meta.scheme)) +
                     ", which the model does not classify");
  }
  return c;
}

void check_indices(std::span<const ComplexSignal> frames, std::span<const std::size_t> indices, std::size_t length,
                   const char* what) {
  for (auto i : indices) {
    if (i >= frames.size()) {
      throw ValueError(std::string(what) + " index " + std::to_string(i) + " out of range (" +
                       std::to_string(frames.size()) + " frames)");
    }
    if (frames[i].samples.size() != length) {
      throw ShapeError("frame " + std::to_string(i) + " has " + std::to_string(frames[i].samples.size()) +
                       " samples, model expects " + std::to_string(length));
    }
  }
}

template <typename T>
Tensor<T> pack(std::span<const ComplexSignal> frames, std::span<const std::size_t> indices, bool normalize) {
  std::vector<const ComplexSignal*> ptrs;
  ptrs.reserve(indices.size());
  for (auto i : indices) ptrs.push_back(&frames[i]);
  return pack_frames<T>(std::span<const ComplexSignal* const>(ptrs), normalize);
}

}  // namespace

void TrainConfig::validate() const {
  if (batch_size < 2) throw ValueError("batch_size must be at least 2");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ValueError("learning_rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ValueError("momentum must lie in [0, 1)");
  if (!(decay_factor > 0.0 && decay_factor <= 1.0)) throw ValueError("decay_factor must lie in (0, 1]");
  if (patience < 1) throw ValueError("patience must be at least 1");
  if (threads < 1) throw ValueError("threads must be at least 1");
}

double TrainConfig::learning_rate_at(std::size_t epoch) const {
  if (decay_period == 0) return learning_rate;
  return learning_rate * std::pow(decay_factor, static_cast<double>(epoch / decay_period));
}

std::string TrainReport::to_text() const {
  std::ostringstream os;
  for (const auto& e : epochs) {
    os << "epoch=" << e.epoch << " lr=" << num(e.learning_rate) << " steps=" << e.steps
       << " loss=" << num(e.train_loss) << " train_acc=" << num(e.train_accuracy)
       << " val_loss=" << num(e.validation_loss) << " val_acc=" << num(e.validation_accuracy);
    if (timed) os << " seconds=" << num(e.seconds);
    os << '\n';
  }
  os << "initial_batch_loss=" << num(initial_batch_loss) << " best_epoch="
     << (best_epoch ? std::to_string(*best_epoch) : std::string("none"))
     << " best_val_acc=" << num(best_validation_accuracy) << " stop=" << (stop_reason.empty() ? "none" : stop_reason);
  if (timed) os << " seconds=" << num(seconds);
  os << '\n';
  return os.str();
}

std::vector<std::size_t> batch_sizes(std::size_t n, std::size_t batch_size) {
  if (batch_size == 0) throw ValueError("batch_size must be positive");
  std::vector<std::size_t> sizes(n / batch_size, batch_size);
  if (n % batch_size != 0) sizes.push_back(n % batch_size);
  if (sizes.size() >= 2 && sizes.back() == 1) {
    if (batch_size >= 3) {
      sizes.back() = 2;
      sizes[sizes.size() - 2] -= 1;
    } else {
      sizes.pop_back();
      sizes.back() += 1;
    }
  }
  return sizes;
}

template <typename T>
TrainOutcome<T> train(Model<T> model, std::span<const ComplexSignal> frames, std::span<const std::size_t> train_indices,
                      std::span<const std::size_t> validation_indices, const TrainConfig& config,
                      const EpochCallback& on_epoch) {
  config.validate();
  TrainOutcome<T> out{std::move(model), {}};
  out.report.timed = !config.deterministic;
  if (config.max_epochs == 0) return out;
  Model<T>& m = out.model;

  if (train_indices.size() < 2) throw ValueError("training needs at least 2 frames");
  if (validation_indices.empty()) throw ValueError("training needs a nonempty validation set");
  check_indices(frames, train_indices, m.config.input_length, "train");
  check_indices(frames, validation_indices, m.config.input_length, "validation");
  const auto lut = class_lookup(m.config);
  std::vector<std::size_t> labels(frames.size(), 0);
  for (auto i : train_indices) labels[i] = class_index(lut, frames[i], i);
  for (auto i : validation_indices) labels[i] = class_index(lut, frames[i], i);

  using clock = std::chrono::steady_clock;
  const auto run_start = clock::now();
  OptimizerState<T> opt;
  opt.momentum = config.momentum;

  ParamMap<T> best_params = m.params;
  ParamMap<T> best_buffers = m.buffers;
  std::size_t since_best = 0;
  const auto sizes = batch_sizes(train_indices.size(), config.batch_size);

  for (std::size_t epoch = 0; epoch < config.max_epochs; ++epoch) {
    const auto epoch_start = clock::now();
    opt.learning_rate = config.learning_rate_at(epoch);
    std::vector<std::size_t> order(train_indices.begin(), train_indices.end());
    Rng rng = Rng::stream(config.seed, epoch);
    rng.shuffle(std::span<std::size_t>(order));

    double loss_sum = 0.0;
    std::size_t correct = 0;
    std::size_t pos = 0;
    for (std::size_t b = 0; b < sizes.size(); ++b) {
      const std::span<const std::size_t> idx(order.data() + pos, sizes[b]);
      pos += sizes[b];
      std::vector<std::size_t> batch_labels;
      batch_labels.reserve(idx.size());
      for (auto i : idx) batch_labels.push_back(labels[i]);

      const Tensor<T> batch = pack<T>(frames, idx, config.normalize_input);
      const std::string where = "epoch " + std::to_string(epoch + 1) + ", batch " + std::to_string(b + 1) +
                                " (lr " + num(opt.learning_rate) + ")";
      ForwardResult<T> fwd;
      Gradients<T> grads;
      try {
        fwd = forward(m, batch, Mode::kTrain, config.threads);
        grads = backward(m, fwd.cache, batch_labels, config.threads);
      } catch (const ValueError& e) {
        // Inputs were validated above, so this is a diverged model.
        throw TrainingError(std::string(e.what()) + " at " + where);
      }
      if (!std::isfinite(grads.loss)) throw TrainingError("non-finite loss at " + where);
      try {
        sgdm_step(m.params, grads.params, opt);
      } catch (const ValueError& e) {
        throw TrainingError(std::string(e.what()) + " at " + where);
      }
      if (epoch == 0) {
        if (b == 0) out.report.initial_batch_loss = grads.loss;
        out.report.first_epoch_batch_losses.push_back(grads.loss);
      }
      loss_sum += grads.loss * static_cast<double>(idx.size());
      const std::size_t n = m.config.classes.size();
      for (std::size_t r = 0; r < idx.size(); ++r) {
        std::vector<double> row(n);
        for (std::size_t c = 0; c < n; ++c) row[c] = static_cast<double>(fwd.probabilities.at(r, c));
        if (argmax_lowest(row) == batch_labels[r]) ++correct;
      }
    }

    SplitEvaluation val;
    try {
      val = evaluate_split(m, frames, validation_indices, config.normalize_input, config.threads);
    } catch (const ValueError& e) {
      throw TrainingError(std::string(e.what()) + " during validation after epoch " + std::to_string(epoch + 1));
    }
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.learning_rate = opt.learning_rate;
    rec.steps = sizes.size();
    rec.train_loss = loss_sum / static_cast<double>(train_indices.size());
    rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(train_indices.size());
    rec.validation_loss = val.loss;
    rec.validation_accuracy = val.accuracy;
    rec.seconds = config.deterministic ? 0.0 : std::chrono::duration<double>(clock::now() - epoch_start).count();
    out.report.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);

    if (!out.report.best_epoch || rec.validation_accuracy > out.report.best_validation_accuracy) {
      out.report.best_epoch = rec.epoch;
      out.report.best_validation_accuracy = rec.validation_accuracy;
      best_params = m.params;
      best_buffers = m.buffers;
      since_best = 0;
    } else if (++since_best >= config.patience) {
      out.report.stop_reason = "patience";
      break;
    }
  }
  if (out.report.stop_reason.empty()) out.report.stop_reason = "max_epochs";

  m.params = std::move(best_params);
  m.buffers = std::move(best_buffers);
  m.provenance.dataset_tag = config.dataset_tag;
  m.provenance.epoch = static_cast<std::int64_t>(*out.report.best_epoch);
  m.provenance.validation_accuracy = out.report.best_validation_accuracy;
  if (out.report.timed) out.report.seconds = std::chrono::duration<double>(clock::now() - run_start).count();
  return out;
}

template <typename T>
Classification classify(const Model<T>& model, std::span<const ComplexSignal> frames,
                        std::span<const std::size_t> indices, bool normalize, std::size_t threads,
                        std::size_t batch_size) {
  if (indices.empty()) throw ValueError("cannot evaluate an empty frame set");
  if (batch_size == 0) throw ValueError("batch_size must be positive");
  check_indices(frames, indices, model.config.input_length, "evaluation");
  const auto lut = class_lookup(model.config);
  Classification out;
  double loss_sum = 0.0;
  const std::size_t n = model.config.classes.size();
  for (std::size_t pos = 0; pos < indices.size(); pos += batch_size) {
    const std::span<const std::size_t> idx = indices.subspan(pos, std::min(batch_size, indices.size() - pos));
    const Tensor<T> probs = infer(model, pack<T>(frames, idx, normalize), threads);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const auto& frame = frames[idx[r]];
      const auto truth = class_index(lut, frame, idx[r]);
      std::vector<double> row(n);
      for (std::size_t c = 0; c < n; ++c) row[c] = static_cast<double>(probs.at(r, c));
      out.true_labels.push_back(label_of(frame.meta.scheme));
      out.predicted_labels.push_back(label_of(model.config.classes[argmax_lowest(row)]));
      out.snr_db.push_back(frame.meta.inband_snr_db);
      loss_sum += -std::log(std::max(row[truth], 1e-12));
    }
  }
  out.mean_loss = loss_sum / static_cast<double>(indices.size());
  return out;
}

SplitEvaluation summarize(const Classification& c) {
  if (c.true_labels.empty()) throw ValueError("cannot summarize an empty evaluation");
  SplitEvaluation e;
  std::array<std::size_t, kNumSchemes> hits{}, totals{};
  e.total = c.true_labels.size();
  for (std::size_t i = 0; i < e.total; ++i) {
    ++totals[c.true_labels[i]];
    if (c.true_labels[i] == c.predicted_labels[i]) {
      ++hits[c.true_labels[i]];
      ++e.correct;
    }
  }
  e.accuracy = static_cast<double>(e.correct) / static_cast<double>(e.total);
  e.loss = c.mean_loss;
  for (std::size_t k = 0; k < kNumSchemes; ++k) {
    e.per_class_accuracy[k] = totals[k] == 0 ? std::numeric_limits<double>::quiet_NaN()
                                             : static_cast<double>(hits[k]) / static_cast<double>(totals[k]);
  }
  return e;
}

template <typename T>
SplitEvaluation evaluate_split(const Model<T>& model, std::span<const ComplexSignal> frames,
                               std::span<const std::size_t> indices, bool normalize, std::size_t threads) {
  return summarize(classify(model, frames, indices, normalize, threads));
}

#define CAPSAMC_INSTANTIATE_TRAINER(T)                                                                           \
  template TrainOutcome<T> train(Model<T>, std::span<const ComplexSignal>, std::span<const std::size_t>,        \
                                 std::span<const std::size_t>, const TrainConfig&, const EpochCallback&);       \
  template Classification classify(const Model<T>&, std::span<const ComplexSignal>, std::span<const std::size_t>, \
                                   bool, std::size_t, std::size_t);                                              \
  template SplitEvaluation evaluate_split(const Model<T>&, std::span<const ComplexSignal>,                      \
                                          std::span<const std::size_t>, bool, std::size_t);

CAPSAMC_INSTANTIATE_TRAINER(float)
CAPSAMC_INSTANTIATE_TRAINER(double)

}  // namespace capsamc
