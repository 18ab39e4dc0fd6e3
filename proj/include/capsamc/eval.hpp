#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "capsamc/capsnet.hpp"
#include "capsamc/dataio.hpp"
#include "capsamc/modsig.hpp"
#include "capsamc/trainer.hpp"

namespace capsamc {

/// Rows are true schemes, columns predicted schemes, both by label index.
struct ConfusionMatrix {
  std::array<std::array<std::size_t, kNumSchemes>, kNumSchemes> counts{};

  void add(std::size_t truth, std::size_t predicted);
  std::size_t total() const;
  std::size_t trace() const;
  std::size_t row_sum(std::size_t truth) const;
  double accuracy() const;
  /// NaN when the class has no frames.
  double recall(std::size_t truth) const;

  static ConfusionMatrix from(const Classification& c);
  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

template <typename T>
ConfusionMatrix confusion(const Model<T>& model, std::span<const ComplexSignal> frames,
                          std::span<const std::size_t> indices, bool normalize = true, std::size_t threads = 1);

struct SnrBin {
  double lo_db = 0.0;
  double hi_db = 0.0;
  std::size_t count = 0;
  std::size_t correct = 0;

  bool empty() const { return count == 0; }
  double center_db() const { return 0.5 * (lo_db + hi_db); }
  /// NaN for an empty bin.
  double accuracy() const;
};

/// Frames binned by labeled SNR on a grid aligned to multiples of the bin
/// width, covering the lowest to the highest label. Empty interior bins are
/// kept and flagged by count 0. Frames without a finite label are counted in
/// `unlabeled` and left out of every bin.
struct SnrAccuracyCurve {
  double bin_width_db = 1.0;
  std::vector<SnrBin> bins;
  std::size_t unlabeled = 0;

  std::vector<SnrBin> nonempty() const;
};

SnrAccuracyCurve accuracy_vs_snr(const Classification& c, double bin_width_db = 1.0);

template <typename T>
SnrAccuracyCurve accuracy_vs_snr(const Model<T>& model, std::span<const ComplexSignal> frames,
                                 std::span<const std::size_t> indices, double bin_width_db = 1.0,
                                 bool normalize = true, std::size_t threads = 1);

// Dataset shift ---------------------------------------------------------------

/// Overall accuracies of the full-scale runs (112k frames per dataset of
/// length 32768), kept in reports for comparison; not reproducible at desk
/// scale.
struct FullScaleReference {
  static constexpr double kDs1Matched = 93.7357;
  static constexpr double kDs2Matched = 97.4607;
  static constexpr double kDs1ToDs2 = 27.925;
  static constexpr double kDs2ToDs1 = 26.2107;
  static constexpr double kMixed = 94.4975;
};

struct ShiftConfig {
  DatasetProfile train_profile;
  DatasetProfile test_profile;
  /// Frames generated from each profile.
  std::size_t train_count = 1000;
  std::size_t test_count = 1000;
  std::uint64_t seed = 1;
  NetworkConfig network;
  TrainConfig training;
  SplitSpec split;
  /// Permit overlapping CFO intervals (then no shift is expected).
  bool allow_overlap = false;

  void validate() const;
};

struct ShiftReport {
  std::string train_profile;
  std::string test_profile;
  std::uint64_t seed = 0;
  double matched_accuracy = 0.0;
  double shifted_accuracy = 0.0;
  ConfusionMatrix matched;
  ConfusionMatrix shifted;
  TrainReport training;

  double gap() const { return matched_accuracy - shifted_accuracy; }
  std::string to_text() const;
};

/// Generates both datasets, trains on the split of the first, and evaluates
/// on its test split (matched) and on every frame of the second (shifted).
/// Generated frames carry each profile's length; the network input length
/// must match the training profile.
ShiftReport shift_experiment(const ShiftConfig& config, Model<float>* trained = nullptr);

// Reports ---------------------------------------------------------------------

enum class ReportFormat { kCsv, kLines };

/// 9 x 9 CSV: header row and column of scheme names.
std::string confusion_csv(const ConfusionMatrix& m);
ConfusionMatrix parse_confusion_csv(const std::string& text);
/// bin_center_db,accuracy,count for every nonempty bin.
std::string curve_csv(const SnrAccuracyCurve& curve);

/// key=value lines with counts, accuracy and per-class recall.
std::string confusion_lines(const ConfusionMatrix& m);
std::string curve_lines(const SnrAccuracyCurve& curve);

/// Writes <tag>_confusion.csv / <tag>_snr.csv, or <tag>.txt for the lines
/// format, into dir. A null curve is skipped. Returns the files written.
std::vector<std::filesystem::path> emit_report(const ConfusionMatrix& confusion, const SnrAccuracyCurve* curve,
                                               const std::filesystem::path& dir, const std::string& tag,
                                               ReportFormat format = ReportFormat::kCsv);

}  // namespace capsamc
