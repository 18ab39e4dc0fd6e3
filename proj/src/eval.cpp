#include "capsamc/eval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "capsamc/error.hpp"

namespace capsamc {
namespace fs = std::filesystem;

namespace {

std::string num(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::trunc);
  os << text;
  os.flush();
  if (!os) throw IoError("cannot write " + path.string());
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

}  // namespace

void ConfusionMatrix::add(std::size_t truth, std::size_t predicted) {
  if (truth >= kNumSchemes || predicted >= kNumSchemes) throw ValueError("confusion label out of range");
  ++counts[truth][predicted];
}

std::size_t ConfusionMatrix::total() const {
  std::size_t t = 0;
  for (const auto& row : counts) t += std::accumulate(row.begin(), row.end(), std::size_t{0});
  return t;
}

std::size_t ConfusionMatrix::trace() const {
  std::size_t t = 0;
  for (std::size_t k = 0; k < kNumSchemes; ++k) t += counts[k][k];
  return t;
}

std::size_t ConfusionMatrix::row_sum(std::size_t truth) const {
  return std::accumulate(counts.at(truth).begin(), counts.at(truth).end(), std::size_t{0});
}

double ConfusionMatrix::accuracy() const {
  const auto t = total();
  if (t == 0) throw ValueError("accuracy of an empty confusion matrix");
  return static_cast<double>(trace()) / static_cast<double>(t);
}

double ConfusionMatrix::recall(std::size_t truth) const {
  const auto n = row_sum(truth);
  if (n == 0) return std::numeric_limits<double>::quiet_NaN();
  return static_cast<double>(counts[truth][truth]) / static_cast<double>(n);
}

ConfusionMatrix ConfusionMatrix::from(const Classification& c) {
  if (c.true_labels.empty()) throw ValueError("confusion of an empty frame set");
  ConfusionMatrix m;
  for (std::size_t i = 0; i < c.true_labels.size(); ++i) m.add(c.true_labels[i], c.predicted_labels[i]);
  return m;
}

template <typename T>
ConfusionMatrix confusion(const Model<T>& model, std::span<const ComplexSignal> frames,
                          std::span<const std::size_t> indices, bool normalize, std::size_t threads) {
  return ConfusionMatrix::from(classify(model, frames, indices, normalize, threads));
}

double SnrBin::accuracy() const {
  if (count == 0) return std::numeric_limits<double>::quiet_NaN();
  return static_cast<double>(correct) / static_cast<double>(count);
}

std::vector<SnrBin> SnrAccuracyCurve::nonempty() const {
  std::vector<SnrBin> out;
  std::copy_if(bins.begin(), bins.end(), std::back_inserter(out), [](const SnrBin& b) { return !b.empty(); });
  return out;
}

SnrAccuracyCurve accuracy_vs_snr(const Classification& c, double bin_width_db) {
  if (!(bin_width_db > 0.0) || !std::isfinite(bin_width_db)) throw ValueError("bin width must be positive");
  SnrAccuracyCurve curve;
  curve.bin_width_db = bin_width_db;
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (double s : c.snr_db) {
    if (!std::isfinite(s)) continue;
    lo = std::min(lo, s);
    hi = std::max(hi, s);
  }
  if (lo > hi) {
    curve.unlabeled = c.snr_db.size();
    return curve;
  }
  const auto first = static_cast<std::int64_t>(std::floor(lo / bin_width_db));
  const auto last = static_cast<std::int64_t>(std::floor(hi / bin_width_db));
  for (auto k = first; k <= last; ++k) {
    curve.bins.push_back({static_cast<double>(k) * bin_width_db, static_cast<double>(k + 1) * bin_width_db, 0, 0});
  }
  for (std::size_t i = 0; i < c.snr_db.size(); ++i) {
    const double s = c.snr_db[i];
    if (!std::isfinite(s)) {
      ++curve.unlabeled;
      continue;
    }
    const auto k = static_cast<std::size_t>(static_cast<std::int64_t>(std::floor(s / bin_width_db)) - first);
    auto& bin = curve.bins[k];
    ++bin.count;
    if (c.true_labels[i] == c.predicted_labels[i]) ++bin.correct;
  }
  return curve;
}

template <typename T>
SnrAccuracyCurve accuracy_vs_snr(const Model<T>& model, std::span<const ComplexSignal> frames,
                                 std::span<const std::size_t> indices, double bin_width_db, bool normalize,
                                 std::size_t threads) {
  return accuracy_vs_snr(classify(model, frames, indices, normalize, threads), bin_width_db);
}

// Shift -------------------------------------------------------------------------

void ShiftConfig::validate() const {
  train_profile.validate();
  test_profile.validate();
  if (train_count == 0 || test_count == 0) throw ValueError("shift experiment needs frames in both datasets");
  if (!allow_overlap) require_disjoint_cfo(train_profile, test_profile);
  if (train_profile.length != network.input_length || test_profile.length != network.input_length) {
    throw ValueError("profile frame lengths (" + std::to_string(train_profile.length) + ", " +
                     std::to_string(test_profile.length) + ") must equal the network input length " +
                     std::to_string(network.input_length));
  }
  split.validate();
  training.validate();
}

std::string ShiftReport::to_text() const {
  std::ostringstream os;
  os << "train_profile=" << train_profile << '\n'
     << "test_profile=" << test_profile << '\n'
     << "seed=" << seed << '\n'
     << "matched_accuracy=" << num(matched_accuracy) << '\n'
     << "shifted_accuracy=" << num(shifted_accuracy) << '\n'
     << "gap=" << num(gap()) << '\n'
     << "reference_ds1_matched_percent=" << FullScaleReference::kDs1Matched << '\n'
     << "reference_ds2_matched_percent=" << FullScaleReference::kDs2Matched << '\n'
     << "reference_ds1_to_ds2_percent=" << FullScaleReference::kDs1ToDs2 << '\n'
     << "reference_ds2_to_ds1_percent=" << FullScaleReference::kDs2ToDs1 << '\n'
     << "reference_scale=full (112000 frames of 32768 samples per dataset); desk runs are not comparable\n";
  return os.str();
}

ShiftReport shift_experiment(const ShiftConfig& config, Model<float>* trained) {
  config.validate();
  const auto train_frames = generate(config.train_profile, config.train_count, Rng::stream_seed(config.seed, 0));
  const auto test_frames = generate(config.test_profile, config.test_count, Rng::stream_seed(config.seed, 1));

  std::vector<FrameRecord> records(train_frames.size());
  DatasetManifest manifest;
  for (std::size_t i = 0; i < train_frames.size(); ++i) {
    records[i].index = i;
    records[i].meta = train_frames[i].meta;
    records[i].label = label_of(train_frames[i].meta.scheme);
  }
  manifest.records = std::move(records);
  SplitSpec split = config.split;
  split.seed = Rng::stream_seed(config.seed, 2);
  const auto parts = capsamc::split(manifest, split);

  NetworkConfig net = config.network;
  net.seed = Rng::stream_seed(config.seed, 3);
  TrainConfig tc = config.training;
  tc.seed = Rng::stream_seed(config.seed, 4);
  if (tc.dataset_tag.empty()) tc.dataset_tag = config.train_profile.name;

  auto outcome = train(build<float>(net), train_frames, parts.train, parts.validation, tc);

  ShiftReport report;
  report.train_profile = config.train_profile.name;
  report.test_profile = config.test_profile.name;
  report.seed = config.seed;
  report.matched = confusion(outcome.model, train_frames, parts.test, tc.normalize_input, tc.threads);
  std::vector<std::size_t> all(test_frames.size());
  std::iota(all.begin(), all.end(), 0);
  report.shifted = confusion(outcome.model, test_frames, all, tc.normalize_input, tc.threads);
  report.matched_accuracy = report.matched.accuracy();
  report.shifted_accuracy = report.shifted.accuracy();
  report.training = std::move(outcome.report);
  if (trained) *trained = std::move(outcome.model);
  return report;
}

// Reports -----------------------------------------------------------------------

std::string confusion_csv(const ConfusionMatrix& m) {
  std::ostringstream os;
  os << "true\\predicted";
  for (auto s : all_schemes()) os << ',' << scheme_name(s);
  os << '\n';
  for (std::size_t r = 0; r < kNumSchemes; ++r) {
    os << scheme_name(scheme_from_label(r));
    for (std::size_t c = 0; c < kNumSchemes; ++c) os << ',' << m.counts[r][c];
    os << '\n';
  }
  return os.str();
}

ConfusionMatrix parse_confusion_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  std::vector<std::vector<std::string>> rows;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) rows.push_back(split_csv_line(line));
  }
  if (rows.size() != kNumSchemes + 1) throw FormatError("confusion CSV needs 9 rows");
  for (std::size_t c = 0; c < kNumSchemes; ++c) {
    if (rows[0].size() != kNumSchemes + 1 || rows[0][c + 1] != scheme_name(scheme_from_label(c))) {
      throw FormatError("confusion CSV header does not list the schemes in label order");
    }
  }
  ConfusionMatrix m;
  for (std::size_t r = 0; r < kNumSchemes; ++r) {
    const auto& row = rows[r + 1];
    if (row.size() != kNumSchemes + 1 || row[0] != scheme_name(scheme_from_label(r))) {
      throw FormatError("confusion CSV row " + std::to_string(r + 2) + " is malformed");
    }
    for (std::size_t c = 0; c < kNumSchemes; ++c) {
      const auto& cell = row[c + 1];
      const auto [end, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), m.counts[r][c]);
      if (ec != std::errc() || end != cell.data() + cell.size() || cell.empty()) {
        throw FormatError("confusion CSV cell '" + cell + "' is not a count");
      }
    }
  }
  return m;
}

std::string curve_csv(const SnrAccuracyCurve& curve) {
  std::ostringstream os;
  os << "bin_center_db,accuracy,count\n";
  for (const auto& b : curve.nonempty()) os << num(b.center_db()) << ',' << num(b.accuracy()) << ',' << b.count << '\n';
  return os.str();
}

std::string confusion_lines(const ConfusionMatrix& m) {
  std::ostringstream os;
  os << "total=" << m.total() << " correct=" << m.trace() << " accuracy=" << num(m.accuracy()) << '\n';
  for (std::size_t r = 0; r < kNumSchemes; ++r) {
    os << "class=" << scheme_name(scheme_from_label(r)) << " count=" << m.row_sum(r) << " recall=" << num(m.recall(r))
       << " row=";
    for (std::size_t c = 0; c < kNumSchemes; ++c) os << (c ? ";" : "") << m.counts[r][c];
    os << '\n';
  }
  return os.str();
}

std::string curve_lines(const SnrAccuracyCurve& curve) {
  std::ostringstream os;
  for (const auto& b : curve.bins) {
    os << "bin_lo_db=" << num(b.lo_db) << " bin_hi_db=" << num(b.hi_db) << " count=" << b.count;
    if (b.empty()) {
      os << " empty=1\n";
    } else {
      os << " accuracy=" << num(b.accuracy()) << '\n';
    }
  }
  os << "unlabeled=" << curve.unlabeled << '\n';
  return os.str();
}

std::vector<fs::path> emit_report(const ConfusionMatrix& confusion, const SnrAccuracyCurve* curve, const fs::path& dir,
                                  const std::string& tag, ReportFormat format) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create report directory " + dir.string());
  std::vector<fs::path> written;
  if (format == ReportFormat::kCsv) {
    written.push_back(dir / (tag + "_confusion.csv"));
    write_text(written.back(), confusion_csv(confusion));
    if (curve) {
      written.push_back(dir / (tag + "_snr.csv"));
      write_text(written.back(), curve_csv(*curve));
    }
  } else {
    std::string text = confusion_lines(confusion);
    if (curve) text += curve_lines(*curve);
    written.push_back(dir / (tag + ".txt"));
    write_text(written.back(), text);
  }
  return written;
}

#define CAPSAMC_INSTANTIATE_EVAL(T)                                                                          \
  template ConfusionMatrix confusion(const Model<T>&, std::span<const ComplexSignal>,                       \
                                     std::span<const std::size_t>, bool, std::size_t);                      \
  template SnrAccuracyCurve accuracy_vs_snr(const Model<T>&, std::span<const ComplexSignal>,                \
                                            std::span<const std::size_t>, double, bool, std::size_t);

CAPSAMC_INSTANTIATE_EVAL(float)
CAPSAMC_INSTANTIATE_EVAL(double)

}  // namespace capsamc
