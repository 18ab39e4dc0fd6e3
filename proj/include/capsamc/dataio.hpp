#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "capsamc/modsig.hpp"

namespace capsamc {

// On-disk dataset layout (a directory):
//
//   samples.bin   little-endian float32, interleaved I0 Q0 I1 Q1 ... per
//                 frame, frames back to back
//   manifest.txt  '#'-prefixed header lines (format, seed, frames,
//                 description), then one line per frame of space-separated
//                 key=value fields:
//                 index scheme label sps rolloff cfo snr_db seed dqpsk
//                 profile_tag source offset samples crc32
//
// Reals are written in shortest round-trip form, so metadata survives a
// write/read cycle bit-exactly. crc32 covers the frame's blob bytes.

inline constexpr std::uint32_t kDatasetFormatVersion = 1;
inline constexpr const char* kManifestFile = "manifest.txt";
inline constexpr const char* kBlobFile = "samples.bin";

struct FrameRecord {
  std::size_t index = 0;
  SignalMeta meta;
  std::size_t label = 0;
  /// Byte offset of the frame in samples.bin.
  std::uint64_t offset = 0;
  std::size_t samples = 0;
  std::uint32_t crc32 = 0;
  /// Provenance: the dataset this frame was generated in or merged from.
  std::string source;

  friend bool operator==(const FrameRecord&, const FrameRecord&) = default;
};

struct DatasetManifest {
  std::uint32_t format_version = kDatasetFormatVersion;
  std::string description;
  std::uint64_t seed = 0;
  std::vector<FrameRecord> records;

  std::size_t frame_count() const { return records.size(); }
  /// Frames per label index 0..7.
  std::vector<std::size_t> class_counts() const;
  void validate() const;

  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

/// Incremental writer, so large datasets never need to sit in memory. Files
/// are staged under temporary names and moved into place by finish(); a
/// writer destroyed before finish() removes what it wrote.
class DatasetWriter {
 public:
  DatasetWriter(const std::filesystem::path& dir, std::string description, std::uint64_t seed);
  ~DatasetWriter();
  DatasetWriter(const DatasetWriter&) = delete;
  DatasetWriter& operator=(const DatasetWriter&) = delete;

  /// Appends one frame; an empty source falls back to meta.profile_tag.
  void append(const ComplexSignal& frame, const std::string& source = {});
  std::size_t size() const { return manifest_.frame_count(); }
  DatasetManifest finish();

 private:
  void discard() noexcept;

  std::filesystem::path dir_;
  std::filesystem::path blob_tmp_;
  std::filesystem::path manifest_tmp_;
  std::ofstream blob_;
  DatasetManifest manifest_;
  std::uint64_t offset_ = 0;
  bool finished_ = false;
};

/// Writes frames as a dataset directory (created if missing). `sources`
/// gives a provenance tag per frame; when empty each frame's profile_tag is
/// used. On failure the partially written files are removed.
DatasetManifest write_dataset(std::span<const ComplexSignal> frames, const std::filesystem::path& dir,
                              const std::string& description, std::uint64_t seed,
                              std::span<const std::string> sources = {});

/// Parses only the manifest; no sample data is touched.
DatasetManifest read_manifest(const std::filesystem::path& dir);

/// Streaming access to a dataset directory. Each read validates the
/// record's length against the blob and its checksum.
class DatasetReader {
 public:
  explicit DatasetReader(const std::filesystem::path& dir);

  const DatasetManifest& manifest() const { return manifest_; }
  std::size_t size() const { return manifest_.frame_count(); }

  ComplexSignal read(std::size_t index);

  /// Calls fn(frame) for each selected index in the given order; an empty
  /// selection visits every frame in manifest order.
  void for_each(std::span<const std::size_t> selection, const std::function<void(ComplexSignal&&)>& fn);

 private:
  std::filesystem::path dir_;
  DatasetManifest manifest_;
  std::ifstream blob_;
  std::uint64_t blob_size_ = 0;
};

/// Loads the selected frames (all frames when the selection is empty).
std::vector<ComplexSignal> read_dataset(const std::filesystem::path& dir,
                                        std::span<const std::size_t> selection = {});

// Splitting ----------------------------------------------------------------

struct SplitSpec {
  double train = 0.70;
  double validation = 0.05;
  double test = 0.25;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SplitResult {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
  std::vector<std::size_t> test;
  /// Non-fatal notes, e.g. classes too small to appear in every split.
  std::vector<std::string> warnings;
};

/// Deterministic stratified partition of the manifest's frame indices.
/// Validation and test receive exactly floor(fraction * N) frames, train the
/// remainder; per-class counts are within one frame of fraction * class count.
/// Each list is sorted ascending.
SplitResult split(const DatasetManifest& manifest, const SplitSpec& spec);

// Merging ------------------------------------------------------------------

/// For each source, `take[s]` indices drawn uniformly without replacement
/// from [0, available[s]), sorted ascending. Throws when a take exceeds the
/// available count.
std::vector<std::vector<std::size_t>> merge_selection(std::span<const std::size_t> available,
                                                      std::span<const std::size_t> take,
                                                      std::uint64_t seed);

/// Writes a new dataset holding the sampled frames of every source,
/// concatenated in source order. Each merged frame's provenance is the source
/// path as given (normalized, whitespace replaced by '_'); all other metadata
/// is copied unchanged.
DatasetManifest merge_datasets(std::span<const std::filesystem::path> sources,
                               std::span<const std::size_t> take, std::uint64_t seed,
                               const std::filesystem::path& out_dir);

// External import ------------------------------------------------------------

struct ImportOptions {
  /// Frame length for headerless raw files.
  std::size_t frame_length = kDefaultFrameLength;
  /// Metadata assigned to frames of headerless raw files.
  SignalMeta default_meta;
  /// Rescale frames that fail the unit-power check.
  bool normalize = false;
  double power_tolerance = 1e-3;
  std::string source_tag = "import";
};

struct ImportResult {
  DatasetManifest manifest;
  /// Frames whose mean power differed from 1 by more than the tolerance.
  std::vector<std::size_t> flagged;
};

using ImportAdapter =
    std::function<std::vector<ComplexSignal>(const std::filesystem::path&, const ImportOptions&)>;

void register_import_adapter(const std::string& name, ImportAdapter adapter);
std::vector<std::string> import_adapter_names();

/// Converts an external archive into a dataset directory via a named
/// adapter. Built in: "raw" (a dataset directory, or a headerless file of
/// interleaved float32 frames) and "cspb" (placeholder that reports how to
/// register a real archive reader).
ImportResult import_external(const std::filesystem::path& input, const std::string& adapter,
                             const std::filesystem::path& out_dir, const ImportOptions& options = {});

}  // namespace capsamc
