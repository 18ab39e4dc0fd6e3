#include "capsamc/dataio.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <sstream>

#include "capsamc/error.hpp"

namespace capsamc {
namespace fs = std::filesystem;

namespace {

constexpr std::size_t kBytesPerSample = 8;
constexpr const char* kManifestMagic = "capsamc-dataset";

std::string real_text(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

template <typename N>
N parse_number(std::string_view text, std::string_view key, std::size_t line) {
  N v{};
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc{} || ptr != text.data() + text.size()) {
    throw FormatError("manifest line " + std::to_string(line) + ": bad value for " + std::string(key) +
                      ": '" + std::string(text) + "'");
  }
  return v;
}

bool has_space(const std::string& s) {
  return std::any_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c) != 0; });
}

void check_tag(const std::string& tag, const char* what) {
  if (has_space(tag)) throw ValueError(std::string(what) + " must not contain whitespace: '" + tag + "'");
}

std::string_view dqpsk_text(DqpskVariant v) { return v == DqpskVariant::kPi4 ? "pi4" : "standard"; }

std::vector<unsigned char> encode_samples(std::span<const std::complex<float>> samples) {
  std::vector<unsigned char> out(samples.size() * kBytesPerSample);
  auto put = [&out](std::size_t at, float f) {
    const auto u = std::bit_cast<std::uint32_t>(f);
    for (std::size_t b = 0; b < 4; ++b) out[at + b] = static_cast<unsigned char>((u >> (8 * b)) & 0xff);
  };
  for (std::size_t i = 0; i < samples.size(); ++i) {
    put(i * kBytesPerSample, samples[i].real());
    put(i * kBytesPerSample + 4, samples[i].imag());
  }
  return out;
}

std::vector<std::complex<float>> decode_samples(std::span<const unsigned char> bytes) {
  std::vector<std::complex<float>> out(bytes.size() / kBytesPerSample);
  auto get = [&bytes](std::size_t at) {
    std::uint32_t u = 0;
    for (std::size_t b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(bytes[at + b]) << (8 * b);
    return std::bit_cast<float>(u);
  };
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = {get(i * kBytesPerSample), get(i * kBytesPerSample + 4)};
  }
  return out;
}

std::uint32_t crc_of(std::span<const unsigned char> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  std::size_t done = 0;
  while (done < bytes.size()) {
    const auto n = static_cast<uInt>(std::min<std::size_t>(bytes.size() - done, 1u << 30));
    crc = crc32(crc, bytes.data() + done, n);
    done += n;
  }
  return static_cast<std::uint32_t>(crc);
}

std::string record_line(const FrameRecord& r) {
  std::ostringstream os;
  os << "index=" << r.index << " scheme=" << scheme_name(r.meta.scheme) << " label=" << r.label
     << " sps=" << r.meta.sps << " rolloff=" << real_text(r.meta.rolloff) << " cfo=" << real_text(r.meta.cfo)
     << " snr_db=" << real_text(r.meta.inband_snr_db) << " seed=" << r.meta.rng_seed
     << " dqpsk=" << dqpsk_text(r.meta.dqpsk) << " profile_tag=" << r.meta.profile_tag
     << " source=" << r.source << " offset=" << r.offset << " samples=" << r.samples
     << " crc32=" << r.crc32;
  return os.str();
}

FrameRecord parse_record(const std::string& text, std::size_t line) {
  static const std::vector<std::string> kKeys = {"index",  "scheme", "label", "sps",     "rolloff",
                                                 "cfo",    "snr_db", "seed",  "dqpsk",   "profile_tag",
                                                 "source", "offset", "samples", "crc32"};
  std::map<std::string, std::string, std::less<>> fields;
  std::istringstream is(text);
  std::string token;
  while (is >> token) {
    const auto eq = token.find('=');
    if (eq == std::string::npos) {
      throw FormatError("manifest line " + std::to_string(line) + ": expected key=value, got '" + token + "'");
    }
    auto key = token.substr(0, eq);
    if (std::find(kKeys.begin(), kKeys.end(), key) == kKeys.end()) {
      throw FormatError("manifest line " + std::to_string(line) + ": unknown field '" + key + "'");
    }
    if (!fields.emplace(key, token.substr(eq + 1)).second) {
      throw FormatError("manifest line " + std::to_string(line) + ": duplicate field '" + key + "'");
    }
  }
  for (const auto& k : kKeys) {
    if (!fields.contains(k)) {
      throw FormatError("manifest line " + std::to_string(line) + ": missing field '" + k + "'");
    }
  }
  FrameRecord r;
  r.index = parse_number<std::size_t>(fields["index"], "index", line);
  try {
    r.meta.scheme = parse_scheme(fields["scheme"]);
  } catch (const ValueError&) {
    throw FormatError("manifest line " + std::to_string(line) + ": unknown scheme '" + fields["scheme"] + "'");
  }
  r.label = parse_number<std::size_t>(fields["label"], "label", line);
  r.meta.sps = parse_number<std::size_t>(fields["sps"], "sps", line);
  r.meta.rolloff = parse_number<double>(fields["rolloff"], "rolloff", line);
  r.meta.cfo = parse_number<double>(fields["cfo"], "cfo", line);
  r.meta.inband_snr_db = parse_number<double>(fields["snr_db"], "snr_db", line);
  r.meta.rng_seed = parse_number<std::uint64_t>(fields["seed"], "seed", line);
  const auto& dq = fields["dqpsk"];
  if (dq == "standard") {
    r.meta.dqpsk = DqpskVariant::kStandard;
  } else if (dq == "pi4") {
    r.meta.dqpsk = DqpskVariant::kPi4;
  } else {
    throw FormatError("manifest line " + std::to_string(line) + ": unknown dqpsk variant '" + dq + "'");
  }
  r.meta.profile_tag = fields["profile_tag"];
  r.source = fields["source"];
  r.offset = parse_number<std::uint64_t>(fields["offset"], "offset", line);
  r.samples = parse_number<std::size_t>(fields["samples"], "samples", line);
  r.crc32 = parse_number<std::uint32_t>(fields["crc32"], "crc32", line);
  return r;
}

void remove_quietly(const fs::path& p) noexcept {
  std::error_code ec;
  fs::remove(p, ec);
}

}  // namespace

std::vector<std::size_t> DatasetManifest::class_counts() const {
  std::vector<std::size_t> counts(kNumSchemes, 0);
  for (const auto& r : records) ++counts.at(r.label);
  return counts;
}

void DatasetManifest::validate() const {
  if (format_version != kDatasetFormatVersion) {
    throw FormatError("unsupported dataset format version " + std::to_string(format_version));
  }
  std::uint64_t expected_offset = 0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    const auto where = "frame " + std::to_string(i);
    if (r.index != i) throw FormatError(where + ": index field says " + std::to_string(r.index));
    if (r.label >= kNumSchemes || r.label != label_of(r.meta.scheme)) {
      throw FormatError(where + ": label " + std::to_string(r.label) + " does not match scheme " +
                        std::string(scheme_name(r.meta.scheme)));
    }
    if (r.samples == 0) throw FormatError(where + ": empty frame");
    if (r.offset != expected_offset) {
      throw FormatError(where + ": offset " + std::to_string(r.offset) + ", expected " +
                        std::to_string(expected_offset));
    }
    expected_offset += static_cast<std::uint64_t>(r.samples) * kBytesPerSample;
  }
}

// Writer --------------------------------------------------------------------

DatasetWriter::DatasetWriter(const fs::path& dir, std::string description, std::uint64_t seed) : dir_(dir) {
  if (description.find('\n') != std::string::npos) throw ValueError("dataset description must be one line");
  std::error_code ec;
  fs::create_directories(dir_, ec);
  if (ec || !fs::is_directory(dir_)) throw IoError("cannot create dataset directory " + dir_.string());
  blob_tmp_ = dir_ / (std::string(kBlobFile) + ".partial");
  manifest_tmp_ = dir_ / (std::string(kManifestFile) + ".partial");
  blob_.open(blob_tmp_, std::ios::binary | std::ios::trunc);
  if (!blob_) throw IoError("cannot open " + blob_tmp_.string() + " for writing");
  manifest_.description = std::move(description);
  manifest_.seed = seed;
}

DatasetWriter::~DatasetWriter() {
  if (!finished_) discard();
}

void DatasetWriter::discard() noexcept {
  if (blob_.is_open()) blob_.close();
  remove_quietly(blob_tmp_);
  remove_quietly(manifest_tmp_);
}

void DatasetWriter::append(const ComplexSignal& frame, const std::string& source) {
  if (finished_) throw Error("dataset writer already finished");
  if (frame.samples.empty()) throw ValueError("cannot store an empty frame");
  FrameRecord r;
  r.index = manifest_.frame_count();
  r.meta = frame.meta;
  r.label = label_of(frame.meta.scheme);
  r.offset = offset_;
  r.samples = frame.samples.size();
  r.source = source.empty() ? frame.meta.profile_tag : source;
  check_tag(r.meta.profile_tag, "profile tag");
  check_tag(r.source, "source tag");
  const auto bytes = encode_samples(frame.samples);
  r.crc32 = crc_of(bytes);
  blob_.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!blob_) throw IoError("write failed on " + blob_tmp_.string() + " at frame " + std::to_string(r.index));
  offset_ += bytes.size();
  manifest_.records.push_back(std::move(r));
}

DatasetManifest DatasetWriter::finish() {
  if (finished_) throw Error("dataset writer already finished");
  blob_.close();
  if (!blob_) throw IoError("closing " + blob_tmp_.string() + " failed");
  {
    std::ofstream os(manifest_tmp_, std::ios::trunc);
    os << "# " << kManifestMagic << '\n';
    os << "# format=" << manifest_.format_version << '\n';
    os << "# seed=" << manifest_.seed << '\n';
    os << "# frames=" << manifest_.frame_count() << '\n';
    os << "# description=" << manifest_.description << '\n';
    for (const auto& r : manifest_.records) os << record_line(r) << '\n';
    os.flush();
    if (!os) throw IoError("write failed on " + manifest_tmp_.string());
  }
  fs::rename(blob_tmp_, dir_ / kBlobFile);
  fs::rename(manifest_tmp_, dir_ / kManifestFile);
  finished_ = true;
  return manifest_;
}

DatasetManifest write_dataset(std::span<const ComplexSignal> frames, const fs::path& dir,
                              const std::string& description, std::uint64_t seed,
                              std::span<const std::string> sources) {
  if (frames.empty()) throw ValueError("write_dataset needs at least one frame");
  if (!sources.empty() && sources.size() != frames.size()) {
    throw ValueError("got " + std::to_string(sources.size()) + " source tags for " +
                     std::to_string(frames.size()) + " frames");
  }
  DatasetWriter writer(dir, description, seed);
  for (std::size_t i = 0; i < frames.size(); ++i) {
    writer.append(frames[i], sources.empty() ? std::string{} : sources[i]);
  }
  return writer.finish();
}

// Reader --------------------------------------------------------------------

DatasetManifest read_manifest(const fs::path& dir) {
  const auto path = dir / kManifestFile;
  std::ifstream is(path);
  if (!is) throw IoError("cannot open dataset manifest " + path.string());
  DatasetManifest m;
  std::string line;
  std::size_t lineno = 0;
  bool magic = false;
  std::optional<std::size_t> declared_frames;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line.front() == '#') {
      auto body = line.substr(std::min<std::size_t>(2, line.size()));
      if (body == kManifestMagic) {
        magic = true;
        continue;
      }
      const auto eq = body.find('=');
      if (eq == std::string::npos) throw FormatError("manifest line " + std::to_string(lineno) + ": bad header");
      const auto key = body.substr(0, eq);
      const auto value = body.substr(eq + 1);
      if (key == "format") {
        m.format_version = parse_number<std::uint32_t>(value, key, lineno);
      } else if (key == "seed") {
        m.seed = parse_number<std::uint64_t>(value, key, lineno);
      } else if (key == "frames") {
        declared_frames = parse_number<std::size_t>(value, key, lineno);
      } else if (key == "description") {
        m.description = value;
      } else {
        throw FormatError("manifest line " + std::to_string(lineno) + ": unknown header '" + key + "'");
      }
      continue;
    }
    m.records.push_back(parse_record(line, lineno));
  }
  if (!magic) throw FormatError(path.string() + " is not a dataset manifest");
  if (!declared_frames || *declared_frames != m.frame_count()) {
    throw FormatError(path.string() + ": header declares " +
                      (declared_frames ? std::to_string(*declared_frames) : std::string("no")) +
                      " frames but lists " + std::to_string(m.frame_count()));
  }
  m.validate();
  return m;
}

DatasetReader::DatasetReader(const fs::path& dir) : dir_(dir), manifest_(read_manifest(dir)) {
  const auto path = dir_ / kBlobFile;
  blob_.open(path, std::ios::binary);
  if (!blob_) throw IoError("cannot open sample blob " + path.string());
  blob_size_ = fs::file_size(path);
}

ComplexSignal DatasetReader::read(std::size_t index) {
  if (index >= manifest_.frame_count()) {
    throw ValueError("frame " + std::to_string(index) + " out of range; dataset has " +
                     std::to_string(manifest_.frame_count()));
  }
  const auto& r = manifest_.records[index];
  const std::uint64_t n = static_cast<std::uint64_t>(r.samples) * kBytesPerSample;
  if (r.offset + n > blob_size_) {
    throw FormatError("frame " + std::to_string(index) + " is truncated: needs bytes [" + std::to_string(r.offset) +
                      ", " + std::to_string(r.offset + n) + ") but " + (dir_ / kBlobFile).string() + " has " +
                      std::to_string(blob_size_));
  }
  std::vector<unsigned char> bytes(n);
  blob_.clear();
  blob_.seekg(static_cast<std::streamoff>(r.offset));
  blob_.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(n));
  if (!blob_) throw IoError("read failed for frame " + std::to_string(index));
  if (crc_of(bytes) != r.crc32) {
    throw FormatError("frame " + std::to_string(index) + " fails its checksum in " + (dir_ / kBlobFile).string());
  }
  ComplexSignal s;
  s.samples = decode_samples(bytes);
  s.meta = r.meta;
  return s;
}

void DatasetReader::for_each(std::span<const std::size_t> selection,
                             const std::function<void(ComplexSignal&&)>& fn) {
  if (selection.empty()) {
    for (std::size_t i = 0; i < size(); ++i) fn(read(i));
  } else {
    for (auto i : selection) fn(read(i));
  }
}

std::vector<ComplexSignal> read_dataset(const fs::path& dir, std::span<const std::size_t> selection) {
  DatasetReader reader(dir);
  std::vector<ComplexSignal> out;
  out.reserve(selection.empty() ? reader.size() : selection.size());
  reader.for_each(selection, [&out](ComplexSignal&& s) { out.push_back(std::move(s)); });
  return out;
}

// Split -----------------------------------------------------------------------

void SplitSpec::validate() const {
  for (double f : {train, validation, test}) {
    if (!(f >= 0.0 && f <= 1.0)) throw ValueError("split fractions must lie in [0, 1]");
  }
  if (std::abs(train + validation + test - 1.0) > 1e-9) {
    throw ValueError("split fractions sum to " + real_text(train + validation + test) + ", expected 1");
  }
}

namespace {

// Joint rounding of the class x split table x[c][s] = f_s * n_c. Every cell
// starts at its floor; each class then owes n_c - sum(floors) round-ups and
// each split needs total_s - sum(floors) of them. A cell may take one
// round-up only if it has a fractional part, which keeps every cell within
// one frame of its exact value. The assignment is a small bipartite flow,
// solved by augmenting paths in class order so the result is deterministic.
// Returns false when no such assignment exists; the caller then relaxes the
// fractional-part condition.
bool assign_round_ups(const std::vector<std::array<double, 3>>& exact, std::vector<std::size_t> owed,
                      std::array<std::size_t, 3> needed, bool strict,
                      std::vector<std::array<std::size_t, 3>>& cells) {
  const std::size_t k = exact.size();
  std::vector<std::array<bool, 3>> used(k, {false, false, false});
  auto allowed = [&](std::size_t c, std::size_t s) {
    return !strict || exact[c][s] - std::floor(exact[c][s]) > 1e-9;
  };
  // One unit at a time: find class c with owed[c] > 0 and a path to a split
  // with spare demand, possibly moving other classes' round-ups.
  for (;;) {
    std::size_t pending = 0;
    for (auto o : owed) pending += o;
    if (pending == 0) break;
    bool placed = false;
    for (std::size_t c0 = 0; c0 < k && !placed; ++c0) {
      if (owed[c0] == 0) continue;
      // BFS over classes; an edge class -> split exists if the cell is free,
      // split -> class if that class holds the split's round-up.
      std::vector<std::ptrdiff_t> class_from(k, -2);
      std::array<std::ptrdiff_t, 3> split_from{-1, -1, -1};
      std::vector<std::size_t> queue{c0};
      class_from[c0] = -1;
      std::ptrdiff_t end_split = -1;
      for (std::size_t q = 0; q < queue.size() && end_split < 0; ++q) {
        const std::size_t c = queue[q];
        for (std::size_t sp = 0; sp < 3 && end_split < 0; ++sp) {
          if (used[c][sp] || !allowed(c, sp) || split_from[sp] >= 0) continue;
          split_from[sp] = static_cast<std::ptrdiff_t>(c);
          if (needed[sp] > 0) {
            end_split = static_cast<std::ptrdiff_t>(sp);
            break;
          }
          for (std::size_t d = 0; d < k; ++d) {
            if (used[d][sp] && class_from[d] == -2) {
              class_from[d] = static_cast<std::ptrdiff_t>(sp);
              queue.push_back(d);
            }
          }
        }
      }
      if (end_split < 0) continue;
      // Walk back: give the end split to its class, which releases the split
      // it arrived through, and so on up to c0.
      auto sp = static_cast<std::size_t>(end_split);
      --needed[sp];
      for (;;) {
        const auto c = static_cast<std::size_t>(split_from[sp]);
        used[c][sp] = true;
        if (class_from[c] < 0) break;
        const auto prev = static_cast<std::size_t>(class_from[c]);
        used[c][prev] = false;
        sp = prev;
      }
      --owed[c0];
      placed = true;
    }
    if (!placed) return false;
  }
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t sp = 0; sp < 3; ++sp)
      cells[c][sp] = static_cast<std::size_t>(std::floor(exact[c][sp])) + (used[c][sp] ? 1 : 0);
  return true;
}

}  // namespace

SplitResult split(const DatasetManifest& manifest, const SplitSpec& spec) {
  spec.validate();
  const auto n = manifest.frame_count();
  const auto counts = manifest.class_counts();
  const auto n_val = static_cast<std::size_t>(std::floor(spec.validation * static_cast<double>(n)));
  const auto n_test = static_cast<std::size_t>(std::floor(spec.test * static_cast<double>(n)));
  const std::array<std::size_t, 3> totals{n_val, n_test, n - n_val - n_test};

  // Columns: validation, test, train.
  const std::size_t k = counts.size();
  std::vector<std::array<double, 3>> exact(k);
  std::vector<std::size_t> owed(k);
  std::array<std::size_t, 3> floors{0, 0, 0};
  for (std::size_t c = 0; c < k; ++c) {
    const auto nc = static_cast<double>(counts[c]);
    exact[c] = {spec.validation * nc, spec.test * nc, 0.0};
    exact[c][2] = std::max(0.0, nc - exact[c][0] - exact[c][1]);
    std::size_t sum = 0;
    for (std::size_t sp = 0; sp < 3; ++sp) {
      const auto f = static_cast<std::size_t>(std::floor(exact[c][sp]));
      floors[sp] += f;
      sum += f;
    }
    owed[c] = counts[c] - sum;
  }
  std::array<std::size_t, 3> needed{};
  for (std::size_t sp = 0; sp < 3; ++sp) needed[sp] = totals[sp] - floors[sp];

  SplitResult out;
  std::vector<std::array<std::size_t, 3>> cells(k);
  if (!assign_round_ups(exact, owed, needed, true, cells)) {
    assign_round_ups(exact, owed, needed, false, cells);
    out.warnings.push_back("split sizes force some class more than one frame away from its proportional share");
  }

  std::vector<std::vector<std::size_t>> members(counts.size());
  for (const auto& r : manifest.records) members[r.label].push_back(r.index);

  for (std::size_t c = 0; c < counts.size(); ++c) {
    auto& idx = members[c];
    Rng rng = Rng::stream(spec.seed, c);
    rng.shuffle(std::span<std::size_t>(idx));
    const auto v = cells[c][0];
    const auto t = cells[c][1];
    out.validation.insert(out.validation.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(v));
    out.test.insert(out.test.end(), idx.begin() + static_cast<std::ptrdiff_t>(v),
                    idx.begin() + static_cast<std::ptrdiff_t>(v + t));
    out.train.insert(out.train.end(), idx.begin() + static_cast<std::ptrdiff_t>(v + t), idx.end());

    const auto name = std::string(scheme_name(scheme_from_label(c)));
    if (counts[c] == 0) continue;
    auto note = [&](const char* part, double f, std::size_t got) {
      if (f > 0.0 && got == 0) {
        out.warnings.push_back("class " + name + " (" + std::to_string(counts[c]) + " frames) has no " + part +
                               " frames");
      }
    };
    note("train", spec.train, counts[c] - v - t);
    note("validation", spec.validation, v);
    note("test", spec.test, t);
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.validation.begin(), out.validation.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

// Merge -----------------------------------------------------------------------

std::vector<std::vector<std::size_t>> merge_selection(std::span<const std::size_t> available,
                                                      std::span<const std::size_t> take, std::uint64_t seed) {
  if (available.size() != take.size()) throw ValueError("merge needs one take count per source");
  std::vector<std::vector<std::size_t>> out(available.size());
  for (std::size_t s = 0; s < available.size(); ++s) {
    if (take[s] > available[s]) {
      throw ValueError("source " + std::to_string(s) + " has " + std::to_string(available[s]) +
                       " frames, cannot take " + std::to_string(take[s]));
    }
    std::vector<std::size_t> idx(available[s]);
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng = Rng::stream(seed, s);
    rng.shuffle(std::span<std::size_t>(idx));
    idx.resize(take[s]);
    std::sort(idx.begin(), idx.end());
    out[s] = std::move(idx);
  }
  return out;
}

DatasetManifest merge_datasets(std::span<const fs::path> sources, std::span<const std::size_t> take,
                               std::uint64_t seed, const fs::path& out_dir) {
  if (sources.empty()) throw ValueError("merge needs at least one source");
  std::vector<std::size_t> available;
  std::vector<std::string> tags;
  std::string description = "merge of";
  for (const auto& src : sources) {
    available.push_back(read_manifest(src).frame_count());
    auto tag = src.lexically_normal().generic_string();
    while (tag.size() > 1 && tag.back() == '/') tag.pop_back();
    std::replace_if(tag.begin(), tag.end(), [](unsigned char c) { return std::isspace(c) != 0; }, '_');
    if (std::find(tags.begin(), tags.end(), tag) != tags.end()) {
      throw ValueError("merge source '" + tag + "' is listed twice");
    }
    description += " " + tag;
    tags.push_back(std::move(tag));
  }
  const auto picks = merge_selection(available, take, seed);
  DatasetWriter writer(out_dir, description, seed);
  for (std::size_t s = 0; s < sources.size(); ++s) {
    DatasetReader reader(sources[s]);
    reader.for_each(picks[s], [&](ComplexSignal&& frame) { writer.append(frame, tags[s]); });
  }
  return writer.finish();
}

// Import --------------------------------------------------------------------

namespace {

std::vector<ComplexSignal> raw_adapter(const fs::path& input, const ImportOptions& options) {
  if (fs::is_directory(input)) return read_dataset(input);
  if (options.frame_length == 0) throw ValueError("frame length must be positive");
  std::ifstream is(input, std::ios::binary);
  if (!is) throw IoError("cannot open " + input.string());
  const auto size = fs::file_size(input);
  const auto frame_bytes = static_cast<std::uint64_t>(options.frame_length) * kBytesPerSample;
  if (size == 0 || size % frame_bytes != 0) {
    throw FormatError(input.string() + " holds " + std::to_string(size) + " bytes, not a whole number of " +
                      std::to_string(options.frame_length) + "-sample frames");
  }
  std::vector<ComplexSignal> out;
  std::vector<unsigned char> bytes(frame_bytes);
  for (std::uint64_t f = 0; f < size / frame_bytes; ++f) {
    is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(frame_bytes));
    if (!is) throw IoError("read failed in " + input.string() + " at frame " + std::to_string(f));
    ComplexSignal s;
    s.samples = decode_samples(bytes);
    s.meta = options.default_meta;
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<ComplexSignal> cspb_adapter(const fs::path& input, const ImportOptions&) {
  throw FormatError("no reader for the CSPB archive layout is built in (input " + input.string() +
                    "); convert it to interleaved float32 frames for the 'raw' adapter, or register "
                    "a reader under the name 'cspb'");
}

struct Registry {
  std::mutex mutex;
  std::map<std::string, ImportAdapter> adapters{{"raw", raw_adapter}, {"cspb", cspb_adapter}};
};

Registry& registry() {
  static Registry r;
  return r;
}

}  // namespace

void register_import_adapter(const std::string& name, ImportAdapter adapter) {
  if (name.empty() || !adapter) throw ValueError("adapter needs a name and a callable");
  auto& r = registry();
  std::lock_guard lock(r.mutex);
  r.adapters[name] = std::move(adapter);
}

std::vector<std::string> import_adapter_names() {
  auto& r = registry();
  std::lock_guard lock(r.mutex);
  std::vector<std::string> names;
  for (const auto& [k, v] : r.adapters) names.push_back(k);
  return names;
}

ImportResult import_external(const fs::path& input, const std::string& adapter, const fs::path& out_dir,
                             const ImportOptions& options) {
  ImportAdapter fn;
  {
    auto& r = registry();
    std::lock_guard lock(r.mutex);
    auto it = r.adapters.find(adapter);
    if (it == r.adapters.end()) {
      std::string known;
      for (const auto& [name, unused] : r.adapters) known += (known.empty() ? "" : ", ") + name;
      throw ValueError("unknown import adapter '" + adapter + "' (available: " + known + ")");
    }
    fn = it->second;
  }
  check_tag(options.source_tag, "source tag");
  auto frames = fn(input, options);
  ImportResult result;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const double p = mean_power(frames[i].samples);
    if (!std::isfinite(p)) throw FormatError("imported frame " + std::to_string(i) + " has non-finite samples");
    if (std::abs(p - 1.0) > options.power_tolerance) {
      result.flagged.push_back(i);
      if (options.normalize) normalize_unit_power(frames[i].samples);
    }
  }
  std::vector<std::string> sources(frames.size(), options.source_tag);
  result.manifest = write_dataset(frames, out_dir, "import of " + input.filename().string() + " via " + adapter,
                                  0, sources);
  return result;
}

}  // namespace capsamc
