#include <doctest.h>

#include <chrono>
#include <fstream>
#include <set>
#include <sstream>

#include "capsamc/dataio.hpp"
#include "capsamc/error.hpp"
#include "testutil.hpp"

using namespace capsamc;
namespace fs = std::filesystem;

namespace {

DatasetProfile small_profile(std::size_t length = 256) {
  auto p = builtin_profile("toy");
  p.length = length;
  return p;
}

std::set<std::size_t> as_set(const std::vector<std::size_t>& v) { return {v.begin(), v.end()}; }

// Manifest records only; no frames behind them.
DatasetManifest fake_manifest(const std::vector<std::size_t>& labels) {
  DatasetManifest m;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    FrameRecord r;
    r.index = i;
    r.label = labels[i];
    r.meta.scheme = scheme_from_label(labels[i]);
    r.samples = 1;
    r.offset = 8 * i;
    m.records.push_back(r);
  }
  return m;
}

}  // namespace

TEST_CASE("write and read round trip") {
  auto dir = testutil::scratch_dir("roundtrip");
  auto frames = generate(small_profile(), 20, 3);
  auto manifest = write_dataset(frames, dir / "ds", "unit test", 3);
  CHECK(manifest.frame_count() == 20);
  CHECK(fs::file_size(dir / "ds" / kBlobFile) == 20 * 256 * 8);

  // Manifest: five header lines plus one line per frame.
  std::ifstream in(dir / "ds" / kManifestFile);
  std::size_t records = 0;
  for (std::string line; std::getline(in, line);)
    if (!line.starts_with("#")) ++records;
  CHECK(records == 20);

  auto back = read_dataset(dir / "ds");
  REQUIRE(back.size() == 20);
  for (std::size_t i = 0; i < 20; ++i) {
    CHECK(back[i].samples == frames[i].samples);
    CHECK(back[i].meta == frames[i].meta);
  }
  auto reread = read_manifest(dir / "ds");
  CHECK(reread == manifest);
  CHECK(reread.description == "unit test");
  CHECK(reread.seed == 3);
  CHECK(reread.records[4].source == "toy");
  fs::remove_all(dir);
}

TEST_CASE("full-length frame occupies 262144 bytes") {
  auto dir = testutil::scratch_dir("fulllen");
  auto frames = generate(builtin_profile("ds1"), 1, 1);
  write_dataset(frames, dir / "ds", "one", 1);
  CHECK(fs::file_size(dir / "ds" / kBlobFile) == 262144);
  fs::remove_all(dir);
}

TEST_CASE("metadata survives exactly") {
  auto dir = testutil::scratch_dir("meta");
  ComplexSignal f;
  f.samples = {{1.0f, -0.0f}, {1e-38f, 3.4e38f}, {-2.5f, 0.1f}};
  f.meta.scheme = Scheme::kDqpsk;
  f.meta.sps = 17;
  f.meta.rolloff = 0.1 + 1e-16;
  f.meta.cfo = -0.0123456789012345;
  f.meta.inband_snr_db = 1.0 / 3.0;
  f.meta.rng_seed = 18446744073709551615ull;
  f.meta.profile_tag = "tag-x";
  f.meta.dqpsk = DqpskVariant::kPi4;
  ComplexSignal noiseless = f;
  noiseless.meta.inband_snr_db = std::numeric_limits<double>::infinity();
  std::vector<ComplexSignal> frames{f, noiseless};
  write_dataset(frames, dir / "ds", "exact", 0);
  auto back = read_dataset(dir / "ds");
  CHECK(back[0].meta == f.meta);
  CHECK(back[1].meta == noiseless.meta);
  CHECK(std::bit_cast<std::uint32_t>(back[0].samples[0].imag()) == std::bit_cast<std::uint32_t>(-0.0f));
  CHECK(back[0].samples == f.samples);
  fs::remove_all(dir);
}

TEST_CASE("selection order and streaming") {
  auto dir = testutil::scratch_dir("select");
  auto frames = generate(small_profile(), 8, 4);
  write_dataset(frames, dir / "ds", "sel", 4);
  std::vector<std::size_t> sel{5, 2};
  auto picked = read_dataset(dir / "ds", sel);
  REQUIRE(picked.size() == 2);
  CHECK(picked[0].samples == frames[5].samples);
  CHECK(picked[1].samples == frames[2].samples);

  DatasetReader reader(dir / "ds");
  std::vector<Scheme> seen;
  reader.for_each({}, [&](ComplexSignal&& s) { seen.push_back(s.meta.scheme); });
  CHECK(seen.size() == 8);
  CHECK(seen[3] == frames[3].meta.scheme);
  CHECK_THROWS_AS(reader.read(8), ValueError);
  fs::remove_all(dir);
}

TEST_CASE("truncated and corrupted blobs name the frame") {
  auto dir = testutil::scratch_dir("trunc");
  auto frames = generate(small_profile(), 6, 5);
  write_dataset(frames, dir / "ds", "t", 5);
  const auto blob = dir / "ds" / kBlobFile;
  fs::resize_file(blob, 256 * 8 * 3 + 100);
  DatasetReader reader(dir / "ds");
  CHECK(reader.read(2).samples == frames[2].samples);
  try {
    reader.read(3);
    FAIL("expected rejection");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("frame 3") != std::string::npos);
  }
  try {
    read_dataset(dir / "ds");
    FAIL("expected rejection");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("frame 3") != std::string::npos);
  }

  {
    std::fstream f(blob, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(256 * 8 + 17);
    f.put('\x7f');
  }
  try {
    DatasetReader(dir / "ds").read(1);
    FAIL("expected rejection");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("frame 1") != std::string::npos);
    CHECK(std::string(e.what()).find("checksum") != std::string::npos);
  }
  fs::remove_all(dir);
}

TEST_CASE("malformed manifests are rejected") {
  auto dir = testutil::scratch_dir("badmanifest");
  write_dataset(generate(small_profile(), 2, 1), dir / "ds", "m", 1);
  const auto path = dir / "ds" / kManifestFile;
  std::ifstream in(path);
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();
  auto rewrite = [&](const std::string& from, const std::string& to) {
    std::string t = text;
    t.replace(t.find(from), from.size(), to);
    std::ofstream(path, std::ios::trunc) << t;
  };
  rewrite("label=1", "label=3");
  CHECK_THROWS_AS(read_manifest(dir / "ds"), FormatError);
  rewrite("label=1", "label=1 colour=red");
  CHECK_THROWS_AS(read_manifest(dir / "ds"), FormatError);
  rewrite("# format=1", "# format=7");
  CHECK_THROWS_AS(read_manifest(dir / "ds"), FormatError);
  rewrite("# frames=2", "# frames=3");
  CHECK_THROWS_AS(read_manifest(dir / "ds"), FormatError);
  CHECK_THROWS_AS(read_manifest(dir / "missing"), Error);
  fs::remove_all(dir);
}

TEST_CASE("failed writer leaves nothing behind") {
  auto dir = testutil::scratch_dir("partial");
  auto frames = generate(small_profile(), 2, 1);
  {
    DatasetWriter w(dir / "ds", "partial", 1);
    w.append(frames[0]);
  }
  CHECK(!fs::exists(dir / "ds" / kBlobFile));
  CHECK(!fs::exists(dir / "ds" / kManifestFile));
  CHECK(fs::is_empty(dir / "ds"));
  std::vector<ComplexSignal> none;
  CHECK_THROWS_AS(write_dataset(none, dir / "empty", "e", 1), ValueError);
  fs::remove_all(dir);
}

TEST_CASE("metadata-only read of a 112000-frame manifest") {
  auto dir = testutil::scratch_dir("bigmanifest");
  fs::create_directories(dir / "ds");
  {
    std::ofstream out(dir / "ds" / kManifestFile);
    out << "# capsamc-dataset\n# format=1\n# seed=9\n# frames=112000\n# description=big\n";
    for (std::size_t i = 0; i < 112000; ++i) {
      out << "index=" << i << " scheme=" << scheme_name(all_schemes()[i % 8]) << " label=" << i % 8
          << " sps=4 rolloff=0.5 cfo=0 snr_db=5 seed=" << i << " dqpsk=standard profile_tag=ds1 source=ds1 offset="
          << i * 262144 << " samples=32768 crc32=0\n";
    }
  }
  // No samples.bin exists at all.
  const auto t0 = std::chrono::steady_clock::now();
  auto m = read_manifest(dir / "ds");
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  CHECK(m.frame_count() == 112000);
  CHECK(m.class_counts()[7] == 14000);
  CHECK(seconds < 10.0);
  CHECK_THROWS_AS(DatasetReader(dir / "ds").read(0), Error);
  fs::remove_all(dir);
}

TEST_CASE("split") {
  SUBCASE("1000 frames, default fractions") {
    std::vector<std::size_t> labels(1000);
    for (std::size_t i = 0; i < 1000; ++i) labels[i] = i % 8;
    auto m = fake_manifest(labels);
    auto s = split(m, SplitSpec{});
    CHECK(s.train.size() == 700);
    CHECK(s.validation.size() == 50);
    CHECK(s.test.size() == 250);
    auto all = as_set(s.train);
    for (auto i : s.validation) CHECK(all.insert(i).second);
    for (auto i : s.test) CHECK(all.insert(i).second);
    CHECK(all.size() == 1000);
    CHECK(std::is_sorted(s.train.begin(), s.train.end()));
    auto again = split(m, SplitSpec{});
    CHECK(again.train == s.train);
    CHECK(again.test == s.test);
    SplitSpec other;
    other.seed = 1;
    CHECK(split(m, other).test != s.test);
  }
  SUBCASE("stratification within one frame") {
    Rng rng(3);
    for (int trial = 0; trial < 30; ++trial) {
      const std::size_t n = 20 + rng.uniform_int(0, 600);
      std::vector<std::size_t> labels(n);
      for (auto& l : labels) l = static_cast<std::size_t>(rng.uniform_int(0, 7));
      auto m = fake_manifest(labels);
      SplitSpec spec;
      spec.validation = rng.uniform(0.0, 0.3);
      spec.test = rng.uniform(0.0, 0.3);
      spec.train = 1.0 - spec.validation - spec.test;
      spec.seed = static_cast<std::uint64_t>(trial);
      auto s = split(m, spec);
      CHECK(s.validation.size() == static_cast<std::size_t>(std::floor(spec.validation * n)));
      CHECK(s.test.size() == static_cast<std::size_t>(std::floor(spec.test * n)));
      CHECK(s.train.size() + s.validation.size() + s.test.size() == n);
      auto counts = m.class_counts();
      auto check = [&](const std::vector<std::size_t>& part, double fraction) {
        std::vector<std::size_t> per(8, 0);
        for (auto i : part) ++per[labels[i]];
        for (std::size_t c = 0; c < 8; ++c)
          CHECK(std::abs(static_cast<double>(per[c]) - fraction * static_cast<double>(counts[c])) <= 1.0 + 1e-9);
      };
      check(s.train, spec.train);
      check(s.validation, spec.validation);
      check(s.test, spec.test);
    }
  }
  SUBCASE("tiny class warns") {
    auto m = fake_manifest({0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1});
    auto s = split(m, SplitSpec{});
    CHECK(!s.warnings.empty());
    CHECK(s.train.size() + s.validation.size() + s.test.size() == 11);
  }
  SUBCASE("invalid fractions") {
    SplitSpec spec;
    spec.train = 0.8;
    CHECK_THROWS_AS(spec.validate(), ValueError);
    spec.train = 1.2;
    spec.test = -0.25;
    CHECK_THROWS_AS(spec.validate(), ValueError);
  }
}

TEST_CASE("merge") {
  auto dir = testutil::scratch_dir("merge");
  auto a = generate(small_profile(), 800, 1);
  auto b_profile = small_profile();
  b_profile.name = "other";
  auto b = generate(b_profile, 800, 2);
  write_dataset(a, dir / "a", "a", 1);
  write_dataset(b, dir / "b", "b", 2);
  std::vector<fs::path> sources{dir / "a", dir / "b"};

  std::vector<std::size_t> take{500, 500};
  auto m = merge_datasets(sources, take, 9, dir / "mixed");
  CHECK(m.frame_count() == 1000);
  std::size_t from_a = 0, from_b = 0;
  for (const auto& r : m.records) {
    if (r.source == sources[0].lexically_normal().generic_string()) ++from_a;
    else if (r.source == sources[1].lexically_normal().generic_string()) ++from_b;
  }
  CHECK(from_a == 500);
  CHECK(from_b == 500);

  // Merged frames carry their source frame's samples and metadata.
  auto picks = merge_selection(std::vector<std::size_t>{800, 800}, take, 9);
  auto merged = read_dataset(dir / "mixed");
  for (std::size_t k = 0; k < 500; k += 37) {
    CHECK(merged[k].samples == a[picks[0][k]].samples);
    CHECK(merged[k].meta == a[picks[0][k]].meta);
    CHECK(merged[500 + k].meta == b[picks[1][k]].meta);
  }
  CHECK(as_set(picks[0]).size() == 500);

  std::vector<std::size_t> all{800, 800};
  auto cat = merge_datasets(sources, all, 9, dir / "cat");
  CHECK(cat.frame_count() == 1600);
  auto catted = read_dataset(dir / "cat");
  CHECK(catted[0].samples == a[0].samples);
  CHECK(catted[1599].samples == b[799].samples);

  std::vector<std::size_t> too_many{801, 1};
  CHECK_THROWS_AS(merge_datasets(sources, too_many, 9, dir / "bad"), ValueError);
  std::vector<fs::path> twice{dir / "a", dir / "a"};
  CHECK_THROWS_AS(merge_datasets(twice, take, 9, dir / "bad2"), ValueError);
  fs::remove_all(dir);
}

TEST_CASE("import adapters") {
  auto dir = testutil::scratch_dir("import");
  auto frames = generate(small_profile(), 6, 7);
  write_dataset(frames, dir / "src", "src", 7);

  SUBCASE("raw dataset directory is an identity import") {
    auto r = import_external(dir / "src", "raw", dir / "out");
    CHECK(r.flagged.empty());
    auto back = read_dataset(dir / "out");
    REQUIRE(back.size() == 6);
    for (std::size_t i = 0; i < 6; ++i) {
      CHECK(back[i].samples == frames[i].samples);
      CHECK(back[i].meta == frames[i].meta);
    }
  }
  SUBCASE("headerless raw file") {
    ImportOptions opt;
    opt.frame_length = 256;
    opt.default_meta.scheme = Scheme::k16qam;
    auto r = import_external(dir / "src" / kBlobFile, "raw", dir / "out", opt);
    CHECK(r.manifest.frame_count() == 6);
    auto back = read_dataset(dir / "out");
    CHECK(back[4].samples == frames[4].samples);
    CHECK(back[4].meta.scheme == Scheme::k16qam);
    opt.frame_length = 250;
    CHECK_THROWS_AS(import_external(dir / "src" / kBlobFile, "raw", dir / "out2", opt), FormatError);
  }
  SUBCASE("power check flags and optionally normalizes") {
    auto scaled = frames;
    for (auto& v : scaled[1].samples) v *= 2.0f;
    for (auto& v : scaled[4].samples) v *= 0.5f;
    write_dataset(scaled, dir / "scaled", "scaled", 7);
    auto flagged = import_external(dir / "scaled", "raw", dir / "kept");
    CHECK(flagged.flagged == std::vector<std::size_t>{1, 4});
    CHECK(std::abs(mean_power(read_dataset(dir / "kept")[1].samples) - 4.0) < 1e-3);
    ImportOptions opt;
    opt.normalize = true;
    auto fixed = import_external(dir / "scaled", "raw", dir / "fixed", opt);
    CHECK(fixed.flagged == std::vector<std::size_t>{1, 4});
    for (const auto& f : read_dataset(dir / "fixed")) CHECK(std::abs(mean_power(f.samples) - 1.0) < 1e-6);
  }
  SUBCASE("unknown adapter and stub") {
    try {
      import_external(dir / "src", "hdf5", dir / "out");
      FAIL("expected rejection");
    } catch (const ValueError& e) {
      CHECK(std::string(e.what()).find("raw") != std::string::npos);
    }
    CHECK_THROWS_AS(import_external(dir / "src", "cspb", dir / "out"), FormatError);
  }
  SUBCASE("custom adapters plug in") {
    register_import_adapter("constant", [](const fs::path&, const ImportOptions&) {
      ComplexSignal s;
      s.samples.assign(16, {1.0f, 0.0f});
      return std::vector<ComplexSignal>{s, s};
    });
    auto names = import_adapter_names();
    CHECK(std::find(names.begin(), names.end(), "constant") != names.end());
    CHECK(import_external(dir / "src", "constant", dir / "const").manifest.frame_count() == 2);
  }
  fs::remove_all(dir);
}
