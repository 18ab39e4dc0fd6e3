#include <zlib.h>

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "capsamc/capsnet.hpp"

namespace capsamc {
namespace {

constexpr char kMagic[8] = {'C', 'A', 'P', 'S', 'N', 'E', 'T', '\0'};

template <typename T>
constexpr std::uint8_t dtype_code() {
  return std::is_same_v<T, float> ? 1 : 2;
}

class Writer {
 public:
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const char*>(data);
    buf_.append(p, n);
  }
  template <typename U>
  void uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void text(const std::string& s) {
    uint<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  template <typename T>
  void real(T v) {
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    uint(std::bit_cast<U>(v));
  }
  const std::string& buffer() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(std::string data, std::string origin) : buf_(std::move(data)), origin_(std::move(origin)) {}

  void need(std::size_t n, const char* what) const {
    if (buf_.size() - pos_ < n) {
      throw FormatError("checkpoint " + origin_ + " is truncated while reading " + what);
    }
  }
  template <typename U>
  U uint(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      v |= static_cast<U>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return v;
  }
  std::string text(const char* what) {
    const auto n = uint<std::uint32_t>(what);
    need(n, what);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  template <typename T>
  T real(const char* what) {
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    return std::bit_cast<T>(uint<U>(what));
  }
  std::size_t position() const { return pos_; }
  const std::string& buffer() const { return buf_; }

 private:
  std::string buf_;
  std::string origin_;
  std::size_t pos_ = 0;
};

std::string provenance_text(const Provenance& p) {
  char acc[64];
  auto res = std::to_chars(acc, acc + sizeof(acc), p.validation_accuracy);
  std::ostringstream os;
  os << "dataset_tag=" << p.dataset_tag << '\n'
     << "epoch=" << p.epoch << '\n'
     << "validation_accuracy=" << std::string(acc, res.ptr) << '\n';
  return os.str();
}

Provenance parse_provenance(const std::string& text) {
  Provenance p;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("checkpoint provenance line without '='");
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    if (key == "dataset_tag") {
      p.dataset_tag = value;
    } else if (key == "epoch") {
      std::from_chars(value.data(), value.data() + value.size(), p.epoch);
    } else if (key == "validation_accuracy") {
      std::from_chars(value.data(), value.data() + value.size(), p.validation_accuracy);
    }
  }
  return p;
}

template <typename T>
void write_tensors(Writer& w, const ParamMap<T>& map, const std::string& prefix) {
  for (const auto& [name, t] : map) {
    w.text(prefix + name);
    w.uint<std::uint8_t>(dtype_code<T>());
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) w.uint<std::uint64_t>(e);
    for (T v : t.data()) w.real(v);
  }
}

std::uint32_t crc_of(const std::string& buf, std::size_t n) {
  return static_cast<std::uint32_t>(crc32(0L, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(n)));
}

}  // namespace

template <typename T>
void save_model(const Model<T>& model, const std::filesystem::path& path) {
  Writer w;
  w.bytes(kMagic, sizeof(kMagic));
  w.uint<std::uint32_t>(kCheckpointVersion);
  w.uint<std::uint32_t>(model.config.digest());
  w.text(model.config.serialize());
  w.text(provenance_text(model.provenance));
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(model.params.size() + model.buffers.size()));
  write_tensors(w, model.params, "param:");
  write_tensors(w, model.buffers, "buffer:");
  w.uint<std::uint32_t>(crc_of(w.buffer(), w.buffer().size()));

  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
    out.flush();
    if (!out) {
      out.close();
      std::filesystem::remove(tmp);
      throw IoError("failed writing checkpoint " + path.string());
    }
  }
  std::filesystem::rename(tmp, path);
}

template <typename T>
Model<T> load_model(const std::filesystem::path& path, const NetworkConfig* expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader r(std::move(data), path.string());

  r.need(sizeof(kMagic), "magic");
  if (std::memcmp(r.buffer().data(), kMagic, sizeof(kMagic)) != 0) {
    throw FormatError(path.string() + " is not a capsnet checkpoint (bad magic)");
  }
  for (std::size_t i = 0; i < sizeof(kMagic); ++i) r.uint<std::uint8_t>("magic");
  const auto version = r.uint<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  const auto digest = r.uint<std::uint32_t>("config digest");
  const NetworkConfig config = NetworkConfig::parse(r.text("network config"));
  if (config.digest() != digest) throw FormatError("checkpoint config digest mismatch");
  if (expected != nullptr && !(*expected == config)) {
    if (expected->branch_count() != config.branch_count()) {
      throw ShapeError("checkpoint has " + std::to_string(config.branch_count()) + " branches, expected " +
                       std::to_string(expected->branch_count()));
    }
    throw ShapeError("checkpoint network config differs from the expected config");
  }
  const Provenance provenance = parse_provenance(r.text("provenance"));

  // Start from a freshly built model so every expected tensor is present and
  // shaped by the config; the file must then supply each one exactly once.
  Model<T> model = build<T>(config);
  model.provenance = provenance;
  const auto count = r.uint<std::uint32_t>("tensor count");
  if (count != model.params.size() + model.buffers.size()) {
    throw ShapeError("checkpoint holds " + std::to_string(count) + " tensors, config implies " +
                     std::to_string(model.params.size() + model.buffers.size()));
  }
  std::set<std::string> seen;
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::string full = r.text("tensor name");
    const auto code = r.uint<std::uint8_t>("dtype");
    if (code != dtype_code<T>()) throw FormatError("tensor " + full + " has dtype code " + std::to_string(code));
    const auto rank = r.uint<std::uint32_t>("rank");
    Shape shape(rank);
    for (auto& e : shape) e = static_cast<std::size_t>(r.uint<std::uint64_t>("extent"));
    ParamMap<T>* map = nullptr;
    std::string name;
    if (full.rfind("param:", 0) == 0) {
      map = &model.params;
      name = full.substr(6);
    } else if (full.rfind("buffer:", 0) == 0) {
      map = &model.buffers;
      name = full.substr(7);
    }
    if (map == nullptr || !map->contains(name)) throw FormatError("checkpoint has unexpected tensor " + full);
    auto it = map->find(name);
    if (it->second.shape() != shape) {
      throw ShapeError("tensor " + full + " has shape " + shape_str(shape) + ", config implies " +
                       shape_str(it->second.shape()));
    }
    if (!seen.insert(full).second) throw FormatError("checkpoint repeats tensor " + full);
    r.need(shape_size(shape) * sizeof(T), full.c_str());
    for (std::size_t i = 0; i < it->second.size(); ++i) it->second[i] = r.real<T>(full.c_str());
  }
  const std::size_t body = r.position();
  const auto crc = r.uint<std::uint32_t>("checksum");
  if (crc != crc_of(r.buffer(), body)) throw FormatError("checkpoint " + path.string() + " fails its checksum");
  if (r.position() != r.buffer().size()) throw FormatError("checkpoint " + path.string() + " has trailing bytes");
  return model;
}

template void save_model(const Model<float>&, const std::filesystem::path&);
template void save_model(const Model<double>&, const std::filesystem::path&);
template Model<float> load_model(const std::filesystem::path&, const NetworkConfig*);
template Model<double> load_model(const std::filesystem::path&, const NetworkConfig*);

}  // namespace capsamc
