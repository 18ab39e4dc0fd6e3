#include "capsamc/capsnet.hpp"

#include <zlib.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>
#include <thread>

#include "capsamc/rng.hpp"

namespace capsamc {
namespace {

std::string branch_key(std::size_t i, const char* leaf) {
  return "branch" + std::to_string(i) + "." + leaf;
}

std::string spec_str(const ConvSpec& c) {
  return std::to_string(c.kernel) + "," + std::to_string(c.stride) + "," + std::to_string(c.out_channels);
}

std::vector<std::uint64_t> parse_uints(const std::string& text, const std::string& key) {
  std::vector<std::uint64_t> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t comma = std::min(text.find(',', pos), text.size());
    std::uint64_t v = 0;
    const char* first = text.data() + pos;
    const char* last = text.data() + comma;
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc() || ptr != last) throw FormatError("network config: bad integer list for " + key);
    out.push_back(v);
    pos = comma + 1;
  }
  return out;
}

ConvSpec parse_conv(const std::string& text, const std::string& key) {
  const auto v = parse_uints(text, key);
  if (v.size() != 3) throw FormatError("network config: " + key + " needs kernel,stride,out_channels");
  return {v[0], v[1], v[2]};
}

template <typename T>
void glorot(Tensor<T>& w, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<T>(rng.uniform(-limit, limit));
}

template <typename T>
void add_conv(Model<T>& m, const std::string& prefix, std::size_t in_ch, const ConvSpec& spec, Rng& rng) {
  Tensor<T> w(Shape{spec.out_channels, in_ch, spec.kernel});
  glorot(w, in_ch * spec.kernel, spec.out_channels * spec.kernel, rng);
  m.params.emplace(prefix + ".weight", std::move(w));
  m.params.emplace(prefix + ".bias", Tensor<T>(Shape{spec.out_channels}));
}

template <typename T>
void add_fc(Model<T>& m, const std::string& prefix, std::size_t in_dim, std::size_t out_dim, Rng& rng) {
  Tensor<T> w(Shape{out_dim, in_dim});
  glorot(w, in_dim, out_dim, rng);
  m.params.emplace(prefix + ".weight", std::move(w));
  m.params.emplace(prefix + ".bias", Tensor<T>(Shape{out_dim}));
}

template <typename T>
void add_bn(Model<T>& m, const std::string& prefix, std::size_t channels) {
  m.params.emplace(prefix + ".gamma", Tensor<T>(Shape{channels}, T(1)));
  m.params.emplace(prefix + ".beta", Tensor<T>(Shape{channels}));
  m.buffers.emplace(prefix + ".running_mean", Tensor<T>(Shape{channels}));
  m.buffers.emplace(prefix + ".running_var", Tensor<T>(Shape{channels}, T(1)));
}

// Runs fn(i) for i in [0, n) on up to `threads` workers with a static
// round-robin assignment.
template <typename Fn>
void for_each_branch(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::clamp<std::size_t>(threads, 1, n);
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(threads);
  {
    std::vector<std::jthread> workers;
    for (std::size_t w = 0; w < threads; ++w) {
      workers.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < n; i += threads) fn(i);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

template <typename T>
void check_batch(const Model<T>& model, const Tensor<T>& batch) {
  const auto& c = model.config;
  if (batch.rank() != 3 || batch.dim(1) != c.in_channels || batch.dim(2) != c.input_length) {
    throw ShapeError("capsnet expects a B x " + std::to_string(c.in_channels) + " x " +
                     std::to_string(c.input_length) + " batch, got " + shape_str(batch.shape()));
  }
}

// Shared forward pass. `buffers` is the running-statistics map written in
// train mode (a scratch copy in inference mode).
template <typename T>
ForwardResult<T> run_forward(const Model<T>& model, ParamMap<T>& buffers, const Tensor<T>& batch,
                             Mode mode, std::size_t threads, bool keep_cache) {
  check_batch(model, batch);
  require_finite(batch, "capsnet input batch");
  const auto& c = model.config;
  const auto& p = model.params;
  const std::size_t n = c.branch_count();

  ForwardResult<T> r;
  ForwardCache<T>& cache = r.cache;
  cache.mode = mode;

  Tensor<T> z = conv1d(batch, p.at("feature.conv.weight"), p.at("feature.conv.bias"), c.feature.stride);
  z = batchnorm(z, p.at("feature.bn.gamma"), p.at("feature.bn.beta"), mode,
                buffers.at("feature.bn.running_mean"), buffers.at("feature.bn.running_var"),
                keep_cache ? &cache.feature_bn : nullptr);
  Tensor<T> feature = activation(z, Activation::kTanh);

  std::vector<Tensor<T>> logits(n);
  if (keep_cache) cache.branches.resize(n);
  for_each_branch(n, threads, [&](std::size_t i) {
    BranchCache<T> local;
    BranchCache<T>& bc = keep_cache ? cache.branches[i] : local;
    const auto key = [i](const char* leaf) { return branch_key(i, leaf); };
    Tensor<T> h = conv1d(feature, p.at(key("conv1.weight")), p.at(key("conv1.bias")), c.branch_conv1.stride);
    h = batchnorm(h, p.at(key("bn1.gamma")), p.at(key("bn1.beta")), mode, buffers.at(key("bn1.running_mean")),
                  buffers.at(key("bn1.running_var")), keep_cache ? &bc.bn1 : nullptr);
    bc.act1 = activation(h, Activation::kTanh);
    h = conv1d(bc.act1, p.at(key("conv2.weight")), p.at(key("conv2.bias")), c.branch_conv2.stride);
    h = batchnorm(h, p.at(key("bn2.gamma")), p.at(key("bn2.beta")), mode, buffers.at(key("bn2.running_mean")),
                  buffers.at(key("bn2.running_var")), keep_cache ? &bc.bn2 : nullptr);
    bc.act2 = activation(h, Activation::kTanh);
    bc.pooled = avgpool1d(bc.act2, c.pool.window, c.pool.stride);
    h = fully_connected(bc.pooled, p.at(key("fc.weight")), p.at(key("fc.bias")));
    bc.bn3_out = batchnorm(h, p.at(key("bn3.gamma")), p.at(key("bn3.beta")), mode,
                           buffers.at(key("bn3.running_mean")), buffers.at(key("bn3.running_var")),
                           keep_cache ? &bc.bn3 : nullptr);
    bc.relu_out = activation(bc.bn3_out, Activation::kRelu);
    logits[i] = fully_connected(bc.relu_out, p.at(key("point.weight")), p.at(key("point.bias")));
    if (!keep_cache) bc = BranchCache<T>{};
  });

  r.logits = depth_concat<T>(logits, n);
  require_finite(r.logits, "capsnet logits");
  r.probabilities = softmax(r.logits);
  if (keep_cache) {
    cache.input = batch;
    cache.feature_act = std::move(feature);
    cache.probabilities = r.probabilities;
  }
  return r;
}

}  // namespace

std::string NetworkConfig::serialize() const {
  std::ostringstream os;
  os << "in_channels=" << in_channels << '\n';
  os << "input_length=" << input_length << '\n';
  os << "classes=";
  for (std::size_t i = 0; i < classes.size(); ++i) os << (i ? "," : "") << scheme_name(classes[i]);
  os << '\n';
  os << "feature=" << spec_str(feature) << '\n';
  os << "branch_conv1=" << spec_str(branch_conv1) << '\n';
  os << "branch_conv2=" << spec_str(branch_conv2) << '\n';
  os << "pool=" << pool.window << ',' << pool.stride << '\n';
  os << "capsule_width=" << capsule_width << '\n';
  os << "seed=" << seed << '\n';
  return os.str();
}

NetworkConfig NetworkConfig::parse(const std::string& text) {
  NetworkConfig c;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("network config: expected key=value, got '" + line + "'");
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    const auto one = [&] {
      const auto v = parse_uints(value, key);
      if (v.size() != 1) throw FormatError("network config: " + key + " takes one integer");
      return v[0];
    };
    if (key == "in_channels") {
      c.in_channels = one();
    } else if (key == "input_length") {
      c.input_length = one();
    } else if (key == "classes") {
      c.classes.clear();
      std::istringstream names(value);
      std::string name;
      while (std::getline(names, name, ',')) c.classes.push_back(parse_scheme(name));
    } else if (key == "feature") {
      c.feature = parse_conv(value, key);
    } else if (key == "branch_conv1") {
      c.branch_conv1 = parse_conv(value, key);
    } else if (key == "branch_conv2") {
      c.branch_conv2 = parse_conv(value, key);
    } else if (key == "pool") {
      const auto v = parse_uints(value, key);
      if (v.size() != 2) throw FormatError("network config: pool needs window,stride");
      c.pool = {v[0], v[1]};
    } else if (key == "capsule_width") {
      c.capsule_width = one();
    } else if (key == "seed") {
      c.seed = one();
    } else {
      throw FormatError("network config: unknown key '" + key + "'");
    }
  }
  return c;
}

std::uint32_t NetworkConfig::digest() const {
  const std::string text = serialize();
  return static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(text.data()), static_cast<uInt>(text.size())));
}

NetworkConfig toy_network_config(std::size_t length) {
  NetworkConfig c;
  c.input_length = length;
  c.branch_conv2.stride = 2;
  return c;
}

std::string ShapeTrace::describe(const NetworkConfig& c) const {
  std::ostringstream os;
  os << c.feature.out_channels << 'x' << feature_length << " -> " << c.branch_conv1.out_channels << 'x'
     << conv1_length << " -> " << c.branch_conv2.out_channels << 'x' << conv2_length << " -> "
     << c.branch_conv2.out_channels << 'x' << pool_length << " -> " << c.capsule_width << " -> 1 -> "
     << c.branch_count();
  return os.str();
}

ShapeTrace shape_trace(const NetworkConfig& c) {
  if (c.classes.empty()) throw ShapeError("network config: at least one class (branch) is required");
  for (std::size_t i = 0; i < c.classes.size(); ++i) {
    for (std::size_t j = i + 1; j < c.classes.size(); ++j) {
      if (c.classes[i] == c.classes[j]) throw ValueError("network config: duplicate class " + std::string(scheme_name(c.classes[i])));
    }
  }
  const auto positive = [](const ConvSpec& s) { return s.kernel > 0 && s.stride > 0 && s.out_channels > 0; };
  if (c.in_channels == 0 || c.input_length == 0 || c.capsule_width == 0 || !positive(c.feature) ||
      !positive(c.branch_conv1) || !positive(c.branch_conv2) || c.pool.window == 0 || c.pool.stride == 0) {
    throw ShapeError("network config: all extents, kernels, strides and widths must be positive");
  }
  const auto step = [](const char* layer, std::size_t length, std::size_t window, std::size_t stride) {
    if (length < window) {
      throw ShapeError(std::string("network config: layer ") + layer + " has window " + std::to_string(window) +
                       " but its input length is only " + std::to_string(length));
    }
    return (length - window) / stride + 1;
  };
  ShapeTrace t;
  t.feature_length = step("feature.conv", c.input_length, c.feature.kernel, c.feature.stride);
  t.conv1_length = step("branch.conv1", t.feature_length, c.branch_conv1.kernel, c.branch_conv1.stride);
  t.conv2_length = step("branch.conv2", t.conv1_length, c.branch_conv2.kernel, c.branch_conv2.stride);
  t.pool_length = step("branch.pool", t.conv2_length, c.pool.window, c.pool.stride);
  t.fc_inputs = c.branch_conv2.out_channels * t.pool_length;
  return t;
}

template <typename T>
Model<T> build(const NetworkConfig& config) {
  Model<T> m;
  m.config = config;
  m.trace = shape_trace(config);
  Rng rng(config.seed);
  add_conv(m, "feature.conv", config.in_channels, config.feature, rng);
  add_bn(m, "feature.bn", config.feature.out_channels);
  for (std::size_t i = 0; i < config.branch_count(); ++i) {
    add_conv(m, branch_key(i, "conv1"), config.feature.out_channels, config.branch_conv1, rng);
    add_bn(m, branch_key(i, "bn1"), config.branch_conv1.out_channels);
    add_conv(m, branch_key(i, "conv2"), config.branch_conv1.out_channels, config.branch_conv2, rng);
    add_bn(m, branch_key(i, "bn2"), config.branch_conv2.out_channels);
    add_fc(m, branch_key(i, "fc"), m.trace.fc_inputs, config.capsule_width, rng);
    add_bn(m, branch_key(i, "bn3"), config.capsule_width);
    add_fc(m, branch_key(i, "point"), config.capsule_width, 1, rng);
  }
  return m;
}

template <typename T>
ForwardResult<T> forward(Model<T>& model, const Tensor<T>& batch, Mode mode, std::size_t threads) {
  if (mode == Mode::kTrain) return run_forward(model, model.buffers, batch, mode, threads, true);
  ParamMap<T> scratch = model.buffers;
  return run_forward(model, scratch, batch, mode, threads, true);
}

template <typename T>
Tensor<T> infer(const Model<T>& model, const Tensor<T>& batch, std::size_t threads) {
  ParamMap<T> scratch = model.buffers;
  return run_forward(model, scratch, batch, Mode::kInference, threads, false).probabilities;
}

template <typename T>
Gradients<T> backward(const Model<T>& model, const ForwardCache<T>& cache,
                      std::span<const std::size_t> labels, std::size_t threads) {
  if (cache.mode != Mode::kTrain || cache.input.empty()) {
    throw ValueError("backward needs the cache of a train-mode forward pass");
  }
  const std::size_t n = model.config.branch_count();
  if (cache.branches.size() != n) throw ShapeError("forward cache branch count does not match the model");
  if (labels.size() != cache.input.dim(0)) {
    throw ShapeError("backward got " + std::to_string(labels.size()) + " labels for a cached batch of " +
                     std::to_string(cache.input.dim(0)));
  }
  const auto& c = model.config;
  const auto& p = model.params;
  Gradients<T> g;
  g.loss = cross_entropy(cache.probabilities, labels);
  const Tensor<T> dlogits = softmax_cross_entropy_backward(cache.probabilities, labels);
  const std::vector<Tensor<T>> dbranch = depth_concat_backward(dlogits);

  std::vector<ParamMap<T>> branch_grads(n);
  std::vector<Tensor<T>> dfeature(n);
  for_each_branch(n, threads, [&](std::size_t i) {
    const BranchCache<T>& bc = cache.branches[i];
    ParamMap<T>& out = branch_grads[i];
    const auto key = [i](const char* leaf) { return branch_key(i, leaf); };
    const auto store = [&](const char* layer, LayerGrad<T>& lg) {
      for (auto& [name, t] : lg.params) out.emplace(branch_key(i, layer) + "." + name, std::move(t));
    };
    LayerGrad<T> lg = fully_connected_backward(bc.relu_out, p.at(key("point.weight")), dbranch[i]);
    store("point", lg);
    Tensor<T> d = activation_backward(Activation::kRelu, bc.bn3_out, bc.relu_out, lg.input);
    lg = batchnorm_backward(bc.bn3, p.at(key("bn3.gamma")), d);
    store("bn3", lg);
    lg = fully_connected_backward(bc.pooled, p.at(key("fc.weight")), lg.input);
    store("fc", lg);
    d = avgpool1d_backward(bc.act2.shape(), c.pool.window, c.pool.stride, lg.input);
    d = activation_backward(Activation::kTanh, bc.act2, bc.act2, d);
    lg = batchnorm_backward(bc.bn2, p.at(key("bn2.gamma")), d);
    store("bn2", lg);
    lg = conv1d_backward(bc.act1, p.at(key("conv2.weight")), c.branch_conv2.stride, lg.input);
    store("conv2", lg);
    d = activation_backward(Activation::kTanh, bc.act1, bc.act1, lg.input);
    lg = batchnorm_backward(bc.bn1, p.at(key("bn1.gamma")), d);
    store("bn1", lg);
    lg = conv1d_backward(cache.feature_act, p.at(key("conv1.weight")), c.branch_conv1.stride, lg.input);
    store("conv1", lg);
    dfeature[i] = std::move(lg.input);
  });

  // Fixed summation order over branches keeps the result thread-count independent.
  Tensor<T> d = std::move(dfeature[0]);
  for (std::size_t i = 1; i < n; ++i) {
    for (std::size_t k = 0; k < d.size(); ++k) d[k] += dfeature[i][k];
  }
  for (auto& bg : branch_grads) g.params.merge(bg);
  d = activation_backward(Activation::kTanh, cache.feature_act, cache.feature_act, d);
  LayerGrad<T> lg = batchnorm_backward(cache.feature_bn, p.at("feature.bn.gamma"), d);
  for (auto& [name, t] : lg.params) g.params.emplace("feature.bn." + name, std::move(t));
  lg = conv1d_backward(cache.input, p.at("feature.conv.weight"), c.feature.stride, lg.input);
  for (auto& [name, t] : lg.params) g.params.emplace("feature.conv." + name, std::move(t));
  for (const auto& [name, t] : g.params) require_finite(t, "gradient of " + name);
  return g;
}

std::size_t argmax_lowest(std::span<const double> values) {
  if (values.empty()) throw ValueError("argmax of an empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

template <typename T>
Tensor<T> pack_frames(std::span<const ComplexSignal* const> frames, bool normalize) {
  if (frames.empty()) throw ValueError("pack_frames needs at least one frame");
  const std::size_t length = frames[0]->samples.size();
  Tensor<T> batch(Shape{frames.size(), 2, length});
  for (std::size_t b = 0; b < frames.size(); ++b) {
    const auto& s = frames[b]->samples;
    if (s.size() != length) throw ShapeError("pack_frames: frames differ in length");
    double gain = 1.0;
    if (normalize) {
      const double power = mean_power(s);
      if (!(power > 0.0) || !std::isfinite(power)) throw ValueError("cannot normalize a zero-power or non-finite frame");
      gain = 1.0 / std::sqrt(power);
    }
    T* re = batch.ptr() + b * 2 * length;
    T* im = re + length;
    for (std::size_t t = 0; t < length; ++t) {
      re[t] = static_cast<T>(s[t].real() * gain);
      im[t] = static_cast<T>(s[t].imag() * gain);
    }
  }
  return batch;
}

template <typename T>
Prediction predict(const Model<T>& model, const ComplexSignal& signal, bool normalize) {
  if (signal.samples.size() != model.config.input_length) {
    throw ShapeError("predict: frame has " + std::to_string(signal.samples.size()) + " samples, model expects " +
                     std::to_string(model.config.input_length));
  }
  for (const auto& s : signal.samples) {
    if (!std::isfinite(s.real()) || !std::isfinite(s.imag())) throw ValueError("predict: frame has non-finite samples");
  }
  const ComplexSignal* ptr = &signal;
  const Tensor<T> probs = infer(model, pack_frames<T>(std::span<const ComplexSignal* const>(&ptr, 1), normalize));
  Prediction out;
  out.probabilities.assign(probs.data().begin(), probs.data().end());
  out.class_index = argmax_lowest(out.probabilities);
  out.scheme = model.config.classes[out.class_index];
  return out;
}

#define CAPSAMC_INSTANTIATE_CAPSNET(T)                                                                      \
  template Model<T> build<T>(const NetworkConfig&);                                                        \
  template ForwardResult<T> forward(Model<T>&, const Tensor<T>&, Mode, std::size_t);                       \
  template Tensor<T> infer(const Model<T>&, const Tensor<T>&, std::size_t);                                \
  template Gradients<T> backward(const Model<T>&, const ForwardCache<T>&, std::span<const std::size_t>,    \
                                 std::size_t);                                                             \
  template Tensor<T> pack_frames<T>(std::span<const ComplexSignal* const>, bool);                          \
  template Prediction predict(const Model<T>&, const ComplexSignal&, bool);

CAPSAMC_INSTANTIATE_CAPSNET(float)
CAPSAMC_INSTANTIATE_CAPSNET(double)

#undef CAPSAMC_INSTANTIATE_CAPSNET

}  // namespace capsamc
