#include "capsamc/modsig.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numbers>

#include "capsamc/error.hpp"

namespace capsamc {
namespace {

using cd = std::complex<double>;
constexpr double kPi = std::numbers::pi;

constexpr std::array<std::string_view, kNumSchemes> kNames = {
    "BPSK", "QPSK", "8PSK", "DQPSK", "MSK", "16QAM", "64QAM", "256QAM"};

std::size_t gray_to_binary(std::size_t g) {
  std::size_t b = 0;
  for (; g != 0; g >>= 1) b ^= g;
  return b;
}

std::size_t read_bits(std::span<const std::uint8_t> bits, std::size_t offset, std::size_t count) {
  std::size_t v = 0;
  for (std::size_t i = 0; i < count; ++i) v = (v << 1) | (bits[offset + i] & 1u);
  return v;
}

// Gray-coded M-PSK point for a bit group: position p with gray(p) == value.
cd psk_point(std::size_t value, std::size_t order, double offset) {
  const double p = static_cast<double>(gray_to_binary(value));
  return std::polar(1.0, 2.0 * kPi * p / static_cast<double>(order) + offset);
}

// Square QAM with independent Gray-coded PAM rails, scaled to unit power.
cd qam_point(std::size_t value, std::size_t bits) {
  const std::size_t half = bits / 2;
  const std::size_t levels = std::size_t{1} << half;
  const double order = static_cast<double>(levels * levels);
  const double scale = 1.0 / std::sqrt(2.0 * (order - 1.0) / 3.0);
  const auto rail = [&](std::size_t g) {
    return (2.0 * static_cast<double>(gray_to_binary(g)) - static_cast<double>(levels - 1)) * scale;
  };
  return {rail(value >> half), rail(value & (levels - 1))};
}

double dqpsk_offset(DqpskVariant variant) { return variant == DqpskVariant::kPi4 ? kPi / 4.0 : 0.0; }

double srrc_value(double t, double beta) {
  if (std::abs(t) < 1e-12) return 1.0 - beta + 4.0 * beta / kPi;
  const double x = 4.0 * beta * t;
  if (std::abs(1.0 - x * x) < 1e-10) {
    const double a = kPi / (4.0 * beta);
    return beta / std::sqrt(2.0) * ((1.0 + 2.0 / kPi) * std::sin(a) + (1.0 - 2.0 / kPi) * std::cos(a));
  }
  return (std::sin(kPi * t * (1.0 - beta)) + x * std::cos(kPi * t * (1.0 + beta))) /
         (kPi * t * (1.0 - x * x));
}

void add_noise_power(std::span<cd> samples, double noise_power, Rng& rng) {
  const double sigma = std::sqrt(noise_power / 2.0);
  for (auto& s : samples) {
    const double re = rng.normal();
    const double im = rng.normal();
    s += cd(sigma * re, sigma * im);
  }
}

std::vector<cd> widen(std::span<const std::complex<float>> in) {
  std::vector<cd> out(in.size());
  std::transform(in.begin(), in.end(), out.begin(), [](std::complex<float> v) { return cd(v); });
  return out;
}

std::vector<std::complex<float>> narrow(std::span<const cd> in) {
  std::vector<std::complex<float>> out(in.size());
  std::transform(in.begin(), in.end(), out.begin(), [](cd v) { return std::complex<float>(v); });
  return out;
}

template <typename C>
double power_of(std::span<const C> samples) {
  if (samples.empty()) return 0.0;
  double acc = 0.0;
  for (const auto& s : samples) {
    const double re = s.real();
    const double im = s.imag();
    acc += re * re + im * im;
  }
  return acc / static_cast<double>(samples.size());
}

template <typename C>
void normalize(std::span<C> samples) {
  const double p = power_of<C>(samples);
  if (!(p > 0.0) || !std::isfinite(p)) throw ValueError("cannot normalize a zero-power or non-finite frame");
  const double g = 1.0 / std::sqrt(p);
  for (auto& s : samples) s = C(static_cast<typename C::value_type>(s.real() * g),
                                static_cast<typename C::value_type>(s.imag() * g));
}

double db_to_linear(double db) { return std::pow(10.0, db / 10.0); }

}  // namespace

const std::array<Scheme, kNumSchemes>& all_schemes() {
  static const std::array<Scheme, kNumSchemes> schemes = {
      Scheme::kBpsk, Scheme::kQpsk, Scheme::k8psk,  Scheme::kDqpsk,
      Scheme::kMsk,  Scheme::k16qam, Scheme::k64qam, Scheme::k256qam};
  return schemes;
}

std::string_view scheme_name(Scheme scheme) { return kNames.at(label_of(scheme)); }

Scheme parse_scheme(std::string_view name) {
  std::string upper(name);
  std::transform(upper.begin(), upper.end(), upper.begin(),
                 [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  upper.erase(std::remove(upper.begin(), upper.end(), '-'), upper.end());
  for (std::size_t i = 0; i < kNumSchemes; ++i) {
    if (kNames[i] == upper) return static_cast<Scheme>(i);
  }
  throw ValueError("unknown modulation scheme '" + std::string(name) + "'");
}

Scheme scheme_from_label(std::size_t label) {
  if (label >= kNumSchemes) throw ValueError("label " + std::to_string(label) + " outside [0, 8)");
  return static_cast<Scheme>(label);
}

std::size_t bits_per_symbol(Scheme scheme) {
  switch (scheme) {
    case Scheme::kBpsk: return 1;
    case Scheme::kQpsk: return 2;
    case Scheme::k8psk: return 3;
    case Scheme::kDqpsk: return 2;
    case Scheme::kMsk: return 1;
    case Scheme::k16qam: return 4;
    case Scheme::k64qam: return 6;
    case Scheme::k256qam: return 8;
  }
  throw ValueError("invalid scheme");
}

std::vector<cd> constellation(Scheme scheme, DqpskVariant variant) {
  std::vector<cd> points;
  switch (scheme) {
    case Scheme::kMsk:
      throw ValueError("MSK has no linear constellation");
    case Scheme::kDqpsk: {
      if (variant == DqpskVariant::kPi4) {
        for (std::size_t k = 0; k < 8; ++k) points.push_back(std::polar(1.0, kPi * static_cast<double>(k) / 4.0));
      } else {
        for (std::size_t k = 0; k < 4; ++k) points.push_back(std::polar(1.0, kPi * static_cast<double>(k) / 2.0));
      }
      return points;
    }
    default: {
      const std::size_t bits = bits_per_symbol(scheme);
      std::vector<std::uint8_t> pattern(bits);
      for (std::size_t v = 0; v < (std::size_t{1} << bits); ++v) {
        for (std::size_t i = 0; i < bits; ++i) pattern[i] = static_cast<std::uint8_t>((v >> (bits - 1 - i)) & 1u);
        points.push_back(map_symbols(scheme, pattern).front());
      }
      return points;
    }
  }
}

void SignalMeta::validate() const {
  if (sps < 1) throw ValueError("signal metadata: sps must be >= 1");
  if (!(rolloff >= 0.1 && rolloff <= 1.0)) throw ValueError("signal metadata: rolloff must lie in [0.1, 1.0]");
  if (!(std::abs(cfo) < 0.5)) throw ValueError("signal metadata: |cfo| must be < 0.5");
}

double mean_power(std::span<const std::complex<float>> samples) { return power_of(samples); }
double mean_power(std::span<const cd> samples) { return power_of(samples); }
void normalize_unit_power(std::span<std::complex<float>> samples) { normalize(samples); }
void normalize_unit_power(std::span<cd> samples) { normalize(samples); }

double occupied_bandwidth(const SignalMeta& meta) {
  if (meta.sps < 1) throw ValueError("occupied bandwidth needs a known sps");
  const double width = meta.scheme == Scheme::kMsk ? 1.5 : 1.0 + meta.rolloff;
  return std::min(1.0, width / static_cast<double>(meta.sps));
}

void DatasetProfile::validate() const {
  const auto fail = [&](const std::string& field, const std::string& why) {
    throw ValueError("profile '" + name + "': " + field + " " + why);
  };
  if (sps.lo < 1 || sps.hi < sps.lo) fail("sps", "must be a nonempty range with lower bound >= 1");
  if (!(snr_db.hi >= snr_db.lo)) fail("snr_db", "must be a nonempty range");
  if (!(cfo.hi >= cfo.lo) || !(std::abs(cfo.lo) < 0.5) || !(std::abs(cfo.hi) < 0.5)) {
    fail("cfo", "must be a nonempty range inside (-0.5, 0.5)");
  }
  if (!(rolloff.hi >= rolloff.lo) || rolloff.lo < 0.1 || rolloff.hi > 1.0) {
    fail("rolloff", "must be a nonempty range inside [0.1, 1.0]");
  }
  if (schemes.empty()) fail("schemes", "must not be empty");
  if (length < 1) fail("length", "must be positive");
}

DatasetProfile builtin_profile(std::string_view name, bool strict_sps) {
  DatasetProfile p;
  p.name = std::string(name);
  if (name == "ds1") {
    p.sps = {strict_sps ? 1 : 2, 23};
    p.snr_db = {0.0, 12.0};
    p.cfo = {-0.001, 0.001};
  } else if (name == "ds2") {
    p.sps = {strict_sps ? 1 : 2, 29};
    p.snr_db = {1.0, 18.0};
    p.cfo = {0.005, 0.015};
  } else if (name == "toy" || name == "toy-ds1" || name == "toy-ds2") {
    // Desk-scale: short frames, narrow sps and roll-off spread, high SNR.
    p.sps = {4, 8};
    p.snr_db = {8.0, 14.0};
    p.rolloff = {0.2, 0.5};
    p.length = 4096;
    p.count = 4000;
    if (name == "toy") {
      p.cfo = {-1e-5, 1e-5};
    } else if (name == "toy-ds1") {
      p.cfo = {-0.001, 0.001};
    } else {
      p.cfo = {0.005, 0.015};
    }
    return p;
  } else {
    throw ValueError("unknown built-in profile '" + std::string(name) +
                     "' (expected ds1, ds2, toy, toy-ds1 or toy-ds2)");
  }
  p.rolloff = {0.1, 1.0};
  p.count = 112000;
  return p;
}

bool cfo_intervals_disjoint(const DatasetProfile& a, const DatasetProfile& b) {
  return a.cfo.hi < b.cfo.lo || b.cfo.hi < a.cfo.lo;
}

void require_disjoint_cfo(const DatasetProfile& a, const DatasetProfile& b) {
  if (!cfo_intervals_disjoint(a, b)) {
    throw ValueError("CFO intervals of profiles '" + a.name + "' and '" + b.name + "' overlap");
  }
}

std::vector<cd> map_symbols(Scheme scheme, std::span<const std::uint8_t> bits, DqpskVariant variant) {
  if (scheme == Scheme::kMsk) throw ValueError("map_symbols does not handle MSK; use msk_modulate");
  const std::size_t k = bits_per_symbol(scheme);
  if (bits.size() % k != 0) {
    throw ValueError("bit count " + std::to_string(bits.size()) + " is not a multiple of " +
                     std::to_string(k) + " for " + std::string(scheme_name(scheme)));
  }
  const std::size_t n = bits.size() / k;
  std::vector<cd> symbols(n);
  double phase = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t v = read_bits(bits, i * k, k);
    switch (scheme) {
      case Scheme::kBpsk: symbols[i] = v == 0 ? cd(1.0, 0.0) : cd(-1.0, 0.0); break;
      case Scheme::kQpsk: symbols[i] = psk_point(v, 4, kPi / 4.0); break;
      case Scheme::k8psk: symbols[i] = psk_point(v, 8, 0.0); break;
      case Scheme::kDqpsk: {
        phase += kPi / 2.0 * static_cast<double>(gray_to_binary(v)) + dqpsk_offset(variant);
        phase = std::fmod(phase, 2.0 * kPi);
        symbols[i] = std::polar(1.0, phase);
        break;
      }
      default: symbols[i] = qam_point(v, k); break;
    }
  }
  return symbols;
}

std::vector<double> srrc_taps(double rolloff, std::size_t sps, std::size_t span_symbols) {
  if (!(rolloff >= 0.1 && rolloff <= 1.0)) throw ValueError("SRRC roll-off must lie in [0.1, 1.0]");
  if (sps < 1) throw ValueError("SRRC needs sps >= 1");
  if (span_symbols == 0 || span_symbols % 2 != 0) throw ValueError("SRRC span must be a positive even number of symbols");
  const std::size_t n = span_symbols * sps + 1;
  const double center = static_cast<double>(span_symbols * sps) / 2.0;
  std::vector<double> taps(n);
  double energy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    taps[i] = srrc_value((static_cast<double>(i) - center) / static_cast<double>(sps), rolloff);
    energy += taps[i] * taps[i];
  }
  const double g = 1.0 / std::sqrt(energy);
  for (auto& t : taps) t *= g;
  return taps;
}

std::size_t symbols_needed(std::size_t sps, std::size_t length, std::size_t span_symbols) {
  if (sps < 1) throw ValueError("sps must be >= 1");
  if (sps == 1) return length;
  return span_symbols + (length + sps - 1) / sps + 1;
}

std::vector<cd> modulate_linear(std::span<const cd> symbols, std::size_t sps, double rolloff,
                                std::size_t length, std::size_t span_symbols) {
  const std::size_t needed = symbols_needed(sps, length, span_symbols);
  if (symbols.size() < needed) {
    throw ValueError("modulate_linear needs " + std::to_string(needed) + " symbols for " +
                     std::to_string(length) + " samples at sps " + std::to_string(sps) + ", got " +
                     std::to_string(symbols.size()));
  }
  if (sps == 1) return {symbols.begin(), symbols.begin() + static_cast<std::ptrdiff_t>(length)};
  const std::vector<double> taps = srrc_taps(rolloff, sps, span_symbols);
  const std::size_t delay = taps.size() - 1;
  std::vector<cd> out(length);
  // y[n] = sum_m u[m] h[n - m] with u the zero-stuffed symbols; only every
  // sps-th tap meets a nonzero input.
  for (std::size_t j = 0; j < length; ++j) {
    const std::size_t n = j + delay;
    cd acc(0.0, 0.0);
    const std::size_t k_hi = n / sps;
    const std::size_t k_lo = n >= delay ? (n - delay + sps - 1) / sps : 0;
    for (std::size_t k = k_lo; k <= k_hi; ++k) acc += symbols[k] * taps[n - k * sps];
    out[j] = acc;
  }
  return out;
}

std::vector<cd> msk_modulate(std::span<const std::uint8_t> bits, std::size_t sps, std::size_t length) {
  if (sps < 2) throw ValueError("msk_modulate needs sps >= 2");
  const std::size_t needed = (length + sps - 1) / sps;
  if (bits.size() < needed) {
    throw ValueError("msk_modulate needs " + std::to_string(needed) + " bits, got " + std::to_string(bits.size()));
  }
  std::vector<cd> out(length);
  double start_phase = 0.0;
  const double step = kPi / (2.0 * static_cast<double>(sps));
  for (std::size_t n = 0; n < length; ++n) {
    const std::size_t k = n / sps;
    const std::size_t within = n - k * sps;
    if (within == 0 && k > 0) {
      start_phase += (bits[k - 1] ? 1.0 : -1.0) * kPi / 2.0;
      start_phase = std::remainder(start_phase, 2.0 * kPi);
    }
    const double d = bits[k] ? 1.0 : -1.0;
    out[n] = std::polar(1.0, start_phase + d * step * static_cast<double>(within));
  }
  return out;
}

void apply_cfo(std::span<cd> samples, double cfo) {
  if (!(std::abs(cfo) < 0.5)) throw ValueError("CFO must satisfy |cfo| < 0.5 cycles/sample");
  if (cfo == 0.0) return;
  for (std::size_t n = 0; n < samples.size(); ++n) {
    const double cycles = std::fmod(cfo * static_cast<double>(n), 1.0);
    samples[n] *= std::polar(1.0, 2.0 * kPi * cycles);
  }
}

void apply_cfo(ComplexSignal& signal, double cfo) {
  std::vector<cd> wide = widen(signal.samples);
  apply_cfo(std::span<cd>(wide), cfo);
  signal.samples = narrow(wide);
  signal.meta.cfo += cfo;
}

void add_noise_to_snr(ComplexSignal& signal, double target_db, Rng& rng) {
  if (std::isinf(target_db) && target_db > 0) return;
  if (std::isnan(target_db)) throw ValueError("target SNR is NaN");
  const double band = occupied_bandwidth(signal.meta);
  const double total = mean_power(signal.samples);
  const double target = db_to_linear(target_db);
  double signal_power = total;
  double current_noise = 0.0;
  if (std::isfinite(signal.meta.inband_snr_db)) {
    if (target_db >= signal.meta.inband_snr_db) {
      throw ValueError("augmentation target " + std::to_string(target_db) +
                       " dB is not below the current label " +
                       std::to_string(signal.meta.inband_snr_db) + " dB");
    }
    const double current = db_to_linear(signal.meta.inband_snr_db);
    current_noise = total / (current * band + 1.0);
    signal_power = total - current_noise;
  }
  const double wanted_noise = signal_power / (target * band);
  std::vector<cd> wide = widen(signal.samples);
  add_noise_power(wide, wanted_noise - current_noise, rng);
  signal.samples = narrow(wide);
  signal.meta.inband_snr_db = target_db;
}

ComplexSignal generate_frame(const DatasetProfile& profile, std::size_t index, std::uint64_t seed) {
  profile.validate();
  const std::uint64_t frame_seed = Rng::stream_seed(seed, index);
  Rng rng(frame_seed);
  SignalMeta meta;
  meta.scheme = profile.schemes[index % profile.schemes.size()];
  meta.sps = static_cast<std::size_t>(rng.uniform_int(profile.sps.lo, profile.sps.hi));
  meta.rolloff = rng.uniform(profile.rolloff.lo, profile.rolloff.hi);
  meta.cfo = rng.uniform(profile.cfo.lo, profile.cfo.hi);
  meta.inband_snr_db = rng.uniform(profile.snr_db.lo, profile.snr_db.hi);
  meta.rng_seed = frame_seed;
  meta.profile_tag = profile.name;
  meta.dqpsk = profile.dqpsk;

  std::vector<cd> clean;
  if (meta.scheme == Scheme::kMsk) {
    // MSK needs two samples per symbol to carry its phase ramp.
    meta.sps = std::max<std::size_t>(meta.sps, 2);
    std::vector<std::uint8_t> bits((profile.length + meta.sps - 1) / meta.sps);
    for (auto& b : bits) b = rng.bit();
    clean = msk_modulate(bits, meta.sps, profile.length);
  } else {
    const std::size_t nsym = symbols_needed(meta.sps, profile.length);
    std::vector<std::uint8_t> bits(nsym * bits_per_symbol(meta.scheme));
    for (auto& b : bits) b = rng.bit();
    clean = modulate_linear(map_symbols(meta.scheme, bits, meta.dqpsk), meta.sps, meta.rolloff,
                            profile.length);
  }
  normalize(std::span<cd>(clean));
  apply_cfo(std::span<cd>(clean), meta.cfo);
  const double band = occupied_bandwidth(meta);
  add_noise_power(clean, 1.0 / (db_to_linear(meta.inband_snr_db) * band), rng);
  normalize(std::span<cd>(clean));
  return ComplexSignal{narrow(clean), std::move(meta)};
}

std::vector<ComplexSignal> generate(const DatasetProfile& profile, std::size_t count, std::uint64_t seed) {
  profile.validate();
  std::vector<ComplexSignal> frames;
  frames.reserve(count);
  for (std::size_t i = 0; i < count; ++i) frames.push_back(generate_frame(profile, i, seed));
  return frames;
}

cd nearest_point(cd z, std::span<const cd> alphabet) {
  cd best = alphabet.front();
  double best_d = std::norm(z - best);
  for (const cd& p : alphabet) {
    const double d = std::norm(z - p);
    if (d < best_d) {
      best_d = d;
      best = p;
    }
  }
  return best;
}

DemodResult demod_oracle(const ComplexSignal& signal) {
  signal.meta.validate();
  std::vector<cd> rx = widen(signal.samples);
  apply_cfo(std::span<cd>(rx), -signal.meta.cfo);
  const std::size_t sps = signal.meta.sps;
  DemodResult result;
  if (signal.meta.scheme == Scheme::kMsk) {
    if (sps < 2) throw ValueError("MSK demodulation needs sps >= 2");
    for (std::size_t k = 0; (k + 1) * sps < rx.size(); ++k) {
      const double turn = std::arg(rx[(k + 1) * sps] * std::conj(rx[k * sps]));
      result.decisions.emplace_back(turn >= 0.0 ? 1.0 : -1.0, 0.0);
    }
    return result;
  }
  const std::vector<cd> alphabet = constellation(signal.meta.scheme, signal.meta.dqpsk);
  std::vector<cd> samples;
  if (sps == 1) {
    samples = rx;
  } else {
    const std::vector<double> taps = srrc_taps(signal.meta.rolloff, sps);
    const std::size_t half_span = kDefaultSrrcSpan / 2;
    const std::size_t half = taps.size() / 2;
    // Symbol k peaks at index (k - half_span) * sps; the matched filter
    // window centred there must lie inside the frame.
    const std::size_t k_first = half_span + (half + sps - 1) / sps;
    result.first_symbol = k_first;
    for (std::size_t k = k_first;; ++k) {
      const std::size_t center = (k - half_span) * sps;
      if (center + half >= rx.size()) break;
      cd acc(0.0, 0.0);
      for (std::size_t i = 0; i < taps.size(); ++i) acc += rx[center + half - i] * taps[i];
      samples.push_back(acc);
    }
  }
  if (samples.empty()) throw ValueError("frame too short for matched-filter demodulation");
  // Remove the unknown real gain: E|y|^2 = g^2 + noise, with the noise share
  // implied by the SNR label.
  double noise = 0.0;
  if (std::isfinite(signal.meta.inband_snr_db)) {
    const double total = mean_power(std::span<const cd>(rx));
    noise = total / (db_to_linear(signal.meta.inband_snr_db) * occupied_bandwidth(signal.meta) + 1.0);
  }
  const double gain = std::sqrt(std::max(mean_power(std::span<const cd>(samples)) - noise, 1e-300));
  for (const cd& y : samples) result.decisions.push_back(nearest_point(y / gain, alphabet));
  return result;
}

}  // namespace capsamc
