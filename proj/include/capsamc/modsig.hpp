#pragma once

#include <array>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "capsamc/rng.hpp"

namespace capsamc {

/// The eight target schemes. The enumerator value is the label index.
enum class Scheme : std::uint8_t {
  kBpsk = 0,
  kQpsk = 1,
  k8psk = 2,
  kDqpsk = 3,
  kMsk = 4,
  k16qam = 5,
  k64qam = 6,
  k256qam = 7,
};

inline constexpr std::size_t kNumSchemes = 8;
inline constexpr std::size_t kDefaultFrameLength = 32768;
inline constexpr std::size_t kDefaultSrrcSpan = 64;

const std::array<Scheme, kNumSchemes>& all_schemes();
std::string_view scheme_name(Scheme scheme);
/// Accepts the canonical names ("8PSK", "16QAM", ...) case-insensitively.
Scheme parse_scheme(std::string_view name);
inline std::size_t label_of(Scheme scheme) { return static_cast<std::size_t>(scheme); }
Scheme scheme_from_label(std::size_t label);

/// Bits carried per symbol; MSK carries one bit per symbol.
std::size_t bits_per_symbol(Scheme scheme);

/// Non-offset DQPSK uses phase increments k*pi/2; the pi/4 variant adds pi/4.
enum class DqpskVariant : std::uint8_t { kStandard, kPi4 };

/// Decision alphabet of a linear scheme, unit average power. For DQPSK this
/// is the set of absolute phases the differential encoder can visit.
std::vector<std::complex<double>> constellation(Scheme scheme,
                                                DqpskVariant variant = DqpskVariant::kStandard);

struct SignalMeta {
  Scheme scheme = Scheme::kBpsk;
  /// Samples per symbol; zero means unknown.
  std::size_t sps = 0;
  double rolloff = 0.0;
  /// Carrier frequency offset in cycles/sample.
  double cfo = 0.0;
  /// Labeled in-band SNR; +inf for a noiseless frame.
  double inband_snr_db = std::numeric_limits<double>::infinity();
  std::uint64_t rng_seed = 0;
  std::string profile_tag;
  DqpskVariant dqpsk = DqpskVariant::kStandard;

  /// Throws ValueError unless sps >= 1, rolloff in [0.1, 1] and |cfo| < 0.5.
  void validate() const;
  friend bool operator==(const SignalMeta&, const SignalMeta&) = default;
};

/// One frame of complex baseband samples.
struct ComplexSignal {
  std::vector<std::complex<float>> samples;
  SignalMeta meta;
};

/// (1/L) sum |s[n]|^2, accumulated in double.
double mean_power(std::span<const std::complex<float>> samples);
double mean_power(std::span<const std::complex<double>> samples);

/// Scales to unit mean power. Throws on an all-zero or non-finite frame.
void normalize_unit_power(std::span<std::complex<float>> samples);
void normalize_unit_power(std::span<std::complex<double>> samples);

/// Fraction of the sampled band the signal occupies: (1 + rolloff) / sps for
/// SRRC-shaped schemes and 1.5 / sps (main lobe) for MSK, capped at 1.
double occupied_bandwidth(const SignalMeta& meta);

struct IntRange {
  std::int64_t lo = 0;
  std::int64_t hi = 0;
};

struct RealRange {
  double lo = 0.0;
  double hi = 0.0;
  bool contains(double v) const { return v >= lo && v <= hi; }
};

/// Parameter envelope for a family of generated frames.
struct DatasetProfile {
  std::string name;
  IntRange sps{2, 23};
  RealRange snr_db{0.0, 12.0};
  RealRange cfo{-0.001, 0.001};
  RealRange rolloff{0.1, 1.0};
  std::size_t count = 0;
  std::vector<Scheme> schemes{all_schemes().begin(), all_schemes().end()};
  std::size_t length = kDefaultFrameLength;
  DqpskVariant dqpsk = DqpskVariant::kStandard;

  void validate() const;
};

/// Built-in envelopes: "ds1" (sps 2..23, SNR 0..12 dB, CFO +-0.001) and
/// "ds2" (sps 2..29, SNR 1..18 dB, CFO 0.005..0.015). `strict_sps` restores
/// the lower sps bound of 1. Desk-scale variants with 4096-sample frames:
/// "toy" (CFO +-1e-5), "toy-ds1" and "toy-ds2" (the ds1 / ds2 CFO intervals).
DatasetProfile builtin_profile(std::string_view name, bool strict_sps = false);

bool cfo_intervals_disjoint(const DatasetProfile& a, const DatasetProfile& b);
/// Throws ValueError when the two CFO intervals overlap.
void require_disjoint_cfo(const DatasetProfile& a, const DatasetProfile& b);

// Symbol mapping and pulse shaping ------------------------------------------

/// Gray-mapped unit-power symbols. Bits are consumed MSB first per symbol.
/// MSK is rejected; use msk_modulate.
std::vector<std::complex<double>> map_symbols(Scheme scheme, std::span<const std::uint8_t> bits,
                                              DqpskVariant variant = DqpskVariant::kStandard);

/// Unit-energy SRRC impulse response with span * sps + 1 taps.
std::vector<double> srrc_taps(double rolloff, std::size_t sps,
                              std::size_t span_symbols = kDefaultSrrcSpan);

/// Symbols modulate_linear consumes to produce `length` steady-state samples.
std::size_t symbols_needed(std::size_t sps, std::size_t length,
                           std::size_t span_symbols = kDefaultSrrcSpan);

/// Zero-stuffs by sps, filters with SRRC taps and returns `length` samples
/// taken after the filter transient. Symbol k peaks at output index
/// (k - span/2) * sps. With sps == 1 the pulse shaping is bypassed and the
/// output is the first `length` symbols.
std::vector<std::complex<double>> modulate_linear(std::span<const std::complex<double>> symbols,
                                                  std::size_t sps, double rolloff,
                                                  std::size_t length,
                                                  std::size_t span_symbols = kDefaultSrrcSpan);

/// Continuous-phase FSK with h = 0.5: bit 1 advances the phase by +pi/2 over
/// one symbol, bit 0 by -pi/2, linearly. Starts at phase 0.
std::vector<std::complex<double>> msk_modulate(std::span<const std::uint8_t> bits, std::size_t sps,
                                               std::size_t length);

// Channel ---------------------------------------------------------------------

/// s[n] *= exp(j 2 pi cfo n).
void apply_cfo(std::span<std::complex<double>> samples, double cfo);
/// Same on a frame; meta.cfo accumulates the applied offset.
void apply_cfo(ComplexSignal& signal, double cfo);

/// Adds circular white Gaussian noise so the in-band SNR (signal power over
/// the noise power inside occupied_bandwidth(meta)) equals the target.
///
/// A noiseless frame (label +inf) is treated as pure signal. A frame that
/// already carries a finite label is augmented: its current noise share is
/// inferred from the label and topped up; a target at or above the label is
/// rejected. Target +inf leaves the frame unchanged.
void add_noise_to_snr(ComplexSignal& signal, double target_inband_snr_db, Rng& rng);

// Generation --------------------------------------------------------------

/// Frame `index` of a dataset: scheme cycles through profile.schemes, then
/// sps, roll-off, CFO and SNR are drawn uniformly from the profile using
/// Rng::stream(seed, index). The frame is modulated, shifted, noised and
/// normalized to unit power.
ComplexSignal generate_frame(const DatasetProfile& profile, std::size_t index, std::uint64_t seed);

std::vector<ComplexSignal> generate(const DatasetProfile& profile, std::size_t count,
                                    std::uint64_t seed);

// Test oracle -----------------------------------------------------------------

struct DemodResult {
  /// Symbol index (as passed to modulate_linear / msk_modulate) of decisions[0].
  std::size_t first_symbol = 0;
  /// Hard decisions; for MSK +1 / -1 per bit.
  std::vector<std::complex<double>> decisions;
};

/// CFO-compensated matched-filter receiver with the generator's timing
/// (or a phase-increment detector for MSK). Only symbols whose matched
/// filter window lies fully inside the frame are decided.
DemodResult demod_oracle(const ComplexSignal& signal);

/// Nearest point of `alphabet` to z.
std::complex<double> nearest_point(std::complex<double> z,
                                   std::span<const std::complex<double>> alphabet);

}  // namespace capsamc
