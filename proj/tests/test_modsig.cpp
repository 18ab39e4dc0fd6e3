#include <doctest.h>

#include <cmath>
#include <complex>
#include <numeric>
#include <bit>
#include <set>

#include "capsamc/error.hpp"
#include "capsamc/modsig.hpp"
#include "sigutil.hpp"
#include "spectral.hpp"

using namespace capsamc;
using cd = std::complex<double>;

namespace {

using sigutil::linear_frame;
using sigutil::random_bits;
using sigutil::to_signal;

double checked_ser(const sigutil::Loopback& lb) {
  REQUIRE(!demod_oracle(lb.signal).decisions.empty());
  return sigutil::symbol_error_rate(lb);
}

double qfunc(double x) { return 0.5 * std::erfc(x / std::sqrt(2.0)); }

}  // namespace

TEST_CASE("scheme names and labels") {
  CHECK(all_schemes().size() == 8);
  for (std::size_t i = 0; i < 8; ++i) {
    CHECK(label_of(all_schemes()[i]) == i);
    CHECK(parse_scheme(scheme_name(all_schemes()[i])) == all_schemes()[i]);
  }
  CHECK(parse_scheme("16qam") == Scheme::k16qam);
  CHECK_THROWS_AS(parse_scheme("OOK"), ValueError);
  CHECK_THROWS_AS(scheme_from_label(8), ValueError);
}

TEST_CASE("constellations have unit power") {
  for (Scheme s : all_schemes()) {
    if (s == Scheme::kMsk) continue;
    for (auto variant : {DqpskVariant::kStandard, DqpskVariant::kPi4}) {
      auto points = constellation(s, variant);
      double p = 0.0;
      for (const cd& z : points) p += std::norm(z);
      CHECK(std::abs(p / static_cast<double>(points.size()) - 1.0) < 1e-12);
    }
  }
  CHECK(constellation(Scheme::k16qam).size() == 16);
  CHECK(constellation(Scheme::k256qam).size() == 256);
  // 16-QAM levels are +-1, +-3 scaled by 1/sqrt(10).
  std::set<double> levels;
  for (const cd& z : constellation(Scheme::k16qam)) levels.insert(std::round(z.real() * std::sqrt(10.0) * 1e9) / 1e9);
  CHECK(levels == std::set<double>{-3.0, -1.0, 1.0, 3.0});
}

TEST_CASE("map_symbols") {
  std::vector<std::uint8_t> bits{0, 1};
  auto b = map_symbols(Scheme::kBpsk, bits);
  CHECK(b == std::vector<cd>{cd(1.0, 0.0), cd(-1.0, 0.0)});
  std::vector<std::uint8_t> odd{0, 1, 1};
  CHECK_THROWS_AS(map_symbols(Scheme::kQpsk, odd), ValueError);
  CHECK_THROWS_AS(map_symbols(Scheme::kMsk, bits), ValueError);

  Rng rng(1);
  for (Scheme s : all_schemes()) {
    if (s == Scheme::kMsk) continue;
    auto alphabet = constellation(s);
    auto syms = map_symbols(s, random_bits(bits_per_symbol(s) * 500, rng));
    for (const cd& z : syms) CHECK(std::abs(nearest_point(z, alphabet) - z) < 1e-12);
  }
}

TEST_CASE("gray mapping: adjacent 8PSK points differ in one bit") {
  std::vector<std::size_t> value_at(8);
  for (std::size_t v = 0; v < 8; ++v) {
    std::vector<std::uint8_t> bits{static_cast<std::uint8_t>(v >> 2 & 1), static_cast<std::uint8_t>(v >> 1 & 1),
                                   static_cast<std::uint8_t>(v & 1)};
    const double angle = std::arg(map_symbols(Scheme::k8psk, bits)[0]);
    const auto pos = static_cast<std::size_t>(std::lround(angle / (M_PI / 4.0)) + 8) % 8;
    value_at[pos] = v;
  }
  for (std::size_t p = 0; p < 8; ++p) CHECK(std::popcount(value_at[p] ^ value_at[(p + 1) % 8]) == 1);
}

TEST_CASE("DQPSK differential decode recovers the dibits") {
  Rng rng(2);
  for (auto variant : {DqpskVariant::kStandard, DqpskVariant::kPi4}) {
    const double offset = variant == DqpskVariant::kPi4 ? M_PI / 4.0 : 0.0;
    for (int stream = 0; stream < 1000; ++stream) {
      auto bits = random_bits(2 * 16, rng);
      auto syms = map_symbols(Scheme::kDqpsk, bits, variant);
      cd prev(1.0, 0.0);
      for (std::size_t i = 0; i < syms.size(); ++i) {
        const double delta = std::arg(syms[i] * std::conj(prev)) - offset;
        const auto k = static_cast<unsigned>((std::lround(delta / (M_PI / 2.0)) % 4 + 4) % 4);
        const unsigned dibit = k ^ (k >> 1);
        CHECK(dibit == (static_cast<unsigned>(bits[2 * i]) << 1 | bits[2 * i + 1]));
        prev = syms[i];
      }
    }
  }
}

TEST_CASE("SRRC taps") {
  for (double beta : {0.1, 0.25, 0.35, 0.5, 0.75, 1.0}) {
    for (std::size_t sps : {2u, 4u, 8u}) {
      auto h = srrc_taps(beta, sps, 16);
      REQUIRE(h.size() == 16 * sps + 1);
      double e = 0.0;
      for (double v : h) e += v * v;
      CHECK(std::abs(e - 1.0) < 1e-9);
      for (std::size_t k = 0; k < h.size(); ++k) CHECK(std::abs(h[k] - h[h.size() - 1 - k]) < 1e-12);
    }
  }
  CHECK_THROWS_AS(srrc_taps(0.05, 4), ValueError);
  CHECK_THROWS_AS(srrc_taps(1.1, 4), ValueError);
  CHECK_THROWS_AS(srrc_taps(0.5, 4, 15), ValueError);
}

TEST_CASE("SRRC self-convolution has zero ISI") {
  // beta = 0.25 with sps = 8 puts a tap exactly on the t = 1/(4 beta)
  // singularity, exercising its analytic limit. Truncation to 16 symbols
  // leaves 1.8e-3 of ISI at beta 0.35 (1.3e-2 at 0.1), hence the longer
  // default span.
  for (double beta : {0.1, 0.25, 0.35, 0.5, 1.0}) {
    const std::size_t sps = 8;
    auto h = srrc_taps(beta, sps);
    const std::size_t n = h.size();
    std::vector<double> rc(2 * n - 1, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) rc[i + j] += h[i] * h[j];
    const std::size_t center = n - 1;
    double worst = 0.0;
    for (std::size_t k = sps; k <= center; k += sps) {
      worst = std::max({worst, std::abs(rc[center + k]), std::abs(rc[center - k])});
    }
    INFO("beta " << beta);
    CHECK(worst < 1e-3 * rc[center]);
  }
}

TEST_CASE("modulate_linear") {
  Rng rng(3);
  auto syms = map_symbols(Scheme::kQpsk, random_bits(2 * symbols_needed(4, 32768), rng));
  CHECK(modulate_linear(syms, 4, 0.35, 32768).size() == 32768);
  std::span<const cd> few(syms.data(), symbols_needed(4, 32768) - 1);
  CHECK_THROWS_AS(modulate_linear(few, 4, 0.35, 32768), ValueError);
  // sps = 1 bypasses shaping.
  auto direct = modulate_linear(std::span<const cd>(syms).first(100), 1, 0.5, 100);
  CHECK(std::equal(direct.begin(), direct.end(), syms.begin()));
}

TEST_CASE("noiseless matched-filter loopback") {
  Rng rng(4);
  SUBCASE("QPSK sps 8 beta 0.5") {
    CHECK(checked_ser(linear_frame(Scheme::kQpsk, 8, 0.5, 0.0, 32768, rng)) == 0.0);
  }
  SUBCASE("every linear scheme with CFO") {
    for (Scheme s : all_schemes()) {
      if (s == Scheme::kMsk) continue;
      for (std::size_t sps : {2u, 8u, 23u}) {
        INFO(scheme_name(s) << " sps " << sps);
        CHECK(checked_ser(linear_frame(s, sps, rng.uniform(0.1, 1.0), rng.uniform(-0.01, 0.01), 8192, rng)) ==
              0.0);
      }
    }
  }
}

TEST_CASE("MSK") {
  Rng rng(5);
  for (std::size_t sps : {2u, 5u, 8u}) {
    auto bits = random_bits(4096 / sps + 1, rng);
    auto s = msk_modulate(bits, sps, 4096);
    REQUIRE(s.size() == 4096);
    for (const cd& v : s) CHECK(std::abs(std::abs(v) - 1.0) < 1e-12);
    for (std::size_t k = 0; (k + 1) * sps < s.size(); ++k) {
      const double turn = std::arg(s[(k + 1) * sps] * std::conj(s[k * sps]));
      CHECK(std::abs(std::abs(turn) - M_PI / 2.0) < 1e-9);
      CHECK((turn > 0) == (bits[k] == 1));
    }
    SignalMeta meta;
    meta.scheme = Scheme::kMsk;
    meta.sps = sps;
    meta.rolloff = 0.5;
    meta.cfo = 0.003;
    std::vector<cd> shifted = s;
    apply_cfo(std::span<cd>(shifted), 0.003);
    auto r = demod_oracle(to_signal(shifted, meta));
    REQUIRE(r.decisions.size() > 100);
    for (std::size_t k = 0; k < r.decisions.size(); ++k) CHECK(r.decisions[k].real() == (bits[k] ? 1.0 : -1.0));
  }
  std::vector<std::uint8_t> bits(10, 1);
  CHECK_THROWS_AS(msk_modulate(bits, 1, 8), ValueError);
}

TEST_CASE("apply_cfo") {
  Rng rng(6);
  std::vector<cd> x(4096);
  for (auto& v : x) v = {rng.normal(), rng.normal()};
  auto same = x;
  apply_cfo(std::span<cd>(same), 0.0);
  CHECK(same == x);
  auto rotated = x;
  apply_cfo(std::span<cd>(rotated), 0.123);
  CHECK(std::abs(mean_power(std::span<const cd>(rotated)) - mean_power(std::span<const cd>(x))) < 1e-12);

  // A tone at bin 100 moves by cfo * L bins.
  const std::size_t n = 4096;
  std::vector<cd> tone(n);
  for (std::size_t i = 0; i < n; ++i) tone[i] = std::polar(1.0, 2.0 * M_PI * 100.0 * static_cast<double>(i) / n);
  for (int shift : {37, -250, 900}) {
    auto t = tone;
    apply_cfo(std::span<cd>(t), static_cast<double>(shift) / n);
    CHECK(spectral::peak_bin(t) == static_cast<std::size_t>((100 + shift + static_cast<int>(n)) % n));
  }

  ComplexSignal sig;
  sig.samples.assign(16, {1.0f, 0.0f});
  sig.meta.cfo = 0.01;
  apply_cfo(sig, 0.02);
  CHECK(sig.meta.cfo == doctest::Approx(0.03));
}

TEST_CASE("noise to a target in-band SNR") {
  auto profile = builtin_profile("ds1");
  SUBCASE("infinite target leaves the frame") {
    Rng rng(7);
    auto lb = linear_frame(Scheme::k8psk, 4, 0.3, 0.0, 1024, rng);
    auto before = lb.signal.samples;
    add_noise_to_snr(lb.signal, std::numeric_limits<double>::infinity(), rng);
    CHECK(lb.signal.samples == before);
  }
  SUBCASE("generated labels match the periodogram") {
    auto frames = generate(profile, 100, 11);
    std::size_t ok = 0;
    for (const auto& f : frames) {
      auto m = spectral::measure_inband_snr_db(f.samples, f.meta.cfo, occupied_bandwidth(f.meta));
      if (m && std::abs(*m - f.meta.inband_snr_db) <= 0.5) ++ok;
    }
    CHECK(ok >= 95);
  }
  SUBCASE("augmenting 12 dB down to -2 dB") {
    profile.snr_db = {12.0, 12.0};
    for (std::size_t i = 0; i < 8; ++i) {
      auto f = generate_frame(profile, i, 21);
      Rng rng(100 + i);
      add_noise_to_snr(f, -2.0, rng);
      CHECK(f.meta.inband_snr_db == -2.0);
      auto m = spectral::measure_inband_snr_db(f.samples, f.meta.cfo, occupied_bandwidth(f.meta));
      INFO(scheme_name(f.meta.scheme) << " sps " << f.meta.sps << " rolloff " << f.meta.rolloff);
      REQUIRE(m.has_value());
      CHECK(std::abs(*m + 2.0) <= 0.5);
    }
  }
  SUBCASE("target at or above the label is rejected") {
    auto f = generate_frame(profile, 0, 1);
    Rng rng(8);
    CHECK_THROWS_AS(add_noise_to_snr(f, f.meta.inband_snr_db, rng), ValueError);
    CHECK_THROWS_AS(add_noise_to_snr(f, f.meta.inband_snr_db + 3.0, rng), ValueError);
  }
}

TEST_CASE("noisy loopback against analytic error rates") {
  Rng rng(9);
  SUBCASE("BPSK at 10 dB, sps 8") {
    std::size_t errors = 0, total = 0;
    for (int f = 0; f < 4; ++f) {
      auto lb = linear_frame(Scheme::kBpsk, 8, 0.35, 0.0, 32768, rng);
      lb.signal.meta.inband_snr_db = std::numeric_limits<double>::infinity();
      add_noise_to_snr(lb.signal, 10.0, rng);
      auto r = demod_oracle(lb.signal);
      for (std::size_t i = 0; i < r.decisions.size(); ++i, ++total)
        if (std::abs(r.decisions[i] - lb.symbols[r.first_symbol + i]) > 1e-9) ++errors;
    }
    CHECK(static_cast<double>(errors) / static_cast<double>(total) < 1e-3);
  }
  SUBCASE("256QAM at 12 dB tracks the analytic SER") {
    // Es/N0 after the matched filter is the in-band SNR times (1 + beta).
    const double beta = 0.35;
    std::size_t errors = 0, total = 0;
    for (int f = 0; f < 4; ++f) {
      auto lb = linear_frame(Scheme::k256qam, 4, beta, 0.0, 32768, rng);
      lb.signal.meta.inband_snr_db = std::numeric_limits<double>::infinity();
      add_noise_to_snr(lb.signal, 12.0, rng);
      auto r = demod_oracle(lb.signal);
      for (std::size_t i = 0; i < r.decisions.size(); ++i, ++total)
        if (std::abs(r.decisions[i] - lb.symbols[r.first_symbol + i]) > 1e-9) ++errors;
    }
    const double es_n0 = std::pow(10.0, 1.2) * (1.0 + beta);
    const double p = 2.0 * (1.0 - 1.0 / 16.0) * qfunc(std::sqrt(3.0 * es_n0 / 255.0));
    const double analytic = 1.0 - (1.0 - p) * (1.0 - p);
    const double measured = static_cast<double>(errors) / static_cast<double>(total);
    CHECK(measured > 0.0);
    CHECK(std::abs(measured - analytic) < 0.03);
  }
}

TEST_CASE("generation") {
  auto profile = builtin_profile("ds1");
  auto a = generate(profile, 24, 5);
  auto b = generate(profile, 24, 5);
  REQUIRE(a.size() == 24);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].samples == b[i].samples);
    CHECK(a[i].meta == b[i].meta);
    CHECK(a[i].samples.size() == 32768);
    CHECK(std::abs(mean_power(a[i].samples) - 1.0) < 1e-6);
    CHECK(a[i].meta.scheme == all_schemes()[i % 8]);
    CHECK(a[i].meta.sps >= 2);
    CHECK(a[i].meta.sps <= 23);
    CHECK(profile.snr_db.contains(a[i].meta.inband_snr_db));
    CHECK(profile.cfo.contains(a[i].meta.cfo));
    bool finite = true;
    for (const auto& v : a[i].samples) finite = finite && std::isfinite(v.real()) && std::isfinite(v.imag());
    CHECK(finite);
  }
  // Frames regenerate independently of their neighbours.
  auto single = generate_frame(profile, 17, 5);
  CHECK(single.samples == a[17].samples);
  CHECK(generate_frame(profile, 17, 6).samples != a[17].samples);
}

TEST_CASE("builtin profiles") {
  auto ds1 = builtin_profile("ds1");
  auto ds2 = builtin_profile("ds2");
  CHECK(ds1.sps.lo == 2);
  CHECK(ds1.sps.hi == 23);
  CHECK(ds1.snr_db.lo == 0.0);
  CHECK(ds1.snr_db.hi == 12.0);
  CHECK(ds2.sps.hi == 29);
  CHECK(ds2.snr_db.lo == 1.0);
  CHECK(ds2.snr_db.hi == 18.0);
  CHECK(builtin_profile("ds1", true).sps.lo == 1);
  CHECK(cfo_intervals_disjoint(ds1, ds2));
  CHECK_NOTHROW(require_disjoint_cfo(ds1, ds2));
  CHECK_THROWS_AS(require_disjoint_cfo(ds1, ds1), ValueError);
  CHECK_THROWS_AS(builtin_profile("ds3"), ValueError);
  auto toy1 = builtin_profile("toy-ds1");
  auto toy2 = builtin_profile("toy-ds2");
  CHECK(toy1.length == 4096);
  CHECK(cfo_intervals_disjoint(toy1, toy2));

  SignalMeta meta;
  meta.sps = 4;
  meta.rolloff = 0.05;
  CHECK_THROWS_AS(meta.validate(), ValueError);
  meta.rolloff = 0.5;
  meta.cfo = 0.5;
  CHECK_THROWS_AS(meta.validate(), ValueError);
  meta.cfo = 0.0;
  CHECK(occupied_bandwidth(meta) == doctest::Approx(1.5 / 4.0));
  meta.scheme = Scheme::kMsk;
  CHECK(occupied_bandwidth(meta) == doctest::Approx(1.5 / 4.0));
  meta.sps = 1;
  CHECK(occupied_bandwidth(meta) == 1.0);
}
