#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <numeric>
#include <string>

#include "ieegclip/dsp.hpp"
#include "ieegclip/error.hpp"
#include "ieegclip/log.hpp"
#include "ieegclip/rng.hpp"

using namespace ieegclip;
using dsp::ChannelSeries;

namespace {

constexpr double kPi = std::numbers::pi;

ChannelSeries tone(double freq, double rate, std::size_t n, double amp = 1.0, double phase = 0.0) {
  ChannelSeries s;
  s.sample_rate_hz = rate;
  s.channel_id = "A1";
  s.shaft_id = "A";
  s.contact_index = 1;
  s.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) s.samples[i] = amp * std::sin(2 * kPi * freq * static_cast<double>(i) / rate + phase);
  return s;
}

double rms(const std::vector<double>& x, std::size_t lo, std::size_t hi) {
  double acc = 0.0;
  for (std::size_t i = lo; i < hi; ++i) acc += x[i] * x[i];
  return std::sqrt(acc / static_cast<double>(hi - lo));
}

// Digital Butterworth magnitude via the prewarped analog prototype.
double butter_mag2(double f, double fc, int order, double rate, bool high) {
  const double r = std::tan(kPi * f / rate) / std::tan(kPi * fc / rate);
  const double x = high ? 1.0 / r : r;
  return 1.0 / (1.0 + std::pow(x, 2 * order));
}

std::complex<double> cascade_response(const std::vector<dsp::Biquad>& sections, double f, double rate) {
  const std::complex<double> z1 = std::polar(1.0, -2 * kPi * f / rate);
  const std::complex<double> z2 = z1 * z1;
  std::complex<double> h = 1.0;
  for (const auto& s : sections) h *= (s.b0 + s.b1 * z1 + s.b2 * z2) / (1.0 + s.a1 * z1 + s.a2 * z2);
  return h;
}

struct WarningCounter {
  int count = 0;
  WarningCounter() {
    set_warning_sink([this](std::string_view) { ++count; });
  }
  ~WarningCounter() { set_warning_sink(nullptr); }
};

}  // namespace

TEST_CASE("butterworth cascade matches the analytic magnitude") {
  const double rate = 512.0;
  for (double f : {1.0, 10.0, 40.0, 50.0, 60.0, 120.0}) {
    const auto lp = dsp::design_butterworth({0.0, 50.0, dsp::FilterKind::lowpass, 4, 16}, rate);
    CHECK(std::norm(cascade_response(lp, f, rate)) == doctest::Approx(butter_mag2(f, 50.0, 16, rate, false)).epsilon(1e-6));
  }
  for (double f : {0.01, 0.05, 0.2, 5.0}) {
    const auto hp = dsp::design_butterworth({0.05, 0.0, dsp::FilterKind::highpass, 4, 16}, rate);
    CHECK(std::norm(cascade_response(hp, f, rate)) == doctest::Approx(butter_mag2(f, 0.05, 4, rate, true)).epsilon(1e-6));
  }
}

TEST_CASE("bandpass rejects DC") {
  const double rate = 512.0;
  ChannelSeries s = tone(0.0, rate, 512 * 400);
  std::fill(s.samples.begin(), s.samples.end(), 5.0);
  const auto y = dsp::bandpass(s, dsp::kBroadbandFilter);
  const std::size_t settle = 512 * 100;
  double worst = 0.0;
  for (std::size_t i = settle; i < y.samples.size() - settle; ++i) worst = std::max(worst, std::abs(y.samples[i]));
  CHECK(worst < 0.05);
}

TEST_CASE("bandpass passband and stopband gains") {
  const double rate = 512.0;
  const std::size_t n = 512 * 300;
  const std::size_t lo = 512 * 100, hi = n - 512 * 100;
  const auto pass = dsp::bandpass(tone(10.0, rate, n), dsp::kBroadbandFilter);
  const double gain_db = 20 * std::log10(rms(pass.samples, lo, hi) / (1 / std::sqrt(2.0)));
  CHECK(std::abs(gain_db) <= 0.5);

  const auto stop = dsp::bandpass(tone(60.0, rate, n), dsp::kBroadbandFilter);
  const double att_db = -20 * std::log10(rms(stop.samples, lo, hi) / (1 / std::sqrt(2.0)));
  CHECK(att_db >= 20.0);
  // Forward-backward squares the single-pass magnitude.
  const double expected = -20 * std::log10(butter_mag2(60.0, 50.0, 16, rate, false) * butter_mag2(60.0, 0.05, 4, rate, true));
  CHECK(att_db == doctest::Approx(expected).epsilon(0.02));
}

TEST_CASE("bandpass is linear") {
  CounterRng rng(3);
  ChannelSeries x = tone(7.0, 512.0, 512 * 200), y = tone(23.0, 512.0, 512 * 200);
  for (auto& v : x.samples) v += rng.normal();
  for (auto& v : y.samples) v += rng.normal();
  const double a = 1.7, b = -0.4;
  ChannelSeries mix = x;
  for (std::size_t i = 0; i < mix.samples.size(); ++i) mix.samples[i] = a * x.samples[i] + b * y.samples[i];
  const auto fx = dsp::bandpass(x, dsp::kBroadbandFilter);
  const auto fy = dsp::bandpass(y, dsp::kBroadbandFilter);
  const auto fm = dsp::bandpass(mix, dsp::kBroadbandFilter);
  double err = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < fm.samples.size(); ++i) {
    err = std::max(err, std::abs(fm.samples[i] - (a * fx.samples[i] + b * fy.samples[i])));
    scale = std::max(scale, std::abs(fm.samples[i]));
  }
  CHECK(err / scale < 1e-9);
}

TEST_CASE("bandpass is zero-phase") {
  const auto x = tone(8.0, 512.0, 512 * 200);
  const auto y = dsp::bandpass(x, dsp::kBroadbandFilter);
  const std::size_t lo = 512 * 60, hi = x.samples.size() - 512 * 60;
  int best_lag = 100;
  double best = -1e300;
  for (int lag = -20; lag <= 20; ++lag) {
    double acc = 0.0;
    for (std::size_t i = lo; i < hi; ++i) acc += x.samples[i] * y.samples[static_cast<std::size_t>(static_cast<long>(i) + lag)];
    if (acc > best) best = acc, best_lag = lag;
  }
  CHECK(best_lag == 0);
}

TEST_CASE("bandpass input checks") {
  CHECK_THROWS_AS(dsp::bandpass(tone(1.0, 80.0, 80 * 600), dsp::kBroadbandFilter), Error);
  CHECK_THROWS_AS(dsp::bandpass(tone(1.0, 512.0, 100), dsp::kBroadbandFilter), Error);
}

TEST_CASE("resample length and ratio") {
  const auto r = dsp::rational_ratio(1000.0, 40.0);
  CHECK(r.up == 1);
  CHECK(r.down == 25);
  const auto y = dsp::resample(tone(5.0, 1000.0, 4000), 40.0);
  CHECK(y.samples.size() == 160);
  CHECK(y.sample_rate_hz == 40.0);
}

TEST_CASE("resample preserves an in-band tone and suppresses an aliasing one") {
  const auto y = dsp::resample(tone(5.0, 1000.0, 20000), 40.0);
  // Correlate with the sinusoid re-evaluated on the output grid.
  std::vector<double> ref(y.samples.size());
  for (std::size_t i = 0; i < ref.size(); ++i) ref[i] = std::sin(2 * kPi * 5.0 * static_cast<double>(i) / 40.0);
  const std::size_t lo = 20, hi = ref.size() - 20;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = lo; i < hi; ++i) {
    sxy += ref[i] * y.samples[i];
    sxx += ref[i] * ref[i];
    syy += y.samples[i] * y.samples[i];
  }
  CHECK(sxy / std::sqrt(sxx * syy) > 0.99);

  const auto x30 = tone(30.0, 1000.0, 20000);
  const auto y30 = dsp::resample(x30, 40.0);
  CHECK(rms(y30.samples, 20, y30.samples.size() - 20) < 0.1 * rms(x30.samples, 0, x30.samples.size()));
}

TEST_CASE("resampling to the current rate is the identity") {
  const auto x = tone(3.0, 40.0, 400);
  const auto y = dsp::resample(x, 40.0);
  CHECK(y.samples == x.samples);
  const auto z = dsp::resample(dsp::resample(tone(3.0, 1000.0, 20000), 40.0), 40.0);
  CHECK(z.samples.size() == 800);
}

TEST_CASE("robust scaling follows the hand-computed quantiles") {
  ChannelSeries s = tone(0.0, 40.0, 101);
  std::iota(s.samples.begin(), s.samples.end(), 0.0);
  const auto st = dsp::robust_stats(s.samples);
  CHECK(st.median == 50.0);
  CHECK(st.iqr == 50.0);
  const auto y = dsp::robust_scale(s);
  CHECK(y.samples[100] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(y.samples[50] == 0.0);

  std::vector<double> sorted{1.0, 2.0, 4.0, 8.0};
  CHECK(dsp::sorted_quantile(sorted, 0.25) == doctest::Approx(1.75));
  CHECK(dsp::sorted_quantile(sorted, 1.0) == 8.0);
}

TEST_CASE("robust scaling centers at the median and is affine invariant up to sign") {
  CounterRng rng(9);
  ChannelSeries s = tone(0.0, 40.0, 999);
  for (auto& v : s.samples) v = rng.normal() * 3 + rng.uniform();
  const auto y = dsp::robust_scale(s);
  std::vector<double> sorted = y.samples;
  std::sort(sorted.begin(), sorted.end());
  CHECK(std::abs(dsp::sorted_quantile(sorted, 0.5)) < 1e-9);

  for (double a : {2.5, -0.3}) {
    ChannelSeries t = s;
    for (auto& v : t.samples) v = a * v + 4.0;
    const auto z = dsp::robust_scale(t);
    for (std::size_t i = 0; i < z.samples.size(); ++i) {
      CHECK(z.samples[i] == doctest::Approx((a > 0 ? 1 : -1) * y.samples[i]).epsilon(1e-9));
    }
  }
}

TEST_CASE("constant channel scales to zeros with a warning") {
  WarningCounter warnings;
  ChannelSeries s = tone(0.0, 40.0, 50);
  std::fill(s.samples.begin(), s.samples.end(), 3.0);
  const auto y = dsp::robust_scale(s);
  CHECK(std::all_of(y.samples.begin(), y.samples.end(), [](double v) { return v == 0.0; }));
  CHECK(warnings.count == 1);
}

TEST_CASE("bipolar rereference differences adjacent contacts per shaft") {
  std::vector<ChannelSeries> chans;
  for (int c : {3, 1, 2}) {
    ChannelSeries s = tone(0.0, 40.0, 4);
    s.shaft_id = "A";
    s.contact_index = c;
    s.channel_id = "A" + std::to_string(c);
    std::fill(s.samples.begin(), s.samples.end(), c * c);
    chans.push_back(s);
  }
  const auto out = dsp::bipolar_rereference(chans);
  REQUIRE(out.size() == 2);
  CHECK(out[0].channel_id == "A2-A1");
  CHECK(out[0].samples[0] == 4.0 - 1.0);
  CHECK(out[1].channel_id == "A3-A2");
  CHECK(out[1].samples[0] == 9.0 - 4.0);

  for (auto& s : chans) std::fill(s.samples.begin(), s.samples.end(), 7.0);
  for (const auto& s : dsp::bipolar_rereference(chans)) {
    CHECK(std::all_of(s.samples.begin(), s.samples.end(), [](double v) { return v == 0.0; }));
  }

  std::vector<ChannelSeries> grid;
  for (char shaft : std::string("ABC")) {
    for (int c = 1; c <= 5; ++c) {
      ChannelSeries s = tone(1.0, 40.0, 8);
      s.shaft_id = std::string(1, shaft);
      s.contact_index = c;
      s.channel_id = s.shaft_id + std::to_string(c);
      grid.push_back(s);
    }
  }
  CHECK(dsp::bipolar_rereference(grid).size() == 12);
}

TEST_CASE("analytic amplitude of a pure tone is its amplitude") {
  const auto x = tone(50.0, 1000.0, 4000, 2.0);
  const auto a = dsp::analytic_amplitude(x.samples);
  for (std::size_t i = 500; i < 3500; ++i) CHECK(a[i] == doctest::Approx(2.0).epsilon(1e-3));
}

TEST_CASE("gamma power envelope of in-band and out-of-band tones") {
  const std::size_t n = 1000 * 60;
  const auto in_band = dsp::gamma_power(tone(90.0, 1000.0, n));
  CHECK(in_band.sample_rate_hz == 40.0);
  const std::size_t edge = 40 * 10;
  double in_mean = 0.0;
  for (std::size_t i = edge; i < in_band.samples.size() - edge; ++i) {
    CHECK(std::abs(in_band.samples[i] - 1.0) <= 0.05);
    in_mean += in_band.samples[i];
  }
  in_mean /= static_cast<double>(in_band.samples.size() - 2 * edge);

  const auto out_band = dsp::gamma_power(tone(10.0, 1000.0, n));
  double out_mean = 0.0;
  for (std::size_t i = edge; i < out_band.samples.size() - edge; ++i) out_mean += out_band.samples[i];
  out_mean /= static_cast<double>(out_band.samples.size() - 2 * edge);
  CHECK(out_mean <= 0.05 * in_mean);
}

TEST_CASE("gamma power is nonnegative and sign invariant") {
  CounterRng rng(5);
  ChannelSeries x = tone(0.0, 1000.0, 1000 * 30);
  for (auto& v : x.samples) v = rng.normal();
  ChannelSeries neg = x;
  for (auto& v : neg.samples) v = -v;
  const auto a = dsp::gamma_power(x);
  const auto b = dsp::gamma_power(neg);
  REQUIRE(a.samples.size() == b.samples.size());
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    CHECK(a.samples[i] >= 0.0);
    CHECK(a.samples[i] == doctest::Approx(b.samples[i]).epsilon(1e-12));
  }
}
