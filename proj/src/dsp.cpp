#include "ieegclip/dsp.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <map>
#include <numbers>
#include <numeric>

#include <unsupported/Eigen/FFT>

#include "ieegclip/error.hpp"
#include "ieegclip/log.hpp"

namespace ieegclip::dsp {

namespace {

constexpr double kPi = std::numbers::pi;

Biquad lowpass_section(double f0, double fs, double q) {
  const double w0 = 2.0 * kPi * f0 / fs;
  const double cw = std::cos(w0);
  const double alpha = std::sin(w0) / (2.0 * q);
  const double one_minus_cos = 2.0 * std::pow(std::sin(w0 / 2.0), 2);
  const double a0 = 1.0 + alpha;
  return {one_minus_cos / 2.0 / a0, one_minus_cos / a0, one_minus_cos / 2.0 / a0, -2.0 * cw / a0,
          (1.0 - alpha) / a0};
}

Biquad highpass_section(double f0, double fs, double q) {
  const double w0 = 2.0 * kPi * f0 / fs;
  const double cw = std::cos(w0);
  const double alpha = std::sin(w0) / (2.0 * q);
  const double one_plus_cos = 1.0 + cw;
  const double a0 = 1.0 + alpha;
  return {one_plus_cos / 2.0 / a0, -one_plus_cos / a0, one_plus_cos / 2.0 / a0, -2.0 * cw / a0,
          (1.0 - alpha) / a0};
}

// First-order sections are stored as biquads with b2 = a2 = 0.
Biquad first_order(double f0, double fs, bool highpass) {
  const double k = std::tan(kPi * f0 / fs);
  const double a1 = (k - 1.0) / (k + 1.0);
  if (highpass) return {1.0 / (1.0 + k), -1.0 / (1.0 + k), 0.0, a1, 0.0};
  return {k / (1.0 + k), k / (1.0 + k), 0.0, a1, 0.0};
}

void append_butterworth(std::vector<Biquad>& out, int order, double f0, double fs, bool highpass) {
  if (order < 1) throw Error(ErrorKind::invalid_spec, "filter order must be >= 1");
  if (order % 2 == 1) out.push_back(first_order(f0, fs, highpass));
  for (int k = 0; k < order / 2; ++k) {
    const double q = 1.0 / (2.0 * std::sin((2.0 * k + 1.0) * kPi / (2.0 * order)));
    out.push_back(highpass ? highpass_section(f0, fs, q) : lowpass_section(f0, fs, q));
  }
}

void validate_spec(const FilterSpec& spec, double fs) {
  const double nyquist = fs / 2.0;
  if (!(fs > 0.0)) throw Error(ErrorKind::invalid_spec, "sample rate must be positive");
  const bool uses_low = spec.kind != FilterKind::lowpass && spec.low_hz > 0.0;
  const bool uses_high = spec.kind != FilterKind::highpass;
  if (spec.kind == FilterKind::bandpass && !(spec.high_hz > spec.low_hz)) {
    throw Error(ErrorKind::invalid_spec, "bandpass requires high_hz > low_hz");
  }
  if (spec.kind == FilterKind::highpass && !(spec.low_hz > 0.0)) {
    throw Error(ErrorKind::invalid_spec, "highpass requires low_hz > 0");
  }
  if (uses_low && spec.low_hz >= nyquist) {
    throw Error(ErrorKind::invalid_spec, "low cutoff at or above Nyquist");
  }
  if (uses_high && (!(spec.high_hz > 0.0) || spec.high_hz >= nyquist)) {
    throw Error(ErrorKind::invalid_spec, "high cutoff must lie in (0, Nyquist)");
  }
}

double max_pole_radius(const Biquad& s) {
  // Poles of z^2 + a1 z + a2.
  const double disc = s.a1 * s.a1 - 4.0 * s.a2;
  if (disc < 0.0) return std::sqrt(s.a2);
  const double sq = std::sqrt(disc);
  return std::max(std::abs((-s.a1 + sq) / 2.0), std::abs((-s.a1 - sq) / 2.0));
}

}  // namespace

std::vector<Biquad> design_butterworth(const FilterSpec& spec, double sample_rate_hz) {
  validate_spec(spec, sample_rate_hz);
  std::vector<Biquad> sections;
  if (spec.kind != FilterKind::lowpass && spec.low_hz > 0.0) {
    append_butterworth(sections, spec.highpass_order, spec.low_hz, sample_rate_hz, true);
  }
  if (spec.kind != FilterKind::highpass) {
    append_butterworth(sections, spec.lowpass_order, spec.high_hz, sample_rate_hz, false);
  }
  return sections;
}

std::size_t impulse_response_length(const FilterSpec& spec, double sample_rate_hz) {
  double r = 0.0;
  for (const auto& s : design_butterworth(spec, sample_rate_hz)) r = std::max(r, max_pole_radius(s));
  if (r <= 0.0) return 1;
  return static_cast<std::size_t>(std::ceil(std::log(1e-3) / std::log(r)));
}

void filter_causal(std::span<const Biquad> sections, std::span<double> signal) {
  for (const auto& s : sections) {
    double z1 = 0.0;
    double z2 = 0.0;
    for (double& x : signal) {
      const double y = s.b0 * x + z1;
      z1 = s.b1 * x - s.a1 * y + z2;
      z2 = s.b2 * x - s.a2 * y;
      x = y;
    }
  }
}

ChannelSeries bandpass(const ChannelSeries& series, const FilterSpec& spec) {
  const auto sections = design_butterworth(spec, series.sample_rate_hz);
  const std::size_t ir = impulse_response_length(spec, series.sample_rate_hz);
  const std::size_t n = series.samples.size();
  if (n < 3 * ir || n < 2) {
    throw Error(ErrorKind::insufficient_data,
                "bandpass: series of " + std::to_string(n) + " samples is shorter than 3x the " +
                    std::to_string(ir) + "-sample impulse response");
  }
  const std::size_t pad = std::min(ir, n - 1);
  const auto& x = series.samples;

  std::vector<double> ext(n + 2 * pad);
  for (std::size_t i = 0; i < pad; ++i) ext[i] = 2.0 * x[0] - x[pad - i];
  std::copy(x.begin(), x.end(), ext.begin() + static_cast<std::ptrdiff_t>(pad));
  for (std::size_t i = 0; i < pad; ++i) ext[pad + n + i] = 2.0 * x[n - 1] - x[n - 2 - i];

  filter_causal(sections, ext);
  std::reverse(ext.begin(), ext.end());
  filter_causal(sections, ext);
  std::reverse(ext.begin(), ext.end());

  ChannelSeries out = series;
  std::copy(ext.begin() + static_cast<std::ptrdiff_t>(pad),
            ext.begin() + static_cast<std::ptrdiff_t>(pad + n), out.samples.begin());
  return out;
}

// ---------------------------------------------------------------------------
// Resampling

ResampleRatio rational_ratio(double input_hz, double target_hz) {
  if (!(input_hz > 0.0) || !(target_hz > 0.0)) {
    throw Error(ErrorKind::invalid_argument, "resample: rates must be positive");
  }
  // Continued-fraction expansion of target/input.
  const double ratio = target_hz / input_hz;
  long h0 = 0, h1 = 1, k0 = 1, k1 = 0;
  double x = ratio;
  for (int it = 0; it < 64; ++it) {
    const double a = std::floor(x);
    const long ai = static_cast<long>(a);
    const long h2 = ai * h1 + h0;
    const long k2 = ai * k1 + k0;
    h0 = h1;
    h1 = h2;
    k0 = k1;
    k1 = k2;
    if (k1 > 100000) break;
    if (std::abs(static_cast<double>(h1) / static_cast<double>(k1) - ratio) <= 1e-12 * ratio) {
      return {h1, k1};
    }
    const double frac = x - a;
    if (frac < 1e-15) break;
    x = 1.0 / frac;
  }
  throw Error(ErrorKind::invalid_argument, "resample: rate ratio is not a small rational");
}

namespace {

double kaiser(double n, double length, double beta) {
  const double r = 2.0 * n / (length - 1.0) - 1.0;
  return std::cyl_bessel_i(0.0, beta * std::sqrt(std::max(0.0, 1.0 - r * r))) /
         std::cyl_bessel_i(0.0, beta);
}

struct Polyphase {
  long up = 1;
  long down = 1;
  long half = 0;
  // phases[p] holds h[p + i*up] in reverse order so each output is a
  // contiguous dot product.
  std::vector<std::vector<double>> phases;
};

Polyphase design_polyphase(ResampleRatio ratio) {
  constexpr double kBeta = 8.6;
  constexpr long kZeroCrossingsPerSide = 32;
  Polyphase pp;
  pp.up = ratio.up;
  pp.down = ratio.down;
  const long widest = std::max(ratio.up, ratio.down);
  pp.half = kZeroCrossingsPerSide * widest;
  const long length = 2 * pp.half + 1;
  const double fc = 0.5 / static_cast<double>(widest);  // cycles per upsampled sample

  std::vector<double> h(static_cast<std::size_t>(length));
  double sum = 0.0;
  for (long n = 0; n < length; ++n) {
    const double t = static_cast<double>(n - pp.half);
    const double arg = 2.0 * fc * t;
    const double sinc = (t == 0.0) ? 1.0 : std::sin(kPi * arg) / (kPi * arg);
    h[static_cast<std::size_t>(n)] = 2.0 * fc * sinc * kaiser(static_cast<double>(n), static_cast<double>(length), kBeta);
    sum += h[static_cast<std::size_t>(n)];
  }
  for (auto& v : h) v *= static_cast<double>(ratio.up) / sum;

  pp.phases.resize(static_cast<std::size_t>(ratio.up));
  for (long p = 0; p < ratio.up; ++p) {
    auto& ph = pp.phases[static_cast<std::size_t>(p)];
    for (long i = p; i < length; i += ratio.up) ph.push_back(h[static_cast<std::size_t>(i)]);
    std::reverse(ph.begin(), ph.end());
  }
  return pp;
}

}  // namespace

ChannelSeries resample(const ChannelSeries& series, double target_hz) {
  if (!(target_hz > 0.0)) throw Error(ErrorKind::invalid_argument, "resample: target rate must be positive");
  if (target_hz == series.sample_rate_hz) return series;
  if (target_hz > series.sample_rate_hz) {
    throw Error(ErrorKind::invalid_argument, "resample: upsampling is not supported");
  }
  const auto pp = design_polyphase(rational_ratio(series.sample_rate_hz, target_hz));
  const auto& x = series.samples;
  const long n = static_cast<long>(x.size());
  const auto n_out = static_cast<long>(std::llround(static_cast<double>(n) * target_hz / series.sample_rate_hz));

  ChannelSeries out;
  out.sample_rate_hz = target_hz;
  out.channel_id = series.channel_id;
  out.shaft_id = series.shaft_id;
  out.contact_index = series.contact_index;
  out.t0 = series.t0;
  out.samples.resize(static_cast<std::size_t>(std::max(0L, n_out)));

  for (long m = 0; m < n_out; ++m) {
    const long q = m * pp.down + pp.half;
    const long j_hi = q / pp.up;
    const long phase = q - j_hi * pp.up;
    const auto& taps = pp.phases[static_cast<std::size_t>(phase)];
    const long len = static_cast<long>(taps.size());
    const long j_lo = j_hi - len + 1;  // taps[k] multiplies x[j_lo + k]
    const long k_begin = std::max(0L, -j_lo);
    const long k_end = std::min(len, n - j_lo);
    double acc = 0.0;
    for (long k = k_begin; k < k_end; ++k) acc += taps[static_cast<std::size_t>(k)] * x[static_cast<std::size_t>(j_lo + k)];
    out.samples[static_cast<std::size_t>(m)] = acc;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Robust scaling

double sorted_quantile(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw Error(ErrorKind::insufficient_data, "quantile of empty data");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

RobustStats robust_stats(std::span<const double> values) {
  if (values.size() < 4) {
    throw Error(ErrorKind::insufficient_data, "robust scaling needs at least 4 samples");
  }
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  return {sorted_quantile(sorted, 0.5), sorted_quantile(sorted, 0.75) - sorted_quantile(sorted, 0.25)};
}

ChannelSeries robust_scale(const ChannelSeries& series) {
  const auto [median, iqr] = robust_stats(series.samples);

  ChannelSeries out = series;
  if (!(iqr > 0.0)) {
    warn("robust_scale: zero interquartile range on channel '" + series.channel_id +
         "'; emitting zeros");
    std::fill(out.samples.begin(), out.samples.end(), 0.0);
    return out;
  }
  for (auto& v : out.samples) v = (v - median) / iqr;
  return out;
}

// ---------------------------------------------------------------------------
// Re-referencing

std::vector<ChannelSeries> bipolar_rereference(const std::vector<ChannelSeries>& channels) {
  std::vector<std::string> shaft_order;
  std::map<std::string, std::vector<const ChannelSeries*>> by_shaft;
  for (const auto& ch : channels) {
    auto [it, inserted] = by_shaft.try_emplace(ch.shaft_id);
    if (inserted) shaft_order.push_back(ch.shaft_id);
    it->second.push_back(&ch);
  }

  std::vector<ChannelSeries> out;
  for (const auto& shaft : shaft_order) {
    auto contacts = by_shaft[shaft];
    std::stable_sort(contacts.begin(), contacts.end(), [](const auto* a, const auto* b) {
      return a->contact_index < b->contact_index;
    });
    for (std::size_t k = 0; k + 1 < contacts.size(); ++k) {
      const auto& a = *contacts[k];
      const auto& b = *contacts[k + 1];
      if (a.samples.size() != b.samples.size() || a.sample_rate_hz != b.sample_rate_hz ||
          a.t0 != b.t0) {
        throw Error(ErrorKind::alignment, "bipolar_rereference: contacts '" + a.channel_id +
                                              "' and '" + b.channel_id + "' are not aligned");
      }
      ChannelSeries d;
      d.sample_rate_hz = a.sample_rate_hz;
      d.t0 = a.t0;
      d.shaft_id = shaft;
      d.contact_index = a.contact_index;
      d.channel_id = b.channel_id + "-" + a.channel_id;
      d.samples.resize(a.samples.size());
      for (std::size_t i = 0; i < a.samples.size(); ++i) d.samples[i] = b.samples[i] - a.samples[i];
      out.push_back(std::move(d));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gamma envelope

std::vector<double> analytic_amplitude(std::span<const double> signal) {
  const std::size_t n = signal.size();
  if (n == 0) return {};
  Eigen::FFT<double> fft;
  std::vector<double> in(signal.begin(), signal.end());
  std::vector<std::complex<double>> spectrum;
  fft.fwd(spectrum, in);
  // One-sided weights: DC and Nyquist once, positive frequencies twice.
  for (std::size_t k = 1; k < n; ++k) {
    if (2 * k < n) {
      spectrum[k] *= 2.0;
    } else if (2 * k > n) {
      spectrum[k] = 0.0;
    }
  }
  std::vector<std::complex<double>> analytic;
  fft.inv(analytic, spectrum);
  std::vector<double> amp(n);
  for (std::size_t i = 0; i < n; ++i) amp[i] = std::abs(analytic[i]);
  return amp;
}

std::vector<double> tiled_envelope(std::span<const double> signal, double sample_rate_hz,
                                   double tile_s, double taper_s) {
  const std::size_t n = signal.size();
  const auto tile = static_cast<std::size_t>(std::llround(tile_s * sample_rate_hz));
  const auto taper = static_cast<std::size_t>(std::llround(taper_s * sample_rate_hz));
  if (n <= tile || tile <= 2 * taper) return analytic_amplitude(signal);

  std::vector<double> out(n, 0.0);
  const std::size_t hop = tile - 2 * taper;
  for (std::size_t start = 0;; start += hop) {
    const std::size_t end = std::min(start + tile, n);
    const auto amp = analytic_amplitude(signal.subspan(start, end - start));
    const std::size_t core_begin = start == 0 ? start : start + taper;
    const std::size_t core_end = end == n ? n : end - taper;
    for (std::size_t i = core_begin; i < core_end; ++i) out[i] = amp[i - start];
    if (end == n) break;
  }
  return out;
}

ChannelSeries gamma_power(const ChannelSeries& series, double output_hz) {
  if (!(series.sample_rate_hz > 2.0 * kGammaFilter.high_hz)) {
    throw Error(ErrorKind::invalid_spec, "gamma_power needs a sample rate above 240 Hz");
  }
  ChannelSeries band = bandpass(series, kGammaFilter);
  band.samples = tiled_envelope(band.samples, band.sample_rate_hz);
  ChannelSeries env = resample(band, output_hz);
  // The anti-alias filter can ring slightly below zero next to sharp edges.
  for (auto& v : env.samples) v = std::max(v, 0.0);
  return env;
}

}  // namespace ieegclip::dsp
