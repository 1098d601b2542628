#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace ieegclip::dsp {

// One neural channel. `t0` is seconds since the recording epoch.
struct ChannelSeries {
  std::vector<double> samples;
  double sample_rate_hz = 0.0;
  std::string channel_id;
  std::string shaft_id;
  int contact_index = 0;
  double t0 = 0.0;

  double duration_s() const { return static_cast<double>(samples.size()) / sample_rate_hz; }
};

enum class FilterKind { bandpass, highpass, lowpass };

// Butterworth filter, applied forward-backward. A bandpass is a highpass
// cascade at `low_hz` followed by a lowpass cascade at `high_hz`; each edge
// has its own order so the lowpass edge can be made steep without ringing
// the sub-Hz highpass.
struct FilterSpec {
  double low_hz = 0.05;
  double high_hz = 50.0;
  FilterKind kind = FilterKind::bandpass;
  int highpass_order = 4;
  int lowpass_order = 16;
};

inline constexpr FilterSpec kBroadbandFilter{0.05, 50.0, FilterKind::bandpass, 4, 16};
inline constexpr FilterSpec kGammaFilter{70.0, 120.0, FilterKind::bandpass, 8, 16};
inline constexpr double kPipelineRateHz = 40.0;

// Second-order section, direct form II transposed, a0 normalized to 1.
struct Biquad {
  double b0, b1, b2, a1, a2;
};

std::vector<Biquad> design_butterworth(const FilterSpec& spec, double sample_rate_hz);

// Samples until the slowest pole of the cascade decays below 1e-3.
std::size_t impulse_response_length(const FilterSpec& spec, double sample_rate_hz);

// Single causal pass; state starts at zero.
void filter_causal(std::span<const Biquad> sections, std::span<double> signal);

// Zero-phase filtering with odd-extension padding at both ends.
// Throws invalid_spec if a cutoff is at or above Nyquist, insufficient_data if
// the series is shorter than three impulse-response lengths.
ChannelSeries bandpass(const ChannelSeries& series, const FilterSpec& spec);

// Rational up/down pair with up/down == target/input.
struct ResampleRatio {
  long up = 1;
  long down = 1;
};
ResampleRatio rational_ratio(double input_hz, double target_hz);

// Kaiser-windowed sinc (beta 8.6), 64 taps per phase at the lower of the two
// rates, applied polyphase. Only downsampling is supported. Output length is
// round(n * target / input); t0 is preserved.
ChannelSeries resample(const ChannelSeries& series, double target_hz);

struct RobustStats {
  double median = 0.0;
  double iqr = 0.0;
};
RobustStats robust_stats(std::span<const double> values);

// (x - median) / (q75 - q25), quantiles by linear interpolation between order
// statistics. A constant channel maps to all zeros with a warning.
ChannelSeries robust_scale(const ChannelSeries& series);

// Linear-interpolated quantile of already-sorted data, q in [0, 1].
double sorted_quantile(std::span<const double> sorted, double q);

// Differences of adjacent contacts within each shaft (ordered by contact
// index). Shafts keep their first-appearance order. Output ids are
// "<next>-<prev>".
std::vector<ChannelSeries> bipolar_rereference(const std::vector<ChannelSeries>& channels);

// Amplitude of the analytic signal over a sample range, via FFT.
std::vector<double> analytic_amplitude(std::span<const double> signal);

// Envelope computed tile by tile (tile_s long, taper_s discarded on each
// interior side) so memory stays bounded for multi-hour inputs.
std::vector<double> tiled_envelope(std::span<const double> signal, double sample_rate_hz,
                                   double tile_s = 8.0, double taper_s = 1.0);

// 70-120 Hz Butterworth band, Hilbert envelope, then resampled to `output_hz`.
ChannelSeries gamma_power(const ChannelSeries& series, double output_hz = kPipelineRateHz);

}  // namespace ieegclip::dsp
