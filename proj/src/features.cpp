#include "ieegclip/features.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numbers>

#include <unsupported/Eigen/FFT>

#include "ieegclip/error.hpp"

namespace ieegclip::features {

std::vector<Chunk> chunk_audio(const std::string& stream_id, double t0, double duration_s,
                               double chunk_s, double min_tail_s) {
  std::vector<Chunk> chunks;
  if (!(duration_s > 0.0)) return chunks;
  if (!(chunk_s > 0.0)) throw Error(ErrorKind::invalid_argument, "chunk length must be positive");
  // Tolerate float noise in durations such as 7200.0000001.
  const auto full = static_cast<int>(std::floor(duration_s / chunk_s + 1e-9));
  auto make_id = [&](int i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%04d", i);
    return stream_id + ":" + buf;
  };
  for (int i = 0; i < full; ++i) chunks.push_back({make_id(i), i, t0 + i * chunk_s, chunk_s});
  const double tail = duration_s - full * chunk_s;
  if (tail >= min_tail_s - 1e-9 && tail > 1e-9) {
    chunks.push_back({make_id(full), full, t0 + full * chunk_s, tail});
  }
  return chunks;
}

FeatureFrameSeries retime_frames(const FeatureFrameSeries& series, double target_hz) {
  const auto n = static_cast<long>(series.frames.rows());
  if (n < 2) throw Error(ErrorKind::insufficient_data, "frame interpolation needs at least 2 frames");
  if (!(target_hz > 0.0)) throw Error(ErrorKind::invalid_argument, "target frame rate must be positive");
  const auto n_out = static_cast<long>(std::llround(static_cast<double>(n) * target_hz / series.frame_rate_hz));

  FeatureFrameSeries out;
  out.frame_rate_hz = target_hz;
  out.source = series.source;
  out.t0 = series.t0;
  out.frames.resize(n_out, series.frames.cols());
  for (long j = 0; j < n_out; ++j) {
    const double u = (static_cast<double>(j) + 0.5) / target_hz * series.frame_rate_hz - 0.5;
    const long k0 = std::clamp(static_cast<long>(std::floor(u)), 0L, n - 2);
    const double frac = u - static_cast<double>(k0);
    out.frames.row(j) = series.frames.row(k0) + frac * (series.frames.row(k0 + 1) - series.frames.row(k0));
  }
  return out;
}

FeatureFrameSeries interpolate_frames(const FeatureFrameSeries& series, double target_hz) {
  if (series.frame_rate_hz > target_hz) {
    throw Error(ErrorKind::invalid_argument, "interpolate_frames only upsamples");
  }
  return retime_frames(series, target_hz);
}

std::vector<SegmentFeature> segment_average(const FeatureFrameSeries& series, double window_s) {
  const auto per_window = static_cast<long>(std::llround(window_s * series.frame_rate_hz));
  if (per_window < 1) throw Error(ErrorKind::invalid_argument, "segment window shorter than one frame");
  const long n_windows = static_cast<long>(series.frames.rows()) / per_window;
  std::vector<SegmentFeature> segments;
  segments.reserve(static_cast<std::size_t>(n_windows));
  for (long w = 0; w < n_windows; ++w) {
    SegmentFeature s;
    s.vector = series.frames.middleRows(w * per_window, per_window).colwise().mean().transpose();
    s.segment_index = static_cast<int>(w);
    s.t_start = series.t0 + static_cast<double>(w * per_window) / series.frame_rate_hz;
    segments.push_back(std::move(s));
  }
  return segments;
}

ZScoreStats fit_zscore(const Eigen::MatrixXd& rows, std::string source_split) {
  if (rows.rows() == 0) throw Error(ErrorKind::insufficient_data, "fit_zscore on an empty split");
  ZScoreStats stats;
  stats.source_split = std::move(source_split);
  stats.mean = rows.colwise().mean().transpose();
  const Eigen::MatrixXd centered = rows.rowwise() - stats.mean.transpose();
  stats.std = (centered.array().square().colwise().sum() / static_cast<double>(rows.rows()))
                  .sqrt()
                  .transpose();
  stats.std = stats.std.cwiseMax(kStdFloor);
  return stats;
}

ZScoreStats fit_zscore(std::span<const SegmentFeature> train, std::string source_split) {
  if (train.empty()) throw Error(ErrorKind::insufficient_data, "fit_zscore on an empty split");
  Eigen::MatrixXd rows(static_cast<Eigen::Index>(train.size()), train.front().vector.size());
  for (std::size_t i = 0; i < train.size(); ++i) rows.row(static_cast<Eigen::Index>(i)) = train[i].vector.transpose();
  return fit_zscore(rows, std::move(source_split));
}

Eigen::VectorXd apply_zscore(const Eigen::VectorXd& v, const ZScoreStats& stats) {
  if (v.size() != stats.mean.size()) {
    throw Error(ErrorKind::shape_mismatch, "apply_zscore: dimension mismatch");
  }
  Eigen::VectorXd z(v.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    z(i) = stats.std(i) <= kStdFloor ? 0.0 : (v(i) - stats.mean(i)) / stats.std(i);
  }
  return z;
}

void apply_zscore(std::span<SegmentFeature> segments, const ZScoreStats& stats) {
  for (auto& s : segments) s.vector = apply_zscore(s.vector, stats);
}

Eigen::VectorXd invert_zscore(const Eigen::VectorXd& z, const ZScoreStats& stats) {
  return (z.array() * stats.std.array() + stats.mean.array()).matrix();
}

nlohmann::json to_json(const ZScoreStats& z) {
  return {{"mean", std::vector<double>(z.mean.data(), z.mean.data() + z.mean.size())},
          {"std", std::vector<double>(z.std.data(), z.std.data() + z.std.size())},
          {"source_split", z.source_split}};
}

ZScoreStats zscore_from_json(const nlohmann::json& j) {
  ZScoreStats z;
  try {
    const auto mean = j.at("mean").get<std::vector<double>>();
    const auto std = j.at("std").get<std::vector<double>>();
    if (mean.size() != std.size()) throw Error(ErrorKind::format, "z-score mean/std length differ");
    z.mean = Eigen::Map<const Eigen::VectorXd>(mean.data(), static_cast<Eigen::Index>(mean.size()));
    z.std = Eigen::Map<const Eigen::VectorXd>(std.data(), static_cast<Eigen::Index>(std.size()));
    z.source_split = j.value("source_split", std::string{});
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::format, std::string("z-score stats: ") + e.what());
  }
  return z;
}

std::string to_string(FeatureSource s) {
  return s == FeatureSource::melspectrogram ? "melspectrogram" : "contextual_embedding";
}

FeatureSource feature_source_from_string(const std::string& s) {
  if (s == "contextual_embedding" || s == "contextual") return FeatureSource::contextual_embedding;
  if (s == "melspectrogram" || s == "mel") return FeatureSource::melspectrogram;
  throw Error(ErrorKind::config, "unknown feature source '" + s + "'");
}

// ---------------------------------------------------------------------------
// Mel

namespace {
constexpr double kMelFSp = 200.0 / 3.0;
constexpr double kMinLogHz = 1000.0;
constexpr double kMinLogMel = kMinLogHz / kMelFSp;
const double kLogStep = std::log(6.4) / 27.0;
}  // namespace

double hz_to_mel(double hz) {
  if (hz < kMinLogHz) return hz / kMelFSp;
  return kMinLogMel + std::log(hz / kMinLogHz) / kLogStep;
}

double mel_to_hz(double mel) {
  if (mel < kMinLogMel) return mel * kMelFSp;
  return kMinLogHz * std::exp(kLogStep * (mel - kMinLogMel));
}

std::vector<double> mel_edges_hz(double rate_hz, std::size_t n_mels) {
  const double top = hz_to_mel(rate_hz / 2.0);
  std::vector<double> edges(n_mels + 2);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    edges[i] = mel_to_hz(top * static_cast<double>(i) / static_cast<double>(n_mels + 1));
  }
  return edges;
}

std::vector<double> mel_band_centers_hz(double rate_hz, std::size_t n_mels) {
  const auto edges = mel_edges_hz(rate_hz, n_mels);
  return {edges.begin() + 1, edges.end() - 1};
}

Eigen::MatrixXd mel_filterbank(double rate_hz, std::size_t n_fft, std::size_t n_mels) {
  const std::size_t n_bins = n_fft / 2 + 1;
  const auto edges = mel_edges_hz(rate_hz, n_mels);
  Eigen::MatrixXd fb = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n_mels), static_cast<Eigen::Index>(n_bins));
  for (std::size_t m = 0; m < n_mels; ++m) {
    const double lo = edges[m], mid = edges[m + 1], hi = edges[m + 2];
    const double enorm = 2.0 / (hi - lo);
    for (std::size_t k = 0; k < n_bins; ++k) {
      const double f = rate_hz * static_cast<double>(k) / static_cast<double>(n_fft);
      const double rise = (f - lo) / (mid - lo);
      const double fall = (hi - f) / (hi - mid);
      const double w = std::max(0.0, std::min(rise, fall));
      fb(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k)) = w * enorm;
    }
  }
  return fb;
}

Eigen::MatrixXd power_spectrogram(std::span<const double> audio, std::size_t n_fft, std::size_t hop) {
  const std::size_t pad = n_fft / 2;
  const std::size_t n_frames = 1 + audio.size() / hop;
  const std::size_t n_bins = n_fft / 2 + 1;

  std::vector<double> window(n_fft);
  for (std::size_t i = 0; i < n_fft; ++i) {
    window[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n_fft));
  }

  Eigen::FFT<double> fft;
  std::vector<double> frame(n_fft);
  std::vector<std::complex<double>> spec;
  Eigen::MatrixXd power(static_cast<Eigen::Index>(n_frames), static_cast<Eigen::Index>(n_bins));
  for (std::size_t f = 0; f < n_frames; ++f) {
    for (std::size_t i = 0; i < n_fft; ++i) {
      const long idx = static_cast<long>(f * hop + i) - static_cast<long>(pad);
      const double x = (idx >= 0 && idx < static_cast<long>(audio.size())) ? audio[static_cast<std::size_t>(idx)] : 0.0;
      frame[i] = x * window[i];
    }
    fft.fwd(spec, frame);
    for (std::size_t k = 0; k < n_bins; ++k) {
      power(static_cast<Eigen::Index>(f), static_cast<Eigen::Index>(k)) = std::norm(spec[k]);
    }
  }
  return power;
}

FeatureFrameSeries mel_power(std::span<const double> audio, double rate_hz, double t0, const MelConfig& cfg) {
  if (!(rate_hz >= cfg.min_rate_hz)) {
    throw Error(ErrorKind::invalid_spec, "melspectrogram: sample rate below " +
                                             std::to_string(cfg.min_rate_hz) + " Hz");
  }
  const Eigen::MatrixXd fb = mel_filterbank(rate_hz, cfg.n_fft, cfg.n_mels);
  for (Eigen::Index m = 0; m < fb.rows(); ++m) {
    if (fb.row(m).maxCoeff() <= 0.0) {
      throw Error(ErrorKind::invalid_spec, "melspectrogram: empty mel band at this rate");
    }
  }
  for (double x : audio) {
    if (!std::isfinite(x)) throw Error(ErrorKind::non_finite, "melspectrogram: non-finite audio");
  }
  FeatureFrameSeries out;
  out.frames = power_spectrogram(audio, cfg.n_fft, cfg.hop) * fb.transpose();
  out.frame_rate_hz = rate_hz / static_cast<double>(cfg.hop);
  out.source = FeatureSource::melspectrogram;
  out.t0 = t0;
  return out;
}

FeatureFrameSeries melspectrogram(std::span<const double> audio, double rate_hz, double t0, const MelConfig& cfg) {
  FeatureFrameSeries mel = mel_power(audio, rate_hz, t0, cfg);
  mel.frames = mel.frames.array().max(kLogFloor).log().matrix();
  if (mel.frames.rows() < 2) return mel;
  return retime_frames(mel, kFeatureGridHz);
}

double mel_centroid(std::span<const double> power, std::span<const double> freqs_hz) {
  if (power.size() != freqs_hz.size()) {
    throw Error(ErrorKind::shape_mismatch, "mel_centroid: power and frequency lengths differ");
  }
  double num = 0.0, den = 0.0;
  for (std::size_t k = 0; k < power.size(); ++k) {
    num += freqs_hz[k] * power[k];
    den += power[k];
  }
  if (!(den > 0.0)) return std::numeric_limits<double>::quiet_NaN();
  return num / den;
}

double segment_mel_centroid(const Eigen::MatrixXd& mel_power_frames, double rate_hz) {
  const Eigen::VectorXd mean = mel_power_frames.colwise().mean().transpose();
  const auto centers = mel_band_centers_hz(rate_hz, static_cast<std::size_t>(mean.size()));
  return mel_centroid(std::span<const double>(mean.data(), static_cast<std::size_t>(mean.size())), centers);
}

// ---------------------------------------------------------------------------
// WAV

namespace {

std::uint32_t read_u32(const unsigned char* p) {
  return p[0] | (p[1] << 8) | (p[2] << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
std::uint16_t read_u16(const unsigned char* p) { return static_cast<std::uint16_t>(p[0] | (p[1] << 8)); }

void put_u32(std::ostream& o, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  o.write(reinterpret_cast<const char*>(b), 4);
}
void put_u16(std::ostream& o, std::uint16_t v) {
  const unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
  o.write(reinterpret_cast<const char*>(b), 2);
}

}  // namespace

Waveform read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, "cannot open WAV " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::string(bytes.begin(), bytes.begin() + 4) != "RIFF" ||
      std::string(bytes.begin() + 8, bytes.begin() + 12) != "WAVE") {
    throw Error(ErrorKind::format, "not a RIFF/WAVE file: " + path.string());
  }
  Waveform wave;
  bool have_fmt = false;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const std::string id(bytes.begin() + static_cast<long>(pos), bytes.begin() + static_cast<long>(pos) + 4);
    const std::uint32_t size = read_u32(&bytes[pos + 4]);
    const std::size_t body = pos + 8;
    if (body + size > bytes.size()) throw Error(ErrorKind::format, "truncated WAV chunk in " + path.string());
    if (id == "fmt ") {
      const auto format = read_u16(&bytes[body]);
      const auto channels = read_u16(&bytes[body + 2]);
      wave.sample_rate_hz = read_u32(&bytes[body + 4]);
      const auto bits = read_u16(&bytes[body + 14]);
      if (format != 1 || channels != 1 || bits != 16) {
        throw Error(ErrorKind::format, "only 16-bit PCM mono WAV is supported: " + path.string());
      }
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw Error(ErrorKind::format, "WAV data before fmt chunk: " + path.string());
      wave.samples.resize(size / 2);
      for (std::size_t i = 0; i < wave.samples.size(); ++i) {
        const auto raw = static_cast<std::int16_t>(read_u16(&bytes[body + 2 * i]));
        wave.samples[i] = static_cast<double>(raw) / 32768.0;
      }
      return wave;
    }
    pos = body + size + (size & 1u);
  }
  throw Error(ErrorKind::format, "WAV without data chunk: " + path.string());
}

void write_wav(const std::filesystem::path& path, const Waveform& wave) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::io, "cannot write WAV " + path.string());
  const auto n = static_cast<std::uint32_t>(wave.samples.size());
  const auto rate = static_cast<std::uint32_t>(std::lround(wave.sample_rate_hz));
  out.write("RIFF", 4);
  put_u32(out, 36 + 2 * n);
  out.write("WAVEfmt ", 8);
  put_u32(out, 16);
  put_u16(out, 1);
  put_u16(out, 1);
  put_u32(out, rate);
  put_u32(out, rate * 2);
  put_u16(out, 2);
  put_u16(out, 16);
  out.write("data", 4);
  put_u32(out, 2 * n);
  for (double x : wave.samples) {
    const auto v = static_cast<std::int16_t>(std::clamp(std::lround(x * 32768.0), -32768L, 32767L));
    put_u16(out, static_cast<std::uint16_t>(v));
  }
}

}  // namespace ieegclip::features
