#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

namespace ieegclip::features {

enum class FeatureSource { contextual_embedding, melspectrogram };

inline constexpr std::size_t kContextualDim = 1024;
inline constexpr std::size_t kMelBands = 40;
inline constexpr double kEmbeddingRateHz = 50.0;
inline constexpr double kFeatureGridHz = 120.0;
inline constexpr double kSegmentSeconds = 3.0;
inline constexpr double kChunkSeconds = 30.0;
inline constexpr double kMinTailSeconds = 10.0;

// Frames are rows: frames(k, :) covers [t0 + k/rate, t0 + (k+1)/rate).
struct FeatureFrameSeries {
  Eigen::MatrixXd frames;  // time x dim
  double frame_rate_hz = 0.0;
  FeatureSource source = FeatureSource::contextual_embedding;
  double t0 = 0.0;

  std::size_t dim() const { return static_cast<std::size_t>(frames.cols()); }
  std::size_t size() const { return static_cast<std::size_t>(frames.rows()); }
  double duration_s() const { return static_cast<double>(frames.rows()) / frame_rate_hz; }
};

struct SegmentFeature {
  Eigen::VectorXd vector;
  std::string chunk_id;
  int segment_index = 0;
  int day_index = 1;
  double hour = 0.0;
  double t_start = 0.0;
};

struct ZScoreStats {
  Eigen::VectorXd mean;
  Eigen::VectorXd std;  // floored, always > 0
  std::string source_split;
};

nlohmann::json to_json(const ZScoreStats& z);
ZScoreStats zscore_from_json(const nlohmann::json& j);

std::string to_string(FeatureSource s);
FeatureSource feature_source_from_string(const std::string& s);  // also accepts "contextual" and "mel"

inline constexpr double kStdFloor = 1e-8;
inline constexpr double kLogFloor = 1e-10;

struct Chunk {
  std::string id;
  int index = 0;
  double start = 0.0;  // absolute seconds
  double duration_s = 0.0;
};

// Consecutive chunk_s chunks; a trailing partial chunk is kept iff it lasts at
// least min_tail_s. Ids are "<stream_id>:<index, 4 digits>".
std::vector<Chunk> chunk_audio(const std::string& stream_id, double t0, double duration_s,
                               double chunk_s = kChunkSeconds, double min_tail_s = kMinTailSeconds);

// Per-dimension linear interpolation onto a new frame grid, sampled at frame
// centers, with linear extrapolation at the two ends. Frame count becomes
// round(n * target / rate).
FeatureFrameSeries retime_frames(const FeatureFrameSeries& series, double target_hz);

// retime_frames restricted to upsampling (frame_rate_hz <= target_hz).
FeatureFrameSeries interpolate_frames(const FeatureFrameSeries& series,
                                      double target_hz = kFeatureGridHz);

// Means over non-overlapping windows of round(window_s * rate) frames; a
// trailing partial window is dropped. Provenance fields other than
// segment_index and t_start are left for the caller.
std::vector<SegmentFeature> segment_average(const FeatureFrameSeries& series,
                                            double window_s = kSegmentSeconds);

// Population statistics per dimension; std floored at kStdFloor.
ZScoreStats fit_zscore(std::span<const SegmentFeature> train, std::string source_split = "train");
ZScoreStats fit_zscore(const Eigen::MatrixXd& rows, std::string source_split = "train");

// Dimensions whose fitted std hit the floor map to exactly 0.
void apply_zscore(std::span<SegmentFeature> segments, const ZScoreStats& stats);
Eigen::VectorXd apply_zscore(const Eigen::VectorXd& v, const ZScoreStats& stats);
Eigen::VectorXd invert_zscore(const Eigen::VectorXd& z, const ZScoreStats& stats);

// --- log-mel --------------------------------------------------------------

struct MelConfig {
  std::size_t n_fft = 512;
  std::size_t hop = 128;
  std::size_t n_mels = kMelBands;
  double min_rate_hz = 4000.0;
};

double hz_to_mel(double hz);  // Slaney scale
double mel_to_hz(double mel);

// n_mels + 2 edge frequencies, evenly spaced on the mel scale over [0, rate/2].
std::vector<double> mel_edges_hz(double rate_hz, std::size_t n_mels);
// Center frequency of each mel band.
std::vector<double> mel_band_centers_hz(double rate_hz, std::size_t n_mels);

// Slaney-normalized triangular filterbank, n_mels x (n_fft/2 + 1).
Eigen::MatrixXd mel_filterbank(double rate_hz, std::size_t n_fft, std::size_t n_mels);

// Centered STFT (zero padding), periodic Hann window, |X|^2.
// Result is frames x (n_fft/2 + 1); frame rate = rate / hop.
Eigen::MatrixXd power_spectrogram(std::span<const double> audio, std::size_t n_fft, std::size_t hop);

// Linear mel power at the STFT frame rate (frames x n_mels).
FeatureFrameSeries mel_power(std::span<const double> audio, double rate_hz, double t0 = 0.0,
                             const MelConfig& cfg = {});

// log(max(p, 1e-10)) mel frames resampled to the 120 Hz feature grid.
FeatureFrameSeries melspectrogram(std::span<const double> audio, double rate_hz, double t0 = 0.0,
                                  const MelConfig& cfg = {});

// Energy-weighted mean frequency sum(f*p)/sum(p). NaN when total power is 0.
double mel_centroid(std::span<const double> power, std::span<const double> freqs_hz);

// Mean linear mel power over frames, then mel_centroid against band centers.
double segment_mel_centroid(const Eigen::MatrixXd& mel_power_frames, double rate_hz);

// --- WAV ------------------------------------------------------------------

struct Waveform {
  std::vector<double> samples;  // [-1, 1)
  double sample_rate_hz = 0.0;
};

// 16-bit PCM, mono.
Waveform read_wav(const std::filesystem::path& path);
void write_wav(const std::filesystem::path& path, const Waveform& wave);

}  // namespace ieegclip::features
