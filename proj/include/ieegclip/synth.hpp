#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "ieegclip/corpus.hpp"
#include "ieegclip/dsp.hpp"
#include "ieegclip/features.hpp"

namespace ieegclip::synth {

struct CouplingConfig {
  std::uint64_t mixing_seed = 1;
  double kernel_width_ms = 50.0;  // time constant of the causal smoothing kernel
  double gain = 1.0;
  double spectral_coupling = 0.1;  // mixing weight of feature dim 0 relative to the others
};

struct DriftConfig {
  double day_offset_scale = 0.0;     // neural DC offset per day and channel, in signal RMS units
  double wander_scale = 0.0;         // slow per-channel wander
  double feature_day_scale = 0.0;    // per-day offset of the acoustic environment
  double oscillation_scale = 0.0;    // per-day, per-channel amplitude of a narrowband rhythm
  double oscillation_hz = 14.0;
};

struct ShiftConfig {
  double mix = 3.0;            // A = I + mix * R, R Gaussian / sqrt(d)
  double bias = 1.5;           // b = bias * N(0, I)
  double ambient_noise = 0.3;  // room-microphone noise on every ambient feature stream
  double true_noise = 0.05;
  double task_amplitude = 0.7; // latent amplitude while the audiobook plays
};

struct TaskConfig {
  bool enabled = true;
  int day = 2;
  int hour = 10;  // must be one of the recorded hours
  double minutes = 60.0;
};

struct SynthConfig {
  std::string subject_id = "synth01";
  int n_channels = 20;
  int feature_dim = 32;
  int n_days = 4;
  int hours_per_day = 6;
  int start_hour = 8;
  double file_duration_s = 3600.0;
  double feature_rate_hz = features::kEmbeddingRateHz;
  double neural_rate_hz = 512.0;
  int shafts = 4;

  double latent_low_hz = 0.1;
  double latent_high_hz = 1.0;
  double speech_fraction = 0.4;
  double speech_bout_s = 4.0;
  double speech_amplitude = 1.0;
  double diurnal_depth = 0.5;

  CouplingConfig coupling;
  double noise_sigma = 1.0 / 3.0;  // in-band noise RMS over unit-gain signal RMS at the pipeline rate
  DriftConfig drift;
  ShiftConfig shift;
  TaskConfig task;

  double centroid_base_hz = 1500.0;
  double centroid_scale_hz = 400.0;
  double centroid_noise_hz = 20.0;

  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json to_json(const SynthConfig& c);
SynthConfig synth_config_from_json(const nlohmann::json& j);

// Midnight UTC of day 1.
inline constexpr double kEpochBase = 1704067200.0;

// Fixed random structure shared by every session of one config.
struct Coupling {
  Eigen::MatrixXd mixing;          // n_channels x feature_dim
  Eigen::VectorXd speech_pattern;  // feature_dim, unit norm, zero in dim 0
  Eigen::MatrixXd feature_day;     // n_days x feature_dim, zero in dim 0
  Eigen::MatrixXd neural_day;      // n_days x n_channels, DC offsets
  Eigen::MatrixXd oscillation;     // n_days x n_channels, rhythm amplitudes
  Eigen::MatrixXd shift_a;         // feature_dim x feature_dim
  Eigen::VectorXd shift_b;         // feature_dim
  double kernel_pole = 0.0;        // y[n] = p y[n-1] + (1-p) x[n] at the neural rate
  double signal_rms = 1.0;         // RMS of gain * M V per channel, averaged
};

Coupling make_coupling(const SynthConfig& cfg);
nlohmann::json to_json(const Coupling& c);

struct SessionSpec {
  std::string id;
  int day = 1;
  double t0 = 0.0;
  double duration_s = 0.0;
  bool task = false;
};

std::vector<SessionSpec> weeklong_sessions(const SynthConfig& cfg);
SessionSpec task_session(const SynthConfig& cfg);

// Latent audio of one session as the room presents it (what the brain hears).
struct SessionSignals {
  SessionSpec session;
  Eigen::MatrixXd heard;       // frames x feature_dim at feature_rate_hz
  std::vector<std::uint8_t> speech;  // per frame
};

SessionSignals gen_features(const SynthConfig& cfg, const Coupling& coupling, const SessionSpec& session);

// Heard features plus room-microphone noise.
features::FeatureFrameSeries ambient_features(const SynthConfig& cfg, const SessionSignals& s);

// (ambient-task, true-task): the true stream is A * heard + b + noise.
std::pair<features::FeatureFrameSeries, features::FeatureFrameSeries> gen_task_shift(const SynthConfig& cfg,
                                                                                   const Coupling& coupling,
                                                                                   const SessionSignals& s);

// One neural channel at neural_rate_hz. With `clean`, only gain * k * (M V)
// is emitted (no offsets, wander, rhythm or noise).
dsp::ChannelSeries gen_neural_channel(const SynthConfig& cfg, const Coupling& coupling, const SessionSignals& s,
                                      int channel, bool clean = false);

std::vector<double> centroid_track(const SynthConfig& cfg, const SessionSignals& s);
std::vector<corpus::Interval> speech_intervals(const SynthConfig& cfg, const SessionSignals& s);

std::vector<corpus::ChannelInfo> channel_layout(const SynthConfig& cfg);

struct SynthBundle {
  corpus::RecordingManifest weeklong;
  corpus::RecordingManifest task;  // empty when the task is disabled
  nlohmann::json coupling;
};

// Manifests referencing the generator. With `out_dir`, every file is written
// as arr1/JSON next to the manifests and the manifests reference those files.
SynthBundle make_bundle(const SynthConfig& cfg);
SynthBundle write_bundle(const SynthConfig& cfg, const std::filesystem::path& out_dir, bool materialize);

// Generates signals on demand for manifests produced by make_bundle. The most
// recent session's latent features are cached.
class SynthSource : public corpus::SignalSource {
 public:
  explicit SynthSource(SynthConfig cfg);

  dsp::ChannelSeries neural_channel(const corpus::RecordingManifest& m, const corpus::FileEntry& f,
                                    std::size_t index) const override;
  features::FeatureFrameSeries embedding(const corpus::RecordingManifest& m, const corpus::FileEntry& f) const override;
  features::Waveform waveform(const corpus::RecordingManifest& m, const corpus::FileEntry& f) const override;
  std::vector<double> centroid_track(const corpus::RecordingManifest& m, const corpus::FileEntry& f) const override;
  std::vector<corpus::Interval> voice_intervals(const corpus::RecordingManifest& m,
                                                const corpus::FileEntry& f) const override;

  const SynthConfig& config() const { return cfg_; }
  const Coupling& coupling() const { return coupling_; }

 private:
  std::shared_ptr<const SessionSignals> signals(const std::string& session) const;

  SynthConfig cfg_;
  Coupling coupling_;
  std::vector<SessionSpec> sessions_;
  mutable std::mutex mutex_;
  mutable std::shared_ptr<const SessionSignals> cached_;
};

// A file-backed source for manifests without a generator, SynthSource otherwise.
std::unique_ptr<corpus::SignalSource> source_for(const corpus::RecordingManifest& m);

}  // namespace ieegclip::synth
