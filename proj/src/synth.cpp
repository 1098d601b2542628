#include "ieegclip/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include "ieegclip/arr1.hpp"
#include "ieegclip/error.hpp"
#include "ieegclip/rng.hpp"

namespace ieegclip::synth {

using nlohmann::json;

void SynthConfig::validate() const {
  auto need = [](bool ok, const char* what) {
    if (!ok) throw Error(ErrorKind::config, std::string("synth config: ") + what);
  };
  need(n_channels > 0 && feature_dim > 0, "dimensions must be positive");
  need(n_days > 0 && hours_per_day > 0, "n_days and hours_per_day must be positive");
  need(start_hour >= 0 && start_hour < 24, "start_hour must lie in [0, 24)");
  need(file_duration_s >= 60.0, "file_duration_s must be at least 60");
  need(feature_rate_hz > 0.0 && neural_rate_hz > 2.0 * 50.0, "rates too low for the pipeline");
  need(shafts > 0 && shafts <= n_channels, "shafts must lie in [1, n_channels]");
  need(latent_low_hz > 0.0 && latent_high_hz > latent_low_hz && latent_high_hz < feature_rate_hz / 2,
       "latent band must satisfy 0 < low < high < feature Nyquist");
  need(speech_fraction > 0.0 && speech_fraction < 1.0, "speech_fraction must lie in (0, 1)");
  need(speech_bout_s > 0.0, "speech_bout_s must be positive");
  need(noise_sigma >= 0.0 && coupling.gain >= 0.0 && coupling.kernel_width_ms > 0.0, "noise and gain must be >= 0");
  need(drift.day_offset_scale >= 0.0 && drift.wander_scale >= 0.0 && drift.feature_day_scale >= 0.0 &&
           drift.oscillation_scale >= 0.0,
       "drift scales must be >= 0");
  need(shift.ambient_noise >= 0.0 && shift.true_noise >= 0.0, "shift noise must be >= 0");
  if (task.enabled) {
    need(task.day >= 1 && task.day <= n_days, "task.day outside the recording");
    need(task.hour >= start_hour && task.hour < start_hour + hours_per_day, "task.hour is not a recorded hour");
    need(task.minutes > 0.0 && task.minutes * 60.0 <= file_duration_s, "task must fit inside one file");
  }
}

json to_json(const SynthConfig& c) {
  return {{"subject_id", c.subject_id},
          {"n_channels", c.n_channels},
          {"feature_dim", c.feature_dim},
          {"n_days", c.n_days},
          {"hours_per_day", c.hours_per_day},
          {"start_hour", c.start_hour},
          {"file_duration_s", c.file_duration_s},
          {"feature_rate_hz", c.feature_rate_hz},
          {"neural_rate_hz", c.neural_rate_hz},
          {"shafts", c.shafts},
          {"latent_low_hz", c.latent_low_hz},
          {"latent_high_hz", c.latent_high_hz},
          {"speech_fraction", c.speech_fraction},
          {"speech_bout_s", c.speech_bout_s},
          {"speech_amplitude", c.speech_amplitude},
          {"diurnal_depth", c.diurnal_depth},
          {"coupling",
           {{"mixing_seed", c.coupling.mixing_seed},
            {"kernel_width_ms", c.coupling.kernel_width_ms},
            {"gain", c.coupling.gain},
            {"spectral_coupling", c.coupling.spectral_coupling}}},
          {"noise_sigma", c.noise_sigma},
          {"drift",
           {{"day_offset_scale", c.drift.day_offset_scale},
            {"wander_scale", c.drift.wander_scale},
            {"feature_day_scale", c.drift.feature_day_scale},
            {"oscillation_scale", c.drift.oscillation_scale},
            {"oscillation_hz", c.drift.oscillation_hz}}},
          {"shift",
           {{"mix", c.shift.mix},
            {"bias", c.shift.bias},
            {"ambient_noise", c.shift.ambient_noise},
            {"true_noise", c.shift.true_noise},
            {"task_amplitude", c.shift.task_amplitude}}},
          {"task", {{"enabled", c.task.enabled}, {"day", c.task.day}, {"hour", c.task.hour}, {"minutes", c.task.minutes}}},
          {"centroid_base_hz", c.centroid_base_hz},
          {"centroid_scale_hz", c.centroid_scale_hz},
          {"centroid_noise_hz", c.centroid_noise_hz},
          {"seed", c.seed}};
}

SynthConfig synth_config_from_json(const json& j) {
  SynthConfig c;
  try {
    c.subject_id = j.value("subject_id", c.subject_id);
    c.n_channels = j.value("n_channels", c.n_channels);
    c.feature_dim = j.value("feature_dim", c.feature_dim);
    c.n_days = j.value("n_days", c.n_days);
    c.hours_per_day = j.value("hours_per_day", c.hours_per_day);
    c.start_hour = j.value("start_hour", c.start_hour);
    c.file_duration_s = j.value("file_duration_s", c.file_duration_s);
    c.feature_rate_hz = j.value("feature_rate_hz", c.feature_rate_hz);
    c.neural_rate_hz = j.value("neural_rate_hz", c.neural_rate_hz);
    c.shafts = j.value("shafts", c.shafts);
    c.latent_low_hz = j.value("latent_low_hz", c.latent_low_hz);
    c.latent_high_hz = j.value("latent_high_hz", c.latent_high_hz);
    c.speech_fraction = j.value("speech_fraction", c.speech_fraction);
    c.speech_bout_s = j.value("speech_bout_s", c.speech_bout_s);
    c.speech_amplitude = j.value("speech_amplitude", c.speech_amplitude);
    c.diurnal_depth = j.value("diurnal_depth", c.diurnal_depth);
    if (j.contains("coupling")) {
      const auto& k = j.at("coupling");
      c.coupling.mixing_seed = k.value("mixing_seed", c.coupling.mixing_seed);
      c.coupling.kernel_width_ms = k.value("kernel_width_ms", c.coupling.kernel_width_ms);
      c.coupling.gain = k.value("gain", c.coupling.gain);
      c.coupling.spectral_coupling = k.value("spectral_coupling", c.coupling.spectral_coupling);
    }
    c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
    if (j.contains("drift")) {
      const auto& d = j.at("drift");
      c.drift.day_offset_scale = d.value("day_offset_scale", c.drift.day_offset_scale);
      c.drift.wander_scale = d.value("wander_scale", c.drift.wander_scale);
      c.drift.feature_day_scale = d.value("feature_day_scale", c.drift.feature_day_scale);
      c.drift.oscillation_scale = d.value("oscillation_scale", c.drift.oscillation_scale);
      c.drift.oscillation_hz = d.value("oscillation_hz", c.drift.oscillation_hz);
    }
    if (j.contains("shift")) {
      const auto& s = j.at("shift");
      c.shift.mix = s.value("mix", c.shift.mix);
      c.shift.bias = s.value("bias", c.shift.bias);
      c.shift.ambient_noise = s.value("ambient_noise", c.shift.ambient_noise);
      c.shift.true_noise = s.value("true_noise", c.shift.true_noise);
      c.shift.task_amplitude = s.value("task_amplitude", c.shift.task_amplitude);
    }
    if (j.contains("task")) {
      const auto& t = j.at("task");
      c.task.enabled = t.value("enabled", c.task.enabled);
      c.task.day = t.value("day", c.task.day);
      c.task.hour = t.value("hour", c.task.hour);
      c.task.minutes = t.value("minutes", c.task.minutes);
    }
    c.centroid_base_hz = j.value("centroid_base_hz", c.centroid_base_hz);
    c.centroid_scale_hz = j.value("centroid_scale_hz", c.centroid_scale_hz);
    c.centroid_noise_hz = j.value("centroid_noise_hz", c.centroid_noise_hz);
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::config, std::string("synth config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

namespace {

Eigen::VectorXd gaussian_vector(CounterRng rng, Eigen::Index n) {
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = rng.normal();
  return v;
}

Eigen::MatrixXd gaussian_matrix(CounterRng rng, Eigen::Index rows, Eigen::Index cols) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c) {
    for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = rng.normal();
  }
  return m;
}

}  // namespace

Coupling make_coupling(const SynthConfig& cfg) {
  cfg.validate();
  const int n = cfg.n_channels, d = cfg.feature_dim;
  const CounterRng mix_root(cfg.coupling.mixing_seed);
  const CounterRng root = CounterRng(cfg.seed).derive("coupling");
  Coupling c;

  c.mixing = gaussian_matrix(mix_root.derive("mixing"), n, d);
  c.mixing.col(0) *= cfg.coupling.spectral_coupling;
  for (int r = 0; r < n; ++r) c.mixing.row(r).normalize();

  c.speech_pattern = gaussian_vector(root.derive("speech"), d);
  c.speech_pattern(0) = 0.0;
  if (d > 1) c.speech_pattern.normalize();

  c.feature_day = gaussian_matrix(root.derive("feature_day"), cfg.n_days, d);
  c.feature_day.col(0).setZero();
  c.neural_day = gaussian_matrix(root.derive("neural_day"), cfg.n_days, n);
  c.oscillation.resize(cfg.n_days, n);
  CounterRng osc = root.derive("oscillation");
  for (int r = 0; r < cfg.n_days; ++r) {
    for (int ch = 0; ch < n; ++ch) c.oscillation(r, ch) = 2.0 * osc.uniform();
  }

  c.shift_a = Eigen::MatrixXd::Identity(d, d) +
              cfg.shift.mix * gaussian_matrix(root.derive("shift_a"), d, d) / std::sqrt(static_cast<double>(d));
  c.shift_b = cfg.shift.bias * gaussian_vector(root.derive("shift_b"), d);

  const double tau = cfg.coupling.kernel_width_ms / 1000.0;
  c.kernel_pole = std::exp(-1.0 / (tau * cfg.neural_rate_hz));
  c.signal_rms = cfg.coupling.gain;  // unit-norm mixing rows over unit-variance latents
  return c;
}

json to_json(const Coupling& c) {
  auto mat = [](const Eigen::MatrixXd& m) {
    json rows = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      json row = json::array();
      for (Eigen::Index k = 0; k < m.cols(); ++k) row.push_back(m(r, k));
      rows.push_back(row);
    }
    return rows;
  };
  return {{"mixing", mat(c.mixing)},
          {"speech_pattern", mat(c.speech_pattern.transpose())},
          {"feature_day", mat(c.feature_day)},
          {"neural_day", mat(c.neural_day)},
          {"oscillation", mat(c.oscillation)},
          {"shift_a", mat(c.shift_a)},
          {"shift_b", mat(c.shift_b.transpose())},
          {"kernel", {{"type", "one_pole"}, {"pole", c.kernel_pole}}},
          {"signal_rms", c.signal_rms}};
}

// ---------------------------------------------------------------------------

std::vector<SessionSpec> weeklong_sessions(const SynthConfig& cfg) {
  std::vector<SessionSpec> out;
  for (int day = 1; day <= cfg.n_days; ++day) {
    for (int k = 0; k < cfg.hours_per_day; ++k) {
      const int hour = cfg.start_hour + k;
      char id[32];
      std::snprintf(id, sizeof id, "d%dh%02d", day, hour);
      out.push_back({id, day, kEpochBase + (day - 1) * 86400.0 + hour * 3600.0, cfg.file_duration_s, false});
    }
  }
  return out;
}

SessionSpec task_session(const SynthConfig& cfg) {
  return {"task", cfg.task.day, kEpochBase + (cfg.task.day - 1) * 86400.0 + cfg.task.hour * 3600.0,
          cfg.task.minutes * 60.0, true};
}

namespace {

// Unit-variance band-limited noise, frames x dims, causal filtering with a
// burn-in so the start is stationary.
Eigen::MatrixXd band_noise(const SynthConfig& cfg, CounterRng rng, Eigen::Index frames, Eigen::Index dims) {
  const dsp::FilterSpec spec{cfg.latent_low_hz, cfg.latent_high_hz, dsp::FilterKind::bandpass, 2, 4};
  const auto sections = dsp::design_butterworth(spec, cfg.feature_rate_hz);
  const std::size_t burn = dsp::impulse_response_length(spec, cfg.feature_rate_hz);

  std::vector<double> impulse(burn * 2, 0.0);
  impulse[0] = 1.0;
  dsp::filter_causal(sections, impulse);
  double energy = 0.0;
  for (double v : impulse) energy += v * v;
  const double scale = 1.0 / std::sqrt(energy);

  Eigen::MatrixXd out(frames, dims);
  std::vector<double> buf(burn + static_cast<std::size_t>(frames));
  for (Eigen::Index k = 0; k < dims; ++k) {
    CounterRng r = rng.derive(static_cast<std::uint64_t>(k));
    for (auto& v : buf) v = r.normal();
    dsp::filter_causal(sections, buf);
    for (Eigen::Index i = 0; i < frames; ++i) out(i, k) = scale * buf[burn + static_cast<std::size_t>(i)];
  }
  return out;
}

double diurnal_amplitude(double depth, double t) {
  double h = std::fmod(t, 86400.0) / 3600.0;
  if (h < 0) h += 24.0;
  const double x = std::min(1.0, ((h - 14.0) / 10.0) * ((h - 14.0) / 10.0));
  return 1.0 - depth * x;
}

CounterRng session_rng(const SynthConfig& cfg, const SessionSpec& s) {
  return CounterRng(cfg.seed).derive("session").derive(s.id);
}

}  // namespace

SessionSignals gen_features(const SynthConfig& cfg, const Coupling& coupling, const SessionSpec& session) {
  const CounterRng rng = session_rng(cfg, session);
  const auto frames = static_cast<Eigen::Index>(std::llround(session.duration_s * cfg.feature_rate_hz));
  SessionSignals s;
  s.session = session;
  s.heard = band_noise(cfg, rng.derive("latent"), frames, cfg.feature_dim);
  s.speech.assign(static_cast<std::size_t>(frames), 1);

  if (!session.task) {
    CounterRng r = rng.derive("speech");
    const double off = 1.0 / (cfg.speech_bout_s * cfg.feature_rate_hz);
    const double on = off * cfg.speech_fraction / (1.0 - cfg.speech_fraction);
    std::uint8_t state = r.uniform() < cfg.speech_fraction ? 1 : 0;
    for (Eigen::Index i = 0; i < frames; ++i) {
      const double u = r.uniform();
      if (state && u < off) {
        state = 0;
      } else if (!state && u < on) {
        state = 1;
      }
      s.speech[static_cast<std::size_t>(i)] = state;
      const double t = session.t0 + static_cast<double>(i) / cfg.feature_rate_hz;
      s.heard.row(i) *= diurnal_amplitude(cfg.diurnal_depth, t);
    }
  } else {
    s.heard *= cfg.shift.task_amplitude;
  }
  const Eigen::RowVectorXd day = cfg.drift.feature_day_scale * coupling.feature_day.row(session.day - 1);
  for (Eigen::Index i = 0; i < frames; ++i) {
    if (s.speech[static_cast<std::size_t>(i)]) s.heard.row(i) += cfg.speech_amplitude * coupling.speech_pattern.transpose();
    s.heard.row(i) += day;
  }
  return s;
}

namespace {

features::FeatureFrameSeries as_series(const SynthConfig& cfg, const SessionSignals& s, Eigen::MatrixXd frames) {
  features::FeatureFrameSeries out;
  out.frames = std::move(frames);
  out.frame_rate_hz = cfg.feature_rate_hz;
  out.t0 = s.session.t0;
  out.source = features::FeatureSource::contextual_embedding;
  return out;
}

}  // namespace

features::FeatureFrameSeries ambient_features(const SynthConfig& cfg, const SessionSignals& s) {
  Eigen::MatrixXd frames = s.heard;
  if (cfg.shift.ambient_noise > 0.0) {
    frames += cfg.shift.ambient_noise *
              band_noise(cfg, session_rng(cfg, s.session).derive("mic"), frames.rows(), frames.cols());
  }
  return as_series(cfg, s, std::move(frames));
}

std::pair<features::FeatureFrameSeries, features::FeatureFrameSeries> gen_task_shift(const SynthConfig& cfg,
                                                                                   const Coupling& coupling,
                                                                                   const SessionSignals& s) {
  Eigen::MatrixXd shifted = s.heard * coupling.shift_a.transpose();
  shifted.rowwise() += coupling.shift_b.transpose();
  if (cfg.shift.true_noise > 0.0) {
    shifted += cfg.shift.true_noise *
               band_noise(cfg, session_rng(cfg, s.session).derive("true"), shifted.rows(), shifted.cols());
  }
  return {ambient_features(cfg, s), as_series(cfg, s, std::move(shifted))};
}

dsp::ChannelSeries gen_neural_channel(const SynthConfig& cfg, const Coupling& coupling, const SessionSignals& s,
                                      int channel, bool clean) {
  if (channel < 0 || channel >= cfg.n_channels) throw Error(ErrorKind::unknown_channel, "synth: no such channel");
  const Eigen::VectorXd drive = s.heard * coupling.mixing.row(channel).transpose();  // frames
  const auto frames = drive.size();
  const auto samples = static_cast<std::size_t>(std::llround(s.session.duration_s * cfg.neural_rate_hz));

  dsp::ChannelSeries out;
  out.sample_rate_hz = cfg.neural_rate_hz;
  out.t0 = s.session.t0;
  const auto layout = channel_layout(cfg);
  out.channel_id = layout[static_cast<std::size_t>(channel)].id;
  out.shaft_id = layout[static_cast<std::size_t>(channel)].shaft;
  out.contact_index = layout[static_cast<std::size_t>(channel)].contact;
  out.samples.resize(samples);

  // Linear interpolation between frame centers, then the causal kernel.
  const double ratio = cfg.feature_rate_hz / cfg.neural_rate_hz;
  const double p = coupling.kernel_pole;
  double y = 0.0;
  for (std::size_t j = 0; j < samples; ++j) {
    const double pos = std::clamp((static_cast<double>(j) + 0.5) * ratio - 0.5, 0.0, static_cast<double>(frames - 1));
    const auto k = static_cast<Eigen::Index>(pos);
    const double f = pos - static_cast<double>(k);
    const double x = k + 1 < frames ? (1.0 - f) * drive(k) + f * drive(k + 1) : drive(k);
    y = j == 0 ? x : p * y + (1.0 - p) * x;
    out.samples[j] = cfg.coupling.gain * y;
  }
  if (clean) return out;

  CounterRng rng = session_rng(cfg, s.session).derive("neural").derive(static_cast<std::uint64_t>(channel));
  // Noise and drift are sized against the unit-gain signal, so gain 0 leaves
  // pure noise.
  const double rms = 1.0;
  const double offset = cfg.drift.day_offset_scale * rms * coupling.neural_day(s.session.day - 1, channel);
  const double osc_amp = cfg.drift.oscillation_scale * rms * coupling.oscillation(s.session.day - 1, channel);
  // White noise scaled so its RMS inside the pipeline band is noise_sigma * rms.
  const double sigma = cfg.noise_sigma * rms * std::sqrt(cfg.neural_rate_hz / dsp::kPipelineRateHz);

  // Slow wander: one-pole smoothed noise at 1 Hz, 60 s time constant.
  std::vector<double> wander;
  if (cfg.drift.wander_scale > 0.0) {
    CounterRng wr = rng.derive("wander");
    const auto n_slow = static_cast<std::size_t>(std::ceil(s.session.duration_s)) + 2;
    const double pw = std::exp(-1.0 / 60.0);
    const double norm = std::sqrt((1.0 + pw) / (1.0 - pw));
    wander.resize(n_slow);
    double w = wr.normal() / norm;  // stationary start
    for (auto& v : wander) {
      w = pw * w + (1.0 - pw) * wr.normal();
      v = w * norm * cfg.drift.wander_scale * rms;
    }
  }

  CounterRng nr = rng.derive("noise");
  CounterRng pr = rng.derive("phase");
  double phase = 2.0 * std::numbers::pi * pr.uniform();
  const double dphi = 2.0 * std::numbers::pi * cfg.drift.oscillation_hz / cfg.neural_rate_hz;
  for (std::size_t j = 0; j < samples; ++j) {
    double v = out.samples[j] + offset;
    if (!wander.empty()) {
      const double t = static_cast<double>(j) / cfg.neural_rate_hz;
      const auto k = static_cast<std::size_t>(t);
      const double f = t - static_cast<double>(k);
      v += (1.0 - f) * wander[k] + f * wander[k + 1];
    }
    if (osc_amp > 0.0) {
      phase += dphi + 0.02 * pr.normal();
      v += osc_amp * std::sin(phase);
    }
    if (sigma > 0.0) v += sigma * nr.normal();
    out.samples[j] = v;
  }
  return out;
}

std::vector<double> centroid_track(const SynthConfig& cfg, const SessionSignals& s) {
  CounterRng rng = session_rng(cfg, s.session).derive("centroid");
  std::vector<double> out(static_cast<std::size_t>(s.heard.rows()));
  for (Eigen::Index i = 0; i < s.heard.rows(); ++i) {
    out[static_cast<std::size_t>(i)] =
        cfg.centroid_base_hz + cfg.centroid_scale_hz * s.heard(i, 0) + cfg.centroid_noise_hz * rng.normal();
  }
  return out;
}

std::vector<corpus::Interval> speech_intervals(const SynthConfig& cfg, const SessionSignals& s) {
  std::vector<corpus::Interval> out;
  const double dt = 1.0 / cfg.feature_rate_hz;
  for (std::size_t i = 0; i < s.speech.size();) {
    if (!s.speech[i]) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < s.speech.size() && s.speech[j]) ++j;
    out.push_back({s.session.t0 + static_cast<double>(i) * dt, s.session.t0 + static_cast<double>(j) * dt});
    i = j;
  }
  return out;
}

std::vector<corpus::ChannelInfo> channel_layout(const SynthConfig& cfg) {
  static const char* kRois[] = {"superior_temporal", "hippocampus", "frontal", "insula"};
  std::vector<corpus::ChannelInfo> out;
  const int per_shaft = (cfg.n_channels + cfg.shafts - 1) / cfg.shafts;
  for (int c = 0; c < cfg.n_channels; ++c) {
    const int shaft = c / per_shaft;
    const std::string name(1, static_cast<char>('A' + shaft));
    out.push_back({name + std::to_string(c % per_shaft + 1), name, c % per_shaft + 1, kRois[shaft % 4]});
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

void add_session_files(corpus::RecordingManifest& m, const SynthConfig& cfg, const SessionSpec& s) {
  using corpus::FileKind;
  const std::string base = s.id + ".";
  corpus::FileEntry neural{s.id + ":neural", s.id, base + "neural.arr1", FileKind::neural, s.t0, s.duration_s,
                           cfg.neural_rate_hz, channel_layout(cfg), "", ""};
  m.files.push_back(neural);
  m.files.push_back({s.id + ":ambient", s.id, base + "ambient.arr1", FileKind::audio_features, s.t0, s.duration_s,
                     cfg.feature_rate_hz, {}, "ambient", ""});
  if (s.task) {
    m.files.push_back({s.id + ":true", s.id, base + "true.arr1", FileKind::audio_features, s.t0, s.duration_s,
                       cfg.feature_rate_hz, {}, "true", ""});
  }
  m.files.push_back({s.id + ":centroid", s.id, base + "centroid.arr1", FileKind::centroid_track, s.t0, s.duration_s,
                     cfg.feature_rate_hz, {}, "", ""});
  m.files.push_back({s.id + ":voice", s.id, base + "voice.json", FileKind::voice_labels, s.t0, s.duration_s, 0.0,
                     {}, "", ""});
}

json generator_json(const SynthConfig& cfg) { return {{"kind", "ieegclip.synth"}, {"config", to_json(cfg)}}; }

}  // namespace

SynthBundle make_bundle(const SynthConfig& cfg) {
  cfg.validate();
  SynthBundle b;
  b.weeklong.subject_id = cfg.subject_id;
  b.weeklong.generator = generator_json(cfg);
  for (const auto& s : weeklong_sessions(cfg)) add_session_files(b.weeklong, cfg, s);
  if (cfg.task.enabled) {
    const SessionSpec t = task_session(cfg);
    const corpus::Interval span{t.t0, t.t0 + t.duration_s};
    b.weeklong.task_intervals.push_back(span);
    b.task.subject_id = cfg.subject_id;
    b.task.generator = generator_json(cfg);
    add_session_files(b.task, cfg, t);
    b.task.task_intervals.push_back(span);
    b.task.validate();
  }
  b.weeklong.validate();
  b.coupling = to_json(make_coupling(cfg));
  return b;
}

SynthBundle write_bundle(const SynthConfig& cfg, const std::filesystem::path& out_dir, bool materialize) {
  SynthBundle b = make_bundle(cfg);
  std::filesystem::create_directories(out_dir);
  if (materialize) {
    const SynthSource source(cfg);
    for (auto* m : {&b.weeklong, &b.task}) {
      if (m->files.empty()) continue;
      m->base_dir = out_dir;
      for (const auto& f : m->files) {
        const auto path = out_dir / f.path;
        switch (f.kind) {
          case corpus::FileKind::neural: {
            Arr1 a;
            a.shape = {f.channels.size(), 0};
            std::vector<std::string> ids;
            for (std::size_t c = 0; c < f.channels.size(); ++c) {
              const auto ch = source.neural_channel(*m, f, c);
              a.shape[1] = ch.samples.size();
              a.data.insert(a.data.end(), ch.samples.begin(), ch.samples.end());
              ids.push_back(ch.channel_id);
            }
            a.meta = {{"sample_rate_hz", f.sample_rate_hz}, {"t0", f.t0}, {"channel_ids", ids}};
            write_arr1(path, a);
            break;
          }
          case corpus::FileKind::audio_features: {
            const auto e = source.embedding(*m, f);
            Arr1 a;
            a.shape = {e.size(), e.dim()};
            a.data.reserve(e.size() * e.dim());
            for (Eigen::Index r = 0; r < e.frames.rows(); ++r) {
              for (Eigen::Index c = 0; c < e.frames.cols(); ++c) a.data.push_back(static_cast<float>(e.frames(r, c)));
            }
            a.meta = {{"sample_rate_hz", e.frame_rate_hz}, {"t0", e.t0}, {"source", "contextual_embedding"}};
            write_arr1(path, a);
            break;
          }
          case corpus::FileKind::centroid_track: {
            const auto track = source.centroid_track(*m, f);
            Arr1 a;
            a.shape = {track.size(), 1};
            a.data.assign(track.begin(), track.end());
            a.meta = {{"sample_rate_hz", f.sample_rate_hz}, {"t0", f.t0}};
            write_arr1(path, a);
            break;
          }
          case corpus::FileKind::voice_labels: {
            json iv = json::array();
            for (const auto& i : source.voice_intervals(*m, f)) iv.push_back({i.start, i.end});
            std::ofstream(path) << json{{"intervals", iv}}.dump() << '\n';
            break;
          }
          case corpus::FileKind::audio_wave: break;
        }
      }
      m->generator = nullptr;
    }
  }
  corpus::save_manifest(b.weeklong, out_dir / "weeklong.json");
  if (!b.task.files.empty()) corpus::save_manifest(b.task, out_dir / "task.json");
  std::ofstream(out_dir / "coupling.json") << b.coupling.dump(1) << '\n';
  std::ofstream(out_dir / "synth_config.json") << to_json(cfg).dump(2) << '\n';
  b.weeklong.base_dir = out_dir;
  b.task.base_dir = out_dir;
  return b;
}

// ---------------------------------------------------------------------------

SynthSource::SynthSource(SynthConfig cfg) : cfg_(std::move(cfg)), coupling_(make_coupling(cfg_)) {
  sessions_ = weeklong_sessions(cfg_);
  if (cfg_.task.enabled) sessions_.push_back(task_session(cfg_));
}

std::shared_ptr<const SessionSignals> SynthSource::signals(const std::string& session) const {
  std::lock_guard<std::mutex> lock(mutex_);
  if (cached_ && cached_->session.id == session) return cached_;
  const auto it = std::find_if(sessions_.begin(), sessions_.end(), [&](const SessionSpec& s) { return s.id == session; });
  if (it == sessions_.end()) throw Error(ErrorKind::invalid_argument, "synth source has no session '" + session + "'");
  cached_ = std::make_shared<const SessionSignals>(gen_features(cfg_, coupling_, *it));
  return cached_;
}

dsp::ChannelSeries SynthSource::neural_channel(const corpus::RecordingManifest&, const corpus::FileEntry& f,
                                               std::size_t index) const {
  return gen_neural_channel(cfg_, coupling_, *signals(f.session), static_cast<int>(index));
}

features::FeatureFrameSeries SynthSource::embedding(const corpus::RecordingManifest&, const corpus::FileEntry& f) const {
  const auto s = signals(f.session);
  if (f.variant == "true") return gen_task_shift(cfg_, coupling_, *s).second;
  return ambient_features(cfg_, *s);
}

features::Waveform SynthSource::waveform(const corpus::RecordingManifest&, const corpus::FileEntry& f) const {
  throw Error(ErrorKind::format, "synth source does not generate audio waveforms (" + f.id + ")");
}

std::vector<double> SynthSource::centroid_track(const corpus::RecordingManifest&, const corpus::FileEntry& f) const {
  return synth::centroid_track(cfg_, *signals(f.session));
}

std::vector<corpus::Interval> SynthSource::voice_intervals(const corpus::RecordingManifest&,
                                                           const corpus::FileEntry& f) const {
  return speech_intervals(cfg_, *signals(f.session));
}

std::unique_ptr<corpus::SignalSource> source_for(const corpus::RecordingManifest& m) {
  if (!m.generator.is_null() && m.generator.value("kind", std::string{}) == "ieegclip.synth") {
    return std::make_unique<SynthSource>(synth_config_from_json(m.generator.at("config")));
  }
  return std::make_unique<corpus::SignalSource>();
}

}  // namespace ieegclip::synth
