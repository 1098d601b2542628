#include "ieegclip/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "ieegclip/arr1.hpp"
#include "ieegclip/error.hpp"
#include "ieegclip/log.hpp"
#include "ieegclip/rng.hpp"

namespace ieegclip::corpus {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Enum names

std::string to_string(FileKind kind) {
  switch (kind) {
    case FileKind::neural: return "neural";
    case FileKind::audio_features: return "audio_features";
    case FileKind::audio_wave: return "audio_wave";
    case FileKind::centroid_track: return "centroid_track";
    case FileKind::voice_labels: return "voice_labels";
  }
  return "neural";
}

FileKind file_kind_from_string(const std::string& s) {
  for (auto k : {FileKind::neural, FileKind::audio_features, FileKind::audio_wave,
                 FileKind::centroid_track, FileKind::voice_labels}) {
    if (to_string(k) == s) return k;
  }
  throw Error(ErrorKind::format, "unknown file kind '" + s + "'");
}

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw Error(ErrorKind::format, "unknown split '" + s + "'");
}

std::string to_string(Preprocessing p) {
  switch (p) {
    case Preprocessing::broadband: return "broadband";
    case Preprocessing::broadband_bipolar: return "broadband_bipolar";
    case Preprocessing::gamma_bipolar: return "gamma_bipolar";
  }
  return "broadband";
}

Preprocessing preprocessing_from_string(const std::string& s) {
  for (auto p : {Preprocessing::broadband, Preprocessing::broadband_bipolar, Preprocessing::gamma_bipolar}) {
    if (to_string(p) == s) return p;
  }
  throw Error(ErrorKind::config, "unknown preprocessing variant '" + s + "'");
}

std::string to_string(TaskPolicy p) {
  switch (p) {
    case TaskPolicy::exclude: return "exclude";
    case TaskPolicy::only: return "only";
    case TaskPolicy::ignore: return "ignore";
  }
  return "exclude";
}

TaskPolicy task_policy_from_string(const std::string& s) {
  for (auto p : {TaskPolicy::exclude, TaskPolicy::only, TaskPolicy::ignore}) {
    if (to_string(p) == s) return p;
  }
  throw Error(ErrorKind::config, "unknown task policy '" + s + "'");
}

json to_json(const PairConfig& c) {
  return {{"preprocessing", to_string(c.preprocessing)},
          {"feature_source", features::to_string(c.feature_source)},
          {"feature_variant", c.feature_variant},
          {"task_policy", to_string(c.task_policy)},
          {"pipeline_rate_hz", c.pipeline_rate_hz},
          {"window_s", c.window_s},
          {"chunk_s", c.chunk_s},
          {"min_tail_s", c.min_tail_s}};
}

PairConfig pair_config_from_json(const json& j) {
  PairConfig c;
  try {
    if (j.contains("preprocessing")) c.preprocessing = preprocessing_from_string(j.at("preprocessing").get<std::string>());
    if (j.contains("feature_source")) {
      c.feature_source = features::feature_source_from_string(j.at("feature_source").get<std::string>());
    }
    c.feature_variant = j.value("feature_variant", c.feature_variant);
    if (j.contains("task_policy")) c.task_policy = task_policy_from_string(j.at("task_policy").get<std::string>());
    c.pipeline_rate_hz = j.value("pipeline_rate_hz", c.pipeline_rate_hz);
    c.window_s = j.value("window_s", c.window_s);
    c.chunk_s = j.value("chunk_s", c.chunk_s);
    c.min_tail_s = j.value("min_tail_s", c.min_tail_s);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::config, std::string("pair config: ") + e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------
// Manifest

std::vector<std::string> RecordingManifest::sessions() const {
  std::set<std::string> s;
  for (const auto& f : files) s.insert(f.session);
  return {s.begin(), s.end()};
}

const FileEntry* RecordingManifest::find(const std::string& session, FileKind kind,
                                         const std::string& variant) const {
  for (const auto& f : files) {
    if (f.session == session && f.kind == kind && (variant.empty() || f.variant == variant)) return &f;
  }
  return nullptr;
}

std::vector<ChannelInfo> RecordingManifest::channels() const {
  for (const auto& f : files) {
    if (f.kind == FileKind::neural) return f.channels;
  }
  return {};
}

double RecordingManifest::first_neural_t0() const {
  double t = std::numeric_limits<double>::infinity();
  for (const auto& f : files) {
    if (f.kind == FileKind::neural) t = std::min(t, f.t0);
  }
  return std::isfinite(t) ? t : 0.0;
}

int RecordingManifest::day_index(double t) const {
  const double first = std::floor((first_neural_t0() + timezone_offset_s) / 86400.0);
  return static_cast<int>(std::floor((t + timezone_offset_s) / 86400.0) - first) + 1;
}

double RecordingManifest::local_hour(double t) const {
  double s = std::fmod(t + timezone_offset_s, 86400.0);
  if (s < 0) s += 86400.0;
  return s / 3600.0;
}

bool RecordingManifest::overlaps_task(const Interval& span) const {
  return std::any_of(task_intervals.begin(), task_intervals.end(),
                     [&](const Interval& t) { return t.overlaps(span); });
}

void RecordingManifest::validate() const {
  std::map<std::string, std::vector<Interval>> by_stream;
  for (const auto& f : files) {
    if (f.session.empty() || f.id.empty()) throw Error(ErrorKind::format, "manifest file without id/session");
    if (!(f.duration_s > 0.0)) throw Error(ErrorKind::format, "file '" + f.id + "' has non-positive duration");
    if (f.kind == FileKind::neural && f.channels.empty()) {
      throw Error(ErrorKind::format, "neural file '" + f.id + "' lists no channels");
    }
    by_stream[to_string(f.kind) + "/" + f.variant].push_back(f.span());
  }
  for (auto& [stream, spans] : by_stream) {
    std::sort(spans.begin(), spans.end(), [](const auto& a, const auto& b) { return a.start < b.start; });
    for (std::size_t i = 1; i < spans.size(); ++i) {
      if (spans[i].start < spans[i - 1].end - 1e-9) {
        throw Error(ErrorKind::format, "overlapping files in stream " + stream);
      }
    }
  }
  for (const auto& t : task_intervals) {
    const bool inside = std::any_of(files.begin(), files.end(), [&](const FileEntry& f) {
      return f.kind == FileKind::neural && f.span().contains(t);
    });
    if (!inside) throw Error(ErrorKind::format, "task interval not covered by any neural file");
  }
}

json to_json(const RecordingManifest& m) {
  json files = json::array();
  for (const auto& f : m.files) {
    json e = {{"id", f.id},       {"session", f.session},         {"path", f.path},
              {"kind", to_string(f.kind)}, {"t0", f.t0}, {"duration_s", f.duration_s},
              {"sample_rate_hz", f.sample_rate_hz}};
    if (!f.variant.empty()) e["variant"] = f.variant;
    if (!f.preprocessing.empty()) e["preprocessing"] = f.preprocessing;
    if (!f.channels.empty()) {
      json ch = json::array();
      for (const auto& c : f.channels) {
        ch.push_back({{"id", c.id}, {"shaft", c.shaft}, {"contact", c.contact}, {"roi", c.roi}});
      }
      e["channels"] = ch;
    }
    files.push_back(e);
  }
  json tasks = json::array();
  for (const auto& t : m.task_intervals) tasks.push_back({t.start, t.end});
  json out = {{"format", "ieegclip.manifest/1"},
              {"subject_id", m.subject_id},
              {"timezone_offset_s", m.timezone_offset_s},
              {"files", files},
              {"task_intervals", tasks}};
  if (!m.generator.is_null()) out["generator"] = m.generator;
  return out;
}

RecordingManifest manifest_from_json(const json& j, const std::filesystem::path& base_dir) {
  RecordingManifest m;
  try {
    m.subject_id = j.value("subject_id", std::string{});
    m.timezone_offset_s = j.value("timezone_offset_s", 0.0);
    m.base_dir = base_dir;
    for (const auto& e : j.at("files")) {
      FileEntry f;
      f.id = e.at("id").get<std::string>();
      f.session = e.value("session", f.id);
      f.path = e.at("path").get<std::string>();
      f.kind = file_kind_from_string(e.at("kind").get<std::string>());
      f.t0 = e.at("t0").get<double>();
      f.duration_s = e.at("duration_s").get<double>();
      f.sample_rate_hz = e.value("sample_rate_hz", 0.0);
      f.variant = e.value("variant", std::string{});
      f.preprocessing = e.value("preprocessing", std::string{});
      if (e.contains("channels")) {
        for (const auto& c : e.at("channels")) {
          f.channels.push_back({c.at("id").get<std::string>(), c.value("shaft", std::string{}),
                                c.value("contact", 0), c.value("roi", std::string{})});
        }
      }
      m.files.push_back(std::move(f));
    }
    if (j.contains("generator")) m.generator = j.at("generator");
    if (j.contains("task_intervals")) {
      for (const auto& t : j.at("task_intervals")) m.task_intervals.push_back({t.at(0).get<double>(), t.at(1).get<double>()});
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::format, std::string("manifest: ") + e.what());
  }
  m.validate();
  return m;
}

RecordingManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "cannot open manifest " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::format, "manifest " + path.string() + ": " + e.what());
  }
  return manifest_from_json(j, path.parent_path());
}

void save_manifest(const RecordingManifest& m, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::io, "cannot write manifest " + path.string());
  out << to_json(m).dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Splits

std::optional<Split> SplitManifest::tag_of(const std::string& unit_id) const {
  auto it = assignments.find(unit_id);
  if (it == assignments.end()) return std::nullopt;
  return it->second;
}

std::vector<std::string> SplitManifest::units(Split s) const {
  std::vector<std::string> out;
  for (const auto& [id, tag] : assignments) {
    if (tag == s) out.push_back(id);
  }
  return out;
}

std::size_t SplitManifest::count(Split s) const {
  return static_cast<std::size_t>(std::count_if(assignments.begin(), assignments.end(),
                                                [&](const auto& kv) { return kv.second == s; }));
}

json to_json(const SplitManifest& s) {
  json a = json::object();
  for (const auto& [id, tag] : s.assignments) a[id] = to_string(tag);
  return {{"format", "ieegclip.split/1"},
          {"dataset_id", s.dataset_id},
          {"unit", s.unit == SplitUnit::file ? "file" : "chunk"},
          {"seed", s.seed},
          {"assignments", a}};
}

SplitManifest split_from_json(const json& j) {
  SplitManifest s;
  try {
    s.dataset_id = j.value("dataset_id", std::string{});
    s.unit = j.value("unit", std::string{"file"}) == "chunk" ? SplitUnit::chunk : SplitUnit::file;
    s.seed = j.value("seed", std::uint64_t{0});
    for (const auto& [id, tag] : j.at("assignments").items()) s.assignments[id] = split_from_string(tag.get<std::string>());
  } catch (const json::exception& e) {
    throw Error(ErrorKind::format, std::string("split manifest: ") + e.what());
  }
  return s;
}

std::array<std::size_t, 3> largest_remainder(std::size_t n, const std::array<double, 3>& ratios) {
  const double total = ratios[0] + ratios[1] + ratios[2];
  std::array<std::size_t, 3> counts{};
  std::array<double, 3> rem{};
  std::size_t assigned = 0;
  for (int i = 0; i < 3; ++i) {
    const double exact = static_cast<double>(n) * ratios[i] / total;
    // Guard against 36.0000000001-style noise before flooring.
    counts[i] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    rem[i] = exact - static_cast<double>(counts[i]);
    assigned += counts[i];
  }
  while (assigned < n) {
    int best = 0;
    for (int i = 1; i < 3; ++i) {
      if (rem[i] > rem[best] + 1e-12) best = i;
    }
    ++counts[best];
    rem[best] = -1.0;
    ++assigned;
  }
  return counts;
}

namespace {

SplitManifest deal_units(std::vector<std::string> units, std::uint64_t seed, const std::array<double, 3>& ratios) {
  std::sort(units.begin(), units.end());
  CounterRng rng = CounterRng(seed).derive("split");
  rng.shuffle(std::span<std::string>(units));
  const auto counts = largest_remainder(units.size(), ratios);
  SplitManifest s;
  s.seed = seed;
  std::size_t i = 0;
  for (int tag = 0; tag < 3; ++tag) {
    for (std::size_t k = 0; k < counts[static_cast<std::size_t>(tag)]; ++k, ++i) {
      s.assignments[units[i]] = static_cast<Split>(tag);
    }
  }
  return s;
}

}  // namespace

SplitManifest split_weeklong(const RecordingManifest& manifest, std::uint64_t seed,
                             const std::array<double, 3>& ratios) {
  std::vector<std::string> eligible;
  for (const auto& session : manifest.sessions()) {
    const FileEntry* neural = manifest.find(session, FileKind::neural);
    if (!neural) continue;
    const bool fully_task = std::any_of(manifest.task_intervals.begin(), manifest.task_intervals.end(),
                                        [&](const Interval& t) { return t.contains(neural->span()); });
    if (!fully_task) eligible.push_back(session);
  }
  if (eligible.empty()) throw Error(ErrorKind::empty_dataset, "split_weeklong: no eligible recording files");
  if (eligible.size() < 20) {
    warn("split_weeklong: only " + std::to_string(eligible.size()) +
         " files; 5% validation/test splits will be coarse");
  }
  SplitManifest s = deal_units(std::move(eligible), seed, ratios);
  s.dataset_id = manifest.subject_id + "/weeklong";
  s.unit = SplitUnit::file;
  return s;
}

SplitManifest split_task(std::span<const std::string> chunk_ids, std::uint64_t seed, std::string dataset_id,
                         const std::array<double, 3>& ratios) {
  if (chunk_ids.empty()) throw Error(ErrorKind::empty_dataset, "split_task: no chunks");
  SplitManifest s = deal_units({chunk_ids.begin(), chunk_ids.end()}, seed, ratios);
  s.dataset_id = std::move(dataset_id);
  s.unit = SplitUnit::chunk;
  return s;
}

SplitManifest subsample_train(const SplitManifest& split, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0) || fraction > 1.0) {
    throw Error(ErrorKind::invalid_argument, "subsample fraction must lie in (0, 1]");
  }
  std::vector<std::string> train = split.units(Split::train);
  CounterRng rng = CounterRng(seed).derive("subsample");
  rng.shuffle(std::span<std::string>(train));
  std::size_t keep = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(train.size())));
  if (!train.empty()) keep = std::clamp<std::size_t>(keep, 1, train.size());

  SplitManifest out = split;
  for (std::size_t i = keep; i < train.size(); ++i) out.assignments.erase(train[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Signal source (files)

namespace {

std::filesystem::path resolve(const RecordingManifest& m, const FileEntry& f) {
  std::filesystem::path p(f.path);
  return p.is_absolute() ? p : m.base_dir / p;
}

}  // namespace

dsp::ChannelSeries SignalSource::neural_channel(const RecordingManifest& m, const FileEntry& f,
                                                std::size_t index) const {
  const auto path = resolve(m, f);
  const json meta = read_arr1_meta(path);
  const auto shape = meta.at("shape").get<std::vector<std::size_t>>();
  if (shape.size() != 2 || index >= shape[0]) {
    throw Error(ErrorKind::shape_mismatch, "neural file " + path.string() + " has no channel " + std::to_string(index));
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, "cannot open " + path.string());
  std::vector<float> row(shape[1]);
  in.seekg(static_cast<std::streamoff>(index * shape[1] * sizeof(float)));
  in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size() * sizeof(float)));
  if (!in) throw Error(ErrorKind::format, "short read in " + path.string());

  dsp::ChannelSeries s;
  s.samples.assign(row.begin(), row.end());
  s.sample_rate_hz = meta.value("sample_rate_hz", f.sample_rate_hz);
  s.t0 = meta.value("t0", f.t0);
  if (index < f.channels.size()) {
    s.channel_id = f.channels[index].id;
    s.shaft_id = f.channels[index].shaft;
    s.contact_index = f.channels[index].contact;
  }
  return s;
}

features::FeatureFrameSeries SignalSource::embedding(const RecordingManifest& m, const FileEntry& f) const {
  const Arr1 a = read_arr1(resolve(m, f));
  features::FeatureFrameSeries s;
  s.frames.resize(static_cast<Eigen::Index>(a.rows()), static_cast<Eigen::Index>(a.cols()));
  for (std::size_t r = 0; r < a.rows(); ++r) {
    for (std::size_t c = 0; c < a.cols(); ++c) s.frames(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = a.at(r, c);
  }
  s.frame_rate_hz = a.meta.value("sample_rate_hz", f.sample_rate_hz);
  s.t0 = a.meta.value("t0", f.t0);
  s.source = a.meta.value("source", std::string{"contextual_embedding"}) == "melspectrogram"
                 ? features::FeatureSource::melspectrogram
                 : features::FeatureSource::contextual_embedding;
  return s;
}

features::Waveform SignalSource::waveform(const RecordingManifest& m, const FileEntry& f) const {
  const auto path = resolve(m, f);
  if (path.extension() == ".wav") return features::read_wav(path);
  const Arr1 a = read_arr1(path);
  return {{a.data.begin(), a.data.end()}, a.meta.value("sample_rate_hz", f.sample_rate_hz)};
}

std::vector<double> SignalSource::centroid_track(const RecordingManifest& m, const FileEntry& f) const {
  const Arr1 a = read_arr1(resolve(m, f));
  return {a.data.begin(), a.data.end()};
}

std::vector<Interval> SignalSource::voice_intervals(const RecordingManifest& m, const FileEntry& f) const {
  std::ifstream in(resolve(m, f));
  if (!in) throw Error(ErrorKind::io, "cannot open voice labels " + f.path);
  json j;
  in >> j;
  std::vector<Interval> out;
  for (const auto& iv : j.at("intervals")) out.push_back({iv.at(0).get<double>(), iv.at(1).get<double>()});
  return out;
}

// ---------------------------------------------------------------------------
// Preprocessing

namespace {

// Replaces NaN/Inf by 0 and records their positions.
void scrub(dsp::ChannelSeries& s, std::vector<std::size_t>& missing) {
  for (std::size_t i = 0; i < s.samples.size(); ++i) {
    if (!std::isfinite(s.samples[i])) {
      s.samples[i] = 0.0;
      missing.push_back(i);
    }
  }
}

void scale_with_mask(std::vector<double>& x, const std::vector<bool>& valid, const std::string& id) {
  std::vector<double> values;
  values.reserve(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (valid[i]) values.push_back(x[i]);
  }
  const auto [median, iqr] = dsp::robust_stats(values);
  if (!(iqr > 0.0)) {
    warn("robust_scale: zero interquartile range on channel '" + id + "'; emitting zeros");
    std::fill(x.begin(), x.end(), 0.0);
    return;
  }
  for (auto& v : x) v = (v - median) / iqr;
}

}  // namespace

PreparedNeural prepare_neural(const RecordingManifest& manifest, const FileEntry& neural,
                              const PairConfig& cfg, const SignalSource& source) {
  PreparedNeural out;
  const bool already = neural.preprocessing == to_string(cfg.preprocessing);
  if (!neural.preprocessing.empty() && !already) {
    throw Error(ErrorKind::config, "neural file '" + neural.id + "' was preprocessed as '" +
                                       neural.preprocessing + "', not '" + to_string(cfg.preprocessing) + "'");
  }

  std::vector<dsp::ChannelSeries> outputs;
  std::vector<std::size_t> missing_raw;
  double raw_rate = 0.0;

  auto finish = [&](dsp::ChannelSeries s) {
    if (cfg.preprocessing == Preprocessing::gamma_bipolar) {
      s = dsp::gamma_power(s, cfg.pipeline_rate_hz);
    } else {
      s = dsp::resample(dsp::bandpass(s, dsp::kBroadbandFilter), cfg.pipeline_rate_hz);
    }
    outputs.push_back(std::move(s));
  };

  if (already) {
    for (std::size_t i = 0; i < neural.channels.size(); ++i) {
      auto s = source.neural_channel(manifest, neural, i);
      raw_rate = s.sample_rate_hz;
      scrub(s, missing_raw);
      outputs.push_back(std::move(s));
    }
  } else if (cfg.preprocessing == Preprocessing::broadband) {
    for (std::size_t i = 0; i < neural.channels.size(); ++i) {
      auto s = source.neural_channel(manifest, neural, i);
      raw_rate = s.sample_rate_hz;
      scrub(s, missing_raw);
      finish(std::move(s));
    }
  } else {
    // Bipolar: walk shafts contact by contact, holding two raw channels.
    std::vector<std::string> shafts;
    std::map<std::string, std::vector<std::size_t>> by_shaft;
    for (std::size_t i = 0; i < neural.channels.size(); ++i) {
      auto [it, inserted] = by_shaft.try_emplace(neural.channels[i].shaft);
      if (inserted) shafts.push_back(neural.channels[i].shaft);
      it->second.push_back(i);
    }
    for (const auto& shaft : shafts) {
      auto idx = by_shaft[shaft];
      std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        return neural.channels[a].contact < neural.channels[b].contact;
      });
      if (idx.size() < 2) continue;
      auto prev = source.neural_channel(manifest, neural, idx[0]);
      raw_rate = prev.sample_rate_hz;
      scrub(prev, missing_raw);
      for (std::size_t k = 1; k < idx.size(); ++k) {
        auto next = source.neural_channel(manifest, neural, idx[k]);
        scrub(next, missing_raw);
        auto diff = dsp::bipolar_rereference({prev, next});
        finish(std::move(diff.front()));
        prev = std::move(next);
      }
    }
  }
  if (outputs.empty()) throw Error(ErrorKind::empty_dataset, "no channels after preprocessing of " + neural.id);

  const std::size_t n = outputs.front().samples.size();
  out.rate_hz = outputs.front().sample_rate_hz;
  out.t0 = outputs.front().t0;
  out.valid.assign(n, true);
  for (std::size_t i : missing_raw) {
    const auto k = static_cast<std::size_t>(std::floor(static_cast<double>(i) * out.rate_hz / raw_rate));
    if (k < n) out.valid[k] = false;
  }
  out.data.resize(static_cast<Eigen::Index>(outputs.size()), static_cast<Eigen::Index>(n));
  for (std::size_t c = 0; c < outputs.size(); ++c) {
    auto& x = outputs[c].samples;
    if (x.size() != n) throw Error(ErrorKind::alignment, "channels of " + neural.id + " differ in length");
    if (!already) scale_with_mask(x, out.valid, outputs[c].channel_id);
    for (std::size_t t = 0; t < n; ++t) out.data(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(t)) = static_cast<float>(x[t]);
    out.channel_ids.push_back(outputs[c].channel_id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pair building

namespace {

const FileEntry* feature_file(const RecordingManifest& m, const std::string& session, const PairConfig& cfg) {
  if (cfg.feature_source == features::FeatureSource::melspectrogram) return m.find(session, FileKind::audio_wave);
  return m.find(session, FileKind::audio_features, cfg.feature_variant);
}

bool chunk_allowed(const RecordingManifest& m, const features::Chunk& c, TaskPolicy policy) {
  const Interval span{c.start, c.start + c.duration_s};
  switch (policy) {
    case TaskPolicy::exclude: return !m.overlaps_task(span);
    case TaskPolicy::only: return m.overlaps_task(span);
    case TaskPolicy::ignore: return true;
  }
  return true;
}

std::vector<Interval> merge(std::vector<Interval> v) {
  std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.start < b.start; });
  std::vector<Interval> out;
  for (const auto& iv : v) {
    if (!out.empty() && iv.start <= out.back().end + 1e-9) {
      out.back().end = std::max(out.back().end, iv.end);
    } else {
      out.push_back(iv);
    }
  }
  return out;
}

double mean_over(const std::vector<double>& track, double rate, double t0, double start, double end) {
  const auto a = static_cast<long>(std::ceil((start - t0) * rate - 1e-9));
  const auto b = static_cast<long>(std::ceil((end - t0) * rate - 1e-9));
  double sum = 0.0;
  long count = 0;
  for (long i = std::max(0L, a); i < std::min<long>(b, static_cast<long>(track.size())); ++i) {
    sum += track[static_cast<std::size_t>(i)];
    ++count;
  }
  return count > 0 ? sum / static_cast<double>(count) : std::numeric_limits<double>::quiet_NaN();
}

double voice_fraction(const std::vector<Interval>& speech, double start, double end) {
  double covered = 0.0;
  for (const auto& iv : speech) covered += std::max(0.0, std::min(end, iv.end) - std::max(start, iv.start));
  return covered / (end - start);
}

}  // namespace

std::vector<ChunkRef> enumerate_chunks(const RecordingManifest& manifest, const PairConfig& cfg) {
  std::vector<ChunkRef> out;
  for (const auto& session : manifest.sessions()) {
    const FileEntry* feat = feature_file(manifest, session, cfg);
    if (!feat || !manifest.find(session, FileKind::neural)) continue;
    for (auto& c : features::chunk_audio(session, feat->t0, feat->duration_s, cfg.chunk_s, cfg.min_tail_s)) {
      if (chunk_allowed(manifest, c, cfg.task_policy)) out.push_back({session, std::move(c)});
    }
  }
  return out;
}

BuildResult build_pairs(const RecordingManifest& manifest, const SplitManifest& split, const PairConfig& cfg,
                        const SignalSource& source, std::optional<Split> only) {
  BuildResult result;
  result.pairs.dataset_id = split.dataset_id;
  std::vector<Interval> gaps;
  const auto window_samples = static_cast<long>(std::llround(cfg.window_s * cfg.pipeline_rate_hz));

  for (const auto& session : manifest.sessions()) {
    const FileEntry* neural = manifest.find(session, FileKind::neural);
    const FileEntry* feat = feature_file(manifest, session, cfg);
    if (!neural || !feat) continue;

    struct Pending {
      features::Chunk chunk;
      std::string unit;
      Split tag;
    };
    std::vector<Pending> chunks;
    for (auto& c : features::chunk_audio(session, feat->t0, feat->duration_s, cfg.chunk_s, cfg.min_tail_s)) {
      if (!chunk_allowed(manifest, c, cfg.task_policy)) continue;
      std::string unit = split.unit == SplitUnit::file ? session : c.id;
      auto tag = split.tag_of(unit);
      if (!tag || (only && *tag != *only)) continue;
      chunks.push_back({std::move(c), std::move(unit), *tag});
    }
    if (chunks.empty()) continue;

    const PreparedNeural brain = prepare_neural(manifest, *neural, cfg, source);
    if (result.pairs.channel_ids.empty()) {
      result.pairs.channel_ids = brain.channel_ids;
    } else if (result.pairs.channel_ids != brain.channel_ids) {
      throw Error(ErrorKind::alignment, "session " + session + " has a different channel layout");
    }

    const bool mel = cfg.feature_source == features::FeatureSource::melspectrogram;
    features::FeatureFrameSeries emb;
    features::Waveform wave;
    if (mel) {
      wave = source.waveform(manifest, *feat);
    } else {
      emb = source.embedding(manifest, *feat);
    }
    const FileEntry* centroid_file = manifest.find(session, FileKind::centroid_track);
    const FileEntry* wave_file = manifest.find(session, FileKind::audio_wave);
    std::vector<double> centroid;
    if (centroid_file) {
      centroid = source.centroid_track(manifest, *centroid_file);
    } else if (wave_file && !mel) {
      wave = source.waveform(manifest, *wave_file);
    }
    const FileEntry* voice_file = manifest.find(session, FileKind::voice_labels);
    std::optional<std::vector<Interval>> speech;
    if (voice_file) speech = source.voice_intervals(manifest, *voice_file);

    for (const auto& pending : chunks) {
      const auto& chunk = pending.chunk;
      std::vector<features::SegmentFeature> segments;
      Eigen::MatrixXd chunk_mel_power;
      double mel_rate = 0.0;
      if (mel) {
        const auto a = static_cast<long>(std::llround((chunk.start - feat->t0) * wave.sample_rate_hz));
        const auto len = static_cast<long>(std::llround(chunk.duration_s * wave.sample_rate_hz));
        const long end = std::min<long>(a + len, static_cast<long>(wave.samples.size()));
        if (a < 0 || end - a < 2) {
          gaps.push_back({chunk.start, chunk.start + chunk.duration_s});
          continue;
        }
        std::span<const double> slice(wave.samples.data() + a, static_cast<std::size_t>(end - a));
        segments = features::segment_average(features::melspectrogram(slice, wave.sample_rate_hz, chunk.start), cfg.window_s);
      } else {
        const auto a = static_cast<long>(std::llround((chunk.start - emb.t0) * emb.frame_rate_hz));
        const auto len = static_cast<long>(std::llround(chunk.duration_s * emb.frame_rate_hz));
        const long end = std::min<long>(a + len, emb.frames.rows());
        if (a < 0 || end - a < 2) {
          gaps.push_back({chunk.start, chunk.start + chunk.duration_s});
          continue;
        }
        features::FeatureFrameSeries sub;
        sub.frames = emb.frames.middleRows(a, end - a);
        sub.frame_rate_hz = emb.frame_rate_hz;
        sub.source = emb.source;
        sub.t0 = emb.t0 + static_cast<double>(a) / emb.frame_rate_hz;
        segments = features::segment_average(features::interpolate_frames(sub, features::kFeatureGridHz), cfg.window_s);
      }
      if (centroid.empty() && !wave.samples.empty()) {
        const auto a = static_cast<long>(std::llround((chunk.start - wave_file->t0) * wave.sample_rate_hz));
        const auto len = static_cast<long>(std::llround(chunk.duration_s * wave.sample_rate_hz));
        const long end = std::min<long>(a + len, static_cast<long>(wave.samples.size()));
        if (a >= 0 && end - a >= 2) {
          std::span<const double> slice(wave.samples.data() + a, static_cast<std::size_t>(end - a));
          auto mp = features::mel_power(slice, wave.sample_rate_hz, chunk.start);
          chunk_mel_power = std::move(mp.frames);
          mel_rate = mp.frame_rate_hz;
        }
      }

      for (auto& seg : segments) {
        const double start = seg.t_start;
        const double end = start + cfg.window_s;
        const double idx = (start - brain.t0) * brain.rate_hz;
        const auto k = static_cast<long>(std::llround(idx));
        bool ok = std::abs(static_cast<double>(k) - idx) <= brain.rate_hz / 240.0 + 1e-9 && k >= 0 &&
                  k + window_samples <= brain.data.cols();
        for (long t = k; ok && t < k + window_samples; ++t) ok = brain.valid[static_cast<std::size_t>(t)];
        if (!ok) {
          gaps.push_back({start, end});
          continue;
        }

        SegmentPair p;
        p.brain = brain.data.middleCols(k, window_samples);
        seg.chunk_id = chunk.id;
        seg.day_index = manifest.day_index(start);
        seg.hour = manifest.local_hour(start);
        p.chunk_id = chunk.id;
        p.unit_id = pending.unit;
        p.day_index = seg.day_index;
        p.hour = seg.hour;
        p.split_tag = pending.tag;
        if (!centroid.empty()) {
          p.mel_centroid = mean_over(centroid, centroid_file->sample_rate_hz, centroid_file->t0, start, end);
        } else if (chunk_mel_power.rows() > 0) {
          const auto f0 = static_cast<long>(std::llround((start - chunk.start) * mel_rate));
          const auto nf = std::min<long>(static_cast<long>(std::llround(cfg.window_s * mel_rate)), chunk_mel_power.rows() - f0);
          if (f0 >= 0 && nf > 0) {
            p.mel_centroid = features::segment_mel_centroid(chunk_mel_power.middleRows(f0, nf), wave.sample_rate_hz);
          }
        }
        if (speech) p.voice_flag = voice_fraction(*speech, start, end) >= 0.5 ? 1.0 : 0.0;
        p.audio = std::move(seg);
        if (result.pairs.feature_dim == 0) result.pairs.feature_dim = static_cast<std::size_t>(p.audio.vector.size());
        result.pairs.pairs.push_back(std::move(p));
      }
    }
  }
  result.gaps = merge(std::move(gaps));
  return result;
}

// ---------------------------------------------------------------------------
// Pair-set operations

PairSet PairSet::copy_header() const {
  PairSet out;
  out.dataset_id = dataset_id;
  out.channel_ids = channel_ids;
  out.feature_dim = feature_dim;
  return out;
}

PairSet PairSet::select(Split s) const {
  PairSet out = copy_header();
  for (const auto& p : pairs) {
    if (p.split_tag == s) out.pairs.push_back(p);
  }
  return out;
}

PairSet PairSet::subset(std::span<const std::size_t> indices) const {
  PairSet out = copy_header();
  out.pairs.reserve(indices.size());
  for (auto i : indices) out.pairs.push_back(pairs.at(i));
  return out;
}

PairSet restrict_to_split(const PairSet& pairs, const SplitManifest& split) {
  PairSet out = pairs.copy_header();
  for (const auto& p : pairs.pairs) {
    auto tag = split.tag_of(p.unit_id);
    if (tag && *tag == p.split_tag) out.pairs.push_back(p);
  }
  return out;
}

PairSet hour_filter(const PairSet& pairs, double lo, double hi) {
  PairSet out = pairs.copy_header();
  for (const auto& p : pairs.pairs) {
    const bool keep = lo <= hi ? (p.hour >= lo && p.hour < hi) : (p.hour >= lo || p.hour < hi);
    if (keep) out.pairs.push_back(p);
  }
  return out;
}

PairSet channel_mask(const PairSet& pairs, std::span<const std::string> subset) {
  if (subset.empty()) throw Error(ErrorKind::invalid_argument, "channel_mask: empty channel subset");
  const std::set<std::string> wanted(subset.begin(), subset.end());
  for (const auto& id : wanted) {
    if (std::find(pairs.channel_ids.begin(), pairs.channel_ids.end(), id) == pairs.channel_ids.end()) {
      throw Error(ErrorKind::unknown_channel, "channel_mask: unknown channel '" + id + "'");
    }
  }
  std::vector<Eigen::Index> rows;
  PairSet out = pairs.copy_header();
  out.channel_ids.clear();
  for (std::size_t i = 0; i < pairs.channel_ids.size(); ++i) {
    if (wanted.count(pairs.channel_ids[i])) {
      rows.push_back(static_cast<Eigen::Index>(i));
      out.channel_ids.push_back(pairs.channel_ids[i]);
    }
  }
  out.pairs.reserve(pairs.size());
  for (const auto& p : pairs.pairs) {
    SegmentPair q = p;
    q.brain = p.brain(rows, Eigen::all);
    out.pairs.push_back(std::move(q));
  }
  return out;
}

std::vector<std::string> roi_channels(const RecordingManifest& manifest, const std::string& roi) {
  std::vector<std::string> out;
  for (const auto& c : manifest.channels()) {
    if (c.roi == roi) out.push_back(c.id);
  }
  return out;
}

}  // namespace ieegclip::corpus
