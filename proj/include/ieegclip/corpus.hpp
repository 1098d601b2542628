#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "ieegclip/dsp.hpp"
#include "ieegclip/features.hpp"

namespace ieegclip::corpus {

// ---------------------------------------------------------------------------
// Manifest

enum class FileKind { neural, audio_features, audio_wave, centroid_track, voice_labels };

struct ChannelInfo {
  std::string id;
  std::string shaft;
  int contact = 0;
  std::string roi;
};

struct Interval {
  double start = 0.0;
  double end = 0.0;

  bool overlaps(const Interval& o) const { return start < o.end && o.start < end; }
  bool contains(const Interval& o) const { return start <= o.start && o.end <= end; }
};

// One file of a recording. Files sharing a `session` cover the same span:
// the neural file, its feature file(s) per variant, and annotations.
struct FileEntry {
  std::string id;
  std::string session;
  std::string path;  // relative to the manifest directory
  FileKind kind = FileKind::neural;
  double t0 = 0.0;
  double duration_s = 0.0;
  double sample_rate_hz = 0.0;
  std::vector<ChannelInfo> channels;  // neural files only
  std::string variant;                // feature files: "ambient", "true", ...
  std::string preprocessing;          // neural files already run through a pipeline variant

  Interval span() const { return {t0, t0 + duration_s}; }
};

struct RecordingManifest {
  std::string subject_id;
  double timezone_offset_s = 0.0;
  std::vector<FileEntry> files;
  std::vector<Interval> task_intervals;
  std::filesystem::path base_dir;
  // Set for synthetic recordings generated on demand instead of read from disk.
  nlohmann::json generator;

  // Throws format errors for overlapping files of one kind/variant, task
  // intervals outside every neural file, and unknown sessions.
  void validate() const;

  std::vector<std::string> sessions() const;  // sorted
  const FileEntry* find(const std::string& session, FileKind kind, const std::string& variant = {}) const;
  std::vector<ChannelInfo> channels() const;  // of the first neural file

  double first_neural_t0() const;
  int day_index(double t) const;       // 1-based, calendar day in local time
  double local_hour(double t) const;   // [0, 24)
  bool overlaps_task(const Interval& span) const;
};

nlohmann::json to_json(const RecordingManifest& m);
RecordingManifest manifest_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
RecordingManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const RecordingManifest& m, const std::filesystem::path& path);

std::string to_string(FileKind kind);
FileKind file_kind_from_string(const std::string& s);

// ---------------------------------------------------------------------------
// Splits

enum class Split { train, val, test };
enum class SplitUnit { file, chunk };

std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct SplitManifest {
  std::string dataset_id;
  SplitUnit unit = SplitUnit::file;
  std::map<std::string, Split> assignments;
  std::uint64_t seed = 0;

  std::optional<Split> tag_of(const std::string& unit_id) const;
  std::vector<std::string> units(Split s) const;  // sorted
  std::size_t count(Split s) const;
};

nlohmann::json to_json(const SplitManifest& s);
SplitManifest split_from_json(const nlohmann::json& j);

// Largest-remainder apportionment; ties go to the earlier bucket.
std::array<std::size_t, 3> largest_remainder(std::size_t n, const std::array<double, 3>& ratios);

inline constexpr std::array<double, 3> kWeeklongRatios{0.90, 0.05, 0.05};
inline constexpr std::array<double, 3> kTaskRatios{0.80, 0.10, 0.10};

// Unit = session (one recording file). Sessions lying entirely inside task
// intervals are not eligible; partially overlapping ones lose their
// overlapping chunks at pair-building time.
SplitManifest split_weeklong(const RecordingManifest& manifest, std::uint64_t seed,
                             const std::array<double, 3>& ratios = kWeeklongRatios);

// Unit = 30 s chunk.
SplitManifest split_task(std::span<const std::string> chunk_ids, std::uint64_t seed,
                         std::string dataset_id = "task",
                         const std::array<double, 3>& ratios = kTaskRatios);

// Keeps round(fraction * n_train) train units (at least one). Units are taken
// from one seeded permutation, so smaller fractions are prefixes of larger
// ones. Val and test assignments are copied unchanged.
SplitManifest subsample_train(const SplitManifest& split, double fraction, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Signal access

// Where raw samples come from. The default implementation reads arr1 files
// relative to the manifest; the synthetic generator overrides it to produce
// channels on demand.
class SignalSource {
 public:
  virtual ~SignalSource() = default;

  virtual dsp::ChannelSeries neural_channel(const RecordingManifest& m, const FileEntry& f,
                                            std::size_t index) const;
  virtual features::FeatureFrameSeries embedding(const RecordingManifest& m, const FileEntry& f) const;
  virtual features::Waveform waveform(const RecordingManifest& m, const FileEntry& f) const;
  // One value per frame at f.sample_rate_hz.
  virtual std::vector<double> centroid_track(const RecordingManifest& m, const FileEntry& f) const;
  virtual std::vector<Interval> voice_intervals(const RecordingManifest& m, const FileEntry& f) const;
};

// ---------------------------------------------------------------------------
// Pairs

enum class Preprocessing { broadband, broadband_bipolar, gamma_bipolar };
enum class TaskPolicy { exclude, only, ignore };

std::string to_string(Preprocessing p);
Preprocessing preprocessing_from_string(const std::string& s);

struct PairConfig {
  Preprocessing preprocessing = Preprocessing::broadband;
  features::FeatureSource feature_source = features::FeatureSource::contextual_embedding;
  std::string feature_variant = "ambient";
  TaskPolicy task_policy = TaskPolicy::exclude;
  double pipeline_rate_hz = dsp::kPipelineRateHz;
  double window_s = features::kSegmentSeconds;
  double chunk_s = features::kChunkSeconds;
  double min_tail_s = features::kMinTailSeconds;
};

std::string to_string(TaskPolicy p);
TaskPolicy task_policy_from_string(const std::string& s);
nlohmann::json to_json(const PairConfig& c);
PairConfig pair_config_from_json(const nlohmann::json& j);

struct SegmentPair {
  Eigen::MatrixXf brain;  // n_channels x 120
  features::SegmentFeature audio;
  std::string chunk_id;
  std::string unit_id;
  int day_index = 1;
  double hour = 0.0;
  Split split_tag = Split::train;
  double mel_centroid = std::numeric_limits<double>::quiet_NaN();
  double voice_flag = std::numeric_limits<double>::quiet_NaN();
};

struct PairSet {
  std::string dataset_id;
  std::vector<std::string> channel_ids;
  std::size_t feature_dim = 0;
  std::vector<SegmentPair> pairs;

  std::size_t size() const { return pairs.size(); }
  bool empty() const { return pairs.empty(); }
  PairSet select(Split s) const;
  PairSet subset(std::span<const std::size_t> indices) const;
  PairSet copy_header() const;
};

struct ChunkRef {
  std::string session;
  features::Chunk chunk;
};

// Chunks of every session's feature stream after the task policy is applied.
std::vector<ChunkRef> enumerate_chunks(const RecordingManifest& manifest, const PairConfig& cfg);

// Neural channels of one session after the configured preprocessing, at the
// pipeline rate, robust-scaled per channel over the file. `valid` marks
// samples untouched by missing (NaN) input.
struct PreparedNeural {
  std::vector<std::string> channel_ids;
  Eigen::MatrixXf data;  // channels x samples
  std::vector<bool> valid;
  double t0 = 0.0;
  double rate_hz = 0.0;
};
PreparedNeural prepare_neural(const RecordingManifest& manifest, const FileEntry& neural,
                              const PairConfig& cfg, const SignalSource& source);

struct BuildResult {
  PairSet pairs;
  std::vector<Interval> gaps;  // merged windows dropped for missing coverage
};

// Pairs for every chunk whose unit is assigned in `split`, ordered by
// (session, chunk, segment). When `only` is set, sessions without units in
// that split are skipped entirely.
BuildResult build_pairs(const RecordingManifest& manifest, const SplitManifest& split,
                        const PairConfig& cfg, const SignalSource& source,
                        std::optional<Split> only = std::nullopt);

// Pairs whose unit is still assigned to their own split tag in `split`.
PairSet restrict_to_split(const PairSet& pairs, const SplitManifest& split);

// Keeps lo <= hour < hi; lo > hi selects the wrapped range (night).
PairSet hour_filter(const PairSet& pairs, double lo = 6.0, double hi = 23.0);

// Restricts brain rows to `subset`, preserving the original row order.
PairSet channel_mask(const PairSet& pairs, std::span<const std::string> subset);

// Channel ids whose manifest ROI equals `roi`.
std::vector<std::string> roi_channels(const RecordingManifest& manifest, const std::string& roi);

}  // namespace ieegclip::corpus
