#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "ieegclip/corpus.hpp"
#include "ieegclip/encoder.hpp"
#include "ieegclip/features.hpp"

namespace ieegclip::probes {

// 7 values log-spaced over [1e-3, 1e3].
inline constexpr std::array<double, 7> kAlphas{1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3};
inline constexpr int kFolds = 5;

// Pearson correlation; NaN when either side is constant.
double pearson(std::span<const double> a, std::span<const double> b);

// Distinct groups are sorted, shuffled with `seed`, and dealt round-robin
// into k folds. Returns the fold of every row.
std::vector<int> group_folds(std::span<const std::string> groups, int k, std::uint64_t seed);

struct RidgeCvResult {
  std::vector<double> fold_r;      // NaN where the held-out fold is constant
  std::vector<double> fold_alpha;  // chosen by leave-one-out on the training fold
  std::vector<int> fold_of_row;
  double mean_r = 0.0;             // over folds with a defined r
  int valid_folds = 0;
};

// Closed-form ridge with intercept on train-fold standardized X; per fold,
// alpha minimizes the efficient leave-one-out squared error.
RidgeCvResult ridge_cv(const Eigen::MatrixXd& x, std::span<const double> y, std::span<const std::string> groups,
                       int k = kFolds, std::uint64_t seed = 0, std::span<const double> alphas = kAlphas);

// Ridge fit on already standardized, centered data; exposed for shrinkage
// checks. Returns the coefficient vector.
Eigen::VectorXd ridge_coefficients(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, double alpha);

enum class Space { brain_embedding, audio_features, raw_window };
enum class TargetName { recording_day, hour_from_noon, mel_centroid, voice_flag };

std::string to_string(Space s);
std::string to_string(TargetName t);
Space space_from_string(const std::string& s);

struct ProbeTarget {
  TargetName name;
  std::vector<double> values;
  std::vector<bool> finite_mask;
};

struct ProbeMatrix {
  Space space;
  Eigen::MatrixXd x;  // rows = segments
  std::vector<ProbeTarget> targets;
  std::vector<std::string> groups;  // chunk ids
  std::vector<std::string> notices;
};

// `model` is required for the brain-embedding space and ignored otherwise.
// Audio vectors are used as stored; raw windows are flattened channel-major.
template <class T>
ProbeMatrix build_probe_matrix(Space space, const corpus::PairSet& pairs, const encoder::EncoderParams<T>* model);

struct ProbeEntry {
  Space space;
  TargetName target;
  RidgeCvResult result;
  std::size_t rows = 0;
};

struct ProbeReport {
  std::vector<ProbeEntry> entries;
  std::vector<std::string> notices;

  const ProbeEntry* find(Space s, TargetName t) const;
};

// Every target of `m`, rows with non-finite targets dropped per target.
// Targets with fewer than k groups left are skipped with a notice.
void run_probes(const ProbeMatrix& m, ProbeReport& report, std::uint64_t seed = 0);

nlohmann::json to_json(const ProbeReport& r);

}  // namespace ieegclip::probes
