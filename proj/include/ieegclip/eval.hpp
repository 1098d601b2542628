#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "ieegclip/corpus.hpp"
#include "ieegclip/encoder.hpp"
#include "ieegclip/features.hpp"

namespace ieegclip::eval {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

// --- batching ------------------------------------------------------------

// Brain windows side by side, n x (N*T), example-major.
template <class T>
Mat<T> stack_brain(const corpus::PairSet& pairs);

// z-scored audio vectors as rows, N x d.
template <class T>
Mat<T> stack_audio(const corpus::PairSet& pairs, const features::ZScoreStats& stats);

// Embeddings of every window, N x d, computed `chunk` windows at a time.
template <class T>
Mat<T> embed(const encoder::EncoderParams<T>& params, const Mat<T>& brain, int chunk = 256);

// --- retrieval -----------------------------------------------------------

// rank_i = (#{j != i: S_ij > S_ii} + 0.5 #{j != i: S_ij = S_ii}) / (N - 1)
// with S the cosine similarity between rows of U and V.
std::vector<double> relative_ranks(const Eigen::MatrixXd& u, const Eigen::MatrixXd& v);

struct RetrievalReport {
  std::vector<double> ranks;
  double mean = 0.0;
  double median = 0.0;
  double sem = 0.0;
  std::size_t retrieval_set_size = 0;
  std::string dataset_id;
  std::string model_id;
};

RetrievalReport make_report(std::vector<double> ranks, std::string dataset_id = {}, std::string model_id = {});
nlohmann::json to_json(const RetrievalReport& r);
RetrievalReport report_from_json(const nlohmann::json& j);

// Forward every brain window of `pairs`, rank against all audio vectors of
// the same set. Throws empty_dataset on an empty set.
template <class T>
RetrievalReport evaluate(const encoder::EncoderParams<T>& params, const corpus::PairSet& pairs,
                         const features::ZScoreStats& stats, std::string model_id = {});

double delta_rank(const RetrievalReport& a, const RetrievalReport& b);

// --- Mann-Whitney U ------------------------------------------------------

struct MannWhitney {
  double u = 0.0;  // statistic of the first sample
  double p = 1.0;  // two-sided
  bool exact = false;
  // Exact mode: p = p_numerator / p_denominator before the clamp at 1.
  std::uint64_t p_numerator = 0;
  std::uint64_t p_denominator = 0;
};

inline constexpr std::size_t kExactLimit = 400;

// Midrank ties. Exact null distribution when n1 * n2 <= 400, otherwise the
// normal approximation with tie-corrected variance and continuity correction.
MannWhitney mann_whitney_u(std::span<const double> a, std::span<const double> b);

// --- scaling fits --------------------------------------------------------

struct ScalingFit {
  std::vector<std::pair<double, double>> points;  // (x, y)
  double slope = 0.0;
  double intercept = 0.0;
  double slope_se = 0.0;
  double slope_ci_low = 0.0;
  double slope_ci_high = 0.0;
  double residual_sd = 0.0;
  double t_critical = 0.0;  // two-sided 95%, n - 2 degrees of freedom
  double mean_log_x = 0.0;
  double sxx = 0.0;

  double predict(double x) const;
  // 95% confidence band for the fitted mean at x.
  std::pair<double, double> band(double x) const;
};

// OLS of y on ln x. Throws insufficient_data for < 3 points or < 2 distinct x.
ScalingFit fit_log_linear(std::span<const std::pair<double, double>> points);
nlohmann::json to_json(const ScalingFit& f);

}  // namespace ieegclip::eval
