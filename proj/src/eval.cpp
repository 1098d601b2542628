#include "ieegclip/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <boost/math/distributions/students_t.hpp>

#include "ieegclip/dsp.hpp"
#include "ieegclip/error.hpp"
#include "ieegclip/objective.hpp"

namespace ieegclip::eval {

using nlohmann::json;

template <class T>
Mat<T> stack_brain(const corpus::PairSet& pairs) {
  if (pairs.empty()) return {};
  const auto n = pairs.pairs.front().brain.rows();
  const auto steps = pairs.pairs.front().brain.cols();
  Mat<T> out(n, steps * static_cast<Eigen::Index>(pairs.size()));
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& b = pairs.pairs[i].brain;
    if (b.rows() != n || b.cols() != steps) throw Error(ErrorKind::shape_mismatch, "brain windows differ in shape");
    out.middleCols(static_cast<Eigen::Index>(i) * steps, steps) = b.template cast<T>();
  }
  return out;
}

template <class T>
Mat<T> stack_audio(const corpus::PairSet& pairs, const features::ZScoreStats& stats) {
  if (pairs.empty()) return {};
  Mat<T> out(static_cast<Eigen::Index>(pairs.size()), static_cast<Eigen::Index>(pairs.feature_dim));
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& v = pairs.pairs[i].audio.vector;
    if (static_cast<std::size_t>(v.size()) != pairs.feature_dim || v.size() != stats.mean.size()) {
      throw Error(ErrorKind::shape_mismatch, "audio vector dimension does not match the z-score statistics");
    }
    out.row(static_cast<Eigen::Index>(i)) = features::apply_zscore(v, stats).transpose().template cast<T>();
  }
  return out;
}

template <class T>
Mat<T> embed(const encoder::EncoderParams<T>& params, const Mat<T>& brain, int chunk) {
  const int steps = params.config.time_steps;
  const auto n = brain.cols() / steps;
  Mat<T> out(n, params.config.out_dim);
  for (Eigen::Index start = 0; start < n; start += chunk) {
    const auto len = std::min<Eigen::Index>(chunk, n - start);
    const Mat<T> y = encoder::forward(params, Mat<T>(brain.middleCols(start * steps, len * steps)));
    out.middleRows(start, len) = y.transpose();
  }
  return out;
}

std::vector<double> relative_ranks(const Eigen::MatrixXd& u, const Eigen::MatrixXd& v) {
  const auto n = u.rows();
  if (n < 2) throw Error(ErrorKind::insufficient_data, "relative_ranks needs at least 2 samples");
  if (v.rows() != n) throw Error(ErrorKind::shape_mismatch, "relative_ranks: U and V differ in length");
  const Eigen::MatrixXd s = objective::cosine_similarity<double>(u, v).values;
  std::vector<double> ranks(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    const double own = s(i, i);
    double better = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      if (s(i, j) > own) {
        better += 1.0;
      } else if (s(i, j) == own) {
        better += 0.5;
      }
    }
    ranks[static_cast<std::size_t>(i)] = better / static_cast<double>(n - 1);
  }
  return ranks;
}

RetrievalReport make_report(std::vector<double> ranks, std::string dataset_id, std::string model_id) {
  if (ranks.empty()) throw Error(ErrorKind::empty_dataset, "retrieval report over no samples");
  RetrievalReport r;
  const double n = static_cast<double>(ranks.size());
  r.mean = std::accumulate(ranks.begin(), ranks.end(), 0.0) / n;
  std::vector<double> sorted = ranks;
  std::sort(sorted.begin(), sorted.end());
  r.median = dsp::sorted_quantile(sorted, 0.5);
  if (ranks.size() > 1) {
    double ss = 0.0;
    for (double x : ranks) ss += (x - r.mean) * (x - r.mean);
    r.sem = std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
  }
  r.retrieval_set_size = ranks.size();
  r.ranks = std::move(ranks);
  r.dataset_id = std::move(dataset_id);
  r.model_id = std::move(model_id);
  return r;
}

json to_json(const RetrievalReport& r) {
  return {{"dataset_id", r.dataset_id}, {"model_id", r.model_id}, {"mean", r.mean},
          {"median", r.median},         {"sem", r.sem},           {"retrieval_set_size", r.retrieval_set_size},
          {"ranks", r.ranks}};
}

RetrievalReport report_from_json(const json& j) {
  try {
    return make_report(j.at("ranks").get<std::vector<double>>(), j.value("dataset_id", std::string{}),
                       j.value("model_id", std::string{}));
  } catch (const json::exception& e) {
    throw Error(ErrorKind::format, std::string("retrieval report: ") + e.what());
  }
}

template <class T>
RetrievalReport evaluate(const encoder::EncoderParams<T>& params, const corpus::PairSet& pairs,
                         const features::ZScoreStats& stats, std::string model_id) {
  if (pairs.empty()) throw Error(ErrorKind::empty_dataset, "evaluate: empty split");
  const Mat<T> u = embed(params, stack_brain<T>(pairs));
  const Mat<T> v = stack_audio<T>(pairs, stats);
  return make_report(relative_ranks(u.template cast<double>(), v.template cast<double>()), pairs.dataset_id,
                     std::move(model_id));
}

double delta_rank(const RetrievalReport& a, const RetrievalReport& b) { return a.mean - b.mean; }

// ---------------------------------------------------------------------------

MannWhitney mann_whitney_u(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw Error(ErrorKind::insufficient_data, "mann_whitney_u needs two nonempty samples");
  const std::size_t n1 = a.size(), n2 = b.size(), n = n1 + n2;
  if (n1 > n2 && n1 * n2 <= kExactLimit) {
    // The exact counter runs over subsets of the smaller sample.
    MannWhitney out = mann_whitney_u(b, a);
    out.u = static_cast<double>(n1 * n2) - out.u;
    return out;
  }

  std::vector<std::pair<double, int>> pooled;
  pooled.reserve(n);
  for (double x : a) pooled.push_back({x, 0});
  for (double x : b) pooled.push_back({x, 1});
  std::sort(pooled.begin(), pooled.end(), [](const auto& l, const auto& r) { return l.first < r.first; });

  // Doubled midranks are integers: ties spanning ranks i+1..j get i+j+1.
  std::vector<long> rank2(n);
  std::vector<std::size_t> tie_sizes;
  long w1 = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && pooled[j].first == pooled[i].first) ++j;
    for (std::size_t k = i; k < j; ++k) {
      rank2[k] = static_cast<long>(i + j + 1);
      if (pooled[k].second == 0) w1 += rank2[k];
    }
    tie_sizes.push_back(j - i);
    i = j;
  }

  MannWhitney out;
  const long base2 = static_cast<long>(n1 * (n1 + 1));  // 2 * n1(n1+1)/2
  out.u = static_cast<double>(w1 - base2) / 2.0;
  if (tie_sizes.size() == 1) return out;  // every value identical

  if (n1 * n2 <= kExactLimit) {
    // Count subsets of size n1 by doubled rank sum.
    const long max_sum = std::accumulate(rank2.begin(), rank2.end(), 0L);
    std::vector<std::vector<std::uint64_t>> count(n1 + 1, std::vector<std::uint64_t>(static_cast<std::size_t>(max_sum + 1), 0));
    count[0][0] = 1;
    for (std::size_t i = 0; i < n; ++i) {
      const long r = rank2[i];
      for (std::size_t k = std::min(i + 1, n1); k >= 1; --k) {
        auto& dst = count[k];
        const auto& src = count[k - 1];
        for (long s = max_sum - r; s >= 0; --s) {
          if (src[static_cast<std::size_t>(s)]) dst[static_cast<std::size_t>(s + r)] += src[static_cast<std::size_t>(s)];
        }
      }
    }
    std::uint64_t total = 0, lower = 0, upper = 0;
    for (long s = 0; s <= max_sum; ++s) {
      const auto c = count[n1][static_cast<std::size_t>(s)];
      total += c;
      if (s <= w1) lower += c;
      if (s >= w1) upper += c;
    }
    out.exact = true;
    out.p_numerator = 2 * std::min(lower, upper);
    out.p_denominator = total;
    out.p = std::min(1.0, static_cast<double>(out.p_numerator) / static_cast<double>(total));
    return out;
  }

  const double dn1 = static_cast<double>(n1), dn2 = static_cast<double>(n2), dn = static_cast<double>(n);
  double tie_term = 0.0;
  for (auto t : tie_sizes) {
    const double dt = static_cast<double>(t);
    tie_term += dt * dt * dt - dt;
  }
  const double mu = dn1 * dn2 / 2.0;
  const double var = dn1 * dn2 / 12.0 * ((dn + 1.0) - tie_term / (dn * (dn - 1.0)));
  if (!(var > 0.0)) return out;
  const double z = std::max(0.0, std::abs(out.u - mu) - 0.5) / std::sqrt(var);
  out.p = std::min(1.0, std::erfc(z / std::sqrt(2.0)));
  return out;
}

// ---------------------------------------------------------------------------

double ScalingFit::predict(double x) const { return intercept + slope * std::log(x); }

std::pair<double, double> ScalingFit::band(double x) const {
  const double n = static_cast<double>(points.size());
  const double d = std::log(x) - mean_log_x;
  const double half = t_critical * residual_sd * std::sqrt(1.0 / n + d * d / sxx);
  const double y = predict(x);
  return {y - half, y + half};
}

ScalingFit fit_log_linear(std::span<const std::pair<double, double>> points) {
  if (points.size() < 3) throw Error(ErrorKind::insufficient_data, "fit_log_linear needs at least 3 points");
  ScalingFit f;
  f.points.assign(points.begin(), points.end());
  const double n = static_cast<double>(points.size());
  double mx = 0.0, my = 0.0;
  for (const auto& [x, y] : points) {
    if (!(x > 0.0)) throw Error(ErrorKind::invalid_argument, "fit_log_linear: x must be positive");
    mx += std::log(x);
    my += y;
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0;
  for (const auto& [x, y] : points) {
    const double dx = std::log(x) - mx;
    sxx += dx * dx;
    sxy += dx * (y - my);
  }
  if (!(sxx > 0.0)) throw Error(ErrorKind::insufficient_data, "fit_log_linear needs distinct x values");
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  double sse = 0.0;
  for (const auto& [x, y] : points) {
    const double r = y - f.predict(x);
    sse += r * r;
  }
  f.residual_sd = std::sqrt(sse / (n - 2.0));
  f.slope_se = f.residual_sd / std::sqrt(sxx);
  f.t_critical = boost::math::quantile(boost::math::students_t(n - 2.0), 0.975);
  f.slope_ci_low = f.slope - f.t_critical * f.slope_se;
  f.slope_ci_high = f.slope + f.t_critical * f.slope_se;
  f.mean_log_x = mx;
  f.sxx = sxx;
  return f;
}

json to_json(const ScalingFit& f) {
  json pts = json::array();
  for (const auto& [x, y] : f.points) pts.push_back({x, y});
  return {{"points", pts},
          {"slope", f.slope},
          {"intercept", f.intercept},
          {"slope_se", f.slope_se},
          {"slope_ci95", {f.slope_ci_low, f.slope_ci_high}},
          {"residual_sd", f.residual_sd},
          {"t_critical", f.t_critical},
          {"mean_log_x", f.mean_log_x},
          {"sxx", f.sxx}};
}

template Mat<float> stack_brain<float>(const corpus::PairSet&);
template Mat<double> stack_brain<double>(const corpus::PairSet&);
template Mat<float> stack_audio<float>(const corpus::PairSet&, const features::ZScoreStats&);
template Mat<double> stack_audio<double>(const corpus::PairSet&, const features::ZScoreStats&);
template Mat<float> embed<float>(const encoder::EncoderParams<float>&, const Mat<float>&, int);
template Mat<double> embed<double>(const encoder::EncoderParams<double>&, const Mat<double>&, int);
template RetrievalReport evaluate<float>(const encoder::EncoderParams<float>&, const corpus::PairSet&,
                                         const features::ZScoreStats&, std::string);
template RetrievalReport evaluate<double>(const encoder::EncoderParams<double>&, const corpus::PairSet&,
                                          const features::ZScoreStats&, std::string);

}  // namespace ieegclip::eval
