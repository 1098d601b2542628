#include "ieegclip/probes.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>

#include "ieegclip/error.hpp"
#include "ieegclip/eval.hpp"
#include "ieegclip/rng.hpp"

namespace ieegclip::probes {

using nlohmann::json;

double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error(ErrorKind::shape_mismatch, "pearson: length mismatch");
  const auto n = static_cast<double>(a.size());
  if (a.size() < 2) return std::numeric_limits<double>::quiet_NaN();
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (!(saa > 0.0) || !(sbb > 0.0)) return std::numeric_limits<double>::quiet_NaN();
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

std::vector<int> group_folds(std::span<const std::string> groups, int k, std::uint64_t seed) {
  const std::set<std::string> unique(groups.begin(), groups.end());
  std::vector<std::string> distinct(unique.begin(), unique.end());
  if (static_cast<int>(distinct.size()) < k) {
    throw Error(ErrorKind::insufficient_data, "grouped cross-validation needs at least " + std::to_string(k) +
                                                  " groups, got " + std::to_string(distinct.size()));
  }
  CounterRng rng = CounterRng(seed).derive("group_folds");
  rng.shuffle(std::span<std::string>(distinct));
  std::map<std::string, int> fold;
  for (std::size_t i = 0; i < distinct.size(); ++i) fold[distinct[i]] = static_cast<int>(i % static_cast<std::size_t>(k));
  std::vector<int> out;
  out.reserve(groups.size());
  for (const auto& g : groups) out.push_back(fold.at(g));
  return out;
}

namespace {

// Spectral form of a centered design: Z columns span X with eigenvalues lam;
// hat diagonal and fitted values for any alpha follow from it.
struct RidgeBasis {
  Eigen::MatrixXd z;     // n x r, Z = U diag(sqrt(lam))
  Eigen::VectorXd lam;   // r
  Eigen::MatrixXd proj;  // d x r maps Z-space coefficients to X coefficients
};

RidgeBasis decompose(const Eigen::MatrixXd& xs) {
  RidgeBasis b;
  if (xs.cols() <= xs.rows()) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(xs.transpose() * xs);
    b.lam = es.eigenvalues().cwiseMax(0.0);
    b.z = xs * es.eigenvectors();  // = U diag(s)
    b.proj = es.eigenvectors();
    // With Z = X V, w = V diag(1/(lam+alpha)) Z^T y.
  } else {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(xs * xs.transpose());
    b.lam = es.eigenvalues().cwiseMax(0.0);
    const Eigen::VectorXd s = b.lam.cwiseSqrt();
    b.z = es.eigenvectors() * s.asDiagonal();
    // w = X^T U diag(1/(lam+alpha)) U^T y = X^T U diag(1/(s (lam+alpha))) Z^T y
    Eigen::VectorXd inv_s(s.size());
    for (Eigen::Index i = 0; i < s.size(); ++i) inv_s(i) = s(i) > 0.0 ? 1.0 / s(i) : 0.0;
    b.proj = xs.transpose() * es.eigenvectors() * inv_s.asDiagonal();
  }
  return b;
}

Eigen::VectorXd coef_from_basis(const RidgeBasis& b, const Eigen::VectorXd& yc, double alpha) {
  const Eigen::VectorXd zy = b.z.transpose() * yc;
  const Eigen::VectorXd scaled = zy.cwiseQuotient((b.lam.array() + alpha).matrix());
  return b.proj * scaled;
}

double loo_error(const RidgeBasis& b, const Eigen::VectorXd& yc, double alpha) {
  const auto n = static_cast<double>(yc.size());
  const Eigen::VectorXd inv = (b.lam.array() + alpha).inverse().matrix();
  const Eigen::VectorXd fitted = b.z * inv.cwiseProduct(b.z.transpose() * yc);
  const Eigen::VectorXd hdiag = b.z.array().square().matrix() * inv;
  double err = 0.0;
  for (Eigen::Index i = 0; i < yc.size(); ++i) {
    const double denom = 1.0 - hdiag(i) - 1.0 / n;  // intercept adds 1/n
    const double r = (yc(i) - fitted(i)) / (std::abs(denom) > 1e-12 ? denom : 1e-12);
    err += r * r;
  }
  return err / n;
}

struct Standardizer {
  Eigen::RowVectorXd mean;
  Eigen::RowVectorXd inv_std;  // 0 for constant columns
};

Standardizer fit_standardizer(const Eigen::MatrixXd& x) {
  Standardizer s;
  s.mean = x.colwise().mean();
  s.inv_std.resize(x.cols());
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    const double var = (x.col(c).array() - s.mean(c)).square().mean();
    s.inv_std(c) = var > 1e-24 ? 1.0 / std::sqrt(var) : 0.0;
  }
  return s;
}

Eigen::MatrixXd apply(const Standardizer& s, const Eigen::MatrixXd& x) {
  return (x.rowwise() - s.mean).array().rowwise() * s.inv_std.array();
}

}  // namespace

Eigen::VectorXd ridge_coefficients(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, double alpha) {
  return coef_from_basis(decompose(x), y, alpha);
}

RidgeCvResult ridge_cv(const Eigen::MatrixXd& x, std::span<const double> y, std::span<const std::string> groups,
                       int k, std::uint64_t seed, std::span<const double> alphas) {
  const auto n = static_cast<std::size_t>(x.rows());
  if (y.size() != n || groups.size() != n) throw Error(ErrorKind::shape_mismatch, "ridge_cv: X, y, groups differ in length");
  if (alphas.empty()) throw Error(ErrorKind::invalid_argument, "ridge_cv: no regularization values");
  RidgeCvResult out;
  out.fold_of_row = group_folds(groups, k, seed);

  double sum_r = 0.0;
  for (int f = 0; f < k; ++f) {
    std::vector<Eigen::Index> tr, te;
    for (std::size_t i = 0; i < n; ++i) (out.fold_of_row[i] == f ? te : tr).push_back(static_cast<Eigen::Index>(i));
    const Eigen::MatrixXd xtr = x(tr, Eigen::all), xte = x(te, Eigen::all);
    Eigen::VectorXd ytr(static_cast<Eigen::Index>(tr.size()));
    for (std::size_t i = 0; i < tr.size(); ++i) ytr(static_cast<Eigen::Index>(i)) = y[static_cast<std::size_t>(tr[i])];
    std::vector<double> yte;
    for (auto i : te) yte.push_back(y[static_cast<std::size_t>(i)]);

    const Standardizer st = fit_standardizer(xtr);
    const Eigen::MatrixXd xs = apply(st, xtr);
    const double ymean = ytr.mean();
    const Eigen::VectorXd yc = ytr.array() - ymean;
    const RidgeBasis basis = decompose(xs);

    double best_alpha = alphas[0], best_err = std::numeric_limits<double>::infinity();
    for (double a : alphas) {
      const double err = loo_error(basis, yc, a);
      if (err < best_err) {
        best_err = err;
        best_alpha = a;
      }
    }
    const Eigen::VectorXd w = coef_from_basis(basis, yc, best_alpha);
    const Eigen::VectorXd pred = (apply(st, xte) * w).array() + ymean;
    const double r = pearson(std::span<const double>(pred.data(), static_cast<std::size_t>(pred.size())), yte);
    out.fold_alpha.push_back(best_alpha);
    out.fold_r.push_back(r);
    if (std::isfinite(r)) {
      sum_r += r;
      ++out.valid_folds;
    }
  }
  out.mean_r = out.valid_folds > 0 ? sum_r / out.valid_folds : std::numeric_limits<double>::quiet_NaN();
  return out;
}

// ---------------------------------------------------------------------------

std::string to_string(Space s) {
  switch (s) {
    case Space::brain_embedding: return "brain_embedding";
    case Space::audio_features: return "audio_features";
    case Space::raw_window: return "raw_window";
  }
  return "brain_embedding";
}

std::string to_string(TargetName t) {
  switch (t) {
    case TargetName::recording_day: return "recording_day";
    case TargetName::hour_from_noon: return "hour_from_noon";
    case TargetName::mel_centroid: return "mel_centroid";
    case TargetName::voice_flag: return "voice_flag";
  }
  return "recording_day";
}

Space space_from_string(const std::string& s) {
  for (auto v : {Space::brain_embedding, Space::audio_features, Space::raw_window}) {
    if (to_string(v) == s) return v;
  }
  throw Error(ErrorKind::config, "unknown embedding space '" + s + "'");
}

template <class T>
ProbeMatrix build_probe_matrix(Space space, const corpus::PairSet& pairs, const encoder::EncoderParams<T>* model) {
  if (pairs.empty()) throw Error(ErrorKind::empty_dataset, "probe matrix over no pairs");
  ProbeMatrix m;
  m.space = space;
  const auto n = static_cast<Eigen::Index>(pairs.size());
  switch (space) {
    case Space::brain_embedding: {
      if (!model) throw Error(ErrorKind::invalid_argument, "brain-embedding space needs a model");
      m.x = eval::embed(*model, eval::stack_brain<T>(pairs)).template cast<double>();
      break;
    }
    case Space::audio_features: {
      m.x.resize(n, static_cast<Eigen::Index>(pairs.feature_dim));
      for (Eigen::Index i = 0; i < n; ++i) m.x.row(i) = pairs.pairs[static_cast<std::size_t>(i)].audio.vector.transpose();
      break;
    }
    case Space::raw_window: {
      const auto& first = pairs.pairs.front().brain;
      m.x.resize(n, first.size());
      for (Eigen::Index i = 0; i < n; ++i) {
        const Eigen::MatrixXf& b = pairs.pairs[static_cast<std::size_t>(i)].brain;
        const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = b;
        m.x.row(i) = Eigen::Map<const Eigen::RowVectorXf>(rm.data(), rm.size()).cast<double>();
      }
      break;
    }
  }

  for (auto name : {TargetName::recording_day, TargetName::hour_from_noon, TargetName::mel_centroid,
                    TargetName::voice_flag}) {
    ProbeTarget t{name, {}, {}};
    for (const auto& p : pairs.pairs) {
      double v = 0.0;
      switch (name) {
        case TargetName::recording_day: v = p.day_index; break;
        case TargetName::hour_from_noon: v = std::abs(p.hour - 12.0); break;
        case TargetName::mel_centroid: v = p.mel_centroid; break;
        case TargetName::voice_flag: v = p.voice_flag; break;
      }
      t.values.push_back(v);
      t.finite_mask.push_back(std::isfinite(v));
    }
    if (std::none_of(t.finite_mask.begin(), t.finite_mask.end(), [](bool b) { return b; })) {
      m.notices.push_back(to_string(name) + ": no labels in these pairs; target skipped");
      continue;
    }
    m.targets.push_back(std::move(t));
  }
  for (const auto& p : pairs.pairs) m.groups.push_back(p.chunk_id);
  return m;
}

const ProbeEntry* ProbeReport::find(Space s, TargetName t) const {
  for (const auto& e : entries) {
    if (e.space == s && e.target == t) return &e;
  }
  return nullptr;
}

void run_probes(const ProbeMatrix& m, ProbeReport& report, std::uint64_t seed) {
  report.notices.insert(report.notices.end(), m.notices.begin(), m.notices.end());
  for (const auto& t : m.targets) {
    std::vector<Eigen::Index> rows;
    for (std::size_t i = 0; i < t.values.size(); ++i) {
      if (t.finite_mask[i]) rows.push_back(static_cast<Eigen::Index>(i));
    }
    std::vector<double> y;
    std::vector<std::string> g;
    for (auto i : rows) {
      y.push_back(t.values[static_cast<std::size_t>(i)]);
      g.push_back(m.groups[static_cast<std::size_t>(i)]);
    }
    if (std::set<std::string>(g.begin(), g.end()).size() < static_cast<std::size_t>(kFolds)) {
      report.notices.push_back(to_string(t.name) + ": fewer than 5 labelled groups; target skipped");
      continue;
    }
    ProbeEntry e{m.space, t.name, ridge_cv(m.x(rows, Eigen::all), y, g, kFolds, seed), rows.size()};
    report.entries.push_back(std::move(e));
  }
}

json to_json(const ProbeReport& r) {
  json entries = json::array();
  for (const auto& e : r.entries) {
    json folds = json::array();
    for (double v : e.result.fold_r) folds.push_back(std::isfinite(v) ? json(v) : json(nullptr));
    entries.push_back({{"space", to_string(e.space)},
                       {"target", to_string(e.target)},
                       {"mean_r", std::isfinite(e.result.mean_r) ? json(e.result.mean_r) : json(nullptr)},
                       {"fold_r", folds},
                       {"fold_alpha", e.result.fold_alpha},
                       {"rows", e.rows}});
  }
  return {{"entries", entries}, {"notices", r.notices}};
}

template ProbeMatrix build_probe_matrix<float>(Space, const corpus::PairSet&, const encoder::EncoderParams<float>*);
template ProbeMatrix build_probe_matrix<double>(Space, const corpus::PairSet&, const encoder::EncoderParams<double>*);

}  // namespace ieegclip::probes
