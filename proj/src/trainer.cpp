#include "ieegclip/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <numeric>

#include "ieegclip/error.hpp"
#include "ieegclip/eval.hpp"
#include "ieegclip/log.hpp"
#include "ieegclip/objective.hpp"
#include "ieegclip/rng.hpp"

namespace ieegclip::trainer {

using nlohmann::json;

void TrainConfig::validate() const {
  if (!(onecycle.pct_start > 0.0 && onecycle.pct_start < 1.0)) {
    throw Error(ErrorKind::config, "onecycle.pct_start must lie in (0, 1)");
  }
  if (early_stop_patience < 1) throw Error(ErrorKind::config, "early_stop_patience must be at least 1");
  if (batch_size < 1) throw Error(ErrorKind::config, "batch_size must be positive");
  if (max_epochs < 0) throw Error(ErrorKind::config, "max_epochs must be nonnegative");
  if (!(onecycle.max_lr > 0.0) || !(onecycle.div_factor > 0.0) || !(onecycle.final_div_factor > 0.0)) {
    throw Error(ErrorKind::config, "one-cycle rates must be positive");
  }
}

json to_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"batch_size", c.batch_size},
          {"max_epochs", c.max_epochs},
          {"onecycle",
           {{"max_lr", c.onecycle.max_lr},
            {"pct_start", c.onecycle.pct_start},
            {"div_factor", c.onecycle.div_factor},
            {"final_div_factor", c.onecycle.final_div_factor}}},
          {"early_stop_patience", c.early_stop_patience},
          {"weight_decay", c.weight_decay},
          {"betas", {c.beta1, c.beta2}},
          {"eps", c.eps},
          {"t_prime_clamp", c.t_prime_clamp},
          {"symmetric_loss", c.symmetric_loss},
          {"seed", c.seed},
          {"mode", c.mode == TrainMode::pretrain ? "pretrain" : "finetune"},
          {"head_noise", c.head_noise}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  try {
    c.lr = j.value("lr", c.lr);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    if (j.contains("onecycle")) {
      const auto& o = j.at("onecycle");
      c.onecycle.max_lr = o.value("max_lr", c.onecycle.max_lr);
      c.onecycle.pct_start = o.value("pct_start", c.onecycle.pct_start);
      c.onecycle.div_factor = o.value("div_factor", c.onecycle.div_factor);
      c.onecycle.final_div_factor = o.value("final_div_factor", c.onecycle.final_div_factor);
    }
    c.early_stop_patience = j.value("early_stop_patience", c.early_stop_patience);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    if (j.contains("betas")) {
      c.beta1 = j.at("betas").at(0).get<double>();
      c.beta2 = j.at("betas").at(1).get<double>();
    }
    c.eps = j.value("eps", c.eps);
    c.t_prime_clamp = j.value("t_prime_clamp", c.t_prime_clamp);
    c.symmetric_loss = j.value("symmetric_loss", c.symmetric_loss);
    c.seed = j.value("seed", c.seed);
    c.mode = j.value("mode", std::string{"pretrain"}) == "finetune" ? TrainMode::finetune : TrainMode::pretrain;
    c.head_noise = j.value("head_noise", c.head_noise);
    c.verbose = j.value("verbose", c.verbose);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::config, std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

double onecycle_lr(std::size_t step, std::size_t total_steps, const OneCycleConfig& cfg) {
  if (total_steps == 0) throw Error(ErrorKind::invalid_argument, "onecycle_lr: total_steps is 0");
  if (step > total_steps) throw Error(ErrorKind::invalid_argument, "onecycle_lr: step beyond schedule");
  const double start = cfg.max_lr / cfg.div_factor;
  const double end = start / cfg.final_div_factor;
  const auto up = static_cast<std::size_t>(std::llround(cfg.pct_start * static_cast<double>(total_steps)));
  if (step <= up && up > 0) {
    return start + (cfg.max_lr - start) * static_cast<double>(step) / static_cast<double>(up);
  }
  if (up >= total_steps) return cfg.max_lr;
  const double frac = static_cast<double>(step - up) / static_cast<double>(total_steps - up);
  return cfg.max_lr + (end - cfg.max_lr) * frac;
}

template <class T>
OptimizerState<T> init_optimizer(const encoder::EncoderParams<T>& params) {
  OptimizerState<T> s;
  const auto zeros = params.zeros_like();
  s.m = zeros.arrays;
  s.v = zeros.arrays;
  return s;
}

template <class T>
void adamw_step(encoder::EncoderParams<T>& params, const encoder::GradientSet<T>& grads, OptimizerState<T>& state,
                double lr, const TrainConfig& cfg) {
  if (grads.arrays.size() != params.arrays.size() || state.m.size() != params.arrays.size()) {
    throw Error(ErrorKind::shape_mismatch, "adamw_step: parameter, gradient and moment sets differ");
  }
  for (std::size_t i = 0; i < grads.arrays.size(); ++i) {
    if (grads.arrays[i].value.rows() != params.arrays[i].value.rows() ||
        grads.arrays[i].value.cols() != params.arrays[i].value.cols()) {
      throw Error(ErrorKind::shape_mismatch, "adamw_step: gradient shape differs for " + params.arrays[i].name);
    }
    if (!grads.arrays[i].value.allFinite()) {
      throw Error(ErrorKind::non_finite, "adamw_step: non-finite gradient in " + grads.arrays[i].name);
    }
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T c1 = static_cast<T>(1.0 - std::pow(cfg.beta1, t));
  const T c2 = static_cast<T>(1.0 - std::pow(cfg.beta2, t));
  const T rate = static_cast<T>(lr), wd = static_cast<T>(cfg.weight_decay), eps = static_cast<T>(cfg.eps);
  for (std::size_t i = 0; i < params.arrays.size(); ++i) {
    auto theta = params.arrays[i].value.array();
    const auto g = grads.arrays[i].value.array();
    auto m = state.m[i].value.array();
    auto v = state.v[i].value.array();
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    theta -= rate * ((m / c1) / ((v / c2).sqrt() + eps) + wd * theta);
  }
}

// ---------------------------------------------------------------------------

std::string TrainHistory::digest() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&](double x) {
    unsigned char bytes[sizeof x];
    std::memcpy(bytes, &x, sizeof x);
    for (unsigned char b : bytes) {
      h ^= b;
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& e : epochs) {
    feed(e.train_loss);
    feed(e.val_median_rank);
    feed(e.val_mean_rank);
    feed(e.lr);
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

json to_json(const TrainHistory& h) {
  json epochs = json::array();
  for (const auto& e : h.epochs) {
    epochs.push_back({{"epoch", e.epoch},
                      {"train_loss", e.train_loss},
                      {"val_median_rank", e.val_median_rank},
                      {"val_mean_rank", e.val_mean_rank},
                      {"lr", e.lr},
                      {"wall_time_s", e.wall_time_s}});
  }
  return {{"epochs", epochs}, {"best_epoch", h.best_epoch}, {"stop_reason", h.stop_reason}, {"digest", h.digest()}};
}

bool EarlyStopper::update(int epoch, double metric) {
  if (best_epoch_ == 0 || metric <= best_ - min_delta_) {
    best_ = metric;
    best_epoch_ = epoch;
    since_best_ = 0;
    return false;
  }
  ++since_best_;
  return since_best_ >= patience_;
}

// ---------------------------------------------------------------------------

features::ZScoreStats fit_audio_zscore(const corpus::PairSet& train) {
  if (train.empty()) throw Error(ErrorKind::empty_dataset, "cannot fit z-score statistics on an empty split");
  Eigen::MatrixXd rows(static_cast<Eigen::Index>(train.size()), static_cast<Eigen::Index>(train.feature_dim));
  for (std::size_t i = 0; i < train.size(); ++i) rows.row(static_cast<Eigen::Index>(i)) = train.pairs[i].audio.vector.transpose();
  return features::fit_zscore(rows, "train");
}

template <class T>
Dataset<T> make_dataset(const corpus::PairSet& pairs, const features::ZScoreStats& stats) {
  return {eval::stack_brain<T>(pairs), eval::stack_audio<T>(pairs, stats)};
}

template <class T>
Trainer<T>::Trainer(encoder::EncoderParams<T> params, TrainConfig cfg, std::size_t total_steps)
    : params_(std::move(params)), cfg_(std::move(cfg)), total_steps_(total_steps) {
  cfg_.validate();
  state_ = init_optimizer(params_);
}

template <class T>
double Trainer<T>::current_lr() const {
  return onecycle_lr(std::min<std::size_t>(state_.step, total_steps_), total_steps_, cfg_.onecycle);
}

template <class T>
T Trainer<T>::step(const Mat<T>& brain, const Mat<T>& audio) {
  encoder::ForwardCache<T> cache;
  const Mat<T> y = encoder::forward(params_, brain, &cache);
  const Mat<T> u = y.transpose();
  const auto lg = objective::clip_loss_grad<T>(u, audio, params_.t_prime(), cfg_.symmetric_loss);
  if (!std::isfinite(static_cast<double>(lg.loss))) throw Error(ErrorKind::non_finite, "training loss is not finite");
  encoder::GradientSet<T> grads = encoder::backward(params_, cache, Mat<T>(lg.du.transpose()));
  grads.t_prime() = lg.dt_prime;
  adamw_step(params_, grads, state_, current_lr(), cfg_);
  const T clamp = static_cast<T>(cfg_.t_prime_clamp);
  params_.t_prime() = std::clamp(params_.t_prime(), -clamp, clamp);
  return lg.loss;
}

template <class T>
encoder::Checkpoint<T> Trainer<T>::checkpoint(json meta) const {
  encoder::Checkpoint<T> ck;
  ck.params = params_;
  for (const auto& a : state_.m) ck.extra.push_back({"adam.m." + a.name, a.value});
  for (const auto& a : state_.v) ck.extra.push_back({"adam.v." + a.name, a.value});
  ck.step = state_.step;
  meta["total_steps"] = total_steps_;
  meta["train_config"] = to_json(cfg_);
  ck.meta = std::move(meta);
  return ck;
}

template <class T>
Trainer<T> Trainer<T>::from_checkpoint(const encoder::Checkpoint<T>& ckpt, TrainConfig cfg) {
  const auto total = ckpt.meta.value("total_steps", std::size_t{0});
  Trainer<T> t(ckpt.params, std::move(cfg), total);
  t.state_.step = ckpt.step;
  for (std::size_t i = 0; i < t.params_.arrays.size(); ++i) {
    const auto& name = t.params_.arrays[i].name;
    bool found_m = false, found_v = false;
    for (const auto& e : ckpt.extra) {
      if (e.name == "adam.m." + name) {
        t.state_.m[i].value = e.value;
        found_m = true;
      } else if (e.name == "adam.v." + name) {
        t.state_.v[i].value = e.value;
        found_v = true;
      }
    }
    if (!found_m || !found_v) throw Error(ErrorKind::format, "checkpoint lacks optimizer moments for " + name);
  }
  return t;
}

template <class T>
TrainResult<T> train(encoder::EncoderParams<T> params, const Dataset<T>& train_set, const Dataset<T>& val_set,
                     const TrainConfig& cfg) {
  cfg.validate();
  if (train_set.size() == 0 || val_set.size() < 2) {
    throw Error(ErrorKind::empty_dataset, "training needs a nonempty train split and at least 2 validation pairs");
  }
  const int steps = params.config.time_steps;
  const std::size_t n = train_set.size();
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t per_epoch = (n + bs - 1) / bs;
  const std::size_t total = per_epoch * static_cast<std::size_t>(std::max(cfg.max_epochs, 1));

  TrainResult<T> result;
  result.params = params;
  if (cfg.max_epochs == 0) {
    result.history.stop_reason = "max_epochs";
    return result;
  }

  Trainer<T> trainer(std::move(params), cfg, total);
  EarlyStopper stopper(cfg.early_stop_patience);
  const CounterRng shuffle_root = CounterRng(cfg.seed).derive("shuffle");
  const auto clock_start = std::chrono::steady_clock::now();
  std::vector<std::size_t> order(n);
  Mat<T> brain(train_set.brain.rows(), static_cast<Eigen::Index>(bs) * steps);
  Mat<T> audio(static_cast<Eigen::Index>(bs), train_set.audio.cols());

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    CounterRng rng = shuffle_root.derive(static_cast<std::uint64_t>(epoch));
    rng.shuffle(std::span<std::size_t>(order));

    double loss_sum = 0.0;
    bool diverged = false;
    for (std::size_t start = 0; start < n; start += bs) {
      const std::size_t len = std::min(bs, n - start);
      brain.resize(train_set.brain.rows(), static_cast<Eigen::Index>(len) * steps);
      audio.resize(static_cast<Eigen::Index>(len), train_set.audio.cols());
      for (std::size_t k = 0; k < len; ++k) {
        const auto src = static_cast<Eigen::Index>(order[start + k]);
        brain.middleCols(static_cast<Eigen::Index>(k) * steps, steps) = train_set.brain.middleCols(src * steps, steps);
        audio.row(static_cast<Eigen::Index>(k)) = train_set.audio.row(src);
      }
      try {
        loss_sum += static_cast<double>(trainer.step(brain, audio)) * static_cast<double>(len);
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::non_finite) throw;
        diverged = true;
        break;
      }
    }
    if (diverged) {
      warn("training diverged in epoch " + std::to_string(epoch));
      result.history.stop_reason = "diverged";
      break;
    }

    const Mat<T> u = eval::embed(trainer.params(), val_set.brain);
    const auto report = eval::make_report(eval::relative_ranks(u.template cast<double>(), val_set.audio.template cast<double>()));
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(n);
    rec.val_median_rank = report.median;
    rec.val_mean_rank = report.mean;
    rec.lr = trainer.current_lr();
    rec.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - clock_start).count();
    result.history.epochs.push_back(rec);
    if (cfg.verbose) {
      std::printf("epoch %3d  loss %.5f  val median %.4f  mean %.4f  lr %.3g\n", epoch, rec.train_loss,
                  rec.val_median_rank, rec.val_mean_rank, rec.lr);
      std::fflush(stdout);
    }

    const bool stop = stopper.update(epoch, rec.val_median_rank);
    if (stopper.best_epoch() == epoch) result.params = trainer.params();
    if (stop) {
      result.history.stop_reason = "patience";
      break;
    }
  }
  if (result.history.stop_reason.empty()) result.history.stop_reason = "max_epochs";
  result.history.best_epoch = stopper.best_epoch();
  return result;
}

template <class T>
TrainResult<T> pretrain(const encoder::EncoderConfig& enc, const corpus::PairSet& train_pairs,
                        const corpus::PairSet& val_pairs, const TrainConfig& cfg) {
  if (static_cast<std::size_t>(enc.n_channels) != train_pairs.channel_ids.size() ||
      static_cast<std::size_t>(enc.out_dim) != train_pairs.feature_dim) {
    throw Error(ErrorKind::shape_mismatch, "encoder config does not match the training pairs");
  }
  const auto stats = fit_audio_zscore(train_pairs);
  auto result = train(encoder::init_encoder<T>(enc), make_dataset<T>(train_pairs, stats),
                      make_dataset<T>(val_pairs, stats), cfg);
  result.zscore = stats;
  return result;
}

template <class T>
TrainResult<T> finetune(const encoder::EncoderParams<T>& pretrained, const corpus::PairSet& train_pairs,
                        const corpus::PairSet& val_pairs, const TrainConfig& cfg) {
  if (static_cast<std::size_t>(pretrained.config.n_channels) != train_pairs.channel_ids.size()) {
    throw Error(ErrorKind::shape_mismatch, "checkpoint expects " + std::to_string(pretrained.config.n_channels) +
                                               " channels, task data has " + std::to_string(train_pairs.channel_ids.size()));
  }
  if (static_cast<std::size_t>(pretrained.config.out_dim) != train_pairs.feature_dim) {
    throw Error(ErrorKind::shape_mismatch, "checkpoint output dimension does not match the task features");
  }
  auto start = pretrained.has("head.weight") ? pretrained
                                             : encoder::attach_head(pretrained, cfg.head_noise, cfg.seed);
  const auto stats = fit_audio_zscore(train_pairs);
  auto result = train(std::move(start), make_dataset<T>(train_pairs, stats), make_dataset<T>(val_pairs, stats), cfg);
  result.zscore = stats;
  return result;
}

#define IEEGCLIP_INSTANTIATE(T)                                                                                 \
  template OptimizerState<T> init_optimizer<T>(const encoder::EncoderParams<T>&);                               \
  template void adamw_step<T>(encoder::EncoderParams<T>&, const encoder::GradientSet<T>&, OptimizerState<T>&,   \
                              double, const TrainConfig&);                                                      \
  template Dataset<T> make_dataset<T>(const corpus::PairSet&, const features::ZScoreStats&);                    \
  template class Trainer<T>;                                                                                    \
  template TrainResult<T> train<T>(encoder::EncoderParams<T>, const Dataset<T>&, const Dataset<T>&,             \
                                   const TrainConfig&);                                                         \
  template TrainResult<T> pretrain<T>(const encoder::EncoderConfig&, const corpus::PairSet&,                    \
                                      const corpus::PairSet&, const TrainConfig&);                              \
  template TrainResult<T> finetune<T>(const encoder::EncoderParams<T>&, const corpus::PairSet&,                 \
                                      const corpus::PairSet&, const TrainConfig&);

IEEGCLIP_INSTANTIATE(float)
IEEGCLIP_INSTANTIATE(double)
#undef IEEGCLIP_INSTANTIATE

}  // namespace ieegclip::trainer
