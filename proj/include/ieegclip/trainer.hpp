#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "ieegclip/corpus.hpp"
#include "ieegclip/encoder.hpp"
#include "ieegclip/features.hpp"

namespace ieegclip::trainer {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

struct OneCycleConfig {
  double max_lr = 2e-4;
  double pct_start = 0.3;
  double div_factor = 25.0;
  double final_div_factor = 1e4;
};

enum class TrainMode { pretrain, finetune };

struct TrainConfig {
  double lr = 1e-4;  // recorded; the schedule sets the per-step rate
  int batch_size = 128;
  int max_epochs = 100;
  OneCycleConfig onecycle;
  int early_stop_patience = 10;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double t_prime_clamp = 5.0;
  bool symmetric_loss = false;
  std::uint64_t seed = 0;  // batch shuffling
  TrainMode mode = TrainMode::pretrain;
  double head_noise = 1e-3;  // finetune only
  bool verbose = false;      // progress lines on stdout

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

// Linear ramp from max_lr/div to max_lr over round(pct_start * total) steps,
// then linear descent to max_lr/(div * final_div) at step == total.
double onecycle_lr(std::size_t step, std::size_t total_steps, const OneCycleConfig& cfg);

template <class T>
struct OptimizerState {
  std::vector<encoder::NamedArray<T>> m;
  std::vector<encoder::NamedArray<T>> v;
  std::uint64_t step = 0;
};

template <class T>
OptimizerState<T> init_optimizer(const encoder::EncoderParams<T>& params);

// In-place AdamW with decoupled weight decay:
// theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta).
// Throws non_finite (and leaves everything untouched) on a non-finite gradient.
template <class T>
void adamw_step(encoder::EncoderParams<T>& params, const encoder::GradientSet<T>& grads, OptimizerState<T>& state,
                double lr, const TrainConfig& cfg);

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_median_rank = 0.0;
  double val_mean_rank = 0.0;
  double lr = 0.0;
  double wall_time_s = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  std::string stop_reason;

  // Hex digest of the loss/rank sequence, stable across runs.
  std::string digest() const;
};

nlohmann::json to_json(const TrainHistory& h);

// Patience counter on a metric where lower is better. An epoch improves when
// it beats the best so far by at least min_delta.
class EarlyStopper {
 public:
  explicit EarlyStopper(int patience, double min_delta = 1e-6) : patience_(patience), min_delta_(min_delta) {}

  // Returns true if training should stop after this epoch.
  bool update(int epoch, double metric);
  int best_epoch() const { return best_epoch_; }
  double best() const { return best_; }

 private:
  int patience_;
  double min_delta_;
  double best_ = 0.0;
  int best_epoch_ = 0;
  int since_best_ = 0;
};

// Brain windows and z-scored audio vectors ready for training.
template <class T>
struct Dataset {
  Mat<T> brain;  // n x (N*T)
  Mat<T> audio;  // N x d
  std::size_t size() const { return static_cast<std::size_t>(audio.rows()); }
};

template <class T>
Dataset<T> make_dataset(const corpus::PairSet& pairs, const features::ZScoreStats& stats);

// Fit on the audio vectors of `train`.
features::ZScoreStats fit_audio_zscore(const corpus::PairSet& train);

// One optimizer over one parameter set, stepping through a fixed schedule.
template <class T>
class Trainer {
 public:
  Trainer(encoder::EncoderParams<T> params, TrainConfig cfg, std::size_t total_steps);

  // Loss of the batch before the update.
  T step(const Mat<T>& brain, const Mat<T>& audio);

  const encoder::EncoderParams<T>& params() const { return params_; }
  const OptimizerState<T>& state() const { return state_; }
  std::size_t total_steps() const { return total_steps_; }
  double current_lr() const;

  // Params, moments and step counter; `meta` carries the schedule length.
  encoder::Checkpoint<T> checkpoint(nlohmann::json meta = nlohmann::json::object()) const;
  static Trainer from_checkpoint(const encoder::Checkpoint<T>& ckpt, TrainConfig cfg);

 private:
  encoder::EncoderParams<T> params_;
  OptimizerState<T> state_;
  TrainConfig cfg_;
  std::size_t total_steps_;
};

template <class T>
struct TrainResult {
  encoder::EncoderParams<T> params;  // best epoch
  TrainHistory history;
  features::ZScoreStats zscore;
};

// Epoch loop with seeded shuffling, validation median rank after every epoch,
// best-epoch tracking and early stopping. A non-finite loss ends training
// with stop_reason "diverged" and the best parameters seen so far.
template <class T>
TrainResult<T> train(encoder::EncoderParams<T> params, const Dataset<T>& train_set, const Dataset<T>& val_set,
                     const TrainConfig& cfg);

// Fits z-score on `train`, initializes the encoder, trains.
template <class T>
TrainResult<T> pretrain(const encoder::EncoderConfig& enc, const corpus::PairSet& train_pairs,
                        const corpus::PairSet& val_pairs, const TrainConfig& cfg);

// Attaches the head, re-fits z-score on the task train split, trains all
// weights. Throws shape_mismatch when channels or feature dim differ.
template <class T>
TrainResult<T> finetune(const encoder::EncoderParams<T>& pretrained, const corpus::PairSet& train_pairs,
                        const corpus::PairSet& val_pairs, const TrainConfig& cfg);

}  // namespace ieegclip::trainer
