#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numeric>
#include <vector>

#include "ieegclip/encoder.hpp"
#include "ieegclip/error.hpp"
#include "ieegclip/eval.hpp"
#include "ieegclip/log.hpp"
#include "ieegclip/rng.hpp"
#include "ieegclip/trainer.hpp"

using namespace ieegclip;
using trainer::Mat;

namespace {

encoder::EncoderParams<double> scalar_param(double theta) {
  encoder::EncoderParams<double> p;
  p.arrays.push_back({"theta", Mat<double>::Constant(1, 1, theta)});
  return p;
}

encoder::EncoderConfig small_config(int n = 6, int d = 4) {
  encoder::EncoderConfig c;
  c.n_channels = n;
  c.out_dim = d;
  c.hidden_dim = 12;
  c.n_blocks = 1;
  c.attention_dim = 8;
  c.seed = 3;
  return c;
}

// Windows whose channels carry a fixed linear image of a latent vector, with
// the latent as the audio side.
trainer::Dataset<double> coupled_dataset(int count, int n, int d, std::uint64_t seed, double noise = 0.3) {
  CounterRng mix_rng(1000);
  Mat<double> mixing(n, d);
  for (Eigen::Index i = 0; i < mixing.size(); ++i) mixing.data()[i] = mix_rng.normal();
  CounterRng rng(seed);
  trainer::Dataset<double> ds;
  ds.brain.resize(n, count * 120);
  ds.audio.resize(count, d);
  for (int k = 0; k < count; ++k) {
    Eigen::VectorXd z(d);
    for (int j = 0; j < d; ++j) z(j) = rng.normal();
    ds.audio.row(k) = z.transpose();
    const Eigen::VectorXd x = mixing * z;
    for (int t = 0; t < 120; ++t) {
      for (int c = 0; c < n; ++c) ds.brain(c, k * 120 + t) = x(c) + noise * rng.normal();
    }
  }
  return ds;
}

trainer::TrainConfig fast_config(int epochs) {
  trainer::TrainConfig cfg;
  cfg.batch_size = 32;
  cfg.max_epochs = epochs;
  cfg.onecycle.max_lr = 5e-3;
  cfg.seed = 11;
  return cfg;
}

bool params_equal(const encoder::EncoderParams<double>& a, const encoder::EncoderParams<double>& b) {
  if (a.arrays.size() != b.arrays.size()) return false;
  for (std::size_t i = 0; i < a.arrays.size(); ++i) {
    if (a.arrays[i].name != b.arrays[i].name || a.arrays[i].value != b.arrays[i].value) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("one-cycle schedule examples") {
  trainer::OneCycleConfig cfg;
  const std::size_t total = 1000;
  CHECK(trainer::onecycle_lr(300, total, cfg) == doctest::Approx(2e-4).epsilon(1e-12));
  CHECK(trainer::onecycle_lr(0, total, cfg) == doctest::Approx(8e-6).epsilon(1e-12));
  CHECK(trainer::onecycle_lr(total, total, cfg) == doctest::Approx(8e-10).epsilon(1e-12));
  CHECK_THROWS_AS(trainer::onecycle_lr(0, 0, cfg), Error);
  CHECK_THROWS_AS(trainer::onecycle_lr(1001, total, cfg), Error);
}

TEST_CASE("one-cycle schedule is continuous, piecewise linear and peaks at max_lr") {
  trainer::OneCycleConfig cfg;
  for (std::size_t total : {7u, 10u, 333u, 1000u}) {
    double peak = 0.0;
    std::vector<double> lr(total + 1);
    for (std::size_t s = 0; s <= total; ++s) {
      lr[s] = trainer::onecycle_lr(s, total, cfg);
      peak = std::max(peak, lr[s]);
    }
    CHECK(peak == cfg.max_lr);
    const auto up = static_cast<std::size_t>(std::llround(0.3 * static_cast<double>(total)));
    const double rise = (cfg.max_lr - cfg.max_lr / 25.0) / static_cast<double>(up);
    for (std::size_t s = 1; s <= total; ++s) {
      const double step = lr[s] - lr[s - 1];
      CHECK(std::abs(step) <= rise * 1.000001 + (cfg.max_lr / static_cast<double>(total - up)));
      if (s < up) CHECK(step == doctest::Approx(rise));
      if (s > up + 1) CHECK(step == doctest::Approx(lr[s - 1] - lr[s - 2]));
    }
  }
}

TEST_CASE("AdamW examples") {
  trainer::TrainConfig cfg;
  cfg.weight_decay = 0.0;

  auto p = scalar_param(1.0);
  auto state = trainer::init_optimizer(p);
  trainer::adamw_step(p, scalar_param(0.0), state, 0.1, cfg);
  CHECK(p.arrays[0].value(0, 0) == 1.0);

  p = scalar_param(1.0);
  state = trainer::init_optimizer(p);
  trainer::adamw_step(p, scalar_param(1.0), state, 0.1, cfg);
  CHECK(p.arrays[0].value(0, 0) == doctest::Approx(1.0 - 0.1 / (1.0 + 1e-8)).epsilon(1e-14));
  CHECK(state.step == 1);

  cfg.weight_decay = 0.01;
  p = scalar_param(2.0);
  state = trainer::init_optimizer(p);
  trainer::adamw_step(p, scalar_param(0.0), state, 0.1, cfg);
  CHECK(p.arrays[0].value(0, 0) == doctest::Approx(2.0 * (1.0 - 0.001)).epsilon(1e-14));
}

TEST_CASE("AdamW matches a scalar reference over many steps") {
  trainer::TrainConfig cfg;
  cfg.weight_decay = 0.05;
  auto p = scalar_param(0.7);
  auto state = trainer::init_optimizer(p);
  double theta = 0.7, m = 0.0, v = 0.0;
  CounterRng rng(4);
  for (int t = 1; t <= 50; ++t) {
    const double g = rng.normal();
    const double lr = 0.01 * (1.0 + 0.1 * t);
    trainer::adamw_step(p, scalar_param(g), state, lr, cfg);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
    theta -= lr * (mh / (std::sqrt(vh) + 1e-8) + 0.05 * theta);
    CHECK(p.arrays[0].value(0, 0) == doctest::Approx(theta).epsilon(1e-12));
  }
}

TEST_CASE("weight decay alone contracts the parameter norm") {
  trainer::TrainConfig cfg;
  cfg.weight_decay = 0.1;
  auto p = encoder::init_encoder<double>(small_config());
  auto state = trainer::init_optimizer(p);
  const auto zero = p.zeros_like();
  auto norm = [](const encoder::EncoderParams<double>& q) {
    double s = 0.0;
    for (const auto& a : q.arrays) s += a.value.squaredNorm();
    return s;
  };
  double previous = norm(p);
  for (int i = 0; i < 10; ++i) {
    trainer::adamw_step(p, zero, state, 0.05, cfg);
    const double now = norm(p);
    CHECK(now < previous);
    previous = now;
  }
}

TEST_CASE("non-finite gradients are rejected without side effects") {
  trainer::TrainConfig cfg;
  auto p = scalar_param(1.0);
  auto state = trainer::init_optimizer(p);
  auto g = scalar_param(std::nan(""));
  CHECK_THROWS_AS(trainer::adamw_step(p, g, state, 0.1, cfg), Error);
  CHECK(p.arrays[0].value(0, 0) == 1.0);
  CHECK(state.step == 0);
  CHECK(state.m[0].value(0, 0) == 0.0);
}

TEST_CASE("early stopping patience") {
  trainer::EarlyStopper s(10);
  int stopped_at = 0;
  for (int epoch = 1; epoch <= 100; ++epoch) {
    if (s.update(epoch, 0.1 * epoch)) {
      stopped_at = epoch;
      break;
    }
  }
  CHECK(stopped_at == 11);
  CHECK(s.best_epoch() == 1);

  // Gains smaller than the threshold do not reset the counter.
  trainer::EarlyStopper tiny(3);
  CHECK_FALSE(tiny.update(1, 0.5));
  CHECK_FALSE(tiny.update(2, 0.5 - 1e-7));
  CHECK_FALSE(tiny.update(3, 0.5 - 2e-7));
  CHECK(tiny.update(4, 0.5 - 3e-7));
  CHECK(tiny.best_epoch() == 1);

  trainer::EarlyStopper better(2);
  CHECK_FALSE(better.update(1, 0.5));
  CHECK_FALSE(better.update(2, 0.6));
  CHECK_FALSE(better.update(3, 0.4));
  CHECK(better.best_epoch() == 3);
}

TEST_CASE("train config validation and JSON") {
  trainer::TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.onecycle.pct_start = 1.0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg.onecycle.pct_start = 0.3;
  cfg.early_stop_patience = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg.early_stop_patience = 4;
  cfg.mode = trainer::TrainMode::finetune;
  cfg.seed = 99;
  const auto back = trainer::train_config_from_json(trainer::to_json(cfg));
  CHECK(trainer::to_json(back) == trainer::to_json(cfg));
}

TEST_CASE("training on coupled data learns, shuffled pairing stays at chance") {
  const int n = 6, d = 4;
  const auto train_set = coupled_dataset(320, n, d, 1);
  const auto val_set = coupled_dataset(200, n, d, 2);
  const auto cfg = fast_config(8);
  const auto result = trainer::train(encoder::init_encoder<double>(small_config(n, d)), train_set, val_set, cfg);
  const auto u = eval::embed(result.params, val_set.brain);
  const auto report = eval::make_report(eval::relative_ranks(u, val_set.audio));
  CHECK(report.mean < 0.15);
  CHECK(result.history.best_epoch >= 1);
  for (const auto& e : result.history.epochs) CHECK(e.val_median_rank >= result.history.epochs[static_cast<std::size_t>(result.history.best_epoch - 1)].val_median_rank);

  auto shuffled = train_set;
  std::vector<Eigen::Index> perm(320);
  std::iota(perm.begin(), perm.end(), 0);
  CounterRng rng(5);
  rng.shuffle(std::span<Eigen::Index>(perm));
  for (Eigen::Index k = 0; k < 320; ++k) shuffled.audio.row(k) = train_set.audio.row(perm[static_cast<std::size_t>(k)]);
  auto control_cfg = cfg;
  control_cfg.early_stop_patience = 100;  // no selection on validation luck
  const auto control = trainer::train(encoder::init_encoder<double>(small_config(n, d)), shuffled, val_set, control_cfg);
  const auto uc = eval::embed(control.params, val_set.brain);
  const auto rc = eval::make_report(eval::relative_ranks(uc, val_set.audio));
  CHECK(rc.mean > 0.4);
  CHECK(rc.mean < 0.6);
}

TEST_CASE("training is bit-deterministic in double precision") {
  const auto train_set = coupled_dataset(96, 6, 4, 7);
  const auto val_set = coupled_dataset(40, 6, 4, 8);
  const auto cfg = fast_config(3);
  const auto a = trainer::train(encoder::init_encoder<double>(small_config()), train_set, val_set, cfg);
  const auto b = trainer::train(encoder::init_encoder<double>(small_config()), train_set, val_set, cfg);
  REQUIRE(a.history.epochs.size() == b.history.epochs.size());
  for (std::size_t i = 0; i < a.history.epochs.size(); ++i) {
    CHECK(a.history.epochs[i].train_loss == b.history.epochs[i].train_loss);
    CHECK(a.history.epochs[i].val_median_rank == b.history.epochs[i].val_median_rank);
  }
  CHECK(a.history.digest() == b.history.digest());
  CHECK(params_equal(a.params, b.params));

  auto other = cfg;
  other.seed = 12;
  const auto c = trainer::train(encoder::init_encoder<double>(small_config()), train_set, val_set, other);
  CHECK(c.history.digest() != a.history.digest());
}

TEST_CASE("checkpoint round trip continues training bit-exactly") {
  const auto data = coupled_dataset(32, 6, 4, 9);
  const auto cfg = fast_config(1);
  trainer::Trainer<double> straight(encoder::init_encoder<double>(small_config()), cfg, 10);
  straight.step(data.brain, data.audio);
  const auto path = std::filesystem::temp_directory_path() / "ieegclip_trainer.ckpt";
  encoder::save_checkpoint(path, straight.checkpoint());
  const double second = straight.step(data.brain, data.audio);

  auto resumed = trainer::Trainer<double>::from_checkpoint(encoder::load_checkpoint<double>(path), cfg);
  CHECK(resumed.total_steps() == 10);
  CHECK(resumed.state().step == 1);
  const double again = resumed.step(data.brain, data.audio);
  CHECK(again == second);
  CHECK(params_equal(resumed.params(), straight.params()));
  CHECK(resumed.current_lr() == straight.current_lr());
  std::filesystem::remove(path);
}

TEST_CASE("divergence stops training with the best parameters") {
  int warnings = 0;
  set_warning_sink([&](std::string_view) { ++warnings; });
  auto train_set = coupled_dataset(64, 6, 4, 3);
  const auto val_set = coupled_dataset(20, 6, 4, 4);
  train_set.brain(0, 5) = std::numeric_limits<double>::infinity();
  const auto r = trainer::train(encoder::init_encoder<double>(small_config()), train_set, val_set, fast_config(3));
  set_warning_sink(nullptr);
  CHECK(r.history.stop_reason == "diverged");
  CHECK(r.history.epochs.empty());
  CHECK(warnings == 1);
  CHECK(params_equal(r.params, encoder::init_encoder<double>(small_config())));
}

TEST_CASE("finetuning checks shapes and starts from the pretrained model") {
  const auto pretrained = encoder::init_encoder<double>(small_config());
  corpus::PairSet pairs;
  pairs.channel_ids = {"a", "b", "c"};
  pairs.feature_dim = 4;
  CHECK_THROWS_AS(trainer::finetune(pretrained, pairs, pairs, fast_config(1)), Error);

  // Zero epochs with a noiseless head reproduce zero-shot embeddings.
  corpus::PairSet task;
  task.feature_dim = 4;
  for (int c = 0; c < 6; ++c) task.channel_ids.push_back("c" + std::to_string(c));
  const auto data = coupled_dataset(30, 6, 4, 21);
  for (int k = 0; k < 30; ++k) {
    corpus::SegmentPair p;
    p.brain = data.brain.middleCols(k * 120, 120).cast<float>();
    p.audio.vector = data.audio.row(k).transpose();
    task.pairs.push_back(p);
  }
  auto cfg = fast_config(0);
  cfg.head_noise = 0.0;
  const auto ft = trainer::finetune(pretrained, task, task, cfg);
  CHECK(ft.params.has("head.weight"));
  const auto brain = eval::stack_brain<double>(task);
  CHECK((eval::embed(ft.params, brain) - eval::embed(pretrained, brain)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(ft.zscore.mean.size() == 4);
}
