#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "ieegclip/encoder.hpp"
#include "ieegclip/error.hpp"
#include "ieegclip/objective.hpp"
#include "ieegclip/rng.hpp"

using namespace ieegclip;
using encoder::Mat;

namespace {

encoder::EncoderConfig tiny() {
  encoder::EncoderConfig c;
  c.n_channels = 4;
  c.hidden_dim = 8;
  c.n_blocks = 1;
  c.kernel_size = 3;
  c.dilation_cycle = {1};
  c.out_dim = 6;
  c.attention_dim = 8;
  c.seed = 11;
  return c;
}

Mat<double> random_batch(int n, int batch, int steps, std::uint64_t seed) {
  CounterRng rng(seed);
  Mat<double> x(n, batch * steps);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  return x;
}

}  // namespace

TEST_CASE("parameter count matches a hand count of layer shapes") {
  // input 8x4+8, block 2*(8x24+8), attention 8x8+8+8, output 6x8+6, t_prime 1
  const auto p = encoder::init_encoder<double>(tiny());
  CHECK(p.parameter_count() == 40 + 400 + 80 + 54 + 1);
}

TEST_CASE("initialization is deterministic in the seed") {
  const auto a = encoder::init_encoder<double>(tiny());
  const auto b = encoder::init_encoder<double>(tiny());
  REQUIRE(a.arrays.size() == b.arrays.size());
  for (std::size_t i = 0; i < a.arrays.size(); ++i) CHECK(a.arrays[i].value == b.arrays[i].value);
  auto cfg = tiny();
  cfg.seed = 12;
  CHECK(encoder::init_encoder<double>(cfg).at("input.weight") != a.at("input.weight"));
  CHECK(a.t_prime() == 0.0);
}

TEST_CASE("zero input with zero biases yields the output bias") {
  auto p = encoder::init_encoder<double>(tiny());
  p.at("output.bias") << 1, 2, 3, 4, 5, 6;
  const Mat<double> y = encoder::forward(p, Mat<double>(Mat<double>::Zero(4, 3 * 120)));
  REQUIRE(y.rows() == 6);
  REQUIRE(y.cols() == 3);
  for (int b = 0; b < 3; ++b) CHECK(y.col(b) == p.at("output.bias").col(0));
}

TEST_CASE("forward rejects a bad batch shape") {
  const auto p = encoder::init_encoder<double>(tiny());
  CHECK_THROWS_AS(encoder::forward(p, Mat<double>(Mat<double>::Zero(5, 120))), Error);
  CHECK_THROWS_AS(encoder::forward(p, Mat<double>(Mat<double>::Zero(4, 119))), Error);
}

TEST_CASE("batch permutation permutes outputs") {
  const auto p = encoder::init_encoder<double>(tiny());
  const Mat<double> x = random_batch(4, 3, 120, 5);
  Mat<double> swapped(4, 360);
  swapped << x.middleCols(240, 120), x.middleCols(0, 120), x.middleCols(120, 120);
  const Mat<double> y = encoder::forward(p, x);
  const Mat<double> ys = encoder::forward(p, swapped);
  CHECK(ys.col(0) == y.col(2));
  CHECK(ys.col(1) == y.col(0));
  CHECK(ys.col(2) == y.col(1));
}

TEST_CASE("attention weights are a distribution over time") {
  const auto p = encoder::init_encoder<double>(tiny());
  const Mat<double> a = encoder::attention_weights(p, random_batch(4, 5, 120, 9));
  CHECK(a.rows() == 120);
  CHECK(a.minCoeff() >= 0.0);
  for (int b = 0; b < 5; ++b) CHECK(std::abs(a.col(b).sum() - 1.0) < 1e-6);
}

TEST_CASE("attach_head") {
  const auto p = encoder::init_encoder<double>(tiny());
  const Mat<double> x = random_batch(4, 4, 120, 3);

  SUBCASE("zero noise keeps outputs exactly") {
    const auto h = encoder::attach_head(p, 0.0, 1);
    CHECK(encoder::forward(h, x) == encoder::forward(p, x));
  }
  SUBCASE("only head arrays are new") {
    const auto h = encoder::attach_head(p, 1e-3, 1);
    CHECK(h.arrays.size() == p.arrays.size() + 2);
    for (const auto& a : p.arrays) CHECK(h.at(a.name) == a.value);
    CHECK(h.has("head.weight"));
    CHECK_THROWS_AS(encoder::attach_head(h, 0.0, 1), Error);
  }
  SUBCASE("small noise perturbs unit-norm embeddings by little") {
    const auto h = encoder::attach_head(p, 1e-3, 1);
    Mat<double> u = encoder::forward(p, x);
    Mat<double> v = encoder::forward(h, x);
    double worst = 0.0;
    for (int b = 0; b < 4; ++b) {
      const double scale = u.col(b).norm();
      worst = std::max(worst, (v.col(b) - u.col(b)).norm() / scale / std::sqrt(6.0));
    }
    CHECK(worst < 1e-2);
  }
}

TEST_CASE("zero upstream gradient gives an all-zero gradient set") {
  const auto p = encoder::init_encoder<double>(tiny());
  encoder::ForwardCache<double> cache;
  encoder::forward(p, random_batch(4, 2, 120, 4), &cache);
  const auto g = encoder::backward(p, cache, Mat<double>(Mat<double>::Zero(6, 2)));
  for (const auto& a : g.arrays) CHECK(a.value.isZero(0.0));
}

namespace {

// Loss of the full model: encoder followed by the contrastive objective.
double model_loss(const encoder::EncoderParams<double>& p, const Mat<double>& x, const Mat<double>& v) {
  const Mat<double> u = encoder::forward(p, x).transpose();
  return objective::clip_loss<double>(objective::cosine_similarity<double>(u, v).values, p.t_prime());
}

}  // namespace

TEST_CASE("end-to-end gradients agree with central differences") {
  for (bool head : {false, true}) {
    auto cfg = tiny();
    cfg.n_blocks = 2;
    cfg.dilation_cycle = {1, 2};
    auto p = encoder::init_encoder<double>(cfg);
    if (head) p = encoder::attach_head(p, 0.1, 3);
    p.t_prime() = 0.3;
    for (auto& a : p.arrays) {
      // Nonzero biases so every path carries signal.
      if (a.name.find("bias") != std::string::npos) {
        CounterRng rng(hash_name(a.name));
        for (Eigen::Index i = 0; i < a.value.size(); ++i) a.value.data()[i] = 0.1 * rng.normal();
      }
    }
    const Mat<double> x = random_batch(4, 5, 120, 21);
    Mat<double> v(5, 6);
    CounterRng rng(22);
    for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = rng.normal();

    encoder::ForwardCache<double> cache;
    const Mat<double> u = encoder::forward(p, x, &cache).transpose();
    const auto lg = objective::clip_loss_grad<double>(u, v, p.t_prime());
    auto g = encoder::backward(p, cache, Mat<double>(lg.du.transpose()));
    g.t_prime() = lg.dt_prime;

    const double h = 1e-5;
    double worst = 0.0;
    for (std::size_t ai = 0; ai < p.arrays.size(); ++ai) {
      for (Eigen::Index i = 0; i < p.arrays[ai].value.size(); i += 7) {
        auto q = p;
        q.arrays[ai].value.data()[i] += h;
        const double up = model_loss(q, x, v);
        q.arrays[ai].value.data()[i] -= 2 * h;
        const double down = model_loss(q, x, v);
        const double numeric = (up - down) / (2 * h);
        const double analytic = g.arrays[ai].value.data()[i];
        const double err = std::abs(numeric - analytic) / (std::abs(analytic) + 1e-12);
        if (std::abs(analytic) > 1e-7) worst = std::max(worst, err);
        CHECK_MESSAGE(std::abs(numeric - analytic) < 1e-4 * (std::abs(analytic) + 1e-6), p.arrays[ai].name);
      }
    }
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("ckpt1 round trip is bit-exact") {
  const auto dir = std::filesystem::temp_directory_path() / "ieegclip_test_ckpt";
  std::filesystem::create_directories(dir);
  auto p = encoder::attach_head(encoder::init_encoder<double>(tiny()), 1e-3, 2);
  p.t_prime() = 0.123456789012345;
  encoder::Checkpoint<double> ck{p, {{"extra", Mat<double>::Constant(2, 3, 1.0 / 3.0)}}, 42, {{"note", "x"}}};
  encoder::save_checkpoint(dir / "a.ckpt", ck);
  const auto back = encoder::load_checkpoint<double>(dir / "a.ckpt");
  CHECK(back.step == 42);
  CHECK(back.meta.at("note") == "x");
  CHECK(back.params.config.with_head);
  REQUIRE(back.params.arrays.size() == p.arrays.size());
  for (std::size_t i = 0; i < p.arrays.size(); ++i) {
    CHECK(back.params.arrays[i].name == p.arrays[i].name);
    CHECK(back.params.arrays[i].value == p.arrays[i].value);
  }
  CHECK(back.extra.at(0).value == ck.extra[0].value);
  CHECK(encoder::read_checkpoint_header(dir / "a.ckpt").at("dtype") == "f64");

  const auto pf = encoder::cast_params<float>(p);
  encoder::save_checkpoint(dir / "b.ckpt", encoder::Checkpoint<float>{pf, {}, 0, {}});
  CHECK(encoder::load_checkpoint<float>(dir / "b.ckpt").params.at("input.weight") == pf.at("input.weight"));

  std::filesystem::resize_file(dir / "a.ckpt", 40);
  CHECK_THROWS_AS(encoder::load_checkpoint<double>(dir / "a.ckpt"), Error);
  std::filesystem::remove_all(dir);
}
