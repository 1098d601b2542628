#include <doctest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "ieegclip/error.hpp"
#include "ieegclip/log.hpp"
#include "ieegclip/objective.hpp"
#include "ieegclip/rng.hpp"

using namespace ieegclip;
using objective::Mat;
using MatD = Mat<double>;

namespace {

MatD random_matrix(int rows, int cols, std::uint64_t seed) {
  CounterRng rng(seed);
  MatD m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

// Direct transcription of the loss, no stabilization.
double naive_loss(const MatD& s, double t_prime) {
  const double t = std::exp(t_prime);
  double total = 0.0;
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    double denom = 0.0;
    for (Eigen::Index j = 0; j < s.cols(); ++j) denom += std::exp(t * s(i, j));
    total += -std::log(std::exp(t * s(i, i)) / denom);
  }
  return total / static_cast<double>(s.rows());
}

double loss_of(const MatD& u, const MatD& v, double t_prime, bool symmetric = false) {
  return objective::clip_loss<double>(objective::cosine_similarity<double>(u, v).values, t_prime, symmetric);
}

}  // namespace

TEST_CASE("cosine similarity examples") {
  const MatD eye = MatD::Identity(4, 4);
  CHECK(objective::cosine_similarity<double>(eye, eye).values.isApprox(eye));
  const MatD v = random_matrix(5, 3, 1);
  const auto neg = objective::cosine_similarity<double>(-v, v).values;
  for (int i = 0; i < 5; ++i) CHECK(neg(i, i) == doctest::Approx(-1.0));
  const auto scaled = objective::cosine_similarity<double>(3.0 * v, v).values;
  for (int i = 0; i < 5; ++i) CHECK(scaled(i, i) == doctest::Approx(1.0));
  CHECK(scaled.maxCoeff() <= 1.0 + 1e-12);
  CHECK(scaled.minCoeff() >= -1.0 - 1e-12);
}

TEST_CASE("zero-norm rows are floored with a warning") {
  int warnings = 0;
  set_warning_sink([&](std::string_view) { ++warnings; });
  MatD u = random_matrix(3, 4, 2);
  u.row(1).setZero();
  const auto s = objective::cosine_similarity<double>(u, random_matrix(3, 4, 3)).values;
  set_warning_sink(nullptr);
  CHECK(warnings >= 1);
  CHECK(s.allFinite());
  CHECK(s.row(1).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("loss examples") {
  CHECK(objective::clip_loss<double>(MatD::Constant(1, 1, 0.3), 0.0) == 0.0);
  CHECK(std::abs(objective::clip_loss<double>(MatD::Identity(2, 2), 0.0) - std::log1p(std::exp(-1.0))) < 1e-9);
  for (int n : {2, 8, 128}) {
    CHECK(std::abs(objective::clip_loss<double>(MatD::Constant(n, n, 0.4), 1.3) - std::log(static_cast<double>(n))) < 1e-9);
  }
  CHECK_THROWS_AS(objective::clip_loss<double>(MatD(0, 0), 0.0), Error);
  CHECK_THROWS_AS(objective::clip_loss<double>(MatD::Zero(2, 3), 0.0), Error);
}

TEST_CASE("loss matches the unstabilized formula") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const MatD u = random_matrix(6, 5, seed), v = random_matrix(6, 5, seed + 100);
    const auto s = objective::cosine_similarity<double>(u, v).values;
    for (double tp : {-2.0, 0.0, 1.5}) CHECK(objective::clip_loss<double>(s, tp) == doctest::Approx(naive_loss(s, tp)).epsilon(1e-12));
  }
  // Large temperatures stay finite where the naive form overflows.
  CHECK(std::isfinite(objective::clip_loss<double>(MatD::Identity(3, 3), 7.0)));
}

TEST_CASE("loss properties") {
  CounterRng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 2 + static_cast<int>(rng.uniform_int(10));
    const MatD u = random_matrix(n, 4, rng.next_u64()), v = random_matrix(n, 4, rng.next_u64());
    const double tp = rng.uniform(-1.0, 2.0);
    const double base = loss_of(u, v, tp);
    CHECK(base >= 0.0);

    std::vector<int> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(std::span<int>(perm));
    MatD up(n, 4), vp(n, 4);
    for (int i = 0; i < n; ++i) {
      up.row(i) = u.row(perm[static_cast<std::size_t>(i)]);
      vp.row(i) = v.row(perm[static_cast<std::size_t>(i)]);
    }
    CHECK(loss_of(up, vp, tp) == doctest::Approx(base).epsilon(1e-12));

    MatD us = u;
    us.row(0) *= 7.5;
    CHECK(loss_of(us, v, tp) == doctest::Approx(base).epsilon(1e-12));
  }
}

TEST_CASE("higher temperature lowers the loss on diagonal-dominant similarities") {
  MatD s = MatD::Constant(5, 5, -0.2);
  s.diagonal().setConstant(0.8);
  s(1, 3) = 0.5;
  double previous = objective::clip_loss<double>(s, -3.0);
  for (double tp = -2.5; tp <= 3.0; tp += 0.5) {
    const double l = objective::clip_loss<double>(s, tp);
    CHECK(l < previous);
    previous = l;
  }
  CHECK(previous > 0.0);
}

TEST_CASE("gradients match central differences") {
  for (bool symmetric : {false, true}) {
    const MatD u = random_matrix(4, 8, 11), v = random_matrix(4, 8, 12);
    const double tp = 0.4;
    const auto g = objective::clip_loss_grad<double>(u, v, tp, symmetric);
    CHECK(g.loss == doctest::Approx(loss_of(u, v, tp, symmetric)).epsilon(1e-12));
    const double h = 1e-6;
    auto rel = [](double a, double b) { return std::abs(a - b) / std::max(1e-8, std::abs(a) + std::abs(b)); };
    for (Eigen::Index k = 0; k < u.size(); ++k) {
      MatD up = u, um = u;
      up.data()[k] += h;
      um.data()[k] -= h;
      const double fd = (loss_of(up, v, tp, symmetric) - loss_of(um, v, tp, symmetric)) / (2 * h);
      CHECK(rel(fd, g.du.data()[k]) < 1e-4);
      MatD vp = v, vm = v;
      vp.data()[k] += h;
      vm.data()[k] -= h;
      const double fdv = (loss_of(u, vp, tp, symmetric) - loss_of(u, vm, tp, symmetric)) / (2 * h);
      CHECK(rel(fdv, g.dv.data()[k]) < 1e-4);
    }
    const double fdt = (loss_of(u, v, tp + h, symmetric) - loss_of(u, v, tp - h, symmetric)) / (2 * h);
    CHECK(rel(fdt, g.dt_prime) < 1e-4);
  }
}

TEST_CASE("gradient vanishes at the optimum pattern") {
  // Two antipodal pairs: diagonal +1, off-diagonal -1.
  MatD u(2, 3);
  u << 1, 0, 0, -1, 0, 0;
  const auto g = objective::clip_loss_grad<double>(u, u, 5.0);
  CHECK(g.du.norm() < 1e-6);
  CHECK(g.dv.norm() < 1e-6);
}

TEST_CASE("temperature gradient is zero for uniform similarities") {
  MatD u = MatD::Zero(4, 3);
  u.col(0).setConstant(1.0);
  const MatD v = u;
  const auto g = objective::clip_loss_grad<double>(u, v, 0.7);
  CHECK(std::abs(g.dt_prime) < 1e-12);
  CHECK(g.loss == doctest::Approx(std::log(4.0)));
}

TEST_CASE("single and double precision agree") {
  const MatD u = random_matrix(8, 6, 21), v = random_matrix(8, 6, 22);
  const Mat<float> uf = u.cast<float>(), vf = v.cast<float>();
  const auto gd = objective::clip_loss_grad<double>(u, v, 0.3);
  const auto gf = objective::clip_loss_grad<float>(uf, vf, 0.3f);
  CHECK(gf.loss == doctest::Approx(gd.loss).epsilon(1e-5));
  CHECK((gf.du.cast<double>() - gd.du).cwiseAbs().maxCoeff() < 1e-5);
}
