#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <vector>

#include "ieegclip/error.hpp"
#include "ieegclip/features.hpp"
#include "ieegclip/rng.hpp"

using namespace ieegclip;
using features::FeatureFrameSeries;

namespace {

FeatureFrameSeries series(Eigen::MatrixXd frames, double rate) {
  FeatureFrameSeries s;
  s.frames = std::move(frames);
  s.frame_rate_hz = rate;
  return s;
}

std::vector<double> sine(double freq, double rate, std::size_t n, double amp = 0.5) {
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = amp * std::sin(2 * std::numbers::pi * freq * static_cast<double>(i) / rate);
  return x;
}

}  // namespace

TEST_CASE("chunking keeps tails of at least ten seconds") {
  auto c = features::chunk_audio("s", 0.0, 7205.0);
  CHECK(c.size() == 240);
  c = features::chunk_audio("s", 100.0, 7215.0);
  REQUIRE(c.size() == 241);
  CHECK(c.back().duration_s == doctest::Approx(15.0));
  CHECK(c.back().start == doctest::Approx(100.0 + 7200.0));
  CHECK(c.front().id == "s:0000");
  CHECK(c.back().id == "s:0240");
  CHECK(features::chunk_audio("s", 0.0, 9.0).empty());
}

TEST_CASE("interpolation onto the 120 Hz grid") {
  const auto up = features::interpolate_frames(series(Eigen::MatrixXd::Constant(150, 3, 2.5), 50.0));
  CHECK(up.size() == 360);
  CHECK(up.frame_rate_hz == 120.0);
  CHECK((up.frames.array() - 2.5).abs().maxCoeff() < 1e-12);

  // A ramp in time stays on the same line at the new frame centers.
  Eigen::MatrixXd ramp(150, 2);
  for (int k = 0; k < 150; ++k) {
    const double t = (k + 0.5) / 50.0;
    ramp(k, 0) = 3.0 * t - 1.0;
    ramp(k, 1) = -t;
  }
  const auto r = features::interpolate_frames(series(ramp, 50.0));
  for (Eigen::Index j = 0; j < r.frames.rows(); ++j) {
    const double t = (static_cast<double>(j) + 0.5) / 120.0;
    CHECK(r.frames(j, 0) == doctest::Approx(3.0 * t - 1.0).epsilon(1e-9));
    CHECK(r.frames(j, 1) == doctest::Approx(-t).epsilon(1e-9));
  }
  CHECK_THROWS_AS(features::interpolate_frames(series(ramp, 200.0)), Error);
}

TEST_CASE("segment averages") {
  const auto segs = features::segment_average(series(Eigen::MatrixXd::Constant(3600, 4, 1.25), 120.0));
  CHECK(segs.size() == 10);
  for (const auto& s : segs) CHECK((s.vector.array() - 1.25).abs().maxCoeff() < 1e-12);
  CHECK(segs[3].segment_index == 3);
  CHECK(segs[3].t_start == doctest::Approx(9.0));

  Eigen::MatrixXd ramp(360, 2);
  for (int k = 0; k < 360; ++k) ramp.row(k).setConstant(k);
  const auto one = features::segment_average(series(ramp, 120.0));
  REQUIRE(one.size() == 1);
  CHECK(one[0].vector(0) == doctest::Approx(179.5));
  CHECK(one[0].vector(1) == doctest::Approx(179.5));
}

TEST_CASE("segment averaging of interpolated frames is linear") {
  CounterRng rng(2);
  Eigen::MatrixXd a(1500, 3), b(1500, 3);
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    a.data()[i] = rng.normal();
    b.data()[i] = rng.normal();
  }
  auto pipe = [](const Eigen::MatrixXd& m) {
    return features::segment_average(features::interpolate_frames(series(m, 50.0)));
  };
  const auto sa = pipe(a), sb = pipe(b), sm = pipe(2.0 * a - 0.5 * b);
  REQUIRE(sa.size() == sm.size());
  for (std::size_t i = 0; i < sm.size(); ++i) {
    CHECK((sm[i].vector - (2.0 * sa[i].vector - 0.5 * sb[i].vector)).cwiseAbs().maxCoeff() < 1e-12);
  }
  const auto again = pipe(a);
  for (std::size_t i = 0; i < sa.size(); ++i) CHECK(again[i].vector == sa[i].vector);
}

TEST_CASE("z-scoring") {
  CounterRng rng(4);
  std::vector<features::SegmentFeature> segs(200);
  for (auto& s : segs) {
    s.vector.resize(3);
    s.vector << 5.0 + 2.0 * rng.normal(), -1.0 + 0.1 * rng.normal(), 7.0;
  }
  const auto stats = features::fit_zscore(segs);
  CHECK(stats.std(2) == features::kStdFloor);
  auto z = segs;
  features::apply_zscore(z, stats);
  for (int d = 0; d < 2; ++d) {
    double m = 0, v = 0;
    for (const auto& s : z) m += s.vector(d);
    m /= 200.0;
    for (const auto& s : z) v += (s.vector(d) - m) * (s.vector(d) - m);
    CHECK(std::abs(m) < 1e-6);
    CHECK(std::sqrt(v / 200.0) == doctest::Approx(1.0).epsilon(1e-6));
  }
  for (const auto& s : z) CHECK(s.vector(2) == 0.0);
  for (std::size_t i = 0; i < 10; ++i) {
    const auto back = features::invert_zscore(z[i].vector, stats);
    CHECK(std::abs(back(0) - segs[i].vector(0)) < 1e-6);
    CHECK(std::abs(back(1) - segs[i].vector(1)) < 1e-6);
  }
  CHECK_THROWS_AS(features::apply_zscore(Eigen::VectorXd::Zero(4), stats), Error);

  const auto round = features::zscore_from_json(features::to_json(stats));
  CHECK(round.mean == stats.mean);
  CHECK(round.std == stats.std);
}

TEST_CASE("Slaney mel scale") {
  CHECK(features::hz_to_mel(0.0) == 0.0);
  CHECK(features::hz_to_mel(1000.0) == doctest::Approx(15.0));
  CHECK(features::hz_to_mel(440.0) == doctest::Approx(440.0 * 3.0 / 200.0));
  CHECK(features::hz_to_mel(2000.0) == doctest::Approx(15.0 + std::log(2.0) * 27.0 / std::log(6.4)));
  for (double hz : {50.0, 999.0, 1500.0, 7000.0}) CHECK(features::mel_to_hz(features::hz_to_mel(hz)) == doctest::Approx(hz));
}

TEST_CASE("mel filterbank rows are nonnegative contiguous bands") {
  const auto fb = features::mel_filterbank(16000.0, 512, 40);
  CHECK(fb.rows() == 40);
  CHECK(fb.cols() == 257);
  CHECK(fb.minCoeff() >= 0.0);
  for (Eigen::Index m = 0; m < fb.rows(); ++m) {
    Eigen::Index first = -1, last = -1;
    for (Eigen::Index k = 0; k < fb.cols(); ++k) {
      if (fb(m, k) > 0) {
        if (first < 0) first = k;
        last = k;
      }
    }
    REQUIRE(first >= 0);
    for (Eigen::Index k = first; k <= last; ++k) CHECK(fb(m, k) > 0.0);
  }
}

TEST_CASE("log-mel spectrogram") {
  const double rate = 16000.0;
  const std::vector<double> silence(16000, 0.0);
  const auto s = features::melspectrogram(silence, rate);
  CHECK(s.dim() == 40);
  CHECK(s.frame_rate_hz == 120.0);
  CHECK((s.frames.array() - std::log(features::kLogFloor)).abs().maxCoeff() < 1e-12);

  const auto p = features::mel_power(sine(440.0, rate, 16000), rate);
  const Eigen::VectorXd mean = p.frames.colwise().mean().transpose();
  Eigen::Index arg;
  mean.maxCoeff(&arg);
  const auto centers = features::mel_band_centers_hz(rate, 40);
  std::size_t nearest = 0;
  for (std::size_t m = 1; m < centers.size(); ++m) {
    if (std::abs(centers[m] - 440.0) < std::abs(centers[nearest] - 440.0)) nearest = m;
  }
  CHECK(static_cast<std::size_t>(arg) == nearest);
}

TEST_CASE("mel centroid") {
  const std::vector<double> f{100.0, 300.0, 500.0};
  CHECK(features::mel_centroid(std::vector<double>{1.0, 1.0, 0.0}, f) == doctest::Approx(200.0));
  CHECK(features::mel_centroid(std::vector<double>{2.0, 5.0, 1.0}, f) ==
        doctest::Approx(features::mel_centroid(std::vector<double>{6.0, 15.0, 3.0}, f)));
  CHECK(std::isnan(features::mel_centroid(std::vector<double>{0.0, 0.0, 0.0}, f)));

  const double rate = 16000.0;
  const auto centers = features::mel_band_centers_hz(rate, 40);
  double previous = 0.0;
  for (double tone_hz : {300.0, 700.0, 1500.0, 3000.0}) {
    const auto p = features::mel_power(sine(tone_hz, rate, 8000), rate);
    const double c = features::segment_mel_centroid(p.frames, rate);
    // Width of the band containing the tone.
    std::size_t m = 0;
    while (m + 1 < centers.size() && centers[m + 1] < tone_hz) ++m;
    const double width = centers[std::min(m + 1, centers.size() - 1)] - centers[m];
    CHECK(std::abs(c - tone_hz) <= width);
    CHECK(c >= previous);
    previous = c;
  }
}

TEST_CASE("wav round trip") {
  const auto path = std::filesystem::temp_directory_path() / "ieegclip_test.wav";
  features::Waveform w{sine(440.0, 8000.0, 800), 8000.0};
  features::write_wav(path, w);
  const auto r = features::read_wav(path);
  CHECK(r.sample_rate_hz == 8000.0);
  REQUIRE(r.samples.size() == 800);
  for (std::size_t i = 0; i < 800; ++i) CHECK(std::abs(r.samples[i] - w.samples[i]) <= 1.0 / 32768.0);
  std::filesystem::remove(path);
}
