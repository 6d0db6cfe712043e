// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include "doctest.h"
#include "echoedm/edm.hpp"

using namespace echoedm;

TEST_CASE("preconditioning at zero noise is the identity skip") {
  const auto p = precondition_coeffs(0.0, {0.5});
  CHECK(p.c_skip == 1.0);
  CHECK(p.c_out == 0.0);
  CHECK(p.c_in == doctest::Approx(2.0));
  CHECK(std::isnan(p.c_noise));
  CHECK_THROWS_AS(c_noise_of(0.0), ValidationError);
}

TEST_CASE("preconditioning closed forms at sigma = sigma_q") {
  // sum form: c_out = s*sq/sqrt(s^2+sq^2), c_in = 1/sqrt(s^2+sq^2)
  const auto p = precondition_coeffs(0.5, {0.5});
  CHECK(p.c_skip == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(p.c_out == doctest::Approx(0.353553390593).epsilon(1e-9));
  CHECK(p.c_in == doctest::Approx(1.414213562373).epsilon(1e-9));
  CHECK(p.c_noise == doctest::Approx(-0.173286795140).epsilon(1e-9));
  CHECK(precondition_coeffs(1.0, {0.5}).c_noise == 0.0);
}

TEST_CASE("negative sigma is rejected") {
  CHECK_THROWS_AS(precondition_coeffs(-1e-3, {0.5}), ValidationError);
  CHECK_THROWS_AS(precondition_coeffs(0.1, {0.0}), ValidationError);
}

TEST_CASE("preconditioning identities over a log grid") {
  const DataStats st{0.5};
  const double sq2 = 0.25;
  for (int i = 0; i <= 120; ++i) {
    const double s = std::pow(10.0, -3.0 + 6.0 * i / 120.0);
    const auto p = precondition_coeffs(s, st);
    CHECK(std::abs(p.c_in * p.c_in * (s * s + sq2) - 1.0) < 1e-12);
    CHECK(std::abs(p.c_skip + s * s / (s * s + sq2) - 1.0) < 1e-12);
    CHECK(std::abs(p.c_out * p.c_in - s * 0.5 / (s * s + sq2)) <
          1e-12 * std::max(1.0, s * 0.5 / (s * s + sq2)));
  }
}

TEST_CASE("schedule endpoints and invariants") {
  const auto s = build_schedule(2, 0.002, 80.0, 7.0);
  REQUIRE(s.levels.size() == 3);
  CHECK(s.levels[0] == 80.0);
  CHECK(s.levels[1] == doctest::Approx(0.002));
  CHECK(s.levels[2] == 0.0);

  const auto one = build_schedule(1, 0.002, 80.0, 7.0);
  CHECK(one.levels == std::vector<double>{80.0, 0.0});

  CHECK_THROWS_AS(build_schedule(0), ValidationError);
  CHECK_THROWS_AS(build_schedule(4, 1.0, 1.0), ValidationError);
  CHECK_THROWS_AS(build_schedule(4, 0.1, 1.0, 0.0), ValidationError);
}

TEST_CASE("schedule matches the rho-warped ladder") {
  const int n = 5;
  const auto s = build_schedule(n, 0.002, 80.0, 7.0);
  for (int i = 0; i < n; ++i) {
    const double a = std::pow(80.0, 1.0 / 7), b = std::pow(0.002, 1.0 / 7);
    const double expect = std::pow(a + i / double(n - 1) * (b - a), 7.0);
    CHECK(s.levels[i] == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("property: random valid schedules are strictly decreasing and end at 0") {
  Rng rng(11);
  for (int trial = 0; trial < 500; ++trial) {
    const int n = 1 + static_cast<int>(rng.uniform_index(200));
    const double smin = std::exp(rng.uniform(std::log(1e-4), std::log(1.0)));
    const double smax = smin * std::exp(rng.uniform(0.1, 12.0));
    const double rho = rng.uniform(0.5, 12.0);
    const auto s = build_schedule(n, smin, smax, rho);
    REQUIRE(static_cast<int>(s.levels.size()) == n + 1);
    CHECK(s.levels.front() == smax);
    CHECK(s.levels.back() == 0.0);
    for (int i = 0; i < n; ++i) CHECK(s.levels[i] > s.levels[i + 1]);
  }
}

TEST_CASE("training sigma: median of the log-normal and positivity") {
  Rng rng(3);
  TrainingSigmaDist dist;
  std::vector<double> draws(20001);
  for (double& d : draws) {
    d = sample_training_sigma(rng, dist);
    REQUIRE(d > 0.0);
  }
  std::nth_element(draws.begin(), draws.begin() + 10000, draws.end());
  // e^-1.2 = 0.301194; 2% band covers the Monte-Carlo error of the median
  CHECK(draws[10000] == doctest::Approx(std::exp(-1.2)).epsilon(0.02));

  TrainingSigmaDist narrow{-1.2, 1e-9};
  for (int i = 0; i < 100; ++i)
    CHECK(sample_training_sigma(rng, narrow) == doctest::Approx(std::exp(-1.2)).epsilon(1e-6));
}

TEST_CASE("denoise with a zero network keeps only the skip term") {
  RawNetwork zero = [](const VideoD& x, double) { return VideoD(x.shape()); };
  VideoD x(2, 3, 3);
  for (std::size_t i = 0; i < x.size(); ++i) x.data[i] = 0.1 * i - 0.5;
  const auto d = denoise(zero, x, 0.5, {0.5});
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(d.data[i] == doctest::Approx(0.5 * x.data[i]));

  // small sigma: D -> x for a bounded F
  RawNetwork ones = [](const VideoD& x, double) { return VideoD(x.shape(), 1.0); };
  const auto near = denoise(ones, x, 1e-9, {0.5});
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(near.data[i] == doctest::Approx(x.data[i]).epsilon(1e-7));
}

TEST_CASE("denoise is exact for an inverted network") {
  VideoD x(1, 2, 2), y(1, 2, 2);
  for (std::size_t i = 0; i < 4; ++i) {
    x.data[i] = 0.3 * i - 0.4;
    y.data[i] = -0.2 + 0.25 * i;
  }
  const double sigma = 1.7;
  const DataStats st{0.5};
  const auto p = precondition_coeffs(sigma, st);
  // F(c_in x) = (y - c_skip x) / c_out, recovering x from its scaled input
  RawNetwork inv = [&](const VideoD& xin, double) {
    VideoD out(xin.shape());
    for (std::size_t i = 0; i < xin.size(); ++i) {
      const double xo = xin.data[i] / p.c_in;
      out.data[i] = (y.data[i] - p.c_skip * xo) / p.c_out;
    }
    return out;
  };
  const auto d = denoise(inv, x, sigma, st);
  for (std::size_t i = 0; i < 4; ++i) CHECK(d.data[i] == doctest::Approx(y.data[i]).epsilon(1e-12));
}

TEST_CASE("denoise is linear in the network output") {
  VideoD x(1, 1, 3);
  x.data = {0.2, -0.7, 1.1};
  auto f1 = [](const VideoD& v, double) { VideoD o = v; for (double& e : o.data) e = std::sin(3 * e); return o; };
  auto f2 = [](const VideoD& v, double) { VideoD o = v; for (double& e : o.data) e = e * e; return o; };
  RawNetwork sum = [&](const VideoD& v, double c) {
    VideoD a = f1(v, c), b = f2(v, c);
    for (std::size_t i = 0; i < a.size(); ++i) a.data[i] = 2.0 * a.data[i] - 0.5 * b.data[i];
    return a;
  };
  const double s = 0.8;
  const DataStats st{0.5};
  const auto p = precondition_coeffs(s, st);
  const auto d = denoise(sum, x, s, st);
  const auto d1 = denoise(f1, x, s, st);
  const auto d2 = denoise(f2, x, s, st);
  for (std::size_t i = 0; i < 3; ++i) {
    // D(2F1 - 0.5F2) = c_skip x + 2(D1 - c_skip x) - 0.5(D2 - c_skip x)
    const double cx = p.c_skip * x.data[i];
    CHECK(d.data[i] == doctest::Approx(cx + 2 * (d1.data[i] - cx) - 0.5 * (d2.data[i] - cx)));
  }
}

TEST_CASE("denoise rejects shape mismatches and non-finite input") {
  RawNetwork bad = [](const VideoD&, double) { return VideoD(1, 1, 1); };
  CHECK_THROWS_AS(denoise(bad, VideoD(2, 2, 2), 1.0, {0.5}), ValidationError);
  VideoD nanv(1, 1, 2);
  nanv.data[0] = std::nan("");
  RawNetwork zero = [](const VideoD& x, double) { return VideoD(x.shape()); };
  CHECK_THROWS_AS(denoise(zero, nanv, 1.0, {0.5}), NumericalError);
}

TEST_CASE("denoising loss: zero network on zero video equals c_skip(1)^2") {
  RawNetwork zero = [](const VideoD& x, double) { return VideoD(x.shape()); };
  Rng rng(5);
  VideoD y(16, 32, 32);  // 16384 elements
  double acc = 0;
  const int reps = 20;
  for (int r = 0; r < reps; ++r) acc += denoising_loss(zero, y, 1.0, rng, {0.5});
  // c_skip(1) = 0.25/1.25 = 0.2 -> E = 0.04; MC standard error ~ 0.04*sqrt(2/327680)
  CHECK(acc / reps == doctest::Approx(0.04).epsilon(0.01));
}

TEST_CASE("denoising loss is zero for a perfect denoiser and never negative") {
  VideoD y(2, 4, 4);
  for (std::size_t i = 0; i < y.size(); ++i) y.data[i] = std::sin(0.3 * i);
  const DataStats st{0.5};
  const double sigma = 0.9;
  const auto p = precondition_coeffs(sigma, st);
  RawNetwork oracle = [&](const VideoD& xin, double) {
    VideoD out(xin.shape());
    for (std::size_t i = 0; i < xin.size(); ++i)
      out.data[i] = (y.data[i] - p.c_skip * xin.data[i] / p.c_in) / p.c_out;
    return out;
  };
  Rng rng(9);
  CHECK(denoising_loss(oracle, y, sigma, rng, st) == doctest::Approx(0.0).epsilon(1e-20));
  RawNetwork zero = [](const VideoD& x, double) { return VideoD(x.shape()); };
  for (int i = 0; i < 20; ++i) CHECK(denoising_loss(zero, y, 0.1 + i, rng, st) >= 0.0);
}

TEST_CASE("analytic Gaussian denoiser") {
  GaussianDenoiser g(0.0, 1.0);
  CHECK(g(2.0, 1.0) == doctest::Approx(1.0));
  CHECK(g(2.0, 0.0) == 2.0);
  CHECK(g(2.0, 1e8) == doctest::Approx(0.0).epsilon(1e-12));
  GaussianDenoiser h(0.3, 0.5);
  CHECK(h(-4.0, INFINITY) == 0.3);
}

TEST_CASE("Gaussian denoiser satisfies the score identity") {
  GaussianDenoiser g(0.3, 0.5);
  Rng rng(2);
  for (int i = 0; i < 1000; ++i) {
    const double x = rng.normal(0.0, 3.0);
    const double s = std::exp(rng.uniform(std::log(1e-2), std::log(50.0)));
    const double via_d = (g(x, s) - x) / (s * s);
    const double exact = g.score(x, s);
    CHECK(std::abs(via_d - exact) <= 1e-10 * std::max(1e-300, std::abs(exact)));
  }
}
