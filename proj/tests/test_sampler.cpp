// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <numbers>

#include "doctest.h"
#include "echoedm/oracle.hpp"
#include "echoedm/sampler.hpp"

using namespace echoedm;

namespace {

// Independent KS oracle: empirical CDF against the normal CDF from erf.
double ks_oracle(std::vector<double> xs, double mu, double s) {
  std::sort(xs.begin(), xs.end());
  double d = 0;
  const double n = xs.size();
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double z = (xs[i] - mu) / s;
    const double F = 0.5 * (1.0 + std::erf(z / std::sqrt(2.0)));
    d = std::max(d, std::max(std::abs((i + 1) / n - F), std::abs(F - i / n)));
  }
  return d;
}

}  // namespace

TEST_CASE("churn gamma") {
  SamplerConstants k;
  k.s_churn = 80;
  CHECK(churn_gamma(1.0, 32, k) == doctest::Approx(std::numbers::sqrt2 - 1).epsilon(1e-12));
  CHECK(churn_gamma(0.01, 32, k) == 0.0);
  CHECK(churn_gamma(60.0, 32, k) == 0.0);
  k.s_churn = 8;
  CHECK(churn_gamma(1.0, 32, k) == doctest::Approx(0.25));
  k.s_churn = 0;
  for (double t : {0.001, 0.05, 1.0, 50.0, 80.0}) CHECK(churn_gamma(t, 32, k) == 0.0);
}

TEST_CASE("sampler constants validation") {
  SamplerConstants k;
  k.s_tmin = 60;
  CHECK_THROWS_AS(k.validate(), ValidationError);
  SamplerConstants n;
  n.s_noise = 0;
  CHECK_THROWS_AS(n.validate(), ValidationError);
}

TEST_CASE("churn inflate with gamma 0 is the identity and draws nothing") {
  VideoD x(1, 2, 2);
  x.data = {0.1, -0.2, 0.3, 0.4};
  Rng a(7), b(7);
  auto [xh, th] = churn_inflate(x, 1.3, 0.0, {}, a);
  CHECK(th == 1.3);
  CHECK(xh.data == x.data);
  CHECK(a.next_u64() == b.next_u64());
}

TEST_CASE("churn inflate noise scale") {
  SamplerConstants k;
  Rng rng(1);
  VideoD x(1, 1, 100000);
  const double gamma = std::numbers::sqrt2 - 1;
  auto [xh, th] = churn_inflate(x, 1.0, gamma, k, rng);
  CHECK(th == doctest::Approx(std::numbers::sqrt2));
  double ss = 0;
  for (double v : xh.data) ss += v * v;
  // added std sqrt(2 - 1) * 1.003; std error of the std ~ 1.003/sqrt(2e5)
  CHECK(std::sqrt(ss / xh.size()) == doctest::Approx(1.003).epsilon(0.01));
}

TEST_CASE("churn inflate variance identity on a noisy input") {
  SamplerConstants k;
  Rng rng(2);
  VideoD x(1, 1, 100000);
  for (double& v : x.data) v = 2.0 * rng.normal();
  const double t = 3.0, gamma = 0.2;
  auto [xh, th] = churn_inflate(x, t, gamma, k, rng);
  auto var = [](const std::vector<double>& v) {
    double m = 0, s = 0;
    for (double e : v) m += e;
    m /= v.size();
    for (double e : v) s += (e - m) * (e - m);
    return s / (v.size() - 1);
  };
  const double expect = (th * th - t * t) * k.s_noise * k.s_noise;
  CHECK(var(xh.data) - var(x.data) == doctest::Approx(expect).epsilon(0.03));
}

TEST_CASE("heun step with a zero denoiser follows x proportional to t") {
  Denoiser zero = [](const VideoD& x, double) { return VideoD(x.shape()); };
  VideoD x(1, 1, 1, 4.0);
  CHECK(heun_step(zero, x, 2.0, 1.0, false).data[0] == doctest::Approx(2.0));
  CHECK(heun_step(zero, x, 2.0, 1.0, true).data[0] == doctest::Approx(2.0));
}

TEST_CASE("heun step with an identity denoiser has zero slope") {
  Denoiser ident = [](const VideoD& x, double) { return x; };
  VideoD x(1, 1, 3);
  x.data = {0.5, -1.0, 2.0};
  CHECK(heun_step(ident, x, 2.0, 1.0, false).data == x.data);
}

TEST_CASE("heun step refuses a correction at t = 0") {
  Denoiser zero = [](const VideoD& x, double) { return VideoD(x.shape()); };
  CHECK_THROWS_AS(heun_step(zero, VideoD(1, 1, 1), 1.0, 0.0, false), ValidationError);
}

TEST_CASE("two-step deterministic sample matches a fine Euler integration") {
  GaussianDenoiser g(0.3, 0.5);
  const Denoiser D = g.as_denoiser();
  const auto two = build_schedule(2, 1.5, 2.0, 7.0);
  REQUIRE(two.levels == std::vector<double>{2.0, 1.5, 0.0});
  Rng rng(0);
  // x_0 within three standard deviations of N(mu, s^2 + 2^2)
  for (double x0v : {0.9, -5.8, 6.4}) {
    const auto out = sample_from(D, VideoD(1, 1, 1, x0v), two, {}, rng, {.clamp_output = false});
    // 1e4 uniform Euler steps over [2, 1.5], then the same final step to 0
    double x = x0v, t = 2.0;
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
      const double tn = 2.0 - 0.5 * (i + 1) / n;
      x += (tn - t) * (x - g(x, t)) / t;
      t = tn;
    }
    x += (0.0 - 1.5) * (x - g(x, 1.5)) / 1.5;
    CHECK(std::abs(out.data[0] - x) < 1e-3);
  }
}

TEST_CASE("single step with a zero denoiser lands on 0") {
  Denoiser zero = [](const VideoD& x, double) { return VideoD(x.shape()); };
  Rng rng(3);
  const auto out = sample(zero, {2, 2, 2}, build_schedule(1), {}, rng);
  for (double v : out.data) CHECK(v == 0.0);
}

TEST_CASE("sampling is deterministic given the seed") {
  GaussianDenoiser g(0.1, 0.4);
  SamplerConstants k;
  k.s_churn = 40;
  Rng a(99), b(99), c(100);
  const auto s = build_schedule(12);
  const auto va = sample(g.as_denoiser(), {2, 4, 4}, s, k, a);
  const auto vb = sample(g.as_denoiser(), {2, 4, 4}, s, k, b);
  const auto vc = sample(g.as_denoiser(), {2, 4, 4}, s, k, c);
  CHECK(va.data == vb.data);
  CHECK(va.data != vc.data);
}

TEST_CASE("without churn the sampler draws nothing after x_0") {
  GaussianDenoiser g(0.1, 0.4);
  VideoD x0(1, 1, 5, 3.0);
  Rng a(1), b(2);
  const auto s = build_schedule(8);
  CHECK(sample_from(g.as_denoiser(), x0, s, {}, a).data ==
        sample_from(g.as_denoiser(), x0, s, {}, b).data);
}

TEST_CASE("denoiser is evaluated 2N - 1 times") {
  for (int n : {1, 2, 5, 32}) {
    long calls = 0;
    Denoiser D = [&](const VideoD& x, double) {
      ++calls;
      return x;
    };
    Rng rng(0);
    SamplerConstants k;
    k.s_churn = 10;
    sample(D, {1, 1, 1}, build_schedule(n), k, rng);
    CHECK(calls == 2 * n - 1);
  }
}

TEST_CASE("final clamp is applied only at the end") {
  Denoiser big = [](const VideoD& x, double) { return VideoD(x.shape(), 3.0); };
  Rng rng(0);
  const auto clamped = sample(big, {1, 1, 4}, build_schedule(4), {}, rng);
  for (double v : clamped.data) CHECK(v == 1.0);
  Rng rng2(0);
  const auto raw = sample(big, {1, 1, 4}, build_schedule(4), {}, rng2, {.clamp_output = false});
  for (double v : raw.data) CHECK(v == doctest::Approx(3.0));
}

TEST_CASE("non-finite state is reported with the step index") {
  Denoiser nan_at_small = [](const VideoD& x, double t) {
    return t < 1.0 ? VideoD(x.shape(), NAN) : x;
  };
  Rng rng(0);
  try {
    sample(nan_at_small, {1, 1, 1}, build_schedule(8), {}, rng);
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("step") != std::string::npos);
  }
}

TEST_CASE("Gaussian oracle without churn: moments and KS") {
  OracleCheckOptions o;
  o.seed = 17;
  const auto rep = run_oracle_check(o);
  CHECK(rep.evaluations == 63);
  CHECK(std::abs(rep.mean - 0.3) < 0.02);
  CHECK(std::abs(rep.std - 0.5) < 0.01);
  CHECK(rep.ks < 0.03);
  CHECK(rep.pass);

  // recompute KS from scratch on the same draws
  GaussianDenoiser g(0.3, 0.5);
  Rng rng(17);
  const auto v = sample(g.as_denoiser(), {1, 1, 10000}, build_schedule(32), {}, rng,
                        {.clamp_output = false});
  CHECK(ks_oracle(v.data, 0.3, 0.5) == doctest::Approx(rep.ks).epsilon(1e-12));
}

TEST_CASE("Gaussian oracle with churn: KS holds, std carries a step-size bias") {
  double prev_bias = 1.0;
  for (int n : {32, 64, 128}) {
    CAPTURE(n);
    OracleCheckOptions o;
    o.n_steps = n;
    o.s_churn = 80;
    o.seed = 5;
    o.samples = 40000;
    const auto rep = run_oracle_check(o);
    CHECK(std::abs(rep.mean - 0.3) < 0.02);
    CHECK(rep.ks < 0.03);
    // churn inflates the spread at coarse N; the excess shrinks with N
    CHECK(rep.std > 0.5);
    CHECK(rep.std - 0.5 < prev_bias);
    prev_bias = rep.std - 0.5;
  }
  CHECK(prev_bias < 0.01);
}

TEST_CASE("Gaussian oracle fails at N = 1") {
  OracleCheckOptions one;
  one.n_steps = 1;
  const auto rep = run_oracle_check(one);
  CHECK_FALSE(rep.pass);
  CHECK_FALSE(rep.diagnostics.empty());
}

TEST_CASE("ks statistic helper agrees with the oracle") {
  Rng rng(4);
  std::vector<double> xs(777);
  for (double& x : xs) x = rng.normal(1.0, 2.0);
  CHECK(ks_statistic_normal(xs, 1.0, 2.0) == doctest::Approx(ks_oracle(xs, 1.0, 2.0)).epsilon(1e-12));
  CHECK(ks_statistic_normal(xs, 3.0, 2.0) > 0.3);
}

TEST_CASE("deterministic sampler converges at second order") {
  const auto rep = ode_convergence({16, 32, 64});
  REQUIRE(rep.orders.size() == 2);
  for (double o : rep.orders) CHECK(o >= 1.8);
}
