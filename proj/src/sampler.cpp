// SPDX-License-Identifier: Apache-2.0
#include "echoedm/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace echoedm {

void SamplerConstants::validate() const {
  if (!(s_churn >= 0.0)) throw ValidationError("sampler: s_churn must be >= 0");
  if (!(s_noise > 0.0)) throw ValidationError("sampler: s_noise must be > 0");
  if (!(s_tmin >= 0.0)) throw ValidationError("sampler: s_tmin must be >= 0");
  if (!(s_tmin < s_tmax)) throw ValidationError("sampler: need s_tmin < s_tmax");
}

double churn_gamma(double t, int n_steps, const SamplerConstants& k) {
  if (n_steps < 1) throw ValidationError("churn_gamma: n_steps must be >= 1");
  if (t < k.s_tmin || t > k.s_tmax) return 0.0;
  return std::min(k.s_churn / n_steps, std::numbers::sqrt2 - 1.0);
}

std::pair<VideoD, double> churn_inflate(const VideoD& x, double t, double gamma,
                                        const SamplerConstants& k, Rng& rng) {
  if (!(gamma >= 0.0)) throw ValidationError("churn_inflate: gamma must be >= 0");
  if (gamma == 0.0) return {x, t};
  const double t_hat = (gamma + 1.0) * t;
  const double scale = std::sqrt(t_hat * t_hat - t * t) * k.s_noise;
  VideoD out = x;
  for (double& v : out.data) v += scale * rng.normal();
  return {std::move(out), t_hat};
}

VideoD heun_step(const Denoiser& D, const VideoD& x_hat, double t_hat,
                 double t_next, bool is_last) {
  if (!(t_hat > 0.0)) throw ValidationError("heun_step: t_hat must be > 0");
  if (!is_last && !(t_next > 0.0))
    throw ValidationError("heun_step: correction needs t_next > 0");

  const VideoD denoised = D(x_hat, t_hat);
  if (denoised.shape() != x_hat.shape())
    throw ValidationError("heun_step: denoiser changed the shape");
  const double h = t_next - t_hat;
  const std::size_t n = x_hat.size();

  std::vector<double> slope(n);
  VideoD next(x_hat.shape());
  for (std::size_t i = 0; i < n; ++i) {
    slope[i] = (x_hat.data[i] - denoised.data[i]) / t_hat;
    next.data[i] = x_hat.data[i] + (h / t_hat) * (x_hat.data[i] - denoised.data[i]);
  }
  if (is_last) return next;

  const VideoD denoised2 = D(next, t_next);
  for (std::size_t i = 0; i < n; ++i) {
    const double slope2 = (next.data[i] - denoised2.data[i]) / t_next;
    next.data[i] = x_hat.data[i] + h * 0.5 * (slope[i] + slope2);
  }
  return next;
}

VideoD sample_from(const Denoiser& D, VideoD x, const SigmaSchedule& schedule,
                   const SamplerConstants& k, Rng& rng, SampleOptions opts) {
  k.validate();
  const int n = schedule.n_steps;
  if (n < 1 || static_cast<int>(schedule.levels.size()) != n + 1)
    throw ValidationError("sample: malformed schedule");

  for (int i = 0; i < n; ++i) {
    const double t = schedule.levels[i];
    const double t_next = schedule.levels[i + 1];
    const double gamma = churn_gamma(t, n, k);
    auto [x_hat, t_hat] = churn_inflate(x, t, gamma, k, rng);
    x = heun_step(D, x_hat, t_hat, t_next, i == n - 1);
    if (!x.all_finite())
      throw NumericalError("sample: non-finite state after step " +
                           std::to_string(i));
  }
  if (opts.clamp_output)
    for (double& v : x.data) v = std::clamp(v, -1.0, 1.0);
  return x;
}

VideoD sample(const Denoiser& D, VideoShape shape, const SigmaSchedule& schedule,
              const SamplerConstants& k, Rng& rng, SampleOptions opts) {
  if (schedule.levels.empty()) throw ValidationError("sample: empty schedule");
  VideoD x(shape);
  const double t0 = schedule.levels[0];
  for (double& v : x.data) v = t0 * rng.normal();
  return sample_from(D, std::move(x), schedule, k, rng, opts);
}

}  // namespace echoedm
