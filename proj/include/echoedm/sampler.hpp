// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <utility>

#include "echoedm/edm.hpp"
#include "echoedm/rng.hpp"
#include "echoedm/video.hpp"

namespace echoedm {

struct SamplerConstants {
  double s_churn = 0.0;
  double s_noise = 1.003;
  double s_tmin = 0.05;
  double s_tmax = 50.0;

  void validate() const;
};

/// min(S_churn / N, sqrt(2) - 1) inside [S_tmin, S_tmax], else 0.
double churn_gamma(double t, int n_steps, const SamplerConstants& k);

/// Raises the noise level to t_hat = (gamma + 1) t by adding fresh noise
/// with std sqrt(t_hat^2 - t^2) * S_noise. gamma == 0 returns the inputs
/// unchanged without touching the rng.
std::pair<VideoD, double> churn_inflate(const VideoD& x, double t, double gamma,
                                        const SamplerConstants& k, Rng& rng);

/// One Euler step from t_hat to t_next, followed by the trapezoidal
/// correction unless `is_last`.
VideoD heun_step(const Denoiser& D, const VideoD& x_hat, double t_hat,
                 double t_next, bool is_last);

struct SampleOptions {
  /// Clamp the final sample to [-1, 1]; intermediates are never clamped.
  bool clamp_output = true;
};

/// Full stochastic sampler: x_0 ~ N(0, t_0^2 I), then N churn + Heun steps.
VideoD sample(const Denoiser& D, VideoShape shape, const SigmaSchedule& schedule,
              const SamplerConstants& k, Rng& rng, SampleOptions opts = {});

/// Same, starting from a caller-supplied x_0.
VideoD sample_from(const Denoiser& D, VideoD x0, const SigmaSchedule& schedule,
                   const SamplerConstants& k, Rng& rng, SampleOptions opts = {});

}  // namespace echoedm
