// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <vector>

#include "echoedm/rng.hpp"
#include "echoedm/video.hpp"

namespace echoedm {

/// Standard deviation of the normalized training data (sigma_q).
struct DataStats {
  double sigma_q = 0.5;
};

struct Precond {
  double c_skip;
  double c_out;
  double c_in;
  double c_noise;
};

/// Preconditioning coefficients. c_noise is NaN at sigma == 0, where it is
/// undefined; use c_noise_of() when it is actually needed.
Precond precondition_coeffs(double sigma, const DataStats& stats);
double c_noise_of(double sigma);

/// Noise-level ladder t_0 > t_1 > ... > t_N = 0.
struct SigmaSchedule {
  std::vector<double> levels;
  double sigma_min = 0.002;
  double sigma_max = 80.0;
  double rho = 7.0;
  int n_steps = 0;
};

SigmaSchedule build_schedule(int n_steps, double sigma_min = 0.002,
                             double sigma_max = 80.0, double rho = 7.0);

/// Log-normal distribution of training noise levels.
struct TrainingSigmaDist {
  double log_mean = -1.2;
  double log_std = 1.2;
};

double sample_training_sigma(Rng& rng, const TrainingSigmaDist& dist);

/// A denoiser D(x; sigma) with its conditioning already bound.
using Denoiser = std::function<VideoD(const VideoD& x, double sigma)>;

/// Raw network F evaluated on the preconditioned input c_in * x with
/// c_noise; conditioning is bound by the caller.
using RawNetwork = std::function<VideoD(const VideoD& x_in, double c_noise)>;

/// D = c_skip * x + c_out * F(c_in * x; c_noise).
VideoD denoise(const RawNetwork& net, const VideoD& x, double sigma,
               const DataStats& stats);

/// Adds N(0, sigma^2) noise to y, denoises and returns the per-element mean
/// squared error against y.
double denoising_loss(const RawNetwork& net, const VideoD& y, double sigma,
                      Rng& rng, const DataStats& stats);

/// Exact denoiser for data distributed as N(mu, s^2 I), elementwise:
/// D(x; sigma) = mu + s^2 / (s^2 + sigma^2) * (x - mu).
class GaussianDenoiser {
 public:
  GaussianDenoiser(std::vector<double> mu, double s);
  /// Same mean for every element.
  GaussianDenoiser(double mu, double s) : GaussianDenoiser(std::vector<double>{mu}, s) {}

  double operator()(double x, double sigma, std::size_t index = 0) const;
  VideoD operator()(const VideoD& x, double sigma) const;
  /// Score of the noise-convolved density, -(x - mu) / (s^2 + sigma^2).
  double score(double x, double sigma, std::size_t index = 0) const;

  Denoiser as_denoiser() const;

 private:
  std::vector<double> mu_;
  double s_;
};

}  // namespace echoedm
