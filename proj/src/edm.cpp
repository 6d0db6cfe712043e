// SPDX-License-Identifier: Apache-2.0
#include "echoedm/edm.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace echoedm {

Precond precondition_coeffs(double sigma, const DataStats& stats) {
  if (!(sigma >= 0.0) || !std::isfinite(sigma))
    throw ValidationError("precondition_coeffs: sigma must be finite and >= 0");
  if (!(stats.sigma_q > 0.0))
    throw ValidationError("precondition_coeffs: sigma_q must be > 0");
  const double sq2 = stats.sigma_q * stats.sigma_q;
  const double total = sigma * sigma + sq2;
  const double root = std::sqrt(total);
  Precond p;
  p.c_skip = sq2 / total;
  p.c_out = sigma * stats.sigma_q / root;
  p.c_in = 1.0 / root;
  p.c_noise = sigma > 0.0 ? std::log(sigma) / 4.0
                          : std::numeric_limits<double>::quiet_NaN();
  return p;
}

double c_noise_of(double sigma) {
  if (!(sigma > 0.0) || !std::isfinite(sigma))
    throw ValidationError("c_noise: sigma must be > 0");
  return std::log(sigma) / 4.0;
}

SigmaSchedule build_schedule(int n_steps, double sigma_min, double sigma_max,
                             double rho) {
  if (n_steps < 1) throw ValidationError("build_schedule: n_steps must be >= 1");
  if (!(sigma_min > 0.0) || !(sigma_max > sigma_min))
    throw ValidationError("build_schedule: need sigma_max > sigma_min > 0");
  if (!(rho > 0.0)) throw ValidationError("build_schedule: rho must be > 0");

  SigmaSchedule s;
  s.sigma_min = sigma_min;
  s.sigma_max = sigma_max;
  s.rho = rho;
  s.n_steps = n_steps;
  s.levels.resize(n_steps + 1);
  if (n_steps == 1) {
    s.levels[0] = sigma_max;
  } else {
    const double hi = std::pow(sigma_max, 1.0 / rho);
    const double lo = std::pow(sigma_min, 1.0 / rho);
    for (int i = 0; i < n_steps; ++i) {
      const double frac = static_cast<double>(i) / (n_steps - 1);
      s.levels[i] = std::pow(hi + frac * (lo - hi), rho);
    }
    // pin the endpoints exactly
    s.levels[0] = sigma_max;
    s.levels[n_steps - 1] = sigma_min;
  }
  s.levels[n_steps] = 0.0;
  return s;
}

double sample_training_sigma(Rng& rng, const TrainingSigmaDist& dist) {
  return std::exp(rng.normal(dist.log_mean, dist.log_std));
}

VideoD denoise(const RawNetwork& net, const VideoD& x, double sigma,
               const DataStats& stats) {
  if (!(sigma > 0.0)) throw ValidationError("denoise: sigma must be > 0");
  if (!x.all_finite()) throw NumericalError("denoise: non-finite input");
  const Precond p = precondition_coeffs(sigma, stats);
  VideoD scaled = x;
  for (double& v : scaled.data) v *= p.c_in;
  VideoD f = net(scaled, p.c_noise);
  if (f.shape() != x.shape())
    throw ValidationError("denoise: network output shape " + f.shape().str() +
                          " does not match input " + x.shape().str());
  VideoD out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i)
    out.data[i] = p.c_skip * x.data[i] + p.c_out * f.data[i];
  if (!out.all_finite()) throw NumericalError("denoise: non-finite output");
  return out;
}

double denoising_loss(const RawNetwork& net, const VideoD& y, double sigma,
                      Rng& rng, const DataStats& stats) {
  if (!(sigma > 0.0)) throw ValidationError("denoising_loss: sigma must be > 0");
  VideoD noisy = y;
  for (double& v : noisy.data) v += sigma * rng.normal();
  const VideoD d = denoise(net, noisy, sigma, stats);
  double acc = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double e = d.data[i] - y.data[i];
    acc += e * e;
  }
  const double loss = acc / static_cast<double>(y.size());
  if (!std::isfinite(loss)) throw NumericalError("denoising_loss: non-finite loss");
  return loss;
}

GaussianDenoiser::GaussianDenoiser(std::vector<double> mu, double s)
    : mu_(std::move(mu)), s_(s) {
  if (!(s > 0.0)) throw ValidationError("GaussianDenoiser: s must be > 0");
  if (mu_.empty()) throw ValidationError("GaussianDenoiser: empty mean");
}

double GaussianDenoiser::operator()(double x, double sigma,
                                    std::size_t index) const {
  const double m = mu_[mu_.size() == 1 ? 0 : index];
  if (std::isinf(sigma)) return m;
  const double s2 = s_ * s_;
  return m + s2 / (s2 + sigma * sigma) * (x - m);
}

VideoD GaussianDenoiser::operator()(const VideoD& x, double sigma) const {
  if (mu_.size() != 1 && mu_.size() != x.size())
    throw ValidationError("GaussianDenoiser: mean length does not match input");
  VideoD out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i)
    out.data[i] = (*this)(x.data[i], sigma, i);
  return out;
}

double GaussianDenoiser::score(double x, double sigma, std::size_t index) const {
  const double m = mu_[mu_.size() == 1 ? 0 : index];
  return -(x - m) / (s_ * s_ + sigma * sigma);
}

Denoiser GaussianDenoiser::as_denoiser() const {
  return [self = *this](const VideoD& x, double sigma) { return self(x, sigma); };
}

}  // namespace echoedm
