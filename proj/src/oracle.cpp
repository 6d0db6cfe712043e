// SPDX-License-Identifier: Apache-2.0
#include "echoedm/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace echoedm {

double ks_statistic_normal(std::vector<double> xs, double mu, double s) {
  if (xs.empty()) throw ValidationError("ks_statistic_normal: no samples");
  std::sort(xs.begin(), xs.end());
  const double n = static_cast<double>(xs.size());
  double d = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double cdf = 0.5 * std::erfc(-(xs[i] - mu) / (s * std::numbers::sqrt2));
    d = std::max({d, (i + 1) / n - cdf, cdf - i / n});
  }
  return d;
}

OracleCheckReport run_oracle_check(const OracleCheckOptions& opts) {
  if (opts.n_steps < 1) throw ValidationError("oracle-check: n_steps must be >= 1");
  if (opts.samples < 2) throw ValidationError("oracle-check: need at least 2 samples");
  if (!(opts.s > 0.0)) throw ValidationError("oracle-check: s must be > 0");

  OracleCheckReport rep;
  rep.options = opts;
  const GaussianDenoiser g(opts.mu, opts.s);
  long calls = 0;
  Denoiser D = [&](const VideoD& x, double sigma) {
    ++calls;
    return g(x, sigma);
  };
  SamplerConstants k;
  k.s_churn = opts.s_churn;
  Rng rng(opts.seed);
  const auto schedule = build_schedule(opts.n_steps);
  // one element per independent draw; the denoiser acts elementwise
  const VideoD out = sample(D, {1, 1, opts.samples}, schedule, k, rng, {.clamp_output = false});
  rep.evaluations = calls;

  double sum = 0.0;
  for (double v : out.data) sum += v;
  rep.mean = sum / out.size();
  double ss = 0.0;
  for (double v : out.data) ss += (v - rep.mean) * (v - rep.mean);
  rep.std = std::sqrt(ss / (out.size() - 1));
  rep.mean_err = rep.mean - opts.mu;
  rep.std_rel_err = (rep.std - opts.s) / opts.s;
  rep.ks = ks_statistic_normal(out.data, opts.mu, opts.s);

  std::ostringstream diag;
  if (std::abs(rep.mean_err) >= opts.mean_tol)
    diag << "mean error " << rep.mean_err << " exceeds " << opts.mean_tol << "; ";
  if (std::abs(rep.std_rel_err) >= opts.std_rel_tol)
    diag << "relative std error " << rep.std_rel_err << " exceeds " << opts.std_rel_tol << "; ";
  if (rep.ks >= opts.ks_tol) diag << "KS statistic " << rep.ks << " exceeds " << opts.ks_tol << "; ";
  rep.diagnostics = diag.str();
  rep.pass = rep.diagnostics.empty();
  return rep;
}

VideoD euler_integrate(const Denoiser& D, VideoD x, const SigmaSchedule& schedule) {
  for (int i = 0; i < schedule.n_steps; ++i) {
    const double t = schedule.levels[i], t_next = schedule.levels[i + 1];
    const VideoD d = D(x, t);
    for (std::size_t j = 0; j < x.size(); ++j) x.data[j] += (t_next - t) * (x.data[j] - d.data[j]) / t;
  }
  return x;
}

ConvergenceReport ode_convergence(const std::vector<int>& n_steps, double mu, double s,
                                  int reference_steps, std::uint64_t seed) {
  const GaussianDenoiser g(mu, s);
  const Denoiser D = g.as_denoiser();
  const auto ref_sched = build_schedule(reference_steps);
  Rng rng(seed);
  VideoD x0(1, 1, 64);
  for (double& v : x0.data) v = ref_sched.levels[0] * rng.normal();
  const VideoD ref = euler_integrate(D, x0, ref_sched);

  ConvergenceReport rep;
  SamplerConstants k;  // no churn: no rng draws after x_0
  for (int n : n_steps) {
    Rng unused(0);
    const VideoD out = sample_from(D, x0, build_schedule(n), k, unused, {.clamp_output = false});
    double e = 0.0;
    for (std::size_t j = 0; j < out.size(); ++j) e = std::max(e, std::abs(out.data[j] - ref.data[j]));
    rep.n_steps.push_back(n);
    rep.errors.push_back(e);
  }
  for (std::size_t i = 0; i + 1 < rep.errors.size(); ++i)
    rep.orders.push_back(std::log2(rep.errors[i] / rep.errors[i + 1]));
  return rep;
}

}  // namespace echoedm
