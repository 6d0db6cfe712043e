// SPDX-License-Identifier: Apache-2.0
#pragma once

// Sampler self-checks against the closed-form Gaussian denoiser.

#include <cstdint>
#include <string>
#include <vector>

#include "echoedm/sampler.hpp"

namespace echoedm {

/// Two-sided Kolmogorov-Smirnov statistic of `xs` against N(mu, s^2).
double ks_statistic_normal(std::vector<double> xs, double mu, double s);

struct OracleCheckOptions {
  int n_steps = 32;
  double s_churn = 0.0;
  int samples = 10000;
  double mu = 0.3;
  double s = 0.5;
  std::uint64_t seed = 0;
  double mean_tol = 0.02;     ///< absolute
  double std_rel_tol = 0.02;  ///< relative to s
  double ks_tol = 0.03;
};

struct OracleCheckReport {
  OracleCheckOptions options;
  double mean = 0.0;
  double std = 0.0;
  double mean_err = 0.0;
  double std_rel_err = 0.0;
  double ks = 0.0;
  long evaluations = 0;  ///< denoiser calls for one sample
  bool pass = false;
  std::string diagnostics;
};

/// Draws `samples` independent scalars with the stochastic sampler and the
/// analytic Gaussian denoiser, unclamped, and compares them with the target.
OracleCheckReport run_oracle_check(const OracleCheckOptions& opts);

/// Deterministic sampling (no churn) from fixed x_0 values; the reference is
/// an Euler integration of the same ODE with `reference_steps` steps.
struct ConvergenceReport {
  std::vector<int> n_steps;
  std::vector<double> errors;  ///< max abs endpoint error per N
  std::vector<double> orders;  ///< log2(e_N / e_2N)
};

ConvergenceReport ode_convergence(const std::vector<int>& n_steps, double mu = 0.3,
                                  double s = 0.5, int reference_steps = 10000,
                                  std::uint64_t seed = 0);

/// Plain Euler integration of the probability-flow ODE over a schedule.
VideoD euler_integrate(const Denoiser& D, VideoD x, const SigmaSchedule& schedule);

}  // namespace echoedm
