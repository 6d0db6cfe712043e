// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <exception>
#include <mutex>

namespace echoedm::detail {

/// Runs body(i) for i in [0, n) across OpenMP threads. The first exception
/// stops further work and is rethrown on the calling thread.
template <class F>
void parallel_for_dynamic(int n, F&& body) {
  std::exception_ptr error;
  std::mutex mu;
  bool failed = false;
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i) {
    bool skip;
#pragma omp atomic read
    skip = failed;
    if (skip) continue;
    try {
      body(i);
    } catch (...) {
      std::lock_guard<std::mutex> lock(mu);
      if (!error) error = std::current_exception();
#pragma omp atomic write
      failed = true;
    }
  }
  if (error) std::rethrow_exception(error);
}

}  // namespace echoedm::detail
