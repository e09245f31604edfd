#pragma once

#include <cstddef>
#include <exception>
#include <mutex>

#ifdef CONBAT_HAVE_OPENMP
#include <omp.h>
#endif

namespace conbat {

/// Caps the worker count used by every parallel section. 0 = all cores.
void set_thread_count(int threads);
int thread_count();

/// Runs fn(i) for i in [0, n). Results must be written to per-index slots
/// so output does not depend on scheduling. The first exception thrown by
/// any iteration is rethrown on the calling thread.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  std::exception_ptr failure;
  std::mutex failure_mutex;
#ifdef CONBAT_HAVE_OPENMP
#pragma omp parallel for schedule(dynamic, 1) num_threads(thread_count())
#endif
  for (long long i = 0; i < static_cast<long long>(n); ++i) {
    try {
      fn(static_cast<std::size_t>(i));
    } catch (...) {
      std::lock_guard lock(failure_mutex);
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
}

}  // namespace conbat
