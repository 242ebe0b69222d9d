#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <thread>
#include <vector>

namespace moescope {

/// Worker cap for parallel sections: the MOE_METRICS_THREADS environment
/// variable when set to a positive integer, hardware concurrency otherwise
/// (unset or 0 means auto).
inline unsigned thread_cap() {
  unsigned hw = std::thread::hardware_concurrency();
  if (hw == 0) hw = 1;
  if (const char* env = std::getenv("MOE_METRICS_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && v > 0) return static_cast<unsigned>(v);
  }
  return hw;
}

namespace detail {

/// Runs fn(i) for every i in [0, count) across up to thread_cap() workers.
/// Results must go to per-i slots; with that discipline the outcome does not
/// depend on the worker count. The first exception thrown is rethrown.
template <typename Fn>
void parallel_iterations(std::int64_t count, Fn&& fn) {
  if (count <= 0) return;
  const unsigned workers = static_cast<unsigned>(std::min<std::int64_t>(
      static_cast<std::int64_t>(thread_cap()), count));
  if (workers <= 1) {
    for (std::int64_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (unsigned w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::int64_t i = w; i < count; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (std::thread& t : pool) t.join();
  for (const std::exception_ptr& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace detail
}  // namespace moescope
