#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace triage {

namespace detail {
inline std::atomic<std::size_t>& thread_cap() {
  static std::atomic<std::size_t> cap{std::max<std::size_t>(1, std::thread::hardware_concurrency())};
  return cap;
}
inline thread_local bool in_parallel_region = false;
}  // namespace detail

/// Caps the number of worker threads used by parallel_for. 0 means hardware concurrency.
inline void set_max_threads(std::size_t n) {
  if (n == 0) n = std::max<std::size_t>(1, std::thread::hardware_concurrency());
  detail::thread_cap().store(n);
}

inline std::size_t max_threads() { return detail::thread_cap().load(); }

/// Runs body(i) for i in [0, n). Work is split into contiguous blocks, one per worker.
/// Callers must make body(i) write only to slot i so results do not depend on the
/// thread count. Nested calls run serially on the calling thread.
template <typename Body>
void parallel_for(std::size_t n, Body&& body) {
  const std::size_t workers = std::min(max_threads(), n);
  if (workers <= 1 || detail::in_parallel_region) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t begin = w * chunk;
    const std::size_t end = std::min(n, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&, begin, end] {
      detail::in_parallel_region = true;
      try {
        for (std::size_t i = begin; i < end; ++i) body(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
      }
      detail::in_parallel_region = false;
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace triage
