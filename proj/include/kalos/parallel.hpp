#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace kalos {

/// Process-wide worker count used when a call passes jobs = 0. Defaults to 1.
inline std::atomic<unsigned>& default_jobs_slot() {
  static std::atomic<unsigned> jobs{1};
  return jobs;
}
inline void set_default_jobs(unsigned jobs) { default_jobs_slot() = std::max(1u, jobs); }
inline unsigned default_jobs() { return default_jobs_slot().load(); }

/// Runs fn(i) for i in [0, n). Work is claimed dynamically, so callers must
/// write results into per-index slots; the first exception is rethrown.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn, unsigned jobs = 0) {
  if (jobs == 0) jobs = default_jobs();
  const std::size_t workers = std::min<std::size_t>(jobs, n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto body = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        next = n;
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(body);
  body();
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace kalos
