// Minimal fork-join helper. Work items are independent and carry their own RNG
// streams, so the partition never affects results.
#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace bflow {

namespace detail {
inline std::atomic<unsigned>& worker_setting() {
  static std::atomic<unsigned> n{0};
  return n;
}
}  // namespace detail

/// Worker count used by parallel_for. 0 means hardware concurrency.
inline void set_worker_count(unsigned n) { detail::worker_setting() = n; }

inline unsigned worker_count() {
  unsigned n = detail::worker_setting();
  if (n == 0) n = std::max(1u, std::thread::hardware_concurrency());
  return n;
}

/// Calls body(begin, end) on disjoint blocks covering [0, n). Blocks are
/// handed out dynamically; the first exception thrown by any block is
/// rethrown on the calling thread.
template <class Body>
void parallel_for(std::size_t n, std::size_t block, Body&& body) {
  if (n == 0) return;
  block = std::max<std::size_t>(block, 1);
  const std::size_t n_blocks = (n + block - 1) / block;
  const unsigned workers = static_cast<unsigned>(std::min<std::size_t>(worker_count(), n_blocks));
  if (workers <= 1) {
    for (std::size_t b = 0; b < n_blocks; ++b) body(b * block, std::min(n, (b + 1) * block));
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto run = [&] {
    for (;;) {
      const std::size_t b = next.fetch_add(1);
      if (b >= n_blocks) return;
      try {
        body(b * block, std::min(n, (b + 1) * block));
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        next = n_blocks;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  for (unsigned w = 1; w < workers; ++w) pool.emplace_back(run);
  run();
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace bflow
