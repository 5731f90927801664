#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <thread>
#include <vector>

namespace haco {

// Runs fn(i) for i in [0, n) across up to max_threads workers. Each index is
// handled exactly once and writers must target disjoint slots, which keeps
// results identical for any thread count. max_threads <= 1 runs inline.
template <typename Fn>
void parallel_for(size_t n, int max_threads, Fn&& fn) {
  if (n == 0) return;
  const size_t hw = std::max<size_t>(1, std::thread::hardware_concurrency());
  size_t workers = max_threads <= 1 ? 1 : std::min<size_t>({static_cast<size_t>(max_threads), hw, n});
  if (workers == 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        const size_t i = next.fetch_add(1, std::memory_order_relaxed);
        if (i >= n) return;
        fn(i);
      }
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace haco
