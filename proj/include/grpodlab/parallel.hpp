#pragma once

#include <atomic>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace grpodlab {

// Thread budget: explicit request wins, then GRPO_D_LAB_THREADS, then cores.
inline int resolve_threads(int requested = 0) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("GRPO_D_LAB_THREADS")) {
    int n = std::atoi(env);
    if (n > 0) return n;
  }
  unsigned hc = std::thread::hardware_concurrency();
  return hc > 0 ? static_cast<int>(hc) : 1;
}

// Fork-join loop over [0, n). Each index is processed exactly once; callers
// write results into per-index slots, so output is independent of the thread
// count and interleaving. The first worker exception is rethrown after join.
template <class F>
void parallel_for(int n, int threads, F&& body) {
  if (n <= 0) return;
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (int i = 0; i < n; ++i) body(i);
    return;
  }
  std::exception_ptr error;
  std::atomic<bool> failed{false};
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(threads));
  for (int tid = 0; tid < threads; ++tid) {
    pool.emplace_back([tid, threads, n, &body, &error, &failed] {
      try {
        for (int i = tid; i < n; i += threads) body(i);
      } catch (...) {
        if (!failed.exchange(true)) error = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace grpodlab
