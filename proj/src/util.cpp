#include "vpr/util.hpp"

#include <algorithm>

namespace vpr {

int& worker_threads() {
  static int n = 0;
  return n;
}

namespace {
thread_local bool t_inside_worker = false;
}

void parallel_for(int n, const std::function<void(int)>& fn) {
  if (n <= 0) return;
  int workers = worker_threads();
  if (workers <= 0) workers = static_cast<int>(std::thread::hardware_concurrency());
  if (workers <= 0) workers = 1;
  workers = std::min(workers, n);

  // nested calls run sequentially instead of oversubscribing
  if (workers == 1 || t_inside_worker) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }

  const int block = (n + workers - 1) / workers;
  std::vector<std::thread> threads;
  threads.reserve(workers);
  for (int w = 0; w < workers; ++w) {
    const int lo = w * block;
    const int hi = std::min(n, lo + block);
    if (lo >= hi) break;
    threads.emplace_back([lo, hi, &fn] {
      t_inside_worker = true;
      for (int i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& t : threads) t.join();
}

}  // namespace vpr
