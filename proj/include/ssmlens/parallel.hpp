// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdlib>
#include <thread>
#include <vector>

namespace ssmlens {

// Worker count: SSMLENS_THREADS caps it, 0 or unset means hardware default.
inline int thread_budget() {
  int hw = static_cast<int>(std::thread::hardware_concurrency());
  if (hw < 1) hw = 1;
  if (const char* env = std::getenv("SSMLENS_THREADS")) {
    const int cap = std::atoi(env);
    if (cap > 0 && cap < hw) return cap;
  }
  return hw;
}

// Runs fn(i) for i in [0, n). Tasks must be independent; any reduction over
// results happens in the caller, in index order, so the outcome does not
// depend on scheduling.
template <typename Fn>
void parallel_for(int n, Fn&& fn) {
  const int workers = std::min(n, thread_budget());
  if (workers <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&fn, w, n, workers] {
      for (int i = w; i < n; i += workers) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace ssmlens
