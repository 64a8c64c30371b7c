#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace cruseg {

/// Worker count for internal parallel loops. CRUSEG_THREADS caps it; the
/// default is the hardware concurrency.
inline std::size_t thread_count() {
  std::size_t hw = std::max<std::size_t>(1, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("CRUSEG_THREADS")) {
    try {
      long v = std::stol(env);
      if (v >= 1) return std::min<std::size_t>(static_cast<std::size_t>(v), hw);
    } catch (...) {
    }
  }
  return hw;
}

/// Runs fn(i) for i in [begin, end). Indices are split into contiguous
/// chunks; each index is processed by exactly one thread, so results are
/// independent of the thread count as long as fn(i) only writes slot i.
template <class Fn>
void parallel_for(std::size_t begin, std::size_t end, Fn&& fn, std::size_t min_chunk = 1) {
  if (end <= begin) return;
  const std::size_t n = end - begin;
  std::size_t workers = std::min(thread_count(), (n + min_chunk - 1) / min_chunk);
  if (workers <= 1) {
    for (std::size_t i = begin; i < end; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 1; w < workers; ++w) {
    std::size_t lo = begin + w * chunk;
    std::size_t hi = std::min(end, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (std::size_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (std::size_t i = begin; i < std::min(end, begin + chunk); ++i) fn(i);
  for (auto& t : pool) t.join();
}

}  // namespace cruseg
