#pragma once

// Deterministic parallel map-reduce over an index range. Work is split into
// contiguous chunks; per-chunk results are merged in chunk order, so the
// reduction is independent of thread scheduling.

#include <cstddef>
#include <functional>
#include <thread>
#include <vector>

namespace subtrace {

inline unsigned default_worker_count() {
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 4 : hw;
}

// Calls chunk_fn(begin, end, chunk_index) on disjoint ranges covering
// [0, n). Results must be written into per-chunk storage by the caller.
inline void parallel_chunks(std::size_t n, unsigned workers,
                            const std::function<void(std::size_t, std::size_t, std::size_t)>& chunk_fn,
                            std::size_t* out_chunk_count = nullptr) {
  if (workers == 0) workers = default_worker_count();
  if (n == 0) {
    if (out_chunk_count) *out_chunk_count = 0;
    return;
  }
  std::size_t chunk_count = std::min<std::size_t>(workers, n);
  if (out_chunk_count) *out_chunk_count = chunk_count;
  if (chunk_count == 1) {
    chunk_fn(0, n, 0);
    return;
  }
  std::vector<std::thread> threads;
  threads.reserve(chunk_count);
  std::size_t base = n / chunk_count, rem = n % chunk_count, start = 0;
  for (std::size_t c = 0; c < chunk_count; ++c) {
    std::size_t len = base + (c < rem ? 1 : 0);
    threads.emplace_back(chunk_fn, start, start + len, c);
    start += len;
  }
  for (auto& t : threads) t.join();
}

template <typename T, typename Fn>
std::vector<T> parallel_map(std::size_t n, unsigned workers, Fn&& fn) {
  std::vector<T> out(n);
  parallel_chunks(n, workers, [&](std::size_t begin, std::size_t end, std::size_t) {
    for (std::size_t i = begin; i < end; ++i) out[i] = fn(i);
  });
  return out;
}

}  // namespace subtrace
