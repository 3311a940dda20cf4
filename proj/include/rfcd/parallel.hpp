/*
   Copyright 2026 The rfcd Authors

   Licensed under the Apache License, Version 2.0 (the "License");
   you may not use this file except in compliance with the License.
   You may obtain a copy of the License at

       http://www.apache.org/licenses/LICENSE-2.0

   Unless required by applicable law or agreed to in writing, software
   distributed under the License is distributed on an "AS IS" BASIS,
   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
   See the License for the specific language governing permissions and
   limitations under the License.
*/

#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace rfcd {

// Execution knobs shared by every stochastic routine. Results never depend
// on `threads`; only wall-clock does.
struct RunOptions {
  int threads = 1;
  bool strict = false;
};

// Fixed chunk length for Monte Carlo loops. Part of the reproducibility
// contract: chunk k always draws from substream k.
inline constexpr std::size_t kSampleChunk = 4096;

struct ChunkRange {
  std::size_t index;
  std::size_t begin;
  std::size_t end;
  std::size_t size() const noexcept { return end - begin; }
};

inline std::size_t chunk_count(std::size_t total, std::size_t chunk = kSampleChunk) {
  return (total + chunk - 1) / chunk;
}

// Threads from RFCD_THREADS, falling back to 1.
inline int threads_from_env() {
  if (const char* env = std::getenv("RFCD_THREADS")) {
    try {
      const int n = std::stoi(env);
      if (n >= 1) return n;
    } catch (...) {
    }
  }
  return 1;
}

// Runs fn(ChunkRange) over [0, total) split into fixed-size chunks. Chunks
// are claimed dynamically, so fn must write only to chunk-owned storage;
// callers reduce afterwards in chunk order. If several chunks throw, the
// exception from the lowest chunk index is rethrown.
template <typename Fn>
void for_each_chunk(std::size_t total, std::size_t chunk, int threads, Fn&& fn) {
  const std::size_t chunks = chunk_count(total, chunk);
  if (chunks == 0) return;
  const auto range = [&](std::size_t k) {
    return ChunkRange{k, k * chunk, std::min(total, (k + 1) * chunk)};
  };
  const std::size_t workers = std::min<std::size_t>(std::max(threads, 1), chunks);
  if (workers == 1) {
    for (std::size_t k = 0; k < chunks; ++k) fn(range(k));
    return;
  }

  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(chunks);
  {
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t k = next.fetch_add(1); k < chunks; k = next.fetch_add(1)) {
          try {
            fn(range(k));
          } catch (...) {
            errors[k] = std::current_exception();
          }
        }
      });
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace rfcd
