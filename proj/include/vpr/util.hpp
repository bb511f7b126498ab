#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <random>
#include <thread>
#include <vector>

namespace vpr {

// splitmix64, used to derive independent RNG streams from one master seed.
inline uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t master, uint64_t a, uint64_t b = 0, uint64_t c = 0) {
  return mix64(mix64(mix64(master ^ mix64(a)) ^ mix64(b)) ^ mix64(c));
}

inline std::mt19937_64 make_rng(uint64_t master, uint64_t a, uint64_t b = 0, uint64_t c = 0) {
  return std::mt19937_64(derive_seed(master, a, b, c));
}

// Global worker cap for parallel_for. 0 = hardware concurrency.
int& worker_threads();

// Runs fn(i) for i in [0, n). Work is split into contiguous blocks, one per
// worker; iterations within a block run in index order. Results must not
// depend on which thread runs an index.
void parallel_for(int n, const std::function<void(int)>& fn);

class Stopwatch {
 public:
  Stopwatch() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }
  double ms() const { return seconds() * 1e3; }

 private:
  std::chrono::steady_clock::time_point start_;
};

}  // namespace vpr
