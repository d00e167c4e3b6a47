#include "ctxr/rng.hpp"

#include <cmath>
#include <cstdlib>
#include <numbers>
#include <thread>

#include "ctxr/common.hpp"

namespace ctxr {

uint64_t Rng::mix64(uint64_t z) {
  z ^= z >> 30;
  z *= 0xBF58476D1CE4E5B9ULL;
  z ^= z >> 27;
  z *= 0x94D049BB133111EBULL;
  z ^= z >> 31;
  return z;
}

Rng::Rng(uint64_t seed, uint64_t stream)
    : base_(mix64(seed ^ mix64(stream * kGolden + 1))) {}

uint64_t Rng::next_u64() { return mix64(base_ + (++counter_) * kGolden); }

double Rng::next_unit() { return double(next_u64() >> 11) * 0x1.0p-53; }

double Rng::next_open() { return (double(next_u64() >> 11) + 0.5) * 0x1.0p-53; }

double Rng::next_uniform(double lo, double hi) {
  return lo + (hi - lo) * next_unit();
}

double Rng::next_gauss() {
  const double u1 = next_open();
  const double u2 = next_open();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

uint64_t Rng::next_below(uint64_t n) {
  if (n == 0) return 0;
  const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  uint64_t x = next_u64();
  while (x >= limit) x = next_u64();
  return x % n;
}

std::vector<uint32_t> Rng::sample_indices(uint32_t n, uint32_t k) {
  if (k > n) k = n;
  std::vector<uint32_t> idx(n);
  for (uint32_t i = 0; i < n; ++i) idx[i] = i;
  for (uint32_t i = 0; i < k; ++i) {
    const uint32_t j = i + uint32_t(next_below(n - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(k);
  return idx;
}

int worker_count() {
  if (const char* env = std::getenv("CTXR_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) return int(v);
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : int(hw);
}

}  // namespace ctxr
