#pragma once

#include <cstdint>
#include <vector>

namespace ctxr {

// 64-bit counter-based generator. Output k of a stream is a pure function of
// (seed, stream, k), so any implementation that follows the constants below
// reproduces every random quantity in this project:
//
//   mix64(z):  z ^= z >> 30; z *= 0xBF58476D1CE4E5B9;
//              z ^= z >> 27; z *= 0x94D049BB133111EB;
//              z ^= z >> 31;               (SplitMix64 finalizer)
//   base(seed, stream) = mix64(seed ^ mix64(stream * GOLDEN + 1))
//   output_k           = mix64(base + (k + 1) * GOLDEN)
//   GOLDEN             = 0x9E3779B97F4A7C15
//
// Derived draws:
//   unit double    u = (output >> 11) * 2^-53            in [0, 1)
//   open double    u = ((output >> 11) + 0.5) * 2^-53    in (0, 1)
//   gaussian       Box-Muller from two open draws:
//                  sqrt(-2 ln u1) * cos(2 pi u2)
//   below(n)       rejection sampling on output % n
class Rng {
 public:
  static constexpr uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

  static uint64_t mix64(uint64_t z);

  Rng(uint64_t seed, uint64_t stream);

  uint64_t next_u64();
  double next_unit();           // [0, 1)
  double next_open();           // (0, 1)
  double next_uniform(double lo, double hi);
  double next_gauss();          // standard normal, two draws per call
  uint64_t next_below(uint64_t n);

  // Child generator keyed off this stream's base; used to give every
  // dataset sample / retry attempt its own independent stream.
  Rng fork(uint64_t substream) const { return Rng(base_, substream); }

  // First k elements of a Fisher-Yates shuffle of [0, n); cheap partial sample
  // without replacement.
  std::vector<uint32_t> sample_indices(uint32_t n, uint32_t k);

 private:
  uint64_t base_;
  uint64_t counter_ = 0;
};

// Stream ids used by the trainer and dataset (documented for reproducibility).
inline constexpr uint64_t kStreamInit = 1;      // parameter initialization
inline constexpr uint64_t kStreamData = 2;      // dataset samples
inline constexpr uint64_t kStreamLoss = 3;      // positive/negative sampling
inline constexpr uint64_t kSplitTrain = 0;
inline constexpr uint64_t kSplitEval = 1;

}  // namespace ctxr
