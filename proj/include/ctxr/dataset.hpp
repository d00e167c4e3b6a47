#pragma once

#include <cstdint>
#include <vector>

#include "ctxr/label_map.hpp"
#include "ctxr/metrics.hpp"
#include "ctxr/rng.hpp"

namespace ctxr {

// Classes of the synthetic shapes task.
inline constexpr int kNumClasses = 4;
inline constexpr int kClassBackground = 0;
inline constexpr int kClassDisk = 1;
inline constexpr int kClassRect = 2;
inline constexpr int kClassStripe = 3;

// Base colors (RGB, [0,1]). Shape colors sit close together relative to the
// pixel noise so per-pixel color alone cannot separate the classes.
inline constexpr float kClassColors[kNumClasses][3] = {
    {0.20f, 0.20f, 0.20f},
    {0.52f, 0.38f, 0.32f},
    {0.38f, 0.52f, 0.32f},
    {0.38f, 0.32f, 0.52f},
};

struct DatasetConfig {
  int height = 64;
  int width = 64;
  double noise_sigma = 0.15;
};

struct ShapesSample {
  std::vector<float> image;  // height*width*3, pixel-major
  LabelMap labels;
  InstanceMap instances;     // one id per placed shape, 0 = background
};

// Deterministic sample stream: sample `index` of `split` under `seed` is a
// pure function of those three values (see rng.hpp for the stream recipe).
// Retries with a fresh sub-stream until every class has at least one pixel.
ShapesSample generate_sample(const DatasetConfig& cfg, uint64_t seed, uint64_t split,
                             uint64_t index);

std::vector<ShapesSample> generate(const DatasetConfig& cfg, uint64_t seed, uint64_t split,
                                   uint64_t first_index, size_t count);

}  // namespace ctxr
