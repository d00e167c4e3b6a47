#include "ctxr/dataset.hpp"

#include <algorithm>
#include <cmath>

namespace ctxr {

namespace {

void paint(ShapesSample& s, int row, int col, int cls, uint32_t instance) {
  const int w = s.labels.width;
  s.labels.at(row, col) = uint8_t(cls);
  s.instances.at(row, col) = instance;
  float* px = s.image.data() + (size_t(row) * w + col) * 3;
  for (int c = 0; c < 3; ++c) px[c] = kClassColors[cls][c];
}

bool try_generate(const DatasetConfig& cfg, Rng rng, ShapesSample& s) {
  const int h = cfg.height, w = cfg.width;
  s.image.assign(size_t(h) * w * 3, 0.0f);
  s.labels = LabelMap(h, w, kClassBackground);
  s.instances = InstanceMap(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) paint(s, y, x, kClassBackground, 0);

  uint32_t next_instance = 1;

  // Rectangle first, then disks, then a stripe crossing the full image.
  {
    const int rw = int(rng.next_below(17)) + 10;
    const int rh = int(rng.next_below(17)) + 10;
    const int x0 = int(rng.next_below(uint64_t(std::max(1, w - rw))));
    const int y0 = int(rng.next_below(uint64_t(std::max(1, h - rh))));
    const uint32_t id = next_instance++;
    for (int y = y0; y < std::min(h, y0 + rh); ++y)
      for (int x = x0; x < std::min(w, x0 + rw); ++x) paint(s, y, x, kClassRect, id);
  }

  const int disks = rng.next_unit() < 0.3 ? 2 : 1;
  for (int i = 0; i < disks; ++i) {
    const double r = rng.next_uniform(5.0, 12.0);
    const double cy = rng.next_uniform(r, double(h) - 1.0 - r);
    const double cx = rng.next_uniform(r, double(w) - 1.0 - r);
    const uint32_t id = next_instance++;
    const double rr = r * r;
    for (int y = std::max(0, int(cy - r) - 1); y <= std::min(h - 1, int(cy + r) + 1); ++y)
      for (int x = std::max(0, int(cx - r) - 1); x <= std::min(w - 1, int(cx + r) + 1); ++x)
        if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= rr) paint(s, y, x, kClassDisk, id);
  }

  {
    const bool horizontal = rng.next_unit() < 0.5;
    const int thickness = int(rng.next_below(5)) + 3;
    const int extent = horizontal ? h : w;
    const int off = int(rng.next_below(uint64_t(std::max(1, extent - thickness))));
    const uint32_t id = next_instance++;
    if (horizontal) {
      for (int y = off; y < std::min(h, off + thickness); ++y)
        for (int x = 0; x < w; ++x) paint(s, y, x, kClassStripe, id);
    } else {
      for (int x = off; x < std::min(w, off + thickness); ++x)
        for (int y = 0; y < h; ++y) paint(s, y, x, kClassStripe, id);
    }
  }

  bool present[kNumClasses] = {false, false, false, false};
  for (uint8_t v : s.labels.values) present[v] = true;
  for (bool p : present)
    if (!p) return false;

  if (cfg.noise_sigma > 0.0) {
    for (float& v : s.image) v = float(double(v) + cfg.noise_sigma * rng.next_gauss());
  }
  return true;
}

}  // namespace

ShapesSample generate_sample(const DatasetConfig& cfg, uint64_t seed, uint64_t split,
                             uint64_t index) {
  if (cfg.height < 16 || cfg.width < 16)
    throw ArgumentError("shapes dataset needs at least 16x16 pixels");
  const Rng stream = Rng(seed, kStreamData).fork(split);
  ShapesSample s;
  for (uint64_t attempt = 0; attempt < 100; ++attempt) {
    if (try_generate(cfg, stream.fork(index).fork(attempt), s)) return s;
  }
  throw StateError("shapes dataset failed to place all classes after 100 attempts");
}

std::vector<ShapesSample> generate(const DatasetConfig& cfg, uint64_t seed, uint64_t split,
                                   uint64_t first_index, size_t count) {
  if (count == 0) throw ArgumentError("generate: count must be positive");
  std::vector<ShapesSample> out;
  out.reserve(count);
  for (size_t i = 0; i < count; ++i)
    out.push_back(generate_sample(cfg, seed, split, first_index + i));
  return out;
}

}  // namespace ctxr
