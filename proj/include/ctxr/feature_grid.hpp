#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "ctxr/common.hpp"

namespace ctxr {

// Layer index stored in CTXF dumps of anchor sets (h = n_classes, w = 1).
inline constexpr uint32_t kAnchorLayerSentinel = 0xFFFF;

// Per-layer feature map: h*w vectors of dimension d, pixel-major then channel.
struct FeatureGrid {
  int layer = 0;
  int height = 0;
  int width = 0;
  int dim = 0;
  std::vector<float> data;

  FeatureGrid() = default;
  FeatureGrid(int layer_index, int h, int w, int d);

  std::span<float> at(int row, int col) {
    return {data.data() + (size_t(row) * width + col) * dim, size_t(dim)};
  }
  std::span<const float> at(int row, int col) const {
    return {data.data() + (size_t(row) * width + col) * dim, size_t(dim)};
  }
  size_t pixel_count() const { return size_t(height) * size_t(width); }

  bool operator==(const FeatureGrid&) const = default;
};

// Per-layer spatial dimensions of the reference encoder:
// height_i = ceil(H / 2^i_offset) with offsets (0, 1, 2, ...) per layer.
struct LayerGeometry {
  int full_height = 0;
  int full_width = 0;
  std::vector<std::pair<int, int>> layer_dims;  // (height_i, width_i), layer 1 first

  static LayerGeometry make(int full_h, int full_w, int n_layers);
  int layers() const { return int(layer_dims.size()); }
};

// CTXF container: "CTXF" magic, u32 LE version (=1), u32 LE layer/h/w/d,
// followed by h*w*d little-endian f32 values, pixel-major.
void write_ctxf(const FeatureGrid& grid, std::ostream& out);
void write_ctxf(const FeatureGrid& grid, const std::string& path);
FeatureGrid read_ctxf(std::istream& in);
FeatureGrid read_ctxf(const std::string& path);

}  // namespace ctxr
