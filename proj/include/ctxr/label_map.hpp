#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "ctxr/common.hpp"

namespace ctxr {

// Per-pixel class-id grid. Serves both as ground truth and as a prediction
// map; kIgnoreLabel marks unlabeled pixels.
struct LabelMap {
  int height = 0;
  int width = 0;
  std::vector<uint8_t> values;  // row-major

  LabelMap() = default;
  LabelMap(int h, int w, uint8_t fill = 0);

  uint8_t at(int row, int col) const { return values[size_t(row) * width + col]; }
  uint8_t& at(int row, int col) { return values[size_t(row) * width + col]; }
  size_t pixel_count() const { return values.size(); }

  // Throws ArgumentError if any non-ignore value is >= n_classes.
  void validate(int n_classes) const;

  bool operator==(const LabelMap&) const = default;
};

// Nearest-neighbor downsampling at pixel centers:
//   src_index = floor((dst + 0.5) * src / dst)
// Class ids are copied, never interpolated.
LabelMap downsample_labels(const LabelMap& map, int target_h, int target_w);

// Shared center-sampling index rule (also used for feature upsampling).
inline int center_sample_index(int dst, int dst_dim, int src_dim) {
  return int((2 * dst + 1) * src_dim / (2 * dst_dim));
}

// Binary PGM (magic P5, maxval 255), one byte per pixel, row-major.
void write_pgm(const LabelMap& map, std::ostream& out);
void write_pgm(const LabelMap& map, const std::string& path);
LabelMap read_pgm(std::istream& in);
LabelMap read_pgm(const std::string& path);

}  // namespace ctxr
