#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ctxr/feature_grid.hpp"
#include "ctxr/label_map.hpp"

namespace ctxr {

// Learned 1x1 linear map applied per pixel before L2 normalization.
struct ProjectionHead {
  int in_dim = 0;
  int out_dim = 0;
  std::vector<float> weight;  // out_dim x in_dim, row-major
  std::vector<float> bias;    // out_dim

  static ProjectionHead identity(int dim);
  static ProjectionHead linear(int in_dim, int out_dim);
};

// Applies the head per pixel, then normalizes each output vector to unit
// length. Zero vectors stay zero; flatten() flags them downstream.
FeatureGrid project(const FeatureGrid& raw, const ProjectionHead& head);

// One entry per non-ignored pixel, row-major. Vectors are held in f64 so the
// anchor/loss pipeline meets its verification tolerances; grids and files
// stay f32.
struct EmbeddingSet {
  int layer = 0;
  int dim = 0;
  int grid_height = 0;
  int grid_width = 0;
  std::vector<double> vectors;               // count x dim
  std::vector<uint8_t> gt_class;             // count
  std::vector<uint8_t> pred_class;           // count
  std::vector<std::pair<uint16_t, uint16_t>> pixels;  // (row, col)
  std::vector<uint8_t> flagged;              // 1 = zero vector, excluded everywhere
  std::vector<int32_t> pixel_to_entry;       // grid_height*grid_width, -1 = ignored

  size_t count() const { return gt_class.size(); }
  std::span<const double> vec(size_t i) const { return {vectors.data() + i * dim, size_t(dim)}; }
  std::span<double> vec(size_t i) { return {vectors.data() + i * dim, size_t(dim)}; }
  int32_t entry_at(int row, int col) const {
    return pixel_to_entry[size_t(row) * grid_width + col];
  }
};

// Materializes the embedding set for one layer. gt and pred must already be
// downsampled to the grid's resolution.
EmbeddingSet flatten(const FeatureGrid& grid, const LabelMap& gt, const LabelMap& pred);

}  // namespace ctxr
