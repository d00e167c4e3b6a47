#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ctxr/embedding.hpp"
#include "ctxr/label_map.hpp"

namespace ctxr {

// Class-wise binary error map: 1 where the ground truth is this class but the
// prediction is not.
struct BinaryErrorMap {
  int cls = 0;
  int layer = 0;
  int height = 0;
  int width = 0;
  std::vector<uint8_t> values;  // row-major, {0,1}

  uint8_t at(int row, int col) const { return values[size_t(row) * width + col]; }
  uint8_t& at(int row, int col) { return values[size_t(row) * width + col]; }
};

// Boundary pixels of the error regions, row-major order.
struct EdgeSet {
  std::vector<std::pair<uint16_t, uint16_t>> pixels;  // (row, col)
};

// Euclidean distances to the nearest edge pixel. Finite exactly on error
// pixels; squared distances are integers and are kept for exact comparisons.
struct DistanceMap {
  int height = 0;
  int width = 0;
  std::vector<int64_t> squared;  // -1 where undefined (B = 0)
  std::vector<float> dist;       // +inf where undefined

  int64_t sq_at(int row, int col) const { return squared[size_t(row) * width + col]; }
  float at(int row, int col) const { return dist[size_t(row) * width + col]; }
};

// Error pixels chosen as hard negatives for one class.
struct SelectionSet {
  int cls = 0;
  double ratio = 0.0;                 // K, percent
  std::vector<int32_t> entries;       // EmbeddingSet indices, (distance, index) order
  std::vector<int64_t> squared;       // squared distance per selected entry
};

BinaryErrorMap error_map(const LabelMap& pred, const LabelMap& gt, int cls, int layer = 0);

// An error pixel is an edge when it lies on the image border or has a
// 4-neighbor that is not an error pixel.
EdgeSet extract_edges(const BinaryErrorMap& map);

// Exact squared Euclidean distance from every pixel to the nearest seed,
// computed with the separable lower-envelope scan in integer arithmetic.
// Shared by the BANE transform and the boundary-mIoU mask.
std::vector<int64_t> squared_edt(int height, int width, const std::vector<uint8_t>& seeds);

// Distances restricted to error pixels. Asserts the edge set is consistent
// with the map and nonempty whenever the map has error pixels.
DistanceMap distance_transform(const BinaryErrorMap& map, const EdgeSet& edges);

// Takes the floor(K/100 * count) error pixels with the smallest distances
// (at least one when K > 0 and errors exist), ties broken by row-major pixel
// index. Zero-flagged embedding entries are not eligible.
SelectionSet select_negatives(const DistanceMap& dist, const BinaryErrorMap& map,
                              const EmbeddingSet& set, double k_percent);

// Negative pool for each anchor class c: the union of selections of every
// other class, closest-distance first, capped at `cap` entries.
std::vector<std::vector<int32_t>> build_negative_pools(
    std::span<const SelectionSet> selections, int n_classes, int cap);

}  // namespace ctxr
