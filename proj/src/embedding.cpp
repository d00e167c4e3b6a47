#include "ctxr/embedding.hpp"

#include <cmath>

namespace ctxr {

ProjectionHead ProjectionHead::identity(int dim) {
  ProjectionHead head;
  head.in_dim = dim;
  head.out_dim = dim;
  head.weight.assign(size_t(dim) * dim, 0.0f);
  head.bias.assign(size_t(dim), 0.0f);
  for (int i = 0; i < dim; ++i) head.weight[size_t(i) * dim + i] = 1.0f;
  return head;
}

ProjectionHead ProjectionHead::linear(int in_dim, int out_dim) {
  ProjectionHead head;
  head.in_dim = in_dim;
  head.out_dim = out_dim;
  head.weight.assign(size_t(out_dim) * in_dim, 0.0f);
  head.bias.assign(size_t(out_dim), 0.0f);
  return head;
}

FeatureGrid project(const FeatureGrid& raw, const ProjectionHead& head) {
  if (raw.dim != head.in_dim)
    throw ConfigError("projection head expects dim " + std::to_string(head.in_dim) +
                      ", grid has " + std::to_string(raw.dim));
  FeatureGrid out(raw.layer, raw.height, raw.width, head.out_dim);
  const int in_d = head.in_dim;
  const int out_d = head.out_dim;
  for (size_t p = 0; p < raw.pixel_count(); ++p) {
    const float* src = raw.data.data() + p * in_d;
    float* dst = out.data.data() + p * out_d;
    double sq = 0.0;
    for (int o = 0; o < out_d; ++o) {
      const float* w = head.weight.data() + size_t(o) * in_d;
      double acc = head.bias[o];
      for (int i = 0; i < in_d; ++i) acc += double(w[i]) * double(src[i]);
      dst[o] = float(acc);
      sq += acc * acc;
    }
    if (sq > 0.0) {
      const double inv = 1.0 / std::sqrt(sq);
      for (int o = 0; o < out_d; ++o) dst[o] = float(double(dst[o]) * inv);
    }
  }
  return out;
}

EmbeddingSet flatten(const FeatureGrid& grid, const LabelMap& gt, const LabelMap& pred) {
  if (gt.height != grid.height || gt.width != grid.width ||
      pred.height != grid.height || pred.width != grid.width)
    throw ArgumentError("flatten: label maps must match grid resolution");

  EmbeddingSet set;
  set.layer = grid.layer;
  set.dim = grid.dim;
  set.grid_height = grid.height;
  set.grid_width = grid.width;
  set.pixel_to_entry.assign(grid.pixel_count(), -1);

  for (int y = 0; y < grid.height; ++y) {
    for (int x = 0; x < grid.width; ++x) {
      const uint8_t g = gt.at(y, x);
      if (g == kIgnoreLabel) continue;
      const auto v = grid.at(y, x);
      bool zero = true;
      for (float c : v) {
        if (c != 0.0f) { zero = false; break; }
      }
      set.pixel_to_entry[size_t(y) * grid.width + x] = int32_t(set.count());
      for (float c : v) set.vectors.push_back(double(c));
      set.gt_class.push_back(g);
      set.pred_class.push_back(pred.at(y, x));
      set.pixels.emplace_back(uint16_t(y), uint16_t(x));
      set.flagged.push_back(zero ? 1 : 0);
    }
  }
  return set;
}

}  // namespace ctxr
