#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ctxr/embedding.hpp"
#include "ctxr/feature_grid.hpp"

namespace ctxr {

// Class-wise representative anchors for one layer: the per-class mean of
// embedding vectors sharing that ground-truth class, re-normalized to unit
// length. `mean` keeps the unnormalized average (the backward pass and the
// batch-composition property need it).
struct AnchorSet {
  int layer = 0;
  int n_classes = 0;
  int dim = 0;
  std::vector<double> mean;    // n_classes x dim, unnormalized
  std::vector<double> unit;    // n_classes x dim, normalized (zero if invalid)
  std::vector<int> counts;     // vectors averaged per class
  std::vector<uint8_t> valid;  // 1 = usable anchor

  std::span<const double> mean_of(int cls) const { return {mean.data() + size_t(cls) * dim, size_t(dim)}; }
  std::span<const double> unit_of(int cls) const { return {unit.data() + size_t(cls) * dim, size_t(dim)}; }
};

// How a fused anchor was produced; the gradient chain depends on it.
enum class FuseSource : uint8_t {
  kInvalid = 0,
  kBlend = 1,     // normalize(w_l*a_i + w_h*a_I)
  kHighOnly = 2,  // a_I passed through (class absent below, or w_h = 1)
  kLowOnly = 3,   // a_i passed through (w_l = 1)
  kIdentity = 4,  // top layer fused with itself
};

struct FusedAnchorSet {
  int layer = 0;
  int n_classes = 0;
  int dim = 0;
  double w_low = 0.0;
  double w_high = 0.0;
  std::vector<double> pre;     // unnormalized blend w_l*a_i + w_h*a_I
  std::vector<double> unit;    // normalized fused anchors
  std::vector<uint8_t> valid;
  std::vector<FuseSource> source;

  std::span<const double> pre_of(int cls) const { return {pre.data() + size_t(cls) * dim, size_t(dim)}; }
  std::span<const double> unit_of(int cls) const { return {unit.data() + size_t(cls) * dim, size_t(dim)}; }
};

// Per-class f64 mean of non-flagged vectors, re-normalized. Classes without
// members (or whose members cancel to a zero mean) are marked invalid.
AnchorSet compute_anchors(const EmbeddingSet& set, int n_classes);

// Same computation over several sets at once (a batch pools its images).
AnchorSet compute_anchors(std::span<const EmbeddingSet* const> sets, int layer, int n_classes);

// Blends low-layer anchors with the top-layer set: normalize(w_l*a_i + w_h*a_I)
// where both are valid, a_I where only the top is valid, invalid where the top
// is invalid. Fusing the top layer with itself is the identity.
FusedAnchorSet fuse_anchors(const AnchorSet& low, const AnchorSet& high,
                            double w_low, double w_high);

// CTXF dump: layer = kAnchorLayerSentinel, h = n_classes, w = 1. Invalid
// anchors serialize as zero vectors.
FeatureGrid anchors_to_grid(const AnchorSet& set);

}  // namespace ctxr
