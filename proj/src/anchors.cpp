#include "ctxr/anchors.hpp"

#include <cmath>

namespace ctxr {

namespace {

constexpr double kDegenerateNorm = 1e-12;

AnchorSet make_empty(int layer, int n_classes, int dim) {
  AnchorSet a;
  a.layer = layer;
  a.n_classes = n_classes;
  a.dim = dim;
  a.mean.assign(size_t(n_classes) * dim, 0.0);
  a.unit.assign(size_t(n_classes) * dim, 0.0);
  a.counts.assign(n_classes, 0);
  a.valid.assign(n_classes, 0);
  return a;
}

void finalize(AnchorSet& a) {
  for (int n = 0; n < a.n_classes; ++n) {
    if (a.counts[n] == 0) continue;
    double* m = a.mean.data() + size_t(n) * a.dim;
    double sq = 0.0;
    for (int k = 0; k < a.dim; ++k) {
      m[k] /= a.counts[n];
      sq += m[k] * m[k];
    }
    const double norm = std::sqrt(sq);
    if (norm < kDegenerateNorm) continue;  // antipodal cancellation, unusable
    double* u = a.unit.data() + size_t(n) * a.dim;
    for (int k = 0; k < a.dim; ++k) u[k] = m[k] / norm;
    a.valid[n] = 1;
  }
}

void accumulate(AnchorSet& a, const EmbeddingSet& set) {
  for (size_t i = 0; i < set.count(); ++i) {
    if (set.flagged[i]) continue;
    const uint8_t n = set.gt_class[i];
    if (n >= a.n_classes)
      throw ArgumentError("embedding gt class " + std::to_string(int(n)) +
                          " out of range for " + std::to_string(a.n_classes) + " classes");
    double* m = a.mean.data() + size_t(n) * a.dim;
    const double* v = set.vectors.data() + i * a.dim;
    for (int k = 0; k < a.dim; ++k) m[k] += v[k];
    ++a.counts[n];
  }
}

}  // namespace

AnchorSet compute_anchors(const EmbeddingSet& set, int n_classes) {
  AnchorSet a = make_empty(set.layer, n_classes, set.dim);
  accumulate(a, set);
  finalize(a);
  return a;
}

AnchorSet compute_anchors(std::span<const EmbeddingSet* const> sets, int layer, int n_classes) {
  if (sets.empty()) throw ArgumentError("compute_anchors: no embedding sets");
  AnchorSet a = make_empty(layer, n_classes, sets.front()->dim);
  for (const EmbeddingSet* s : sets) {
    if (s->dim != a.dim) throw ArgumentError("compute_anchors: mixed dimensions");
    accumulate(a, *s);
  }
  finalize(a);
  return a;
}

FusedAnchorSet fuse_anchors(const AnchorSet& low, const AnchorSet& high,
                            double w_low, double w_high) {
  if (low.dim != high.dim || low.n_classes != high.n_classes)
    throw ArgumentError("fuse_anchors: anchor sets disagree on shape");
  if (w_low < 0.0 || w_high < 0.0 || std::abs(w_low + w_high - 1.0) > 1e-9)
    throw ArgumentError("fuse_anchors: weights must be nonnegative and sum to 1");

  FusedAnchorSet f;
  f.layer = low.layer;
  f.n_classes = low.n_classes;
  f.dim = low.dim;
  f.w_low = w_low;
  f.w_high = w_high;
  f.pre.assign(size_t(f.n_classes) * f.dim, 0.0);
  f.unit.assign(size_t(f.n_classes) * f.dim, 0.0);
  f.valid.assign(f.n_classes, 0);
  f.source.assign(f.n_classes, FuseSource::kInvalid);

  const bool top_layer = low.layer == high.layer;
  for (int n = 0; n < f.n_classes; ++n) {
    if (!high.valid[n]) continue;  // class absent from the batch entirely
    double* pre = f.pre.data() + size_t(n) * f.dim;
    double* unit = f.unit.data() + size_t(n) * f.dim;
    const double* hi = high.unit.data() + size_t(n) * f.dim;

    if (top_layer || !low.valid[n]) {
      for (int k = 0; k < f.dim; ++k) {
        pre[k] = hi[k];
        unit[k] = hi[k];
      }
      f.valid[n] = 1;
      f.source[n] = top_layer ? FuseSource::kIdentity : FuseSource::kHighOnly;
      continue;
    }

    const double* lo = low.unit.data() + size_t(n) * f.dim;
    // Degenerate weights pass one side through untouched; re-normalizing an
    // already-unit anchor would perturb it by an ulp.
    if (w_high == 1.0 || w_low == 1.0) {
      const double* src = w_high == 1.0 ? hi : lo;
      for (int k = 0; k < f.dim; ++k) {
        pre[k] = src[k];
        unit[k] = src[k];
      }
      f.valid[n] = 1;
      f.source[n] = w_high == 1.0 ? FuseSource::kHighOnly : FuseSource::kLowOnly;
      continue;
    }
    double sq = 0.0;
    for (int k = 0; k < f.dim; ++k) {
      pre[k] = w_low * lo[k] + w_high * hi[k];
      sq += pre[k] * pre[k];
    }
    const double norm = std::sqrt(sq);
    if (norm < kDegenerateNorm) continue;  // opposing anchors cancelled
    for (int k = 0; k < f.dim; ++k) unit[k] = pre[k] / norm;
    f.valid[n] = 1;
    f.source[n] = FuseSource::kBlend;
  }
  return f;
}

FeatureGrid anchors_to_grid(const AnchorSet& set) {
  FeatureGrid grid(int(kAnchorLayerSentinel), set.n_classes, 1, set.dim);
  for (int n = 0; n < set.n_classes; ++n) {
    const double* u = set.unit.data() + size_t(n) * set.dim;
    float* dst = grid.data.data() + size_t(n) * set.dim;
    for (int k = 0; k < set.dim; ++k) dst[k] = float(u[k]);
  }
  return grid;
}

}  // namespace ctxr
