#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ctxr/anchors.hpp"
#include "ctxr/bane.hpp"
#include "ctxr/label_map.hpp"
#include "ctxr/losses.hpp"

namespace ctxr {

// Row = ground-truth class, column = predicted class. Ignored pixels are
// never counted. Shards merge by addition.
struct ConfusionMatrix {
  int n_classes = 0;
  std::vector<uint64_t> counts;

  explicit ConfusionMatrix(int n);
  void add(const LabelMap& gt, const LabelMap& pred);
  void merge(const ConfusionMatrix& other);
  uint64_t at(int gt, int pred) const { return counts[size_t(gt) * n_classes + pred]; }
  uint64_t& at(int gt, int pred) { return counts[size_t(gt) * n_classes + pred]; }
  uint64_t total() const;
};

struct IouReport {
  double miou = 0.0;                 // percent
  std::vector<double> per_class;     // percent, NaN where the union is empty
  std::vector<uint8_t> counted;      // 1 = included in the mean
};

// Classes whose union is empty (absent from both maps) are excluded from the
// mean. Throws UndefinedError when nothing is scored.
IouReport miou(const ConfusionMatrix& cm);

// Per-pixel instance ids aligned to a label map; 0 marks "no instance".
struct InstanceMap {
  int height = 0;
  int width = 0;
  std::vector<uint32_t> ids;

  InstanceMap() = default;
  InstanceMap(int h, int w) : height(h), width(w), ids(size_t(h) * w, 0) {}
  uint32_t at(int row, int col) const { return ids[size_t(row) * width + col]; }
  uint32_t& at(int row, int col) { return ids[size_t(row) * width + col]; }
};

// Weighted counts for the instance-level IoU: true-positive and false-negative
// pixels of each ground-truth instance are scaled by
// (class average instance size) / (this instance's size); false positives stay
// unweighted. Accumulates across images so the metric can cover a whole set.
struct IiouAccumulator {
  int n_classes = 0;
  std::vector<double> itp, ifn;
  std::vector<uint64_t> fp;
  std::vector<uint8_t> has_instances;

  explicit IiouAccumulator(int n);
  void add(const LabelMap& pred, const LabelMap& gt, const InstanceMap& inst,
           std::span<const double> class_avg_size);
  // Mean over classes with instances, percent.
  double value() const;
};

double iiou(const LabelMap& pred, const LabelMap& gt, const InstanceMap& inst,
            std::span<const double> class_avg_size, int n_classes);

// Per-class average instance sizes over an evaluation set (pixel counts).
struct InstanceSizeSurvey {
  int n_classes = 0;
  std::vector<double> size_sum;
  std::vector<uint64_t> instances;

  explicit InstanceSizeSurvey(int n) : n_classes(n), size_sum(n, 0.0), instances(n, 0) {}
  void add(const LabelMap& gt, const InstanceMap& inst);
  std::vector<double> averages() const;
};

// mIoU restricted to pixels within `radius` of a ground-truth class boundary
// (a non-ignored pixel with a 4-neighbor of a different non-ignored class).
// Throws UndefinedError when the ground truth has no boundaries.
double boundary_miou(const LabelMap& pred, const LabelMap& gt, double radius, int n_classes);

// Intra-class alignment: mean over nonempty classes of the average pairwise
// L2 distance (ordered pairs, self-pairs included).
double alignment(std::span<const VecArray> class_sets);

// Plain per-class feature means; empty classes yield no centroid.
VecArray class_centroids(std::span<const VecArray> class_sets);

// Mean pairwise distance between class centroids.
double uniformity(const VecArray& centroids);

// Mean of the l smallest centroid-to-centroid distances per centroid.
double neighborhood_uniformity(const VecArray& centroids, int l);

struct FeatureDiagnostics {
  double alignment_value = 0.0;
  double uniformity_value = 0.0;
  std::vector<std::pair<int, double>> neighborhood;  // (requested l, value)
  VecArray centroids;
};

// Bundles A, U and U_l for the requested l values; l is clamped to the number
// of centroids minus one.
FeatureDiagnostics feature_diagnostics(std::span<const VecArray> class_sets,
                                       std::span<const int> requested_l);

// Cosine similarity between error-pixel embeddings and the fused anchor of
// their ground-truth class, bucketed by distance-transform value: unit bins
// [0,1) ... [9,10) plus an overflow bin.
inline constexpr int kProfileBins = 11;

struct ProfileAccumulator {
  int layer = 0;
  std::vector<double> cos_sum;
  std::vector<uint64_t> count;

  explicit ProfileAccumulator(int layer_index)
      : layer(layer_index), cos_sum(kProfileBins, 0.0), count(kProfileBins, 0) {}
  void add(const EmbeddingSet& set, const FusedAnchorSet& anchors,
           std::span<const DistanceMap> per_class_maps);
  void merge(const ProfileAccumulator& other);
};

// CSV with columns layer,bin_lo,bin_hi,count,mean_cos; empty bins keep the
// mean column blank.
std::string profile_csv(std::span<const ProfileAccumulator> layers);

}  // namespace ctxr
