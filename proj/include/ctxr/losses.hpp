#pragma once

#include <span>
#include <string>
#include <vector>

#include "ctxr/anchors.hpp"
#include "ctxr/embedding.hpp"
#include "ctxr/feature_grid.hpp"
#include "ctxr/label_map.hpp"

namespace ctxr {

// Hyperparameters of the contrastive objective. Lambda is indexed from the
// highest-resolution layer (layer 1) upward.
struct ContrastConfig {
  double tau = 0.1;
  double alpha = 0.1;
  std::vector<double> lambda = {0.1, 0.4, 0.7, 1.0};
  double w_low = 0.3;
  double w_high = 0.7;
  double k_percent = 50.0;
  int positive_budget = 256;
  int negative_cap = 1024;

  void validate() const;
};

// Dense list of same-dimension vectors.
struct VecArray {
  int dim = 0;
  std::vector<double> data;

  VecArray() = default;
  explicit VecArray(int d) : dim(d) {}
  size_t rows() const { return dim > 0 ? data.size() / size_t(dim) : 0; }
  std::span<const double> row(size_t i) const { return {data.data() + i * dim, size_t(dim)}; }
  std::span<double> row(size_t i) { return {data.data() + i * dim, size_t(dim)}; }
  void push(std::span<const double> v) { data.insert(data.end(), v.begin(), v.end()); }
};

struct InfoNceResult {
  double loss = 0.0;
  std::vector<double> grad_query;
  VecArray grad_positives;
  VecArray grad_negatives;
};

// InfoNCE with an individual feature in the anchor slot. All vectors must be
// unit length; positives must be nonempty. Log-sum-exp stabilized, f64.
InfoNceResult info_nce(std::span<const double> query, const VecArray& positives,
                       const VecArray& negatives, double tau);

struct LayerLossResult {
  double loss = 0.0;                    // mean over contributing classes
  int contributing_classes = 0;         // N'
  int skipped_invalid_anchor = 0;
  std::vector<double> grad_embeddings;  // count x dim
  std::vector<double> grad_anchors;     // n_classes x dim, w.r.t. fused anchors
  std::vector<double> mean_p_pos;       // per class, 0 where absent
  std::vector<double> mean_p_neg;
};

// Pixel-anchor loss for one layer: for every contributing class (valid fused
// anchor, nonempty positives) the InfoNCE term with the fused anchor in the
// anchor slot, averaged over positives and then over contributing classes.
LayerLossResult pixel_anchor_layer_loss(const EmbeddingSet& set, const FusedAnchorSet& anchors,
                                        std::span<const std::vector<int32_t>> positives,
                                        std::span<const std::vector<int32_t>> negatives,
                                        double tau);

// Closed-form gradient of the class-averaged pixel-anchor term w.r.t. the
// anchor: -1/(tau*N*|V+|) * sum_p [(1 - p+) v+ - sum_q p- v-].
std::vector<double> grad_pa_wrt_anchor(std::span<const double> anchor, const VecArray& positives,
                                       const VecArray& negatives, double tau, int n_classes);

struct PixelAnchorInput {
  std::vector<const EmbeddingSet*> sets;                     // one per layer
  std::vector<std::vector<std::vector<int32_t>>> positives;  // [layer][class]
  std::vector<std::vector<std::vector<int32_t>>> negatives;  // [layer][class]
};

struct PixelAnchorResult {
  double loss = 0.0;                       // L_PA = sum_i lambda_i * L_i
  std::vector<double> per_layer;           // lambda-weighted layer terms
  std::vector<std::vector<double>> grad_embeddings;  // [layer] count x dim, full chain
  std::vector<std::vector<double>> grad_anchors;     // [layer] n_classes x dim (fused)
  std::vector<AnchorSet> anchors;          // per layer
  std::vector<FusedAnchorSet> fused;       // per layer
  std::vector<std::vector<double>> mean_p_pos;  // [layer][class]
  std::vector<std::vector<double>> mean_p_neg;
  int skipped_invalid_anchor = 0;
};

// Full multi-layer pixel-anchor loss. Anchors are computed from the given
// embedding sets and fused with the last layer's set, so gradients flow back
// into every constituent vector through the mean, the fusion blend and both
// normalizations.
PixelAnchorResult pixel_anchor_loss(const PixelAnchorInput& in, const ContrastConfig& cfg,
                                    int n_classes);

struct CrossEntropyResult {
  double loss = 0.0;
  std::vector<float> grad_logits;  // h*w*n, zero at ignored pixels
  size_t scored = 0;
  bool all_ignored = false;
};

// Mean over non-ignored pixels of -log softmax(logits)[gt].
CrossEntropyResult cross_entropy(const FeatureGrid& logits, const LabelMap& gt);

inline double total_loss(double ce, double pa, double alpha) { return ce + alpha * pa; }

struct LossReport {
  double l_ce = 0.0;
  std::vector<double> l_pa_per_layer;
  double l_pa = 0.0;
  double total = 0.0;
  double grad_norm_embeddings = 0.0;
  double grad_norm_anchors = 0.0;
  int warnings = 0;
  std::vector<std::vector<double>> mean_p_pos;
  std::vector<std::vector<double>> mean_p_neg;
};

std::string loss_report_json(const LossReport& report);

}  // namespace ctxr
