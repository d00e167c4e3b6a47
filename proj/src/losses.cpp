#include "ctxr/losses.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace ctxr {

namespace {

constexpr double kUnitTolerance = 1e-6;

bool is_unit(std::span<const double> v) {
  double sq = 0.0;
  for (double c : v) sq += c * c;
  return std::abs(std::sqrt(sq) - 1.0) <= kUnitTolerance;
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// dL/dx for y = x / ||x||, given g = dL/dy, evaluated at x.
void normalize_backward(std::span<const double> x, std::span<const double> g,
                        std::span<double> out) {
  double sq = 0.0;
  for (double c : x) sq += c * c;
  const double r = std::sqrt(sq);
  double gy = 0.0;
  for (size_t i = 0; i < x.size(); ++i) gy += g[i] * x[i] / r;
  for (size_t i = 0; i < x.size(); ++i) out[i] = (g[i] - gy * x[i] / r) / r;
}

}  // namespace

void ContrastConfig::validate() const {
  if (tau <= 0.0) throw ConfigError("tau must be positive");
  for (double l : lambda)
    if (l < 0.0) throw ConfigError("lambda weights must be nonnegative");
  if (w_low < 0.0 || w_high < 0.0 || std::abs(w_low + w_high - 1.0) > 1e-9)
    throw ConfigError("fusion weights must be nonnegative and sum to 1");
  if (k_percent < 0.0 || k_percent > 100.0) throw ConfigError("K must lie in [0, 100]");
  if (positive_budget < 1) throw ConfigError("positive budget must be at least 1");
  if (negative_cap < 0) throw ConfigError("negative cap must be nonnegative");
}

InfoNceResult info_nce(std::span<const double> query, const VecArray& positives,
                       const VecArray& negatives, double tau) {
  const int d = int(query.size());
  if (positives.rows() == 0) throw ArgumentError("info_nce: positives must be nonempty");
  if (positives.dim != d || (negatives.rows() > 0 && negatives.dim != d))
    throw ArgumentError("info_nce: dimension mismatch");
  if (tau <= 0.0) throw ArgumentError("info_nce: tau must be positive");
  if (!is_unit(query)) throw ArgumentError("info_nce: query is not unit length");
  for (size_t i = 0; i < positives.rows(); ++i)
    if (!is_unit(positives.row(i))) throw ArgumentError("info_nce: positive is not unit length");
  for (size_t i = 0; i < negatives.rows(); ++i)
    if (!is_unit(negatives.row(i))) throw ArgumentError("info_nce: negative is not unit length");

  InfoNceResult res;
  res.grad_query.assign(d, 0.0);
  res.grad_positives.dim = d;
  res.grad_positives.data.assign(positives.data.size(), 0.0);
  res.grad_negatives.dim = d;
  res.grad_negatives.data.assign(negatives.data.size(), 0.0);

  const size_t np = positives.rows();
  const size_t nq = negatives.rows();
  std::vector<double> tq(nq);
  double max_neg = -std::numeric_limits<double>::infinity();
  for (size_t q = 0; q < nq; ++q) {
    tq[q] = dot(query, negatives.row(q)) / tau;
    max_neg = std::max(max_neg, tq[q]);
  }

  double loss_sum = 0.0;
  const double inv_np = 1.0 / double(np);
  for (size_t p = 0; p < np; ++p) {
    const auto vp = positives.row(p);
    const double tp = dot(query, vp) / tau;
    const double m = nq > 0 ? std::max(tp, max_neg) : tp;
    const double ep = std::exp(tp - m);
    double s_neg = 0.0;
    for (size_t q = 0; q < nq; ++q) s_neg += std::exp(tq[q] - m);
    const double z = ep + s_neg;
    loss_sum += -(tp - m - std::log(z));

    const double p_pos = ep / z;
    const double coef = inv_np / tau;
    // d/dq: -(1-p+) v+ + sum_q p- v-
    for (int k = 0; k < d; ++k) res.grad_query[k] -= coef * (1.0 - p_pos) * vp[k];
    for (size_t q = 0; q < nq; ++q) {
      const double pq = std::exp(tq[q] - m) / z;
      const auto vq = negatives.row(q);
      auto gq = res.grad_negatives.row(q);
      for (int k = 0; k < d; ++k) {
        res.grad_query[k] += coef * pq * vq[k];
        gq[k] += coef * pq * query[k];
      }
    }
    auto gp = res.grad_positives.row(p);
    for (int k = 0; k < d; ++k) gp[k] -= coef * (1.0 - p_pos) * query[k];
  }
  res.loss = loss_sum * inv_np;
  return res;
}

LayerLossResult pixel_anchor_layer_loss(const EmbeddingSet& set, const FusedAnchorSet& anchors,
                                        std::span<const std::vector<int32_t>> positives,
                                        std::span<const std::vector<int32_t>> negatives,
                                        double tau) {
  if (tau <= 0.0) throw ArgumentError("pixel_anchor_layer_loss: tau must be positive");
  const int n_classes = anchors.n_classes;
  const int d = anchors.dim;
  if (set.dim != d) throw ArgumentError("pixel_anchor_layer_loss: dimension mismatch");
  if (int(positives.size()) != n_classes || int(negatives.size()) != n_classes)
    throw ArgumentError("pixel_anchor_layer_loss: pools must cover every class");

  LayerLossResult res;
  res.grad_embeddings.assign(set.count() * size_t(d), 0.0);
  res.grad_anchors.assign(size_t(n_classes) * d, 0.0);
  res.mean_p_pos.assign(n_classes, 0.0);
  res.mean_p_neg.assign(n_classes, 0.0);

  std::vector<int> contributing;
  for (int n = 0; n < n_classes; ++n) {
    if (positives[n].empty()) continue;
    if (!anchors.valid[n]) {
      ++res.skipped_invalid_anchor;
      continue;
    }
    contributing.push_back(n);
  }
  res.contributing_classes = int(contributing.size());
  if (contributing.empty()) return res;
  const double inv_nc = 1.0 / double(contributing.size());

  std::vector<double> tq;
  std::vector<double> u(d);
  for (int n : contributing) {
    const auto anchor = anchors.unit_of(n);
    const auto& pos = positives[size_t(n)];
    const auto& neg = negatives[size_t(n)];
    const size_t np = pos.size();
    const size_t nq = neg.size();
    const double scale = inv_nc / double(np);

    tq.assign(nq, 0.0);
    double max_neg = -std::numeric_limits<double>::infinity();
    for (size_t q = 0; q < nq; ++q) {
      tq[q] = dot(anchor, set.vec(size_t(neg[q]))) / tau;
      max_neg = std::max(max_neg, tq[q]);
    }
    // S and U accumulate exp(tq - max_neg) and its vector-weighted sum once;
    // per-positive terms rescale them instead of rescanning the pool.
    double s_shift = 0.0;
    std::fill(u.begin(), u.end(), 0.0);
    for (size_t q = 0; q < nq; ++q) {
      const double e = std::exp(tq[q] - max_neg);
      s_shift += e;
      const auto vq = set.vec(size_t(neg[q]));
      for (int k = 0; k < d; ++k) u[k] += e * vq[k];
    }

    double loss_sum = 0.0;
    double neg_coef_sum = 0.0;  // sum_p exp(max_neg - m_p) / z_p
    double p_pos_sum = 0.0;
    double p_neg_sum = 0.0;
    double* ga = res.grad_anchors.data() + size_t(n) * d;
    for (size_t p = 0; p < np; ++p) {
      const auto vp = set.vec(size_t(pos[p]));
      const double tp = dot(anchor, vp) / tau;
      const double m = nq > 0 ? std::max(tp, max_neg) : tp;
      const double ep = std::exp(tp - m);
      const double neg_shift = nq > 0 ? std::exp(max_neg - m) : 0.0;
      const double z = ep + s_shift * neg_shift;
      loss_sum += -(tp - m - std::log(z));

      const double p_pos = ep / z;
      p_pos_sum += p_pos;
      p_neg_sum += s_shift * neg_shift / z;
      const double coef = scale / tau;
      for (int k = 0; k < d; ++k)
        ga[k] += coef * (-(1.0 - p_pos) * vp[k] + neg_shift / z * u[k]);
      double* gp = res.grad_embeddings.data() + size_t(pos[p]) * d;
      for (int k = 0; k < d; ++k) gp[k] -= coef * (1.0 - p_pos) * anchor[k];
      neg_coef_sum += neg_shift / z;
    }
    for (size_t q = 0; q < nq; ++q) {
      const double w = scale / tau * std::exp(tq[q] - max_neg) * neg_coef_sum;
      double* gq = res.grad_embeddings.data() + size_t(neg[q]) * d;
      for (int k = 0; k < d; ++k) gq[k] += w * anchor[k];
    }

    res.loss += loss_sum * inv_nc / double(np);
    res.mean_p_pos[n] = p_pos_sum / double(np);
    res.mean_p_neg[n] = nq > 0 ? p_neg_sum / double(np * nq) : 0.0;
  }
  return res;
}

std::vector<double> grad_pa_wrt_anchor(std::span<const double> anchor, const VecArray& positives,
                                       const VecArray& negatives, double tau, int n_classes) {
  const int d = int(anchor.size());
  if (positives.rows() == 0) throw ArgumentError("grad_pa_wrt_anchor: positives must be nonempty");
  if (tau <= 0.0 || n_classes <= 0)
    throw ArgumentError("grad_pa_wrt_anchor: tau and n_classes must be positive");

  const size_t np = positives.rows();
  const size_t nq = negatives.rows();
  std::vector<double> tq(nq);
  double max_neg = -std::numeric_limits<double>::infinity();
  for (size_t q = 0; q < nq; ++q) {
    tq[q] = dot(anchor, negatives.row(q)) / tau;
    max_neg = std::max(max_neg, tq[q]);
  }

  std::vector<double> grad(d, 0.0);
  const double coef = -1.0 / (tau * double(n_classes) * double(np));
  for (size_t p = 0; p < np; ++p) {
    const auto vp = positives.row(p);
    const double tp = dot(anchor, vp) / tau;
    const double m = nq > 0 ? std::max(tp, max_neg) : tp;
    const double ep = std::exp(tp - m);
    double z = ep;
    for (size_t q = 0; q < nq; ++q) z += std::exp(tq[q] - m);
    const double p_pos = ep / z;
    for (int k = 0; k < d; ++k) grad[k] += coef * (1.0 - p_pos) * vp[k];
    for (size_t q = 0; q < nq; ++q) {
      const double pq = std::exp(tq[q] - m) / z;
      const auto vq = negatives.row(q);
      for (int k = 0; k < d; ++k) grad[k] -= coef * pq * vq[k];
    }
  }
  return grad;
}

PixelAnchorResult pixel_anchor_loss(const PixelAnchorInput& in, const ContrastConfig& cfg,
                                    int n_classes) {
  cfg.validate();
  const size_t n_layers = in.sets.size();
  if (n_layers == 0) throw ArgumentError("pixel_anchor_loss: no layers");
  if (cfg.lambda.size() != n_layers)
    throw ArgumentError("pixel_anchor_loss: lambda count must match layer count");
  if (in.positives.size() != n_layers || in.negatives.size() != n_layers)
    throw ArgumentError("pixel_anchor_loss: pool shapes must match layer count");

  PixelAnchorResult res;
  res.per_layer.assign(n_layers, 0.0);
  res.grad_embeddings.resize(n_layers);
  res.grad_anchors.resize(n_layers);
  res.mean_p_pos.resize(n_layers);
  res.mean_p_neg.resize(n_layers);
  res.anchors.reserve(n_layers);
  res.fused.reserve(n_layers);

  const int d = in.sets.front()->dim;
  for (size_t i = 0; i < n_layers; ++i) {
    if (in.sets[i]->dim != d) throw ArgumentError("pixel_anchor_loss: mixed layer dimensions");
    res.anchors.push_back(compute_anchors(*in.sets[i], n_classes));
  }
  const AnchorSet& top = res.anchors.back();
  for (size_t i = 0; i < n_layers; ++i)
    res.fused.push_back(fuse_anchors(res.anchors[i], top, cfg.w_low, cfg.w_high));

  // Gradient w.r.t. the top layer's unit anchors, accumulated across layers.
  std::vector<double> grad_top(size_t(n_classes) * d, 0.0);
  std::vector<double> h(d);

  for (size_t i = 0; i < n_layers; ++i) {
    LayerLossResult layer = pixel_anchor_layer_loss(*in.sets[i], res.fused[i],
                                                    in.positives[i], in.negatives[i], cfg.tau);
    const double lam = cfg.lambda[i];
    res.per_layer[i] = lam * layer.loss;
    res.loss += lam * layer.loss;
    res.skipped_invalid_anchor += layer.skipped_invalid_anchor;
    res.mean_p_pos[i] = std::move(layer.mean_p_pos);
    res.mean_p_neg[i] = std::move(layer.mean_p_neg);

    res.grad_embeddings[i] = std::move(layer.grad_embeddings);
    for (double& v : res.grad_embeddings[i]) v *= lam;
    res.grad_anchors[i] = std::move(layer.grad_anchors);
    for (double& v : res.grad_anchors[i]) v *= lam;

    // Split the fused-anchor gradient between this layer's anchors and the
    // top-layer anchors.
    const FusedAnchorSet& fused = res.fused[i];
    std::vector<double> grad_low(size_t(n_classes) * d, 0.0);
    bool any_low = false;
    for (int n = 0; n < n_classes; ++n) {
      const double* g = res.grad_anchors[i].data() + size_t(n) * d;
      bool zero = true;
      for (int k = 0; k < d; ++k)
        if (g[k] != 0.0) { zero = false; break; }
      if (zero) continue;
      switch (fused.source[n]) {
        case FuseSource::kIdentity:
        case FuseSource::kHighOnly:
          for (int k = 0; k < d; ++k) grad_top[size_t(n) * d + k] += g[k];
          break;
        case FuseSource::kLowOnly:
          for (int k = 0; k < d; ++k) grad_low[size_t(n) * d + k] += g[k];
          any_low = true;
          break;
        case FuseSource::kBlend: {
          normalize_backward(fused.pre_of(n), {g, size_t(d)}, h);
          for (int k = 0; k < d; ++k) {
            grad_low[size_t(n) * d + k] += cfg.w_low * h[k];
            grad_top[size_t(n) * d + k] += cfg.w_high * h[k];
          }
          any_low = true;
          break;
        }
        case FuseSource::kInvalid:
          break;
      }
    }

    // Chain this layer's own anchors (mean + normalization) to its members.
    if (any_low && i + 1 != n_layers) {
      const AnchorSet& a = res.anchors[i];
      const EmbeddingSet& set = *in.sets[i];
      for (int n = 0; n < n_classes; ++n) {
        if (!a.valid[n]) continue;
        const double* g = grad_low.data() + size_t(n) * d;
        bool zero = true;
        for (int k = 0; k < d; ++k)
          if (g[k] != 0.0) { zero = false; break; }
        if (zero) continue;
        normalize_backward(a.mean_of(n), {g, size_t(d)}, h);
        const double inv_count = 1.0 / double(a.counts[n]);
        for (size_t e = 0; e < set.count(); ++e) {
          if (set.gt_class[e] != n || set.flagged[e]) continue;
          double* ge = res.grad_embeddings[i].data() + e * d;
          for (int k = 0; k < d; ++k) ge[k] += h[k] * inv_count;
        }
      }
    }
  }

  // Chain the accumulated top-anchor gradient into the top layer's members.
  {
    const size_t top_idx = n_layers - 1;
    const EmbeddingSet& set = *in.sets[top_idx];
    for (int n = 0; n < n_classes; ++n) {
      if (!top.valid[n]) continue;
      const double* g = grad_top.data() + size_t(n) * d;
      bool zero = true;
      for (int k = 0; k < d; ++k)
        if (g[k] != 0.0) { zero = false; break; }
      if (zero) continue;
      normalize_backward(top.mean_of(n), {g, size_t(d)}, h);
      const double inv_count = 1.0 / double(top.counts[n]);
      for (size_t e = 0; e < set.count(); ++e) {
        if (set.gt_class[e] != n || set.flagged[e]) continue;
        double* ge = res.grad_embeddings[top_idx].data() + e * d;
        for (int k = 0; k < d; ++k) ge[k] += h[k] * inv_count;
      }
    }
  }
  return res;
}

CrossEntropyResult cross_entropy(const FeatureGrid& logits, const LabelMap& gt) {
  if (logits.height != gt.height || logits.width != gt.width)
    throw ArgumentError("cross_entropy: logits and labels disagree on resolution");
  const int n = logits.dim;

  CrossEntropyResult res;
  res.grad_logits.assign(logits.data.size(), 0.0f);
  for (uint8_t v : gt.values)
    if (v != kIgnoreLabel) ++res.scored;
  if (res.scored == 0) {
    res.all_ignored = true;
    return res;
  }

  const double inv = 1.0 / double(res.scored);
  double loss = 0.0;
  std::vector<double> prob(n);
  for (size_t p = 0; p < gt.pixel_count(); ++p) {
    const uint8_t label = gt.values[p];
    if (label == kIgnoreLabel) continue;
    if (label >= n) throw ArgumentError("cross_entropy: label out of range");
    const float* lg = logits.data.data() + p * n;
    double m = lg[0];
    for (int k = 1; k < n; ++k) m = std::max(m, double(lg[k]));
    double z = 0.0;
    for (int k = 0; k < n; ++k) {
      prob[k] = std::exp(double(lg[k]) - m);
      z += prob[k];
    }
    loss += -(double(lg[label]) - m - std::log(z));
    float* grad = res.grad_logits.data() + p * n;
    for (int k = 0; k < n; ++k) grad[k] = float((prob[k] / z - (k == label ? 1.0 : 0.0)) * inv);
  }
  res.loss = loss * inv;
  return res;
}

std::string loss_report_json(const LossReport& report) {
  std::ostringstream os;
  os.precision(17);
  os << "{\"l_ce\":" << report.l_ce << ",\"l_pa\":" << report.l_pa << ",\"l_pa_per_layer\":[";
  for (size_t i = 0; i < report.l_pa_per_layer.size(); ++i) {
    if (i) os << ",";
    os << report.l_pa_per_layer[i];
  }
  os << "],\"total\":" << report.total
     << ",\"grad_norm_embeddings\":" << report.grad_norm_embeddings
     << ",\"grad_norm_anchors\":" << report.grad_norm_anchors << "}";
  return os.str();
}

}  // namespace ctxr
