#include "ctxr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>

namespace ctxr {

ConfusionMatrix::ConfusionMatrix(int n) : n_classes(n) {
  if (n <= 0) throw ArgumentError("confusion matrix needs at least one class");
  counts.assign(size_t(n) * n, 0);
}

void ConfusionMatrix::add(const LabelMap& gt, const LabelMap& pred) {
  if (gt.height != pred.height || gt.width != pred.width)
    throw ArgumentError("confusion: prediction and ground truth dimensions differ");
  for (size_t i = 0; i < gt.pixel_count(); ++i) {
    const uint8_t g = gt.values[i];
    if (g == kIgnoreLabel) continue;
    const uint8_t p = pred.values[i];
    if (g >= n_classes || p >= n_classes)
      throw ArgumentError("confusion: class id out of range");
    ++at(g, p);
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.n_classes != n_classes) throw ArgumentError("confusion: class count mismatch");
  for (size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
}

uint64_t ConfusionMatrix::total() const {
  uint64_t t = 0;
  for (uint64_t c : counts) t += c;
  return t;
}

IouReport miou(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw UndefinedError("miou: no scored pixels");
  IouReport rep;
  rep.per_class.assign(cm.n_classes, std::numeric_limits<double>::quiet_NaN());
  rep.counted.assign(cm.n_classes, 0);
  double sum = 0.0;
  int counted = 0;
  for (int n = 0; n < cm.n_classes; ++n) {
    const uint64_t tp = cm.at(n, n);
    uint64_t fp = 0, fn = 0;
    for (int m = 0; m < cm.n_classes; ++m) {
      if (m == n) continue;
      fp += cm.at(m, n);
      fn += cm.at(n, m);
    }
    const uint64_t uni = tp + fp + fn;
    if (uni == 0) continue;
    rep.per_class[n] = 100.0 * double(tp) / double(uni);
    rep.counted[n] = 1;
    sum += rep.per_class[n];
    ++counted;
  }
  if (counted == 0) throw UndefinedError("miou: every class is empty");
  rep.miou = sum / counted;
  return rep;
}

IiouAccumulator::IiouAccumulator(int n) : n_classes(n) {
  itp.assign(n, 0.0);
  ifn.assign(n, 0.0);
  fp.assign(n, 0);
  has_instances.assign(n, 0);
}

void IiouAccumulator::add(const LabelMap& pred, const LabelMap& gt, const InstanceMap& inst,
                          std::span<const double> class_avg_size) {
  if (gt.height != pred.height || gt.width != pred.width ||
      gt.height != inst.height || gt.width != inst.width)
    throw ArgumentError("iiou: resolution mismatch");
  if (int(class_avg_size.size()) != n_classes)
    throw ArgumentError("iiou: class average sizes must cover every class");

  struct InstanceStat {
    int cls = -1;
    uint64_t size = 0;
    uint64_t tp = 0;
  };
  std::map<uint32_t, InstanceStat> stats;
  for (size_t i = 0; i < gt.pixel_count(); ++i) {
    const uint8_t g = gt.values[i];
    if (g == kIgnoreLabel) continue;
    if (g >= n_classes) throw ArgumentError("iiou: class id out of range");
    const uint8_t p = pred.values[i];
    if (p == g) {
      // counted below per instance
    } else if (p < n_classes) {
      ++fp[p];
    }
    const uint32_t id = inst.ids[i];
    if (id == 0) {
      // Pixels outside any instance contribute with weight one.
      if (p == g)
        itp[g] += 1.0;
      else
        ifn[g] += 1.0;
      continue;
    }
    InstanceStat& st = stats[id];
    if (st.cls < 0) st.cls = g;
    if (st.cls != g)
      throw FormatError("iiou: instance " + std::to_string(id) + " spans multiple classes", 0);
    ++st.size;
    if (p == g) ++st.tp;
  }

  for (const auto& [id, st] : stats) {
    if (st.size == 0) throw FormatError("iiou: instance with zero size", 0);
    const double avg = class_avg_size[st.cls];
    if (avg <= 0.0)
      throw FormatError("iiou: nonpositive average size for class " + std::to_string(st.cls), 0);
    const double w = avg / double(st.size);
    itp[st.cls] += w * double(st.tp);
    ifn[st.cls] += w * double(st.size - st.tp);
    has_instances[st.cls] = 1;
  }
}

double IiouAccumulator::value() const {
  double sum = 0.0;
  int counted = 0;
  for (int n = 0; n < n_classes; ++n) {
    if (!has_instances[n]) continue;
    const double denom = itp[n] + double(fp[n]) + ifn[n];
    if (denom <= 0.0) continue;
    sum += 100.0 * itp[n] / denom;
    ++counted;
  }
  if (counted == 0) throw UndefinedError("iiou: no instances scored");
  return sum / counted;
}

double iiou(const LabelMap& pred, const LabelMap& gt, const InstanceMap& inst,
            std::span<const double> class_avg_size, int n_classes) {
  IiouAccumulator acc(n_classes);
  acc.add(pred, gt, inst, class_avg_size);
  return acc.value();
}

void InstanceSizeSurvey::add(const LabelMap& gt, const InstanceMap& inst) {
  std::map<uint32_t, std::pair<int, uint64_t>> sizes;  // id -> (class, size)
  for (size_t i = 0; i < gt.pixel_count(); ++i) {
    const uint32_t id = inst.ids[i];
    if (id == 0) continue;
    const uint8_t g = gt.values[i];
    if (g == kIgnoreLabel || g >= n_classes) continue;
    auto& [cls, size] = sizes[id];
    cls = g;
    ++size;
  }
  for (const auto& [id, cs] : sizes) {
    size_sum[cs.first] += double(cs.second);
    ++instances[cs.first];
  }
}

std::vector<double> InstanceSizeSurvey::averages() const {
  std::vector<double> avg(n_classes, 0.0);
  for (int n = 0; n < n_classes; ++n)
    if (instances[n] > 0) avg[n] = size_sum[n] / double(instances[n]);
  return avg;
}

double boundary_miou(const LabelMap& pred, const LabelMap& gt, double radius, int n_classes) {
  if (radius < 1.0) throw ArgumentError("boundary_miou: radius must be at least 1");
  if (gt.height != pred.height || gt.width != pred.width)
    throw ArgumentError("boundary_miou: resolution mismatch");

  const int h = gt.height, w = gt.width;
  std::vector<uint8_t> seeds(size_t(h) * w, 0);
  bool any = false;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const uint8_t g = gt.at(y, x);
      if (g == kIgnoreLabel) continue;
      const auto differs = [&](int yy, int xx) {
        const uint8_t o = gt.at(yy, xx);
        return o != kIgnoreLabel && o != g;
      };
      if ((y > 0 && differs(y - 1, x)) || (y + 1 < h && differs(y + 1, x)) ||
          (x > 0 && differs(y, x - 1)) || (x + 1 < w && differs(y, x + 1))) {
        seeds[size_t(y) * w + x] = 1;
        any = true;
      }
    }
  }
  if (!any) throw UndefinedError("boundary_miou: ground truth has no class boundaries");

  const std::vector<int64_t> sq = squared_edt(h, w, seeds);
  ConfusionMatrix cm(n_classes);
  const bool unbounded = std::isinf(radius);
  const double limit = radius * radius;
  for (size_t i = 0; i < gt.pixel_count(); ++i) {
    const uint8_t g = gt.values[i];
    if (g == kIgnoreLabel) continue;
    if (!unbounded && double(sq[i]) > limit) continue;
    ++cm.at(g, pred.values[i]);
  }
  return miou(cm).miou;
}

double alignment(std::span<const VecArray> class_sets) {
  double sum = 0.0;
  int counted = 0;
  for (const VecArray& set : class_sets) {
    const size_t m = set.rows();
    if (m == 0) continue;
    double class_sum = 0.0;
    for (size_t j = 0; j < m; ++j) {
      const auto vj = set.row(j);
      for (size_t k = 0; k < m; ++k) {
        const auto vk = set.row(k);
        double sq = 0.0;
        for (size_t c = 0; c < vj.size(); ++c) {
          const double diff = vj[c] - vk[c];
          sq += diff * diff;
        }
        class_sum += std::sqrt(sq);
      }
    }
    sum += class_sum / double(m * m);
    ++counted;
  }
  if (counted == 0) throw UndefinedError("alignment: every class is empty");
  return sum / counted;
}

VecArray class_centroids(std::span<const VecArray> class_sets) {
  VecArray centroids;
  for (const VecArray& set : class_sets) {
    const size_t m = set.rows();
    if (m == 0) continue;
    if (centroids.dim == 0) centroids.dim = set.dim;
    std::vector<double> mean(set.dim, 0.0);
    for (size_t j = 0; j < m; ++j) {
      const auto v = set.row(j);
      for (int c = 0; c < set.dim; ++c) mean[c] += v[c];
    }
    for (double& v : mean) v /= double(m);
    centroids.push(mean);
  }
  return centroids;
}

namespace {

double centroid_distance(const VecArray& c, size_t i, size_t j) {
  const auto a = c.row(i), b = c.row(j);
  double sq = 0.0;
  for (size_t k = 0; k < a.size(); ++k) {
    const double diff = a[k] - b[k];
    sq += diff * diff;
  }
  return std::sqrt(sq);
}

}  // namespace

double uniformity(const VecArray& centroids) {
  const size_t n = centroids.rows();
  if (n < 2) throw UndefinedError("uniformity: needs at least two centroids");
  double sum = 0.0;
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < n; ++j)
      if (i != j) sum += centroid_distance(centroids, i, j);
  return sum / double(n * (n - 1));
}

double neighborhood_uniformity(const VecArray& centroids, int l) {
  const size_t n = centroids.rows();
  if (n < 2) throw UndefinedError("neighborhood_uniformity: needs at least two centroids");
  if (l < 1 || size_t(l) > n - 1)
    throw ArgumentError("neighborhood_uniformity: l must lie in [1, centroids-1]");
  double sum = 0.0;
  std::vector<double> dist;
  for (size_t i = 0; i < n; ++i) {
    dist.clear();
    for (size_t j = 0; j < n; ++j)
      if (i != j) dist.push_back(centroid_distance(centroids, i, j));
    std::sort(dist.begin(), dist.end());
    for (int k = 0; k < l; ++k) sum += dist[k];
  }
  return sum / (double(n) * double(l));
}

FeatureDiagnostics feature_diagnostics(std::span<const VecArray> class_sets,
                                       std::span<const int> requested_l) {
  FeatureDiagnostics diag;
  diag.alignment_value = alignment(class_sets);
  diag.centroids = class_centroids(class_sets);
  diag.uniformity_value = uniformity(diag.centroids);
  const int max_l = int(diag.centroids.rows()) - 1;
  for (int l : requested_l) {
    const int use = std::clamp(l, 1, max_l);
    diag.neighborhood.emplace_back(l, neighborhood_uniformity(diag.centroids, use));
  }
  return diag;
}

void ProfileAccumulator::add(const EmbeddingSet& set, const FusedAnchorSet& anchors,
                             std::span<const DistanceMap> per_class_maps) {
  if (int(per_class_maps.size()) != anchors.n_classes)
    throw ArgumentError("profile: one distance map per class required");
  for (size_t e = 0; e < set.count(); ++e) {
    if (set.flagged[e]) continue;
    const uint8_t n = set.gt_class[e];
    if (n >= anchors.n_classes || set.pred_class[e] == n) continue;
    if (!anchors.valid[n]) continue;
    const auto [row, col] = set.pixels[e];
    const DistanceMap& dm = per_class_maps[n];
    const float dist = dm.at(row, col);
    if (!std::isfinite(dist)) continue;
    const int bin = std::min(int(dist), kProfileBins - 1);
    const auto v = set.vec(e);
    const auto a = anchors.unit_of(n);
    double cos = 0.0;
    for (int k = 0; k < set.dim; ++k) cos += v[k] * a[k];
    cos_sum[bin] += cos;
    ++count[bin];
  }
}

void ProfileAccumulator::merge(const ProfileAccumulator& other) {
  for (int b = 0; b < kProfileBins; ++b) {
    cos_sum[b] += other.cos_sum[b];
    count[b] += other.count[b];
  }
}

std::string profile_csv(std::span<const ProfileAccumulator> layers) {
  std::ostringstream os;
  os.precision(10);
  os << "layer,bin_lo,bin_hi,count,mean_cos\n";
  for (const ProfileAccumulator& acc : layers) {
    for (int b = 0; b < kProfileBins; ++b) {
      os << acc.layer << "," << b << ",";
      if (b == kProfileBins - 1)
        os << "inf";
      else
        os << b + 1;
      os << "," << acc.count[b] << ",";
      if (acc.count[b] > 0) os << acc.cos_sum[b] / double(acc.count[b]);
      os << "\n";
    }
  }
  return os.str();
}

}  // namespace ctxr
