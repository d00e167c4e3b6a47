#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "ctxr/anchors.hpp"
#include "ctxr/rng.hpp"
#include "oracles.hpp"

using namespace ctxr;

namespace {

EmbeddingSet make_set(int dim, const std::vector<std::pair<int, std::vector<double>>>& entries) {
  EmbeddingSet set;
  set.layer = 1;
  set.dim = dim;
  for (const auto& [cls, vec] : entries) {
    set.vectors.insert(set.vectors.end(), vec.begin(), vec.end());
    set.gt_class.push_back(uint8_t(cls));
    set.pred_class.push_back(uint8_t(cls));
    set.pixels.emplace_back(0, 0);
    bool zero = true;
    for (double v : vec) zero = zero && v == 0.0;
    set.flagged.push_back(zero ? 1 : 0);
  }
  return set;
}

std::vector<double> unit(std::vector<double> v) {
  double sq = 0.0;
  for (double c : v) sq += c * c;
  const double n = std::sqrt(sq);
  for (double& c : v) c /= n;
  return v;
}

EmbeddingSet random_unit_set(int dim, int count, int n_classes, uint64_t seed) {
  Rng rng(seed, 5);
  std::vector<std::pair<int, std::vector<double>>> entries;
  for (int i = 0; i < count; ++i) {
    std::vector<double> v(dim);
    for (double& c : v) c = rng.next_gauss();
    entries.emplace_back(int(rng.next_below(uint64_t(n_classes))), unit(v));
  }
  return make_set(dim, entries);
}

}  // namespace

TEST_CASE("a singleton class anchor is the vector itself") {
  const std::vector<double> v = unit({0.3, -0.7, 0.2, 0.1});
  const EmbeddingSet set = make_set(4, {{2, v}});
  const AnchorSet a = compute_anchors(set, 4);
  REQUIRE(a.valid[2] == 1);
  for (int k = 0; k < 4; ++k) CHECK(a.unit_of(2)[k] == doctest::Approx(v[k]).epsilon(1e-12));
  CHECK(a.counts[2] == 1);
  for (int n : {0, 1, 3}) CHECK(a.valid[n] == 0);
}

TEST_CASE("antipodal vectors cancel to a degenerate anchor") {
  const std::vector<double> v = unit({1.0, 2.0, -1.0});
  std::vector<double> neg = v;
  for (double& c : neg) c = -c;
  const EmbeddingSet set = make_set(3, {{1, v}, {1, neg}});
  const AnchorSet a = compute_anchors(set, 3);
  CHECK(a.counts[1] == 2);
  CHECK(a.valid[1] == 0);
}

TEST_CASE("anchors equal the brute-force mean over random sets") {
  for (uint64_t seed = 0; seed < 5; ++seed) {
    const EmbeddingSet set = random_unit_set(6, 50, 3, seed);
    const AnchorSet a = compute_anchors(set, 3);
    for (int n = 0; n < 3; ++n) {
      const oracle::MeanAnchor ref = oracle::mean_anchor(set, n);
      CHECK(a.counts[n] == ref.count);
      if (ref.count == 0) continue;
      for (int k = 0; k < 6; ++k) {
        CHECK(std::abs(a.mean_of(n)[k] - ref.mean[k]) < 1e-9);
        CHECK(std::abs(a.unit_of(n)[k] - ref.unit[k]) < 1e-9);
      }
    }
  }
}

TEST_CASE("anchor computation is order invariant") {
  const EmbeddingSet set = random_unit_set(5, 40, 4, 7);
  const AnchorSet base = compute_anchors(set, 4);
  Rng rng(7, 9);
  for (int shuffle = 0; shuffle < 50; ++shuffle) {
    std::vector<uint32_t> perm = rng.sample_indices(uint32_t(set.count()), uint32_t(set.count()));
    EmbeddingSet shuffled;
    shuffled.layer = set.layer;
    shuffled.dim = set.dim;
    for (uint32_t i : perm) {
      const auto v = set.vec(i);
      shuffled.vectors.insert(shuffled.vectors.end(), v.begin(), v.end());
      shuffled.gt_class.push_back(set.gt_class[i]);
      shuffled.pred_class.push_back(set.pred_class[i]);
      shuffled.pixels.push_back(set.pixels[i]);
      shuffled.flagged.push_back(set.flagged[i]);
    }
    const AnchorSet a = compute_anchors(shuffled, 4);
    for (int n = 0; n < 4; ++n) {
      CHECK(a.valid[n] == base.valid[n]);
      CHECK(a.counts[n] == base.counts[n]);
      if (!a.valid[n]) continue;
      for (int k = 0; k < 5; ++k)
        CHECK(std::abs(a.unit_of(n)[k] - base.unit_of(n)[k]) < 1e-12);
    }
  }
}

TEST_CASE("an empty embedding set yields an all-invalid anchor set") {
  EmbeddingSet set;
  set.dim = 4;
  const AnchorSet a = compute_anchors(set, 3);
  for (int n = 0; n < 3; ++n) CHECK(a.valid[n] == 0);
}

TEST_CASE("out-of-range ground-truth class is rejected") {
  const EmbeddingSet set = make_set(3, {{5, unit({1.0, 0.0, 0.0})}});
  CHECK_THROWS_AS(compute_anchors(set, 3), ArgumentError);
}

TEST_CASE("batch-composition linearity of unnormalized anchors") {
  const EmbeddingSet a_set = random_unit_set(4, 30, 2, 11);
  const EmbeddingSet b_set = random_unit_set(4, 20, 2, 12);
  EmbeddingSet both = a_set;
  both.vectors.insert(both.vectors.end(), b_set.vectors.begin(), b_set.vectors.end());
  both.gt_class.insert(both.gt_class.end(), b_set.gt_class.begin(), b_set.gt_class.end());
  both.pred_class.insert(both.pred_class.end(), b_set.pred_class.begin(), b_set.pred_class.end());
  both.pixels.insert(both.pixels.end(), b_set.pixels.begin(), b_set.pixels.end());
  both.flagged.insert(both.flagged.end(), b_set.flagged.begin(), b_set.flagged.end());

  const AnchorSet aa = compute_anchors(a_set, 2);
  const AnchorSet ab = compute_anchors(b_set, 2);
  const AnchorSet au = compute_anchors(both, 2);
  for (int n = 0; n < 2; ++n) {
    const double ca = aa.counts[n], cb = ab.counts[n];
    if (ca + cb == 0) continue;
    for (int k = 0; k < 4; ++k) {
      const double expected = (ca * aa.mean_of(n)[k] + cb * ab.mean_of(n)[k]) / (ca + cb);
      CHECK(std::abs(au.mean_of(n)[k] - expected) < 1e-12);
    }
  }
}

TEST_CASE("degenerate fusion weights pass anchors through exactly") {
  const EmbeddingSet low_set = random_unit_set(6, 40, 3, 21);
  const EmbeddingSet high_set = random_unit_set(6, 40, 3, 22);
  AnchorSet low = compute_anchors(low_set, 3);
  AnchorSet high = compute_anchors(high_set, 3);
  low.layer = 1;
  high.layer = 4;

  const FusedAnchorSet all_high = fuse_anchors(low, high, 0.0, 1.0);
  for (int n = 0; n < 3; ++n) {
    if (!high.valid[n]) continue;
    for (int k = 0; k < 6; ++k) CHECK(all_high.unit_of(n)[k] == high.unit_of(n)[k]);
  }
  const FusedAnchorSet all_low = fuse_anchors(low, high, 1.0, 0.0);
  for (int n = 0; n < 3; ++n) {
    if (!low.valid[n] || !high.valid[n]) continue;
    for (int k = 0; k < 6; ++k) CHECK(all_low.unit_of(n)[k] == low.unit_of(n)[k]);
  }
}

TEST_CASE("fusing the top layer with itself is the identity") {
  const EmbeddingSet set = random_unit_set(6, 40, 3, 23);
  AnchorSet top = compute_anchors(set, 3);
  top.layer = 4;
  const FusedAnchorSet fused = fuse_anchors(top, top, 0.3, 0.7);
  for (int n = 0; n < 3; ++n) {
    CHECK(fused.valid[n] == top.valid[n]);
    if (!top.valid[n]) continue;
    CHECK(fused.source[n] == FuseSource::kIdentity);
    for (int k = 0; k < 6; ++k) CHECK(fused.unit_of(n)[k] == top.unit_of(n)[k]);
  }
}

TEST_CASE("fusion matches the brute-force weighted blend") {
  const EmbeddingSet low_set = random_unit_set(8, 60, 4, 31);
  const EmbeddingSet high_set = random_unit_set(8, 60, 4, 32);
  AnchorSet low = compute_anchors(low_set, 4);
  AnchorSet high = compute_anchors(high_set, 4);
  low.layer = 2;
  high.layer = 4;
  const double w_h = 0.7, w_l = 0.3;
  const FusedAnchorSet fused = fuse_anchors(low, high, w_l, w_h);
  for (int n = 0; n < 4; ++n) {
    if (!low.valid[n] || !high.valid[n]) continue;
    std::vector<double> blend(8);
    double sq = 0.0;
    for (int k = 0; k < 8; ++k) {
      blend[k] = w_l * low.unit_of(n)[k] + w_h * high.unit_of(n)[k];
      sq += blend[k] * blend[k];
    }
    const double norm = std::sqrt(sq);
    for (int k = 0; k < 8; ++k)
      CHECK(std::abs(fused.unit_of(n)[k] - blend[k] / norm) < 1e-15);
  }
}

TEST_CASE("classes absent below fall back to the top anchor") {
  const std::vector<double> v = unit({1.0, 1.0, 0.0});
  const EmbeddingSet low_set = make_set(3, {{0, v}});
  const EmbeddingSet high_set = make_set(3, {{0, v}, {1, unit({0.0, 1.0, 1.0})}});
  AnchorSet low = compute_anchors(low_set, 3);
  AnchorSet high = compute_anchors(high_set, 3);
  low.layer = 1;
  high.layer = 4;
  const FusedAnchorSet fused = fuse_anchors(low, high, 0.3, 0.7);
  REQUIRE(fused.valid[1] == 1);
  CHECK(fused.source[1] == FuseSource::kHighOnly);
  for (int k = 0; k < 3; ++k) CHECK(fused.unit_of(1)[k] == high.unit_of(1)[k]);
  CHECK(fused.valid[2] == 0);
}

TEST_CASE("unnormalized fused anchors lie on the segment between inputs") {
  const EmbeddingSet low_set = random_unit_set(5, 50, 3, 41);
  const EmbeddingSet high_set = random_unit_set(5, 50, 3, 42);
  AnchorSet low = compute_anchors(low_set, 3);
  AnchorSet high = compute_anchors(high_set, 3);
  low.layer = 1;
  high.layer = 4;
  const double w_h = 0.55;
  const FusedAnchorSet fused = fuse_anchors(low, high, 1.0 - w_h, w_h);
  for (int n = 0; n < 3; ++n) {
    if (fused.source[n] != FuseSource::kBlend) continue;
    for (int k = 0; k < 5; ++k) {
      const double expected = low.unit_of(n)[k] + w_h * (high.unit_of(n)[k] - low.unit_of(n)[k]);
      CHECK(std::abs(fused.pre_of(n)[k] - expected) < 1e-12);
    }
  }
}

TEST_CASE("fusion validates shapes and weights") {
  const EmbeddingSet set = random_unit_set(4, 10, 2, 51);
  AnchorSet a = compute_anchors(set, 2);
  const EmbeddingSet other = random_unit_set(6, 10, 2, 52);
  AnchorSet b = compute_anchors(other, 2);
  CHECK_THROWS_AS(fuse_anchors(a, b, 0.3, 0.7), ArgumentError);
  CHECK_THROWS_AS(fuse_anchors(a, a, 0.5, 0.6), ArgumentError);
  CHECK_THROWS_AS(fuse_anchors(a, a, -0.1, 1.1), ArgumentError);
}

TEST_CASE("anchor sets dump into the CTXF container with the sentinel layer") {
  const EmbeddingSet set = random_unit_set(4, 20, 3, 61);
  const AnchorSet a = compute_anchors(set, 3);
  const FeatureGrid grid = anchors_to_grid(a);
  CHECK(grid.layer == int(kAnchorLayerSentinel));
  CHECK(grid.height == 3);
  CHECK(grid.width == 1);
  CHECK(grid.dim == 4);
  for (int n = 0; n < 3; ++n) {
    if (!a.valid[n]) continue;
    for (int k = 0; k < 4; ++k)
      CHECK(grid.data[size_t(n) * 4 + k] == doctest::Approx(a.unit_of(n)[k]));
  }
}
