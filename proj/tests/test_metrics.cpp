#include <doctest.h>

#include <cmath>

#include "ctxr/metrics.hpp"
#include "ctxr/rng.hpp"
#include "oracles.hpp"

using namespace ctxr;

namespace {

LabelMap random_labels(int h, int w, int n_classes, uint64_t seed) {
  LabelMap map(h, w);
  Rng rng(seed, 3);
  for (auto& v : map.values) v = uint8_t(rng.next_below(uint64_t(n_classes)));
  return map;
}

}  // namespace

TEST_CASE("miou") {
  SUBCASE("perfect prediction scores 100") {
    const LabelMap gt = random_labels(8, 8, 3, 1);
    ConfusionMatrix cm(3);
    cm.add(gt, gt);
    CHECK(miou(cm).miou == doctest::Approx(100.0));
  }
  SUBCASE("constant prediction over a half-half ground truth scores 25") {
    LabelMap gt(2, 2);
    gt.at(0, 0) = 0;
    gt.at(0, 1) = 0;
    gt.at(1, 0) = 1;
    gt.at(1, 1) = 1;
    const LabelMap pred(2, 2, 0);
    ConfusionMatrix cm(2);
    cm.add(gt, pred);
    const IouReport rep = miou(cm);
    CHECK(rep.per_class[0] == doctest::Approx(50.0));
    CHECK(rep.per_class[1] == doctest::Approx(0.0));
    CHECK(rep.miou == doctest::Approx(25.0));
  }
  SUBCASE("random instances match the per-pixel oracle") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
      const LabelMap gt = random_labels(8, 8, 3, seed);
      const LabelMap pred = random_labels(8, 8, 3, seed + 100);
      ConfusionMatrix cm(3);
      cm.add(gt, pred);
      CHECK(miou(cm).miou == doctest::Approx(oracle::miou_percent(gt, pred, 3)).epsilon(1e-12));
    }
  }
  SUBCASE("per-class IoU is symmetric in prediction and ground truth") {
    const LabelMap a = random_labels(8, 8, 4, 7);
    const LabelMap b = random_labels(8, 8, 4, 8);
    ConfusionMatrix ab(4), ba(4);
    ab.add(a, b);
    ba.add(b, a);
    const IouReport rab = miou(ab), rba = miou(ba);
    for (int n = 0; n < 4; ++n) {
      if (!rab.counted[n]) continue;
      CHECK(rab.per_class[n] == doctest::Approx(rba.per_class[n]).epsilon(1e-12));
    }
  }
  SUBCASE("classes absent everywhere are excluded from the mean") {
    const LabelMap gt(2, 2, 0);
    ConfusionMatrix cm(3);
    cm.add(gt, gt);
    const IouReport rep = miou(cm);
    CHECK(rep.counted[0] == 1);
    CHECK(rep.counted[1] == 0);
    CHECK(rep.miou == doctest::Approx(100.0));
  }
  SUBCASE("empty input is undefined") {
    ConfusionMatrix cm(2);
    CHECK_THROWS_AS(miou(cm), UndefinedError);
  }
  SUBCASE("ignored pixels are never scored") {
    LabelMap gt(2, 2, 0);
    gt.at(0, 0) = kIgnoreLabel;
    LabelMap pred(2, 2, 1);
    ConfusionMatrix cm(2);
    cm.add(gt, pred);
    CHECK(cm.total() == 3);
  }
  SUBCASE("shards merge by addition") {
    const LabelMap gt = random_labels(4, 4, 3, 11);
    const LabelMap pred = random_labels(4, 4, 3, 12);
    ConfusionMatrix whole(3), a(3), b(3);
    whole.add(gt, pred);
    whole.add(gt, pred);
    a.add(gt, pred);
    b.add(gt, pred);
    a.merge(b);
    CHECK(a.counts == whole.counts);
  }
}

TEST_CASE("instance-weighted IoU") {
  SUBCASE("equal instance sizes reduce to plain IoU") {
    LabelMap gt(2, 4, 0);
    LabelMap pred(2, 4, 0);
    InstanceMap inst(2, 4);
    // Two class-1 instances of equal size 2.
    gt.at(0, 0) = 1;
    gt.at(0, 1) = 1;
    inst.at(0, 0) = 1;
    inst.at(0, 1) = 1;
    gt.at(1, 0) = 1;
    gt.at(1, 1) = 1;
    inst.at(1, 0) = 2;
    inst.at(1, 1) = 2;
    pred.at(0, 0) = 1;
    pred.at(1, 0) = 1;
    pred.at(1, 1) = 1;
    const std::vector<double> avg = {0.0, 2.0};
    const double got = iiou(pred, gt, inst, avg, 2);
    // Plain IoU of class 1: TP=3, FN=1, FP=0.
    CHECK(got == doctest::Approx(75.0));
  }
  SUBCASE("missing a small instance hurts iIoU more than IoU") {
    LabelMap gt(1, 8, 0);
    LabelMap pred(1, 8, 0);
    InstanceMap inst(1, 8);
    for (int x = 0; x < 6; ++x) {
      gt.at(0, x) = 1;
      inst.at(0, x) = 1;  // large instance, size 6
    }
    gt.at(0, 6) = 1;
    inst.at(0, 6) = 2;  // small instance, size 1
    for (int x = 0; x < 6; ++x) pred.at(0, x) = 1;  // large found, small missed
    InstanceSizeSurvey survey(2);
    survey.add(gt, inst);
    const std::vector<double> avg = survey.averages();
    const double weighted = iiou(pred, gt, inst, avg, 2);
    ConfusionMatrix cm(2);
    cm.add(gt, pred);
    const double plain = miou(cm).per_class[1];
    CHECK(weighted < plain);
  }
  SUBCASE("hand-computed two-instance case") {
    // Class 1: instance A size 4 (3 found), instance B size 2 (0 found).
    // Average size 3. Weights: A -> 3/4, B -> 3/2.
    // iTP = 3 * 3/4 = 2.25; iFN = 1 * 3/4 + 2 * 3/2 = 3.75; FP = 1.
    LabelMap gt(1, 8, 0);
    LabelMap pred(1, 8, 0);
    InstanceMap inst(1, 8);
    for (int x = 0; x < 4; ++x) {
      gt.at(0, x) = 1;
      inst.at(0, x) = 1;
    }
    gt.at(0, 4) = 1;
    inst.at(0, 4) = 2;
    gt.at(0, 5) = 1;
    inst.at(0, 5) = 2;
    pred.at(0, 0) = 1;
    pred.at(0, 1) = 1;
    pred.at(0, 2) = 1;
    pred.at(0, 7) = 1;  // false positive
    InstanceSizeSurvey survey(2);
    survey.add(gt, inst);
    const double got = iiou(pred, gt, inst, survey.averages(), 2);
    const double expected = 100.0 * 2.25 / (2.25 + 1.0 + 3.75);
    CHECK(got == doctest::Approx(expected).epsilon(1e-12));
  }
  SUBCASE("an instance spanning two classes is a format error") {
    LabelMap gt(1, 2, 0);
    gt.at(0, 1) = 1;
    const LabelMap pred(1, 2, 0);
    InstanceMap inst(1, 2);
    inst.at(0, 0) = 1;
    inst.at(0, 1) = 1;
    const std::vector<double> avg = {1.0, 1.0};
    CHECK_THROWS_AS(iiou(pred, gt, inst, avg, 2), FormatError);
  }
  SUBCASE("nonpositive average size is a format error") {
    LabelMap gt(1, 2, 1);
    const LabelMap pred(1, 2, 1);
    InstanceMap inst(1, 2);
    inst.at(0, 0) = 1;
    inst.at(0, 1) = 1;
    const std::vector<double> avg = {0.0, 0.0};
    CHECK_THROWS_AS(iiou(pred, gt, inst, avg, 2), FormatError);
  }
}

TEST_CASE("boundary mIoU") {
  SUBCASE("a radius covering the image equals plain mIoU") {
    const LabelMap gt = random_labels(8, 8, 3, 31);
    const LabelMap pred = random_labels(8, 8, 3, 32);
    ConfusionMatrix cm(3);
    cm.add(gt, pred);
    CHECK(boundary_miou(pred, gt, 100.0, 3) == doctest::Approx(miou(cm).miou).epsilon(1e-12));
    CHECK(boundary_miou(pred, gt, std::numeric_limits<double>::infinity(), 3) ==
          doctest::Approx(miou(cm).miou).epsilon(1e-12));
  }
  SUBCASE("constant ground truth has no boundaries") {
    const LabelMap gt(4, 4, 1);
    const LabelMap pred(4, 4, 1);
    CHECK_THROWS_AS(boundary_miou(pred, gt, 5.0, 2), UndefinedError);
  }
  SUBCASE("two-region ground truth matches a brute-force masked confusion") {
    LabelMap gt(8, 8, 0);
    for (int y = 0; y < 8; ++y)
      for (int x = 4; x < 8; ++x) gt.at(y, x) = 1;
    const LabelMap pred = random_labels(8, 8, 2, 33);
    const double radius = 1.0;
    // Boundary pixels are columns 3 and 4; radius 1 adds columns 2 and 5.
    ConfusionMatrix cm(2);
    for (int y = 0; y < 8; ++y)
      for (int x = 2; x <= 5; ++x) ++cm.at(gt.at(y, x), pred.at(y, x));
    CHECK(boundary_miou(pred, gt, radius, 2) == doctest::Approx(miou(cm).miou).epsilon(1e-12));
  }
}

TEST_CASE("alignment") {
  SUBCASE("identical features align perfectly") {
    std::vector<VecArray> sets(2, VecArray(3));
    const std::vector<double> v = {1.0, 2.0, 3.0};
    for (int i = 0; i < 4; ++i) sets[0].push(v);
    const std::vector<double> w = {-1.0, 0.0, 1.0};
    for (int i = 0; i < 3; ++i) sets[1].push(w);
    CHECK(alignment(sets) == 0.0);
  }
  SUBCASE("two unit vectors at distance one give a class term of one half") {
    std::vector<VecArray> sets(1, VecArray(2));
    sets[0].push(std::vector<double>{1.0, 0.0});
    sets[0].push(std::vector<double>{0.0, 0.0});
    CHECK(alignment(sets) == doctest::Approx(0.5).epsilon(1e-15));
  }
  SUBCASE("random instances match the brute-force oracle") {
    Rng rng(41, 1);
    for (int trial = 0; trial < 10; ++trial) {
      std::vector<VecArray> sets(3, VecArray(4));
      for (int n = 0; n < 3; ++n) {
        const int count = 1 + int(rng.next_below(8));
        for (int i = 0; i < count; ++i) {
          std::vector<double> v(4);
          for (double& c : v) c = rng.next_gauss();
          sets[n].push(v);
        }
      }
      CHECK(alignment(sets) == doctest::Approx(oracle::alignment_value(sets)).epsilon(1e-10));
    }
  }
  SUBCASE("translation invariance") {
    Rng rng(42, 1);
    std::vector<VecArray> sets(2, VecArray(3));
    for (int n = 0; n < 2; ++n)
      for (int i = 0; i < 5; ++i) {
        std::vector<double> v(3);
        for (double& c : v) c = rng.next_gauss();
        sets[n].push(v);
      }
    const double base = alignment(sets);
    for (VecArray& set : sets)
      for (size_t i = 0; i < set.data.size(); ++i) set.data[i] += (i % 3 == 0) ? 5.0 : -2.0;
    CHECK(alignment(sets) == doctest::Approx(base).epsilon(1e-9));
  }
  SUBCASE("all-empty input is undefined") {
    std::vector<VecArray> sets(2, VecArray(3));
    CHECK_THROWS_AS(alignment(sets), UndefinedError);
  }
}

TEST_CASE("uniformity and neighborhood uniformity") {
  SUBCASE("two centroids at distance d") {
    VecArray c(2);
    c.push(std::vector<double>{0.0, 0.0});
    c.push(std::vector<double>{3.0, 4.0});
    CHECK(uniformity(c) == doctest::Approx(5.0).epsilon(1e-15));
    CHECK(neighborhood_uniformity(c, 1) == doctest::Approx(5.0).epsilon(1e-15));
  }
  SUBCASE("a regular simplex makes U equal to every U_l") {
    // Equilateral triangle in the plane.
    VecArray c(2);
    c.push(std::vector<double>{0.0, 0.0});
    c.push(std::vector<double>{1.0, 0.0});
    c.push(std::vector<double>{0.5, std::sqrt(3.0) / 2.0});
    const double u = uniformity(c);
    for (int l = 1; l <= 2; ++l)
      CHECK(neighborhood_uniformity(c, l) == doctest::Approx(u).epsilon(1e-12));
  }
  SUBCASE("U_(N-1) equals U") {
    Rng rng(43, 1);
    VecArray c(4);
    for (int i = 0; i < 5; ++i) {
      std::vector<double> v(4);
      for (double& x : v) x = rng.next_gauss();
      c.push(v);
    }
    CHECK(neighborhood_uniformity(c, 4) == doctest::Approx(uniformity(c)).epsilon(1e-12));
  }
  SUBCASE("random five-class instance matches a sort oracle") {
    Rng rng(44, 1);
    std::vector<VecArray> sets(5, VecArray(3));
    for (int n = 0; n < 5; ++n)
      for (int i = 0; i < 4; ++i) {
        std::vector<double> v(3);
        for (double& x : v) x = rng.next_gauss();
        sets[n].push(v);
      }
    const VecArray c = class_centroids(sets);
    REQUIRE(c.rows() == 5);
    for (int l : {1, 3}) {
      double expected = 0.0;
      for (size_t i = 0; i < 5; ++i) {
        std::vector<double> dist;
        for (size_t j = 0; j < 5; ++j) {
          if (i == j) continue;
          double sq = 0.0;
          for (int k = 0; k < 3; ++k) {
            const double d = c.row(i)[k] - c.row(j)[k];
            sq += d * d;
          }
          dist.push_back(std::sqrt(sq));
        }
        std::sort(dist.begin(), dist.end());
        for (int k = 0; k < l; ++k) expected += dist[k];
      }
      expected /= 5.0 * l;
      CHECK(neighborhood_uniformity(c, l) == doctest::Approx(expected).epsilon(1e-12));
    }
    // Requested l beyond N-1 clamps in the diagnostics bundle.
    const int req[] = {3, 5};
    const FeatureDiagnostics diag = feature_diagnostics(sets, req);
    CHECK(diag.neighborhood[0].second == doctest::Approx(neighborhood_uniformity(c, 3)));
    CHECK(diag.neighborhood[1].second == doctest::Approx(neighborhood_uniformity(c, 4)));
  }
  SUBCASE("argument validation") {
    VecArray c(2);
    c.push(std::vector<double>{0.0, 0.0});
    CHECK_THROWS_AS(uniformity(c), UndefinedError);
    c.push(std::vector<double>{1.0, 1.0});
    CHECK_THROWS_AS(neighborhood_uniformity(c, 2), ArgumentError);
    CHECK_THROWS_AS(neighborhood_uniformity(c, 0), ArgumentError);
  }
  SUBCASE("centroid translation invariance") {
    Rng rng(45, 1);
    std::vector<VecArray> sets(3, VecArray(2));
    for (int n = 0; n < 3; ++n)
      for (int i = 0; i < 3; ++i) {
        std::vector<double> v(2);
        for (double& x : v) x = rng.next_gauss();
        sets[n].push(v);
      }
    VecArray c = class_centroids(sets);
    const double u = uniformity(c);
    for (size_t i = 0; i < c.rows(); ++i) {
      c.row(i)[0] += 7.0;
      c.row(i)[1] -= 3.0;
    }
    CHECK(uniformity(c) == doctest::Approx(u).epsilon(1e-12));
  }
}

TEST_CASE("cosine-vs-distance profile") {
  const int d = 3;
  // One class, all error pixels, every embedding equal to the anchor.
  FeatureGrid grid(1, 2, 3, d);
  for (size_t p = 0; p < grid.pixel_count(); ++p) grid.data[p * d] = 1.0f;
  const LabelMap gt(2, 3, 0);
  const LabelMap pred(2, 3, 1);  // everything mispredicted
  const EmbeddingSet set = flatten(grid, gt, pred);

  FusedAnchorSet anchors;
  anchors.n_classes = 1;
  anchors.dim = d;
  anchors.pre = {1.0, 0.0, 0.0};
  anchors.unit = {1.0, 0.0, 0.0};
  anchors.valid = {1};
  anchors.source = {FuseSource::kIdentity};

  const BinaryErrorMap bmap = error_map(pred, gt, 0);
  const DistanceMap dm = distance_transform(bmap, extract_edges(bmap));
  const std::vector<DistanceMap> maps = {dm};

  ProfileAccumulator acc(1);
  acc.add(set, anchors, maps);

  uint64_t total = 0;
  for (int b = 0; b < kProfileBins; ++b) {
    total += acc.count[b];
    if (acc.count[b] > 0)
      CHECK(acc.cos_sum[b] / double(acc.count[b]) == doctest::Approx(1.0).epsilon(1e-6));
  }
  CHECK(total == 6);

  const std::vector<ProfileAccumulator> layers = {acc};
  const std::string csv = profile_csv(layers);
  CHECK(csv.find("layer,bin_lo,bin_hi,count,mean_cos") == 0);
  CHECK(csv.find("1,10,inf,") != std::string::npos);

  SUBCASE("a single error pixel fills exactly one bin") {
    LabelMap one_pred = gt;
    one_pred.at(0, 0) = 1;
    const EmbeddingSet single = flatten(grid, gt, one_pred);
    const BinaryErrorMap bm = error_map(one_pred, gt, 0);
    const DistanceMap dmap = distance_transform(bm, extract_edges(bm));
    const std::vector<DistanceMap> ms = {dmap};
    ProfileAccumulator single_acc(1);
    single_acc.add(single, anchors, ms);
    uint64_t nonempty = 0, count = 0;
    for (int b = 0; b < kProfileBins; ++b) {
      if (single_acc.count[b] > 0) ++nonempty;
      count += single_acc.count[b];
    }
    CHECK(nonempty == 1);
    CHECK(count == 1);
  }
}
