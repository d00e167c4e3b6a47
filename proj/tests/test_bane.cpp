#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "ctxr/bane.hpp"
#include "ctxr/rng.hpp"
#include "oracles.hpp"

using namespace ctxr;

namespace {

BinaryErrorMap make_map(int h, int w, const std::vector<uint8_t>& values, int cls = 1) {
  BinaryErrorMap map;
  map.cls = cls;
  map.height = h;
  map.width = w;
  map.values = values;
  return map;
}

BinaryErrorMap random_map(int h, int w, uint64_t seed, double density = 0.4) {
  BinaryErrorMap map;
  map.cls = 1;
  map.height = h;
  map.width = w;
  map.values.assign(size_t(h) * w, 0);
  Rng rng(seed, 13);
  for (auto& v : map.values) v = rng.next_unit() < density ? 1 : 0;
  return map;
}

// Embedding set whose entries cover every pixel of an h x w grid.
EmbeddingSet full_grid_set(int h, int w, const LabelMap& gt, const LabelMap& pred) {
  FeatureGrid grid(1, h, w, 2);
  for (size_t p = 0; p < grid.pixel_count(); ++p) grid.data[p * 2] = 1.0f;
  return flatten(grid, gt, pred);
}

}  // namespace

TEST_CASE("error map marks exactly the mispredicted pixels of the class") {
  SUBCASE("perfect prediction") {
    LabelMap gt(4, 4);
    Rng rng(1, 1);
    for (auto& v : gt.values) v = uint8_t(rng.next_below(3));
    const BinaryErrorMap map = error_map(gt, gt, 1);
    for (uint8_t v : map.values) CHECK(v == 0);
  }
  SUBCASE("uniformly wrong prediction") {
    const LabelMap gt(3, 3, 2);
    const LabelMap pred(3, 3, 0);
    const BinaryErrorMap map = error_map(pred, gt, 2);
    for (uint8_t v : map.values) CHECK(v == 1);
  }
  SUBCASE("random maps match the per-pixel rule") {
    Rng rng(2, 2);
    for (int trial = 0; trial < 30; ++trial) {
      LabelMap gt(4, 4), pred(4, 4);
      for (auto& v : gt.values) v = rng.next_unit() < 0.1 ? kIgnoreLabel : uint8_t(rng.next_below(3));
      for (auto& v : pred.values) v = uint8_t(rng.next_below(3));
      const BinaryErrorMap map = error_map(pred, gt, 1);
      for (size_t i = 0; i < gt.pixel_count(); ++i) {
        const bool expected = gt.values[i] != kIgnoreLabel && gt.values[i] == 1 && pred.values[i] != 1;
        CHECK(map.values[i] == (expected ? 1 : 0));
      }
    }
  }
  SUBCASE("dimension mismatch") {
    const LabelMap gt(2, 2, 0);
    const LabelMap pred(2, 3, 0);
    CHECK_THROWS_AS(error_map(pred, gt, 0), ArgumentError);
  }
}

TEST_CASE("edge extraction") {
  SUBCASE("an isolated error pixel is an edge") {
    BinaryErrorMap map = make_map(5, 5, std::vector<uint8_t>(25, 0));
    map.at(2, 2) = 1;
    const EdgeSet edges = extract_edges(map);
    REQUIRE(edges.pixels.size() == 1);
    CHECK(edges.pixels[0] == std::pair<uint16_t, uint16_t>(2, 2));
  }
  SUBCASE("a solid 3x3 block has eight perimeter edges") {
    BinaryErrorMap map = make_map(5, 5, std::vector<uint8_t>(25, 0));
    for (int y = 1; y <= 3; ++y)
      for (int x = 1; x <= 3; ++x) map.at(y, x) = 1;
    const EdgeSet edges = extract_edges(map);
    CHECK(edges.pixels.size() == 8);
    for (auto [y, x] : edges.pixels) CHECK(!(y == 2 && x == 2));
  }
  SUBCASE("random maps equal the brute-force neighbor scan") {
    for (uint64_t seed = 0; seed < 30; ++seed) {
      const BinaryErrorMap map = random_map(16, 16, seed);
      const EdgeSet edges = extract_edges(map);
      CHECK(edges.pixels == oracle::edges_of(map));
    }
  }
}

TEST_CASE("distance transform") {
  SUBCASE("all pixels edges means zero distance everywhere") {
    const BinaryErrorMap map = make_map(2, 2, {1, 1, 1, 1});
    const DistanceMap dm = distance_transform(map, extract_edges(map));
    for (int y = 0; y < 2; ++y)
      for (int x = 0; x < 2; ++x) CHECK(dm.sq_at(y, x) == 0);
  }
  SUBCASE("a full five-wide strip has 0,1,2,1,0 rows in its interior") {
    const BinaryErrorMap map = make_map(5, 5, std::vector<uint8_t>(25, 1));
    const DistanceMap dm = distance_transform(map, extract_edges(map));
    const float expected[5] = {0.0f, 1.0f, 2.0f, 1.0f, 0.0f};
    for (int x = 0; x < 5; ++x) CHECK(dm.at(2, x) == expected[x]);
  }
  SUBCASE("zero distance exactly on edge pixels") {
    const BinaryErrorMap map = random_map(16, 16, 99);
    const EdgeSet edges = extract_edges(map);
    const DistanceMap dm = distance_transform(map, edges);
    std::set<std::pair<uint16_t, uint16_t>> edge_set(edges.pixels.begin(), edges.pixels.end());
    for (int y = 0; y < 16; ++y) {
      for (int x = 0; x < 16; ++x) {
        if (!map.at(y, x)) {
          CHECK(dm.sq_at(y, x) == -1);
          continue;
        }
        const bool is_edge = edge_set.count({uint16_t(y), uint16_t(x)}) > 0;
        CHECK((dm.sq_at(y, x) == 0) == is_edge);
      }
    }
  }
  SUBCASE("fast transform equals brute force exactly on random maps") {
    for (uint64_t seed = 0; seed < 200; ++seed) {
      const BinaryErrorMap map = random_map(16, 16, seed, 0.35);
      const EdgeSet edges = extract_edges(map);
      const DistanceMap dm = distance_transform(map, edges);
      const std::vector<int64_t> ref = oracle::edt_squared(map, edges);
      for (size_t i = 0; i < ref.size(); ++i) {
        CHECK(dm.squared[i] == ref[i]);
        if (ref[i] >= 0) CHECK(dm.dist[i] == float(std::sqrt(double(ref[i]))));
      }
    }
  }
  SUBCASE("inconsistent edges are rejected") {
    const BinaryErrorMap map = make_map(2, 2, {1, 0, 0, 0});
    EdgeSet wrong;
    wrong.pixels.emplace_back(1, 1);  // not an error pixel
    CHECK_THROWS_AS(distance_transform(map, wrong), ArgumentError);
    CHECK_THROWS_AS(distance_transform(map, EdgeSet{}), ArgumentError);
  }
}

TEST_CASE("negative selection") {
  // 4x4 with a known error pattern: gt class 1 everywhere, prediction wrong on
  // ten pixels forming an L-shaped region.
  LabelMap gt(4, 4, 1);
  LabelMap pred(4, 4, 1);
  const std::vector<std::pair<int, int>> wrong = {{0, 0}, {0, 1}, {0, 2}, {1, 0}, {1, 1},
                                                  {1, 2}, {2, 0}, {2, 1}, {3, 0}, {3, 3}};
  for (auto [y, x] : wrong) pred.at(y, x) = 0;
  const EmbeddingSet set = full_grid_set(4, 4, gt, pred);
  const BinaryErrorMap map = error_map(pred, gt, 1);
  const DistanceMap dm = distance_transform(map, extract_edges(map));

  SUBCASE("K=100 selects every error pixel") {
    const SelectionSet sel = select_negatives(dm, map, set, 100.0);
    CHECK(sel.entries.size() == wrong.size());
  }
  SUBCASE("K=0 selects nothing") {
    CHECK(select_negatives(dm, map, set, 0.0).entries.empty());
  }
  SUBCASE("K=50 takes the five smallest distances, ties row-major") {
    const SelectionSet sel = select_negatives(dm, map, set, 50.0);
    REQUIRE(sel.entries.size() == 5);
    // Sort oracle over (squared distance, row-major entry index).
    std::vector<std::pair<int64_t, int32_t>> order;
    for (auto [y, x] : wrong) order.emplace_back(dm.sq_at(y, x), set.entry_at(y, x));
    std::sort(order.begin(), order.end());
    for (size_t i = 0; i < 5; ++i) CHECK(sel.entries[i] == order[i].second);
  }
  SUBCASE("at least one pixel is selected for small positive K") {
    const SelectionSet sel = select_negatives(dm, map, set, 1.0);
    CHECK(sel.entries.size() == 1);
  }
  SUBCASE("selections nest monotonically in K") {
    std::vector<int32_t> prev;
    for (double k : {0.0, 10.0, 30.0, 50.0, 70.0, 100.0}) {
      const SelectionSet sel = select_negatives(dm, map, set, k);
      std::set<int32_t> cur(sel.entries.begin(), sel.entries.end());
      for (int32_t e : prev) CHECK(cur.count(e) == 1);
      prev = sel.entries;
    }
  }
  SUBCASE("selected distances dominate unselected ones") {
    const SelectionSet sel = select_negatives(dm, map, set, 40.0);
    std::set<int32_t> chosen(sel.entries.begin(), sel.entries.end());
    int64_t max_sel = -1, min_unsel = std::numeric_limits<int64_t>::max();
    for (auto [y, x] : wrong) {
      const int32_t e = set.entry_at(y, x);
      if (chosen.count(e))
        max_sel = std::max(max_sel, dm.sq_at(y, x));
      else
        min_unsel = std::min(min_unsel, dm.sq_at(y, x));
    }
    CHECK(max_sel <= min_unsel);
  }
  SUBCASE("every selected pixel is an error pixel") {
    const SelectionSet sel = select_negatives(dm, map, set, 70.0);
    for (int32_t e : sel.entries) {
      const auto [y, x] = set.pixels[e];
      CHECK(map.at(y, x) == 1);
    }
  }
  SUBCASE("K outside [0,100] is rejected") {
    CHECK_THROWS_AS(select_negatives(dm, map, set, -1.0), ArgumentError);
    CHECK_THROWS_AS(select_negatives(dm, map, set, 100.5), ArgumentError);
  }
}

TEST_CASE("negative pools combine other classes' selections") {
  SUBCASE("single class with errors feeds every other anchor") {
    SelectionSet sel0;
    sel0.cls = 0;
    sel0.entries = {3, 1, 7};
    sel0.squared = {0, 1, 4};
    const std::vector<SelectionSet> sels = {sel0};
    const auto pools = build_negative_pools(sels, 3, 1024);
    CHECK(pools[0].empty());
    CHECK(pools[1] == std::vector<int32_t>({3, 1, 7}));
    CHECK(pools[2] == std::vector<int32_t>({3, 1, 7}));
  }
  SUBCASE("each anchor's pool excludes its own class") {
    SelectionSet a, b;
    a.cls = 0;
    a.entries = {0, 1};
    a.squared = {0, 0};
    b.cls = 1;
    b.entries = {5, 6};
    b.squared = {0, 1};
    const std::vector<SelectionSet> sels = {a, b};
    const auto pools = build_negative_pools(sels, 2, 1024);
    for (int32_t e : pools[0]) CHECK((e == 5 || e == 6));
    for (int32_t e : pools[1]) CHECK((e == 0 || e == 1));
  }
  SUBCASE("random instances match the brute-force union") {
    Rng rng(17, 17);
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<SelectionSet> sels(3);
      for (int n = 0; n < 3; ++n) {
        sels[n].cls = n;
        const int count = int(rng.next_below(6));
        for (int i = 0; i < count; ++i) {
          sels[n].entries.push_back(int32_t(n * 100 + int(rng.next_below(50))));
          sels[n].squared.push_back(int64_t(rng.next_below(9)));
        }
      }
      const auto pools = build_negative_pools(sels, 3, 1024);
      for (int c = 0; c < 3; ++c) {
        std::set<int32_t> expected;
        for (int n = 0; n < 3; ++n)
          if (n != c) expected.insert(sels[n].entries.begin(), sels[n].entries.end());
        const std::set<int32_t> got(pools[c].begin(), pools[c].end());
        CHECK(got == expected);
      }
    }
  }
  SUBCASE("the cap keeps the closest entries") {
    SelectionSet sel;
    sel.cls = 0;
    sel.entries = {10, 11, 12, 13};
    sel.squared = {9, 1, 4, 0};
    const std::vector<SelectionSet> sels = {sel};
    const auto pools = build_negative_pools(sels, 2, 2);
    CHECK(pools[1] == std::vector<int32_t>({13, 11}));
  }
}
