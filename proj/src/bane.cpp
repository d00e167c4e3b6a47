#include "ctxr/bane.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <limits>

namespace ctxr {

BinaryErrorMap error_map(const LabelMap& pred, const LabelMap& gt, int cls, int layer) {
  if (pred.height != gt.height || pred.width != gt.width)
    throw ArgumentError("error_map: prediction and ground truth dimensions differ");
  BinaryErrorMap map;
  map.cls = cls;
  map.layer = layer;
  map.height = gt.height;
  map.width = gt.width;
  map.values.assign(gt.pixel_count(), 0);
  for (size_t i = 0; i < gt.pixel_count(); ++i) {
    const uint8_t g = gt.values[i];
    map.values[i] = (g != kIgnoreLabel && g == cls && pred.values[i] != cls) ? 1 : 0;
  }
  return map;
}

EdgeSet extract_edges(const BinaryErrorMap& map) {
  EdgeSet edges;
  const int h = map.height, w = map.width;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!map.at(y, x)) continue;
      const bool border = y == 0 || y == h - 1 || x == 0 || x == w - 1;
      const bool open_neighbor =
          (y > 0 && !map.at(y - 1, x)) || (y + 1 < h && !map.at(y + 1, x)) ||
          (x > 0 && !map.at(y, x - 1)) || (x + 1 < w && !map.at(y, x + 1));
      if (border || open_neighbor) edges.pixels.emplace_back(uint16_t(y), uint16_t(x));
    }
  }
  return edges;
}

namespace {

constexpr int64_t kFar = int64_t(1) << 20;  // larger than any grid extent

int64_t floor_div(int64_t a, int64_t b) {
  const int64_t q = a / b, r = a % b;
  return (r != 0 && ((r < 0) != (b < 0))) ? q - 1 : q;
}

}  // namespace

std::vector<int64_t> squared_edt(int height, int width, const std::vector<uint8_t>& seeds) {
  const int h = height, w = width;
  // Phase 1: per-column vertical distance to the nearest seed.
  std::vector<int64_t> g(size_t(h) * w);
  for (int x = 0; x < w; ++x) {
    g[x] = seeds[x] ? 0 : kFar;
    for (int y = 1; y < h; ++y) {
      const size_t i = size_t(y) * w + x;
      g[i] = seeds[i] ? 0 : std::min(kFar, g[i - w] + 1);
    }
    for (int y = h - 2; y >= 0; --y) {
      const size_t i = size_t(y) * w + x;
      g[i] = std::min(g[i], g[i + w] + 1);
    }
  }

  // Phase 2: per-row lower envelope of x -> (x - i)^2 + g(i)^2, all integer.
  std::vector<int64_t> out(size_t(h) * w);
  std::vector<int> s(w), t(w);
  for (int y = 0; y < h; ++y) {
    const int64_t* gy = g.data() + size_t(y) * w;
    auto f = [&](int64_t x, int64_t i) { return (x - i) * (x - i) + gy[i] * gy[i]; };
    auto sep = [&](int64_t i, int64_t u) {
      return floor_div(u * u - i * i + gy[u] * gy[u] - gy[i] * gy[i], 2 * (u - i));
    };
    int q = 0;
    s[0] = 0;
    t[0] = 0;
    for (int u = 1; u < w; ++u) {
      while (q >= 0 && f(t[q], s[q]) > f(t[q], u)) --q;
      if (q < 0) {
        q = 0;
        s[0] = u;
      } else {
        const int64_t wx = 1 + sep(s[q], u);
        if (wx < w) {
          ++q;
          s[q] = u;
          t[q] = int(wx);
        }
      }
    }
    for (int u = w - 1; u >= 0; --u) {
      out[size_t(y) * w + u] = f(u, s[q]);
      if (u == t[q]) --q;
    }
  }
  return out;
}

DistanceMap distance_transform(const BinaryErrorMap& map, const EdgeSet& edges) {
  const int h = map.height, w = map.width;
  bool has_errors = false;
  for (uint8_t v : map.values) {
    if (v) { has_errors = true; break; }
  }
  if (has_errors && edges.pixels.empty())
    throw ArgumentError("distance_transform: error pixels present but edge set empty");

  std::vector<uint8_t> seeds(size_t(h) * w, 0);
  for (auto [y, x] : edges.pixels) {
    if (y >= h || x >= w || !map.at(y, x))
      throw ArgumentError("distance_transform: edge pixel inconsistent with error map");
    seeds[size_t(y) * w + x] = 1;
  }

  DistanceMap dm;
  dm.height = h;
  dm.width = w;
  dm.squared.assign(size_t(h) * w, -1);
  dm.dist.assign(size_t(h) * w, std::numeric_limits<float>::infinity());
  if (!has_errors) return dm;

  const std::vector<int64_t> sq = squared_edt(h, w, seeds);
  for (size_t i = 0; i < map.values.size(); ++i) {
    if (!map.values[i]) continue;
    dm.squared[i] = sq[i];
    dm.dist[i] = float(std::sqrt(double(sq[i])));
  }
  return dm;
}

SelectionSet select_negatives(const DistanceMap& dist, const BinaryErrorMap& map,
                              const EmbeddingSet& set, double k_percent) {
  if (k_percent < 0.0 || k_percent > 100.0)
    throw ArgumentError("select_negatives: K must lie in [0, 100]");
  if (dist.height != map.height || dist.width != map.width ||
      set.grid_height != map.height || set.grid_width != map.width)
    throw ArgumentError("select_negatives: resolution mismatch");

  SelectionSet sel;
  sel.cls = map.cls;
  sel.ratio = k_percent;
  if (k_percent == 0.0) return sel;

  // Candidate error pixels in row-major order; entry index order matches.
  std::vector<std::pair<int64_t, int32_t>> candidates;
  for (int y = 0; y < map.height; ++y) {
    for (int x = 0; x < map.width; ++x) {
      if (!map.at(y, x)) continue;
      const int32_t e = set.entry_at(y, x);
      if (e < 0) throw ArgumentError("select_negatives: error pixel missing from embedding set");
      if (set.flagged[e]) continue;
      candidates.emplace_back(dist.sq_at(y, x), e);
    }
  }
  if (candidates.empty()) return sel;

  std::stable_sort(candidates.begin(), candidates.end());
  size_t take = size_t(std::floor(k_percent * double(candidates.size()) / 100.0));
  if (take == 0) take = 1;
  take = std::min(take, candidates.size());
  sel.entries.reserve(take);
  sel.squared.reserve(take);
  for (size_t i = 0; i < take; ++i) {
    sel.squared.push_back(candidates[i].first);
    sel.entries.push_back(candidates[i].second);
  }
  return sel;
}

std::vector<std::vector<int32_t>> build_negative_pools(
    std::span<const SelectionSet> selections, int n_classes, int cap) {
  std::vector<std::vector<int32_t>> pools(n_classes);
  for (int c = 0; c < n_classes; ++c) {
    std::vector<std::pair<int64_t, int32_t>> merged;
    for (const SelectionSet& sel : selections) {
      if (sel.cls == c) continue;
      for (size_t i = 0; i < sel.entries.size(); ++i)
        merged.emplace_back(sel.squared[i], sel.entries[i]);
    }
    std::sort(merged.begin(), merged.end());
    merged.erase(std::unique(merged.begin(), merged.end()), merged.end());
    const size_t take = std::min(merged.size(), size_t(cap));
    pools[c].reserve(take);
    for (size_t i = 0; i < take; ++i) pools[c].push_back(merged[i].second);
  }
  return pools;
}

}  // namespace ctxr
