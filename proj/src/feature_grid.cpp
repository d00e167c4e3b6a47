#include "ctxr/feature_grid.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace ctxr {

FeatureGrid::FeatureGrid(int layer_index, int h, int w, int d)
    : layer(layer_index), height(h), width(w), dim(d) {
  if (h <= 0 || w <= 0 || d <= 0)
    throw ArgumentError("feature grid dimensions must be positive");
  data.assign(size_t(h) * size_t(w) * size_t(d), 0.0f);
}

LayerGeometry LayerGeometry::make(int full_h, int full_w, int n_layers) {
  if (full_h <= 0 || full_w <= 0 || n_layers <= 0)
    throw ArgumentError("layer geometry dimensions must be positive");
  LayerGeometry geo;
  geo.full_height = full_h;
  geo.full_width = full_w;
  for (int i = 0; i < n_layers; ++i) {
    const int div = 1 << i;
    geo.layer_dims.emplace_back((full_h + div - 1) / div, (full_w + div - 1) / div);
  }
  return geo;
}

namespace {

void put_u32(std::ostream& out, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::istream& in, size_t& offset, const char* what) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (in.gcount() != 4)
    throw FormatError(std::string("truncated CTXF header: missing ") + what, offset);
  offset += 4;
  return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
}

}  // namespace

void write_ctxf(const FeatureGrid& grid, std::ostream& out) {
  out.write("CTXF", 4);
  put_u32(out, 1);
  put_u32(out, uint32_t(grid.layer));
  put_u32(out, uint32_t(grid.height));
  put_u32(out, uint32_t(grid.width));
  put_u32(out, uint32_t(grid.dim));
  static_assert(sizeof(float) == 4);
  out.write(reinterpret_cast<const char*>(grid.data.data()),
            std::streamsize(grid.data.size() * 4));
}

void write_ctxf(const FeatureGrid& grid, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path + " for writing", 0);
  write_ctxf(grid, f);
  if (!f) throw FormatError("failed writing " + path, 0);
}

FeatureGrid read_ctxf(std::istream& in) {
  size_t offset = 0;
  char magic[4] = {0, 0, 0, 0};
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, "CTXF", 4) != 0)
    throw FormatError("bad CTXF magic", 0);
  offset = 4;

  const uint32_t version = get_u32(in, offset, "version");
  if (version != 1) throw FormatError("unsupported CTXF version " + std::to_string(version), 4);
  const uint32_t layer = get_u32(in, offset, "layer");
  const uint32_t h = get_u32(in, offset, "height");
  const uint32_t w = get_u32(in, offset, "width");
  const uint32_t d = get_u32(in, offset, "dim");
  if (h == 0 || w == 0 || d == 0)
    throw FormatError("zero CTXF dimension", offset);
  const uint64_t count = uint64_t(h) * uint64_t(w) * uint64_t(d);
  if (count > (uint64_t(1) << 31))
    throw FormatError("CTXF dimensions overflow", offset);

  FeatureGrid grid{int(layer), int(h), int(w), int(d)};
  in.read(reinterpret_cast<char*>(grid.data.data()), std::streamsize(count * 4));
  if (size_t(in.gcount()) != count * 4)
    throw FormatError("truncated CTXF payload", offset + size_t(in.gcount()));
  return grid;
}

FeatureGrid read_ctxf(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path, 0);
  return read_ctxf(f);
}

}  // namespace ctxr
