#include "ctxr/label_map.hpp"

#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

namespace ctxr {

LabelMap::LabelMap(int h, int w, uint8_t fill)
    : height(h), width(w), values(size_t(h) * size_t(w), fill) {
  if (h <= 0 || w <= 0) throw ArgumentError("label map dimensions must be positive");
}

void LabelMap::validate(int n_classes) const {
  for (uint8_t v : values) {
    if (v != kIgnoreLabel && v >= n_classes)
      throw ArgumentError("label value " + std::to_string(int(v)) +
                          " out of range for " + std::to_string(n_classes) + " classes");
  }
}

LabelMap downsample_labels(const LabelMap& map, int target_h, int target_w) {
  if (target_h <= 0 || target_w <= 0)
    throw ArgumentError("downsample target must be positive");
  if (target_h > map.height || target_w > map.width)
    throw ArgumentError("downsample target exceeds source dimensions");
  LabelMap out(target_h, target_w);
  for (int y = 0; y < target_h; ++y) {
    const int sy = center_sample_index(y, target_h, map.height);
    for (int x = 0; x < target_w; ++x) {
      const int sx = center_sample_index(x, target_w, map.width);
      out.at(y, x) = map.at(sy, sx);
    }
  }
  return out;
}

void write_pgm(const LabelMap& map, std::ostream& out) {
  out << "P5\n" << map.width << " " << map.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(map.values.data()),
            std::streamsize(map.values.size()));
}

void write_pgm(const LabelMap& map, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path + " for writing", 0);
  write_pgm(map, f);
  if (!f) throw FormatError("failed writing " + path, 0);
}

namespace {

// Reads one whitespace-delimited token, skipping '#' comments.
std::string next_token(std::istream& in, size_t& offset) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    ++offset;
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') ++offset;
      if (c != EOF) ++offset;
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(char(c));
  }
  return tok;
}

int parse_dim(const std::string& tok, size_t offset, const char* what) {
  if (tok.empty()) throw FormatError(std::string("truncated PGM header: missing ") + what, offset);
  long v = 0;
  try {
    v = std::stol(tok);
  } catch (const std::exception&) {
    throw FormatError(std::string("bad PGM ") + what + " '" + tok + "'", offset);
  }
  if (v <= 0 || v > 1 << 20)
    throw FormatError(std::string("PGM ") + what + " out of range", offset);
  return int(v);
}

}  // namespace

LabelMap read_pgm(std::istream& in) {
  size_t offset = 0;
  char magic[2] = {0, 0};
  in.read(magic, 2);
  if (in.gcount() != 2 || magic[0] != 'P' || magic[1] != '5')
    throw FormatError("bad PGM magic (expected P5)", 0);
  offset = 2;

  const int w = parse_dim(next_token(in, offset), offset, "width");
  const int h = parse_dim(next_token(in, offset), offset, "height");
  const std::string maxval = next_token(in, offset);
  if (maxval != "255") throw FormatError("unsupported PGM maxval '" + maxval + "'", offset);

  LabelMap map(h, w);
  in.read(reinterpret_cast<char*>(map.values.data()), std::streamsize(map.values.size()));
  if (size_t(in.gcount()) != map.values.size())
    throw FormatError("truncated PGM payload", offset + size_t(in.gcount()));
  return map;
}

LabelMap read_pgm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path, 0);
  return read_pgm(f);
}

}  // namespace ctxr
