#include "ctxr/encoder.hpp"

#include <cmath>
#include <cstring>

#include "ctxr/label_map.hpp"

namespace ctxr {

namespace {

int conv_out_dim(int in, int stride) { return (in - 1) / stride + 1; }

void conv3x3_forward(const FeatureGrid& in, const ConvParams& p, FeatureGrid& out) {
  const int h = in.height, w = in.width;
  const int ho = out.height, wo = out.width;
  const int ic = p.in_c, oc = p.out_c, s = p.stride;
  std::vector<float> acc(oc);
  for (int yo = 0; yo < ho; ++yo) {
    for (int xo = 0; xo < wo; ++xo) {
      std::memcpy(acc.data(), p.b.data(), sizeof(float) * oc);
      const int yb = yo * s - 1, xb = xo * s - 1;
      for (int ky = 0; ky < 3; ++ky) {
        const int yi = yb + ky;
        if (yi < 0 || yi >= h) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int xi = xb + kx;
          if (xi < 0 || xi >= w) continue;
          const float* src = in.data.data() + (size_t(yi) * w + xi) * ic;
          const float* wk = p.w.data() + size_t(ky * 3 + kx) * ic * oc;
          for (int i = 0; i < ic; ++i) {
            const float v = src[i];
            const float* wr = wk + size_t(i) * oc;
            for (int o = 0; o < oc; ++o) acc[o] += v * wr[o];
          }
        }
      }
      float* dst = out.data.data() + (size_t(yo) * wo + xo) * oc;
      std::memcpy(dst, acc.data(), sizeof(float) * oc);
    }
  }
}

void conv3x3_backward(const FeatureGrid& in, const ConvParams& p, const FeatureGrid& dout,
                      std::vector<float>& dw, std::vector<float>& db, FeatureGrid* din) {
  const int h = in.height, w = in.width;
  const int ho = dout.height, wo = dout.width;
  const int ic = p.in_c, oc = p.out_c, s = p.stride;
  for (int yo = 0; yo < ho; ++yo) {
    for (int xo = 0; xo < wo; ++xo) {
      const float* g = dout.data.data() + (size_t(yo) * wo + xo) * oc;
      for (int o = 0; o < oc; ++o) db[o] += g[o];
      const int yb = yo * s - 1, xb = xo * s - 1;
      for (int ky = 0; ky < 3; ++ky) {
        const int yi = yb + ky;
        if (yi < 0 || yi >= h) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int xi = xb + kx;
          if (xi < 0 || xi >= w) continue;
          const size_t in_off = (size_t(yi) * w + xi) * ic;
          const float* src = in.data.data() + in_off;
          float* dwk = dw.data() + size_t(ky * 3 + kx) * ic * oc;
          for (int i = 0; i < ic; ++i) {
            const float v = src[i];
            float* dwr = dwk + size_t(i) * oc;
            for (int o = 0; o < oc; ++o) dwr[o] += v * g[o];
          }
          if (din != nullptr) {
            const float* wk = p.w.data() + size_t(ky * 3 + kx) * ic * oc;
            float* dsrc = din->data.data() + in_off;
            for (int i = 0; i < ic; ++i) {
              const float* wr = wk + size_t(i) * oc;
              float acc = 0.0f;
              for (int o = 0; o < oc; ++o) acc += wr[o] * g[o];
              dsrc[i] += acc;
            }
          }
        }
      }
    }
  }
}

void linear1x1_forward(const FeatureGrid& in, const LinearParams& p, FeatureGrid& out) {
  const size_t pixels = in.pixel_count();
  const int ic = p.in_c, oc = p.out_c;
  for (size_t px = 0; px < pixels; ++px) {
    const float* src = in.data.data() + px * ic;
    float* dst = out.data.data() + px * oc;
    for (int o = 0; o < oc; ++o) {
      const float* wr = p.w.data() + size_t(o) * ic;
      float acc = p.b[o];
      for (int i = 0; i < ic; ++i) acc += wr[i] * src[i];
      dst[o] = acc;
    }
  }
}

void linear1x1_backward(const FeatureGrid& in, const LinearParams& p, const FeatureGrid& dout,
                        std::vector<float>& dw, std::vector<float>& db, FeatureGrid* din) {
  const size_t pixels = in.pixel_count();
  const int ic = p.in_c, oc = p.out_c;
  for (size_t px = 0; px < pixels; ++px) {
    const float* src = in.data.data() + px * ic;
    const float* g = dout.data.data() + px * oc;
    for (int o = 0; o < oc; ++o) {
      const float go = g[o];
      if (go == 0.0f) continue;
      db[o] += go;
      float* dwr = dw.data() + size_t(o) * ic;
      for (int i = 0; i < ic; ++i) dwr[i] += go * src[i];
      if (din != nullptr) {
        const float* wr = p.w.data() + size_t(o) * ic;
        float* dsrc = din->data.data() + px * ic;
        for (int i = 0; i < ic; ++i) dsrc[i] += go * wr[i];
      }
    }
  }
}

void relu_inplace(FeatureGrid& g) {
  for (float& v : g.data) v = v > 0.0f ? v : 0.0f;
}

// Nearest upsampling at pixel centers into a channel slice of dst.
void upsample_into(const FeatureGrid& src, FeatureGrid& dst, int channel_offset) {
  for (int y = 0; y < dst.height; ++y) {
    const int sy = center_sample_index(y, dst.height, src.height);
    for (int x = 0; x < dst.width; ++x) {
      const int sx = center_sample_index(x, dst.width, src.width);
      const float* s = src.data.data() + (size_t(sy) * src.width + sx) * src.dim;
      float* d = dst.data.data() + (size_t(y) * dst.width + x) * dst.dim + channel_offset;
      std::memcpy(d, s, sizeof(float) * src.dim);
    }
  }
}

void upsample_adjoint(const FeatureGrid& ddst, FeatureGrid& dsrc, int channel_offset) {
  for (int y = 0; y < ddst.height; ++y) {
    const int sy = center_sample_index(y, ddst.height, dsrc.height);
    for (int x = 0; x < ddst.width; ++x) {
      const int sx = center_sample_index(x, ddst.width, dsrc.width);
      const float* g = ddst.data.data() + (size_t(y) * ddst.width + x) * ddst.dim + channel_offset;
      float* d = dsrc.data.data() + (size_t(sy) * dsrc.width + sx) * dsrc.dim;
      for (int c = 0; c < dsrc.dim; ++c) d[c] += g[c];
    }
  }
}

}  // namespace

std::vector<ReferenceEncoder::Block> ReferenceEncoder::blocks() {
  std::vector<Block> out;
  for (int s = 0; s < kStages; ++s) {
    out.push_back({"stage" + std::to_string(s + 1) + ".w", &stages[s].w, stages[s].in_c * 9});
    out.push_back({"stage" + std::to_string(s + 1) + ".b", &stages[s].b, stages[s].in_c * 9});
  }
  for (int s = 0; s < kStages; ++s) {
    out.push_back({"head" + std::to_string(s + 1) + ".w", &heads[s].w, heads[s].in_c});
    out.push_back({"head" + std::to_string(s + 1) + ".b", &heads[s].b, heads[s].in_c});
  }
  out.push_back({"seg.w", &seg.w, seg.in_c});
  out.push_back({"seg.b", &seg.b, seg.in_c});
  return out;
}

std::vector<std::pair<std::string, const std::vector<float>*>> ReferenceEncoder::blocks_const()
    const {
  std::vector<std::pair<std::string, const std::vector<float>*>> out;
  auto& self = const_cast<ReferenceEncoder&>(*this);
  for (const auto& b : self.blocks()) out.emplace_back(b.name, b.data);
  return out;
}

size_t ReferenceEncoder::param_count() const {
  size_t n = 0;
  for (const auto& [name, data] : blocks_const()) n += data->size();
  return n;
}

ReferenceEncoder make_encoder(int n_classes, uint64_t seed) {
  ReferenceEncoder enc;
  enc.n_classes = n_classes;
  int in_c = kImageChannels;
  int concat_c = 0;
  for (int s = 0; s < kStages; ++s) {
    ConvParams& c = enc.stages[s];
    c.in_c = in_c;
    c.out_c = kStageChannels[s];
    c.stride = kStageStrides[s];
    c.w.assign(size_t(9) * c.in_c * c.out_c, 0.0f);
    c.b.assign(c.out_c, 0.0f);
    LinearParams& h = enc.heads[s];
    h.in_c = c.out_c;
    h.out_c = kEmbedDim;
    h.w.assign(size_t(h.out_c) * h.in_c, 0.0f);
    h.b.assign(h.out_c, 0.0f);
    in_c = c.out_c;
    concat_c += c.out_c;
  }
  enc.seg.in_c = concat_c;
  enc.seg.out_c = n_classes;
  enc.seg.w.assign(size_t(n_classes) * concat_c, 0.0f);
  enc.seg.b.assign(n_classes, 0.0f);

  Rng rng(seed, kStreamInit);
  for (const auto& b : enc.blocks()) {
    const double bound = 1.0 / std::sqrt(double(b.fan_in));
    for (float& v : *b.data) v = float(rng.next_uniform(-bound, bound));
  }
  return enc;
}

EncoderGrads EncoderGrads::zeros_like(const ReferenceEncoder& enc) {
  EncoderGrads g;
  for (const auto& [name, data] : enc.blocks_const()) g.blocks.emplace_back(data->size(), 0.0f);
  return g;
}

void EncoderGrads::accumulate(const EncoderGrads& other) {
  for (size_t i = 0; i < blocks.size(); ++i)
    for (size_t j = 0; j < blocks[i].size(); ++j) blocks[i][j] += other.blocks[i][j];
}

EncoderForward encoder_forward(const ReferenceEncoder& enc, const FeatureGrid& image,
                               bool with_embeddings) {
  if (image.dim != kImageChannels)
    throw ArgumentError("encoder_forward: image must have 3 channels");
  EncoderForward fwd;
  const FeatureGrid* in = &image;
  for (int s = 0; s < kStages; ++s) {
    const ConvParams& c = enc.stages[s];
    fwd.stage_out[s] = FeatureGrid(s + 1, conv_out_dim(in->height, c.stride),
                                   conv_out_dim(in->width, c.stride), c.out_c);
    conv3x3_forward(*in, c, fwd.stage_out[s]);
    relu_inplace(fwd.stage_out[s]);
    in = &fwd.stage_out[s];
  }

  if (with_embeddings) {
    for (int s = 0; s < kStages; ++s) {
      const FeatureGrid& src = fwd.stage_out[s];
      fwd.proj_raw[s] = FeatureGrid(s + 1, src.height, src.width, kEmbedDim);
      linear1x1_forward(src, enc.heads[s], fwd.proj_raw[s]);
      fwd.embed[s] = fwd.proj_raw[s];
      for (size_t px = 0; px < fwd.embed[s].pixel_count(); ++px) {
        float* v = fwd.embed[s].data.data() + px * kEmbedDim;
        double sq = 0.0;
        for (int k = 0; k < kEmbedDim; ++k) sq += double(v[k]) * double(v[k]);
        if (sq > 0.0) {
          const double inv = 1.0 / std::sqrt(sq);
          for (int k = 0; k < kEmbedDim; ++k) v[k] = float(double(v[k]) * inv);
        }
      }
    }
    fwd.has_embeddings = true;
  }

  fwd.concat = FeatureGrid(0, image.height, image.width, enc.seg.in_c);
  int offset = 0;
  for (int s = 0; s < kStages; ++s) {
    upsample_into(fwd.stage_out[s], fwd.concat, offset);
    offset += enc.stages[s].out_c;
  }
  fwd.logits = FeatureGrid(0, image.height, image.width, enc.n_classes);
  linear1x1_forward(fwd.concat, enc.seg, fwd.logits);
  fwd.valid = true;
  return fwd;
}

EncoderGrads encoder_backward(const ReferenceEncoder& enc, const FeatureGrid& image,
                              const EncoderForward& fwd, const FeatureGrid& d_logits,
                              const std::array<FeatureGrid, kStages>* d_embed) {
  if (!fwd.valid) throw StateError("encoder_backward: forward cache missing");
  if (d_embed != nullptr && !fwd.has_embeddings)
    throw StateError("encoder_backward: embedding gradients without projected forward");

  EncoderGrads grads = EncoderGrads::zeros_like(enc);
  auto blocks = const_cast<ReferenceEncoder&>(enc).blocks();
  auto grad_of = [&](const std::string& name) -> std::vector<float>& {
    for (size_t i = 0; i < blocks.size(); ++i)
      if (blocks[i].name == name) return grads.blocks[i];
    throw StateError("encoder_backward: unknown block " + name);
  };

  // Segmentation head -> concatenated grid -> per-stage accumulators.
  FeatureGrid d_concat(0, fwd.concat.height, fwd.concat.width, fwd.concat.dim);
  linear1x1_backward(fwd.concat, enc.seg, d_logits, grad_of("seg.w"), grad_of("seg.b"),
                     &d_concat);

  std::array<FeatureGrid, kStages> d_stage;
  int offset = 0;
  for (int s = 0; s < kStages; ++s) {
    d_stage[s] = FeatureGrid(s + 1, fwd.stage_out[s].height, fwd.stage_out[s].width,
                             enc.stages[s].out_c);
    upsample_adjoint(d_concat, d_stage[s], offset);
    offset += enc.stages[s].out_c;
  }

  // Projection heads: unit-normalization Jacobian, then the 1x1 map.
  if (d_embed != nullptr) {
    for (int s = 0; s < kStages; ++s) {
      const FeatureGrid& ge = (*d_embed)[s];
      if (ge.data.empty()) continue;
      const FeatureGrid& raw = fwd.proj_raw[s];
      FeatureGrid d_raw(s + 1, raw.height, raw.width, kEmbedDim);
      for (size_t px = 0; px < raw.pixel_count(); ++px) {
        const float* x = raw.data.data() + px * kEmbedDim;
        const float* g = ge.data.data() + px * kEmbedDim;
        float* out = d_raw.data.data() + px * kEmbedDim;
        double sq = 0.0;
        for (int k = 0; k < kEmbedDim; ++k) sq += double(x[k]) * double(x[k]);
        if (sq == 0.0) continue;  // flagged zero vector, no gradient
        const double r = std::sqrt(sq);
        double gy = 0.0;
        for (int k = 0; k < kEmbedDim; ++k) gy += double(g[k]) * double(x[k]) / r;
        for (int k = 0; k < kEmbedDim; ++k)
          out[k] = float((double(g[k]) - gy * double(x[k]) / r) / r);
      }
      const std::string tag = "head" + std::to_string(s + 1);
      linear1x1_backward(fwd.stage_out[s], enc.heads[s], d_raw, grad_of(tag + ".w"),
                         grad_of(tag + ".b"), &d_stage[s]);
    }
  }

  // Stages, top down. ReLU masks use the post-activation sign.
  for (int s = kStages - 1; s >= 0; --s) {
    FeatureGrid& ds = d_stage[s];
    const FeatureGrid& act = fwd.stage_out[s];
    for (size_t i = 0; i < ds.data.size(); ++i)
      if (act.data[i] <= 0.0f) ds.data[i] = 0.0f;
    const FeatureGrid& in = s == 0 ? image : fwd.stage_out[s - 1];
    const std::string tag = "stage" + std::to_string(s + 1);
    conv3x3_backward(in, enc.stages[s], ds, grad_of(tag + ".w"), grad_of(tag + ".b"),
                     s == 0 ? nullptr : &d_stage[s - 1]);
  }
  return grads;
}

double lr_at(int64_t iter, int64_t total, double base, double power) {
  if (total <= 0 || iter < 0 || iter > total)
    throw ArgumentError("lr_at: iteration out of range");
  return base * std::pow(1.0 - double(iter) / double(total), power);
}

}  // namespace ctxr
