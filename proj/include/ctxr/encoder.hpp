#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "ctxr/embedding.hpp"
#include "ctxr/feature_grid.hpp"
#include "ctxr/rng.hpp"

namespace ctxr {

inline constexpr int kStages = 4;
inline constexpr int kStageChannels[kStages] = {16, 24, 32, 48};
inline constexpr int kStageStrides[kStages] = {1, 2, 2, 2};
inline constexpr int kEmbedDim = 16;
inline constexpr int kImageChannels = 3;

// 3x3 convolution, padding 1. Weights are stored [ky][kx][in][out] so the
// innermost accumulation runs over contiguous output channels.
struct ConvParams {
  int in_c = 0;
  int out_c = 0;
  int stride = 1;
  std::vector<float> w;
  std::vector<float> b;
};

// 1x1 linear map, weights [out][in] (dot products over contiguous rows).
struct LinearParams {
  int in_c = 0;
  int out_c = 0;
  std::vector<float> w;
  std::vector<float> b;
};

// Four conv+ReLU stages with strides (1,2,2,2), per-stage 1x1 projection
// heads to the shared embedding dimension, and a 1x1 segmentation head over
// the upsampled-and-concatenated stage outputs.
struct ReferenceEncoder {
  int n_classes = 0;
  std::array<ConvParams, kStages> stages;
  std::array<LinearParams, kStages> heads;
  LinearParams seg;

  // Parameters in their fixed enumeration order (init, SGD, checkpoints, FD).
  struct Block {
    std::string name;
    std::vector<float>* data;
    int fan_in;
  };
  std::vector<Block> blocks();
  std::vector<std::pair<std::string, const std::vector<float>*>> blocks_const() const;
  size_t param_count() const;
};

// All weights uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) from the init stream.
ReferenceEncoder make_encoder(int n_classes, uint64_t seed);

// Gradient (or momentum) buffers shaped like the encoder's blocks.
struct EncoderGrads {
  std::vector<std::vector<float>> blocks;

  static EncoderGrads zeros_like(const ReferenceEncoder& enc);
  void accumulate(const EncoderGrads& other);
};

struct EncoderForward {
  std::array<FeatureGrid, kStages> stage_out;  // post-ReLU
  std::array<FeatureGrid, kStages> proj_raw;   // pre-normalization projection
  std::array<FeatureGrid, kStages> embed;      // unit embeddings
  FeatureGrid concat;                          // full-res concatenated stages
  FeatureGrid logits;
  bool has_embeddings = false;
  bool valid = false;
};

// with_embeddings=false skips the projection heads (cross-entropy-only path).
EncoderForward encoder_forward(const ReferenceEncoder& enc, const FeatureGrid& image,
                               bool with_embeddings);

// Exact reverse-mode pass. d_embed entries may be empty grids when no
// contrastive gradient flows; throws StateError without a forward cache.
EncoderGrads encoder_backward(const ReferenceEncoder& enc, const FeatureGrid& image,
                              const EncoderForward& fwd, const FeatureGrid& d_logits,
                              const std::array<FeatureGrid, kStages>* d_embed);

// Polynomial learning-rate schedule: base * (1 - iter/total)^power.
double lr_at(int64_t iter, int64_t total, double base, double power);

}  // namespace ctxr
