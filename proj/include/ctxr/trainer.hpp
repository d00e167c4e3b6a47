#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ctxr/bane.hpp"
#include "ctxr/dataset.hpp"
#include "ctxr/encoder.hpp"
#include "ctxr/losses.hpp"
#include "ctxr/metrics.hpp"

namespace ctxr {

enum class TrainMode { kCeOnly, kCePa, kCePaBane };

std::string to_string(TrainMode mode);
TrainMode parse_mode(const std::string& text);

struct TrainConfig {
  uint64_t seed = 0;
  int image_height = 64;
  int image_width = 64;
  double noise_sigma = 0.15;
  int batch_size = 8;
  int64_t total_iterations = 2000;
  double base_lr = 1e-2;
  double momentum = 0.9;
  double power = 0.9;
  TrainMode mode = TrainMode::kCePaBane;
  ContrastConfig contrast;
  int eval_samples = 64;

  DatasetConfig dataset() const { return {image_height, image_width, noise_sigma}; }
  void validate() const;
};

struct IterationLog {
  int64_t iter = 0;
  double lr = 0.0;
  double l_ce = 0.0;
  double l_pa = 0.0;
  double total = 0.0;
  std::array<uint64_t, kNumClasses> err_px{};

  std::string to_json() const;
};

struct EvalReport {
  double miou = 0.0;
  std::vector<double> per_class;
  double iiou = 0.0;
  std::vector<std::pair<double, double>> b_miou;  // (radius, percent)
  double alignment = 0.0;
  double uniformity = 0.0;
  std::vector<std::pair<int, double>> u_l;

  std::string to_json() const;
};

// Intermediate values captured from one training step, used to verify that
// the ce_pa and ce_pa_bane modes agree on everything upstream of sampling.
struct StepProbe {
  std::vector<FeatureGrid> logits;                     // per sample
  std::vector<LabelMap> preds;
  std::vector<std::array<FeatureGrid, kStages>> embeds;
  std::vector<AnchorSet> anchors;                      // batch-level, per layer
  std::vector<FusedAnchorSet> fused;
  std::vector<std::vector<std::vector<uint8_t>>> error_maps;  // [sample][layer*cls]
  std::vector<std::vector<std::vector<int64_t>>> distances;   // [sample][layer*cls]
  double l_ce = 0.0;
  std::vector<std::vector<std::vector<int32_t>>> positives;   // [layer][class]
  std::vector<std::vector<std::vector<int32_t>>> negatives;
};

class Trainer {
 public:
  explicit Trainer(const TrainConfig& cfg);

  // One optimization step; false when the loss went non-finite.
  bool step(StepProbe* probe = nullptr);

  const TrainConfig& config() const { return cfg_; }
  const ReferenceEncoder& encoder() const { return encoder_; }
  const std::vector<IterationLog>& log() const { return log_; }
  int64_t iteration() const { return iter_; }
  int loss_warnings() const { return warnings_; }
  LossReport last_report() const { return last_report_; }

 private:
  TrainConfig cfg_;
  ReferenceEncoder encoder_;
  EncoderGrads velocity_;
  std::vector<IterationLog> log_;
  LossReport last_report_;
  int64_t iter_ = 0;
  int warnings_ = 0;
};

struct TrainResult {
  bool nan_abort = false;
  int64_t iterations_run = 0;
  std::vector<IterationLog> log;
  ReferenceEncoder encoder;
};

TrainResult train(const TrainConfig& cfg);

// Metrics over `samples` images of the evaluation split. Feature diagnostics
// use the unnormalized last-stage features, as dumped before the heads.
EvalReport evaluate(const ReferenceEncoder& enc, const TrainConfig& cfg, int samples,
                    std::span<const double> radii);

// Cosine-similarity-vs-boundary-distance profile on the evaluation split,
// anchors computed per batch exactly as during training.
std::vector<ProfileAccumulator> cosine_profile(const ReferenceEncoder& enc,
                                               const TrainConfig& cfg, int samples);

struct GradCheckReport {
  double max_rel_err = 0.0;
  size_t probes = 0;
  bool pass = true;
};

// Central finite differences through the whole pipeline (pools frozen, they
// are not differentiable) against the analytic backward pass.
GradCheckReport grad_check(const TrainConfig& cfg, double tolerance, int param_probes,
                           int embedding_probes);

void save_checkpoint(const ReferenceEncoder& enc, const TrainConfig& cfg,
                     const std::string& path);

struct Checkpoint {
  ReferenceEncoder encoder;
  TrainConfig config;
};

Checkpoint load_checkpoint(const std::string& path);

}  // namespace ctxr
