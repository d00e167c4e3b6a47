#include "ctxr/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <mutex>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "ctxr/run_config.hpp"

namespace ctxr {

namespace {

std::string fmt(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

void parallel_for(int n, const std::function<void(int)>& fn) {
  const int workers = std::min(worker_count(), n);
  if (workers <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int t = 0; t < workers; ++t) {
    pool.emplace_back([&] {
      for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

FeatureGrid image_grid(const ShapesSample& s, int h, int w) {
  FeatureGrid g(0, h, w, kImageChannels);
  g.data = s.image;
  return g;
}

LabelMap argmax_labels(const FeatureGrid& logits) {
  LabelMap pred(logits.height, logits.width);
  const int n = logits.dim;
  for (size_t p = 0; p < logits.pixel_count(); ++p) {
    const float* v = logits.data.data() + p * n;
    int best = 0;
    for (int k = 1; k < n; ++k)
      if (v[k] > v[best]) best = k;
    pred.values[p] = uint8_t(best);
  }
  return pred;
}

// Per-sample working state for one step.
struct SampleState {
  ShapesSample sample;
  FeatureGrid image;
  EncoderForward fwd;
  LabelMap pred;
  CrossEntropyResult ce;
  std::array<LabelMap, kStages> gt_ds;
  std::array<LabelMap, kStages> pred_ds;
  std::array<EmbeddingSet, kStages> sets;
};

EmbeddingSet concat_sets(std::span<const SampleState> states, int layer,
                         std::vector<size_t>& offsets) {
  EmbeddingSet batch;
  batch.layer = layer + 1;
  batch.dim = states.front().sets[layer].dim;
  offsets.clear();
  for (const SampleState& st : states) {
    const EmbeddingSet& s = st.sets[layer];
    offsets.push_back(batch.count());
    batch.vectors.insert(batch.vectors.end(), s.vectors.begin(), s.vectors.end());
    batch.gt_class.insert(batch.gt_class.end(), s.gt_class.begin(), s.gt_class.end());
    batch.pred_class.insert(batch.pred_class.end(), s.pred_class.begin(), s.pred_class.end());
    batch.pixels.insert(batch.pixels.end(), s.pixels.begin(), s.pixels.end());
    batch.flagged.insert(batch.flagged.end(), s.flagged.begin(), s.flagged.end());
  }
  return batch;
}

struct BatchPools {
  // [layer][class]
  std::vector<std::vector<std::vector<int32_t>>> positives;
  std::vector<std::vector<std::vector<int32_t>>> negatives;
  // [layer][class], batch-level BANE selections (empty in other modes)
  std::vector<std::vector<SelectionSet>> selections;
};

// Per-class positive sets: BANE-selected vectors first (closest to the error
// boundary), the rest drawn uniformly from the class's entries.
std::vector<int32_t> build_positive_pool(const EmbeddingSet& batch, int cls,
                                         const SelectionSet* forced, int budget, Rng rng) {
  std::vector<int32_t> candidates;
  for (size_t e = 0; e < batch.count(); ++e)
    if (batch.gt_class[e] == cls && !batch.flagged[e]) candidates.push_back(int32_t(e));
  if (candidates.empty()) return {};

  std::vector<int32_t> pool;
  std::vector<uint8_t> taken(batch.count(), 0);
  if (forced != nullptr) {
    for (int32_t e : forced->entries) {
      if (int(pool.size()) >= budget) break;
      if (taken[size_t(e)]) continue;
      taken[size_t(e)] = 1;
      pool.push_back(e);
    }
  }
  if (int(pool.size()) < budget) {
    std::vector<int32_t> remaining;
    for (int32_t e : candidates)
      if (!taken[size_t(e)]) remaining.push_back(e);
    const uint32_t need = uint32_t(std::min<size_t>(remaining.size(), size_t(budget) - pool.size()));
    std::vector<uint32_t> picks = rng.sample_indices(uint32_t(remaining.size()), need);
    std::vector<int32_t> fill;
    fill.reserve(picks.size());
    for (uint32_t p : picks) fill.push_back(remaining[p]);
    std::sort(fill.begin(), fill.end());
    pool.insert(pool.end(), fill.begin(), fill.end());
  }
  return pool;
}

std::vector<int32_t> uniform_negative_pool(const EmbeddingSet& batch, int cls, int cap, Rng rng) {
  std::vector<int32_t> others;
  for (size_t e = 0; e < batch.count(); ++e)
    if (batch.gt_class[e] != cls && !batch.flagged[e]) others.push_back(int32_t(e));
  if (int(others.size()) <= cap) return others;
  std::vector<uint32_t> picks = rng.sample_indices(uint32_t(others.size()), uint32_t(cap));
  std::vector<int32_t> pool;
  pool.reserve(picks.size());
  for (uint32_t p : picks) pool.push_back(others[p]);
  std::sort(pool.begin(), pool.end());
  return pool;
}

BatchPools build_pools(const TrainConfig& cfg, std::span<const SampleState> states,
                       std::span<const EmbeddingSet> batch_sets,
                       const std::vector<std::vector<size_t>>& offsets, int64_t iter,
                       StepProbe* probe) {
  BatchPools pools;
  pools.positives.assign(kStages, std::vector<std::vector<int32_t>>(kNumClasses));
  pools.negatives.assign(kStages, std::vector<std::vector<int32_t>>(kNumClasses));
  pools.selections.assign(kStages, {});

  const bool bane = cfg.mode == TrainMode::kCePaBane;
  const bool want_maps = bane || probe != nullptr;

  if (probe != nullptr) {
    probe->error_maps.assign(states.size(), {});
    probe->distances.assign(states.size(), {});
  }

  for (int layer = 0; layer < kStages; ++layer) {
    std::vector<SelectionSet> batch_sel(kNumClasses);
    for (int n = 0; n < kNumClasses; ++n) {
      batch_sel[n].cls = n;
      batch_sel[n].ratio = cfg.contrast.k_percent;
    }
    if (want_maps) {
      for (size_t b = 0; b < states.size(); ++b) {
        const SampleState& st = states[b];
        if (probe != nullptr) {
          probe->error_maps[b].resize(kStages * kNumClasses);
          probe->distances[b].resize(kStages * kNumClasses);
        }
        for (int n = 0; n < kNumClasses; ++n) {
          const BinaryErrorMap bmap = error_map(st.pred_ds[layer], st.gt_ds[layer], n, layer + 1);
          const EdgeSet edges = extract_edges(bmap);
          const DistanceMap dmap = distance_transform(bmap, edges);
          if (probe != nullptr) {
            probe->error_maps[b][size_t(layer) * kNumClasses + n] = bmap.values;
            probe->distances[b][size_t(layer) * kNumClasses + n] = dmap.squared;
          }
          if (!bane) continue;
          SelectionSet sel =
              select_negatives(dmap, bmap, st.sets[layer], cfg.contrast.k_percent);
          const int32_t off = int32_t(offsets[layer][b]);
          for (size_t i = 0; i < sel.entries.size(); ++i) {
            batch_sel[n].entries.push_back(sel.entries[i] + off);
            batch_sel[n].squared.push_back(sel.squared[i]);
          }
        }
      }
    }

    if (bane) {
      // Keep each class's batch-level selection in (distance, index) order so
      // positive force-inclusion picks boundary-nearest vectors first.
      for (int n = 0; n < kNumClasses; ++n) {
        SelectionSet& sel = batch_sel[n];
        std::vector<std::pair<int64_t, int32_t>> order;
        order.reserve(sel.entries.size());
        for (size_t i = 0; i < sel.entries.size(); ++i)
          order.emplace_back(sel.squared[i], sel.entries[i]);
        std::sort(order.begin(), order.end());
        for (size_t i = 0; i < order.size(); ++i) {
          sel.squared[i] = order[i].first;
          sel.entries[i] = order[i].second;
        }
      }
      pools.negatives[layer] =
          build_negative_pools(batch_sel, kNumClasses, cfg.contrast.negative_cap);
    }

    const Rng layer_rng = Rng(cfg.seed, kStreamLoss).fork(uint64_t(iter)).fork(uint64_t(layer));
    for (int n = 0; n < kNumClasses; ++n) {
      pools.positives[layer][n] =
          build_positive_pool(batch_sets[layer], n, bane ? &batch_sel[n] : nullptr,
                              cfg.contrast.positive_budget, layer_rng.fork(uint64_t(n)));
      if (!bane)
        pools.negatives[layer][n] = uniform_negative_pool(
            batch_sets[layer], n, cfg.contrast.negative_cap, layer_rng.fork(100 + uint64_t(n)));
    }
    pools.selections[layer] = std::move(batch_sel);
  }
  return pools;
}

void scatter_embedding_grads(const EmbeddingSet& batch, std::span<const double> grads,
                             double scale, std::span<const size_t> offsets,
                             std::span<SampleState> states, int layer,
                             std::array<FeatureGrid, kStages>* d_embed_out) {
  const int d = batch.dim;
  for (size_t b = 0; b < states.size(); ++b) {
    const EmbeddingSet& local = states[b].sets[layer];
    FeatureGrid& grid = d_embed_out[b][layer];
    grid = FeatureGrid(layer + 1, local.grid_height, local.grid_width, d);
    const size_t base = offsets[b];
    for (size_t e = 0; e < local.count(); ++e) {
      const auto [row, col] = local.pixels[e];
      float* dst = grid.data.data() + (size_t(row) * grid.width + col) * d;
      const double* src = grads.data() + (base + e) * d;
      for (int k = 0; k < d; ++k) dst[k] = float(src[k] * scale);
    }
  }
}

}  // namespace

std::string to_string(TrainMode mode) {
  switch (mode) {
    case TrainMode::kCeOnly: return "ce_only";
    case TrainMode::kCePa: return "ce_pa";
    case TrainMode::kCePaBane: return "ce_pa_bane";
  }
  return "ce_pa_bane";
}

TrainMode parse_mode(const std::string& text) {
  if (text == "ce_only") return TrainMode::kCeOnly;
  if (text == "ce_pa") return TrainMode::kCePa;
  if (text == "ce_pa_bane") return TrainMode::kCePaBane;
  throw ConfigError("unknown mode '" + text + "' (ce_only|ce_pa|ce_pa_bane)");
}

void TrainConfig::validate() const {
  if (total_iterations <= 0) throw ConfigError("total_iterations must be positive");
  if (batch_size <= 0) throw ConfigError("batch_size must be positive");
  if (image_height < 16 || image_width < 16) throw ConfigError("image size must be at least 16");
  if (base_lr < 0.0) throw ConfigError("base_lr must be nonnegative");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must lie in [0, 1)");
  if (eval_samples <= 0) throw ConfigError("eval_samples must be positive");
  if (int(contrast.lambda.size()) != kStages)
    throw ConfigError("exactly one lambda per encoder layer required");
  contrast.validate();
}

std::string IterationLog::to_json() const {
  std::ostringstream os;
  os << "{\"iter\":" << iter << ",\"lr\":" << fmt(lr) << ",\"l_ce\":" << fmt(l_ce)
     << ",\"l_pa\":" << fmt(l_pa) << ",\"total\":" << fmt(total) << ",\"err_px_per_class\":[";
  for (size_t i = 0; i < err_px.size(); ++i) {
    if (i) os << ",";
    os << err_px[i];
  }
  os << "]}";
  return os.str();
}

std::string EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["miou"] = miou;
  j["per_class_iou"] = per_class;
  j["iiou"] = iiou;
  nlohmann::ordered_json bm = nlohmann::ordered_json::object();
  for (const auto& [radius, value] : b_miou) bm[fmt(radius)] = value;
  j["b_miou"] = bm;
  j["A"] = alignment;
  j["U"] = uniformity;
  nlohmann::ordered_json ul = nlohmann::ordered_json::object();
  for (const auto& [l, value] : u_l) ul[std::to_string(l)] = value;
  j["U_l"] = ul;
  return j.dump();
}

Trainer::Trainer(const TrainConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  encoder_ = make_encoder(kNumClasses, cfg_.seed);
  velocity_ = EncoderGrads::zeros_like(encoder_);
}

bool Trainer::step(StepProbe* probe) {
  const bool with_pa = cfg_.mode != TrainMode::kCeOnly;
  const int batch = cfg_.batch_size;
  const DatasetConfig dcfg = cfg_.dataset();
  const LayerGeometry geo = LayerGeometry::make(cfg_.image_height, cfg_.image_width, kStages);

  std::vector<SampleState> states(batch);
  parallel_for(batch, [&](int b) {
    SampleState& st = states[b];
    st.sample = generate_sample(dcfg, cfg_.seed, kSplitTrain,
                                uint64_t(iter_) * uint64_t(batch) + uint64_t(b));
    st.image = image_grid(st.sample, cfg_.image_height, cfg_.image_width);
    st.fwd = encoder_forward(encoder_, st.image, with_pa);
    st.pred = argmax_labels(st.fwd.logits);
    st.ce = cross_entropy(st.fwd.logits, st.sample.labels);
    if (with_pa) {
      for (int layer = 0; layer < kStages; ++layer) {
        const auto [h, w] = geo.layer_dims[layer];
        st.gt_ds[layer] = downsample_labels(st.sample.labels, h, w);
        st.pred_ds[layer] = downsample_labels(st.pred, h, w);
        st.sets[layer] = flatten(st.fwd.embed[layer], st.gt_ds[layer], st.pred_ds[layer]);
      }
    }
  });

  size_t total_scored = 0;
  double ce_weighted = 0.0;
  for (const SampleState& st : states) {
    total_scored += st.ce.scored;
    ce_weighted += st.ce.loss * double(st.ce.scored);
  }
  const double l_ce = total_scored > 0 ? ce_weighted / double(total_scored) : 0.0;

  double l_pa = 0.0;
  LossReport report;
  report.l_ce = l_ce;
  std::vector<std::array<FeatureGrid, kStages>> d_embed(batch);
  std::array<EmbeddingSet, kStages> batch_sets;
  std::vector<std::vector<size_t>> offsets(kStages);

  if (with_pa) {
    for (int layer = 0; layer < kStages; ++layer)
      batch_sets[layer] = concat_sets(states, layer, offsets[layer]);
    BatchPools pools = build_pools(cfg_, states, batch_sets, offsets, iter_, probe);

    PixelAnchorInput input;
    for (int layer = 0; layer < kStages; ++layer) input.sets.push_back(&batch_sets[layer]);
    input.positives = pools.positives;
    input.negatives = pools.negatives;
    PixelAnchorResult pa = pixel_anchor_loss(input, cfg_.contrast, kNumClasses);
    l_pa = pa.loss;
    warnings_ += pa.skipped_invalid_anchor;

    report.l_pa = l_pa;
    report.l_pa_per_layer = pa.per_layer;
    report.warnings = pa.skipped_invalid_anchor;
    report.mean_p_pos = pa.mean_p_pos;
    report.mean_p_neg = pa.mean_p_neg;
    double ge = 0.0, ga = 0.0;
    for (const auto& layer_grads : pa.grad_embeddings)
      for (double v : layer_grads) ge += v * v;
    for (const auto& layer_grads : pa.grad_anchors)
      for (double v : layer_grads) ga += v * v;
    report.grad_norm_embeddings = std::sqrt(ge);
    report.grad_norm_anchors = std::sqrt(ga);

    for (int layer = 0; layer < kStages; ++layer)
      scatter_embedding_grads(batch_sets[layer], pa.grad_embeddings[layer], cfg_.contrast.alpha,
                              offsets[layer], states, layer, d_embed.data());

    if (probe != nullptr) {
      probe->anchors = pa.anchors;
      probe->fused = pa.fused;
      probe->positives = pools.positives;
      probe->negatives = pools.negatives;
    }
  }

  const double total = total_loss(l_ce, l_pa, with_pa ? cfg_.contrast.alpha : 0.0);
  report.total = total;
  last_report_ = report;

  if (probe != nullptr) {
    probe->l_ce = l_ce;
    for (SampleState& st : states) {
      probe->logits.push_back(st.fwd.logits);
      probe->preds.push_back(st.pred);
      probe->embeds.push_back(st.fwd.embed);
    }
  }

  IterationLog entry;
  entry.iter = iter_;
  entry.lr = lr_at(iter_, cfg_.total_iterations, cfg_.base_lr, cfg_.power);
  entry.l_ce = l_ce;
  entry.l_pa = l_pa;
  entry.total = total;
  for (const SampleState& st : states) {
    for (size_t p = 0; p < st.sample.labels.pixel_count(); ++p) {
      const uint8_t g = st.sample.labels.values[p];
      if (g == kIgnoreLabel) continue;
      if (st.pred.values[p] != g) ++entry.err_px[g];
    }
  }
  log_.push_back(entry);

  if (!std::isfinite(total)) return false;

  // Backward per sample, then a fixed-order reduction.
  std::vector<EncoderGrads> sample_grads(batch);
  const double ce_scale = total_scored > 0 ? 1.0 / double(total_scored) : 0.0;
  parallel_for(batch, [&](int b) {
    SampleState& st = states[b];
    FeatureGrid d_logits(0, st.fwd.logits.height, st.fwd.logits.width, st.fwd.logits.dim);
    // Per-image grads carry 1/scored_b; the batch mean needs 1/total_scored.
    const double scale = double(st.ce.scored) * ce_scale;
    for (size_t i = 0; i < d_logits.data.size(); ++i)
      d_logits.data[i] = float(double(st.ce.grad_logits[i]) * scale);
    sample_grads[b] = encoder_backward(encoder_, st.image, st.fwd, d_logits,
                                       with_pa ? &d_embed[b] : nullptr);
  });

  EncoderGrads grads = EncoderGrads::zeros_like(encoder_);
  for (const EncoderGrads& g : sample_grads) grads.accumulate(g);

  auto blocks = encoder_.blocks();
  for (size_t i = 0; i < blocks.size(); ++i) {
    std::vector<float>& theta = *blocks[i].data;
    std::vector<float>& vel = velocity_.blocks[i];
    const std::vector<float>& g = grads.blocks[i];
    const float lr = float(entry.lr);
    const float mom = float(cfg_.momentum);
    for (size_t j = 0; j < theta.size(); ++j) {
      vel[j] = mom * vel[j] + g[j];
      theta[j] -= lr * vel[j];
    }
  }
  ++iter_;
  return true;
}

TrainResult train(const TrainConfig& cfg) {
  Trainer trainer(cfg);
  TrainResult res;
  for (int64_t i = 0; i < cfg.total_iterations; ++i) {
    if (!trainer.step()) {
      res.nan_abort = true;
      break;
    }
  }
  res.iterations_run = trainer.iteration();
  res.log = trainer.log();
  res.encoder = trainer.encoder();
  return res;
}

EvalReport evaluate(const ReferenceEncoder& enc, const TrainConfig& cfg, int samples,
                    std::span<const double> radii) {
  if (samples <= 0) throw ArgumentError("evaluate: sample count must be positive");
  const DatasetConfig dcfg = cfg.dataset();
  const LayerGeometry geo = LayerGeometry::make(cfg.image_height, cfg.image_width, kStages);
  const auto [h4, w4] = geo.layer_dims[kStages - 1];

  struct EvalState {
    ShapesSample sample;
    LabelMap pred;
    LabelMap gt4;
    FeatureGrid feats4;
  };
  std::vector<EvalState> states(samples);
  parallel_for(samples, [&](int i) {
    EvalState& st = states[i];
    st.sample = generate_sample(dcfg, cfg.seed, kSplitEval, uint64_t(i));
    const FeatureGrid image = image_grid(st.sample, cfg.image_height, cfg.image_width);
    EncoderForward fwd = encoder_forward(enc, image, false);
    st.pred = argmax_labels(fwd.logits);
    st.gt4 = downsample_labels(st.sample.labels, h4, w4);
    st.feats4 = std::move(fwd.stage_out[kStages - 1]);
  });

  ConfusionMatrix cm(kNumClasses);
  InstanceSizeSurvey survey(kNumClasses);
  for (const EvalState& st : states) {
    cm.add(st.sample.labels, st.pred);
    survey.add(st.sample.labels, st.sample.instances);
  }
  const IouReport iou = miou(cm);

  const std::vector<double> avg_sizes = survey.averages();
  IiouAccumulator iacc(kNumClasses);
  for (const EvalState& st : states)
    iacc.add(st.pred, st.sample.labels, st.sample.instances, avg_sizes);

  // One boundary EDT per image, shared across radii.
  std::vector<ConfusionMatrix> bcm(radii.size(), ConfusionMatrix(kNumClasses));
  for (const EvalState& st : states) {
    const LabelMap& gt = st.sample.labels;
    std::vector<uint8_t> seeds(gt.pixel_count(), 0);
    bool any = false;
    for (int y = 0; y < gt.height; ++y) {
      for (int x = 0; x < gt.width; ++x) {
        const uint8_t g = gt.at(y, x);
        if (g == kIgnoreLabel) continue;
        const auto differs = [&](int yy, int xx) {
          const uint8_t o = gt.at(yy, xx);
          return o != kIgnoreLabel && o != g;
        };
        if ((y > 0 && differs(y - 1, x)) || (y + 1 < gt.height && differs(y + 1, x)) ||
            (x > 0 && differs(y, x - 1)) || (x + 1 < gt.width && differs(y, x + 1))) {
          seeds[size_t(y) * gt.width + x] = 1;
          any = true;
        }
      }
    }
    if (!any) continue;
    const std::vector<int64_t> sq = squared_edt(gt.height, gt.width, seeds);
    for (size_t r = 0; r < radii.size(); ++r) {
      const double limit = radii[r] * radii[r];
      const bool unbounded = std::isinf(radii[r]);
      for (size_t p = 0; p < gt.pixel_count(); ++p) {
        const uint8_t g = gt.values[p];
        if (g == kIgnoreLabel) continue;
        if (!unbounded && double(sq[p]) > limit) continue;
        ++bcm[r].at(g, st.pred.values[p]);
      }
    }
  }

  // Feature diagnostics on raw last-stage features.
  std::vector<VecArray> class_sets(kNumClasses, VecArray(kStageChannels[kStages - 1]));
  std::vector<double> tmp(kStageChannels[kStages - 1]);
  for (const EvalState& st : states) {
    for (int y = 0; y < h4; ++y) {
      for (int x = 0; x < w4; ++x) {
        const uint8_t g = st.gt4.at(y, x);
        if (g == kIgnoreLabel) continue;
        const auto v = st.feats4.at(y, x);
        for (size_t c = 0; c < tmp.size(); ++c) tmp[c] = double(v[c]);
        class_sets[g].push(tmp);
      }
    }
  }
  const int requested[] = {3, 5};
  const FeatureDiagnostics diag = feature_diagnostics(class_sets, requested);

  EvalReport rep;
  rep.miou = iou.miou;
  rep.per_class = iou.per_class;
  rep.iiou = iacc.value();
  for (size_t r = 0; r < radii.size(); ++r) rep.b_miou.emplace_back(radii[r], miou(bcm[r]).miou);
  rep.alignment = diag.alignment_value;
  rep.uniformity = diag.uniformity_value;
  rep.u_l = diag.neighborhood;
  return rep;
}

std::vector<ProfileAccumulator> cosine_profile(const ReferenceEncoder& enc,
                                               const TrainConfig& cfg, int samples) {
  if (samples <= 0) throw ArgumentError("cosine_profile: sample count must be positive");
  const DatasetConfig dcfg = cfg.dataset();
  const LayerGeometry geo = LayerGeometry::make(cfg.image_height, cfg.image_width, kStages);

  std::vector<ProfileAccumulator> acc;
  for (int layer = 0; layer < kStages; ++layer) acc.emplace_back(layer + 1);

  for (int base = 0; base < samples; base += cfg.batch_size) {
    const int batch = std::min(cfg.batch_size, samples - base);
    std::vector<SampleState> states(batch);
    parallel_for(batch, [&](int b) {
      SampleState& st = states[b];
      st.sample = generate_sample(dcfg, cfg.seed, kSplitEval, uint64_t(base + b));
      st.image = image_grid(st.sample, cfg.image_height, cfg.image_width);
      st.fwd = encoder_forward(enc, st.image, true);
      st.pred = argmax_labels(st.fwd.logits);
      for (int layer = 0; layer < kStages; ++layer) {
        const auto [h, w] = geo.layer_dims[layer];
        st.gt_ds[layer] = downsample_labels(st.sample.labels, h, w);
        st.pred_ds[layer] = downsample_labels(st.pred, h, w);
        st.sets[layer] = flatten(st.fwd.embed[layer], st.gt_ds[layer], st.pred_ds[layer]);
      }
    });

    for (int layer = 0; layer < kStages; ++layer) {
      std::vector<const EmbeddingSet*> sets;
      for (const SampleState& st : states) sets.push_back(&st.sets[layer]);
      const AnchorSet anchors = compute_anchors(sets, layer + 1, kNumClasses);
      std::vector<const EmbeddingSet*> top_sets;
      for (const SampleState& st : states) top_sets.push_back(&st.sets[kStages - 1]);
      const AnchorSet top = compute_anchors(top_sets, kStages, kNumClasses);
      const FusedAnchorSet fused =
          fuse_anchors(anchors, top, cfg.contrast.w_low, cfg.contrast.w_high);
      for (const SampleState& st : states) {
        std::vector<DistanceMap> maps(kNumClasses);
        for (int n = 0; n < kNumClasses; ++n) {
          const BinaryErrorMap bmap = error_map(st.pred_ds[layer], st.gt_ds[layer], n, layer + 1);
          maps[n] = distance_transform(bmap, extract_edges(bmap));
        }
        acc[layer].add(st.sets[layer], fused, maps);
      }
    }
  }
  return acc;
}

namespace {

// Shared by grad_check: forward everything with frozen pools and return the
// total loss; optionally perturb one embedding coordinate.
struct FrozenBatch {
  std::vector<ShapesSample> samples;
  BatchPools pools;
};

double frozen_loss(const ReferenceEncoder& enc, const TrainConfig& cfg, FrozenBatch& frozen,
                   int inject_layer = -1, size_t inject_entry = 0, int inject_coord = 0,
                   double inject_delta = 0.0) {
  const bool with_pa = cfg.mode != TrainMode::kCeOnly;
  const LayerGeometry geo = LayerGeometry::make(cfg.image_height, cfg.image_width, kStages);
  const int batch = int(frozen.samples.size());

  std::vector<SampleState> states(batch);
  for (int b = 0; b < batch; ++b) {
    SampleState& st = states[b];
    st.sample = frozen.samples[b];
    st.image = image_grid(st.sample, cfg.image_height, cfg.image_width);
    st.fwd = encoder_forward(enc, st.image, with_pa);
    st.pred = argmax_labels(st.fwd.logits);
    st.ce = cross_entropy(st.fwd.logits, st.sample.labels);
    if (with_pa) {
      for (int layer = 0; layer < kStages; ++layer) {
        const auto [h, w] = geo.layer_dims[layer];
        st.gt_ds[layer] = downsample_labels(st.sample.labels, h, w);
        st.pred_ds[layer] = downsample_labels(st.pred, h, w);
        st.sets[layer] = flatten(st.fwd.embed[layer], st.gt_ds[layer], st.pred_ds[layer]);
      }
    }
  }

  size_t total_scored = 0;
  double ce_weighted = 0.0;
  for (const SampleState& st : states) {
    total_scored += st.ce.scored;
    ce_weighted += st.ce.loss * double(st.ce.scored);
  }
  const double l_ce = total_scored > 0 ? ce_weighted / double(total_scored) : 0.0;
  if (!with_pa) return l_ce;

  std::array<EmbeddingSet, kStages> batch_sets;
  std::vector<std::vector<size_t>> offsets(kStages);
  for (int layer = 0; layer < kStages; ++layer)
    batch_sets[layer] = concat_sets(states, layer, offsets[layer]);
  if (inject_layer >= 0)
    batch_sets[inject_layer].vectors[inject_entry * size_t(batch_sets[inject_layer].dim) +
                                     size_t(inject_coord)] += inject_delta;

  PixelAnchorInput input;
  for (int layer = 0; layer < kStages; ++layer) input.sets.push_back(&batch_sets[layer]);
  input.positives = frozen.pools.positives;
  input.negatives = frozen.pools.negatives;
  const PixelAnchorResult pa = pixel_anchor_loss(input, cfg.contrast, kNumClasses);
  return total_loss(l_ce, pa.loss, cfg.contrast.alpha);
}

}  // namespace

GradCheckReport grad_check(const TrainConfig& cfg, double tolerance, int param_probes,
                           int embedding_probes) {
  TrainConfig check_cfg = cfg;
  check_cfg.validate();
  const bool with_pa = check_cfg.mode != TrainMode::kCeOnly;
  ReferenceEncoder enc = make_encoder(kNumClasses, check_cfg.seed);
  const DatasetConfig dcfg = check_cfg.dataset();
  const LayerGeometry geo = LayerGeometry::make(check_cfg.image_height, check_cfg.image_width,
                                                kStages);

  // Base forward to freeze pools and compute the analytic gradient.
  const int batch = check_cfg.batch_size;
  std::vector<SampleState> states(batch);
  for (int b = 0; b < batch; ++b) {
    SampleState& st = states[b];
    st.sample = generate_sample(dcfg, check_cfg.seed, kSplitTrain, uint64_t(b));
    st.image = image_grid(st.sample, check_cfg.image_height, check_cfg.image_width);
    st.fwd = encoder_forward(enc, st.image, with_pa);
    st.pred = argmax_labels(st.fwd.logits);
    st.ce = cross_entropy(st.fwd.logits, st.sample.labels);
    if (with_pa) {
      for (int layer = 0; layer < kStages; ++layer) {
        const auto [h, w] = geo.layer_dims[layer];
        st.gt_ds[layer] = downsample_labels(st.sample.labels, h, w);
        st.pred_ds[layer] = downsample_labels(st.pred, h, w);
        st.sets[layer] = flatten(st.fwd.embed[layer], st.gt_ds[layer], st.pred_ds[layer]);
      }
    }
  }

  FrozenBatch frozen;
  for (const SampleState& st : states) frozen.samples.push_back(st.sample);

  std::array<EmbeddingSet, kStages> batch_sets;
  std::vector<std::vector<size_t>> offsets(kStages);
  PixelAnchorResult pa;
  if (with_pa) {
    for (int layer = 0; layer < kStages; ++layer)
      batch_sets[layer] = concat_sets(states, layer, offsets[layer]);
    frozen.pools = build_pools(check_cfg, states, batch_sets, offsets, 0, nullptr);
    PixelAnchorInput input;
    for (int layer = 0; layer < kStages; ++layer) input.sets.push_back(&batch_sets[layer]);
    input.positives = frozen.pools.positives;
    input.negatives = frozen.pools.negatives;
    pa = pixel_anchor_loss(input, check_cfg.contrast, kNumClasses);
  }

  // Analytic parameter gradient with the same frozen pools.
  size_t total_scored = 0;
  for (const SampleState& st : states) total_scored += st.ce.scored;
  std::vector<std::array<FeatureGrid, kStages>> d_embed(batch);
  if (with_pa)
    for (int layer = 0; layer < kStages; ++layer)
      scatter_embedding_grads(batch_sets[layer], pa.grad_embeddings[layer],
                              check_cfg.contrast.alpha, offsets[layer], states, layer,
                              d_embed.data());
  EncoderGrads grads = EncoderGrads::zeros_like(enc);
  for (int b = 0; b < batch; ++b) {
    SampleState& st = states[b];
    FeatureGrid d_logits(0, st.fwd.logits.height, st.fwd.logits.width, st.fwd.logits.dim);
    const double scale = total_scored > 0 ? double(st.ce.scored) / double(total_scored) : 0.0;
    for (size_t i = 0; i < d_logits.data.size(); ++i)
      d_logits.data[i] = float(double(st.ce.grad_logits[i]) * scale);
    EncoderGrads g = encoder_backward(enc, st.image, st.fwd, d_logits,
                                      with_pa ? &d_embed[b] : nullptr);
    grads.accumulate(g);
  }

  GradCheckReport report;
  Rng rng(check_cfg.seed, 77);
  auto blocks = enc.blocks();

  for (int probe = 0; probe < param_probes; ++probe) {
    const size_t bi = size_t(rng.next_below(blocks.size()));
    std::vector<float>& theta = *blocks[bi].data;
    const size_t pi = size_t(rng.next_below(theta.size()));
    const float orig = theta[pi];
    const double h = 1e-3 * std::max(1.0, std::abs(double(orig)));
    theta[pi] = float(double(orig) + h);
    const double up = frozen_loss(enc, check_cfg, frozen);
    theta[pi] = float(double(orig) - h);
    const double down = frozen_loss(enc, check_cfg, frozen);
    theta[pi] = orig;
    const double fd = (up - down) / (2.0 * h);
    const double an = double(grads.blocks[bi][pi]);
    if (std::max(std::abs(fd), std::abs(an)) < 1e-7) {
      ++report.probes;
      continue;
    }
    const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6});
    report.max_rel_err = std::max(report.max_rel_err, rel);
    ++report.probes;
  }

  if (with_pa) {
    for (int probe = 0; probe < embedding_probes; ++probe) {
      const int layer = int(rng.next_below(kStages));
      const EmbeddingSet& set = batch_sets[layer];
      if (set.count() == 0) continue;
      const size_t entry = size_t(rng.next_below(set.count()));
      const int coord = int(rng.next_below(uint64_t(set.dim)));
      const double h = 1e-6;
      const double up = frozen_loss(enc, check_cfg, frozen, layer, entry, coord, h);
      const double down = frozen_loss(enc, check_cfg, frozen, layer, entry, coord, -h);
      const double fd = (up - down) / (2.0 * h);
      const double an = check_cfg.contrast.alpha * pa.grad_embeddings[layer][entry * size_t(set.dim) + size_t(coord)];
      if (std::max(std::abs(fd), std::abs(an)) < 1e-9) {
        ++report.probes;
        continue;
      }
      const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-8});
      report.max_rel_err = std::max(report.max_rel_err, rel);
      ++report.probes;
    }
  }
  report.pass = report.max_rel_err < tolerance;
  return report;
}

void save_checkpoint(const ReferenceEncoder& enc, const TrainConfig& cfg,
                     const std::string& path) {
  nlohmann::ordered_json manifest;
  manifest["format"] = "ctxr-checkpoint";
  manifest["version"] = 1;
  manifest["n_classes"] = enc.n_classes;
  manifest["config"] = serialize_config(cfg);
  nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
  for (const auto& [name, data] : enc.blocks_const()) {
    nlohmann::ordered_json t;
    t["name"] = name;
    t["size"] = data->size();
    tensors.push_back(t);
  }
  manifest["tensors"] = tensors;
  const std::string text = manifest.dump();

  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path + " for writing", 0);
  const uint32_t len = uint32_t(text.size());
  const unsigned char lenb[4] = {static_cast<unsigned char>(len),
                                 static_cast<unsigned char>(len >> 8),
                                 static_cast<unsigned char>(len >> 16),
                                 static_cast<unsigned char>(len >> 24)};
  f.write(reinterpret_cast<const char*>(lenb), 4);
  f.write(text.data(), std::streamsize(text.size()));
  for (const auto& [name, data] : enc.blocks_const()) {
    FeatureGrid grid(0, 1, 1, int(data->size()));
    grid.data = *data;
    write_ctxf(grid, f);
  }
  if (!f) throw FormatError("failed writing " + path, 0);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path, 0);
  unsigned char lenb[4];
  f.read(reinterpret_cast<char*>(lenb), 4);
  if (f.gcount() != 4) throw FormatError("truncated checkpoint header", 0);
  const uint32_t len = uint32_t(lenb[0]) | uint32_t(lenb[1]) << 8 | uint32_t(lenb[2]) << 16 |
                       uint32_t(lenb[3]) << 24;
  if (len == 0 || len > (1u << 24)) throw FormatError("implausible manifest length", 0);
  std::string text(len, '\0');
  f.read(text.data(), len);
  if (size_t(f.gcount()) != len) throw FormatError("truncated checkpoint manifest", 4);

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(text);
  } catch (const std::exception& e) {
    throw FormatError(std::string("bad checkpoint manifest: ") + e.what(), 4);
  }
  if (manifest.value("format", "") != "ctxr-checkpoint")
    throw FormatError("not a checkpoint file", 4);

  Checkpoint ck;
  ck.config = parse_config_text(manifest.at("config").get<std::string>());
  ck.encoder = make_encoder(manifest.at("n_classes").get<int>(), ck.config.seed);

  auto blocks = ck.encoder.blocks();
  size_t bi = 0;
  for (const auto& t : manifest.at("tensors")) {
    if (bi >= blocks.size()) throw FormatError("checkpoint has extra tensors", 0);
    const std::string name = t.at("name").get<std::string>();
    if (name != blocks[bi].name)
      throw FormatError("unexpected tensor '" + name + "', wanted '" + blocks[bi].name + "'", 0);
    FeatureGrid grid = read_ctxf(f);
    if (grid.data.size() != blocks[bi].data->size())
      throw FormatError("tensor '" + name + "' has wrong size", 0);
    *blocks[bi].data = grid.data;
    ++bi;
  }
  if (bi != blocks.size()) throw FormatError("checkpoint is missing tensors", 0);
  return ck;
}

}  // namespace ctxr
