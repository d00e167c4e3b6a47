#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "ctxr/run_config.hpp"
#include "ctxr/trainer.hpp"

namespace fs = std::filesystem;
using namespace ctxr;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitNumeric = 2;

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path + " for writing", 0);
  f << text;
}

nlohmann::ordered_json metrics_object(const EvalReport& rep, const TrainConfig& cfg,
                                      const LossReport& last) {
  nlohmann::ordered_json j = nlohmann::ordered_json::parse(rep.to_json());
  nlohmann::ordered_json out;
  out["mode"] = to_string(cfg.mode);
  out["l_ce"] = last.l_ce;
  out["l_pa"] = last.l_pa;
  nlohmann::ordered_json per_layer = nlohmann::ordered_json::array();
  for (double v : last.l_pa_per_layer) per_layer.push_back(v);
  out["l_pa_per_layer"] = per_layer;
  out["total"] = last.total;
  for (auto& [key, value] : j.items()) out[key] = value;
  return out;
}

int run_train(const std::string& config_path, const std::string& mode_arg,
              const std::string& out_dir) {
  TrainConfig cfg = load_config(config_path);
  if (!mode_arg.empty()) cfg.mode = parse_mode(mode_arg);
  fs::create_directories(out_dir);

  Trainer trainer(cfg);
  bool aborted = false;
  for (int64_t i = 0; i < cfg.total_iterations; ++i) {
    if (!trainer.step()) {
      aborted = true;
      break;
    }
  }

  std::ostringstream log_text;
  for (const IterationLog& entry : trainer.log()) log_text << entry.to_json() << "\n";
  write_text((fs::path(out_dir) / "train_log.jsonl").string(), log_text.str());

  if (aborted) {
    nlohmann::ordered_json dump;
    dump["aborted_at_iteration"] = trainer.iteration();
    dump["last"] = nlohmann::ordered_json::parse(loss_report_json(trainer.last_report()));
    write_text((fs::path(out_dir) / "abort.json").string(), dump.dump(2) + "\n");
    std::cerr << "training aborted: non-finite loss at iteration " << trainer.iteration() << "\n";
    return kExitNumeric;
  }

  save_checkpoint(trainer.encoder(), cfg, (fs::path(out_dir) / "checkpoint.ctxc").string());

  const double radii[] = {5.0, 7.0, 10.0};
  const EvalReport rep = evaluate(trainer.encoder(), cfg, cfg.eval_samples, radii);
  write_text((fs::path(out_dir) / "metrics.json").string(),
             metrics_object(rep, cfg, trainer.last_report()).dump(2) + "\n");
  std::cout << "trained " << cfg.total_iterations << " iterations, mIoU " << rep.miou << "\n";
  return kExitOk;
}

int run_eval(const std::string& checkpoint, int samples, const std::vector<double>& radii,
             const std::string& out_path) {
  Checkpoint ck = load_checkpoint(checkpoint);
  const EvalReport rep = evaluate(ck.encoder, ck.config, samples, radii);
  const std::string text = rep.to_json();
  if (!out_path.empty()) write_text(out_path, text + "\n");
  std::cout << text << "\n";
  return kExitOk;
}

int run_dt(const std::string& mask_path, const std::string& out_path,
           const std::string& vis_path) {
  const LabelMap mask = read_pgm(mask_path);
  BinaryErrorMap bmap;
  bmap.cls = 0;
  bmap.height = mask.height;
  bmap.width = mask.width;
  bmap.values.assign(mask.pixel_count(), 0);
  bool any = false;
  for (size_t i = 0; i < mask.pixel_count(); ++i) {
    bmap.values[i] = mask.values[i] > 0 ? 1 : 0;
    any = any || bmap.values[i];
  }
  if (!any) {
    std::cerr << "dt: mask has no foreground pixels, nothing to transform\n";
    return kExitUsage;
  }

  const EdgeSet edges = extract_edges(bmap);
  const DistanceMap dm = distance_transform(bmap, edges);

  FeatureGrid grid(0, dm.height, dm.width, 1);
  float max_dist = 0.0f;
  for (size_t i = 0; i < dm.dist.size(); ++i) {
    grid.data[i] = dm.dist[i];
    if (std::isfinite(dm.dist[i])) max_dist = std::max(max_dist, dm.dist[i]);
  }
  write_ctxf(grid, out_path);

  LabelMap vis(dm.height, dm.width, 0);
  const float scale = max_dist > 0.0f ? 255.0f / max_dist : 0.0f;
  for (size_t i = 0; i < dm.dist.size(); ++i)
    if (std::isfinite(dm.dist[i]))
      vis.values[i] = uint8_t(std::min(255.0f, std::round(dm.dist[i] * scale)));
  write_pgm(vis, vis_path.empty() ? out_path + ".pgm" : vis_path);
  return kExitOk;
}

int run_profile(const std::string& checkpoint, int samples, const std::string& out_path) {
  Checkpoint ck = load_checkpoint(checkpoint);
  const std::vector<ProfileAccumulator> acc = cosine_profile(ck.encoder, ck.config, samples);
  write_text(out_path, profile_csv(acc));
  std::cout << "profile written to " << out_path << "\n";
  return kExitOk;
}

int run_gradcheck(const std::string& config_path, double tolerance) {
  TrainConfig cfg = load_config(config_path);
  const GradCheckReport rep = grad_check(cfg, tolerance, 48, 48);
  std::cout << "gradcheck: max relative error " << rep.max_rel_err << " over " << rep.probes
            << " probes (tolerance " << tolerance << ")\n";
  return rep.pass ? kExitOk : kExitNumeric;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Contextual contrastive segmentation toolkit"};
  app.require_subcommand(1);

  std::string config_path, mode_arg, out_dir;
  auto* train_cmd = app.add_subcommand("train", "Train on the synthetic shapes task");
  train_cmd->add_option("--config", config_path, "Run configuration (key=value lines)")
      ->required();
  train_cmd->add_option("--mode", mode_arg, "ce_only|ce_pa|ce_pa_bane (overrides config)");
  train_cmd->add_option("--out", out_dir, "Output directory")->required();

  std::string checkpoint, eval_out;
  int samples = 64;
  std::vector<double> radii;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--samples", samples, "Evaluation sample count");
  eval_cmd->add_option("--radius", radii, "Boundary-mIoU radii in pixels");
  eval_cmd->add_option("--out", eval_out, "Optional output JSON path");

  std::string mask_path, dt_out, vis_path;
  auto* dt_cmd = app.add_subcommand("dt", "Distance transform of a binary PGM mask");
  dt_cmd->add_option("--mask", mask_path, "Input PGM mask")->required();
  dt_cmd->add_option("--out", dt_out, "Output CTXF distance grid")->required();
  dt_cmd->add_option("--vis", vis_path, "Output PGM visualization (default <out>.pgm)");

  std::string profile_ckpt, profile_out;
  int profile_samples = 64;
  auto* profile_cmd = app.add_subcommand("profile", "Cosine-vs-distance profile CSV");
  profile_cmd->add_option("--checkpoint", profile_ckpt, "Checkpoint file")->required();
  profile_cmd->add_option("--out", profile_out, "Output CSV path")->required();
  profile_cmd->add_option("--samples", profile_samples, "Sample count");

  std::string gc_config;
  double gc_tolerance = 1e-3;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient verification");
  gc_cmd->add_option("--config", gc_config, "Run configuration")->required();
  gc_cmd->add_option("--tolerance", gc_tolerance, "Maximum relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (train_cmd->parsed()) return run_train(config_path, mode_arg, out_dir);
    if (eval_cmd->parsed()) {
      if (radii.empty()) radii = {5.0, 7.0, 10.0};
      return run_eval(checkpoint, samples, radii, eval_out);
    }
    if (dt_cmd->parsed()) return run_dt(mask_path, dt_out, vis_path);
    if (profile_cmd->parsed()) return run_profile(profile_ckpt, profile_samples, profile_out);
    if (gc_cmd->parsed()) return run_gradcheck(gc_config, gc_tolerance);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ArgumentError& e) {
    std::cerr << "argument error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  }
  return kExitUsage;
}
