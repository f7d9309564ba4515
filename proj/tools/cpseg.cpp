#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "cpseg/cpmt.hpp"
#include "cpseg/gradcheck.hpp"
#include "cpseg/image_io.hpp"
#include "cpseg/pipeline.hpp"

using namespace cpseg;
namespace fs = std::filesystem;

namespace {

enum Exit { ok = 0, failure = 1, config_error = 2, numeric_error = 3, gradcheck_failure = 4 };

struct LoadedModel {
  TrainConfig config;
  std::unique_ptr<Model> model;
};

LoadedModel open_checkpoint(const fs::path& dir) {
  auto [config, model] = load_model(dir);
  return {config, std::move(model)};
}

// Image at the frame size the model was trained on.
Tensor load_frame(const fs::path& path, const TrainConfig& config) {
  Tensor img = from_image8(read_png(path));
  return resize_bilinear(img, config.scales.front(), config.scales.front() * config.seg_width / config.seg_height);
}

SegmentationOutput segment(const LoadedModel& m, const Tensor& frame) {
  return m.model->seg->forward(frame, nn::Mode{false, {}});
}

std::vector<fs::path> png_inputs(const fs::path& p) {
  if (!fs::exists(p)) throw IoError("input not found: " + p.string());
  if (!fs::is_directory(p)) return {p};
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(p)) {
    if (e.path().extension() == ".png") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  if (out.empty()) throw IoError("no PNG frames in " + p.string());
  return out;
}

std::vector<int> parse_parts(const std::string& list, int k) {
  std::vector<int> parts;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    int v = 0;
    try {
      std::size_t used = 0;
      v = std::stoi(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("--parts: '" + item + "' is not a part number");
    }
    if (v < 1 || v > k) throw ConfigError("--parts: part " + item + " outside 1.." + std::to_string(k));
    parts.push_back(v - 1);
  }
  return parts;
}

void print_table(std::ostream& os, const std::vector<MetricsReport>& rows) {
  os << "| variant | recon loss | MAE | IoU | EPE |\n|---|---|---|---|---|\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "| %s | %.4f | %.3f | %.4f | %.3f |\n", r.variant.c_str(), r.reconstruction_loss,
                  r.mae, r.iou, r.epe);
    os << buf;
  }
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << j.dump(2) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Co-part segmentation from motion: synthetic data, training, evaluation and part swaps"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Render a synthetic articulated-shape video dataset");
  DatasetSpec spec;
  fs::path gen_out;
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--videos", spec.videos, "Number of videos")->check(CLI::PositiveNumber);
  gen->add_option("--test-videos", spec.test_videos, "Videos held out for evaluation")->check(CLI::NonNegativeNumber);
  gen->add_option("--seed", spec.seed, "Dataset seed");
  gen->add_option("--frames", spec.scene.frames, "Frames per video")->check(CLI::Range(2, 255));
  gen->add_option("--parts", spec.scene.num_parts, "Parts per shape (torso plus limbs)")->check(CLI::Range(1, 6));
  gen->add_option("--height", spec.scene.height, "Frame height")->check(CLI::Range(32, 1024));
  gen->add_option("--width", spec.scene.width, "Frame width")->check(CLI::Range(32, 1024));
  gen->add_option("--max-translation", spec.scene.max_translation, "Global drift in pixels at 64x64");
  gen->add_option("--max-rotation", spec.scene.max_rotation_deg, "Global rotation range in degrees");
  gen->add_option("--max-log-scale", spec.scene.max_log_scale, "Global log-scale range");
  gen->add_option("--max-swing", spec.scene.max_swing_deg, "Limb swing range in degrees");

  // train
  auto* train = app.add_subcommand("train", "Train a model on a dataset");
  fs::path train_data, train_out, train_config, train_resume;
  std::vector<std::string> train_sets;
  train->add_option("--data", train_data, "Dataset directory")->required();
  train->add_option("--out", train_out, "Checkpoint and log directory")->required();
  train->add_option("--config", train_config, "Config JSON");
  train->add_option("--set", train_sets, "Config override key=value (repeatable)");
  train->add_option("--from-checkpoint", train_resume, "Resume from a checkpoint directory");

  // segment
  auto* seg = app.add_subcommand("segment", "Write part masks and overlays for images");
  fs::path seg_ckpt, seg_in, seg_out;
  seg->add_option("--checkpoint", seg_ckpt, "Checkpoint directory")->required();
  seg->add_option("--input", seg_in, "PNG image or directory of PNG frames")->required();
  seg->add_option("--out", seg_out, "Output directory")->required();

  // flow
  auto* flow = app.add_subcommand("flow", "Render the predicted flow and visibility map for a frame pair");
  fs::path flow_ckpt, flow_src, flow_tgt, flow_out;
  flow->add_option("--checkpoint", flow_ckpt, "Checkpoint directory")->required();
  flow->add_option("--source", flow_src, "Source PNG")->required();
  flow->add_option("--target", flow_tgt, "Target PNG")->required();
  flow->add_option("--out", flow_out, "Output directory")->required();

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint and write a metrics report");
  fs::path eval_ckpt, eval_data, eval_out;
  EvalOptions eval_opts;
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint directory")->required();
  eval->add_option("--data", eval_data, "Dataset directory")->required();
  eval->add_option("--out", eval_out, "Metrics JSON path (stdout when omitted)");
  eval->add_option("--fit-frames", eval_opts.fit_frames, "Frames for fitting the landmark regressor");
  eval->add_option("--test-frames", eval_opts.test_frames, "Held-out frames for MAE and IoU");
  eval->add_option("--flow-pairs", eval_opts.flow_pairs, "Held-out frame pairs for EPE");
  eval->add_option("--seed", eval_opts.seed, "Frame sampling seed");

  // swap
  auto* swap = app.add_subcommand("swap", "Transfer the appearance of selected parts between images");
  fs::path swap_ckpt, swap_src, swap_tgt, swap_out;
  std::string swap_parts;
  swap->add_option("--checkpoint", swap_ckpt, "Checkpoint directory")->required();
  swap->add_option("--source", swap_src, "Source PNG providing the appearance")->required();
  swap->add_option("--target", swap_tgt, "Target PNG or directory of PNG frames")->required();
  swap->add_option("--parts", swap_parts, "Comma-separated part numbers, starting at 1")->required();
  swap->add_option("--out", swap_out, "Output directory")->required();

  // grad-check
  auto* gc = app.add_subcommand("grad-check", "Run the finite-difference gradient suite");
  std::string gc_dtype = "both";
  int gc_instances = 20;
  std::uint64_t gc_seed = 7;
  gc->add_option("--dtype", gc_dtype, "f32, f64 or both")->check(CLI::IsMember({"f32", "f64", "both"}));
  gc->add_option("--instances", gc_instances, "Random instances per check")->check(CLI::PositiveNumber);
  gc->add_option("--seed", gc_seed, "Input seed");

  // ablate
  auto* ablate = app.add_subcommand("ablate", "Train all five variants on one dataset and compare them");
  fs::path ab_data, ab_out, ab_config;
  std::vector<std::string> ab_sets;
  ablate->add_option("--data", ab_data, "Dataset directory")->required();
  ablate->add_option("--out", ab_out, "Output directory (one subdirectory per variant)")->required();
  ablate->add_option("--config", ab_config, "Base config JSON");
  ablate->add_option("--set", ab_sets, "Config override key=value (repeatable)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? ok : config_error;
  }

  try {
    if (*gen) {
      if (spec.test_videos >= spec.videos) throw ConfigError("--test-videos must be below --videos");
      generate_dataset(spec, gen_out);
      std::cout << "wrote " << spec.videos << " videos to " << gen_out << "\n";
    } else if (*train) {
      const Dataset ds = load_dataset(train_data);
      fs::create_directories(train_out);
      const fs::path log = train_out / "loss.csv";
      if (!train_resume.empty()) {
        Trainer t = Trainer::from_checkpoint(train_resume, ds);
        TrainConfig c = train_config.empty() ? t.config() : load_config(train_config);
        t.extend(apply_overrides(c, train_sets));
        const bool fresh = !fs::exists(log) || fs::file_size(log) == 0;
        std::ofstream os(log, std::ios::app);
        if (fresh) os << loss_csv_header() << "\n";
        t.run(&os, train_out / "checkpoint");
      } else {
        TrainConfig c = apply_overrides(train_config.empty() ? TrainConfig{} : load_config(train_config), train_sets);
        Trainer t(c, ds);
        std::ofstream os(log);
        os << loss_csv_header() << "\n";
        t.run(&os, train_out / "checkpoint", [](const StepStats& s) {
          if (s.iteration % 100 == 0) std::cerr << loss_csv_row(s) << "\n";
        });
      }
      std::cout << "checkpoint in " << (train_out / "checkpoint") << "\n";
    } else if (*seg) {
      LoadedModel m = open_checkpoint(seg_ckpt);
      fs::create_directories(seg_out);
      NoGradGuard guard;
      for (const auto& path : png_inputs(seg_in)) {
        Tensor frame = load_frame(path, m.config);
        SegmentationOutput out = segment(m, frame);
        Tensor masks = reshape(out.masks, {out.masks.dim(1), out.masks.dim(2), out.masks.dim(3)});
        Tensor shown = resize_bilinear(frame, out.masks.dim(2), out.masks.dim(3));
        const std::string stem = path.stem().string();
        write_png(seg_out / (stem + "_mask.png"), mask_image(masks));
        write_png(seg_out / (stem + "_overlay.png"),
                  mask_overlay(reshape(shown, {3, shown.dim(2), shown.dim(3)}), masks));
        save_tensor(seg_out / (stem + "_masks.cpmt"), out.masks);
      }
    } else if (*flow) {
      LoadedModel m = open_checkpoint(flow_ckpt);
      NoGradGuard guard;
      SegmentationOutput so = segment(m, load_frame(flow_src, m.config));
      SegmentationOutput to = segment(m, load_frame(flow_tgt, m.config));
      const Variant v = m.config.variant == Variant::naive ? Variant::affine_only : m.config.variant;
      auto [f, vis] = variant_flow(so, to, v, m.config.motion);
      if (!vis.defined()) vis = visibility_mask(so.masks, to.masks, true);
      fs::create_directories(flow_out);
      write_png(flow_out / "flow.png", flow_to_color(reshape(f, {2, f.dim(2), f.dim(3)})));
      write_png(flow_out / "visibility.png", gray_image(reshape(vis, {vis.dim(2), vis.dim(3)})));
      save_tensor(flow_out / "flow.cpmt", f);
      save_tensor(flow_out / "visibility.cpmt", vis);
    } else if (*eval) {
      LoadedModel m = open_checkpoint(eval_ckpt);
      const Dataset ds = load_dataset(eval_data);
      MetricsReport r = evaluate(*m.model, m.config, ds, eval_opts);
      if (eval_out.empty()) {
        std::cout << r.to_json().dump(2) << "\n";
      } else {
        write_json(eval_out, r.to_json());
      }
    } else if (*swap) {
      LoadedModel m = open_checkpoint(swap_ckpt);
      if (m.config.variant == Variant::naive) throw ConfigError("swap needs a flow-based variant, the checkpoint is naive");
      const auto parts = parse_parts(swap_parts, m.config.num_parts);
      fs::create_directories(swap_out);
      NoGradGuard guard;
      Tensor xs = load_frame(swap_src, m.config);
      SegmentationOutput so = segment(m, xs);
      for (const auto& path : png_inputs(swap_tgt)) {
        Tensor xt = load_frame(path, m.config);
        Tensor out = part_swap(*m.model->gen, xs, xt, so, segment(m, xt), parts, m.config.variant, nn::Mode{false, {}},
                               m.config.motion);
        write_png(swap_out / ("swap_" + path.filename().string()), to_image8(out));
      }
    } else if (*gc) {
      bool passed = true;
      for (DType dt : {DType::f64, DType::f32}) {
        if (gc_dtype != "both" && gc_dtype != (dt == DType::f64 ? "f64" : "f32")) continue;
        const auto opts = default_gradcheck_options(dt);
        for (const auto& r : run_gradient_suite(dt, gc_instances, gc_seed, opts)) {
          std::printf("%-4s %-28s n=%-3d max_rel_err=%.3e tol=%.0e %s\n", dt == DType::f64 ? "f64" : "f32",
                      r.name.c_str(), r.instances, r.max_error, r.tolerance, r.passed ? "ok" : "FAIL");
          passed = passed && r.passed;
        }
      }
      if (!passed) return gradcheck_failure;
    } else if (*ablate) {
      const Dataset ds = load_dataset(ab_data);
      TrainConfig base = apply_overrides(ab_config.empty() ? TrainConfig{} : load_config(ab_config), ab_sets);
      std::vector<MetricsReport> rows;
      nlohmann::json all = nlohmann::json::array();
      for (Variant v : all_variants()) {
        TrainConfig c = base;
        c.variant = v;
        std::cerr << "training " << to_string(v) << "\n";
        Trainer t = train_cached(c, ds, ab_out / to_string(v));
        MetricsReport r = evaluate(t.model(), c, ds);
        write_json(ab_out / to_string(v) / "metrics.json", r.to_json());
        rows.push_back(r);
        all.push_back(r.to_json());
      }
      write_json(ab_out / "ablation.json", all);
      std::ofstream table(ab_out / "ablation.md");
      print_table(table, rows);
      print_table(std::cout, rows);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return config_error;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return numeric_error;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return failure;
  }
  return ok;
}
