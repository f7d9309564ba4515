#pragma once

// Training loop, checkpoints and evaluation metrics.

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cpseg/losses.hpp"
#include "cpseg/recon.hpp"
#include "cpseg/synth.hpp"

namespace cpseg {

class ConfigError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

struct TrainConfig {
  Variant variant = Variant::full;
  int num_parts = 3;
  double learning_rate = 7e-4;  // pilot value for the desk defaults; large() uses 2e-4
  int batch_size = 4;
  int iterations = 2000;
  std::int64_t seg_height = 64;
  std::int64_t seg_width = 64;
  std::vector<std::int64_t> scales{64, 32, 16};
  LossWeights weights;
  TransformRanges transforms;
  std::uint64_t seed = 0;
  ExtractorConfig extractor;
  std::string profile = "tiny";  // tiny | full
  MotionOptions motion;
  bool bn_instance_fallback = false;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int checkpoint_every = 0;  // 0 disables periodic checkpoints
  bool log_wall_time = true;  // false writes 0 so that logs of equal runs compare byte for byte

  // Desk-scale defaults (the member initializers above).
  static TrainConfig desk();
  // K = 10, batch 20, 10k iterations, full widths and four loss scales at 256x256.
  static TrainConfig large();

  nlohmann::json to_json() const;
  // Unknown keys, wrong types and out-of-range values raise ConfigError naming the field.
  static TrainConfig from_json(const nlohmann::json& j);
  static TrainConfig from_json(const nlohmann::json& j, const TrainConfig& base);
  void validate() const;
};

// Applies "key=value" overrides (value parsed as JSON, falling back to a string).
TrainConfig apply_overrides(const TrainConfig& config, const std::vector<std::string>& overrides);
TrainConfig load_config(const std::filesystem::path& path);

struct Model {
  ParamStore store;
  std::unique_ptr<SegmentationNet> seg;
  std::unique_ptr<Generator> gen;
};
std::unique_ptr<Model> make_model(const TrainConfig& config, DType dtype = DType::f32);

class Adam {
public:
  Adam(double beta1, double beta2, double eps) : beta1_(beta1), beta2_(beta2), eps_(eps) {}
  void step(ParamStore& store, double lr);
  long steps() const { return t_; }

  void save(const std::filesystem::path& dir, const ParamStore& store) const;
  void load(const std::filesystem::path& dir, const ParamStore& store);

private:
  void ensure(const ParamStore& store);
  double beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<Tensor> m_, v_;
};

struct StepStats {
  int iteration = 0;
  double l_rec = 0, l_eq_kp = 0, l_eq_A = 0, total = 0, wall_ms = 0;
};

// CSV header and row in the loss-log format.
std::string loss_csv_header();
std::string loss_csv_row(const StepStats& s);

class Trainer {
public:
  Trainer(TrainConfig config, const Dataset& dataset);

  // One optimizer step on a freshly sampled batch.
  StepStats step();
  // Runs until config.iterations, streaming rows to `csv` (may be null).
  void run(std::ostream* csv, const std::filesystem::path& checkpoint_dir = {},
           const std::function<void(const StepStats&)>& on_step = {});

  int iteration() const { return iteration_; }
  const TrainConfig& config() const { return config_; }
  Model& model() { return *model_; }
  const Model& model() const { return *model_; }

  void save_checkpoint(const std::filesystem::path& dir) const;
  static Trainer from_checkpoint(const std::filesystem::path& dir, const Dataset& dataset);
  // Continues a restored run under `config`, which may differ from the stored
  // one only in iterations, checkpoint_every and log_wall_time.
  void extend(const TrainConfig& config);

private:
  TrainConfig config_;
  const Dataset* dataset_;
  std::unique_ptr<Model> model_;
  std::unique_ptr<FeatureExtractor> extractor_;
  Adam adam_;
  Rng rng_;
  int iteration_ = 0;
  std::vector<std::pair<int, std::pair<std::int64_t, std::int64_t>>> last_batch_;
};

std::vector<StepStats> read_loss_csv(const std::filesystem::path& path);

// Trains into dir (loss.csv plus checkpoint/). A finished or partial run of
// the same configuration already in dir is reused and continued.
Trainer train_cached(const TrainConfig& config, const Dataset& dataset, const std::filesystem::path& dir,
                     const std::function<void(const StepStats&)>& on_step = {});

// Loads just the model (parameters and config) from a checkpoint directory.
std::pair<TrainConfig, std::unique_ptr<Model>> load_model(const std::filesystem::path& dir);

// ---- metrics ----

// Centers of mass (x, y) of channels 0..K-1 of (N, K+1, H, W) masks: (N, K, 2).
// Channels with mass below 1e-8 fall back to the grid centroid.
std::vector<std::vector<std::array<double, 2>>> centers_of_mass(const Tensor& masks);

struct LinearRegression {
  // (features + 1) x outputs, the last row is the intercept.
  std::vector<std::vector<double>> coef;
  std::vector<double> predict(const std::vector<double>& x) const;
};
LinearRegression fit_linear(const std::vector<std::vector<double>>& x, const std::vector<std::vector<double>>& y);
double mean_absolute_error(const LinearRegression& model, const std::vector<std::vector<double>>& x,
                           const std::vector<std::vector<double>>& y);

// Foreground IoU of sum_{k<K} Y^k > 0.5 against a binary mask; 1 when both are empty.
double foreground_iou(const Tensor& masks, const std::uint8_t* labels, int background_label);

// Mean |F - gt| over pixels where `valid` is nonzero; returns 0 with no valid pixels.
double endpoint_error(const Tensor& flow, const Tensor& gt_flow, const std::vector<std::uint8_t>& valid);

struct EvalOptions {
  int fit_frames = 500;
  int test_frames = 100;
  int flow_pairs = 100;
  std::uint64_t seed = 99;
};

struct MetricsReport {
  std::string variant;
  double mae = 0;
  double iou = 0;
  double epe = 0;
  double reconstruction_loss = 0;
  int fit_frames = 0, test_frames = 0, flow_pairs = 0;

  nlohmann::json to_json() const;
};

// Schema check for a MetricsReport document; returns the list of problems.
std::vector<std::string> validate_metrics_json(const nlohmann::json& j);

MetricsReport evaluate(const Model& model, const TrainConfig& config, const Dataset& dataset,
                       const EvalOptions& options = {});

}  // namespace cpseg
