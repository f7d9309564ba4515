#include "cpseg/pipeline.hpp"

#include <Eigen/Dense>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "cpseg/cpmt.hpp"
#include "cpseg/image_io.hpp"

namespace cpseg {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- config ----

TrainConfig TrainConfig::desk() { return TrainConfig{}; }

TrainConfig TrainConfig::large() {
  TrainConfig c;
  c.num_parts = 10;
  c.batch_size = 20;
  c.iterations = 10000;
  c.learning_rate = 2e-4;
  c.scales = {256, 128, 64, 32};
  c.profile = "full";
  return c;
}

namespace {

std::string extractor_mode_name(ExtractorMode m) {
  return m == ExtractorMode::raw_pixels ? "raw_pixels" : "random_conv";
}

template <class T>
T field(const json& j, const std::string& path) {
  try {
    if constexpr (std::is_same_v<T, bool>) {
      if (!j.is_boolean()) throw ConfigError("");
    } else if constexpr (std::is_integral_v<T>) {
      if (!j.is_number_integer()) throw ConfigError("");
      if constexpr (std::is_unsigned_v<T>) {
        if (j.is_number_integer() && !j.is_number_unsigned() && j.get<std::int64_t>() < 0) throw ConfigError("");
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!j.is_number()) throw ConfigError("");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!j.is_string()) throw ConfigError("");
    }
    return j.get<T>();
  } catch (const std::exception&) {
    const char* what = std::is_same_v<T, bool>             ? "a boolean"
                       : std::is_same_v<T, std::string>    ? "a string"
                       : std::is_unsigned_v<T>             ? "a non-negative integer"
                       : std::is_integral_v<T>             ? "an integer"
                                                           : "a number";
    throw ConfigError("config field '" + path + "' must be " + what + ", got " + j.dump());
  }
}

void expect_object(const json& j, const std::string& path, const std::set<std::string>& allowed) {
  if (!j.is_object()) throw ConfigError("config field '" + path + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (!allowed.count(key)) {
      throw ConfigError("unknown config field '" + (path.empty() ? key : path + "." + key) + "'");
    }
  }
}

}  // namespace

json TrainConfig::to_json() const {
  return {{"variant", to_string(variant)},
          {"num_parts", num_parts},
          {"learning_rate", learning_rate},
          {"batch_size", batch_size},
          {"iterations", iterations},
          {"seg_height", seg_height},
          {"seg_width", seg_width},
          {"scales", scales},
          {"lambda_keypoint", weights.keypoint},
          {"lambda_jacobian", weights.jacobian},
          {"transforms",
           {{"rotation_deg", transforms.rotation_deg},
            {"log_scale", transforms.log_scale},
            {"translation", transforms.translation},
            {"shear", transforms.shear},
            {"reference_size", transforms.reference_size}}},
          {"seed", seed},
          {"extractor",
           {{"mode", extractor_mode_name(extractor.mode)}, {"channels", extractor.channels}, {"seed", extractor.seed}}},
          {"profile", profile},
          {"ridge", motion.ridge},
          {"det_floor", motion.det_floor},
          {"bn_instance_fallback", bn_instance_fallback},
          {"adam", {{"beta1", adam_beta1}, {"beta2", adam_beta2}, {"eps", adam_eps}}},
          {"checkpoint_every", checkpoint_every},
          {"log_wall_time", log_wall_time}};
}

TrainConfig TrainConfig::from_json(const json& j) { return from_json(j, TrainConfig{}); }

TrainConfig TrainConfig::from_json(const json& j, const TrainConfig& base) {
  expect_object(j, "",
                {"variant", "num_parts", "learning_rate", "batch_size", "iterations", "seg_height", "seg_width",
                 "scales", "lambda_keypoint", "lambda_jacobian", "transforms", "seed", "extractor", "profile",
                 "ridge", "det_floor", "bn_instance_fallback", "adam", "checkpoint_every", "log_wall_time"});
  TrainConfig c = base;
  if (j.contains("variant")) {
    const auto name = field<std::string>(j["variant"], "variant");
    try {
      c.variant = parse_variant(name);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("config field 'variant': ") + e.what());
    }
  }
  if (j.contains("num_parts")) c.num_parts = field<int>(j["num_parts"], "num_parts");
  if (j.contains("learning_rate")) c.learning_rate = field<double>(j["learning_rate"], "learning_rate");
  if (j.contains("batch_size")) c.batch_size = field<int>(j["batch_size"], "batch_size");
  if (j.contains("iterations")) c.iterations = field<int>(j["iterations"], "iterations");
  if (j.contains("seg_height")) c.seg_height = field<std::int64_t>(j["seg_height"], "seg_height");
  if (j.contains("seg_width")) c.seg_width = field<std::int64_t>(j["seg_width"], "seg_width");
  if (j.contains("scales")) {
    if (!j["scales"].is_array()) throw ConfigError("config field 'scales' must be an array of integers");
    c.scales.clear();
    for (std::size_t i = 0; i < j["scales"].size(); ++i) {
      c.scales.push_back(field<std::int64_t>(j["scales"][i], "scales[" + std::to_string(i) + "]"));
    }
  }
  if (j.contains("lambda_keypoint")) c.weights.keypoint = field<double>(j["lambda_keypoint"], "lambda_keypoint");
  if (j.contains("lambda_jacobian")) c.weights.jacobian = field<double>(j["lambda_jacobian"], "lambda_jacobian");
  if (j.contains("transforms")) {
    const json& t = j["transforms"];
    expect_object(t, "transforms", {"rotation_deg", "log_scale", "translation", "shear", "reference_size"});
    if (t.contains("rotation_deg")) c.transforms.rotation_deg = field<double>(t["rotation_deg"], "transforms.rotation_deg");
    if (t.contains("log_scale")) c.transforms.log_scale = field<double>(t["log_scale"], "transforms.log_scale");
    if (t.contains("translation")) c.transforms.translation = field<double>(t["translation"], "transforms.translation");
    if (t.contains("shear")) c.transforms.shear = field<double>(t["shear"], "transforms.shear");
    if (t.contains("reference_size")) {
      c.transforms.reference_size = field<double>(t["reference_size"], "transforms.reference_size");
    }
  }
  if (j.contains("seed")) c.seed = field<std::uint64_t>(j["seed"], "seed");
  if (j.contains("extractor")) {
    const json& e = j["extractor"];
    expect_object(e, "extractor", {"mode", "channels", "seed"});
    if (e.contains("mode")) {
      const auto m = field<std::string>(e["mode"], "extractor.mode");
      if (m == "raw_pixels") {
        c.extractor.mode = ExtractorMode::raw_pixels;
      } else if (m == "random_conv") {
        c.extractor.mode = ExtractorMode::random_conv;
      } else {
        throw ConfigError("config field 'extractor.mode' must be raw_pixels or random_conv, got '" + m + "'");
      }
    }
    if (e.contains("channels")) {
      if (!e["channels"].is_array()) throw ConfigError("config field 'extractor.channels' must be an array");
      c.extractor.channels.clear();
      for (std::size_t i = 0; i < e["channels"].size(); ++i) {
        c.extractor.channels.push_back(
            field<std::int64_t>(e["channels"][i], "extractor.channels[" + std::to_string(i) + "]"));
      }
    }
    if (e.contains("seed")) c.extractor.seed = field<std::uint64_t>(e["seed"], "extractor.seed");
  }
  if (j.contains("profile")) c.profile = field<std::string>(j["profile"], "profile");
  if (j.contains("ridge")) c.motion.ridge = field<double>(j["ridge"], "ridge");
  if (j.contains("det_floor")) c.motion.det_floor = field<double>(j["det_floor"], "det_floor");
  if (j.contains("bn_instance_fallback")) {
    c.bn_instance_fallback = field<bool>(j["bn_instance_fallback"], "bn_instance_fallback");
  }
  if (j.contains("adam")) {
    const json& a = j["adam"];
    expect_object(a, "adam", {"beta1", "beta2", "eps"});
    if (a.contains("beta1")) c.adam_beta1 = field<double>(a["beta1"], "adam.beta1");
    if (a.contains("beta2")) c.adam_beta2 = field<double>(a["beta2"], "adam.beta2");
    if (a.contains("eps")) c.adam_eps = field<double>(a["eps"], "adam.eps");
  }
  if (j.contains("checkpoint_every")) c.checkpoint_every = field<int>(j["checkpoint_every"], "checkpoint_every");
  if (j.contains("log_wall_time")) c.log_wall_time = field<bool>(j["log_wall_time"], "log_wall_time");
  c.validate();
  return c;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& f, const std::string& why) {
    throw ConfigError("config field '" + f + "' " + why);
  };
  if (num_parts < 1) fail("num_parts", "must be >= 1");
  if (num_parts > 60) fail("num_parts", "must be <= 60");
  if (!(learning_rate > 0)) fail("learning_rate", "must be > 0");
  if (batch_size < 1) fail("batch_size", "must be >= 1");
  if (batch_size == 1 && !bn_instance_fallback) {
    fail("batch_size", "batch statistics need >= 2 samples; set bn_instance_fallback for batch 1");
  }
  if (iterations < 0) fail("iterations", "must be >= 0");
  if (seg_height < 1 || seg_width < 1) fail("seg_height", "and seg_width must be positive");
  if (scales.empty()) fail("scales", "must list at least one resolution");
  for (auto s : scales) {
    if (s < 1) fail("scales", "entries must be positive");
  }
  if (weights.keypoint < 0) fail("lambda_keypoint", "must be >= 0");
  if (weights.jacobian < 0) fail("lambda_jacobian", "must be >= 0");
  if (transforms.rotation_deg < 0 || transforms.log_scale < 0 || transforms.translation < 0 || transforms.shear < 0) {
    fail("transforms", "ranges must be >= 0");
  }
  if (!(transforms.reference_size > 0)) fail("transforms.reference_size", "must be > 0");
  if (extractor.channels.empty() && extractor.mode == ExtractorMode::random_conv) {
    fail("extractor.channels", "must be non-empty for random_conv");
  }
  for (auto ch : extractor.channels) {
    if (ch < 1) fail("extractor.channels", "entries must be positive");
  }
  if (profile != "tiny" && profile != "full") fail("profile", "must be 'tiny' or 'full', got '" + profile + "'");
  if (motion.ridge < 0) fail("ridge", "must be >= 0");
  if (!(motion.det_floor > 0)) fail("det_floor", "must be > 0");
  if (!(adam_beta1 >= 0 && adam_beta1 < 1)) fail("adam.beta1", "must be in [0, 1)");
  if (!(adam_beta2 >= 0 && adam_beta2 < 1)) fail("adam.beta2", "must be in [0, 1)");
  if (!(adam_eps > 0)) fail("adam.eps", "must be > 0");
  if (checkpoint_every < 0) fail("checkpoint_every", "must be >= 0");
}

TrainConfig apply_overrides(const TrainConfig& config, const std::vector<std::string>& overrides) {
  json j = config.to_json();
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + o + "' is not key=value");
    const std::string key = o.substr(0, eq), text = o.substr(eq + 1);
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    json* node = &j;
    std::stringstream ss(key);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ss, part, '.')) parts.push_back(part);
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
      if (!node->contains(parts[i]) || !(*node)[parts[i]].is_object()) {
        throw ConfigError("unknown config field '" + key + "'");
      }
      node = &(*node)[parts[i]];
    }
    if (!node->contains(parts.back())) throw ConfigError("unknown config field '" + key + "'");
    (*node)[parts.back()] = value;
  }
  return TrainConfig::from_json(j);
}

TrainConfig load_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path.string());
  json j = json::parse(is, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config file " + path.string() + " is not valid JSON");
  return TrainConfig::from_json(j);
}

// ---- model and optimizer ----

std::unique_ptr<Model> make_model(const TrainConfig& config, DType dtype) {
  config.validate();
  auto m = std::make_unique<Model>();
  Rng rng(mix_seed(config.seed, 0x5e6));
  SegNetConfig sc = config.profile == "full" ? SegNetConfig::full(config.num_parts) : SegNetConfig::tiny(config.num_parts);
  sc.height = config.seg_height;
  sc.width = config.seg_width;
  GeneratorConfig gc =
      config.profile == "full" ? GeneratorConfig::full(config.num_parts) : GeneratorConfig::tiny(config.num_parts);
  m->seg = std::make_unique<SegmentationNet>(sc, m->store, rng, dtype);
  m->gen = std::make_unique<Generator>(gc, m->store, rng, dtype);
  return m;
}

void Adam::ensure(const ParamStore& store) {
  if (!m_.empty()) return;
  for (const auto& e : store.entries()) {
    if (!e.trainable) continue;
    m_.push_back(Tensor::zeros(e.value.shape(), e.value.dtype()));
    v_.push_back(Tensor::zeros(e.value.shape(), e.value.dtype()));
  }
}

void Adam::step(ParamStore& store, double lr) {
  ensure(store);
  ++t_;
  const double c1 = 1 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1 - std::pow(beta2_, static_cast<double>(t_));
  std::size_t idx = 0;
  for (auto& e : store.entries()) {
    if (!e.trainable) continue;
    Tensor& p = e.value;
    const Buffer* g = p.grad_buffer();
    Tensor& m = m_[idx];
    Tensor& v = v_[idx];
    ++idx;
    if (!g) continue;  // untouched this step (e.g. the inject conv outside the naive variant)
    dispatch(p.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto pd = p.mutable_data<T>();
      auto md = m.mutable_data<T>();
      auto vd = v.mutable_data<T>();
      auto gd = g->as<T>();
      for (std::size_t i = 0; i < pd.size(); ++i) {
        const double gi = gd[i];
        const double mi = beta1_ * md[i] + (1 - beta1_) * gi;
        const double vi = beta2_ * vd[i] + (1 - beta2_) * gi * gi;
        md[i] = static_cast<T>(mi);
        vd[i] = static_cast<T>(vi);
        pd[i] = static_cast<T>(pd[i] - lr * (mi / c1) / (std::sqrt(vi / c2) + eps_));
      }
    });
  }
}

void Adam::save(const fs::path& dir, const ParamStore& store) const {
  fs::create_directories(dir);
  std::vector<std::string> names;
  for (const auto& e : store.entries()) {
    if (e.trainable) names.push_back(e.name);
  }
  for (std::size_t i = 0; i < m_.size(); ++i) {
    save_tensor(dir / ("m" + std::to_string(i) + ".cpmt"), m_[i]);
    save_tensor(dir / ("v" + std::to_string(i) + ".cpmt"), v_[i]);
  }
  std::ofstream os(dir / "adam.json");
  os << json{{"steps", t_}, {"beta1", beta1_}, {"beta2", beta2_}, {"eps", eps_},
             {"slots", m_.size()}, {"params", names}}
            .dump(2)
     << "\n";
}

void Adam::load(const fs::path& dir, const ParamStore& store) {
  std::ifstream is(dir / "adam.json");
  if (!is) throw IoError("optimizer state missing: " + (dir / "adam.json").string());
  json j = json::parse(is);
  t_ = j.at("steps").get<long>();
  m_.clear();
  v_.clear();
  const auto slots = j.at("slots").get<std::size_t>();
  for (std::size_t i = 0; i < slots; ++i) {
    m_.push_back(load_tensor(dir / ("m" + std::to_string(i) + ".cpmt")));
    v_.push_back(load_tensor(dir / ("v" + std::to_string(i) + ".cpmt")));
  }
  std::size_t idx = 0;
  for (const auto& e : store.entries()) {
    if (!e.trainable) continue;
    if (idx >= m_.size() || m_[idx].shape() != e.value.shape()) {
      throw FormatError("optimizer state does not match parameter '" + e.name + "'");
    }
    ++idx;
  }
  if (idx != m_.size()) throw FormatError("optimizer state has extra slots");
}

// ---- trainer ----

std::string loss_csv_header() { return "iter,l_rec,l_eq_kp,l_eq_A,total,wall_ms"; }

std::string loss_csv_row(const StepStats& s) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.9g,%.3f", s.iteration, s.l_rec, s.l_eq_kp, s.l_eq_A, s.total,
                s.wall_ms);
  return buf;
}

Trainer::Trainer(TrainConfig config, const Dataset& dataset)
    : config_(std::move(config)),
      dataset_(&dataset),
      adam_(config_.adam_beta1, config_.adam_beta2, config_.adam_eps),
      rng_(mix_seed(config_.seed, 0x7a1)) {
  config_.validate();
  if (dataset.train.empty()) throw ConfigError("dataset has no training videos");
  model_ = make_model(config_);
  extractor_ = std::make_unique<FeatureExtractor>(config_.extractor);
}

namespace {

std::string parameter_norms(const ParamStore& store) {
  std::ostringstream os;
  for (const auto& e : store.entries()) {
    double s = 0;
    bool finite = true;
    for (std::size_t i = 0; i < static_cast<std::size_t>(e.value.numel()); ++i) {
      const double v = e.value.flat(i);
      finite = finite && std::isfinite(v);
      s += v * v;
    }
    os << "  " << e.name << ": " << (finite ? std::to_string(std::sqrt(s)) : std::string("non-finite")) << "\n";
  }
  return os.str();
}

}  // namespace

StepStats Trainer::step() {
  const auto t0 = std::chrono::steady_clock::now();
  const Dataset& ds = *dataset_;
  nn::Mode mode{true, {}};
  mode.bn.instance_fallback = config_.bn_instance_fallback;

  std::vector<Tensor> src, tgt;
  std::vector<GeometricTransform> g, g_inv;
  last_batch_.clear();
  for (int b = 0; b < config_.batch_size; ++b) {
    const int vid = ds.train[rng_.below(ds.train.size())];
    const Video& video = ds.videos[static_cast<std::size_t>(vid)];
    const auto pair = sample_pair(video, rng_);
    last_batch_.push_back({vid, pair});
    src.push_back(video.frame(pair.first));
    tgt.push_back(video.frame(pair.second));
  }
  for (int b = 0; b < config_.batch_size; ++b) {
    g.push_back(sample_transform(rng_, config_.transforms, config_.seg_height, config_.seg_width));
    g_inv.push_back(g.back().inverse());
  }

  StepStats stats;
  stats.iteration = iteration_ + 1;
  try {
    Tensor xs = concat(src, 0), xt = concat(tgt, 0);
    // Content of the equivariance frame at z is the target frame at g(z).
    Tensor xt_warped = warp_frame(resize_down(xt, config_.seg_height, config_.seg_width), g_inv);
    const SegmentationNet& seg = *model_->seg;
    SegmentationOutput seg_s = seg.forward(xs, mode);
    SegmentationOutput seg_t = seg.forward(xt, mode);
    SegmentationOutput seg_w = seg.forward(xt_warped, mode);
    Reconstruction rec = reconstruct(*model_->gen, xs, seg_s, seg_t, config_.variant, mode, config_.motion);
    Tensor l_rec = reconstruction_loss(rec.image, xt, *extractor_, config_.scales);
    EquivarianceTerms eq = equivariance_loss(seg_t, seg_w, g, config_.motion);
    LossBreakdown loss = total_loss(l_rec, eq, config_.weights);

    model_->store.zero_grad();
    loss.total.backward();
    adam_.step(model_->store, config_.learning_rate);
    for (const auto& e : model_->store.entries()) check_finite(e.value.buffer(), "optimizer step");

    stats.l_rec = loss.reconstruction;
    stats.l_eq_kp = loss.keypoint;
    stats.l_eq_A = loss.jacobian;
    stats.total = loss.total.item();
  } catch (const NumericError& e) {
    std::ostringstream os;
    os << "training diverged at iteration " << stats.iteration << ": " << e.what() << "\nbatch (video, source, target):";
    for (const auto& [vid, pair] : last_batch_) os << " (" << vid << ", " << pair.first << ", " << pair.second << ")";
    os << "\nparameter norms:\n" << parameter_norms(model_->store);
    throw NumericError(os.str());
  }
  ++iteration_;
  if (config_.log_wall_time) stats.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return stats;
}

void Trainer::run(std::ostream* csv, const fs::path& checkpoint_dir,
                  const std::function<void(const StepStats&)>& on_step) {
  while (iteration_ < config_.iterations) {
    StepStats s;
    try {
      s = step();
    } catch (const NumericError& e) {
      if (!checkpoint_dir.empty()) {
        fs::create_directories(checkpoint_dir);
        std::ofstream(checkpoint_dir / "diagnostic.txt") << e.what() << "\n";
      }
      throw;
    }
    if (csv) *csv << loss_csv_row(s) << "\n" << std::flush;
    if (on_step) on_step(s);
    if (!checkpoint_dir.empty() && config_.checkpoint_every > 0 && iteration_ % config_.checkpoint_every == 0) {
      save_checkpoint(checkpoint_dir);
    }
  }
  if (!checkpoint_dir.empty()) save_checkpoint(checkpoint_dir);
}

void Trainer::save_checkpoint(const fs::path& dir) const {
  fs::create_directories(dir);
  model_->store.save(dir / "params");
  adam_.save(dir / "adam", model_->store);
  std::ofstream os(dir / "state.json");
  if (!os) throw IoError("cannot write checkpoint state in " + dir.string());
  os << json{{"iteration", iteration_}, {"rng", rng_.state()}, {"config", config_.to_json()}}.dump(2) << "\n";
}

namespace {

json read_state(const fs::path& dir) {
  std::ifstream is(dir / "state.json");
  if (!is) throw IoError("checkpoint state not found: " + (dir / "state.json").string());
  json j = json::parse(is, nullptr, false);
  if (j.is_discarded()) throw IoError("malformed checkpoint state: " + (dir / "state.json").string());
  return j;
}

}  // namespace

Trainer Trainer::from_checkpoint(const fs::path& dir, const Dataset& dataset) {
  json st = read_state(dir);
  Trainer t(TrainConfig::from_json(st.at("config")), dataset);
  t.model_->store.load(dir / "params");
  t.adam_.load(dir / "adam", t.model_->store);
  t.rng_.restore(st.at("rng").get<std::string>());
  t.iteration_ = st.at("iteration").get<int>();
  return t;
}

void Trainer::extend(const TrainConfig& config) {
  json mine = config_.to_json(), theirs = config.to_json();
  for (const char* key : {"iterations", "checkpoint_every", "log_wall_time"}) {
    mine.erase(key);
    theirs.erase(key);
  }
  for (auto it = theirs.begin(); it != theirs.end(); ++it) {
    if (!mine.contains(it.key()) || mine[it.key()] != it.value()) {
      throw ConfigError("config field '" + it.key() + "' cannot change when resuming a checkpoint");
    }
  }
  if (config.iterations < iteration_) {
    throw ConfigError("config field 'iterations' (" + std::to_string(config.iterations) +
                      ") is below the checkpoint iteration " + std::to_string(iteration_));
  }
  config_.iterations = config.iterations;
  config_.checkpoint_every = config.checkpoint_every;
  config_.log_wall_time = config.log_wall_time;
}

std::vector<StepStats> read_loss_csv(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read loss log " + path.string());
  std::vector<StepStats> rows;
  std::string line;
  std::getline(is, line);
  if (line != loss_csv_header()) throw IoError("unexpected loss log header in " + path.string());
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    StepStats s;
    if (std::sscanf(line.c_str(), "%d,%lf,%lf,%lf,%lf,%lf", &s.iteration, &s.l_rec, &s.l_eq_kp, &s.l_eq_A, &s.total,
                    &s.wall_ms) != 6) {
      throw IoError("malformed loss log row in " + path.string() + ": " + line);
    }
    rows.push_back(s);
  }
  return rows;
}

Trainer train_cached(const TrainConfig& config, const Dataset& dataset, const fs::path& dir,
                     const std::function<void(const StepStats&)>& on_step) {
  const fs::path ckpt = dir / "checkpoint", log = dir / "loss.csv";
  if (fs::exists(ckpt / "state.json") && fs::exists(log)) {
    try {
      Trainer t = Trainer::from_checkpoint(ckpt, dataset);
      t.extend(config);
      auto rows = read_loss_csv(log);
      if (static_cast<int>(rows.size()) >= t.iteration()) {
        rows.resize(static_cast<std::size_t>(t.iteration()));
        {
          std::ofstream os(log);
          os << loss_csv_header() << "\n";
          for (const auto& r : rows) os << loss_csv_row(r) << "\n";
        }
        if (t.iteration() < config.iterations) {
          std::ofstream os(log, std::ios::app);
          t.run(&os, ckpt, on_step);
        }
        return t;
      }
    } catch (const ConfigError&) {
      // A different configuration: start over below.
    }
  }
  fs::remove_all(dir);
  fs::create_directories(dir);
  Trainer t(config, dataset);
  std::ofstream os(log);
  if (!os) throw IoError("cannot write loss log " + log.string());
  os << loss_csv_header() << "\n";
  t.run(&os, ckpt, on_step);
  return t;
}

std::pair<TrainConfig, std::unique_ptr<Model>> load_model(const fs::path& dir) {
  json st = read_state(dir);
  TrainConfig c = TrainConfig::from_json(st.at("config"));
  auto m = make_model(c);
  m->store.load(dir / "params");
  return {c, std::move(m)};
}

// ---- metrics ----

std::vector<std::vector<std::array<double, 2>>> centers_of_mass(const Tensor& masks) {
  const std::int64_t n = masks.dim(0), k = masks.dim(1) - 1, h = masks.dim(2), w = masks.dim(3);
  const std::size_t plane = static_cast<std::size_t>(h * w);
  std::vector<std::vector<std::array<double, 2>>> out(static_cast<std::size_t>(n));
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t c = 0; c < k; ++c) {
      const std::size_t base = static_cast<std::size_t>(b * (k + 1) + c) * plane;
      double mass = 0, sx = 0, sy = 0;
      for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) {
          const double v = masks.flat(base + static_cast<std::size_t>(y * w + x));
          mass += v;
          sx += v * static_cast<double>(x);
          sy += v * static_cast<double>(y);
        }
      }
      if (mass < 1e-8) {
        out[static_cast<std::size_t>(b)].push_back({(static_cast<double>(w) - 1) / 2, (static_cast<double>(h) - 1) / 2});
      } else {
        out[static_cast<std::size_t>(b)].push_back({sx / mass, sy / mass});
      }
    }
  }
  return out;
}

std::vector<double> LinearRegression::predict(const std::vector<double>& x) const {
  const std::size_t outs = coef.empty() ? 0 : coef[0].size();
  std::vector<double> y(outs, 0.0);
  for (std::size_t o = 0; o < outs; ++o) {
    double s = coef.back()[o];
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * coef[i][o];
    y[o] = s;
  }
  return y;
}

LinearRegression fit_linear(const std::vector<std::vector<double>>& x, const std::vector<std::vector<double>>& y) {
  if (x.empty() || x.size() != y.size()) throw std::invalid_argument("fit_linear: need matching non-empty samples");
  const Eigen::Index n = static_cast<Eigen::Index>(x.size());
  const Eigen::Index f = static_cast<Eigen::Index>(x[0].size());
  const Eigen::Index o = static_cast<Eigen::Index>(y[0].size());
  Eigen::MatrixXd a(n, f + 1), b(n, o);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < f; ++j) a(i, j) = x[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    a(i, f) = 1.0;
    for (Eigen::Index j = 0; j < o; ++j) b(i, j) = y[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  }
  // Rank-revealing QR; degenerate (collapsed) centers still give a minimum-norm-like fit.
  Eigen::MatrixXd sol = a.completeOrthogonalDecomposition().solve(b);
  LinearRegression r;
  r.coef.assign(static_cast<std::size_t>(f + 1), std::vector<double>(static_cast<std::size_t>(o)));
  for (Eigen::Index i = 0; i <= f; ++i) {
    for (Eigen::Index j = 0; j < o; ++j) r.coef[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = sol(i, j);
  }
  return r;
}

double mean_absolute_error(const LinearRegression& model, const std::vector<std::vector<double>>& x,
                           const std::vector<std::vector<double>>& y) {
  double s = 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const auto p = model.predict(x[i]);
    for (std::size_t j = 0; j < p.size(); ++j) {
      s += std::abs(p[j] - y[i][j]);
      ++count;
    }
  }
  return count ? s / static_cast<double>(count) : 0.0;
}

double foreground_iou(const Tensor& masks, const std::uint8_t* labels, int background_label) {
  const std::int64_t k = masks.dim(-3) - 1, h = masks.dim(-2), w = masks.dim(-1);
  const std::size_t plane = static_cast<std::size_t>(h * w);
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < plane; ++i) {
    double fg = 0;
    for (std::int64_t c = 0; c < k; ++c) fg += masks.flat(static_cast<std::size_t>(c) * plane + i);
    const bool pred = fg > 0.5;
    const bool truth = labels[i] != background_label;
    inter += pred && truth;
    uni += pred || truth;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double endpoint_error(const Tensor& flow, const Tensor& gt, const std::vector<std::uint8_t>& valid) {
  const std::size_t plane = valid.size();
  double s = 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < plane; ++i) {
    if (!valid[i]) continue;
    s += std::hypot(flow.flat(i) - gt.flat(i), flow.flat(plane + i) - gt.flat(plane + i));
    ++count;
  }
  return count ? s / static_cast<double>(count) : 0.0;
}

json MetricsReport::to_json() const {
  return {{"variant", variant},
          {"mae", mae},
          {"iou", iou},
          {"epe", epe},
          {"reconstruction_loss", reconstruction_loss},
          {"fit_frames", fit_frames},
          {"test_frames", test_frames},
          {"flow_pairs", flow_pairs}};
}

std::vector<std::string> validate_metrics_json(const json& j) {
  std::vector<std::string> problems;
  if (!j.is_object()) return {"report must be a JSON object"};
  const std::set<std::string> keys{"variant", "mae", "iou", "epe", "reconstruction_loss",
                                   "fit_frames", "test_frames", "flow_pairs"};
  for (const auto& [k, v] : j.items()) {
    (void)v;
    if (!keys.count(k)) problems.push_back("unexpected field '" + k + "'");
  }
  for (const auto& k : keys) {
    if (!j.contains(k)) problems.push_back("missing field '" + k + "'");
  }
  if (!problems.empty()) return problems;
  if (!j["variant"].is_string()) {
    problems.push_back("'variant' must be a string");
  } else {
    try {
      parse_variant(j["variant"].get<std::string>());
    } catch (const std::invalid_argument&) {
      problems.push_back("'variant' is not a known variant");
    }
  }
  for (const char* k : {"mae", "epe", "reconstruction_loss"}) {
    if (!j[k].is_number() || j[k].get<double>() < 0) problems.push_back(std::string("'") + k + "' must be a number >= 0");
  }
  if (!j["iou"].is_number() || j["iou"].get<double>() < 0 || j["iou"].get<double>() > 1) {
    problems.push_back("'iou' must be a number in [0, 1]");
  }
  for (const char* k : {"fit_frames", "test_frames", "flow_pairs"}) {
    if (!j[k].is_number_integer() || j[k].get<long>() < 0) {
      problems.push_back(std::string("'") + k + "' must be a non-negative integer");
    }
  }
  return problems;
}

namespace {

struct FrameRef {
  int video;
  std::int64_t frame;
};

std::vector<FrameRef> pick_frames(const Dataset& ds, const std::vector<int>& videos, int count, Rng& rng) {
  std::vector<FrameRef> out;
  if (videos.empty()) return out;
  for (int i = 0; i < count; ++i) {
    const int v = videos[rng.below(videos.size())];
    out.push_back({v, static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(ds.videos[static_cast<std::size_t>(v)].frames)))});
  }
  return out;
}

Tensor seg_input(const Tensor& frame, DType dtype) { return frame.dtype() == dtype ? frame : frame.to(dtype); }

}  // namespace

MetricsReport evaluate(const Model& model, const TrainConfig& config, const Dataset& ds, const EvalOptions& opts) {
  NoGradGuard guard;
  const nn::Mode mode{false, {}};
  Rng rng(opts.seed);
  const DType dt = model.store.entries().front().value.dtype();
  MetricsReport r;
  r.variant = to_string(config.variant);

  auto seg_frames = [&](const std::vector<FrameRef>& refs) {
    std::vector<SegmentationOutput> outs;
    for (const auto& f : refs) {
      outs.push_back(model.seg->forward(seg_input(ds.videos[static_cast<std::size_t>(f.video)].frame(f.frame), dt), mode));
    }
    return outs;
  };

  auto fit_refs = pick_frames(ds, ds.train, opts.fit_frames, rng);
  auto test_refs = pick_frames(ds, ds.test, opts.test_frames, rng);
  auto fit_out = seg_frames(fit_refs);
  auto test_out = seg_frames(test_refs);

  auto features = [&](const std::vector<FrameRef>& refs, const std::vector<SegmentationOutput>& outs,
                      std::vector<std::vector<double>>& x, std::vector<std::vector<double>>& y) {
    for (std::size_t i = 0; i < refs.size(); ++i) {
      const auto centers = centers_of_mass(outs[i].masks)[0];
      std::vector<double> row;
      for (const auto& c : centers) row.insert(row.end(), {c[0], c[1]});
      x.push_back(row);
      const Video& v = ds.videos[static_cast<std::size_t>(refs[i].video)];
      std::vector<double> lm;
      for (int k = 0; k < v.num_parts; ++k) {
        const auto& p = v.pose(refs[i].frame, k);
        // Landmarks live in frame pixels; centers in segmentation pixels.
        lm.insert(lm.end(), {p.offset[0], p.offset[1]});
      }
      y.push_back(lm);
    }
  };
  std::vector<std::vector<double>> fx, fy, tx, ty;
  features(fit_refs, fit_out, fx, fy);
  features(test_refs, test_out, tx, ty);
  if (!fx.empty() && !tx.empty()) r.mae = mean_absolute_error(fit_linear(fx, fy), tx, ty);
  r.fit_frames = static_cast<int>(fx.size());
  r.test_frames = static_cast<int>(tx.size());

  double iou = 0;
  for (std::size_t i = 0; i < test_refs.size(); ++i) {
    const Video& v = ds.videos[static_cast<std::size_t>(test_refs[i].video)];
    Tensor masks = test_out[i].masks;
    if (masks.dim(2) != v.height || masks.dim(3) != v.width) {
      throw ShapeError("evaluate: IoU needs segmentation at frame resolution");
    }
    iou += foreground_iou(masks, v.label_plane(test_refs[i].frame), v.num_parts);
  }
  r.iou = test_refs.empty() ? 0.0 : iou / static_cast<double>(test_refs.size());

  // Flow error and held-out reconstruction loss on frame pairs.
  FeatureExtractor extractor(config.extractor, dt);
  double epe_sum = 0, rec_sum = 0;
  std::size_t epe_pixels = 0;
  for (int i = 0; i < opts.flow_pairs && !ds.test.empty(); ++i) {
    const int vid = ds.test[rng.below(ds.test.size())];
    const Video& v = ds.videos[static_cast<std::size_t>(vid)];
    const auto [s, t] = sample_pair(v, rng);
    const SyntheticSample sample = make_sample(v, s, t);
    Tensor xs = seg_input(sample.source, dt), xt = seg_input(sample.target, dt);
    SegmentationOutput so = model.seg->forward(xs, mode), to = model.seg->forward(xt, mode);
    // The naive variant never builds a flow; its segmentation is scored with the affine model.
    const Variant flow_variant = config.variant == Variant::naive ? Variant::affine_only : config.variant;
    Tensor flow = variant_flow(so, to, flow_variant, config.motion).first;
    if (flow.dim(2) != v.height || flow.dim(3) != v.width) flow = resample_flow(flow, v.height, v.width);
    const std::size_t plane = static_cast<std::size_t>(v.height * v.width);
    std::vector<std::uint8_t> valid(plane);
    const auto* lt = v.label_plane(t);
    std::size_t count = 0;
    for (std::size_t p = 0; p < plane; ++p) {
      valid[p] = lt[p] != v.num_parts && sample.disocclusion.flat(p) == 0;
      count += valid[p];
    }
    epe_sum += endpoint_error(flow, sample.flow, valid) * static_cast<double>(count);
    epe_pixels += count;
    Reconstruction rec = reconstruct(*model.gen, xs, so, to, config.variant, mode, config.motion);
    rec_sum += reconstruction_loss(rec.image, xt, extractor, config.scales).item();
    ++r.flow_pairs;
  }
  r.epe = epe_pixels ? epe_sum / static_cast<double>(epe_pixels) : 0.0;
  r.reconstruction_loss = r.flow_pairs ? rec_sum / r.flow_pairs : 0.0;
  return r;
}

}  // namespace cpseg
