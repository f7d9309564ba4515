#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "cpseg/pipeline.hpp"
#include "helpers.hpp"

using namespace cpseg;
namespace fs = std::filesystem;

namespace {

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

// Normal equations with an intercept column, solved by Gaussian elimination.
std::vector<std::vector<double>> normal_equations(const std::vector<std::vector<double>>& x,
                                                  const std::vector<std::vector<double>>& y) {
  const std::size_t d = x[0].size() + 1, m = y[0].size();
  std::vector<std::vector<double>> a(d, std::vector<double>(d + m, 0.0));
  for (std::size_t r = 0; r < x.size(); ++r) {
    std::vector<double> row = x[r];
    row.push_back(1.0);
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t j = 0; j < d; ++j) a[i][j] += row[i] * row[j];
      for (std::size_t j = 0; j < m; ++j) a[i][d + j] += row[i] * y[r][j];
    }
  }
  for (std::size_t c = 0; c < d; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < d; ++r)
      if (std::abs(a[r][c]) > std::abs(a[piv][c])) piv = r;
    std::swap(a[c], a[piv]);
    for (std::size_t r = 0; r < d; ++r) {
      if (r == c) continue;
      const double f = a[r][c] / a[c][c];
      for (std::size_t j = c; j < d + m; ++j) a[r][j] -= f * a[c][j];
    }
  }
  std::vector<std::vector<double>> coef(d, std::vector<double>(m));
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < m; ++j) coef[i][j] = a[i][d + j] / a[i][i];
  return coef;
}

double oracle_mae(const std::vector<std::vector<double>>& coef, const std::vector<std::vector<double>>& x,
                  const std::vector<std::vector<double>>& y) {
  double s = 0;
  for (std::size_t r = 0; r < x.size(); ++r)
    for (std::size_t j = 0; j < y[0].size(); ++j) {
      double p = coef.back()[j];
      for (std::size_t i = 0; i < x[r].size(); ++i) p += coef[i][j] * x[r][i];
      s += std::abs(p - y[r][j]);
    }
  return s / double(x.size() * y[0].size());
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.num_parts = 2;
  c.batch_size = 2;
  c.iterations = 6;
  c.log_wall_time = false;
  return c;
}

Dataset tiny_dataset() {
  DatasetSpec spec;
  spec.videos = 4;
  spec.test_videos = 1;
  spec.scene.frames = 4;
  return build_dataset(spec);
}

std::string run_log(Trainer& t) {
  std::ostringstream os;
  t.run(&os);
  return os.str();
}

}  // namespace

TEST_CASE("config parsing") {
  SUBCASE("defaults and presets") {
    TrainConfig d = TrainConfig::desk();
    CHECK(d.num_parts == 3);
    CHECK(d.batch_size == 4);
    CHECK(d.learning_rate == 7e-4);
    TrainConfig p = TrainConfig::large();
    CHECK(p.num_parts == 10);
    CHECK(p.batch_size == 20);
    CHECK(p.iterations == 10000);
    CHECK(p.learning_rate == 2e-4);
    CHECK(p.weights.keypoint == 10);
    CHECK(p.weights.jacobian == 10);
    CHECK(p.scales == std::vector<std::int64_t>{256, 128, 64, 32});
  }
  SUBCASE("json round trip") {
    TrainConfig c = tiny_config();
    c.variant = Variant::v_backprop;
    c.transforms.shear = 0.05;
    CHECK(TrainConfig::from_json(c.to_json()).to_json() == c.to_json());
  }
  SUBCASE("errors name the field") {
    CHECK(error_of([] { TrainConfig::from_json({{"learning_rate", "fast"}}); }).find("learning_rate") != std::string::npos);
    CHECK(error_of([] { TrainConfig::from_json({{"bogus", 1}}); }).find("bogus") != std::string::npos);
    CHECK(error_of([] { TrainConfig::from_json({{"batch_size", 0}}); }).find("batch_size") != std::string::npos);
    CHECK(error_of([] { TrainConfig::from_json({{"variant", "other"}}); }).find("variant") != std::string::npos);
    CHECK(error_of([] { TrainConfig::from_json({{"transforms", {{"shear", "x"}}}}); }).find("shear") != std::string::npos);
    CHECK(error_of([] { TrainConfig::from_json({{"extractor", {{"mode", "vgg"}}}}); }).find("extractor.mode") !=
          std::string::npos);
  }
  SUBCASE("overrides") {
    TrainConfig c = apply_overrides(TrainConfig{}, {"learning_rate=0.001", "transforms.rotation_deg=5",
                                                    "variant=" + to_string(Variant::naive), "scales=[64,32]"});
    CHECK(c.learning_rate == 0.001);
    CHECK(c.transforms.rotation_deg == 5);
    CHECK(c.variant == Variant::naive);
    CHECK(c.scales == std::vector<std::int64_t>{64, 32});
    CHECK(error_of([] { apply_overrides(TrainConfig{}, {"transforms.spin=1"}); }).find("transforms.spin") !=
          std::string::npos);
    CHECK(!error_of([] { apply_overrides(TrainConfig{}, {"learning_rate"}); }).empty());
  }
}

TEST_CASE("centers of mass") {
  std::vector<double> m(3 * 6 * 8, 0.0);
  m[3 * 8 + 5] = 1.0;  // part 0: single pixel at x = 5, y = 3
  for (std::size_t i = 2 * 48; i < 3 * 48; ++i) m[i] = 1.0;
  m[2 * 48 + 3 * 8 + 5] = 0.0;
  auto c = centers_of_mass(Tensor::from({1, 3, 6, 8}, m));
  CHECK(c[0][0][0] == 5.0);
  CHECK(c[0][0][1] == 3.0);
  // Empty part: grid centroid.
  CHECK(c[0][1][0] == 3.5);
  CHECK(c[0][1][1] == 2.5);
}

TEST_CASE("regression and MAE") {
  Rng rng(1);
  std::vector<std::vector<double>> x, y;
  for (int i = 0; i < 200; ++i) {
    std::vector<double> row;
    for (int j = 0; j < 6; ++j) row.push_back(rng.uniform(0, 64));
    x.push_back(row);
  }
  SUBCASE("exact affine landmarks are recovered") {
    for (auto& row : x) {
      std::vector<double> out;
      for (int j = 0; j < 4; ++j) {
        double v = 3.0 - j;
        for (std::size_t i = 0; i < row.size(); ++i) v += std::sin(double(i + 7 * j)) * row[i];
        out.push_back(v);
      }
      y.push_back(out);
    }
    LinearRegression fit = fit_linear(x, y);
    CHECK(mean_absolute_error(fit, x, y) < 1e-6);
  }
  SUBCASE("matches the normal-equations oracle on noisy data") {
    for (auto& row : x) y.push_back({row[0] * 0.5 + rng.normal() * 3, row[3] - row[1] + rng.normal() * 2});
    std::vector<std::vector<double>> xt(x.begin(), x.begin() + 120), yt(y.begin(), y.begin() + 120);
    std::vector<std::vector<double>> xe(x.begin() + 120, x.end()), ye(y.begin() + 120, y.end());
    const double got = mean_absolute_error(fit_linear(xt, yt), xe, ye);
    const double expect = oracle_mae(normal_equations(xt, yt), xe, ye);
    CHECK(std::abs(got - expect) / expect < 1e-5);
  }
}

TEST_CASE("foreground IoU") {
  const std::int64_t h = 8, w = 8;
  auto masks_from = [&](const std::vector<std::uint8_t>& fg) {
    std::vector<double> m(2 * h * w, 0.0);
    for (std::size_t i = 0; i < fg.size(); ++i) m[fg[i] ? i : h * w + i] = 1.0;
    return Tensor::from({1, 2, h, w}, m);
  };
  auto rect = [&](int x0, int y0, int size) {
    std::vector<std::uint8_t> fg(h * w, 0);
    for (int y = y0; y < y0 + size; ++y)
      for (int x = x0; x < x0 + size; ++x) fg[static_cast<std::size_t>(y * w + x)] = 1;
    return fg;
  };
  auto labels = [](const std::vector<std::uint8_t>& fg) {
    std::vector<std::uint8_t> l(fg.size());
    for (std::size_t i = 0; i < fg.size(); ++i) l[i] = fg[i] ? 0 : 1;
    return l;
  };
  auto a = rect(0, 0, 4), b = rect(2, 0, 4), far = rect(4, 4, 4);
  CHECK(foreground_iou(masks_from(a), labels(a).data(), 1) == 1.0);
  CHECK(foreground_iou(masks_from(a), labels(far).data(), 1) == 0.0);
  CHECK(foreground_iou(masks_from(a), labels(b).data(), 1) == 8.0 / 24.0);

  Rng rng(2);
  Tensor soft = channel_softmax(testing::randn(rng, {1, 3, h, w}, DType::f64, 2.0));
  std::vector<std::uint8_t> lab(h * w);
  for (auto& l : lab) l = static_cast<std::uint8_t>(rng.below(3));
  int inter = 0, uni = 0;
  for (std::int64_t i = 0; i < h * w; ++i) {
    const bool p = soft.flat(static_cast<std::size_t>(i)) + soft.flat(static_cast<std::size_t>(h * w + i)) > 0.5;
    const bool t = lab[static_cast<std::size_t>(i)] != 2;
    inter += p && t;
    uni += p || t;
  }
  CHECK(foreground_iou(soft, lab.data(), 2) == double(inter) / double(uni));
}

TEST_CASE("endpoint error") {
  Rng rng(3);
  Tensor gt = testing::randn(rng, {2, 4, 4});
  Tensor off = add(gt, Tensor::from({2, 1, 1}, std::vector<double>{3, 4}));
  std::vector<std::uint8_t> all(16, 1), none(16, 0), half(16, 0);
  CHECK(std::abs(endpoint_error(off, gt, all) - 5.0) < 1e-12);
  CHECK(endpoint_error(off, gt, none) == 0.0);
  CHECK(endpoint_error(gt, gt, all) == 0.0);
  Tensor partial = gt.clone();
  partial.mutable_data<double>()[0] += 2;
  half[0] = half[1] = 1;
  CHECK(std::abs(endpoint_error(partial, gt, half) - 1.0) < 1e-12);
}

TEST_CASE("metrics report schema") {
  MetricsReport r;
  r.variant = "full";
  r.mae = 1.5;
  r.iou = 0.7;
  CHECK(validate_metrics_json(r.to_json()).empty());
  auto j = r.to_json();
  j.erase("iou");
  CHECK(!validate_metrics_json(j).empty());
  j = r.to_json();
  j["mae"] = "high";
  CHECK(!validate_metrics_json(j).empty());
}

TEST_CASE("adam matches a hand-rolled update") {
  ParamStore store;
  store.add("p", Tensor::from({2}, std::vector<double>{1.0, -2.0}));
  Adam adam(0.9, 0.999, 1e-8);
  double x[2] = {1.0, -2.0}, m[2] = {0, 0}, v[2] = {0, 0};
  const double grads[3][2] = {{0.5, -1.0}, {0.25, 2.0}, {-1.0, 0.1}};
  for (int t = 1; t <= 3; ++t) {
    store.zero_grad();
    Tensor& p = store.get("p");
    sum(mul(p, Tensor::from({2}, std::vector<double>{grads[t - 1][0], grads[t - 1][1]}))).backward();
    adam.step(store, 0.01);
    for (int i = 0; i < 2; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * grads[t - 1][i];
      v[i] = 0.999 * v[i] + 0.001 * grads[t - 1][i] * grads[t - 1][i];
      x[i] -= 0.01 * (m[i] / (1 - std::pow(0.9, t))) / (std::sqrt(v[i] / (1 - std::pow(0.999, t))) + 1e-8);
      CHECK(std::abs(store.get("p").flat(static_cast<std::size_t>(i)) - x[i]) < 1e-12);
    }
  }
  CHECK(adam.steps() == 3);
}

TEST_CASE("training is reproducible and resumable") {
  const Dataset ds = tiny_dataset();
  Trainer a(tiny_config(), ds), b(tiny_config(), ds);
  const std::string la = run_log(a), lb = run_log(b);
  CHECK(la == lb);
  CHECK(std::count(la.begin(), la.end(), '\n') == 6);
  for (std::size_t i = 0; i < a.model().store.entries().size(); ++i)
    CHECK(testing::bitwise_equal(a.model().store.entries()[i].value, b.model().store.entries()[i].value));

  TrainConfig other = tiny_config();
  other.seed = 1;
  Trainer c(other, ds);
  CHECK(run_log(c) != la);

  // Half the run, a checkpoint round trip, then the rest.
  TrainConfig half = tiny_config();
  half.iterations = 3;
  const fs::path dir = fs::temp_directory_path() / "cpseg_test_ckpt";
  fs::remove_all(dir);
  Trainer first(half, ds);
  std::string log = run_log(first);
  first.save_checkpoint(dir);
  Trainer resumed = Trainer::from_checkpoint(dir, ds);
  CHECK(resumed.iteration() == 3);
  TrainConfig changed = tiny_config();
  changed.learning_rate = 1e-3;
  CHECK_THROWS_AS(resumed.extend(changed), ConfigError);
  resumed.extend(tiny_config());
  log += run_log(resumed);
  CHECK(log == la);
  for (std::size_t i = 0; i < a.model().store.entries().size(); ++i)
    CHECK(testing::bitwise_equal(a.model().store.entries()[i].value, resumed.model().store.entries()[i].value));

  auto [cfg, model] = load_model(dir);
  CHECK(cfg.num_parts == 2);
  CHECK(model->store.entries().size() == a.model().store.entries().size());
  fs::remove_all(dir);
}

TEST_CASE("cached training reuses and extends earlier runs") {
  const Dataset ds = tiny_dataset();
  const fs::path dir = fs::temp_directory_path() / "cpseg_test_cache";
  fs::remove_all(dir);
  TrainConfig c = tiny_config();
  c.iterations = 3;
  train_cached(c, ds, dir);
  auto first = read_loss_csv(dir / "loss.csv");
  CHECK(first.size() == 3);
  int steps = 0;
  train_cached(c, ds, dir, [&](const StepStats&) { ++steps; });
  CHECK(steps == 0);
  Trainer t = train_cached(tiny_config(), ds, dir, [&](const StepStats&) { ++steps; });
  CHECK(steps == 3);
  CHECK(t.iteration() == 6);
  Trainer ref(tiny_config(), ds);
  std::ostringstream os;
  os << loss_csv_header() << "\n" << run_log(ref);
  std::ifstream is(dir / "loss.csv");
  std::stringstream got;
  got << is.rdbuf();
  CHECK(got.str() == os.str());
  TrainConfig other = tiny_config();
  other.seed = 3;
  train_cached(other, ds, dir);
  CHECK(read_loss_csv(dir / "loss.csv").size() == 6);
  CHECK(Trainer::from_checkpoint(dir / "checkpoint", ds).config().seed == 3);
  fs::remove_all(dir);
}

TEST_CASE("evaluation produces finite, bounded metrics") {
  const Dataset ds = tiny_dataset();
  TrainConfig cfg = tiny_config();
  auto model = make_model(cfg);
  EvalOptions opts;
  opts.fit_frames = 12;
  opts.test_frames = 4;
  opts.flow_pairs = 3;
  MetricsReport r = evaluate(*model, cfg, ds, opts);
  CHECK(std::isfinite(r.mae));
  CHECK(r.iou >= 0);
  CHECK(r.iou <= 1);
  CHECK(r.epe >= 0);
  CHECK(r.reconstruction_loss > 0);
  CHECK(validate_metrics_json(r.to_json()).empty());
  MetricsReport again = evaluate(*model, cfg, ds, opts);
  CHECK(again.to_json() == r.to_json());
}
