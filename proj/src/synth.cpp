#include "cpseg/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "cpseg/cpmt.hpp"
#include "cpseg/image_io.hpp"

namespace cpseg {

namespace fs = std::filesystem;
using nlohmann::json;

Pose Pose::inverse() const {
  const double det = linear[0] * linear[3] - linear[1] * linear[2];
  Pose p;
  p.linear = {linear[3] / det, -linear[1] / det, -linear[2] / det, linear[0] / det};
  p.offset = {-(p.linear[0] * offset[0] + p.linear[1] * offset[1]),
              -(p.linear[2] * offset[0] + p.linear[3] * offset[1])};
  return p;
}

Pose Pose::then(const Pose& inner) const {
  Pose p;
  const auto& a = linear;
  const auto& b = inner.linear;
  p.linear = {a[0] * b[0] + a[1] * b[2], a[0] * b[1] + a[1] * b[3], a[2] * b[0] + a[3] * b[2],
              a[2] * b[1] + a[3] * b[3]};
  p.offset = apply(inner.offset[0], inner.offset[1]);
  return p;
}

Pose Pose::translation(double x, double y) {
  Pose p;
  p.offset = {x, y};
  return p;
}

Pose Pose::rotation(double r) {
  Pose p;
  p.linear = {std::cos(r), -std::sin(r), std::sin(r), std::cos(r)};
  return p;
}

Pose Pose::scaling(double s) {
  Pose p;
  p.linear = {s, 0, 0, s};
  return p;
}

std::string to_string(PartShape s) {
  switch (s) {
    case PartShape::rectangle: return "rectangle";
    case PartShape::ellipse: return "ellipse";
    case PartShape::capsule: return "capsule";
  }
  return "?";
}

double Texture::eval(int c, double u, double v) const {
  double value = base[static_cast<std::size_t>(c)];
  for (const auto& w : waves) value += w.amplitude[static_cast<std::size_t>(c)] * std::sin(w.kx * u + w.ky * v + w.phase);
  return std::clamp(value, 0.0, 1.0);
}

bool PartSpec::contains(double u, double v) const {
  switch (shape) {
    case PartShape::rectangle:
      return std::abs(u) <= half_width && std::abs(v) <= half_height;
    case PartShape::ellipse: {
      const double a = u / half_width, b = v / half_height;
      return a * a + b * b <= 1.0;
    }
    case PartShape::capsule: {
      const double reach = std::max(0.0, half_height - half_width);
      const double dv = std::max(0.0, std::abs(v) - reach);
      return u * u + dv * dv <= half_width * half_width;
    }
  }
  return false;
}

json SceneConfig::to_json() const {
  return {{"height", height},
          {"width", width},
          {"frames", frames},
          {"num_parts", num_parts},
          {"max_translation", max_translation},
          {"max_rotation_deg", max_rotation_deg},
          {"max_log_scale", max_log_scale},
          {"max_swing_deg", max_swing_deg},
          {"max_retries", max_retries}};
}

SceneConfig SceneConfig::from_json(const json& j) {
  SceneConfig c;
  c.height = j.value("height", c.height);
  c.width = j.value("width", c.width);
  c.frames = j.value("frames", c.frames);
  c.num_parts = j.value("num_parts", c.num_parts);
  c.max_translation = j.value("max_translation", c.max_translation);
  c.max_rotation_deg = j.value("max_rotation_deg", c.max_rotation_deg);
  c.max_log_scale = j.value("max_log_scale", c.max_log_scale);
  c.max_swing_deg = j.value("max_swing_deg", c.max_swing_deg);
  c.max_retries = j.value("max_retries", c.max_retries);
  return c;
}

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

// Wavelengths of 12-24 px keep bilinear resampling error of the texture
// around a couple of gray levels.
Texture sample_texture(Rng& rng, double unit, double lo, double hi) {
  Texture t;
  for (auto& b : t.base) b = rng.uniform(lo, hi);
  for (int i = 0; i < 3; ++i) {
    Texture::Wave w;
    const double lambda = rng.uniform(12.0, 24.0) * unit;
    const double dir = rng.uniform(0, 2 * std::numbers::pi);
    const double k = 2 * std::numbers::pi / lambda;
    w.kx = k * std::cos(dir);
    w.ky = k * std::sin(dir);
    w.phase = rng.uniform(0, 2 * std::numbers::pi);
    for (auto& a : w.amplitude) a = rng.uniform(-0.08, 0.08);
    t.waves.push_back(w);
  }
  return t;
}

struct Oscillation {
  double amplitude = 0, frequency = 0, phase = 0;
  double at(double tau) const { return amplitude * std::sin(2 * std::numbers::pi * frequency * tau + phase); }
};

Oscillation sample_oscillation(Rng& rng, double max_amplitude) {
  return {rng.uniform(0.3, 1.0) * max_amplitude, rng.uniform(0.4, 1.0), rng.uniform(0, 2 * std::numbers::pi)};
}

struct Limb {
  double joint_u = 0, joint_v = 0, rest_angle = 0;
  Oscillation swing;
};

void sample_trajectories(Scene& scene, Rng& rng, double unit) {
  const auto& cfg = scene.config;
  const double cx0 = (static_cast<double>(cfg.width) - 1) / 2 + rng.uniform(-4, 4) * unit;
  const double cy0 = (static_cast<double>(cfg.height) - 1) / 2 + rng.uniform(-4, 4) * unit;
  const double theta0 = rng.uniform(-30, 30) * kDeg;
  Oscillation ox = sample_oscillation(rng, cfg.max_translation * unit);
  Oscillation oy = sample_oscillation(rng, cfg.max_translation * unit);
  Oscillation orot = sample_oscillation(rng, cfg.max_rotation_deg * kDeg);
  Oscillation oscale = sample_oscillation(rng, cfg.max_log_scale);

  const PartSpec& torso = scene.parts[0];
  std::vector<Limb> limbs;
  const double sector = 2 * std::numbers::pi / std::max<std::size_t>(1, scene.parts.size() - 1);
  const double start = rng.uniform(0, 2 * std::numbers::pi);
  for (std::size_t k = 1; k < scene.parts.size(); ++k) {
    // Limbs attach in separate angular sectors so they rarely overlap each other.
    const double psi = start + sector * (static_cast<double>(k - 1) + rng.uniform(0.2, 0.8));
    Limb l;
    l.joint_u = 0.8 * torso.half_width * std::cos(psi);
    l.joint_v = 0.8 * torso.half_height * std::sin(psi);
    l.rest_angle = psi - std::numbers::pi / 2;
    l.swing = sample_oscillation(rng, cfg.max_swing_deg * kDeg);
    limbs.push_back(l);
  }

  scene.poses.assign(static_cast<std::size_t>(cfg.frames), {});
  for (int t = 0; t < cfg.frames; ++t) {
    const double tau = cfg.frames > 1 ? static_cast<double>(t) / (cfg.frames - 1) : 0.0;
    const Pose body = Pose::translation(cx0 + ox.at(tau), cy0 + oy.at(tau))
                          .then(Pose::rotation(theta0 + orot.at(tau)))
                          .then(Pose::scaling(std::exp(oscale.at(tau))));
    auto& frame = scene.poses[static_cast<std::size_t>(t)];
    frame.push_back(body);
    for (std::size_t k = 1; k < scene.parts.size(); ++k) {
      const Limb& l = limbs[k - 1];
      const PartSpec& p = scene.parts[k];
      frame.push_back(body.then(Pose::translation(l.joint_u, l.joint_v))
                          .then(Pose::rotation(l.rest_angle + l.swing.at(tau)))
                          .then(Pose::translation(0, p.half_height - p.half_width)));
    }
  }
}

}  // namespace

bool scene_inside_canvas(const Scene& scene) {
  const double xmax = static_cast<double>(scene.config.width) - 2, ymax = static_cast<double>(scene.config.height) - 2;
  for (const auto& frame : scene.poses) {
    for (std::size_t k = 0; k < scene.parts.size(); ++k) {
      const PartSpec& p = scene.parts[k];
      for (double su : {-1.0, 1.0}) {
        for (double sv : {-1.0, 1.0}) {
          const auto z = frame[k].apply(su * p.half_width, sv * p.half_height);
          if (z[0] < 1 || z[0] > xmax || z[1] < 1 || z[1] > ymax) return false;
        }
      }
    }
  }
  return true;
}

Scene sample_scene(const SceneConfig& config, std::uint64_t seed) {
  if (config.num_parts < 1 || config.num_parts > 250) throw SynthError("num_parts must be in [1, 250]");
  if (config.frames < 1) throw SynthError("frames must be >= 1");
  Rng rng(seed);
  Scene scene;
  scene.config = config;
  const double unit = static_cast<double>(std::min(config.height, config.width)) / 64.0;
  // Darker background and brighter parts keep every part distinguishable from
  // the background whatever the sampled hues.
  scene.background = sample_texture(rng, unit, 0.1, 0.4);

  PartSpec torso;
  torso.shape = rng.uniform() < 0.5 ? PartShape::ellipse : PartShape::rectangle;
  torso.half_width = rng.uniform(9, 12) * unit;
  torso.half_height = rng.uniform(11, 14) * unit;
  torso.texture = sample_texture(rng, unit, 0.45, 0.9);
  scene.parts.push_back(torso);
  for (int k = 1; k < config.num_parts; ++k) {
    PartSpec limb;
    limb.shape = rng.uniform() < 0.5 ? PartShape::capsule : PartShape::rectangle;
    limb.half_width = rng.uniform(3.5, 5) * unit;
    limb.half_height = rng.uniform(9, 12) * unit;
    limb.texture = sample_texture(rng, unit, 0.45, 0.9);
    scene.parts.push_back(limb);
  }
  // Random depth order (Fisher-Yates on z values).
  std::vector<int> order(scene.parts.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  for (std::size_t i = 0; i < order.size(); ++i) scene.parts[i].z_order = order[i];

  for (int attempt = 0; attempt < config.max_retries; ++attempt) {
    sample_trajectories(scene, rng, unit);
    if (scene_inside_canvas(scene)) return scene;
  }
  throw SynthError("could not keep parts inside the " + std::to_string(config.width) + "x" +
                   std::to_string(config.height) + " canvas after " + std::to_string(config.max_retries) +
                   " trajectory samples");
}

RenderedFrame render_frame(const Scene& scene, int t) {
  const std::int64_t h = scene.config.height, w = scene.config.width;
  const std::size_t plane = static_cast<std::size_t>(h * w);
  const int k = static_cast<int>(scene.parts.size());
  RenderedFrame out;
  out.image.resize(plane * 3);
  out.labels.assign(plane, static_cast<std::uint8_t>(k));

  std::vector<Pose> inv;
  for (const auto& p : scene.poses[static_cast<std::size_t>(t)]) inv.push_back(p.inverse());
  std::vector<int> draw(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) draw[static_cast<std::size_t>(i)] = i;
  std::sort(draw.begin(), draw.end(), [&](int a, int b) {
    return scene.parts[static_cast<std::size_t>(a)].z_order > scene.parts[static_cast<std::size_t>(b)].z_order;
  });

  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y * w + x);
      const Texture* tex = &scene.background;
      double u = static_cast<double>(x), v = static_cast<double>(y);
      for (int part : draw) {
        const auto local = inv[static_cast<std::size_t>(part)].apply(static_cast<double>(x), static_cast<double>(y));
        if (scene.parts[static_cast<std::size_t>(part)].contains(local[0], local[1])) {
          out.labels[i] = static_cast<std::uint8_t>(part);
          tex = &scene.parts[static_cast<std::size_t>(part)].texture;
          u = local[0];
          v = local[1];
          break;
        }
      }
      for (int c = 0; c < 3; ++c) out.image[static_cast<std::size_t>(c) * plane + i] = static_cast<float>(tex->eval(c, u, v));
    }
  }
  return out;
}

Video render_video(const Scene& scene) {
  Video v;
  v.frames = scene.config.frames;
  v.height = scene.config.height;
  v.width = scene.config.width;
  v.num_parts = static_cast<int>(scene.parts.size());
  for (int t = 0; t < scene.config.frames; ++t) {
    RenderedFrame f = render_frame(scene, t);
    v.images.insert(v.images.end(), f.image.begin(), f.image.end());
    v.labels.insert(v.labels.end(), f.labels.begin(), f.labels.end());
    for (const auto& p : scene.poses[static_cast<std::size_t>(t)]) v.poses.push_back(p);
  }
  return v;
}

Tensor Video::frame(std::int64_t t) const {
  if (t < 0 || t >= frames) throw std::out_of_range("frame index " + std::to_string(t));
  const std::size_t n = static_cast<std::size_t>(3 * height * width);
  std::vector<float> data(images.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(t) * n),
                          images.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(t + 1) * n));
  return Tensor::from({1, 3, height, width}, std::move(data));
}

Tensor Video::masks(std::int64_t t) const {
  if (t < 0 || t >= frames) throw std::out_of_range("frame index " + std::to_string(t));
  return labels_to_masks(label_plane(t), num_parts, height, width);
}

Tensor labels_to_masks(const std::uint8_t* labels, int num_parts, std::int64_t height, std::int64_t width,
                       DType dtype) {
  const std::size_t plane = static_cast<std::size_t>(height * width);
  Buffer b(dtype, plane * static_cast<std::size_t>(num_parts + 1));
  for (std::size_t i = 0; i < plane; ++i) b.set(static_cast<std::size_t>(labels[i]) * plane + i, 1.0);
  return Tensor::from_buffer({1, num_parts + 1, height, width}, std::move(b));
}

Tensor analytic_backward_flow(const std::vector<Pose>& source_poses, const std::vector<Pose>& target_poses,
                              const std::uint8_t* target_labels, std::int64_t height, std::int64_t width) {
  const std::size_t plane = static_cast<std::size_t>(height * width);
  std::vector<Pose> maps;
  for (std::size_t k = 0; k < source_poses.size(); ++k) maps.push_back(source_poses[k].then(target_poses[k].inverse()));
  std::vector<double> out(plane * 2);
  for (std::int64_t y = 0; y < height; ++y) {
    for (std::int64_t x = 0; x < width; ++x) {
      const std::size_t i = static_cast<std::size_t>(y * width + x);
      const std::size_t k = target_labels[i];
      std::array<double, 2> z{static_cast<double>(x), static_cast<double>(y)};
      if (k < maps.size()) z = maps[k].apply(z[0], z[1]);
      out[i] = z[0];
      out[plane + i] = z[1];
    }
  }
  return Tensor::from({2, height, width}, std::move(out));
}

std::pair<Tensor, Tensor> pose_motion(const std::vector<Pose>& poses, DType dtype) {
  const std::int64_t k = static_cast<std::int64_t>(poses.size());
  Buffer p(dtype, static_cast<std::size_t>(2 * k)), a(dtype, static_cast<std::size_t>(4 * k));
  for (std::size_t i = 0; i < poses.size(); ++i) {
    p.set(2 * i, poses[i].offset[0]);
    p.set(2 * i + 1, poses[i].offset[1]);
    for (std::size_t e = 0; e < 4; ++e) a.set(4 * i + e, poses[i].linear[e]);
  }
  return {Tensor::from_buffer({1, k, 2}, std::move(p)), Tensor::from_buffer({1, k, 2, 2}, std::move(a))};
}

SyntheticSample make_sample(const Video& video, std::int64_t s, std::int64_t t) {
  SyntheticSample out;
  out.source = video.frame(s);
  out.target = video.frame(t);
  out.source_masks = video.masks(s);
  out.target_masks = video.masks(t);
  for (int k = 0; k < video.num_parts; ++k) {
    out.source_poses.push_back(video.pose(s, k));
    out.target_poses.push_back(video.pose(t, k));
  }
  const std::int64_t h = video.height, w = video.width;
  const auto* ls = video.label_plane(s);
  const auto* lt = video.label_plane(t);
  out.flow = analytic_backward_flow(out.source_poses, out.target_poses, lt, h, w);

  const std::size_t plane = static_cast<std::size_t>(h * w);
  const auto bg = static_cast<std::uint8_t>(video.num_parts);
  std::vector<float> occ(plane), disocc(plane);
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y * w + x);
      occ[i] = (lt[i] == bg && ls[i] != bg) ? 1.0f : 0.0f;
      const double fx = out.flow.flat(i), fy = out.flow.flat(plane + i);
      bool same = fx >= 0 && fy >= 0 && fx <= static_cast<double>(w - 1) && fy <= static_cast<double>(h - 1);
      if (same) {
        const auto x0 = static_cast<std::int64_t>(std::floor(fx)), y0 = static_cast<std::int64_t>(std::floor(fy));
        for (std::int64_t dy = 0; dy < 2 && same; ++dy) {
          for (std::int64_t dx = 0; dx < 2; ++dx) {
            const std::int64_t xx = std::min(x0 + dx, w - 1), yy = std::min(y0 + dy, h - 1);
            if (ls[static_cast<std::size_t>(yy * w + xx)] != lt[i]) {
              same = false;
              break;
            }
          }
        }
      }
      disocc[i] = same ? 0.0f : 1.0f;
    }
  }
  out.occlusion = Tensor::from({h, w}, std::move(occ));
  out.disocclusion = Tensor::from({h, w}, std::move(disocc));
  return out;
}

std::vector<std::string> validate_sample(const SyntheticSample& s) {
  std::vector<std::string> problems;
  const std::int64_t k1 = s.target_masks.dim(1), h = s.target_masks.dim(2), w = s.target_masks.dim(3);
  const std::int64_t k = k1 - 1;
  const std::size_t plane = static_cast<std::size_t>(h * w);
  auto label_of = [&](const Tensor& masks, std::size_t i, const char* which) -> std::int64_t {
    std::int64_t label = -1;
    int ones = 0;
    for (std::int64_t c = 0; c < k1; ++c) {
      const double v = masks.flat(static_cast<std::size_t>(c) * plane + i);
      if (v == 1.0) {
        ++ones;
        label = c;
      } else if (v != 0.0) {
        ones = -100;
      }
    }
    if (ones != 1) {
      problems.push_back(std::string(which) + " masks not one-hot at pixel " + std::to_string(i));
      return -1;
    }
    return label;
  };
  std::vector<Pose> maps;
  for (std::size_t p = 0; p < s.source_poses.size(); ++p) maps.push_back(s.source_poses[p].then(s.target_poses[p].inverse()));
  for (std::int64_t y = 0; y < h && problems.size() < 20; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y * w + x);
      const std::int64_t ls = label_of(s.source_masks, i, "source");
      const std::int64_t lt = label_of(s.target_masks, i, "target");
      if (ls < 0 || lt < 0) continue;
      std::array<double, 2> expect{static_cast<double>(x), static_cast<double>(y)};
      if (lt < k) expect = maps[static_cast<std::size_t>(lt)].apply(expect[0], expect[1]);
      if (s.flow.flat(i) != expect[0] || s.flow.flat(plane + i) != expect[1]) {
        problems.push_back("flow differs from pose composition at (" + std::to_string(x) + ", " + std::to_string(y) + ")");
      }
      const bool occ = lt == k && ls != k;
      if ((s.occlusion.flat(i) == 1.0) != occ) {
        problems.push_back("occlusion mask wrong at (" + std::to_string(x) + ", " + std::to_string(y) + ")");
      }
    }
  }
  return problems;
}

std::pair<std::int64_t, std::int64_t> sample_pair(const Video& video, Rng& rng) {
  if (video.frames < 2) throw std::invalid_argument("sample_pair needs a video with at least 2 frames");
  const auto n = static_cast<std::uint64_t>(video.frames);
  const auto s = static_cast<std::int64_t>(rng.below(n));
  auto t = static_cast<std::int64_t>(rng.below(n - 1));
  if (t >= s) ++t;
  return {s, t};
}

namespace {

// Frames are kept exactly as they round-trip through 8-bit PNG.
void quantize_frames(Video& v) {
  for (auto& x : v.images) x = static_cast<float>(quantize(x) / 255.0);
}

Tensor poses_tensor(const Video& v) {
  std::vector<double> d;
  for (const auto& p : v.poses) {
    d.insert(d.end(), {p.linear[0], p.linear[1], p.offset[0], p.linear[2], p.linear[3], p.offset[1]});
  }
  return Tensor::from({v.frames, v.num_parts, 2, 3}, std::move(d));
}

std::vector<int> range(int lo, int hi) {
  std::vector<int> r;
  for (int i = lo; i < hi; ++i) r.push_back(i);
  return r;
}

void check_spec(const DatasetSpec& spec) {
  if (spec.videos < 1) throw SynthError("dataset needs at least one video");
  if (spec.test_videos < 0 || spec.test_videos >= spec.videos) {
    throw SynthError("test_videos must be in [0, videos)");
  }
}

}  // namespace

Dataset build_dataset(const DatasetSpec& spec) {
  check_spec(spec);
  Dataset d;
  d.spec = spec;
  for (int i = 0; i < spec.videos; ++i) {
    Video v = render_video(sample_scene(spec.scene, mix_seed(spec.seed, static_cast<std::uint64_t>(i))));
    quantize_frames(v);
    d.videos.push_back(std::move(v));
  }
  d.train = range(0, spec.videos - spec.test_videos);
  d.test = range(spec.videos - spec.test_videos, spec.videos);
  return d;
}

void generate_dataset(const DatasetSpec& spec, const fs::path& dir) {
  check_spec(spec);
  fs::create_directories(dir);
  for (int i = 0; i < spec.videos; ++i) {
    const Video v = render_video(sample_scene(spec.scene, mix_seed(spec.seed, static_cast<std::uint64_t>(i))));
    const fs::path vd = dir / ("vid_" + std::to_string(i));
    fs::create_directories(vd);
    for (std::int64_t t = 0; t < v.frames; ++t) {
      write_png(vd / ("frame_" + std::to_string(t) + ".png"), to_image8(v.frame(t)));
      save_tensor(vd / ("gt_" + std::to_string(t) + ".cpmt"), v.masks(t));
    }
    save_tensor(vd / "poses.cpmt", poses_tensor(v));
  }
  json manifest{{"format_version", 1},
                {"seed", spec.seed},
                {"videos", spec.videos},
                {"test_videos", spec.test_videos},
                {"scene", spec.scene.to_json()},
                {"split",
                 {{"train", range(0, spec.videos - spec.test_videos)},
                  {"test", range(spec.videos - spec.test_videos, spec.videos)}}},
                {"files",
                 {{"frame", "vid_{i}/frame_{t}.png"},
                  {"masks", "vid_{i}/gt_{t}.cpmt (1, K+1, H, W) one-hot, last channel background"},
                  {"poses", "vid_{i}/poses.cpmt (T, K, 2, 3) part frame -> image affine"}}}};
  std::ofstream os(dir / "manifest.json");
  if (!os) throw IoError("cannot write " + (dir / "manifest.json").string());
  os << manifest.dump(2) << "\n";
}

Dataset load_dataset(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json";
  std::ifstream is(mpath);
  if (!is) throw IoError("dataset manifest not found: " + mpath.string());
  json m;
  try {
    m = json::parse(is);
  } catch (const json::exception& e) {
    throw IoError("malformed dataset manifest " + mpath.string() + ": " + e.what());
  }
  Dataset d;
  d.spec.scene = SceneConfig::from_json(m.at("scene"));
  d.spec.videos = m.at("videos").get<int>();
  d.spec.seed = m.at("seed").get<std::uint64_t>();
  d.spec.test_videos = m.at("test_videos").get<int>();
  d.train = m.at("split").at("train").get<std::vector<int>>();
  d.test = m.at("split").at("test").get<std::vector<int>>();
  const auto& sc = d.spec.scene;
  for (int i = 0; i < d.spec.videos; ++i) {
    const fs::path vd = dir / ("vid_" + std::to_string(i));
    Video v;
    v.frames = sc.frames;
    v.height = sc.height;
    v.width = sc.width;
    v.num_parts = sc.num_parts;
    const std::size_t plane = static_cast<std::size_t>(v.height * v.width);
    for (std::int64_t t = 0; t < v.frames; ++t) {
      const Image8 img = read_png(vd / ("frame_" + std::to_string(t) + ".png"));
      if (img.height != v.height || img.width != v.width) {
        throw IoError("frame size mismatch in " + (vd / ("frame_" + std::to_string(t) + ".png")).string());
      }
      for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t p = 0; p < plane; ++p) v.images.push_back(static_cast<float>(img.pixels[p * 3 + c] / 255.0));
      }
      const Tensor masks = load_tensor(vd / ("gt_" + std::to_string(t) + ".cpmt"));
      if (masks.shape() != Shape{1, v.num_parts + 1, v.height, v.width}) {
        throw IoError("mask shape mismatch in " + vd.string());
      }
      for (std::size_t p = 0; p < plane; ++p) {
        std::uint8_t label = 0;
        for (int c = 0; c < v.num_parts + 1; ++c) {
          if (masks.flat(static_cast<std::size_t>(c) * plane + p) > 0.5) label = static_cast<std::uint8_t>(c);
        }
        v.labels.push_back(label);
      }
    }
    const Tensor poses = load_tensor(vd / "poses.cpmt");
    if (poses.shape() != Shape{v.frames, v.num_parts, 2, 3}) throw IoError("pose shape mismatch in " + vd.string());
    for (std::size_t j = 0; j < static_cast<std::size_t>(v.frames * v.num_parts); ++j) {
      Pose p;
      p.linear = {poses.flat(6 * j), poses.flat(6 * j + 1), poses.flat(6 * j + 3), poses.flat(6 * j + 4)};
      p.offset = {poses.flat(6 * j + 2), poses.flat(6 * j + 5)};
      v.poses.push_back(p);
    }
    d.videos.push_back(std::move(v));
  }
  return d;
}

}  // namespace cpseg
