#pragma once

// Seeded articulated-shape videos with exact ground truth: a torso with limbs
// attached at joints, each part carrying a smooth texture in its own frame,
// moving over a static textured background.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cpseg/rng.hpp"
#include "cpseg/tensor.hpp"

namespace cpseg {

// z = L u + t, L row-major.
struct Pose {
  std::array<double, 4> linear{1, 0, 0, 1};
  std::array<double, 2> offset{0, 0};

  std::array<double, 2> apply(double u, double v) const {
    return {linear[0] * u + linear[1] * v + offset[0], linear[2] * u + linear[3] * v + offset[1]};
  }
  Pose inverse() const;
  // (this * other)(u) = this(other(u))
  Pose then(const Pose& inner) const;

  static Pose translation(double x, double y);
  static Pose rotation(double radians);
  static Pose scaling(double s);
};

enum class PartShape { rectangle, ellipse, capsule };
std::string to_string(PartShape s);

struct Texture {
  struct Wave {
    double kx = 0, ky = 0, phase = 0;
    std::array<double, 3> amplitude{};
  };
  std::array<double, 3> base{0.5, 0.5, 0.5};
  std::vector<Wave> waves;

  double eval(int channel, double u, double v) const;
};

struct PartSpec {
  PartShape shape = PartShape::ellipse;
  double half_width = 8;
  double half_height = 10;
  Texture texture;
  int z_order = 0;  // larger is drawn on top

  bool contains(double u, double v) const;
};

struct SceneConfig {
  std::int64_t height = 64;
  std::int64_t width = 64;
  int frames = 16;
  int num_parts = 2;  // torso plus num_parts - 1 limbs
  double max_translation = 10.0;  // pixels at 64x64, scaled with the canvas
  double max_rotation_deg = 20.0;
  double max_log_scale = 0.0953101798043249;  // log(1.1)
  double max_swing_deg = 45.0;
  int max_retries = 200;

  nlohmann::json to_json() const;
  static SceneConfig from_json(const nlohmann::json& j);
};

struct Scene {
  SceneConfig config;
  Texture background;
  std::vector<PartSpec> parts;
  std::vector<std::vector<Pose>> poses;  // [frame][part], local part frame -> image
};

class SynthError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Resamples trajectories until every part stays inside the canvas; throws
// SynthError after config.max_retries failures.
Scene sample_scene(const SceneConfig& config, std::uint64_t seed);
bool scene_inside_canvas(const Scene& scene);

struct RenderedFrame {
  std::vector<float> image;           // (3, H, W)
  std::vector<std::uint8_t> labels;   // (H, W); num_parts marks background
};
RenderedFrame render_frame(const Scene& scene, int t);

struct Video {
  std::int64_t frames = 0, height = 0, width = 0;
  int num_parts = 0;
  std::vector<float> images;          // (T, 3, H, W)
  std::vector<std::uint8_t> labels;   // (T, H, W)
  std::vector<Pose> poses;            // (T, K)

  Tensor frame(std::int64_t t) const;   // (1, 3, H, W) f32
  Tensor masks(std::int64_t t) const;   // (1, K+1, H, W) one-hot f32
  const std::uint8_t* label_plane(std::int64_t t) const {
    return labels.data() + static_cast<std::size_t>(t * height * width);
  }
  const Pose& pose(std::int64_t t, int k) const { return poses[static_cast<std::size_t>(t * num_parts + k)]; }
};
Video render_video(const Scene& scene);

// One-hot (1, K+1, H, W) from a label plane.
Tensor labels_to_masks(const std::uint8_t* labels, int num_parts, std::int64_t height, std::int64_t width,
                       DType dtype = DType::f32);

// Target pixel z inside part k maps to pose_S^k(pose_T^k^-1(z)); background maps to z. (2, H, W) f64.
Tensor analytic_backward_flow(const std::vector<Pose>& source_poses, const std::vector<Pose>& target_poses,
                              const std::uint8_t* target_labels, std::int64_t height, std::int64_t width);

// Ground-truth motion in the layout of the segmentation output: keypoints
// (1, K, 2) = part anchors, affine (1, K, 2, 2) = linear parts of the poses.
std::pair<Tensor, Tensor> pose_motion(const std::vector<Pose>& poses, DType dtype = DType::f64);

struct SyntheticSample {
  Tensor source, target;              // (1, 3, H, W)
  Tensor source_masks, target_masks;  // (1, K+1, H, W)
  std::vector<Pose> source_poses, target_poses;
  Tensor flow;           // (2, H, W) backward flow target -> source
  Tensor occlusion;      // (H, W): target background covered by source foreground
  Tensor disocclusion;   // (H, W): target pixels whose bilinear source footprint is not the same part
};

SyntheticSample make_sample(const Video& video, std::int64_t source_index, std::int64_t target_index);

// Empty when every invariant holds; otherwise one message per violation.
std::vector<std::string> validate_sample(const SyntheticSample& sample);

// Two distinct uniform frame indices (source, target).
std::pair<std::int64_t, std::int64_t> sample_pair(const Video& video, Rng& rng);

struct DatasetSpec {
  SceneConfig scene;
  int videos = 200;
  std::uint64_t seed = 1;
  int test_videos = 30;  // held out from the end of the index range
};

void generate_dataset(const DatasetSpec& spec, const std::filesystem::path& dir);

struct Dataset {
  DatasetSpec spec;
  std::vector<Video> videos;
  std::vector<int> train;
  std::vector<int> test;
};

// Loads frames (PNG), masks and poses into memory.
Dataset load_dataset(const std::filesystem::path& dir);
// Renders the same content without touching disk (frames quantized as on disk).
Dataset build_dataset(const DatasetSpec& spec);

}  // namespace cpseg
