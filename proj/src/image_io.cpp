#include "cpseg/image_io.hpp"

#include "cpseg/ops.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <numbers>

namespace cpseg {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using File = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

void write_png(const std::filesystem::path& path, const Image8& image) {
  if (image.channels != 1 && image.channels != 3) throw IoError("write_png: unsupported channel count");
  if (image.pixels.size() != static_cast<std::size_t>(image.height * image.width * image.channels)) {
    throw IoError("write_png: pixel buffer size mismatch for " + path.string());
  }
  File f(std::fopen(path.c_str(), "wb"));
  if (!f) throw IoError("cannot open for writing: " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng error while writing " + path.string());
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
               image.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const std::size_t stride = static_cast<std::size_t>(image.width * image.channels);
  for (std::int64_t y = 0; y < image.height; ++y) {
    png_write_row(png, const_cast<png_bytep>(image.pixels.data() + static_cast<std::size_t>(y) * stride));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Image8 read_png(const std::filesystem::path& path) {
  File f(std::fopen(path.c_str(), "rb"));
  if (!f) throw IoError("cannot open image: " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("not a readable PNG: " + path.string());
  }
  png_init_io(png, f.get());
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_packing(png);
  png_set_expand(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  Image8 img;
  img.width = png_get_image_width(png, info);
  img.height = png_get_image_height(png, info);
  img.channels = 3;
  const std::size_t stride = png_get_rowbytes(png, info);
  if (stride != static_cast<std::size_t>(img.width * 3)) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("unexpected PNG layout: " + path.string());
  }
  img.pixels.resize(stride * static_cast<std::size_t>(img.height));
  std::vector<png_bytep> rows(static_cast<std::size_t>(img.height));
  for (std::size_t y = 0; y < rows.size(); ++y) rows[y] = img.pixels.data() + y * stride;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

Image8 to_image8(const Tensor& chw) {
  Tensor t = chw;
  if (t.ndim() == 4 && t.dim(0) == 1) t = reshape(t.detach(), {t.dim(1), t.dim(2), t.dim(3)});
  if (t.ndim() != 3 || t.dim(0) != 3) throw ShapeError("to_image8 expects (3, H, W), got " + to_string(chw.shape()));
  Image8 img;
  img.height = t.dim(1);
  img.width = t.dim(2);
  img.channels = 3;
  const std::size_t plane = static_cast<std::size_t>(img.height * img.width);
  img.pixels.resize(plane * 3);
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < 3; ++c) img.pixels[i * 3 + c] = quantize(t.flat(c * plane + i));
  }
  return img;
}

Tensor from_image8(const Image8& image, DType dtype) {
  const std::size_t plane = static_cast<std::size_t>(image.height * image.width);
  Buffer b(dtype, plane * 3);
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      const std::uint8_t v = image.channels == 3 ? image.pixels[i * 3 + c] : image.pixels[i];
      b.set(c * plane + i, v / 255.0);
    }
  }
  return Tensor::from_buffer({1, 3, image.height, image.width}, std::move(b));
}

namespace {

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double hh = h * 6.0;
  const int i = static_cast<int>(hh) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

}  // namespace

Image8 flow_to_color(const Tensor& flow, double max_magnitude) {
  Tensor f = flow.ndim() == 4 ? reshape(flow.detach(), {2, flow.dim(2), flow.dim(3)}) : flow;
  if (f.ndim() != 3 || f.dim(0) != 2) throw ShapeError("flow_to_color expects (2, H, W), got " + to_string(flow.shape()));
  const std::int64_t h = f.dim(1), w = f.dim(2);
  const std::size_t plane = static_cast<std::size_t>(h * w);
  std::vector<double> dx(plane), dy(plane);
  double peak = 0;
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y * w + x);
      dx[i] = f.flat(i) - static_cast<double>(x);
      dy[i] = f.flat(plane + i) - static_cast<double>(y);
      peak = std::max(peak, std::hypot(dx[i], dy[i]));
    }
  }
  const double scale = max_magnitude > 0 ? max_magnitude : (peak > 0 ? peak : 1.0);
  Image8 img{h, w, 3, std::vector<std::uint8_t>(plane * 3)};
  for (std::size_t i = 0; i < plane; ++i) {
    const double hue = (std::atan2(dy[i], dx[i]) + std::numbers::pi) / (2 * std::numbers::pi);
    const auto rgb = hsv_to_rgb(hue, std::min(1.0, std::hypot(dx[i], dy[i]) / scale), 1.0);
    for (std::size_t c = 0; c < 3; ++c) img.pixels[i * 3 + c] = quantize(rgb[c]);
  }
  return img;
}

Image8 gray_image(const Tensor& values) {
  const std::int64_t h = values.dim(-2), w = values.dim(-1);
  if (values.numel() != h * w) throw ShapeError("gray_image expects a single plane, got " + to_string(values.shape()));
  Image8 img{h, w, 1, std::vector<std::uint8_t>(static_cast<std::size_t>(h * w))};
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = quantize(values.flat(i));
  return img;
}

std::array<std::uint8_t, 3> part_color(int part, int num_parts) {
  static constexpr std::array<std::array<std::uint8_t, 3>, 12> kPalette{{{230, 25, 75},
                                                                         {60, 180, 75},
                                                                         {0, 130, 200},
                                                                         {245, 130, 48},
                                                                         {145, 30, 180},
                                                                         {70, 240, 240},
                                                                         {240, 50, 230},
                                                                         {210, 245, 60},
                                                                         {250, 190, 212},
                                                                         {0, 128, 128},
                                                                         {170, 110, 40},
                                                                         {128, 0, 0}}};
  if (part >= num_parts) return {0, 0, 0};
  return kPalette[static_cast<std::size_t>(part) % kPalette.size()];
}

Image8 mask_image(const Tensor& masks) {
  Tensor m = masks.ndim() == 4 ? reshape(masks.detach(), {masks.dim(1), masks.dim(2), masks.dim(3)}) : masks;
  const int channels = static_cast<int>(m.dim(0));
  const std::int64_t h = m.dim(1), w = m.dim(2);
  const std::size_t plane = static_cast<std::size_t>(h * w);
  Image8 img{h, w, 3, std::vector<std::uint8_t>(plane * 3)};
  for (std::size_t i = 0; i < plane; ++i) {
    int best = 0;
    for (int c = 1; c < channels; ++c) {
      if (m.flat(static_cast<std::size_t>(c) * plane + i) > m.flat(static_cast<std::size_t>(best) * plane + i)) best = c;
    }
    const auto col = part_color(best, channels - 1);
    for (std::size_t c = 0; c < 3; ++c) img.pixels[i * 3 + c] = col[c];
  }
  return img;
}

Image8 mask_overlay(const Tensor& frame, const Tensor& masks, double alpha) {
  Image8 base = to_image8(frame);
  Tensor m = masks.ndim() == 4 ? reshape(masks.detach(), {masks.dim(1), masks.dim(2), masks.dim(3)}) : masks;
  const int parts = static_cast<int>(m.dim(0)) - 1;
  if (m.dim(1) != base.height || m.dim(2) != base.width) {
    throw ShapeError("mask_overlay: mask " + to_string(masks.shape()) + " does not match frame " +
                     to_string(frame.shape()));
  }
  const std::size_t plane = static_cast<std::size_t>(base.height * base.width);
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      double tint = 0, weight = 0;
      for (int k = 0; k < parts; ++k) {
        const double y = m.flat(static_cast<std::size_t>(k) * plane + i);
        tint += y * part_color(k, parts)[c];
        weight += y;
      }
      const double v = base.pixels[i * 3 + c] * (1 - alpha * weight) + alpha * tint;
      base.pixels[i * 3 + c] = static_cast<std::uint8_t>(std::clamp(v + 0.5, 0.0, 255.0));
    }
  }
  return base;
}

Tensor resize_bilinear(const Tensor& images, std::int64_t height, std::int64_t width) {
  const std::int64_t n = images.dim(0), h = images.dim(2), w = images.dim(3);
  if (h == height && w == width) return images;
  std::vector<double> g(static_cast<std::size_t>(2 * height * width));
  const double sx = double(w) / double(width), sy = double(h) / double(height);
  for (std::int64_t y = 0; y < height; ++y) {
    for (std::int64_t x = 0; x < width; ++x) {
      g[static_cast<std::size_t>(y * width + x)] = (double(x) + 0.5) * sx - 0.5;
      g[static_cast<std::size_t>((height + y) * width + x)] = (double(y) + 0.5) * sy - 0.5;
    }
  }
  Tensor grid = Tensor::from({1, 2, height, width}, g).to(images.dtype());
  std::vector<Tensor> grids(static_cast<std::size_t>(n), grid);
  return grid_sample_bilinear(images, n == 1 ? grid : concat(grids, 0));
}

}  // namespace cpseg
