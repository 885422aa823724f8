#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "panopix/common.hpp"
#include "panopix/tensor.hpp"

namespace panopix {

// RGB image, planar channel-major float storage, values in [0,1] while inside
// the photometric pipeline. wrap_horizontal marks 360-degree panoramas whose
// left and right edges are continuous.
struct Image {
  int64_t height = 0;
  int64_t width = 0;
  bool wrap_horizontal = false;
  int64_t id = 0;
  std::vector<float> data;

  Image() = default;
  Image(int64_t h, int64_t w, bool wrap = false)
      : height(h), width(w), wrap_horizontal(wrap),
        data(static_cast<size_t>(3 * h * w), 0.f) {
    if (h < 1 || w < 1) throw ShapeError("Image: dimensions must be >= 1");
  }

  int64_t pixels() const { return height * width; }

  float& at(int64_t c, int64_t y, int64_t x) {
    return data[static_cast<size_t>((c * height + y) * width + x)];
  }
  float at(int64_t c, int64_t y, int64_t x) const {
    return data[static_cast<size_t>((c * height + y) * width + x)];
  }
};

inline float clamp01(float v) { return std::clamp(v, 0.f, 1.f); }

// ITU-R BT.601 luma.
inline float luminance(float r, float g, float b) {
  return 0.299f * r + 0.587f * g + 0.114f * b;
}

template <typename T>
Tensor<T> image_to_tensor(const Image& img) {
  Tensor<T> t({1, 3, img.height, img.width});
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(img.data[static_cast<size_t>(i)]);
  return t;
}

// Samples at continuous coordinates where pixel (y,x) has its center at
// (y+0.5, x+0.5). Rows clamp at the borders; columns wrap when the image does.
inline float sample_bilinear(const Image& img, int64_t c, double y, double x) {
  const int64_t H = img.height, W = img.width;
  double ly = y - 0.5, lx = x - 0.5;
  int64_t y0 = static_cast<int64_t>(std::floor(ly));
  int64_t x0 = static_cast<int64_t>(std::floor(lx));
  double fy = ly - static_cast<double>(y0);
  double fx = lx - static_cast<double>(x0);
  int64_t y0c = std::clamp<int64_t>(y0, 0, H - 1);
  int64_t y1c = std::clamp<int64_t>(y0 + 1, 0, H - 1);
  int64_t x0c, x1c;
  if (img.wrap_horizontal) {
    x0c = ((x0 % W) + W) % W;
    x1c = (x0c + 1) % W;
  } else {
    x0c = std::clamp<int64_t>(x0, 0, W - 1);
    x1c = std::clamp<int64_t>(x0 + 1, 0, W - 1);
  }
  double v = (1 - fy) * ((1 - fx) * img.at(c, y0c, x0c) + fx * img.at(c, y0c, x1c)) +
             fy * ((1 - fx) * img.at(c, y1c, x0c) + fx * img.at(c, y1c, x1c));
  return static_cast<float>(v);
}

// ---------------------------------------------------------------------------
// View geometry: a crop of the source, resized to (out_h, out_w), optionally
// horizontally flipped. crop_left may run past the right edge only on
// wrapping sources, in which case columns are taken modulo the source width.
// ---------------------------------------------------------------------------

struct ViewGeometry {
  int64_t crop_top = 0;
  int64_t crop_left = 0;
  int64_t crop_h = 0;
  int64_t crop_w = 0;
  int64_t out_h = 0;
  int64_t out_w = 0;
  bool hflip = false;

  bool operator==(const ViewGeometry&) const = default;
};

inline void validate_geometry(const ViewGeometry& g, int64_t src_h, int64_t src_w, bool wrap) {
  if (g.crop_h < 1 || g.crop_w < 1 || g.out_h < 1 || g.out_w < 1)
    throw DataError("view geometry: crop and output sizes must be >= 1");
  if (g.crop_top < 0 || g.crop_top + g.crop_h > src_h)
    throw DataError("view geometry: vertical crop [" + std::to_string(g.crop_top) + "," +
                    std::to_string(g.crop_top + g.crop_h) + ") outside image height " +
                    std::to_string(src_h));
  if (wrap) {
    if (g.crop_left < 0 || g.crop_left >= src_w || g.crop_w > src_w)
      throw DataError("view geometry: wrapping crop must start in [0,W) and be at most W wide");
  } else if (g.crop_left < 0 || g.crop_left + g.crop_w > src_w) {
    throw DataError("view geometry: horizontal crop [" + std::to_string(g.crop_left) + "," +
                    std::to_string(g.crop_left + g.crop_w) + ") outside image width " +
                    std::to_string(src_w) + " and image does not wrap");
  }
}

// Continuous view coordinates (vy in [0,out_h], vx in [0,out_w]) to original
// image coordinates. The horizontal result is reduced modulo the source width,
// which is the identity for non-wrapping in-range crops.
inline std::pair<double, double> view_point_to_original(const ViewGeometry& g, double vy,
                                                        double vx, int64_t src_w) {
  if (g.hflip) vx = static_cast<double>(g.out_w) - vx;
  double y = static_cast<double>(g.crop_top) +
             vy * static_cast<double>(g.crop_h) / static_cast<double>(g.out_h);
  double x = static_cast<double>(g.crop_left) +
             vx * static_cast<double>(g.crop_w) / static_cast<double>(g.out_w);
  x = std::fmod(x, static_cast<double>(src_w));
  if (x < 0) x += static_cast<double>(src_w);
  return {y, x};
}

// Maps the center of view pixel (r,c) to original coordinates.
inline std::pair<double, double> view_to_original(const ViewGeometry& g, int64_t r, int64_t c,
                                                  int64_t src_w) {
  if (r < 0 || r >= g.out_h || c < 0 || c >= g.out_w)
    throw DataError("view_to_original: pixel (" + std::to_string(r) + "," + std::to_string(c) +
                    ") outside view " + std::to_string(g.out_h) + "x" + std::to_string(g.out_w));
  return view_point_to_original(g, static_cast<double>(r) + 0.5, static_cast<double>(c) + 0.5,
                                src_w);
}

// Renders the view by pulling every output pixel through the inverse mapping,
// so rendered content and view_to_original agree exactly.
inline Image render_view(const Image& src, const ViewGeometry& g) {
  validate_geometry(g, src.height, src.width, src.wrap_horizontal);
  Image out(g.out_h, g.out_w);
  out.id = src.id;
  for (int64_t r = 0; r < g.out_h; ++r)
    for (int64_t c = 0; c < g.out_w; ++c) {
      auto [y, x] = view_to_original(g, r, c, src.width);
      for (int64_t ch = 0; ch < 3; ++ch) out.at(ch, r, c) = sample_bilinear(src, ch, y, x);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Photometric ops. Each clamps its output to [0,1].
// ---------------------------------------------------------------------------

inline void adjust_brightness(Image& img, double factor) {
  for (auto& v : img.data) v = clamp01(static_cast<float>(v * factor));
}

// Blends toward the mean luminance of the whole image.
inline void adjust_contrast(Image& img, double factor) {
  double mean = 0.0;
  for (int64_t i = 0; i < img.pixels(); ++i)
    mean += luminance(img.data[static_cast<size_t>(i)],
                      img.data[static_cast<size_t>(img.pixels() + i)],
                      img.data[static_cast<size_t>(2 * img.pixels() + i)]);
  mean /= static_cast<double>(img.pixels());
  for (auto& v : img.data)
    v = clamp01(static_cast<float>(factor * v + (1.0 - factor) * mean));
}

// Blends toward the per-pixel grayscale value.
inline void adjust_saturation(Image& img, double factor) {
  for (int64_t i = 0; i < img.pixels(); ++i) {
    float r = img.data[static_cast<size_t>(i)];
    float g = img.data[static_cast<size_t>(img.pixels() + i)];
    float b = img.data[static_cast<size_t>(2 * img.pixels() + i)];
    float gray = luminance(r, g, b);
    img.data[static_cast<size_t>(i)] = clamp01(static_cast<float>(factor * r + (1 - factor) * gray));
    img.data[static_cast<size_t>(img.pixels() + i)] =
        clamp01(static_cast<float>(factor * g + (1 - factor) * gray));
    img.data[static_cast<size_t>(2 * img.pixels() + i)] =
        clamp01(static_cast<float>(factor * b + (1 - factor) * gray));
  }
}

// Rotates the chroma plane of the YIQ representation; shift is in turns, so
// shift 0.5 rotates chroma by 180 degrees.
inline void adjust_hue(Image& img, double shift) {
  if (shift == 0.0) return;
  const double th = 2.0 * 3.14159265358979323846 * shift;
  const double cs = std::cos(th), sn = std::sin(th);
  for (int64_t i = 0; i < img.pixels(); ++i) {
    double r = img.data[static_cast<size_t>(i)];
    double g = img.data[static_cast<size_t>(img.pixels() + i)];
    double b = img.data[static_cast<size_t>(2 * img.pixels() + i)];
    double yy = 0.299 * r + 0.587 * g + 0.114 * b;
    double ii = 0.596 * r - 0.274 * g - 0.322 * b;
    double qq = 0.211 * r - 0.523 * g + 0.312 * b;
    double ir = ii * cs - qq * sn;
    double qr = ii * sn + qq * cs;
    img.data[static_cast<size_t>(i)] = clamp01(static_cast<float>(yy + 0.956 * ir + 0.621 * qr));
    img.data[static_cast<size_t>(img.pixels() + i)] =
        clamp01(static_cast<float>(yy - 0.272 * ir - 0.647 * qr));
    img.data[static_cast<size_t>(2 * img.pixels() + i)] =
        clamp01(static_cast<float>(yy - 1.106 * ir + 1.703 * qr));
  }
}

inline void to_grayscale(Image& img) {
  for (int64_t i = 0; i < img.pixels(); ++i) {
    float gray = luminance(img.data[static_cast<size_t>(i)],
                           img.data[static_cast<size_t>(img.pixels() + i)],
                           img.data[static_cast<size_t>(2 * img.pixels() + i)]);
    gray = clamp01(gray);
    img.data[static_cast<size_t>(i)] = gray;
    img.data[static_cast<size_t>(img.pixels() + i)] = gray;
    img.data[static_cast<size_t>(2 * img.pixels() + i)] = gray;
  }
}

// Inverts every value at or above the threshold.
inline Image solarize(const Image& img, double threshold) {
  Image out = img;
  for (auto& v : out.data)
    if (v >= static_cast<float>(threshold)) v = clamp01(1.f - v);
  return out;
}

// Final step of the augmentation pipeline; output values leave [0,1] by design.
inline void normalize_image(Image& img, const double mean[3], const double stddev[3]) {
  for (int64_t c = 0; c < 3; ++c) {
    if (stddev[c] <= 0) throw DataError("normalize_image: std must be positive");
    for (int64_t i = 0; i < img.pixels(); ++i) {
      auto& v = img.data[static_cast<size_t>(c * img.pixels() + i)];
      v = static_cast<float>((v - mean[c]) / stddev[c]);
    }
  }
}

}  // namespace panopix
