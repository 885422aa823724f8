#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>

#include "panopix/common.hpp"
#include "panopix/image.hpp"

namespace panopix {

// Two-view augmentation: random resized crop (+flip), then per-view
// photometrics in fixed order: color jitter, grayscale, solarize, normalize.
// Geometry for both views is drawn before any photometric parameter, so the
// pixel correspondence between the views never depends on photometric config.

struct AugmentConfig {
  int64_t out_h = 32;
  int64_t out_w = 32;
  double crop_scale_min = 0.4;   // crop area as a fraction of the source area
  double crop_scale_max = 1.0;
  double aspect_min = 0.75;      // aspect multiplier relative to the source aspect
  double aspect_max = 4.0 / 3.0;
  double flip_prob = 0.5;
  double color_jitter_prob = 0.8;
  double jitter_brightness = 0.4;
  double jitter_contrast = 0.4;
  double jitter_saturation = 0.4;
  double jitter_hue = 0.1;
  double grayscale_prob = 0.2;
  double solarize_prob = 0.2;
  double solarize_threshold = 0.5;
  std::array<double, 3> norm_mean{0.0, 0.0, 0.0};
  std::array<double, 3> norm_std{1.0, 1.0, 1.0};

  void validate() const {
    if (out_h < 1 || out_w < 1) throw UsageError("augment: output size must be >= 1");
    if (!(crop_scale_min > 0.0) || crop_scale_min > crop_scale_max || crop_scale_max > 1.0)
      throw UsageError("augment: crop scale range must satisfy 0 < min <= max <= 1");
    if (!(aspect_min > 0.0) || aspect_min > aspect_max)
      throw UsageError("augment: aspect range must satisfy 0 < min <= max");
    for (double p : {flip_prob, color_jitter_prob, grayscale_prob, solarize_prob})
      if (p < 0.0 || p > 1.0) throw UsageError("augment: probabilities must lie in [0,1]");
    for (double s : {jitter_brightness, jitter_contrast, jitter_saturation})
      if (s < 0.0 || s >= 1.0) throw UsageError("augment: jitter strengths must lie in [0,1)");
    if (jitter_hue < 0.0 || jitter_hue > 0.5)
      throw UsageError("augment: hue strength must lie in [0,0.5]");
    for (double s : norm_std)
      if (!(s > 0.0)) throw UsageError("augment: normalization std must be positive");
  }
};

struct PhotometricParams {
  bool jitter = false;
  double brightness = 1.0;
  double contrast = 1.0;
  double saturation = 1.0;
  double hue = 0.0;
  bool grayscale = false;
  bool solarize = false;
  double solarize_threshold = 0.5;
};

struct ViewPair {
  Image view_a, view_b;  // augmented and normalized
  ViewGeometry geom_a, geom_b;
  int64_t source_id = 0;
  uint64_t rng_seed = 0;
  int64_t src_h = 0;
  int64_t src_w = 0;
  bool wrap = false;
};

namespace detail {

inline ViewGeometry draw_geometry(Rng& rng, const Image& img, const AugmentConfig& cfg) {
  double area = rng.uniform(cfg.crop_scale_min, cfg.crop_scale_max);
  double aspect = std::exp(rng.uniform(std::log(cfg.aspect_min), std::log(cfg.aspect_max)));
  ViewGeometry g;
  g.crop_h = std::clamp<int64_t>(
      static_cast<int64_t>(std::llround(img.height * std::sqrt(area / aspect))), 1, img.height);
  g.crop_w = std::clamp<int64_t>(
      static_cast<int64_t>(std::llround(img.width * std::sqrt(area * aspect))), 1, img.width);
  g.crop_top = rng.uniform_int(0, img.height - g.crop_h);
  g.crop_left = img.wrap_horizontal ? rng.uniform_int(0, img.width - 1)
                                    : rng.uniform_int(0, img.width - g.crop_w);
  g.out_h = cfg.out_h;
  g.out_w = cfg.out_w;
  g.hflip = rng.bernoulli(cfg.flip_prob);
  return g;
}

// All parameters are drawn whether or not the op fires, so the stream position
// after this call is independent of both the outcomes and the probabilities.
inline PhotometricParams draw_photometrics(Rng& rng, const AugmentConfig& cfg) {
  PhotometricParams p;
  p.jitter = rng.bernoulli(cfg.color_jitter_prob);
  p.brightness = rng.uniform(1.0 - cfg.jitter_brightness, 1.0 + cfg.jitter_brightness);
  p.contrast = rng.uniform(1.0 - cfg.jitter_contrast, 1.0 + cfg.jitter_contrast);
  p.saturation = rng.uniform(1.0 - cfg.jitter_saturation, 1.0 + cfg.jitter_saturation);
  p.hue = rng.uniform(-cfg.jitter_hue, cfg.jitter_hue);
  p.grayscale = rng.bernoulli(cfg.grayscale_prob);
  p.solarize = rng.bernoulli(cfg.solarize_prob);
  p.solarize_threshold = cfg.solarize_threshold;
  return p;
}

inline void apply_photometrics(Image& img, const PhotometricParams& p) {
  if (p.jitter) {
    adjust_brightness(img, p.brightness);
    adjust_contrast(img, p.contrast);
    adjust_saturation(img, p.saturation);
    adjust_hue(img, p.hue);
  }
  if (p.grayscale) to_grayscale(img);
  if (p.solarize) img = solarize(img, p.solarize_threshold);
}

}  // namespace detail

inline ViewPair sample_view_pair(const Image& img, const AugmentConfig& cfg, uint64_t seed) {
  cfg.validate();
  if (img.height < 1 || img.width < 1 || img.data.size() != static_cast<size_t>(3 * img.pixels()))
    throw DataError("sample_view_pair: malformed image");
  Rng rng(hash_seed({0x76696577ull, seed}));

  ViewPair pair;
  pair.source_id = img.id;
  pair.rng_seed = seed;
  pair.src_h = img.height;
  pair.src_w = img.width;
  pair.wrap = img.wrap_horizontal;
  pair.geom_a = detail::draw_geometry(rng, img, cfg);
  pair.geom_b = detail::draw_geometry(rng, img, cfg);
  PhotometricParams pa = detail::draw_photometrics(rng, cfg);
  PhotometricParams pb = detail::draw_photometrics(rng, cfg);

  pair.view_a = render_view(img, pair.geom_a);
  pair.view_b = render_view(img, pair.geom_b);
  detail::apply_photometrics(pair.view_a, pa);
  detail::apply_photometrics(pair.view_b, pb);
  normalize_image(pair.view_a, cfg.norm_mean.data(), cfg.norm_std.data());
  normalize_image(pair.view_b, cfg.norm_mean.data(), cfg.norm_std.data());
  return pair;
}

// Original-space center of grid cell (gy,gx) of a (grid_h x grid_w) feature
// grid laid over the view.
inline std::pair<double, double> grid_cell_center(const ViewGeometry& g, int64_t gy, int64_t gx,
                                                  int64_t grid_h, int64_t grid_w, int64_t src_w) {
  double vy = (static_cast<double>(gy) + 0.5) * static_cast<double>(g.out_h) /
              static_cast<double>(grid_h);
  double vx = (static_cast<double>(gx) + 0.5) * static_cast<double>(g.out_w) /
              static_cast<double>(grid_w);
  return view_point_to_original(g, vy, vx, src_w);
}

// Entry (i,j) is true iff the original-space distance between cell i of view A
// and cell j of view B is at most ratio times the larger of the two views'
// cell diagonals (measured in original space). Using the larger diagonal keeps
// the mask exactly transpose-symmetric under a view swap.
inline BoolMatrix positive_pair_mask(const ViewPair& pair, int64_t grid_h, int64_t grid_w,
                                     double ratio) {
  if (grid_h < 1 || grid_w < 1) throw UsageError("positive_pair_mask: grid dims must be >= 1");
  if (ratio < 0) throw UsageError("positive_pair_mask: ratio must be >= 0");
  const int64_t cells = grid_h * grid_w;
  const double src_w = static_cast<double>(pair.src_w);

  auto cell_diag = [&](const ViewGeometry& g) {
    double ch = static_cast<double>(g.crop_h) / static_cast<double>(grid_h);
    double cw = static_cast<double>(g.crop_w) / static_cast<double>(grid_w);
    return std::hypot(ch, cw);
  };
  const double threshold = ratio * std::max(cell_diag(pair.geom_a), cell_diag(pair.geom_b));

  std::vector<std::pair<double, double>> ca(static_cast<size_t>(cells)),
      cb(static_cast<size_t>(cells));
  for (int64_t gy = 0; gy < grid_h; ++gy)
    for (int64_t gx = 0; gx < grid_w; ++gx) {
      ca[static_cast<size_t>(gy * grid_w + gx)] =
          grid_cell_center(pair.geom_a, gy, gx, grid_h, grid_w, pair.src_w);
      cb[static_cast<size_t>(gy * grid_w + gx)] =
          grid_cell_center(pair.geom_b, gy, gx, grid_h, grid_w, pair.src_w);
    }

  BoolMatrix mask(cells, cells);
  for (int64_t i = 0; i < cells; ++i)
    for (int64_t j = 0; j < cells; ++j) {
      double dy = ca[static_cast<size_t>(i)].first - cb[static_cast<size_t>(j)].first;
      double dx = std::fabs(ca[static_cast<size_t>(i)].second - cb[static_cast<size_t>(j)].second);
      if (pair.wrap) dx = std::min(dx, src_w - dx);
      mask.set(i, j, std::hypot(dy, dx) <= threshold);
    }
  return mask;
}

}  // namespace panopix
