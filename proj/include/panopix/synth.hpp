#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "panopix/common.hpp"
#include "panopix/config.hpp"
#include "panopix/image.hpp"
#include "panopix/panoptic.hpp"

// Synthetic street scenes with a controllable domain gap. Scenes are painted
// back to front: road everywhere, a sidewalk band, then person ellipses and
// car rectangles. Things are placed with a one-pixel moat between them so the
// ground-truth instances are exactly the 4-connected components of their
// semantic regions.

namespace panopix {

struct ClassAppearance {
  int32_t class_id = 0;
  std::array<double, 3> mean_rgb{0.5, 0.5, 0.5};
  double jitter = 0.0;  // uniform per-segment color wobble, per channel
};

enum class SidewalkLayout { FixedBottom, Uniform };

struct DomainSpec {
  ClassTable classes = ClassTable::desk();
  std::vector<ClassAppearance> palette;
  SidewalkLayout sidewalk_layout = SidewalkLayout::FixedBottom;
  int64_t person_min = 1, person_max = 3;
  int64_t car_min = 1, car_max = 2;
  double noise_stddev = 0.02;
  bool wrap_horizontal = false;
  int64_t height = 32, width = 32;

  void validate() const {
    if (height < 16 || width < 16) throw DataError("DomainSpec: image size must be >= 16x16");
    if (palette.size() != classes.classes.size())
      throw DataError("DomainSpec: palette must cover the class set exactly");
    for (const ClassInfo& ci : classes.classes) {
      const ClassAppearance* ap = nullptr;
      for (const ClassAppearance& a : palette)
        if (a.class_id == ci.id) {
          if (ap != nullptr) throw DataError("DomainSpec: duplicate palette entry");
          ap = &a;
        }
      if (ap == nullptr)
        throw DataError("DomainSpec: no palette entry for class " + std::to_string(ci.id));
      if (!(ap->jitter >= 0)) throw DataError("DomainSpec: jitter must be non-negative");
      for (double v : ap->mean_rgb)
        if (!(v >= 0.0 && v <= 1.0))
          throw DataError("DomainSpec: palette means must lie in [0, 1]");
    }
    if (person_min < 0 || person_max < person_min || car_min < 0 || car_max < car_min)
      throw DataError("DomainSpec: object count ranges must satisfy 0 <= min <= max");
    if (!(noise_stddev >= 0)) throw DataError("DomainSpec: noise level must be non-negative");
  }

  const ClassAppearance& appearance(int32_t class_id) const {
    for (const ClassAppearance& a : palette)
      if (a.class_id == class_id) return a;
    throw DataError("DomainSpec: no palette entry for class " + std::to_string(class_id));
  }

  int32_t class_named(const std::string& name) const {
    for (const ClassInfo& ci : classes.classes)
      if (ci.name == name) return ci.id;
    throw DataError("DomainSpec: layout requires a class named " + name);
  }

  // Pinhole-like domain: square frames, sidewalk pinned to the bottom band,
  // narrow palette, no horizontal wrap.
  static DomainSpec domain_a() {
    DomainSpec s;
    s.height = 32;
    s.width = 32;
    s.sidewalk_layout = SidewalkLayout::FixedBottom;
    s.wrap_horizontal = false;
    s.noise_stddev = 0.02;
    s.palette = {{1, {0.30, 0.30, 0.32}, 0.03},
                 {2, {0.55, 0.53, 0.50}, 0.03},
                 {3, {0.70, 0.20, 0.20}, 0.05},
                 {4, {0.20, 0.30, 0.70}, 0.05}};
    return s;
  }

  // Panorama-like domain: 2:8 aspect, seam-wrapped, sidewalk at any height,
  // wider palette and stronger noise.
  static DomainSpec domain_b() {
    DomainSpec s;
    s.height = 16;
    s.width = 64;
    s.sidewalk_layout = SidewalkLayout::Uniform;
    s.wrap_horizontal = true;
    s.noise_stddev = 0.05;
    s.palette = {{1, {0.36, 0.32, 0.28}, 0.10},
                 {2, {0.48, 0.46, 0.40}, 0.12},
                 {3, {0.62, 0.28, 0.32}, 0.15},
                 {4, {0.26, 0.36, 0.58}, 0.15}};
    return s;
  }
};

// Domain description file: a [domain] section for the layout knobs and a
// [palette] section with one "r,g,b,jitter" entry per class name. The class
// set itself is fixed.
inline DomainSpec domain_spec_from(ConfigReader& r) {
  DomainSpec s;
  s.palette.clear();
  s.height = r.get_int("domain", "height", s.height);
  s.width = r.get_int("domain", "width", s.width);
  s.noise_stddev = r.get_double("domain", "noise_stddev", s.noise_stddev);
  s.wrap_horizontal = r.get_bool("domain", "wrap_horizontal", s.wrap_horizontal);
  s.person_min = r.get_int("domain", "person_min", s.person_min);
  s.person_max = r.get_int("domain", "person_max", s.person_max);
  s.car_min = r.get_int("domain", "car_min", s.car_min);
  s.car_max = r.get_int("domain", "car_max", s.car_max);
  const std::string layout = r.get_string("domain", "sidewalk_layout", "fixed-bottom");
  if (layout == "fixed-bottom") {
    s.sidewalk_layout = SidewalkLayout::FixedBottom;
  } else if (layout == "uniform") {
    s.sidewalk_layout = SidewalkLayout::Uniform;
  } else {
    r.reject("domain", "sidewalk_layout", "expected fixed-bottom or uniform");
  }
  for (const ClassInfo& ci : s.classes.classes) {
    std::vector<double> v = r.get_double_list("palette", ci.name, {});
    if (v.size() != 4)
      throw UsageError("domain spec: palette." + ci.name + " needs r,g,b,jitter");
    s.palette.push_back({ci.id, {v[0], v[1], v[2]}, v[3]});
  }
  r.finish();
  s.validate();
  return s;
}

inline DomainSpec load_domain_spec(const std::string& path) {
  ConfigReader r = ConfigReader::from_file(path);
  return domain_spec_from(r);
}

inline std::pair<Image, PanopticMap> generate_scene(const DomainSpec& spec, uint64_t seed) {
  spec.validate();
  const int32_t id_road = spec.class_named("road");
  const int32_t id_sidewalk = spec.class_named("sidewalk");
  const int32_t id_person = spec.class_named("person");
  const int32_t id_car = spec.class_named("car");

  const int64_t h = spec.height, w = spec.width;
  Rng rng(seed);
  Image img(h, w, spec.wrap_horizontal);
  PanopticMap map(h, w);

  auto segment_color = [&](int32_t cls) {
    const ClassAppearance& ap = spec.appearance(cls);
    std::array<float, 3> c;
    for (int k = 0; k < 3; ++k)
      c[k] = clamp01(static_cast<float>(ap.mean_rgb[k] + rng.uniform(-ap.jitter, ap.jitter)));
    return c;
  };
  auto paint = [&](int64_t y, int64_t x, int32_t seg, const std::array<float, 3>& c) {
    map.at(y, x) = seg;
    for (int k = 0; k < 3; ++k) img.at(k, y, x) = c[k];
  };

  {
    const std::array<float, 3> c = segment_color(id_road);
    const int32_t seg = make_segment_id(id_road, 0);
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) paint(y, x, seg, c);
  }
  {
    const int64_t lo = std::max<int64_t>(2, h / 8);
    int64_t band, top;
    if (spec.sidewalk_layout == SidewalkLayout::FixedBottom) {
      // Never taller than h/3, so the band sits entirely in the bottom third.
      band = rng.uniform_int(lo, std::max(lo, h / 3));
      top = h - band;
    } else {
      band = rng.uniform_int(lo, std::max(lo, h / 4));
      top = rng.uniform_int(0, h - band);
    }
    const std::array<float, 3> c = segment_color(id_sidewalk);
    const int32_t seg = make_segment_id(id_sidewalk, 0);
    for (int64_t y = top; y < top + band; ++y)
      for (int64_t x = 0; x < w; ++x) paint(y, x, seg, c);
  }

  // Thing pixels plus a one-pixel 4-neighborhood moat. New things may only
  // occupy unblocked pixels, which keeps every placed thing disjoint from and
  // non-adjacent to every other.
  std::vector<uint8_t> blocked(static_cast<size_t>(h * w), 0);
  auto block = [&](int64_t y, int64_t x) {
    blocked[static_cast<size_t>(y * w + x)] = 1;
    if (y > 0) blocked[static_cast<size_t>((y - 1) * w + x)] = 1;
    if (y + 1 < h) blocked[static_cast<size_t>((y + 1) * w + x)] = 1;
    for (int64_t dx : {int64_t{-1}, int64_t{1}}) {
      int64_t xx = x + dx;
      if (spec.wrap_horizontal)
        xx = (xx % w + w) % w;
      else if (xx < 0 || xx >= w)
        continue;
      blocked[static_cast<size_t>(y * w + xx)] = 1;
    }
  };

  auto try_place = [&](int32_t cls, int32_t instance, bool ellipse) {
    for (int attempt = 0; attempt < 40; ++attempt) {
      const int64_t cy = rng.uniform_int(0, h - 1);
      const int64_t cx = rng.uniform_int(0, w - 1);
      int64_t ry, rx;
      if (ellipse) {
        ry = rng.uniform_int(2, std::max<int64_t>(2, h / 6));
        rx = rng.uniform_int(1, std::max<int64_t>(1, ry / 2));
      } else {
        ry = rng.uniform_int(1, std::max<int64_t>(1, h / 8));
        rx = rng.uniform_int(2, std::max<int64_t>(2, w / 10));
      }
      std::vector<int64_t> pixels;
      for (int64_t dy = -ry; dy <= ry; ++dy) {
        const int64_t y = cy + dy;
        if (y < 0 || y >= h) continue;
        for (int64_t dx = -rx; dx <= rx; ++dx) {
          if (ellipse) {
            const double e = static_cast<double>(dx * dx) / static_cast<double>(rx * rx) +
                             static_cast<double>(dy * dy) / static_cast<double>(ry * ry);
            if (e > 1.0) continue;
          }
          int64_t x = cx + dx;
          if (spec.wrap_horizontal)
            x = (x % w + w) % w;
          else if (x < 0 || x >= w)
            continue;
          pixels.push_back(y * w + x);
        }
      }
      if (pixels.empty()) continue;
      bool clear = true;
      for (int64_t p : pixels)
        if (blocked[static_cast<size_t>(p)]) {
          clear = false;
          break;
        }
      if (!clear) continue;
      const std::array<float, 3> c = segment_color(cls);
      const int32_t seg = make_segment_id(cls, instance);
      for (int64_t p : pixels) paint(p / w, p % w, seg, c);
      for (int64_t p : pixels) block(p / w, p % w);
      return true;
    }
    return false;
  };

  const int64_t n_person = rng.uniform_int(spec.person_min, spec.person_max);
  const int64_t n_car = rng.uniform_int(spec.car_min, spec.car_max);
  int32_t instance = 1;
  for (int64_t i = 0; i < n_person; ++i)
    if (try_place(id_person, instance, true)) ++instance;
  instance = 1;
  for (int64_t i = 0; i < n_car; ++i)
    if (try_place(id_car, instance, false)) ++instance;

  if (spec.noise_stddev > 0)
    for (float& v : img.data)
      v = clamp01(v + static_cast<float>(rng.normal(0.0, spec.noise_stddev)));

  map.validate(spec.classes);
  return {std::move(img), std::move(map)};
}

}  // namespace panopix
