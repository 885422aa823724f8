#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "panopix/common.hpp"
#include "panopix/png_io.hpp"
#include "panopix/tensor.hpp"

// Panoptic label maps and their quality metrics. A segment id packs class and
// instance as class_id * 1000 + instance_index; stuff segments use instance 0,
// thing segments count from 1, and id 0 is void. All ids stay below 65536 so a
// map round-trips through 16-bit grayscale PNG.

namespace panopix {

constexpr int32_t kVoidSegment = 0;
constexpr int32_t kSegmentBase = 1000;
constexpr int32_t kMaxSegmentId = 65535;

struct ClassInfo {
  int32_t id = 0;
  std::string name;
  bool is_thing = false;
};

struct ClassTable {
  std::vector<ClassInfo> classes;

  static ClassTable desk() {
    ClassTable t;
    t.classes = {{1, "road", false}, {2, "sidewalk", false}, {3, "person", true}, {4, "car", true}};
    return t;
  }

  bool contains(int32_t class_id) const {
    for (const ClassInfo& c : classes)
      if (c.id == class_id) return true;
    return false;
  }

  const ClassInfo& info(int32_t class_id) const {
    for (const ClassInfo& c : classes)
      if (c.id == class_id) return c;
    throw DataError("unknown class id " + std::to_string(class_id));
  }

  bool is_thing(int32_t class_id) const { return info(class_id).is_thing; }
};

inline int32_t segment_class(int32_t segment_id) { return segment_id / kSegmentBase; }
inline int32_t segment_instance(int32_t segment_id) { return segment_id % kSegmentBase; }

inline int32_t make_segment_id(int32_t class_id, int32_t instance) {
  if (class_id < 1 || instance < 0 || instance >= kSegmentBase)
    throw DataError("segment id out of range: class " + std::to_string(class_id) + " instance " +
                    std::to_string(instance));
  int32_t id = class_id * kSegmentBase + instance;
  if (id > kMaxSegmentId)
    throw DataError("segment id " + std::to_string(id) + " exceeds 16-bit range");
  return id;
}

struct PanopticMap {
  int64_t height = 0;
  int64_t width = 0;
  std::vector<int32_t> segments;  // row-major, kVoidSegment where unlabeled

  PanopticMap() = default;
  PanopticMap(int64_t h, int64_t w) : height(h), width(w) {
    if (h < 1 || w < 1) throw ShapeError("PanopticMap: dimensions must be positive");
    segments.assign(static_cast<size_t>(h * w), kVoidSegment);
  }

  int64_t pixels() const { return height * width; }
  int32_t& at(int64_t r, int64_t c) { return segments[static_cast<size_t>(r * width + c)]; }
  const int32_t& at(int64_t r, int64_t c) const {
    return segments[static_cast<size_t>(r * width + c)];
  }

  bool operator==(const PanopticMap&) const = default;

  // Per-pixel class ids; void pixels stay 0.
  std::vector<int32_t> semantic() const {
    std::vector<int32_t> out(segments.size());
    for (size_t i = 0; i < segments.size(); ++i) out[i] = segment_class(segments[i]);
    return out;
  }

  // Every id must be void or a well-formed segment of a known class: stuff
  // segments carry instance 0, thing segments a positive instance.
  void validate(const ClassTable& table) const {
    if (static_cast<int64_t>(segments.size()) != pixels())
      throw ShapeError("PanopticMap: buffer does not match dimensions");
    for (int32_t seg : segments) {
      if (seg == kVoidSegment) continue;
      if (seg < 0 || seg > kMaxSegmentId)
        throw DataError("segment id " + std::to_string(seg) + " out of range");
      const ClassInfo& ci = table.info(segment_class(seg));
      int32_t inst = segment_instance(seg);
      if (ci.is_thing && inst < 1)
        throw DataError("thing segment " + std::to_string(seg) + " must have instance >= 1");
      if (!ci.is_thing && inst != 0)
        throw DataError("stuff segment " + std::to_string(seg) + " must have instance 0");
    }
  }
};

inline std::vector<uint8_t> encode_png(const PanopticMap& map) {
  std::vector<uint16_t> pixels(map.segments.size());
  for (size_t i = 0; i < map.segments.size(); ++i) {
    int32_t seg = map.segments[i];
    if (seg < 0 || seg > kMaxSegmentId)
      throw DataError("segment id " + std::to_string(seg) + " exceeds 16-bit range");
    pixels[i] = static_cast<uint16_t>(seg);
  }
  return encode_png_gray16(pixels, map.width, map.height);
}

inline PanopticMap decode_png(const std::vector<uint8_t>& bytes) {
  int64_t w = 0;
  int64_t h = 0;
  std::vector<uint16_t> pixels = decode_png_gray16(bytes, &w, &h);
  PanopticMap map(h, w);
  for (size_t i = 0; i < pixels.size(); ++i) map.segments[i] = pixels[i];
  return map;
}

// Additive per-class counters; merging partitions of a dataset must equal the
// whole, so everything lives in sums.
struct ClassStats {
  int64_t tp = 0;
  int64_t fp = 0;
  int64_t fn = 0;
  double iou_sum = 0.0;
};

struct PQStats {
  std::map<int32_t, ClassStats> per_class;

  PQStats& operator+=(const PQStats& o) {
    for (const auto& [cls, s] : o.per_class) {
      ClassStats& mine = per_class[cls];
      mine.tp += s.tp;
      mine.fp += s.fp;
      mine.fn += s.fn;
      mine.iou_sum += s.iou_sum;
    }
    return *this;
  }
};

struct SegmentMatch {
  int32_t class_id = 0;
  int32_t pred_segment = 0;
  int32_t gt_segment = 0;
  double iou = 0.0;
};

struct MatchResult {
  std::vector<SegmentMatch> matches;
  PQStats stats;
};

// Greedy-free matching: a pred/gt pair of the same class matches when IoU
// exceeds 0.5, with ground-truth void pixels excluded from the prediction's
// area. Above 0.5 each segment can appear in at most one match, so the result
// coincides with the best one-to-one assignment. Unmatched predictions whose
// area is mostly ground-truth void are dropped rather than counted as false
// positives.
inline MatchResult match_segments(const PanopticMap& pred, const PanopticMap& gt,
                                  const ClassTable& table) {
  if (pred.height != gt.height || pred.width != gt.width)
    throw ShapeError("match_segments: map dimensions differ");
  pred.validate(table);
  gt.validate(table);

  std::map<int32_t, int64_t> pred_area;
  std::map<int32_t, int64_t> gt_area;
  std::unordered_map<int64_t, int64_t> inter;  // (pred_seg << 32) | gt_seg
  std::unordered_map<int32_t, int64_t> pred_void;

  for (size_t i = 0; i < pred.segments.size(); ++i) {
    int32_t p = pred.segments[i];
    int32_t g = gt.segments[i];
    if (p != kVoidSegment) ++pred_area[p];
    if (g != kVoidSegment) ++gt_area[g];
    if (p != kVoidSegment && g == kVoidSegment) ++pred_void[p];
    if (p != kVoidSegment && g != kVoidSegment)
      ++inter[(static_cast<int64_t>(p) << 32) | static_cast<uint32_t>(g)];
  }

  MatchResult res;
  std::map<int32_t, int32_t> pred_match;  // pred seg -> gt seg
  std::map<int32_t, int32_t> gt_match;
  for (const auto& [key, count] : inter) {
    int32_t p = static_cast<int32_t>(key >> 32);
    int32_t g = static_cast<int32_t>(key & 0xffffffff);
    if (segment_class(p) != segment_class(g)) continue;
    int64_t void_part = 0;
    if (auto it = pred_void.find(p); it != pred_void.end()) void_part = it->second;
    int64_t uni = (pred_area[p] - void_part) + gt_area[g] - count;
    double iou = static_cast<double>(count) / static_cast<double>(uni);
    if (iou > 0.5) {
      pred_match[p] = g;
      gt_match[g] = p;
      res.matches.push_back({segment_class(p), p, g, iou});
      ClassStats& s = res.stats.per_class[segment_class(p)];
      ++s.tp;
      s.iou_sum += iou;
    }
  }
  std::sort(res.matches.begin(), res.matches.end(),
            [](const SegmentMatch& a, const SegmentMatch& b) {
              return a.gt_segment < b.gt_segment;
            });

  for (const auto& [g, area] : gt_area)
    if (!gt_match.count(g)) ++res.stats.per_class[segment_class(g)].fn;
  for (const auto& [p, area] : pred_area) {
    if (pred_match.count(p)) continue;
    int64_t void_part = 0;
    if (auto it = pred_void.find(p); it != pred_void.end()) void_part = it->second;
    if (static_cast<double>(void_part) > 0.5 * static_cast<double>(area)) continue;
    ++res.stats.per_class[segment_class(p)].fp;
  }
  return res;
}

struct ClassReport {
  int32_t class_id = 0;
  std::string name;
  bool is_thing = false;
  int64_t tp = 0;
  int64_t fp = 0;
  int64_t fn = 0;
  double iou_sum = 0.0;
  double pq = 0.0;
  double sq = 0.0;
  double rq = 0.0;
  bool counted = false;  // a class absent from both prediction and truth is excluded
};

struct PQReport {
  std::vector<ClassReport> per_class;  // table order
  double pq = 0.0;
  double sq = 0.0;
  double rq = 0.0;
  double pq_stuff = 0.0;
  double pq_things = 0.0;
  int64_t counted = 0;
  int64_t counted_stuff = 0;
  int64_t counted_things = 0;
};

inline PQReport panoptic_quality(const PQStats& stats, const ClassTable& table) {
  PQReport rep;
  double pq_sum = 0.0;
  double sq_sum = 0.0;
  double rq_sum = 0.0;
  double stuff_sum = 0.0;
  double things_sum = 0.0;
  for (const ClassInfo& ci : table.classes) {
    ClassReport cr;
    cr.class_id = ci.id;
    cr.name = ci.name;
    cr.is_thing = ci.is_thing;
    if (auto it = stats.per_class.find(ci.id); it != stats.per_class.end()) {
      const ClassStats& s = it->second;
      cr.tp = s.tp;
      cr.fp = s.fp;
      cr.fn = s.fn;
      cr.iou_sum = s.iou_sum;
      if (s.tp + s.fp + s.fn > 0) {
        cr.counted = true;
        double denom = static_cast<double>(s.tp) + 0.5 * static_cast<double>(s.fp) +
                       0.5 * static_cast<double>(s.fn);
        cr.pq = s.iou_sum / denom;
        cr.sq = s.tp > 0 ? s.iou_sum / static_cast<double>(s.tp) : 0.0;
        cr.rq = static_cast<double>(s.tp) / denom;
      }
    }
    if (cr.counted) {
      ++rep.counted;
      pq_sum += cr.pq;
      sq_sum += cr.sq;
      rq_sum += cr.rq;
      if (ci.is_thing) {
        ++rep.counted_things;
        things_sum += cr.pq;
      } else {
        ++rep.counted_stuff;
        stuff_sum += cr.pq;
      }
    }
    rep.per_class.push_back(std::move(cr));
  }
  if (rep.counted > 0) {
    rep.pq = pq_sum / static_cast<double>(rep.counted);
    rep.sq = sq_sum / static_cast<double>(rep.counted);
    rep.rq = rq_sum / static_cast<double>(rep.counted);
  }
  if (rep.counted_stuff > 0) rep.pq_stuff = stuff_sum / static_cast<double>(rep.counted_stuff);
  if (rep.counted_things > 0) rep.pq_things = things_sum / static_cast<double>(rep.counted_things);
  return rep;
}

struct ClassIoU {
  int32_t class_id = 0;
  std::string name;
  int64_t intersection = 0;
  int64_t union_ = 0;
  double iou = 0.0;
  bool present = false;  // appears in prediction or truth on non-void pixels
};

struct SemanticReport {
  std::vector<ClassIoU> per_class;  // table order
  double miou = 0.0;
  int64_t counted = 0;

  double class_iou(int32_t class_id) const {
    for (const ClassIoU& c : per_class)
      if (c.class_id == class_id) return c.iou;
    throw DataError("unknown class id " + std::to_string(class_id));
  }
};

// Pixels whose ground truth is void are ignored entirely; the mean runs over
// classes present in either map.
inline SemanticReport semantic_iou(const std::vector<int32_t>& pred_classes,
                                   const std::vector<int32_t>& gt_classes,
                                   const ClassTable& table) {
  if (pred_classes.size() != gt_classes.size())
    throw ShapeError("semantic_iou: length mismatch");
  std::map<int32_t, int64_t> pred_count;
  std::map<int32_t, int64_t> gt_count;
  std::map<int32_t, int64_t> inter;
  for (size_t i = 0; i < gt_classes.size(); ++i) {
    int32_t g = gt_classes[i];
    if (g == 0) continue;
    int32_t p = pred_classes[i];
    ++gt_count[g];
    if (p != 0) ++pred_count[p];
    if (p == g) ++inter[g];
  }
  SemanticReport rep;
  double sum = 0.0;
  for (const ClassInfo& ci : table.classes) {
    ClassIoU c;
    c.class_id = ci.id;
    c.name = ci.name;
    c.intersection = inter.count(ci.id) ? inter[ci.id] : 0;
    int64_t pc = pred_count.count(ci.id) ? pred_count[ci.id] : 0;
    int64_t gc = gt_count.count(ci.id) ? gt_count[ci.id] : 0;
    c.union_ = pc + gc - c.intersection;
    if (c.union_ > 0) {
      c.present = true;
      c.iou = static_cast<double>(c.intersection) / static_cast<double>(c.union_);
      sum += c.iou;
      ++rep.counted;
    }
    rep.per_class.push_back(std::move(c));
  }
  if (rep.counted > 0) rep.miou = sum / static_cast<double>(rep.counted);
  return rep;
}

struct InstanceMask {
  std::vector<uint8_t> mask;  // row-major, nonzero = member
  int32_t class_id = 0;
  double confidence = 1.0;
};

struct FusionConfig {
  double conf_min = 0.5;
  double overlap_keep = 0.5;    // minimum fraction of an instance left unclaimed
  int64_t min_stuff_area = 32;  // smaller stuff classes become void
};

// Greedy instance-first fusion. Instances claim pixels in order of descending
// confidence (ties keep input order); an instance survives only if the still
// unclaimed fraction of its mask reaches overlap_keep. Remaining pixels take
// the semantic argmax: stuff classes become segments, thing classes without a
// surviving instance stay void. Stuff classes whose total area falls short of
// min_stuff_area are erased to void.
inline PanopticMap fuse_panoptic(const Tensor<float>& semantic_probs,
                                 const std::vector<InstanceMask>& instances,
                                 const ClassTable& table, const FusionConfig& cfg = {}) {
  if (semantic_probs.ndim() != 3) throw ShapeError("fuse_panoptic: expected [C,H,W] probabilities");
  int64_t n_cls = semantic_probs.dim(0);
  int64_t h = semantic_probs.dim(1);
  int64_t w = semantic_probs.dim(2);
  if (n_cls != static_cast<int64_t>(table.classes.size()))
    throw ShapeError("fuse_panoptic: channel count does not match class table");

  PanopticMap out(h, w);
  std::vector<size_t> order(instances.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return instances[a].confidence > instances[b].confidence;
  });

  std::map<int32_t, int32_t> next_instance;
  for (size_t oi : order) {
    const InstanceMask& inst = instances[oi];
    if (!table.is_thing(inst.class_id))
      throw DataError("instance of stuff class " + std::to_string(inst.class_id));
    if (inst.mask.size() != static_cast<size_t>(h * w))
      throw ShapeError("fuse_panoptic: instance mask size mismatch");
    if (inst.confidence < cfg.conf_min) continue;
    int64_t area = 0;
    int64_t free = 0;
    for (size_t i = 0; i < inst.mask.size(); ++i) {
      if (!inst.mask[i]) continue;
      ++area;
      if (out.segments[i] == kVoidSegment) ++free;
    }
    if (area == 0 || free == 0) continue;
    if (static_cast<double>(free) < cfg.overlap_keep * static_cast<double>(area)) continue;
    int32_t& next = next_instance.try_emplace(inst.class_id, 1).first->second;
    int32_t seg = make_segment_id(inst.class_id, next++);
    for (size_t i = 0; i < inst.mask.size(); ++i)
      if (inst.mask[i] && out.segments[i] == kVoidSegment) out.segments[i] = seg;
  }

  std::map<int32_t, int64_t> stuff_area;
  for (int64_t i = 0; i < h * w; ++i) {
    if (out.segments[static_cast<size_t>(i)] != kVoidSegment) continue;
    int64_t best = 0;
    float best_p = semantic_probs[i];
    for (int64_t c = 1; c < n_cls; ++c) {
      float p = semantic_probs[c * h * w + i];
      if (p > best_p) {
        best_p = p;
        best = c;
      }
    }
    const ClassInfo& ci = table.classes[static_cast<size_t>(best)];
    if (ci.is_thing) continue;  // no surviving instance claimed it: void
    out.segments[static_cast<size_t>(i)] = make_segment_id(ci.id, 0);
    ++stuff_area[ci.id];
  }
  for (const auto& [cls, area] : stuff_area) {
    if (area >= cfg.min_stuff_area) continue;
    int32_t seg = make_segment_id(cls, 0);
    for (int32_t& s : out.segments)
      if (s == seg) s = kVoidSegment;
  }
  return out;
}

// Connected components of each thing class under 4-connectivity, optionally
// joining across the left/right seam. Components arrive largest first with
// confidence 1.0; ties keep discovery (row-major) order.
inline std::vector<InstanceMask> instances_from_semantic(const std::vector<int32_t>& classes,
                                                         int64_t h, int64_t w,
                                                         const ClassTable& table,
                                                         bool wrap_horizontal = false) {
  if (static_cast<int64_t>(classes.size()) != h * w)
    throw ShapeError("instances_from_semantic: buffer does not match dimensions");
  for (int32_t c : classes)
    if (c != 0 && !table.contains(c)) throw DataError("unknown class id " + std::to_string(c));

  std::vector<InstanceMask> out;
  std::vector<uint8_t> seen(classes.size(), 0);
  for (int64_t start = 0; start < h * w; ++start) {
    if (seen[static_cast<size_t>(start)]) continue;
    int32_t cls = classes[static_cast<size_t>(start)];
    if (cls == 0 || !table.is_thing(cls)) continue;
    InstanceMask inst;
    inst.class_id = cls;
    inst.confidence = 1.0;
    inst.mask.assign(static_cast<size_t>(h * w), 0);
    std::deque<int64_t> frontier{start};
    seen[static_cast<size_t>(start)] = 1;
    while (!frontier.empty()) {
      int64_t i = frontier.front();
      frontier.pop_front();
      inst.mask[static_cast<size_t>(i)] = 1;
      int64_t r = i / w;
      int64_t c = i % w;
      auto visit = [&](int64_t rr, int64_t cc) {
        if (rr < 0 || rr >= h) return;
        if (cc < 0 || cc >= w) {
          if (!wrap_horizontal) return;
          cc = (cc % w + w) % w;
        }
        int64_t j = rr * w + cc;
        if (seen[static_cast<size_t>(j)] || classes[static_cast<size_t>(j)] != cls) return;
        seen[static_cast<size_t>(j)] = 1;
        frontier.push_back(j);
      };
      visit(r - 1, c);
      visit(r + 1, c);
      visit(r, c - 1);
      visit(r, c + 1);
    }
    out.push_back(std::move(inst));
  }
  auto area = [](const InstanceMask& m) {
    int64_t n = 0;
    for (uint8_t v : m.mask) n += v;
    return n;
  };
  std::stable_sort(out.begin(), out.end(),
                   [&](const InstanceMask& a, const InstanceMask& b) { return area(a) > area(b); });
  return out;
}

}  // namespace panopix
