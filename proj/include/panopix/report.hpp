#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "panopix/common.hpp"
#include "panopix/config.hpp"
#include "panopix/panoptic.hpp"
#include "panopix/png_io.hpp"

// Result documents: evaluation reports, paired A/B reports, and training
// histories. All are line-oriented text with fixed field order so runs can be
// diffed byte for byte; doubles are written with enough digits to round-trip.

namespace panopix {

namespace detail {

// Line-oriented reader shared by the report decoders.
class LineCursor {
 public:
  LineCursor(const std::string& text, std::string what) : is_(text), what_(std::move(what)) {}

  std::string next() {
    std::string line;
    if (!std::getline(is_, line)) fail("unexpected end of file");
    ++line_;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return line;
  }

  // Strips a fixed "key " prefix from the next line.
  std::string field(const std::string& key) {
    std::string line = next();
    if (line.rfind(key + " ", 0) != 0)
      fail("expected '" + key + "', got '" + line + "'");
    return line.substr(key.size() + 1);
  }

  void expect(const std::string& exact) {
    std::string line = next();
    if (line != exact) fail("expected '" + exact + "', got '" + line + "'");
  }

  [[noreturn]] void fail(const std::string& why) const {
    throw DataError(what_ + " line " + std::to_string(line_) + ": " + why);
  }

 private:
  std::istringstream is_;
  std::string what_;
  size_t line_ = 0;
};

inline double parse_double(LineCursor& c, const std::string& text) {
  try {
    size_t pos = 0;
    double v = std::stod(text, &pos);
    if (pos != text.size()) c.fail("trailing characters after number '" + text + "'");
    return v;
  } catch (const std::logic_error&) {
    c.fail("expected a number, got '" + text + "'");
  }
}

inline int64_t parse_int(LineCursor& c, const std::string& text) {
  try {
    size_t pos = 0;
    int64_t v = std::stoll(text, &pos);
    if (pos != text.size()) c.fail("trailing characters after integer '" + text + "'");
    return v;
  } catch (const std::logic_error&) {
    c.fail("expected an integer, got '" + text + "'");
  }
}

inline std::string text_of(const std::vector<uint8_t>& bytes) {
  return std::string(bytes.begin(), bytes.end());
}

inline std::vector<uint8_t> bytes_of(const std::string& text) {
  return std::vector<uint8_t>(text.begin(), text.end());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Evaluation report: panoptic quality plus semantic IoU, per class and pooled.
// ---------------------------------------------------------------------------

struct EvalReport {
  int64_t images = 0;
  PQReport pq;
  SemanticReport sem;
};

inline std::string encode_eval_report(const EvalReport& r) {
  if (r.pq.per_class.size() != r.sem.per_class.size())
    throw DataError("eval report: panoptic and semantic class lists disagree");
  std::ostringstream os;
  os << "panopix-report 1\n";
  os << "images " << r.images << "\n";
  os << "scalar PQ " << detail::fmt_double(r.pq.pq) << "\n";
  os << "scalar SQ " << detail::fmt_double(r.pq.sq) << "\n";
  os << "scalar RQ " << detail::fmt_double(r.pq.rq) << "\n";
  os << "scalar PQ_stuff " << detail::fmt_double(r.pq.pq_stuff) << "\n";
  os << "scalar PQ_things " << detail::fmt_double(r.pq.pq_things) << "\n";
  os << "scalar mIoU " << detail::fmt_double(r.sem.miou) << "\n";
  os << "classes " << r.pq.per_class.size() << "\n";
  for (size_t i = 0; i < r.pq.per_class.size(); ++i) {
    const ClassReport& cr = r.pq.per_class[i];
    const ClassIoU& ci = r.sem.per_class[i];
    if (cr.class_id != ci.class_id)
      throw DataError("eval report: class order mismatch at index " + std::to_string(i));
    os << "class " << cr.class_id << " " << cr.name << " " << (cr.is_thing ? "thing" : "stuff")
       << " tp " << cr.tp << " fp " << cr.fp << " fn " << cr.fn
       << " iou_sum " << detail::fmt_double(cr.iou_sum)
       << " pq " << detail::fmt_double(cr.pq)
       << " sq " << detail::fmt_double(cr.sq)
       << " rq " << detail::fmt_double(cr.rq)
       << " counted " << (cr.counted ? 1 : 0)
       << " inter " << ci.intersection << " union " << ci.union_
       << " iou " << detail::fmt_double(ci.iou)
       << " present " << (ci.present ? 1 : 0) << "\n";
  }
  os << "end\n";
  return os.str();
}

inline EvalReport decode_eval_report(const std::string& text) {
  detail::LineCursor c(text, "report");
  c.expect("panopix-report 1");
  EvalReport r;
  r.images = detail::parse_int(c, c.field("images"));
  auto scalar = [&](const std::string& name) {
    std::string v = c.field("scalar");
    if (v.rfind(name + " ", 0) != 0) c.fail("expected scalar " + name);
    return detail::parse_double(c, v.substr(name.size() + 1));
  };
  r.pq.pq = scalar("PQ");
  r.pq.sq = scalar("SQ");
  r.pq.rq = scalar("RQ");
  r.pq.pq_stuff = scalar("PQ_stuff");
  r.pq.pq_things = scalar("PQ_things");
  r.sem.miou = scalar("mIoU");
  int64_t n = detail::parse_int(c, c.field("classes"));
  if (n < 0) c.fail("negative class count");
  for (int64_t i = 0; i < n; ++i) {
    std::istringstream is(c.field("class"));
    ClassReport cr;
    ClassIoU ci;
    std::string kind;
    int64_t id = 0;
    if (!(is >> id >> cr.name >> kind)) c.fail("malformed class row");
    if (kind != "thing" && kind != "stuff") c.fail("class kind must be thing or stuff");
    cr.class_id = static_cast<int32_t>(id);
    cr.is_thing = kind == "thing";
    ci.class_id = cr.class_id;
    ci.name = cr.name;
    std::string key;
    int64_t counted = 0, present = 0;
    auto want = [&](const char* k, auto& dst) {
      double v = 0.0;
      if (!(is >> key >> v) || key != k) c.fail(std::string("malformed class row at '") + k + "'");
      dst = static_cast<std::decay_t<decltype(dst)>>(v);
    };
    want("tp", cr.tp);
    want("fp", cr.fp);
    want("fn", cr.fn);
    want("iou_sum", cr.iou_sum);
    want("pq", cr.pq);
    want("sq", cr.sq);
    want("rq", cr.rq);
    want("counted", counted);
    want("inter", ci.intersection);
    want("union", ci.union_);
    want("iou", ci.iou);
    want("present", present);
    cr.counted = counted != 0;
    ci.present = present != 0;
    if (cr.counted) {
      ++r.pq.counted;
      if (cr.is_thing) ++r.pq.counted_things;
      else ++r.pq.counted_stuff;
    }
    if (ci.present) ++r.sem.counted;
    r.pq.per_class.push_back(std::move(cr));
    r.sem.per_class.push_back(std::move(ci));
  }
  c.expect("end");
  return r;
}

inline void save_eval_report(const std::string& path, const EvalReport& r) {
  write_bytes(path, detail::bytes_of(encode_eval_report(r)));
}

inline EvalReport load_eval_report(const std::string& path) {
  return decode_eval_report(detail::text_of(read_bytes(path)));
}

// ---------------------------------------------------------------------------
// Paired A/B report: pretrained-init vs random-init downstream runs over the
// same seeds, with per-class IoU deltas and a loss-weight sweep appendix.
// ---------------------------------------------------------------------------

struct AbClassRow {
  int32_t class_id = 0;
  std::string name;
  double pretrained_iou = 0.0;
  double random_iou = 0.0;
  double delta = 0.0;
};

struct AbSweepRow {
  double alpha = 0.0;
  double pq = 0.0;
};

struct AbReport {
  int64_t train_images = 0;
  int64_t eval_images = 0;
  std::vector<uint64_t> seeds;
  std::vector<double> pretrained_pq;  // one entry per seed
  std::vector<double> random_pq;
  double pretrained_pq_mean = 0.0;
  double random_pq_mean = 0.0;
  double delta_pq = 0.0;
  double pretrained_sidewalk_iou = 0.0;
  double random_sidewalk_iou = 0.0;
  double delta_sidewalk_iou = 0.0;
  std::vector<AbClassRow> class_iou;
  std::vector<AbSweepRow> alpha_sweep;
};

inline std::string encode_ab_report(const AbReport& r) {
  if (r.pretrained_pq.size() != r.seeds.size() || r.random_pq.size() != r.seeds.size())
    throw DataError("ab report: per-seed lists must match the seed list");
  std::ostringstream os;
  os << "panopix-ab-report 1\n";
  os << "train_images " << r.train_images << "\n";
  os << "eval_images " << r.eval_images << "\n";
  os << "seeds " << r.seeds.size();
  for (uint64_t s : r.seeds) os << " " << s;
  os << "\n";
  os << "pq pretrained";
  for (double v : r.pretrained_pq) os << " " << detail::fmt_double(v);
  os << "\n";
  os << "pq random";
  for (double v : r.random_pq) os << " " << detail::fmt_double(v);
  os << "\n";
  os << "scalar pretrained.PQ_mean " << detail::fmt_double(r.pretrained_pq_mean) << "\n";
  os << "scalar random.PQ_mean " << detail::fmt_double(r.random_pq_mean) << "\n";
  os << "scalar delta.PQ " << detail::fmt_double(r.delta_pq) << "\n";
  os << "scalar pretrained.sidewalk_IoU " << detail::fmt_double(r.pretrained_sidewalk_iou) << "\n";
  os << "scalar random.sidewalk_IoU " << detail::fmt_double(r.random_sidewalk_iou) << "\n";
  os << "scalar delta.sidewalk_IoU " << detail::fmt_double(r.delta_sidewalk_iou) << "\n";
  os << "classes " << r.class_iou.size() << "\n";
  for (const AbClassRow& row : r.class_iou)
    os << "class " << row.class_id << " " << row.name
       << " pretrained_IoU " << detail::fmt_double(row.pretrained_iou)
       << " random_IoU " << detail::fmt_double(row.random_iou)
       << " delta_IoU " << detail::fmt_double(row.delta) << "\n";
  os << "sweep " << r.alpha_sweep.size() << "\n";
  for (const AbSweepRow& row : r.alpha_sweep)
    os << "alpha " << detail::fmt_double(row.alpha) << " PQ " << detail::fmt_double(row.pq)
       << "\n";
  os << "end\n";
  return os.str();
}

inline AbReport decode_ab_report(const std::string& text) {
  detail::LineCursor c(text, "ab report");
  c.expect("panopix-ab-report 1");
  AbReport r;
  r.train_images = detail::parse_int(c, c.field("train_images"));
  r.eval_images = detail::parse_int(c, c.field("eval_images"));
  {
    std::istringstream is(c.field("seeds"));
    int64_t n = 0;
    if (!(is >> n) || n < 0) c.fail("malformed seeds line");
    uint64_t s = 0;
    for (int64_t i = 0; i < n; ++i) {
      if (!(is >> s)) c.fail("malformed seeds line");
      r.seeds.push_back(s);
    }
  }
  auto pq_row = [&](const std::string& arm) {
    std::string rest = c.field("pq");
    if (rest.rfind(arm + " ", 0) != 0 && rest != arm) c.fail("expected pq " + arm);
    std::istringstream is(rest.substr(std::min(rest.size(), arm.size() + 1)));
    std::vector<double> out;
    double v = 0.0;
    while (is >> v) out.push_back(v);
    if (out.size() != r.seeds.size()) c.fail("pq " + arm + " row length mismatch");
    return out;
  };
  r.pretrained_pq = pq_row("pretrained");
  r.random_pq = pq_row("random");
  auto scalar = [&](const std::string& name) {
    std::string v = c.field("scalar");
    if (v.rfind(name + " ", 0) != 0) c.fail("expected scalar " + name);
    return detail::parse_double(c, v.substr(name.size() + 1));
  };
  r.pretrained_pq_mean = scalar("pretrained.PQ_mean");
  r.random_pq_mean = scalar("random.PQ_mean");
  r.delta_pq = scalar("delta.PQ");
  r.pretrained_sidewalk_iou = scalar("pretrained.sidewalk_IoU");
  r.random_sidewalk_iou = scalar("random.sidewalk_IoU");
  r.delta_sidewalk_iou = scalar("delta.sidewalk_IoU");
  int64_t n_cls = detail::parse_int(c, c.field("classes"));
  for (int64_t i = 0; i < n_cls; ++i) {
    std::istringstream is(c.field("class"));
    AbClassRow row;
    int64_t id = 0;
    std::string k1, k2, k3;
    if (!(is >> id >> row.name >> k1 >> row.pretrained_iou >> k2 >> row.random_iou >> k3 >>
          row.delta) ||
        k1 != "pretrained_IoU" || k2 != "random_IoU" || k3 != "delta_IoU")
      c.fail("malformed class row");
    row.class_id = static_cast<int32_t>(id);
    r.class_iou.push_back(std::move(row));
  }
  int64_t n_sweep = detail::parse_int(c, c.field("sweep"));
  for (int64_t i = 0; i < n_sweep; ++i) {
    std::istringstream is(c.field("alpha"));
    AbSweepRow row;
    std::string key;
    if (!(is >> row.alpha >> key >> row.pq) || key != "PQ") c.fail("malformed sweep row");
    r.alpha_sweep.push_back(row);
  }
  c.expect("end");
  return r;
}

inline void save_ab_report(const std::string& path, const AbReport& r) {
  write_bytes(path, detail::bytes_of(encode_ab_report(r)));
}

inline AbReport load_ab_report(const std::string& path) {
  return decode_ab_report(detail::text_of(read_bytes(path)));
}

// ---------------------------------------------------------------------------
// Training history: the resolved config echo plus one row of named series
// values per epoch.
// ---------------------------------------------------------------------------

struct History {
  std::string kind;  // "pretrain" or "train"
  ConfigEcho config;
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;  // rows[epoch][column]

  double config_double(const std::string& key) const {
    for (const auto& [k, v] : config)
      if (k == key) {
        std::istringstream is(v);
        double out = 0.0;
        if (!(is >> out)) throw DataError("history: config value for " + key + " is not numeric");
        return out;
      }
    throw DataError("history: no config entry " + key);
  }

  int64_t column(const std::string& name) const {
    for (size_t i = 0; i < columns.size(); ++i)
      if (columns[i] == name) return static_cast<int64_t>(i);
    throw DataError("history: no column " + name);
  }
};

inline std::string encode_history(const History& h) {
  if (h.kind.empty() || h.kind.find(' ') != std::string::npos)
    throw DataError("history: kind must be a single word");
  std::ostringstream os;
  os << "panopix-history 1\n";
  os << "kind " << h.kind << "\n";
  os << "config " << h.config.size() << "\n";
  for (const auto& [k, v] : h.config) os << k << " " << v << "\n";
  os << "columns " << h.columns.size();
  for (const std::string& name : h.columns) os << " " << name;
  os << "\n";
  os << "rows " << h.rows.size() << "\n";
  for (const auto& row : h.rows) {
    if (row.size() != h.columns.size()) throw DataError("history: row width mismatch");
    for (size_t i = 0; i < row.size(); ++i)
      os << (i ? " " : "") << detail::fmt_double(row[i]);
    os << "\n";
  }
  os << "end\n";
  return os.str();
}

inline History decode_history(const std::string& text) {
  detail::LineCursor c(text, "history");
  c.expect("panopix-history 1");
  History h;
  h.kind = c.field("kind");
  int64_t n_cfg = detail::parse_int(c, c.field("config"));
  for (int64_t i = 0; i < n_cfg; ++i) {
    std::string line = c.next();
    size_t sp = line.find(' ');
    if (sp == std::string::npos || sp == 0) c.fail("malformed config echo '" + line + "'");
    h.config.emplace_back(line.substr(0, sp), line.substr(sp + 1));
  }
  {
    std::istringstream is(c.field("columns"));
    int64_t n = 0;
    if (!(is >> n) || n < 0) c.fail("malformed columns line");
    std::string name;
    for (int64_t i = 0; i < n; ++i) {
      if (!(is >> name)) c.fail("malformed columns line");
      h.columns.push_back(name);
    }
  }
  int64_t n_rows = detail::parse_int(c, c.field("rows"));
  for (int64_t i = 0; i < n_rows; ++i) {
    std::istringstream is(c.next());
    std::vector<double> row(h.columns.size());
    for (double& v : row)
      if (!(is >> v)) c.fail("row has fewer values than columns");
    double extra = 0.0;
    if (is >> extra) c.fail("row has more values than columns");
    h.rows.push_back(std::move(row));
  }
  c.expect("end");
  return h;
}

inline void save_history(const std::string& path, const History& h) {
  write_bytes(path, detail::bytes_of(encode_history(h)));
}

inline History load_history(const std::string& path) {
  return decode_history(detail::text_of(read_bytes(path)));
}

// Renders every series of a history as one SVG line chart. Plumbing only: a
// fixed palette, min/max axis labels and a legend, no styling knobs.
inline std::string render_history_svg(const History& h, int64_t width = 720,
                                      int64_t height = 420) {
  if (h.columns.empty() || h.rows.empty()) throw DataError("history svg: nothing to plot");
  if (width < 200 || height < 120) throw DataError("history svg: canvas too small");
  double lo = h.rows[0][0], hi = h.rows[0][0];
  for (const auto& row : h.rows)
    for (double v : row) {
      if (!std::isfinite(v)) throw DataError("history svg: non-finite value");
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  if (hi == lo) {  // flat series still get a visible band
    hi += 0.5;
    lo -= 0.5;
  }
  const double ml = 64, mr = 168, mt = 40, mb = 44;
  const double pw = static_cast<double>(width) - ml - mr;
  const double ph = static_cast<double>(height) - mt - mb;
  const size_t n = h.rows.size();
  auto x_of = [&](size_t i) {
    return ml + (n == 1 ? pw / 2 : pw * static_cast<double>(i) / static_cast<double>(n - 1));
  };
  auto y_of = [&](double v) { return mt + ph * (1.0 - (v - lo) / (hi - lo)); };
  const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  const size_t n_colors = sizeof(palette) / sizeof(palette[0]);

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
  os << "<rect width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n";
  os << "<text x=\"" << ml << "\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\">"
     << h.kind << " history</text>\n";
  os << "<rect x=\"" << ml << "\" y=\"" << mt << "\" width=\"" << pw << "\" height=\"" << ph
     << "\" fill=\"none\" stroke=\"#888\"/>\n";
  auto label = [&](double x, double y, const std::string& text, const char* anchor) {
    os << "<text x=\"" << x << "\" y=\"" << y
       << "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"" << anchor << "\">"
       << text << "</text>\n";
  };
  std::ostringstream lo_s, hi_s;
  lo_s << lo;
  hi_s << hi;
  label(ml - 6, mt + ph + 4, lo_s.str(), "end");
  label(ml - 6, mt + 10, hi_s.str(), "end");
  label(ml, mt + ph + 16, "0", "middle");
  label(ml + pw, mt + ph + 16, std::to_string(n - 1), "middle");
  label(ml + pw / 2, static_cast<double>(height) - 8, "epoch", "middle");
  for (size_t col = 0; col < h.columns.size(); ++col) {
    const char* color = palette[col % n_colors];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (size_t i = 0; i < n; ++i)
      os << (i ? " " : "") << x_of(i) << "," << y_of(h.rows[i][col]);
    os << "\"/>\n";
    double ly = mt + 14 + 18 * static_cast<double>(col);
    os << "<line x1=\"" << ml + pw + 12 << "\" y1=\"" << ly - 4 << "\" x2=\"" << ml + pw + 34
       << "\" y2=\"" << ly - 4 << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    label(ml + pw + 40, ly, h.columns[col], "start");
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace panopix
