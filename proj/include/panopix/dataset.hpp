#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "panopix/common.hpp"
#include "panopix/image.hpp"
#include "panopix/panoptic.hpp"
#include "panopix/png_io.hpp"
#include "panopix/synth.hpp"

// On-disk datasets: PNG image/label pairs under one directory plus a text
// manifest carrying the class table, normalization statistics, and the seam
// flag. Channel statistics describe the stored 8-bit files, not the float
// scenes they were quantized from.

namespace panopix {

struct DatasetEntry {
  std::string image;  // paths relative to the manifest directory
  std::string label;
};

struct Dataset {
  std::filesystem::path root;
  ClassTable classes;
  std::array<double, 3> channel_mean{};
  std::array<double, 3> channel_std{};
  bool wrap_horizontal = false;
  std::vector<DatasetEntry> entries;

  int64_t size() const { return static_cast<int64_t>(entries.size()); }

  std::filesystem::path image_path(int64_t i) const { return root / entry(i).image; }
  std::filesystem::path label_path(int64_t i) const { return root / entry(i).label; }

  const DatasetEntry& entry(int64_t i) const {
    if (i < 0 || i >= size()) throw DataError("Dataset: index " + std::to_string(i) + " out of range");
    return entries[static_cast<size_t>(i)];
  }
};

struct ScenePair {
  Image image;
  PanopticMap gt;
};

inline ScenePair load_pair(const Dataset& ds, int64_t index) {
  ScenePair out;
  out.image = decode_png_rgb8(read_bytes(ds.image_path(index).string()));
  out.image.wrap_horizontal = ds.wrap_horizontal;
  out.image.id = index;
  out.gt = decode_png(read_bytes(ds.label_path(index).string()));
  if (out.gt.height != out.image.height || out.gt.width != out.image.width)
    throw DataError("Dataset: image and label sizes disagree for entry " + std::to_string(index));
  out.gt.validate(ds.classes);
  return out;
}

namespace detail {

inline void manifest_fail(size_t line_no, const std::string& why) {
  throw DataError("manifest line " + std::to_string(line_no) + ": " + why);
}

}  // namespace detail

inline std::string encode_manifest(const Dataset& ds) {
  std::ostringstream os;
  os << "panopix-dataset 1\n";
  os << "classes " << ds.classes.classes.size() << "\n";
  for (const ClassInfo& ci : ds.classes.classes) {
    if (ci.name.empty() || ci.name.find_first_of(" \t\n") != std::string::npos)
      throw DataError("encode_manifest: class names must be non-empty and whitespace-free");
    os << "class " << ci.id << " " << ci.name << " " << (ci.is_thing ? "thing" : "stuff") << "\n";
  }
  os << "wrap " << (ds.wrap_horizontal ? 1 : 0) << "\n";
  os << "mean";
  for (double v : ds.channel_mean) os << " " << detail::fmt_double(v);
  os << "\nstd";
  for (double v : ds.channel_std) os << " " << detail::fmt_double(v);
  os << "\npairs " << ds.entries.size() << "\n";
  for (const DatasetEntry& e : ds.entries) {
    if (e.image.find_first_of(" \t\n") != std::string::npos ||
        e.label.find_first_of(" \t\n") != std::string::npos)
      throw DataError("encode_manifest: paths must not contain whitespace");
    os << "pair " << e.image << " " << e.label << "\n";
  }
  os << "end\n";
  return os.str();
}

inline Dataset decode_manifest(const std::string& text, const std::filesystem::path& root) {
  std::istringstream in(text);
  std::string line;
  size_t line_no = 0;
  auto next_line = [&]() {
    if (!std::getline(in, line)) detail::manifest_fail(line_no + 1, "unexpected end of file");
    ++line_no;
    return std::istringstream(line);
  };

  Dataset ds;
  ds.root = root;
  {
    auto ls = next_line();
    std::string magic;
    int version = 0;
    if (!(ls >> magic >> version) || magic != "panopix-dataset" || version != 1)
      detail::manifest_fail(line_no, "expected 'panopix-dataset 1'");
  }
  int64_t n_classes = -1;
  {
    auto ls = next_line();
    std::string key;
    if (!(ls >> key >> n_classes) || key != "classes" || n_classes < 1)
      detail::manifest_fail(line_no, "expected 'classes <n>'");
  }
  ds.classes.classes.clear();
  for (int64_t i = 0; i < n_classes; ++i) {
    auto ls = next_line();
    std::string key, name, kind;
    int32_t id = 0;
    if (!(ls >> key >> id >> name >> kind) || key != "class" || (kind != "thing" && kind != "stuff"))
      detail::manifest_fail(line_no, "expected 'class <id> <name> <stuff|thing>'");
    for (const ClassInfo& ci : ds.classes.classes)
      if (ci.id == id) detail::manifest_fail(line_no, "duplicate class id");
    ds.classes.classes.push_back({id, name, kind == "thing"});
  }
  {
    auto ls = next_line();
    std::string key;
    int wrap = -1;
    if (!(ls >> key >> wrap) || key != "wrap" || (wrap != 0 && wrap != 1))
      detail::manifest_fail(line_no, "expected 'wrap <0|1>'");
    ds.wrap_horizontal = wrap == 1;
  }
  for (auto [key, dst] : {std::pair<const char*, std::array<double, 3>*>{"mean", &ds.channel_mean},
                          {"std", &ds.channel_std}}) {
    auto ls = next_line();
    std::string got;
    if (!(ls >> got) || got != key) detail::manifest_fail(line_no, std::string("expected '") + key + "'");
    for (double& v : *dst) {
      if (!(ls >> v) || !std::isfinite(v))
        detail::manifest_fail(line_no, "channel statistics must be three finite numbers");
    }
  }
  int64_t n_pairs = -1;
  {
    auto ls = next_line();
    std::string key;
    if (!(ls >> key >> n_pairs) || key != "pairs" || n_pairs < 0)
      detail::manifest_fail(line_no, "expected 'pairs <n>'");
  }
  for (int64_t i = 0; i < n_pairs; ++i) {
    auto ls = next_line();
    std::string key;
    DatasetEntry e;
    if (!(ls >> key >> e.image >> e.label) || key != "pair")
      detail::manifest_fail(line_no, "expected 'pair <image> <label>'");
    ds.entries.push_back(std::move(e));
  }
  {
    auto ls = next_line();
    std::string key;
    if (!(ls >> key) || key != "end") detail::manifest_fail(line_no, "expected 'end'");
  }
  for (double v : ds.channel_std)
    if (v < 0) throw DataError("manifest: negative channel stddev");
  return ds;
}

inline void save_dataset_manifest(const Dataset& ds) {
  const std::string text = encode_manifest(ds);
  write_bytes((ds.root / "manifest.txt").string(), std::vector<uint8_t>(text.begin(), text.end()));
}

inline Dataset load_dataset(const std::filesystem::path& manifest_path) {
  const std::vector<uint8_t> bytes = read_bytes(manifest_path.string());
  return decode_manifest(std::string(bytes.begin(), bytes.end()),
                         manifest_path.parent_path());
}

// Writes n generated scenes plus their manifest into dir and returns the
// loaded-equivalent Dataset. Scene i draws from hash_seed({seed, i}).
inline Dataset generate_dataset(const DomainSpec& spec, int64_t n, uint64_t seed,
                                const std::filesystem::path& dir) {
  spec.validate();
  if (n < 1) throw DataError("generate_dataset: need at least one scene");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError("generate_dataset: cannot create " + dir.string() + ": " + ec.message());

  Dataset ds;
  ds.root = dir;
  ds.classes = spec.classes;
  ds.wrap_horizontal = spec.wrap_horizontal;

  std::array<double, 3> sum{}, sum_sq{};
  int64_t count = 0;
  for (int64_t i = 0; i < n; ++i) {
    auto [img, map] = generate_scene(spec, hash_seed({seed, static_cast<uint64_t>(i)}));
    std::ostringstream base;
    base << "scene_" << std::setw(4) << std::setfill('0') << i;
    DatasetEntry e{base.str() + ".png", base.str() + "_gt.png"};
    const std::vector<uint8_t> img_bytes = encode_png_rgb8(img);
    write_bytes((dir / e.image).string(), img_bytes);
    write_bytes((dir / e.label).string(), encode_png(map));

    // Accumulate over the quantized pixels actually stored in the file.
    const Image stored = decode_png_rgb8(img_bytes);
    const int64_t px = stored.pixels();
    for (int c = 0; c < 3; ++c)
      for (int64_t p = 0; p < px; ++p) {
        const double v = stored.data[static_cast<size_t>(c * px + p)];
        sum[static_cast<size_t>(c)] += v;
        sum_sq[static_cast<size_t>(c)] += v * v;
      }
    count += px;
    ds.entries.push_back(std::move(e));
  }
  for (int c = 0; c < 3; ++c) {
    const double m = sum[static_cast<size_t>(c)] / static_cast<double>(count);
    ds.channel_mean[static_cast<size_t>(c)] = m;
    const double var = sum_sq[static_cast<size_t>(c)] / static_cast<double>(count) - m * m;
    ds.channel_std[static_cast<size_t>(c)] = std::sqrt(std::max(var, 0.0));
  }
  save_dataset_manifest(ds);
  return ds;
}

}  // namespace panopix
