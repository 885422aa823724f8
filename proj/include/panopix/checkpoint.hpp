#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "panopix/common.hpp"
#include "panopix/encoder.hpp"
#include "panopix/tensor.hpp"

// Checkpoint file: a text manifest (format version, precision, encoder
// configuration, one record per tensor with path and shape) terminated by an
// "end" line, followed by each tensor's values as a flat little-endian blob in
// record order. Backbone-only checkpoints carry just the transferable subset.

namespace panopix {

enum class CheckpointPart { Full, BackboneOnly };

namespace detail {

template <typename T>
void put_le(std::vector<uint8_t>& out, T v) {
  if constexpr (sizeof(T) == 4) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(bits >> (8 * i)));
  } else {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>(bits >> (8 * i)));
  }
}

template <typename T>
T get_le(const uint8_t* p) {
  if constexpr (sizeof(T) == 4) {
    uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) bits |= static_cast<uint32_t>(p[i]) << (8 * i);
    T v;
    std::memcpy(&v, &bits, 4);
    return v;
  } else {
    uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<uint64_t>(p[i]) << (8 * i);
    T v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
}

inline std::string join_i64(const std::vector<int64_t>& v) {
  std::ostringstream os;
  for (size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

inline std::vector<int64_t> split_i64(const std::string& s) {
  std::vector<int64_t> out;
  std::istringstream is(s);
  std::string item;
  while (std::getline(is, item, ',')) out.push_back(std::stoll(item));
  return out;
}

}  // namespace detail

template <typename T>
struct Checkpoint {
  EncoderConfig config;
  NetworkParams<T> params;
  CheckpointPart part = CheckpointPart::Full;
};

template <typename T>
std::vector<uint8_t> encode_checkpoint(const EncoderConfig& cfg, const NetworkParams<T>& params,
                                       CheckpointPart part = CheckpointPart::Full) {
  bool backbone_only = part == CheckpointPart::BackboneOnly;
  std::ostringstream m;
  m << "panopix-checkpoint 1\n";
  m << "precision " << precision_name(precision_of<T>()) << "\n";
  m << "part " << (backbone_only ? "backbone" : "full") << "\n";
  m << "stages " << detail::join_i64(cfg.stage_channels) << "\n";
  m << "blocks " << detail::join_i64(cfg.blocks_per_stage) << "\n";
  m << "output_stride " << cfg.output_stride << "\n";
  m << "proj " << cfg.proj_hidden << " " << cfg.proj_out << "\n";

  std::vector<std::pair<std::string, const Tensor<T>*>> records;  // kind folded into path line
  std::vector<uint8_t> payload;
  auto emit = [&](char kind, const std::string& path, const Tensor<T>& t) {
    std::ostringstream line;
    line << kind << " " << path << " " << t.shape.size();
    for (int64_t d : t.shape) line << " " << d;
    records.emplace_back(line.str(), &t);
  };
  for (const auto& [path, t] : params.tensors)
    if (!backbone_only || is_backbone_path(path)) emit('t', path, t);
  for (const auto& [path, t] : params.stats)
    if (!backbone_only || is_backbone_path(path)) emit('s', path, t);

  m << "tensors " << records.size() << "\n";
  for (const auto& [line, t] : records) {
    m << line << "\n";
    for (const T& v : t->data) detail::put_le(payload, v);
  }
  m << "end\n";

  std::string head = m.str();
  std::vector<uint8_t> out(head.begin(), head.end());
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

template <typename T>
Checkpoint<T> decode_checkpoint(const std::vector<uint8_t>& bytes) {
  size_t pos = 0;
  auto next_line = [&]() -> std::string {
    if (pos >= bytes.size()) throw DataError("checkpoint: truncated manifest");
    size_t nl = pos;
    while (nl < bytes.size() && bytes[nl] != '\n') ++nl;
    if (nl == bytes.size()) throw DataError("checkpoint: truncated manifest");
    std::string line(bytes.begin() + static_cast<int64_t>(pos), bytes.begin() + static_cast<int64_t>(nl));
    pos = nl + 1;
    return line;
  };
  auto expect_key = [&](const std::string& line, const std::string& key) -> std::string {
    if (line.rfind(key + " ", 0) != 0)
      throw DataError("checkpoint: expected '" + key + "' line, got '" + line + "'");
    return line.substr(key.size() + 1);
  };

  if (next_line() != "panopix-checkpoint 1")
    throw DataError("checkpoint: unrecognized header");
  std::string prec = expect_key(next_line(), "precision");
  if (prec != precision_name(precision_of<T>()))
    throw DataError("checkpoint: precision is " + prec + ", expected " +
                    precision_name(precision_of<T>()));
  std::string part_s = expect_key(next_line(), "part");
  if (part_s != "full" && part_s != "backbone")
    throw DataError("checkpoint: unknown part '" + part_s + "'");

  Checkpoint<T> ck;
  ck.part = part_s == "full" ? CheckpointPart::Full : CheckpointPart::BackboneOnly;
  ck.config.stage_channels = detail::split_i64(expect_key(next_line(), "stages"));
  ck.config.blocks_per_stage = detail::split_i64(expect_key(next_line(), "blocks"));
  ck.config.output_stride = std::stoll(expect_key(next_line(), "output_stride"));
  {
    std::istringstream is(expect_key(next_line(), "proj"));
    if (!(is >> ck.config.proj_hidden >> ck.config.proj_out))
      throw DataError("checkpoint: malformed proj line");
  }
  ck.config.validate();

  int64_t count = std::stoll(expect_key(next_line(), "tensors"));
  struct Record {
    char kind;
    std::string path;
    std::vector<int64_t> shape;
  };
  std::vector<Record> records;
  for (int64_t i = 0; i < count; ++i) {
    std::istringstream is(next_line());
    Record r;
    std::string kind;
    int64_t ndim = 0;
    if (!(is >> kind >> r.path >> ndim) || (kind != "t" && kind != "s") || ndim < 0)
      throw DataError("checkpoint: malformed tensor record");
    r.kind = kind[0];
    r.shape.resize(static_cast<size_t>(ndim));
    for (int64_t d = 0; d < ndim; ++d)
      if (!(is >> r.shape[static_cast<size_t>(d)]))
        throw DataError("checkpoint: malformed tensor record");
    records.push_back(std::move(r));
  }
  if (next_line() != "end") throw DataError("checkpoint: missing end marker");

  for (const Record& r : records) {
    int64_t n = Tensor<T>::numel_of(r.shape);
    size_t need = static_cast<size_t>(n) * sizeof(T);
    if (pos + need > bytes.size()) throw DataError("checkpoint: truncated payload");
    Tensor<T> t(r.shape);
    for (int64_t i = 0; i < n; ++i)
      t.data[static_cast<size_t>(i)] = detail::get_le<T>(&bytes[pos + static_cast<size_t>(i) * sizeof(T)]);
    pos += need;
    auto& dst = r.kind == 't' ? ck.params.tensors : ck.params.stats;
    if (!dst.emplace(r.path, std::move(t)).second)
      throw DataError("checkpoint: duplicate record for " + r.path);
  }
  if (pos != bytes.size()) throw DataError("checkpoint: trailing bytes after payload");

  // The embedded config must describe exactly the tensors present.
  Encoder<T> enc(ck.config);
  size_t want_tensors = 0;
  for (const auto& ps : enc.parameter_specs()) {
    bool keep = ck.part == CheckpointPart::Full || is_backbone_path(ps.path);
    if (!keep) continue;
    ++want_tensors;
    auto it = ck.params.tensors.find(ps.path);
    if (it == ck.params.tensors.end()) throw DataError("checkpoint: missing parameter " + ps.path);
    if (it->second.shape != ps.shape)
      throw DataError("checkpoint: shape mismatch for " + ps.path);
    if (!it->second.all_finite())
      throw DataError("checkpoint: non-finite values in " + ps.path);
  }
  if (ck.params.tensors.size() != want_tensors)
    throw DataError("checkpoint: unexpected extra parameters");
  size_t want_stats = 0;
  for (const auto& [prefix, c] : enc.stat_specs()) {
    for (const char* suffix : {".running_mean", ".running_var"}) {
      std::string path = prefix + suffix;
      if (ck.part == CheckpointPart::BackboneOnly && !is_backbone_path(path)) continue;
      ++want_stats;
      auto it = ck.params.stats.find(path);
      if (it == ck.params.stats.end()) throw DataError("checkpoint: missing running stat " + path);
      if (it->second.shape != std::vector<int64_t>{c})
        throw DataError("checkpoint: shape mismatch for " + path);
      if (!it->second.all_finite())
        throw DataError("checkpoint: non-finite values in " + path);
    }
  }
  if (ck.params.stats.size() != want_stats)
    throw DataError("checkpoint: unexpected extra running stats");
  return ck;
}

template <typename T>
void save_checkpoint(const std::string& path, const EncoderConfig& cfg,
                     const NetworkParams<T>& params, CheckpointPart part = CheckpointPart::Full) {
  std::vector<uint8_t> bytes = encode_checkpoint(cfg, params, part);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open for writing: " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError("write failed: " + path);
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw DataError("cannot open: " + path);
  std::streamsize n = f.tellg();
  f.seekg(0);
  std::vector<uint8_t> bytes(static_cast<size_t>(n));
  f.read(reinterpret_cast<char*>(bytes.data()), n);
  if (!f) throw DataError("read failed: " + path);
  return decode_checkpoint<T>(bytes);
}

}  // namespace panopix
