#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "panopix/augment.hpp"
#include "panopix/common.hpp"
#include "panopix/encoder.hpp"
#include "panopix/losses.hpp"
#include "panopix/optim.hpp"

// Experiment configuration files: `[section]` headers, key=value lines, `#`
// comment lines. Every key must be claimed by the schema that reads the file;
// leftovers are rejected with their line numbers so typos cannot silently
// fall back to defaults.

namespace panopix {

struct ConfigEntry {
  std::string section;
  std::string key;
  std::string value;
  size_t line = 0;
};

namespace detail {

inline std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] inline void config_fail(size_t line, const std::string& why) {
  throw UsageError("config line " + std::to_string(line) + ": " + why);
}

}  // namespace detail

class ConfigReader {
 public:
  static ConfigReader from_text(const std::string& text) {
    ConfigReader r;
    std::istringstream is(text);
    std::string raw, section;
    size_t line_no = 0;
    while (std::getline(is, raw)) {
      ++line_no;
      std::string line = detail::trim(raw);
      if (line.empty() || line[0] == '#') continue;
      if (line.front() == '[') {
        if (line.size() < 3 || line.back() != ']')
          detail::config_fail(line_no, "malformed section header '" + line + "'");
        section = detail::trim(line.substr(1, line.size() - 2));
        if (section.empty()) detail::config_fail(line_no, "empty section name");
        continue;
      }
      size_t eq = line.find('=');
      if (eq == std::string::npos)
        detail::config_fail(line_no, "expected key=value, got '" + line + "'");
      std::string key = detail::trim(line.substr(0, eq));
      std::string value = detail::trim(line.substr(eq + 1));
      if (key.empty()) detail::config_fail(line_no, "empty key");
      if (section.empty())
        detail::config_fail(line_no, "key '" + key + "' appears before any [section] header");
      for (const ConfigEntry& e : r.entries_)
        if (e.section == section && e.key == key)
          detail::config_fail(line_no, "duplicate key '" + section + "." + key +
                                           "' (first set on line " + std::to_string(e.line) + ")");
      r.entries_.push_back({section, key, value, line_no});
    }
    r.used_.assign(r.entries_.size(), false);
    return r;
  }

  static ConfigReader from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open config: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return from_text(ss.str());
  }

  bool has(const std::string& section, const std::string& key) const {
    for (const ConfigEntry& e : entries_)
      if (e.section == section && e.key == key) return true;
    return false;
  }

  std::string get_string(const std::string& section, const std::string& key,
                         const std::string& fallback) {
    const ConfigEntry* e = claim(section, key);
    return e ? e->value : fallback;
  }

  int64_t get_int(const std::string& section, const std::string& key, int64_t fallback) {
    const ConfigEntry* e = claim(section, key);
    if (!e) return fallback;
    int64_t v = 0;
    auto [p, ec] = std::from_chars(e->value.data(), e->value.data() + e->value.size(), v);
    if (ec != std::errc{} || p != e->value.data() + e->value.size())
      value_fail(*e, "expected an integer");
    return v;
  }

  uint64_t get_uint(const std::string& section, const std::string& key, uint64_t fallback) {
    const ConfigEntry* e = claim(section, key);
    if (!e) return fallback;
    uint64_t v = 0;
    auto [p, ec] = std::from_chars(e->value.data(), e->value.data() + e->value.size(), v);
    if (ec != std::errc{} || p != e->value.data() + e->value.size())
      value_fail(*e, "expected a non-negative integer");
    return v;
  }

  double get_double(const std::string& section, const std::string& key, double fallback) {
    const ConfigEntry* e = claim(section, key);
    if (!e) return fallback;
    double v = 0.0;
    auto [p, ec] = std::from_chars(e->value.data(), e->value.data() + e->value.size(), v);
    if (ec != std::errc{} || p != e->value.data() + e->value.size())
      value_fail(*e, "expected a number");
    return v;
  }

  bool get_bool(const std::string& section, const std::string& key, bool fallback) {
    const ConfigEntry* e = claim(section, key);
    if (!e) return fallback;
    if (e->value == "1" || e->value == "true") return true;
    if (e->value == "0" || e->value == "false") return false;
    value_fail(*e, "expected one of 0/1/true/false");
  }

  // Comma-separated integers; an empty value is an empty list.
  std::vector<double> get_double_list(const std::string& section, const std::string& key,
                                      std::vector<double> fallback) {
    const ConfigEntry* e = claim(section, key);
    if (!e) return fallback;
    std::vector<double> out;
    if (e->value.empty()) return out;
    std::istringstream is(e->value);
    std::string item;
    while (std::getline(is, item, ',')) {
      item = detail::trim(item);
      double v = 0.0;
      auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
      if (ec != std::errc{} || p != item.data() + item.size())
        value_fail(*e, "expected comma-separated numbers");
      out.push_back(v);
    }
    return out;
  }

  std::vector<int64_t> get_int_list(const std::string& section, const std::string& key,
                                    std::vector<int64_t> fallback) {
    const ConfigEntry* e = claim(section, key);
    if (!e) return fallback;
    std::vector<int64_t> out;
    if (e->value.empty()) return out;
    std::istringstream is(e->value);
    std::string item;
    while (std::getline(is, item, ',')) {
      item = detail::trim(item);
      int64_t v = 0;
      auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
      if (ec != std::errc{} || p != item.data() + item.size())
        value_fail(*e, "expected comma-separated integers");
      out.push_back(v);
    }
    return out;
  }

  // Rejects a syntactically valid value on semantic grounds, citing its line.
  [[noreturn]] void reject(const std::string& section, const std::string& key,
                           const std::string& why) const {
    for (const ConfigEntry& e : entries_)
      if (e.section == section && e.key == key) value_fail(e, why);
    throw UsageError("config: " + section + "." + key + ": " + why);
  }

  // Every key must have been claimed by a getter by the time parsing is done.
  void finish() const {
    std::string msg;
    for (size_t i = 0; i < entries_.size(); ++i) {
      if (used_[i]) continue;
      if (!msg.empty()) msg += "; ";
      msg += "line " + std::to_string(entries_[i].line) + ": unknown key '" +
             entries_[i].section + "." + entries_[i].key + "'";
    }
    if (!msg.empty()) throw UsageError("config: " + msg);
  }

 private:
  const ConfigEntry* claim(const std::string& section, const std::string& key) {
    for (size_t i = 0; i < entries_.size(); ++i)
      if (entries_[i].section == section && entries_[i].key == key) {
        used_[i] = true;
        return &entries_[i];
      }
    return nullptr;
  }

  [[noreturn]] static void value_fail(const ConfigEntry& e, const std::string& why) {
    detail::config_fail(e.line, e.section + "." + e.key + ": " + why + ", got '" + e.value + "'");
  }

  std::vector<ConfigEntry> entries_;
  std::vector<bool> used_;
};

// ---------------------------------------------------------------------------
// Pretraining configuration. The desk preset scales the reference recipe
// (batch 100, base lr 0.4, LARS, cosine restarts) down by the linear batch
// ratio: batch 8, lr 0.08, 30 epochs with a restart every 10.
// ---------------------------------------------------------------------------

inline OptimConfig desk_pretrain_optimizer() {
  OptimConfig o;
  o.kind = OptimKind::Lars;
  o.base_lr = 0.08;
  o.momentum = 0.9;
  o.weight_decay = 1e-5;
  o.trust_coefficient = 1e-3;
  o.schedule = LrSchedule::CosineRestarts;
  o.restart_period = 10;
  o.min_lr = 0.0;
  return o;
}

inline OptimConfig desk_downstream_optimizer() {
  OptimConfig o;
  o.kind = OptimKind::SgdMomentum;
  o.base_lr = 1e-2;
  o.momentum = 0.9;
  o.weight_decay = 0.0;
  o.schedule = LrSchedule::Step;
  o.step_factor = 0.1;
  return o;
}

struct PretrainConfig {
  int64_t epochs = 30;
  int64_t batch_size = 8;
  uint64_t seed = 1;
  int64_t retry_limit = 5;  // resamples per view pair before it is skipped
  EncoderConfig encoder = EncoderConfig::desk();
  OptimConfig optimizer = desk_pretrain_optimizer();
  EmaConfig ema{};
  LossConfig loss{};
  AugmentConfig augment{};

  void validate() const {
    if (epochs < 1) throw DataError("PretrainConfig: epochs must be >= 1");
    if (batch_size < 1) throw DataError("PretrainConfig: batch_size must be >= 1");
    if (retry_limit < 0) throw DataError("PretrainConfig: retry_limit must be >= 0");
    encoder.validate();
    optimizer.validate();
    ema.validate();
    loss.validate();
    augment.validate();
  }
};

// Downstream supervised training: SGD with momentum and a two-step decay at
// fixed fractions of the total iteration count.
struct TrainConfig {
  int64_t epochs = 30;
  int64_t batch_size = 4;
  uint64_t seed = 1;
  bool freeze_backbone = false;
  double milestone_frac1 = 0.60;
  double milestone_frac2 = 0.85;
  EncoderConfig encoder = EncoderConfig::desk();
  OptimConfig optimizer = desk_downstream_optimizer();

  void validate() const {
    if (epochs < 1) throw DataError("TrainConfig: epochs must be >= 1");
    if (batch_size < 1) throw DataError("TrainConfig: batch_size must be >= 1");
    if (!(milestone_frac1 > 0.0 && milestone_frac1 < milestone_frac2 && milestone_frac2 < 1.0))
      throw DataError("TrainConfig: milestone fractions must satisfy 0 < f1 < f2 < 1");
    encoder.validate();
    optimizer.validate();
  }
};

namespace detail {

inline EncoderConfig read_encoder(ConfigReader& r) {
  std::string preset = r.get_string("encoder", "preset", "desk");
  if (preset == "desk") return EncoderConfig::desk();
  if (preset == "large") return EncoderConfig::large();
  r.reject("encoder", "preset", "unknown preset (expected desk or large)");
}

inline void read_common_optimizer(ConfigReader& r, OptimConfig& o) {
  o.base_lr = r.get_double("optimizer", "base_lr", o.base_lr);
  o.momentum = r.get_double("optimizer", "momentum", o.momentum);
  o.weight_decay = r.get_double("optimizer", "weight_decay", o.weight_decay);
}

inline std::string optim_kind_name(OptimKind k) {
  return k == OptimKind::Lars ? "lars" : "sgd";
}

inline std::string schedule_name(LrSchedule s) {
  switch (s) {
    case LrSchedule::CosineRestarts: return "cosine-restart";
    case LrSchedule::Step: return "step";
    default: return "constant";
  }
}

inline std::string join_int_list(const std::vector<int64_t>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

}  // namespace detail

inline PretrainConfig pretrain_config_from(ConfigReader& r) {
  PretrainConfig c;
  c.epochs = r.get_int("run", "epochs", c.epochs);
  c.batch_size = r.get_int("run", "batch_size", c.batch_size);
  c.seed = r.get_uint("run", "seed", c.seed);
  c.retry_limit = r.get_int("run", "retry_limit", c.retry_limit);
  c.encoder = detail::read_encoder(r);

  std::string kind = r.get_string("optimizer", "kind", detail::optim_kind_name(c.optimizer.kind));
  if (kind == "sgd") c.optimizer.kind = OptimKind::SgdMomentum;
  else if (kind == "lars") c.optimizer.kind = OptimKind::Lars;
  else r.reject("optimizer", "kind", "unknown optimizer (expected sgd or lars)");
  detail::read_common_optimizer(r, c.optimizer);
  c.optimizer.trust_coefficient =
      r.get_double("optimizer", "trust_coefficient", c.optimizer.trust_coefficient);
  std::string sched =
      r.get_string("optimizer", "schedule", detail::schedule_name(c.optimizer.schedule));
  if (sched == "cosine-restart") c.optimizer.schedule = LrSchedule::CosineRestarts;
  else if (sched == "step") c.optimizer.schedule = LrSchedule::Step;
  else if (sched == "constant") c.optimizer.schedule = LrSchedule::Constant;
  else r.reject("optimizer", "schedule", "unknown schedule (expected cosine-restart, step or constant)");
  c.optimizer.restart_period = r.get_int("optimizer", "restart_period", c.optimizer.restart_period);
  c.optimizer.step_milestones =
      r.get_int_list("optimizer", "step_milestones", c.optimizer.step_milestones);
  c.optimizer.step_factor = r.get_double("optimizer", "step_factor", c.optimizer.step_factor);
  c.optimizer.min_lr = r.get_double("optimizer", "min_lr", c.optimizer.min_lr);

  c.ema.beta = r.get_double("ema", "beta", c.ema.beta);
  c.loss.tau = r.get_double("loss", "tau", c.loss.tau);
  c.loss.alpha = r.get_double("loss", "alpha", c.loss.alpha);
  c.loss.positive_ratio = r.get_double("loss", "positive_ratio", c.loss.positive_ratio);

  AugmentConfig& a = c.augment;
  a.out_h = r.get_int("augment", "out_h", a.out_h);
  a.out_w = r.get_int("augment", "out_w", a.out_w);
  a.crop_scale_min = r.get_double("augment", "crop_scale_min", a.crop_scale_min);
  a.crop_scale_max = r.get_double("augment", "crop_scale_max", a.crop_scale_max);
  a.aspect_min = r.get_double("augment", "aspect_min", a.aspect_min);
  a.aspect_max = r.get_double("augment", "aspect_max", a.aspect_max);
  a.flip_prob = r.get_double("augment", "flip_prob", a.flip_prob);
  a.color_jitter_prob = r.get_double("augment", "color_jitter_prob", a.color_jitter_prob);
  a.jitter_brightness = r.get_double("augment", "jitter_brightness", a.jitter_brightness);
  a.jitter_contrast = r.get_double("augment", "jitter_contrast", a.jitter_contrast);
  a.jitter_saturation = r.get_double("augment", "jitter_saturation", a.jitter_saturation);
  a.jitter_hue = r.get_double("augment", "jitter_hue", a.jitter_hue);
  a.grayscale_prob = r.get_double("augment", "grayscale_prob", a.grayscale_prob);
  a.solarize_prob = r.get_double("augment", "solarize_prob", a.solarize_prob);
  a.solarize_threshold = r.get_double("augment", "solarize_threshold", a.solarize_threshold);

  r.finish();
  c.validate();
  return c;
}

inline TrainConfig train_config_from(ConfigReader& r) {
  TrainConfig c;
  c.epochs = r.get_int("run", "epochs", c.epochs);
  c.batch_size = r.get_int("run", "batch_size", c.batch_size);
  c.seed = r.get_uint("run", "seed", c.seed);
  c.freeze_backbone = r.get_bool("run", "freeze_backbone", c.freeze_backbone);
  c.encoder = detail::read_encoder(r);
  detail::read_common_optimizer(r, c.optimizer);
  c.optimizer.step_factor = r.get_double("optimizer", "step_factor", c.optimizer.step_factor);
  c.milestone_frac1 = r.get_double("optimizer", "milestone_frac1", c.milestone_frac1);
  c.milestone_frac2 = r.get_double("optimizer", "milestone_frac2", c.milestone_frac2);
  r.finish();
  c.validate();
  return c;
}

inline PretrainConfig parse_pretrain_config(const std::string& text) {
  ConfigReader r = ConfigReader::from_text(text);
  return pretrain_config_from(r);
}

inline PretrainConfig load_pretrain_config(const std::string& path) {
  ConfigReader r = ConfigReader::from_file(path);
  return pretrain_config_from(r);
}

inline TrainConfig parse_train_config(const std::string& text) {
  ConfigReader r = ConfigReader::from_text(text);
  return train_config_from(r);
}

inline TrainConfig load_train_config(const std::string& path) {
  ConfigReader r = ConfigReader::from_file(path);
  return train_config_from(r);
}

// ---------------------------------------------------------------------------
// Resolved-config echoes. Histories and reports embed these so a result file
// names every knob that produced it.
// ---------------------------------------------------------------------------

using ConfigEcho = std::vector<std::pair<std::string, std::string>>;

inline void describe_encoder(const EncoderConfig& e, ConfigEcho& out) {
  out.emplace_back("encoder.stages", detail::join_int_list(e.stage_channels));
  out.emplace_back("encoder.blocks", detail::join_int_list(e.blocks_per_stage));
  out.emplace_back("encoder.output_stride", std::to_string(e.output_stride));
  out.emplace_back("encoder.proj_hidden", std::to_string(e.proj_hidden));
  out.emplace_back("encoder.proj_out", std::to_string(e.proj_out));
}

inline ConfigEcho describe(const PretrainConfig& c) {
  ConfigEcho out;
  out.emplace_back("run.epochs", std::to_string(c.epochs));
  out.emplace_back("run.batch_size", std::to_string(c.batch_size));
  out.emplace_back("run.seed", std::to_string(c.seed));
  out.emplace_back("run.retry_limit", std::to_string(c.retry_limit));
  describe_encoder(c.encoder, out);
  out.emplace_back("optimizer.kind", detail::optim_kind_name(c.optimizer.kind));
  out.emplace_back("optimizer.base_lr", detail::fmt_double(c.optimizer.base_lr));
  out.emplace_back("optimizer.momentum", detail::fmt_double(c.optimizer.momentum));
  out.emplace_back("optimizer.weight_decay", detail::fmt_double(c.optimizer.weight_decay));
  out.emplace_back("optimizer.trust_coefficient",
                   detail::fmt_double(c.optimizer.trust_coefficient));
  out.emplace_back("optimizer.schedule", detail::schedule_name(c.optimizer.schedule));
  out.emplace_back("optimizer.restart_period", std::to_string(c.optimizer.restart_period));
  out.emplace_back("optimizer.step_milestones",
                   detail::join_int_list(c.optimizer.step_milestones));
  out.emplace_back("optimizer.step_factor", detail::fmt_double(c.optimizer.step_factor));
  out.emplace_back("optimizer.min_lr", detail::fmt_double(c.optimizer.min_lr));
  out.emplace_back("ema.beta", detail::fmt_double(c.ema.beta));
  out.emplace_back("loss.tau", detail::fmt_double(c.loss.tau));
  out.emplace_back("loss.alpha", detail::fmt_double(c.loss.alpha));
  out.emplace_back("loss.positive_ratio", detail::fmt_double(c.loss.positive_ratio));
  const AugmentConfig& a = c.augment;
  out.emplace_back("augment.out_h", std::to_string(a.out_h));
  out.emplace_back("augment.out_w", std::to_string(a.out_w));
  out.emplace_back("augment.crop_scale_min", detail::fmt_double(a.crop_scale_min));
  out.emplace_back("augment.crop_scale_max", detail::fmt_double(a.crop_scale_max));
  out.emplace_back("augment.aspect_min", detail::fmt_double(a.aspect_min));
  out.emplace_back("augment.aspect_max", detail::fmt_double(a.aspect_max));
  out.emplace_back("augment.flip_prob", detail::fmt_double(a.flip_prob));
  out.emplace_back("augment.color_jitter_prob", detail::fmt_double(a.color_jitter_prob));
  out.emplace_back("augment.jitter_brightness", detail::fmt_double(a.jitter_brightness));
  out.emplace_back("augment.jitter_contrast", detail::fmt_double(a.jitter_contrast));
  out.emplace_back("augment.jitter_saturation", detail::fmt_double(a.jitter_saturation));
  out.emplace_back("augment.jitter_hue", detail::fmt_double(a.jitter_hue));
  out.emplace_back("augment.grayscale_prob", detail::fmt_double(a.grayscale_prob));
  out.emplace_back("augment.solarize_prob", detail::fmt_double(a.solarize_prob));
  out.emplace_back("augment.solarize_threshold", detail::fmt_double(a.solarize_threshold));
  const char* axes[] = {"r", "g", "b"};
  for (size_t i = 0; i < 3; ++i) {
    out.emplace_back(std::string("augment.norm_mean_") + axes[i],
                     detail::fmt_double(a.norm_mean[i]));
    out.emplace_back(std::string("augment.norm_std_") + axes[i],
                     detail::fmt_double(a.norm_std[i]));
  }
  return out;
}

inline ConfigEcho describe(const TrainConfig& c) {
  ConfigEcho out;
  out.emplace_back("run.epochs", std::to_string(c.epochs));
  out.emplace_back("run.batch_size", std::to_string(c.batch_size));
  out.emplace_back("run.seed", std::to_string(c.seed));
  out.emplace_back("run.freeze_backbone", c.freeze_backbone ? "1" : "0");
  describe_encoder(c.encoder, out);
  out.emplace_back("optimizer.base_lr", detail::fmt_double(c.optimizer.base_lr));
  out.emplace_back("optimizer.momentum", detail::fmt_double(c.optimizer.momentum));
  out.emplace_back("optimizer.weight_decay", detail::fmt_double(c.optimizer.weight_decay));
  out.emplace_back("optimizer.step_factor", detail::fmt_double(c.optimizer.step_factor));
  out.emplace_back("optimizer.milestone_frac1", detail::fmt_double(c.milestone_frac1));
  out.emplace_back("optimizer.milestone_frac2", detail::fmt_double(c.milestone_frac2));
  return out;
}

}  // namespace panopix
