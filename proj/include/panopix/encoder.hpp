#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "panopix/common.hpp"
#include "panopix/tape.hpp"
#include "panopix/tensor.hpp"

// Small residual encoder with a two-layer projection head and a single-conv
// propagation head, plus an exact-copy momentum twin. Forward passes build
// autodiff graphs on a caller-owned tape; the momentum twin is forwarded with
// trainable=false so it never receives gradients.

namespace panopix {

struct EncoderConfig {
  std::vector<int64_t> stage_channels;
  std::vector<int64_t> blocks_per_stage;
  int64_t output_stride = 4;
  int64_t proj_hidden = 128;
  int64_t proj_out = 64;

  bool operator==(const EncoderConfig&) const = default;

  static EncoderConfig desk() { return {{16, 32, 64}, {1, 1, 1}, 4, 128, 64}; }
  // Full-scale preset; kept for completeness, far too slow for unit tests.
  static EncoderConfig large() { return {{64, 128, 256, 512}, {2, 2, 2, 2}, 8, 2048, 256}; }

  int64_t feature_channels() const { return stage_channels.back(); }

  void validate() const {
    if (stage_channels.empty() || stage_channels.size() != blocks_per_stage.size())
      throw DataError("EncoderConfig: stage lists must be non-empty and equal length");
    for (int64_t c : stage_channels)
      if (c < 1) throw DataError("EncoderConfig: channels must be positive");
    for (int64_t b : blocks_per_stage)
      if (b < 1) throw DataError("EncoderConfig: block counts must be positive");
    if (output_stride != 4 && output_stride != 8)
      throw DataError("EncoderConfig: output stride must be 4 or 8");
    if (output_stride == 8 && stage_channels.size() < 2)
      throw DataError("EncoderConfig: output stride 8 needs at least two stages");
    if (proj_hidden < 1 || proj_out < 1)
      throw DataError("EncoderConfig: projection dims must be positive");
  }
};

// Trainable tensors and batch-norm running statistics, addressed by path.
// Paths under "backbone." form the transferable part; "proj." and "gprop."
// are pretraining-only heads.
template <typename T>
struct NetworkParams {
  std::map<std::string, Tensor<T>> tensors;
  std::map<std::string, Tensor<T>> stats;

  Tensor<T>& tensor(const std::string& path) {
    auto it = tensors.find(path);
    if (it == tensors.end()) throw DataError("missing parameter: " + path);
    return it->second;
  }
  const Tensor<T>& tensor(const std::string& path) const {
    auto it = tensors.find(path);
    if (it == tensors.end()) throw DataError("missing parameter: " + path);
    return it->second;
  }
  Tensor<T>& stat(const std::string& path) {
    auto it = stats.find(path);
    if (it == stats.end()) throw DataError("missing running stat: " + path);
    return it->second;
  }
  const Tensor<T>& stat(const std::string& path) const {
    auto it = stats.find(path);
    if (it == stats.end()) throw DataError("missing running stat: " + path);
    return it->second;
  }
};

inline bool is_backbone_path(const std::string& path) { return path.rfind("backbone.", 0) == 0; }

// Bias and batch-norm scale/shift: excluded from weight decay and trust-ratio
// scaling by the optimizer.
inline bool is_no_decay_path(const std::string& path) {
  auto ends_with = [&](const char* s) {
    std::string suf(s);
    return path.size() >= suf.size() && path.compare(path.size() - suf.size(), suf.size(), suf) == 0;
  };
  return ends_with(".bias") || ends_with(".gamma") || ends_with(".beta");
}

template <typename T>
NetworkParams<T> clone_to_momentum(const NetworkParams<T>& online) {
  return online;  // map copies are deep
}

template <typename T>
class Encoder {
 public:
  // Tape node of each parameter used in the forwards sharing this cache.
  // Reusing the cache across forwards on one tape makes every pass read the
  // same leaf, so gradients from all uses accumulate on one node.
  struct Bound {
    std::map<std::string, int> nodes;

    int node(const std::string& path) const {
      auto it = nodes.find(path);
      if (it == nodes.end()) throw DataError("parameter not bound: " + path);
      return it->second;
    }
  };

  struct ParamSpec {
    std::string path;
    std::vector<int64_t> shape;
    bool he_init;  // conv weights; everything else initializes to a constant
  };

  explicit Encoder(EncoderConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

  const EncoderConfig& config() const { return cfg_; }

  std::vector<ParamSpec> parameter_specs() const {
    std::vector<ParamSpec> out;
    auto bn = [&](const std::string& prefix, int64_t c) {
      out.push_back({prefix + ".gamma", {c}, false});
      out.push_back({prefix + ".beta", {c}, false});
    };
    int64_t c0 = cfg_.stage_channels[0];
    out.push_back({"backbone.stem.conv.weight", {c0, 3, 3, 3}, true});
    bn("backbone.stem.bn", c0);
    int64_t in = c0;
    for (size_t s = 0; s < cfg_.stage_channels.size(); ++s) {
      int64_t ch = cfg_.stage_channels[s];
      for (int64_t b = 0; b < cfg_.blocks_per_stage[s]; ++b) {
        std::string p = block_prefix(s, b);
        out.push_back({p + ".conv1.weight", {ch, in, 3, 3}, true});
        bn(p + ".bn1", ch);
        out.push_back({p + ".conv2.weight", {ch, ch, 3, 3}, true});
        bn(p + ".bn2", ch);
        if (block_projects(s, b, in)) {
          out.push_back({p + ".shortcut.conv.weight", {ch, in, 1, 1}, true});
          bn(p + ".shortcut.bn", ch);
        }
        in = ch;
      }
    }
    int64_t c = cfg_.feature_channels();
    out.push_back({"proj.conv1.weight", {cfg_.proj_hidden, c, 1, 1}, true});
    bn("proj.bn", cfg_.proj_hidden);
    out.push_back({"proj.conv2.weight", {cfg_.proj_out, cfg_.proj_hidden, 1, 1}, true});
    out.push_back({"proj.conv2.bias", {cfg_.proj_out}, false});
    out.push_back({"gprop.conv.weight", {cfg_.proj_out, cfg_.proj_out, 1, 1}, true});
    out.push_back({"gprop.conv.bias", {cfg_.proj_out}, false});
    return out;
  }

  // Batch-norm prefixes and their channel counts, in spec order.
  std::vector<std::pair<std::string, int64_t>> stat_specs() const {
    std::vector<std::pair<std::string, int64_t>> out;
    for (const ParamSpec& ps : parameter_specs())
      if (ps.path.size() > 6 && ps.path.compare(ps.path.size() - 6, 6, ".gamma") == 0)
        out.emplace_back(ps.path.substr(0, ps.path.size() - 6), ps.shape[0]);
    return out;
  }

  NetworkParams<T> init(Rng& rng) const {
    NetworkParams<T> p;
    for (const ParamSpec& ps : parameter_specs()) {
      Tensor<T> t(ps.shape);
      if (ps.he_init) {
        int64_t fan_in = 1;
        for (size_t d = 1; d < ps.shape.size(); ++d) fan_in *= ps.shape[d];
        double std = std::sqrt(2.0 / static_cast<double>(fan_in));
        for (auto& v : t.data) v = static_cast<T>(rng.normal(0.0, std));
      } else if (ps.path.size() > 6 && ps.path.compare(ps.path.size() - 6, 6, ".gamma") == 0) {
        t.fill(T(1));
      }  // beta and bias stay zero
      p.tensors.emplace(ps.path, std::move(t));
    }
    for (const auto& [prefix, c] : stat_specs()) {
      p.stats.emplace(prefix + ".running_mean", Tensor<T>({c}));
      p.stats.emplace(prefix + ".running_var", Tensor<T>({c}, T(1)));
    }
    return p;
  }

  int forward_features(Tape<T>& tape, NetworkParams<T>& params, int input, detail::BnMode mode,
                       bool trainable, Bound* bound) const {
    const Tensor<T>& X = tape.value(input);
    if (X.ndim() != 4 || X.dim(1) != 3)
      throw ShapeError("forward_features: expects [N,3,H,W], got " + X.shape_str());
    if (X.dim(2) % cfg_.output_stride != 0 || X.dim(3) % cfg_.output_stride != 0)
      throw ShapeError("forward_features: spatial dims " + X.shape_str() +
                       " not divisible by output stride " + std::to_string(cfg_.output_stride));
    int x = conv_bn(tape, params, input, "backbone.stem", 2, 1, mode, trainable, bound);
    x = tape.relu(x);
    int64_t in = cfg_.stage_channels[0];
    int64_t stride_left = cfg_.output_stride / 2;
    for (size_t s = 0; s < cfg_.stage_channels.size(); ++s) {
      int64_t first_stride = 1;
      if (stride_left > 1) {
        first_stride = 2;
        stride_left /= 2;
      }
      for (int64_t b = 0; b < cfg_.blocks_per_stage[s]; ++b) {
        x = residual_block(tape, params, x, s, b, in, b == 0 ? first_stride : 1, mode, trainable,
                           bound);
        in = cfg_.stage_channels[s];
      }
    }
    return x;
  }

  int project(Tape<T>& tape, NetworkParams<T>& params, int features, detail::BnMode mode,
              bool trainable, Bound* bound) const {
    check_channels(tape.value(features), cfg_.feature_channels(), "project");
    int w1 = param_node(tape, params, "proj.conv1.weight", trainable, bound);
    int x = tape.conv2d(features, w1, 1, 0);
    x = batch_norm(tape, params, x, "proj.bn", mode, trainable, bound);
    x = tape.relu(x);
    int w2 = param_node(tape, params, "proj.conv2.weight", trainable, bound);
    x = tape.conv2d(x, w2, 1, 0);
    return tape.add_channel_bias(x, param_node(tape, params, "proj.conv2.bias", trainable, bound));
  }

  // Applies to projected embeddings, not raw backbone features: the smoothing
  // of the global term happens in the same space the cosine affinities use.
  int propagate_head_g(Tape<T>& tape, NetworkParams<T>& params, int features, bool trainable,
                       Bound* bound) const {
    check_channels(tape.value(features), cfg_.proj_out, "propagate_head_g");
    int w = param_node(tape, params, "gprop.conv.weight", trainable, bound);
    int x = tape.conv2d(features, w, 1, 0);
    return tape.add_channel_bias(x, param_node(tape, params, "gprop.conv.bias", trainable, bound));
  }

 private:
  EncoderConfig cfg_;

  static std::string block_prefix(size_t stage, int64_t block) {
    return "backbone.stage" + std::to_string(stage) + ".block" + std::to_string(block);
  }

  bool block_projects(size_t stage, int64_t block, int64_t in_channels) const {
    if (block != 0) return false;
    bool strided = false;
    int64_t stride_left = cfg_.output_stride / 2;
    for (size_t s = 0; s <= stage; ++s) {
      strided = stride_left > 1;
      if (stride_left > 1) stride_left /= 2;
    }
    return strided || in_channels != cfg_.stage_channels[stage];
  }

  static void check_channels(const Tensor<T>& x, int64_t want, const char* who) {
    if (x.ndim() != 4 || x.dim(1) != want)
      throw ShapeError(std::string(who) + ": expects " + std::to_string(want) + " channels, got " +
                       x.shape_str());
  }

  int param_node(Tape<T>& tape, NetworkParams<T>& params, const std::string& path, bool trainable,
                 Bound* bound) const {
    if (bound != nullptr) {
      auto it = bound->nodes.find(path);
      if (it != bound->nodes.end()) return it->second;
    }
    int id = tape.leaf(params.tensor(path), trainable);
    if (bound != nullptr) bound->nodes.emplace(path, id);
    return id;
  }

  int batch_norm(Tape<T>& tape, NetworkParams<T>& params, int x, const std::string& prefix,
                 detail::BnMode mode, bool trainable, Bound* bound) const {
    int gamma = param_node(tape, params, prefix + ".gamma", trainable, bound);
    int beta = param_node(tape, params, prefix + ".beta", trainable, bound);
    return tape.batch_norm(x, gamma, beta, mode, &params.stat(prefix + ".running_mean"),
                           &params.stat(prefix + ".running_var"));
  }

  int conv_bn(Tape<T>& tape, NetworkParams<T>& params, int x, const std::string& prefix,
              int64_t stride, int64_t pad, detail::BnMode mode, bool trainable,
              Bound* bound) const {
    int w = param_node(tape, params, prefix + ".conv.weight", trainable, bound);
    int y = tape.conv2d(x, w, stride, pad);
    return batch_norm(tape, params, y, prefix + ".bn", mode, trainable, bound);
  }

  int residual_block(Tape<T>& tape, NetworkParams<T>& params, int x, size_t stage, int64_t block,
                     int64_t in_channels, int64_t stride, detail::BnMode mode, bool trainable,
                     Bound* bound) const {
    std::string p = block_prefix(stage, block);
    int w1 = param_node(tape, params, p + ".conv1.weight", trainable, bound);
    int y = tape.conv2d(x, w1, stride, 1);
    y = batch_norm(tape, params, y, p + ".bn1", mode, trainable, bound);
    y = tape.relu(y);
    int w2 = param_node(tape, params, p + ".conv2.weight", trainable, bound);
    y = tape.conv2d(y, w2, 1, 1);
    y = batch_norm(tape, params, y, p + ".bn2", mode, trainable, bound);
    int shortcut = x;
    if (block_projects(stage, block, in_channels)) {
      int ws = param_node(tape, params, p + ".shortcut.conv.weight", trainable, bound);
      shortcut = tape.conv2d(x, ws, stride, 0);
      shortcut = batch_norm(tape, params, shortcut, p + ".shortcut.bn", mode, trainable, bound);
    }
    return tape.relu(tape.add(y, shortcut));
  }
};

}  // namespace panopix
