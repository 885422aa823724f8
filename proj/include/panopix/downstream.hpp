#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "panopix/checkpoint.hpp"
#include "panopix/common.hpp"
#include "panopix/config.hpp"
#include "panopix/dataset.hpp"
#include "panopix/encoder.hpp"
#include "panopix/optim.hpp"
#include "panopix/panoptic.hpp"
#include "panopix/report.hpp"
#include "panopix/tape.hpp"
#include "panopix/tensor.hpp"

// Supervised phase: a per-pixel classifier head on the (optionally pretrained)
// backbone, trained with cross entropy and evaluated as panoptic predictions
// via connected-component instancing plus fusion.

namespace panopix {

struct SegHeadConfig {
  int64_t num_classes = 0;
  int64_t upsample = 4;  // factor back to input resolution; the encoder output stride

  void validate(const ClassTable& table) const {
    if (num_classes != static_cast<int64_t>(table.classes.size()))
      throw DataError("SegHeadConfig: " + std::to_string(num_classes) +
                      " classes for a table of " + std::to_string(table.classes.size()));
    if (upsample < 1) throw DataError("SegHeadConfig: upsample must be >= 1");
  }
};

// A trained downstream model: backbone tensors and running statistics plus the
// 1x1 classifier head, with the encoder geometry that shaped them.
template <typename T>
struct SegModel {
  EncoderConfig encoder;
  int64_t num_classes = 0;
  NetworkParams<T> params;

  SegHeadConfig head() const { return {num_classes, encoder.output_stride}; }
};

// Logits at input resolution: 1x1 classifier over backbone features, then
// bilinear upsampling. Head leaves land in the bound next to the backbone's so
// gradient collection is uniform across paths.
template <typename T>
int seg_forward(Tape<T>& tape, const Encoder<T>& enc, NetworkParams<T>& params,
                const SegHeadConfig& head, int input, detail::BnMode bn_mode,
                bool backbone_trainable, bool head_trainable,
                typename Encoder<T>::Bound* bound) {
  if (head.upsample != enc.config().output_stride)
    throw DataError("seg_forward: upsample factor " + std::to_string(head.upsample) +
                    " does not match output stride " + std::to_string(enc.config().output_stride));
  const Tensor<T>& w = params.tensor("head.conv.weight");
  if (w.ndim() != 4 || w.dim(0) != head.num_classes ||
      w.dim(1) != enc.config().feature_channels() || w.dim(2) != 1 || w.dim(3) != 1)
    throw ShapeError("seg_forward: head weight " + w.shape_str() + " does not classify " +
                     std::to_string(enc.config().feature_channels()) + " channels into " +
                     std::to_string(head.num_classes) + " classes");
  int features = enc.forward_features(tape, params, input, bn_mode, backbone_trainable, bound);
  auto head_node = [&](const std::string& path, const Tensor<T>& t) {
    if (bound) {
      auto it = bound->nodes.find(path);
      if (it != bound->nodes.end()) return it->second;
    }
    int id = tape.leaf(t, head_trainable);
    if (bound) bound->nodes[path] = id;
    return id;
  };
  int wn = head_node("head.conv.weight", w);
  int bn = head_node("head.conv.bias", params.tensor("head.conv.bias"));
  int logits = tape.add_channel_bias(tape.conv2d(features, wn, 1, 0), bn);
  return tape.upsample_bilinear(logits, head.upsample);
}

// Mean softmax cross entropy over non-void pixels. The map carries class ids;
// id 0 is void and drops out of the mean.
template <typename T>
int cross_entropy_loss(Tape<T>& tape, int logits, const std::vector<int32_t>& class_ids,
                       const ClassTable& table) {
  const Tensor<T>& L = tape.value(logits);
  if (L.ndim() != 4) throw ShapeError("cross_entropy_loss: expects [N,C,H,W] logits");
  if (L.dim(1) != static_cast<int64_t>(table.classes.size()))
    throw ShapeError("cross_entropy_loss: " + std::to_string(L.dim(1)) +
                     " channels for a table of " + std::to_string(table.classes.size()));
  std::vector<int32_t> channels(class_ids.size());
  for (size_t i = 0; i < class_ids.size(); ++i) {
    int32_t id = class_ids[i];
    if (id == 0) {
      channels[i] = -1;
      continue;
    }
    int32_t ch = -1;
    for (size_t c = 0; c < table.classes.size(); ++c)
      if (table.classes[c].id == id) {
        ch = static_cast<int32_t>(c);
        break;
      }
    if (ch < 0) throw DataError("cross_entropy_loss: unknown class id " + std::to_string(id));
    channels[i] = ch;
  }
  return tape.softmax_cross_entropy(logits, channels);
}

namespace detail {

template <typename T>
void write_normalized(const Image& img, const std::array<double, 3>& mean,
                      const std::array<double, 3>& sd, int64_t slot, Tensor<T>& dst) {
  const int64_t H = dst.dim(2), W = dst.dim(3);
  if (img.height != H || img.width != W)
    throw ShapeError("batch: image " + std::to_string(img.id) + " is " +
                     std::to_string(img.height) + "x" + std::to_string(img.width) +
                     ", batch wants " + std::to_string(H) + "x" + std::to_string(W));
  for (int64_t c = 0; c < 3; ++c) {
    if (!(sd[static_cast<size_t>(c)] > 0.0))
      throw DataError("batch: channel std must be positive");
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x)
        dst.data[static_cast<size_t>((((slot * 3 + c) * H) + y) * W + x)] = static_cast<T>(
            (static_cast<double>(img.at(c, y, x)) - mean[static_cast<size_t>(c)]) /
            sd[static_cast<size_t>(c)]);
  }
}

inline void require_same_encoder(const EncoderConfig& have, const EncoderConfig& want,
                                 const char* who) {
  if (have == want) return;
  auto fmt = [](const EncoderConfig& c) {
    std::ostringstream os;
    os << "stages " << join_i64(c.stage_channels) << ", blocks " << join_i64(c.blocks_per_stage)
       << ", stride " << c.output_stride << ", proj " << c.proj_hidden << "/" << c.proj_out;
    return os.str();
  };
  throw DataError(std::string(who) + ": checkpoint encoder (" + fmt(have) +
                  ") does not match the configured encoder (" + fmt(want) + ")");
}

// Steps only the named tensors. Nodes are moved out of the params map and
// back, so untouched tensors never leave their storage.
template <typename T>
void step_paths(NetworkParams<T>& params, const std::vector<std::string>& paths,
                const std::map<std::string, Tensor<T>>& grads, OptimState<T>& state,
                const OptimConfig& o, double lr) {
  std::map<std::string, Tensor<T>> sub;
  for (const std::string& p : paths) {
    auto node = params.tensors.extract(p);
    if (node.empty()) throw DataError("step: missing parameter " + p);
    sub.insert(std::move(node));
  }
  optimizer_step(o, lr, sub, grads, state);
  while (!sub.empty()) params.tensors.insert(sub.extract(sub.begin()));
}

}  // namespace detail

// Fresh downstream model. The backbone (and its running statistics) come from
// the checkpoint when one is given; the head is always drawn from the seed, so
// two inits with the same seed differ only in the backbone they start from.
template <typename T>
SegModel<T> init_seg_model(const TrainConfig& cfg, const ClassTable& table,
                           const Checkpoint<T>* init = nullptr) {
  cfg.validate();
  Encoder<T> enc(cfg.encoder);
  SegModel<T> m;
  m.encoder = cfg.encoder;
  m.num_classes = static_cast<int64_t>(table.classes.size());
  m.head().validate(table);

  Rng rng(hash_seed({cfg.seed, 0x5e9ull}));
  NetworkParams<T> full = enc.init(rng);
  for (auto& [path, t] : full.tensors)
    if (is_backbone_path(path)) m.params.tensors.emplace(path, std::move(t));
  for (auto& [path, t] : full.stats)
    if (is_backbone_path(path)) m.params.stats.emplace(path, std::move(t));

  const int64_t F = cfg.encoder.feature_channels();
  Tensor<T> hw({m.num_classes, F, 1, 1});
  const double sd = std::sqrt(2.0 / static_cast<double>(F));
  for (T& v : hw.data) v = static_cast<T>(rng.normal(0.0, sd));
  m.params.tensors.emplace("head.conv.weight", std::move(hw));
  m.params.tensors.emplace("head.conv.bias", Tensor<T>({m.num_classes}));

  if (init != nullptr) {
    detail::require_same_encoder(init->config, cfg.encoder, "init_seg_model");
    for (auto& [path, t] : m.params.tensors) {
      if (!is_backbone_path(path)) continue;
      const Tensor<T>& src = init->params.tensor(path);
      if (src.shape != t.shape)
        throw DataError("init_seg_model: checkpoint tensor " + path + " has shape " +
                        src.shape_str() + ", expected " + t.shape_str());
      t = src;
    }
    for (auto& [path, t] : m.params.stats) {
      const Tensor<T>& src = init->params.stat(path);
      if (src.shape != t.shape)
        throw DataError("init_seg_model: checkpoint stat " + path + " has shape " +
                        src.shape_str() + ", expected " + t.shape_str());
      t = src;
    }
  }
  return m;
}

template <typename T>
struct TrainOutcome {
  SegModel<T> model;
  History history;
};

// Supervised training with SGD and a two-milestone step schedule placed at
// fixed fractions of the total step count (clamped to stay strictly ascending
// on tiny runs). A frozen backbone runs in eval-mode normalization and takes
// no gradients, so only head tensors can change.
template <typename T>
TrainOutcome<T> train_downstream(const Dataset& ds, const TrainConfig& cfg,
                                 const Checkpoint<T>* init = nullptr) {
  cfg.validate();
  if (ds.size() == 0) throw DataError("train_downstream: empty dataset");

  TrainOutcome<T> out;
  out.model = init_seg_model<T>(cfg, ds.classes, init);
  Encoder<T> enc(cfg.encoder);
  const SegHeadConfig head = out.model.head();

  const int64_t n = ds.size();
  std::vector<ScenePair> pairs;
  pairs.reserve(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) pairs.push_back(load_pair(ds, i));
  const int64_t H = pairs[0].image.height, W = pairs[0].image.width;
  if (H % cfg.encoder.output_stride != 0 || W % cfg.encoder.output_stride != 0)
    throw DataError("train_downstream: image size " + std::to_string(H) + "x" +
                    std::to_string(W) + " is not divisible by the output stride");

  const int64_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const int64_t total_steps = steps_per_epoch * cfg.epochs;
  const int64_t m1 = std::max<int64_t>(
      1, static_cast<int64_t>(cfg.milestone_frac1 * static_cast<double>(total_steps)));
  const int64_t m2 = std::max<int64_t>(
      m1 + 1, static_cast<int64_t>(cfg.milestone_frac2 * static_cast<double>(total_steps)));
  const std::vector<int64_t> milestones{m1, m2};

  std::vector<std::string> trainable;
  for (const auto& [path, t] : out.model.params.tensors)
    if (!(cfg.freeze_backbone && is_backbone_path(path))) trainable.push_back(path);

  OptimState<T> state;
  Rng order_rng(hash_seed({cfg.seed, 0x0bdeull}));
  const detail::BnMode bn_mode = cfg.freeze_backbone ? detail::BnMode::Eval : detail::BnMode::Train;

  out.history.kind = "train";
  out.history.config = describe(cfg);
  out.history.columns = {"loss", "lr"};

  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  int64_t t = 0;
  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    order_rng.shuffle(order);
    double loss_sum = 0.0;
    double lr_last = cfg.optimizer.base_lr;
    int64_t batches = 0;
    for (int64_t start = 0; start < n; start += cfg.batch_size) {
      const int64_t b = std::min(cfg.batch_size, n - start);
      Tensor<T> input({b, 3, H, W});
      std::vector<int32_t> labels(static_cast<size_t>(b * H * W));
      for (int64_t s = 0; s < b; ++s) {
        const ScenePair& p = pairs[static_cast<size_t>(order[static_cast<size_t>(start + s)])];
        detail::write_normalized(p.image, ds.channel_mean, ds.channel_std, s, input);
        std::vector<int32_t> sem = p.gt.semantic();
        std::copy(sem.begin(), sem.end(), labels.begin() + static_cast<int64_t>(s * H * W));
      }
      Tape<T> tape;
      typename Encoder<T>::Bound bound;
      int x = tape.leaf(std::move(input), false);
      int logits =
          seg_forward(tape, enc, out.model.params, head, x, bn_mode, !cfg.freeze_backbone,
                      true, &bound);
      int loss = cross_entropy_loss(tape, logits, labels, ds.classes);
      const double lv = static_cast<double>(tape.value(loss)[0]);
      if (!std::isfinite(lv)) throw NumericError("train_downstream: non-finite loss");
      tape.backward(loss);
      std::map<std::string, Tensor<T>> grads;
      for (const std::string& path : trainable) grads.emplace(path, tape.grad(bound.node(path)));
      const double lr =
          step_schedule_lr(cfg.optimizer.base_lr, t, milestones, cfg.optimizer.step_factor);
      detail::step_paths(out.model.params, trainable, grads, state, cfg.optimizer, lr);
      loss_sum += lv;
      lr_last = lr;
      ++batches;
      ++t;
    }
    out.history.rows.push_back({loss_sum / static_cast<double>(batches), lr_last});
  }
  return out;
}

namespace detail {

// Shared evaluation walk: per image, obtain class probabilities [C,H,W], take
// the panoptic route (argmax -> components -> fusion -> matching) and pool the
// semantic IoU counts over all images.
template <typename ProbsFn>
EvalReport evaluate_core(const Dataset& ds, const FusionConfig& fusion, ProbsFn&& probs_of) {
  if (ds.size() == 0) throw DataError("evaluate_panoptic: empty dataset");
  const ClassTable& table = ds.classes;
  PQStats stats;
  std::vector<int32_t> all_pred, all_gt;
  for (int64_t i = 0; i < ds.size(); ++i) {
    ScenePair pair = load_pair(ds, i);
    const int64_t H = pair.image.height, W = pair.image.width;
    Tensor<float> probs = probs_of(pair, i);
    if (probs.ndim() != 3 || probs.dim(0) != static_cast<int64_t>(table.classes.size()) ||
        probs.dim(1) != H || probs.dim(2) != W)
      throw ShapeError("evaluate_panoptic: probability tensor " + probs.shape_str() +
                       " does not match the scene");
    std::vector<int32_t> classes(static_cast<size_t>(H * W));
    for (int64_t p = 0; p < H * W; ++p) {
      int64_t best = 0;
      float best_p = probs.data[static_cast<size_t>(p)];
      for (int64_t c = 1; c < probs.dim(0); ++c) {
        float v = probs.data[static_cast<size_t>(c * H * W + p)];
        if (v > best_p) {  // ties keep the lowest class id
          best_p = v;
          best = c;
        }
      }
      classes[static_cast<size_t>(p)] = table.classes[static_cast<size_t>(best)].id;
    }
    std::vector<InstanceMask> instances =
        instances_from_semantic(classes, H, W, table, ds.wrap_horizontal);
    PanopticMap fused = fuse_panoptic(probs, instances, table, fusion);
    stats += match_segments(fused, pair.gt, table).stats;
    std::vector<int32_t> gt_sem = pair.gt.semantic();
    all_pred.insert(all_pred.end(), classes.begin(), classes.end());
    all_gt.insert(all_gt.end(), gt_sem.begin(), gt_sem.end());
  }
  EvalReport rep;
  rep.images = ds.size();
  rep.pq = panoptic_quality(stats, table);
  rep.sem = semantic_iou(all_pred, all_gt, table);
  return rep;
}

}  // namespace detail

// Evaluation never touches the caller's model: it runs on a private copy in
// eval-mode normalization, so repeated calls are bitwise identical.
template <typename T>
EvalReport evaluate_panoptic(const SegModel<T>& model, const Dataset& ds,
                             const FusionConfig& fusion = {}) {
  model.head().validate(ds.classes);
  Encoder<T> enc(model.encoder);
  const SegHeadConfig head = model.head();
  NetworkParams<T> params = model.params;
  return detail::evaluate_core(ds, fusion, [&](const ScenePair& pair, int64_t) {
    const int64_t H = pair.image.height, W = pair.image.width;
    Tensor<T> input({1, 3, H, W});
    detail::write_normalized(pair.image, ds.channel_mean, ds.channel_std, 0, input);
    Tape<T> tape;
    int x = tape.leaf(std::move(input), false);
    int logits =
        seg_forward(tape, enc, params, head, x, detail::BnMode::Eval, false, false, nullptr);
    const Tensor<T>& L = tape.value(logits);
    const int64_t C = L.dim(1);
    Tensor<float> probs({C, H, W});
    for (int64_t p = 0; p < H * W; ++p) {
      double m = -std::numeric_limits<double>::infinity();
      for (int64_t c = 0; c < C; ++c)
        m = std::max(m, static_cast<double>(L.data[static_cast<size_t>(c * H * W + p)]));
      double z = 0.0;
      for (int64_t c = 0; c < C; ++c)
        z += std::exp(static_cast<double>(L.data[static_cast<size_t>(c * H * W + p)]) - m);
      for (int64_t c = 0; c < C; ++c)
        probs.data[static_cast<size_t>(c * H * W + p)] = static_cast<float>(
            std::exp(static_cast<double>(L.data[static_cast<size_t>(c * H * W + p)]) - m) / z);
    }
    return probs;
  });
}

// Upper-bound reference: reads the ground truth back as one-hot probabilities.
inline EvalReport evaluate_oracle(const Dataset& ds, const FusionConfig& fusion = {}) {
  const ClassTable& table = ds.classes;
  return detail::evaluate_core(ds, fusion, [&](const ScenePair& pair, int64_t) {
    const int64_t H = pair.gt.height, W = pair.gt.width;
    Tensor<float> probs({static_cast<int64_t>(table.classes.size()), H, W});
    std::vector<int32_t> sem = pair.gt.semantic();
    for (int64_t p = 0; p < H * W; ++p) {
      int32_t id = sem[static_cast<size_t>(p)];
      if (id == 0) continue;  // void: all-zero column
      for (size_t c = 0; c < table.classes.size(); ++c)
        if (table.classes[c].id == id) {
          probs.data[c * static_cast<size_t>(H * W) + static_cast<size_t>(p)] = 1.f;
          break;
        }
    }
    return probs;
  });
}

// ---------------------------------------------------------------------------
// Model files: same manifest-plus-blob layout as checkpoints, with the head
// dimensions up front.
// ---------------------------------------------------------------------------

template <typename T>
std::vector<uint8_t> encode_seg_model(const SegModel<T>& m) {
  std::ostringstream head;
  head << "panopix-segmodel 1\n";
  head << "precision " << precision_name(precision_of<T>()) << "\n";
  head << "classes " << m.num_classes << "\n";
  head << "stages " << detail::join_i64(m.encoder.stage_channels) << "\n";
  head << "blocks " << detail::join_i64(m.encoder.blocks_per_stage) << "\n";
  head << "output_stride " << m.encoder.output_stride << "\n";
  head << "proj " << m.encoder.proj_hidden << " " << m.encoder.proj_out << "\n";

  std::vector<std::pair<std::string, const Tensor<T>*>> records;
  auto emit = [&](char kind, const std::string& path, const Tensor<T>& t) {
    std::ostringstream line;
    line << kind << " " << path << " " << t.shape.size();
    for (int64_t d : t.shape) line << " " << d;
    records.emplace_back(line.str(), &t);
  };
  for (const auto& [path, t] : m.params.tensors) emit('t', path, t);
  for (const auto& [path, t] : m.params.stats) emit('s', path, t);
  head << "tensors " << records.size() << "\n";
  std::vector<uint8_t> payload;
  for (const auto& [line, t] : records) {
    head << line << "\n";
    for (const T& v : t->data) detail::put_le(payload, v);
  }
  head << "end\n";
  std::string h = head.str();
  std::vector<uint8_t> out(h.begin(), h.end());
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

template <typename T>
SegModel<T> decode_seg_model(const std::vector<uint8_t>& bytes) {
  size_t pos = 0;
  auto next_line = [&]() -> std::string {
    size_t nl = pos;
    while (nl < bytes.size() && bytes[nl] != '\n') ++nl;
    if (nl == bytes.size()) throw DataError("seg model: truncated manifest");
    std::string line(bytes.begin() + static_cast<int64_t>(pos),
                     bytes.begin() + static_cast<int64_t>(nl));
    pos = nl + 1;
    return line;
  };
  auto expect_key = [&](const std::string& line, const std::string& key) -> std::string {
    if (line.rfind(key + " ", 0) != 0)
      throw DataError("seg model: expected '" + key + "' line, got '" + line + "'");
    return line.substr(key.size() + 1);
  };
  if (next_line() != "panopix-segmodel 1") throw DataError("seg model: unrecognized header");
  std::string prec = expect_key(next_line(), "precision");
  if (prec != precision_name(precision_of<T>()))
    throw DataError("seg model: precision is " + prec + ", expected " +
                    precision_name(precision_of<T>()));
  SegModel<T> m;
  m.num_classes = std::stoll(expect_key(next_line(), "classes"));
  if (m.num_classes < 1) throw DataError("seg model: class count must be positive");
  m.encoder.stage_channels = detail::split_i64(expect_key(next_line(), "stages"));
  m.encoder.blocks_per_stage = detail::split_i64(expect_key(next_line(), "blocks"));
  m.encoder.output_stride = std::stoll(expect_key(next_line(), "output_stride"));
  {
    std::istringstream is(expect_key(next_line(), "proj"));
    if (!(is >> m.encoder.proj_hidden >> m.encoder.proj_out))
      throw DataError("seg model: malformed proj line");
  }
  m.encoder.validate();

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
      throw DataError("seg model: malformed tensor record");
    r.kind = kind[0];
    r.shape.resize(static_cast<size_t>(ndim));
    for (int64_t d = 0; d < ndim; ++d)
      if (!(is >> r.shape[static_cast<size_t>(d)]))
        throw DataError("seg model: malformed tensor record");
    records.push_back(std::move(r));
  }
  if (next_line() != "end") throw DataError("seg model: missing end marker");
  for (const Record& r : records) {
    int64_t n = Tensor<T>::numel_of(r.shape);
    size_t need = static_cast<size_t>(n) * sizeof(T);
    if (pos + need > bytes.size()) throw DataError("seg model: truncated payload");
    Tensor<T> t(r.shape);
    for (int64_t i = 0; i < n; ++i)
      t.data[static_cast<size_t>(i)] =
          detail::get_le<T>(&bytes[pos + static_cast<size_t>(i) * sizeof(T)]);
    pos += need;
    auto& dst = r.kind == 't' ? m.params.tensors : m.params.stats;
    if (!dst.emplace(r.path, std::move(t)).second)
      throw DataError("seg model: duplicate record for " + r.path);
  }
  if (pos != bytes.size()) throw DataError("seg model: trailing bytes after payload");

  // Completeness: exactly the backbone subset plus the two head tensors.
  Encoder<T> enc(m.encoder);
  size_t want_tensors = 2;
  for (const auto& ps : enc.parameter_specs()) {
    if (!is_backbone_path(ps.path)) continue;
    ++want_tensors;
    auto it = m.params.tensors.find(ps.path);
    if (it == m.params.tensors.end()) throw DataError("seg model: missing parameter " + ps.path);
    if (it->second.shape != ps.shape) throw DataError("seg model: shape mismatch for " + ps.path);
    if (!it->second.all_finite())
      throw DataError("seg model: non-finite values in " + ps.path);
  }
  const std::vector<int64_t> w_shape{m.num_classes, m.encoder.feature_channels(), 1, 1};
  for (const auto& [path, shape] :
       std::vector<std::pair<std::string, std::vector<int64_t>>>{
           {"head.conv.weight", w_shape}, {"head.conv.bias", {m.num_classes}}}) {
    auto it = m.params.tensors.find(path);
    if (it == m.params.tensors.end()) throw DataError("seg model: missing parameter " + path);
    if (it->second.shape != shape) throw DataError("seg model: shape mismatch for " + path);
    if (!it->second.all_finite()) throw DataError("seg model: non-finite values in " + path);
  }
  if (m.params.tensors.size() != want_tensors)
    throw DataError("seg model: unexpected extra parameters");
  size_t want_stats = 0;
  for (const auto& [prefix, c] : enc.stat_specs()) {
    for (const char* suffix : {".running_mean", ".running_var"}) {
      std::string path = prefix + suffix;
      if (!is_backbone_path(path)) continue;
      ++want_stats;
      auto it = m.params.stats.find(path);
      if (it == m.params.stats.end()) throw DataError("seg model: missing running stat " + path);
      if (it->second.shape != std::vector<int64_t>{c})
        throw DataError("seg model: shape mismatch for " + path);
      if (!it->second.all_finite()) throw DataError("seg model: non-finite values in " + path);
    }
  }
  if (m.params.stats.size() != want_stats)
    throw DataError("seg model: unexpected extra running stats");
  return m;
}

template <typename T>
void save_seg_model(const std::string& path, const SegModel<T>& m) {
  write_bytes(path, encode_seg_model(m));
}

template <typename T>
SegModel<T> load_seg_model(const std::string& path) {
  return decode_seg_model<T>(read_bytes(path));
}

}  // namespace panopix
