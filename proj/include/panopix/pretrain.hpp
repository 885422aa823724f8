#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "panopix/augment.hpp"
#include "panopix/checkpoint.hpp"
#include "panopix/common.hpp"
#include "panopix/config.hpp"
#include "panopix/dataset.hpp"
#include "panopix/encoder.hpp"
#include "panopix/losses.hpp"
#include "panopix/optim.hpp"
#include "panopix/report.hpp"
#include "panopix/tape.hpp"

// Self-supervised phase: two augmented views per image, online and momentum
// encoders, the combined contrastive/propagation objective, and an EMA update
// after every optimizer step. The backbone that falls out is what the
// downstream phase consumes.

namespace panopix {

template <typename T>
struct PretrainOutcome {
  Checkpoint<T> checkpoint;  // full online parameters, marked backbone-only for files
  History history;
};

// Test hook: called with step 0 right after initialization and with the
// 1-based step index after every optimizer+EMA update.
template <typename T>
using StepObserver =
    std::function<void(int64_t, const NetworkParams<T>&, const NetworkParams<T>&)>;

// One unlabeled image plus the normalization of the dataset it came from.
// Pretraining happily mixes datasets; each image keeps its own statistics,
// matching how the downstream phase will normalize that dataset later.
struct CorpusImage {
  Image image;
  std::array<double, 3> norm_mean{0.0, 0.0, 0.0};
  std::array<double, 3> norm_std{1.0, 1.0, 1.0};
};

inline std::vector<CorpusImage> pretrain_corpus(const Dataset& ds) {
  std::vector<CorpusImage> out;
  out.reserve(static_cast<size_t>(ds.size()));
  for (int64_t i = 0; i < ds.size(); ++i)
    out.push_back({load_pair(ds, i).image, ds.channel_mean, ds.channel_std});
  return out;
}

namespace detail {

template <typename T>
Tensor<T> view_tensor(const Image& v) {
  Tensor<T> t({1, 3, v.height, v.width});
  for (size_t i = 0; i < v.data.size(); ++i) t.data[i] = static_cast<T>(v.data[i]);
  return t;
}

}  // namespace detail

// View sampling is keyed by image index and retry count alone, never by the
// epoch: every epoch revisits the identical pairs in the identical order.
// That makes a zero learning rate exactly stationary (constant logged loss,
// untouched parameters) and makes overlap failures repeat predictably.
template <typename T>
PretrainOutcome<T> pretrain(const std::vector<CorpusImage>& corpus, const PretrainConfig& cfg,
                            std::ostream* log = nullptr, const StepObserver<T>& observer = {}) {
  cfg.validate();
  if (corpus.empty()) throw DataError("pretrain: empty corpus");

  const PretrainConfig& eff = cfg;
  Encoder<T> enc(eff.encoder);
  const int64_t stride = eff.encoder.output_stride;
  if (eff.augment.out_h % stride != 0 || eff.augment.out_w % stride != 0)
    throw DataError("pretrain: view size " + std::to_string(eff.augment.out_h) + "x" +
                    std::to_string(eff.augment.out_w) + " is not divisible by output stride " +
                    std::to_string(stride));
  const int64_t gh = eff.augment.out_h / stride;
  const int64_t gw = eff.augment.out_w / stride;

  const int64_t n = static_cast<int64_t>(corpus.size());
  Rng init_rng(hash_seed({cfg.seed, 0x93eull}));
  NetworkParams<T> online = enc.init(init_rng);
  NetworkParams<T> momentum = clone_to_momentum(online);
  OptimState<T> state;
  const int64_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;

  PretrainOutcome<T> out;
  out.history.kind = "pretrain";
  out.history.config = describe(eff);
  out.history.columns = {"loss", "l_s", "l_gprop", "lr", "skipped"};

  if (observer) observer(0, online, momentum);

  int64_t t = 0;
  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double loss_sum = 0.0, ls_sum = 0.0, lg_sum = 0.0;
    double lr_last = 0.0;
    int64_t pairs_done = 0, skipped = 0;
    for (int64_t start = 0; start < n; start += cfg.batch_size) {
      const int64_t bsz = std::min(cfg.batch_size, n - start);
      std::vector<std::pair<ViewPair, BoolMatrix>> batch;
      for (int64_t s = 0; s < bsz; ++s) {
        const int64_t i = start + s;
        const CorpusImage& src = corpus[static_cast<size_t>(i)];
        AugmentConfig aug = eff.augment;
        aug.norm_mean = src.norm_mean;
        aug.norm_std = src.norm_std;
        bool ok = false;
        for (int64_t attempt = 0; attempt <= cfg.retry_limit && !ok; ++attempt) {
          ViewPair pair = sample_view_pair(
              src.image, aug,
              hash_seed({cfg.seed, 0xa1c7ull, static_cast<uint64_t>(i),
                         static_cast<uint64_t>(attempt)}));
          BoolMatrix mask = positive_pair_mask(pair, gh, gw, eff.loss.positive_ratio);
          if (mask.count() > 0) {
            batch.emplace_back(std::move(pair), std::move(mask));
            ok = true;
          }
        }
        if (!ok) {
          ++skipped;
          if (log)
            *log << "pretrain: no overlapping views for image " << i << " after "
                 << cfg.retry_limit + 1 << " draws; image skipped\n";
        }
      }
      if (batch.empty()) {
        if (log)
          *log << "pretrain: every image in the batch at offset " << start
               << " failed to overlap; step skipped\n";
        continue;
      }

      Tape<T> tape;
      typename Encoder<T>::Bound bound;
      std::vector<int> losses;
      for (auto& [pair, mask] : batch) {
        int xa = tape.leaf(detail::view_tensor<T>(pair.view_a), false);
        int xb = tape.leaf(detail::view_tensor<T>(pair.view_b), false);
        PairFeatureNodes f;
        int fa = enc.forward_features(tape, online, xa, detail::BnMode::Train, true, &bound);
        int za = enc.project(tape, online, fa, detail::BnMode::Train, true, &bound);
        f.g_a = tape.nchw_rows(enc.propagate_head_g(tape, online, za, true, &bound));
        f.online_proj_a = tape.nchw_rows(za);
        int fb = enc.forward_features(tape, online, xb, detail::BnMode::Train, true, &bound);
        int zb = enc.project(tape, online, fb, detail::BnMode::Train, true, &bound);
        f.g_b = tape.nchw_rows(enc.propagate_head_g(tape, online, zb, true, &bound));
        f.online_proj_b = tape.nchw_rows(zb);
        int ma = enc.forward_features(tape, momentum, xa, detail::BnMode::Train, false, nullptr);
        f.momentum_proj_a =
            tape.nchw_rows(enc.project(tape, momentum, ma, detail::BnMode::Train, false, nullptr));
        int mb = enc.forward_features(tape, momentum, xb, detail::BnMode::Train, false, nullptr);
        f.momentum_proj_b =
            tape.nchw_rows(enc.project(tape, momentum, mb, detail::BnMode::Train, false, nullptr));
        LossReport rep;
        losses.push_back(pretrain_loss(tape, f, mask, eff.loss, &rep));
        loss_sum += rep.total;
        ls_sum += rep.spatial;
        lg_sum += rep.global_prop;
      }
      int total = losses[0];
      for (size_t k = 1; k < losses.size(); ++k) total = tape.add(total, losses[k]);
      if (losses.size() > 1) total = tape.scale(total, 1.0 / static_cast<double>(losses.size()));
      if (!std::isfinite(static_cast<double>(tape.value(total)[0])))
        throw NumericError("pretrain: non-finite loss");
      tape.backward(total);

      std::map<std::string, Tensor<T>> grads;
      for (const auto& [path, w] : online.tensors)
        grads.emplace(path, tape.grad(bound.node(path)));
      const double lr = schedule_lr(cfg.optimizer, t, steps_per_epoch);
      optimizer_step(cfg.optimizer, lr, online.tensors, grads, state);
      momentum = momentum_update(momentum, online, cfg.ema.beta);
      ++t;
      lr_last = lr;
      pairs_done += static_cast<int64_t>(batch.size());
      if (observer) observer(t, online, momentum);
    }
    if (pairs_done == 0) throw DataError("pretrain: every view pair failed to overlap");
    const double d = static_cast<double>(pairs_done);
    out.history.rows.push_back(
        {loss_sum / d, ls_sum / d, lg_sum / d, lr_last, static_cast<double>(skipped)});
  }

  out.checkpoint = {eff.encoder, std::move(online), CheckpointPart::BackboneOnly};
  return out;
}

// Single-dataset convenience: the whole corpus shares the dataset statistics,
// and the config echo records them as the applied normalization.
template <typename T>
PretrainOutcome<T> pretrain(const Dataset& ds, const PretrainConfig& cfg,
                            std::ostream* log = nullptr, const StepObserver<T>& observer = {}) {
  if (ds.size() == 0) throw DataError("pretrain: empty dataset");
  PretrainConfig eff = cfg;
  eff.augment.norm_mean = ds.channel_mean;
  eff.augment.norm_std = ds.channel_std;
  return pretrain<T>(pretrain_corpus(ds), eff, log, observer);
}

}  // namespace panopix
