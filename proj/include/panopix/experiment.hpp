#pragma once

#include <cstdint>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "panopix/common.hpp"
#include "panopix/config.hpp"
#include "panopix/dataset.hpp"
#include "panopix/downstream.hpp"
#include "panopix/pretrain.hpp"
#include "panopix/report.hpp"

// The transfer experiment: pretrain on the pinhole-like domain, finetune both
// a pretrained and a randomly initialized model there, evaluate both on the
// panorama-like domain, and repeat over seeds. A small alpha sweep rides on
// the first seed.

namespace panopix {

struct AbConfig {
  PretrainConfig pretrain;            // seed and loss weight overridden per run
  TrainConfig train;                  // seed overridden per run
  std::vector<uint64_t> seeds{1, 2, 3, 4, 5};
  std::vector<double> alphas{0.5, 1.0, 2.0, 4.0};
  FusionConfig fusion;

  void validate() const {
    pretrain.validate();
    train.validate();
    if (seeds.empty()) throw DataError("AbConfig: need at least one seed");
    if (!(pretrain.encoder == train.encoder))
      throw DataError("AbConfig: pretraining and downstream must share the encoder");
  }
};

namespace detail {

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace detail

template <typename T>
AbReport run_ab_experiment(const Dataset& train_ds, const Dataset& eval_ds, const AbConfig& cfg,
                           std::ostream* log = nullptr) {
  cfg.validate();
  const ClassTable& table = train_ds.classes;

  AbReport rep;
  rep.train_images = train_ds.size();
  rep.eval_images = eval_ds.size();
  rep.seeds = cfg.seeds;

  // Pretraining is label-free, so it may see the evaluation domain's images:
  // the corpus is the union of both datasets, each image normalized by its
  // own dataset's statistics.
  std::vector<CorpusImage> corpus = pretrain_corpus(train_ds);
  {
    std::vector<CorpusImage> b = pretrain_corpus(eval_ds);
    corpus.insert(corpus.end(), std::make_move_iterator(b.begin()),
                  std::make_move_iterator(b.end()));
  }

  // One pretrain+finetune+eval pass; keyed runs are cached so the sweep can
  // reuse the first seed's result at the preset weight.
  std::map<std::pair<uint64_t, double>, EvalReport> pretrained_runs;
  auto eval_pretrained = [&](uint64_t seed, double alpha) -> const EvalReport& {
    auto key = std::make_pair(seed, alpha);
    auto it = pretrained_runs.find(key);
    if (it != pretrained_runs.end()) return it->second;
    PretrainConfig pc = cfg.pretrain;
    pc.seed = seed;
    pc.loss.alpha = alpha;
    PretrainOutcome<T> pre = pretrain<T>(corpus, pc, log);
    TrainConfig tc = cfg.train;
    tc.seed = seed;
    TrainOutcome<T> fit = train_downstream<T>(train_ds, tc, &pre.checkpoint);
    return pretrained_runs.emplace(key, evaluate_panoptic(fit.model, eval_ds, cfg.fusion))
        .first->second;
  };

  std::vector<double> pre_sidewalk, rnd_sidewalk;
  std::vector<std::vector<double>> pre_class(table.classes.size()),
      rnd_class(table.classes.size());
  for (uint64_t seed : cfg.seeds) {
    const EvalReport& with = eval_pretrained(seed, cfg.pretrain.loss.alpha);

    TrainConfig tc = cfg.train;
    tc.seed = seed;
    TrainOutcome<T> scratch = train_downstream<T>(train_ds, tc);
    EvalReport without = evaluate_panoptic(scratch.model, eval_ds, cfg.fusion);

    rep.pretrained_pq.push_back(with.pq.pq);
    rep.random_pq.push_back(without.pq.pq);
    for (size_t k = 0; k < table.classes.size(); ++k) {
      pre_class[k].push_back(with.sem.per_class[k].iou);
      rnd_class[k].push_back(without.sem.per_class[k].iou);
    }
    pre_sidewalk.push_back(with.sem.class_iou(2));
    rnd_sidewalk.push_back(without.sem.class_iou(2));
    if (log)
      *log << "ab: seed " << seed << ": pretrained PQ " << with.pq.pq << ", random PQ "
           << without.pq.pq << "\n";
  }

  rep.pretrained_pq_mean = detail::mean_of(rep.pretrained_pq);
  rep.random_pq_mean = detail::mean_of(rep.random_pq);
  rep.delta_pq = rep.pretrained_pq_mean - rep.random_pq_mean;
  rep.pretrained_sidewalk_iou = detail::mean_of(pre_sidewalk);
  rep.random_sidewalk_iou = detail::mean_of(rnd_sidewalk);
  rep.delta_sidewalk_iou = rep.pretrained_sidewalk_iou - rep.random_sidewalk_iou;
  for (size_t k = 0; k < table.classes.size(); ++k) {
    AbClassRow row;
    row.class_id = table.classes[k].id;
    row.name = table.classes[k].name;
    row.pretrained_iou = detail::mean_of(pre_class[k]);
    row.random_iou = detail::mean_of(rnd_class[k]);
    row.delta = row.pretrained_iou - row.random_iou;
    rep.class_iou.push_back(std::move(row));
  }

  for (double alpha : cfg.alphas) {
    AbSweepRow row;
    row.alpha = alpha;
    row.pq = eval_pretrained(cfg.seeds.front(), alpha).pq.pq;
    rep.alpha_sweep.push_back(row);
    if (log) *log << "ab: alpha " << alpha << ": PQ " << row.pq << "\n";
  }
  return rep;
}

}  // namespace panopix
