#pragma once

#include <cstdint>
#include <string>

#include "panopix/common.hpp"
#include "panopix/tape.hpp"
#include "panopix/tensor.hpp"

// Pretraining objective. Feature tensors arrive as [pixels, dim] rows on a
// tape; the momentum-encoder side must be built from non-trainable leaves so
// no gradient ever reaches the twin. The positive mask pairs view-A pixels
// (rows) with view-B pixels (columns).

namespace panopix {

struct LossConfig {
  double tau = 0.3;
  double alpha = 2.0;
  double positive_ratio = 0.7;  // consumed by the augment module's mask

  void validate() const {
    if (!(tau > 0)) throw DataError("LossConfig: tau must be positive");
    if (!(alpha >= 0)) throw DataError("LossConfig: alpha must be non-negative");
    if (!(positive_ratio > 0)) throw DataError("LossConfig: positive_ratio must be positive");
  }
};

namespace detail {

template <typename T>
void check_rows(const Tensor<T>& t, const char* who, const char* name) {
  if (t.ndim() != 2)
    throw ShapeError(std::string(who) + ": " + name + " must be [pixels, dim], got " +
                     t.shape_str());
}

// One anchor direction: for each row with at least one admitted column,
// logsumexp over all columns minus logsumexp over admitted columns, averaged
// over those rows.
template <typename T>
int contrastive_direction(Tape<T>& tape, int scores, const BoolMatrix& mask) {
  const Tensor<T>& S = tape.value(scores);
  BoolMatrix full(S.dim(0), S.dim(1), true);
  int lse_all = tape.masked_logsumexp_rows(scores, full);
  int lse_pos = tape.masked_logsumexp_rows(scores, mask);
  int per_pixel = tape.sub(lse_all, lse_pos);
  std::vector<double> anchored(static_cast<size_t>(mask.rows), 0.0);
  for (int64_t i = 0; i < mask.rows; ++i)
    for (int64_t j = 0; j < mask.cols; ++j)
      if (mask.at(i, j)) {
        anchored[static_cast<size_t>(i)] = 1.0;
        break;
      }
  return tape.masked_mean(per_pixel, anchored);
}

}  // namespace detail

// L_s: per anchor pixel, the negative log of the probability mass the
// positives hold among all pixels of the other frame, at temperature tau.
// Both frame directions are computed from one similarity matrix and averaged.
template <typename T>
int spatial_contrastive_loss(Tape<T>& tape, int x, int x_prime, const BoolMatrix& mask,
                             double tau) {
  const Tensor<T>& X = tape.value(x);
  const Tensor<T>& Xp = tape.value(x_prime);
  detail::check_rows(X, "spatial_contrastive_loss", "x");
  detail::check_rows(Xp, "spatial_contrastive_loss", "x_prime");
  if (X.dim(1) != Xp.dim(1))
    throw ShapeError("spatial_contrastive_loss: feature dims differ, " + X.shape_str() + " vs " +
                     Xp.shape_str());
  if (mask.rows != X.dim(0) || mask.cols != Xp.dim(0))
    throw ShapeError("spatial_contrastive_loss: mask must be pixels(A) x pixels(B)");
  if (!(tau > 0)) throw DataError("spatial_contrastive_loss: tau must be positive");
  if (mask.count() == 0)
    throw NoOverlapError("spatial_contrastive_loss: no positive pairs between the views");

  int scores = tape.scale(tape.cosine_similarity_matrix(x, x_prime), 1.0 / tau);
  int dir_a = detail::contrastive_direction(tape, scores, mask);
  int dir_b = detail::contrastive_direction(tape, tape.transpose2d(scores), mask.transposed());
  return tape.scale(tape.add(dir_a, dir_b), 0.5);
}

// Feature smoothing: every pixel of the frame contributes g(x_j), weighted by
// the squared positive part of its cosine similarity to the anchor. The sum is
// deliberately unnormalized; downstream cosines absorb the scale.
template <typename T>
int propagate_features(Tape<T>& tape, int x, int g_out) {
  const Tensor<T>& X = tape.value(x);
  const Tensor<T>& G = tape.value(g_out);
  detail::check_rows(X, "propagate_features", "x");
  detail::check_rows(G, "propagate_features", "g_out");
  if (X.shape != G.shape)
    throw ShapeError("propagate_features: x and g_out must agree, " + X.shape_str() + " vs " +
                     G.shape_str());
  if (X.dim(0) < 1) throw ShapeError("propagate_features: need at least one pixel");
  int w = tape.relu(tape.cosine_similarity_matrix(x, x));
  return tape.matmul(tape.mul(w, w), g_out);
}

// L_GloPro: for every positive pair, the smoothed online feature of each view
// is pulled toward the momentum feature of the other; averaged over pairs.
// Bounded by [-2, 2].
template <typename T>
int global_propagation_loss(Tape<T>& tape, int x_smooth_a, int x_prime_b, int x_smooth_b,
                            int x_prime_a, const BoolMatrix& mask) {
  const Tensor<T>& Sa = tape.value(x_smooth_a);
  const Tensor<T>& Pb = tape.value(x_prime_b);
  const Tensor<T>& Sb = tape.value(x_smooth_b);
  const Tensor<T>& Pa = tape.value(x_prime_a);
  detail::check_rows(Sa, "global_propagation_loss", "x_smooth_a");
  detail::check_rows(Pb, "global_propagation_loss", "x_prime_b");
  detail::check_rows(Sb, "global_propagation_loss", "x_smooth_b");
  detail::check_rows(Pa, "global_propagation_loss", "x_prime_a");
  if (Sa.dim(1) != Pb.dim(1) || Sb.dim(1) != Pa.dim(1) || Sa.dim(1) != Sb.dim(1))
    throw ShapeError("global_propagation_loss: feature dims differ");
  if (mask.rows != Sa.dim(0) || mask.cols != Pb.dim(0) || mask.rows != Pa.dim(0) ||
      mask.cols != Sb.dim(0))
    throw ShapeError("global_propagation_loss: mask does not match the frames");
  int64_t count = mask.count();
  if (count == 0)
    throw NoOverlapError("global_propagation_loss: no positive pairs between the views");

  double w = -1.0 / static_cast<double>(count);
  Tensor<T> w_ab({mask.rows, mask.cols});
  Tensor<T> w_ba({mask.cols, mask.rows});
  for (int64_t i = 0; i < mask.rows; ++i)
    for (int64_t j = 0; j < mask.cols; ++j)
      if (mask.at(i, j)) {
        w_ab.at2(i, j) = static_cast<T>(w);
        w_ba.at2(j, i) = static_cast<T>(w);
      }
  int s_ab = tape.weighted_sum(tape.cosine_similarity_matrix(x_smooth_a, x_prime_b), std::move(w_ab));
  int s_ba = tape.weighted_sum(tape.cosine_similarity_matrix(x_smooth_b, x_prime_a), std::move(w_ba));
  return tape.add(s_ab, s_ba);
}

// Tape nodes of one view pair's features, all as [pixels, dim] rows. The
// online side carries gradients; the momentum side must not.
struct PairFeatureNodes {
  int online_proj_a = -1;
  int online_proj_b = -1;
  int momentum_proj_a = -1;
  int momentum_proj_b = -1;
  int g_a = -1;  // propagation head applied to online_proj_a
  int g_b = -1;
};

struct LossReport {
  double total = 0.0;
  double spatial = 0.0;
  double global_prop = 0.0;
};

template <typename T>
int pretrain_loss(Tape<T>& tape, const PairFeatureNodes& f, const BoolMatrix& mask,
                  const LossConfig& cfg, LossReport* report = nullptr) {
  cfg.validate();
  int ls = spatial_contrastive_loss(tape, f.online_proj_a, f.momentum_proj_b, mask, cfg.tau);
  int smooth_a = propagate_features(tape, f.online_proj_a, f.g_a);
  int smooth_b = propagate_features(tape, f.online_proj_b, f.g_b);
  int lg = global_propagation_loss(tape, smooth_a, f.momentum_proj_b, smooth_b, f.momentum_proj_a,
                                   mask);
  int total = tape.add(ls, tape.scale(lg, cfg.alpha));
  if (report != nullptr) {
    report->spatial = static_cast<double>(tape.value(ls)[0]);
    report->global_prop = static_cast<double>(tape.value(lg)[0]);
    report->total = static_cast<double>(tape.value(total)[0]);
  }
  return total;
}

}  // namespace panopix
