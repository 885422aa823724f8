#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "panopix/common.hpp"
#include "panopix/kernels.hpp"
#include "panopix/tensor.hpp"

namespace panopix {

// Reverse-mode tape. Nodes are created in topological order by construction,
// so running the stored closures from the loss node downwards visits every
// node after all of its consumers. Gradients accumulate by addition; a node is
// only visited if some consumer deposited a gradient into it. Every op checks
// its output and throws NumericError on the first non-finite value, naming the
// op that produced it.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  int leaf(Tensor<T> v, bool requires_grad) {
    return push(std::move(v), requires_grad, "leaf", nullptr);
  }

  int constant(Tensor<T> v) { return leaf(std::move(v), false); }

  int scalar(T v) { return constant(Tensor<T>({1}, std::vector<T>{v})); }

  const Tensor<T>& value(int id) const { return ent(id).value; }
  bool requires_grad(int id) const { return ent(id).requires_grad; }
  int size() const { return static_cast<int>(entries_.size()); }

  // Valid after backward(). Nodes the loss never reached report zero.
  const Tensor<T>& grad(int id) {
    ent(id);
    if (!ran_backward_) throw DataError("grad: backward has not been run");
    if (grads_[id].numel() == 0) grads_[id] = Tensor<T>(entries_[id].value.shape);
    return grads_[id];
  }

  int add(int a, int b) {
    ensure_same_shape(val(a), val(b), "add");
    Tensor<T> out(val(a).shape);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = val(a)[i] + val(b)[i];
    const int id = next_id();
    return push(std::move(out), rg(a) || rg(b), "add", [this, id, a, b] {
      const Tensor<T>& up = grads_[id];
      if (rg(a)) accumulate(a, up, T(1));
      if (rg(b)) accumulate(b, up, T(1));
    });
  }

  int sub(int a, int b) {
    ensure_same_shape(val(a), val(b), "sub");
    Tensor<T> out(val(a).shape);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = val(a)[i] - val(b)[i];
    const int id = next_id();
    return push(std::move(out), rg(a) || rg(b), "sub", [this, id, a, b] {
      const Tensor<T>& up = grads_[id];
      if (rg(a)) accumulate(a, up, T(1));
      if (rg(b)) accumulate(b, up, T(-1));
    });
  }

  int mul(int a, int b) {
    ensure_same_shape(val(a), val(b), "mul");
    Tensor<T> out(val(a).shape);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = val(a)[i] * val(b)[i];
    const int id = next_id();
    return push(std::move(out), rg(a) || rg(b), "mul", [this, id, a, b] {
      const Tensor<T>& up = grads_[id];
      if (rg(a)) {
        Tensor<T>& g = grad_buf(a);
        for (int64_t i = 0; i < up.numel(); ++i) g[i] += up[i] * val(b)[i];
      }
      if (rg(b)) {
        Tensor<T>& g = grad_buf(b);
        for (int64_t i = 0; i < up.numel(); ++i) g[i] += up[i] * val(a)[i];
      }
    });
  }

  int scale(int a, double c) {
    Tensor<T> out(val(a).shape);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = static_cast<T>(val(a)[i] * c);
    const int id = next_id();
    return push(std::move(out), rg(a), "scale", [this, id, a, c] {
      accumulate(a, grads_[id], static_cast<T>(c));
    });
  }

  int add_const(int a, double c) {
    Tensor<T> out(val(a).shape);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = static_cast<T>(val(a)[i] + c);
    const int id = next_id();
    return push(std::move(out), rg(a), "add_const",
                [this, id, a] { accumulate(a, grads_[id], T(1)); });
  }

  int relu(int a) {
    Tensor<T> out(val(a).shape);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = val(a)[i] > T(0) ? val(a)[i] : T(0);
    const int id = next_id();
    return push(std::move(out), rg(a), "relu", [this, id, a] {
      if (!rg(a)) return;
      const Tensor<T>& up = grads_[id];
      Tensor<T>& g = grad_buf(a);
      for (int64_t i = 0; i < up.numel(); ++i)
        if (val(a)[i] > T(0)) g[i] += up[i];
    });
  }

  int sum(int a) {
    double s = 0.0;
    for (int64_t i = 0; i < val(a).numel(); ++i) s += val(a)[i];
    const int id = next_id();
    return push(Tensor<T>({1}, std::vector<T>{static_cast<T>(s)}), rg(a), "sum", [this, id, a] {
      if (!rg(a)) return;
      T up = grads_[id][0];
      Tensor<T>& g = grad_buf(a);
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += up;
    });
  }

  int mean(int a) {
    const int64_t n = val(a).numel();
    if (n == 0) throw ShapeError("mean: empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(n));
  }

  // sum_i value[i] * weights[i] with constant weights.
  int weighted_sum(int a, Tensor<T> weights) {
    ensure_same_shape(val(a), weights, "weighted_sum");
    double s = 0.0;
    for (int64_t i = 0; i < weights.numel(); ++i) s += static_cast<double>(val(a)[i]) * weights[i];
    const int id = next_id();
    auto w = std::make_shared<Tensor<T>>(std::move(weights));
    return push(Tensor<T>({1}, std::vector<T>{static_cast<T>(s)}), rg(a), "weighted_sum",
                [this, id, a, w] {
                  if (!rg(a)) return;
                  T up = grads_[id][0];
                  Tensor<T>& g = grad_buf(a);
                  for (int64_t i = 0; i < g.numel(); ++i) g[i] += up * (*w)[i];
                });
  }

  int matmul(int a, int b) {
    const Tensor<T>&A = val(a), &B = val(b);
    if (A.ndim() != 2 || B.ndim() != 2 || A.dim(1) != B.dim(0))
      throw ShapeError("matmul: incompatible shapes " + A.shape_str() + " x " + B.shape_str());
    const int64_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
    Tensor<T> out({m, n});
    detail::gemm_nn(false, m, n, k, A.data.data(), B.data.data(), out.data.data());
    const int id = next_id();
    return push(std::move(out), rg(a) || rg(b), "matmul", [this, id, a, b, m, k, n] {
      const Tensor<T>& up = grads_[id];
      if (rg(a))
        detail::gemm_nt(true, m, k, n, up.data.data(), val(b).data.data(),
                        grad_buf(a).data.data());
      if (rg(b))
        detail::gemm_tn(true, k, n, m, val(a).data.data(), up.data.data(),
                        grad_buf(b).data.data());
    });
  }

  int transpose2d(int a) {
    const Tensor<T>& A = val(a);
    if (A.ndim() != 2) throw ShapeError("transpose2d: expects a matrix");
    const int64_t m = A.dim(0), n = A.dim(1);
    Tensor<T> out({n, m});
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) out.at2(j, i) = A.at2(i, j);
    const int id = next_id();
    return push(std::move(out), rg(a), "transpose2d", [this, id, a, m, n] {
      if (!rg(a)) return;
      const Tensor<T>& up = grads_[id];
      Tensor<T>& g = grad_buf(a);
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) g.at2(i, j) += up.at2(j, i);
    });
  }

  // [N,C,H,W] -> [N*H*W, C]; row index is ((n*H + y)*W + x).
  int nchw_rows(int a) {
    const Tensor<T>& A = val(a);
    if (A.ndim() != 4) throw ShapeError("nchw_rows: expects [N,C,H,W]");
    const int64_t N = A.dim(0), C = A.dim(1), H = A.dim(2), W = A.dim(3);
    Tensor<T> out({N * H * W, C});
    for (int64_t n = 0; n < N; ++n)
      for (int64_t c = 0; c < C; ++c)
        for (int64_t y = 0; y < H; ++y)
          for (int64_t x = 0; x < W; ++x)
            out.at2((n * H + y) * W + x, c) = A.at4(n, c, y, x);
    const int id = next_id();
    return push(std::move(out), rg(a), "nchw_rows", [this, id, a, N, C, H, W] {
      if (!rg(a)) return;
      const Tensor<T>& up = grads_[id];
      Tensor<T>& g = grad_buf(a);
      for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c)
          for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x)
              g.at4(n, c, y, x) += up.at2((n * H + y) * W + x, c);
    });
  }

  int conv2d(int x, int k, int64_t stride, int64_t pad) {
    Tensor<T> out = detail::conv2d_forward(val(x), val(k), stride, pad);
    const int id = next_id();
    return push(std::move(out), rg(x) || rg(k), "conv2d", [this, id, x, k, stride, pad] {
      detail::conv2d_backward(val(x), val(k), stride, pad, grads_[id],
                              rg(x) ? &grad_buf(x) : nullptr, rg(k) ? &grad_buf(k) : nullptr);
    });
  }

  int add_channel_bias(int x, int b) {
    const Tensor<T>& X = val(x);
    if (X.ndim() != 4) throw ShapeError("add_channel_bias: expects [N,C,H,W]");
    const int64_t N = X.dim(0), C = X.dim(1), plane = X.dim(2) * X.dim(3);
    if (val(b).numel() != C)
      throw ShapeError("add_channel_bias: bias must have one entry per channel");
    Tensor<T> out(X.shape);
    for (int64_t n = 0; n < N; ++n)
      for (int64_t c = 0; c < C; ++c) {
        const T* src = X.data.data() + (n * C + c) * plane;
        T* dst = out.data.data() + (n * C + c) * plane;
        T bias = val(b)[c];
        for (int64_t i = 0; i < plane; ++i) dst[i] = src[i] + bias;
      }
    const int id = next_id();
    return push(std::move(out), rg(x) || rg(b), "add_channel_bias",
                [this, id, x, b, N, C, plane] {
                  const Tensor<T>& up = grads_[id];
                  if (rg(x)) accumulate(x, up, T(1));
                  if (rg(b)) {
                    Tensor<T>& g = grad_buf(b);
                    for (int64_t n = 0; n < N; ++n)
                      for (int64_t c = 0; c < C; ++c) {
                        const T* u = up.data.data() + (n * C + c) * plane;
                        double s = 0.0;
                        for (int64_t i = 0; i < plane; ++i) s += u[i];
                        g[c] += static_cast<T>(s);
                      }
                  }
                });
  }

  // Train mode normalizes with batch statistics and, when running stats are
  // supplied, folds the batch statistics into them. Eval mode requires running
  // stats and treats them as constants.
  int batch_norm(int x, int gamma, int beta, detail::BnMode mode, Tensor<T>* running_mean,
                 Tensor<T>* running_var, double eps = 1e-5, double stat_momentum = 0.1) {
    auto saved = std::make_shared<detail::BnSaved<T>>();
    Tensor<T> out = detail::batch_norm_forward(val(x), val(gamma), val(beta), eps, mode,
                                               running_mean, running_var, stat_momentum,
                                               saved.get());
    const int id = next_id();
    return push(std::move(out), rg(x) || rg(gamma) || rg(beta), "batch_norm",
                [this, id, x, gamma, beta, mode, saved] {
                  detail::batch_norm_backward(val(x), val(gamma), *saved, mode, grads_[id],
                                              rg(x) ? &grad_buf(x) : nullptr,
                                              rg(gamma) ? &grad_buf(gamma) : nullptr,
                                              rg(beta) ? &grad_buf(beta) : nullptr);
                });
  }

  // sim[i][j] = cos(a_i, b_j), norms clamped at eps.
  int cosine_similarity_matrix(int a, int b, double eps = 1e-8) {
    auto saved = std::make_shared<detail::CosineSaved<T>>();
    Tensor<T> out = detail::cosine_matrix_forward(val(a), val(b), eps, saved.get());
    const int id = next_id();
    return push(std::move(out), rg(a) || rg(b), "cosine_similarity_matrix",
                [this, id, a, b, eps, saved] {
                  detail::cosine_matrix_backward(val(a), val(b), eps, *saved, grads_[id],
                                                 rg(a) ? &grad_buf(a) : nullptr,
                                                 rg(b) ? &grad_buf(b) : nullptr);
                });
  }

  // Per-row logsumexp over the columns the mask admits. Rows with no admitted
  // column produce exactly 0 and propagate nothing.
  int masked_logsumexp_rows(int s, const BoolMatrix& mask) {
    const Tensor<T>& S = val(s);
    if (S.ndim() != 2) throw ShapeError("masked_logsumexp_rows: expects a matrix");
    const int64_t P = S.dim(0), Q = S.dim(1);
    if (mask.rows != P || mask.cols != Q)
      throw ShapeError("masked_logsumexp_rows: mask " + std::to_string(mask.rows) + "x" +
                       std::to_string(mask.cols) + " does not match scores " + S.shape_str());
    Tensor<T> out({P});
    for (int64_t i = 0; i < P; ++i) {
      T m = std::numeric_limits<T>::lowest();
      bool any = false;
      for (int64_t j = 0; j < Q; ++j)
        if (mask.at(i, j)) {
          any = true;
          m = std::max(m, S.at2(i, j));
        }
      if (!any) {
        out[i] = T(0);
        continue;
      }
      double acc = 0.0;
      for (int64_t j = 0; j < Q; ++j)
        if (mask.at(i, j)) acc += std::exp(static_cast<double>(S.at2(i, j) - m));
      out[i] = static_cast<T>(m + std::log(acc));
    }
    const int id = next_id();
    auto mk = std::make_shared<BoolMatrix>(mask);
    return push(std::move(out), rg(s), "masked_logsumexp_rows", [this, id, s, mk] {
      if (!rg(s)) return;
      const Tensor<T>& up = grads_[id];
      const Tensor<T>& S = val(s);
      const Tensor<T>& lse = val(id);
      Tensor<T>& g = grad_buf(s);
      for (int64_t i = 0; i < S.dim(0); ++i) {
        if (up[i] == T(0)) continue;
        for (int64_t j = 0; j < S.dim(1); ++j)
          if (mk->at(i, j))
            g.at2(i, j) += up[i] * static_cast<T>(std::exp(
                                       static_cast<double>(S.at2(i, j) - lse[i])));
      }
    });
  }

  // Weighted mean over a vector with constant weights; total weight must be
  // positive.
  int masked_mean(int a, const std::vector<double>& weights) {
    const Tensor<T>& A = val(a);
    if (A.numel() != static_cast<int64_t>(weights.size()))
      throw ShapeError("masked_mean: weight count does not match values");
    double total = 0.0;
    for (double w : weights) total += w;
    if (total <= 0.0) throw DataError("masked_mean: total weight is zero");
    Tensor<T> w({A.numel()});
    for (int64_t i = 0; i < A.numel(); ++i) w[i] = static_cast<T>(weights[i] / total);
    return weighted_sum(a, std::move(w));
  }

  int upsample_bilinear(int a, int64_t factor) {
    Tensor<T> out = detail::upsample_bilinear_forward(val(a), factor);
    const int id = next_id();
    const auto& s = val(a).shape;
    const int64_t N = s[0], C = s[1], H = s[2], W = s[3];
    return push(std::move(out), rg(a), "upsample_bilinear", [this, id, a, N, C, H, W, factor] {
      if (!rg(a)) return;
      detail::upsample_bilinear_backward(N, C, H, W, factor, grads_[id], &grad_buf(a));
    });
  }

  // Mean negative log-likelihood over pixels whose label is >= 0.
  int softmax_cross_entropy(int logits, const std::vector<int32_t>& labels) {
    const Tensor<T>& L = val(logits);
    if (L.ndim() != 4) throw ShapeError("softmax_cross_entropy: expects [N,C,H,W]");
    const int64_t N = L.dim(0), C = L.dim(1), H = L.dim(2), W = L.dim(3);
    const int64_t pixels = N * H * W;
    if (static_cast<int64_t>(labels.size()) != pixels)
      throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                       " labels for " + std::to_string(pixels) + " pixels");
    auto lse = std::make_shared<std::vector<T>>(static_cast<size_t>(pixels));
    const int64_t plane = H * W;
    double loss = 0.0;
    int64_t valid = 0;
    for (int64_t n = 0; n < N; ++n) {
      for (int64_t p = 0; p < plane; ++p) {
        int32_t lab = labels[static_cast<size_t>(n * plane + p)];
        T m = std::numeric_limits<T>::lowest();
        for (int64_t c = 0; c < C; ++c) m = std::max(m, L.data[(n * C + c) * plane + p]);
        double acc = 0.0;
        for (int64_t c = 0; c < C; ++c)
          acc += std::exp(static_cast<double>(L.data[(n * C + c) * plane + p] - m));
        T l = static_cast<T>(m + std::log(acc));
        (*lse)[static_cast<size_t>(n * plane + p)] = l;
        if (lab < 0) continue;
        if (lab >= C)
          throw DataError("softmax_cross_entropy: label " + std::to_string(lab) +
                          " out of range for " + std::to_string(C) + " classes");
        loss += static_cast<double>(l - L.data[(n * C + lab) * plane + p]);
        ++valid;
      }
    }
    if (valid == 0) throw DataError("softmax_cross_entropy: no labeled pixels");
    loss /= static_cast<double>(valid);
    const int id = next_id();
    auto labs = std::make_shared<std::vector<int32_t>>(labels);
    return push(Tensor<T>({1}, std::vector<T>{static_cast<T>(loss)}), rg(logits),
                "softmax_cross_entropy", [this, id, logits, labs, lse, N, C, plane, valid] {
                  if (!rg(logits)) return;
                  const T up = grads_[id][0];
                  const Tensor<T>& L = val(logits);
                  Tensor<T>& g = grad_buf(logits);
                  const T inv = up / static_cast<T>(valid);
                  for (int64_t n = 0; n < N; ++n)
                    for (int64_t p = 0; p < plane; ++p) {
                      int32_t lab = (*labs)[static_cast<size_t>(n * plane + p)];
                      if (lab < 0) continue;
                      T l = (*lse)[static_cast<size_t>(n * plane + p)];
                      for (int64_t c = 0; c < C; ++c) {
                        T soft = static_cast<T>(
                            std::exp(static_cast<double>(L.data[(n * C + c) * plane + p] - l)));
                        g.data[(n * C + c) * plane + p] +=
                            inv * (soft - (c == lab ? T(1) : T(0)));
                      }
                    }
                });
  }

  void backward(int loss) {
    const Entry& L = ent(loss);
    if (L.value.numel() != 1)
      throw ShapeError("backward: loss must be a scalar, got shape " + L.value.shape_str());
    if (!L.requires_grad)
      throw DataError("backward: loss does not depend on any differentiable leaf");
    grads_.assign(entries_.size(), Tensor<T>());
    reached_.assign(entries_.size(), 0);
    ran_backward_ = true;
    grad_buf(loss)[0] = T(1);
    for (int i = loss; i >= 0; --i) {
      if (!reached_[static_cast<size_t>(i)] || !entries_[static_cast<size_t>(i)].back) continue;
      entries_[static_cast<size_t>(i)].back();
    }
    for (size_t i = 0; i < entries_.size(); ++i)
      if (reached_[i] && !grads_[i].all_finite())
        throw NumericError("backward: " + entries_[i].op + ": produced non-finite gradient");
  }

 private:
  struct Entry {
    Tensor<T> value;
    bool requires_grad = false;
    std::string op;
    std::function<void()> back;
  };

  int next_id() const { return static_cast<int>(entries_.size()); }

  int push(Tensor<T> v, bool requires_grad, const char* op, std::function<void()> back) {
    ensure_finite(v, op);
    Entry e;
    e.value = std::move(v);
    e.requires_grad = requires_grad;
    e.op = op;
    if (requires_grad) e.back = std::move(back);
    entries_.push_back(std::move(e));
    return static_cast<int>(entries_.size()) - 1;
  }

  const Entry& ent(int id) const {
    if (id < 0 || id >= static_cast<int>(entries_.size()))
      throw ShapeError("tape: node id " + std::to_string(id) + " out of range");
    return entries_[static_cast<size_t>(id)];
  }

  const Tensor<T>& val(int id) const { return ent(id).value; }
  bool rg(int id) const { return ent(id).requires_grad; }

  Tensor<T>& grad_buf(int id) {
    if (grads_[static_cast<size_t>(id)].numel() == 0)
      grads_[static_cast<size_t>(id)] = Tensor<T>(entries_[static_cast<size_t>(id)].value.shape);
    reached_[static_cast<size_t>(id)] = 1;
    return grads_[static_cast<size_t>(id)];
  }

  void accumulate(int target, const Tensor<T>& up, T factor) {
    Tensor<T>& g = grad_buf(target);
    for (int64_t i = 0; i < up.numel(); ++i) g[i] += up[i] * factor;
  }

  std::vector<Entry> entries_;
  std::vector<Tensor<T>> grads_;
  std::vector<uint8_t> reached_;
  bool ran_backward_ = false;
};

}  // namespace panopix
