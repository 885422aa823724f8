#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "panopix/common.hpp"
#include "panopix/tensor.hpp"

// Raw numeric kernels behind the tape ops. Row-major throughout. The GEMMs
// split output rows across threads; every output element is written by exactly
// one thread, so results are identical for any thread count.

namespace panopix::detail {

// C[m,n] (+)= A[m,k] * B[k,n]
template <typename T>
void gemm_nn(bool accumulate, int64_t m, int64_t n, int64_t k, const T* A, const T* B, T* C) {
  parallel_for(m, [&](int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i) {
      T* crow = C + i * n;
      if (!accumulate)
        for (int64_t j = 0; j < n; ++j) crow[j] = T(0);
      const T* arow = A + i * k;
      for (int64_t p = 0; p < k; ++p) {
        T a = arow[p];
        if (a == T(0)) continue;
        const T* brow = B + p * n;
        for (int64_t j = 0; j < n; ++j) crow[j] += a * brow[j];
      }
    }
  });
}

// C[m,n] (+)= A[m,k] * B[n,k]^T
template <typename T>
void gemm_nt(bool accumulate, int64_t m, int64_t n, int64_t k, const T* A, const T* B, T* C) {
  parallel_for(m, [&](int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i) {
      const T* arow = A + i * k;
      T* crow = C + i * n;
      for (int64_t j = 0; j < n; ++j) {
        const T* brow = B + j * k;
        T acc = T(0);
        for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
        if (accumulate)
          crow[j] += acc;
        else
          crow[j] = acc;
      }
    }
  });
}

// C[m,n] (+)= A[k,m]^T * B[k,n]
template <typename T>
void gemm_tn(bool accumulate, int64_t m, int64_t n, int64_t k, const T* A, const T* B, T* C) {
  parallel_for(m, [&](int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i) {
      T* crow = C + i * n;
      if (!accumulate)
        for (int64_t j = 0; j < n; ++j) crow[j] = T(0);
      for (int64_t p = 0; p < k; ++p) {
        T a = A[p * m + i];
        if (a == T(0)) continue;
        const T* brow = B + p * n;
        for (int64_t j = 0; j < n; ++j) crow[j] += a * brow[j];
      }
    }
  });
}

struct ConvDims {
  int64_t out_h = 0;
  int64_t out_w = 0;
};

inline ConvDims conv_output_dims(int64_t h, int64_t w, int64_t kh, int64_t kw, int64_t stride,
                                 int64_t pad, const char* op) {
  if (stride < 1) throw ShapeError(std::string(op) + ": stride must be >= 1");
  if (pad < 0) throw ShapeError(std::string(op) + ": negative padding");
  if (kh > h + 2 * pad || kw > w + 2 * pad)
    throw ShapeError(std::string(op) + ": kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                     " exceeds padded input " + std::to_string(h + 2 * pad) + "x" +
                     std::to_string(w + 2 * pad));
  ConvDims d;
  d.out_h = (h + 2 * pad - kh) / stride + 1;
  d.out_w = (w + 2 * pad - kw) / stride + 1;
  return d;
}

// src: one image [C,H,W]; dst: [C*kh*kw, out_h*out_w]
template <typename T>
void im2col(const T* src, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw, int64_t stride,
            int64_t pad, int64_t out_h, int64_t out_w, T* dst) {
  const int64_t plane = out_h * out_w;
  for (int64_t c = 0; c < C; ++c) {
    const T* chan = src + c * H * W;
    for (int64_t ky = 0; ky < kh; ++ky) {
      for (int64_t kx = 0; kx < kw; ++kx) {
        T* row = dst + ((c * kh + ky) * kw + kx) * plane;
        for (int64_t oy = 0; oy < out_h; ++oy) {
          int64_t iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) {
            for (int64_t ox = 0; ox < out_w; ++ox) row[oy * out_w + ox] = T(0);
            continue;
          }
          const T* srow = chan + iy * W;
          for (int64_t ox = 0; ox < out_w; ++ox) {
            int64_t ix = ox * stride - pad + kx;
            row[oy * out_w + ox] = (ix >= 0 && ix < W) ? srow[ix] : T(0);
          }
        }
      }
    }
  }
}

// Scatter-add inverse of im2col.
template <typename T>
void col2im(const T* cols, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw, int64_t stride,
            int64_t pad, int64_t out_h, int64_t out_w, T* dst) {
  const int64_t plane = out_h * out_w;
  for (int64_t c = 0; c < C; ++c) {
    T* chan = dst + c * H * W;
    for (int64_t ky = 0; ky < kh; ++ky) {
      for (int64_t kx = 0; kx < kw; ++kx) {
        const T* row = cols + ((c * kh + ky) * kw + kx) * plane;
        for (int64_t oy = 0; oy < out_h; ++oy) {
          int64_t iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          T* drow = chan + iy * W;
          for (int64_t ox = 0; ox < out_w; ++ox) {
            int64_t ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < W) drow[ix] += row[oy * out_w + ox];
          }
        }
      }
    }
  }
}

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const Tensor<T>& kernel, int64_t stride,
                         int64_t pad) {
  if (input.ndim() != 4 || kernel.ndim() != 4)
    throw ShapeError("conv2d: expects input [N,C,H,W] and kernel [K,C,kh,kw]");
  if (input.dim(1) != kernel.dim(1))
    throw ShapeError("conv2d: input channels " + std::to_string(input.dim(1)) +
                     " != kernel channels " + std::to_string(kernel.dim(1)));
  const int64_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int64_t K = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  ConvDims d = conv_output_dims(H, W, kh, kw, stride, pad, "conv2d");
  const int64_t plane = d.out_h * d.out_w;
  const int64_t ck = C * kh * kw;
  Tensor<T> out({N, K, d.out_h, d.out_w});
  std::vector<T> cols(static_cast<size_t>(ck * plane));
  for (int64_t n = 0; n < N; ++n) {
    im2col(input.data.data() + n * C * H * W, C, H, W, kh, kw, stride, pad, d.out_h, d.out_w,
           cols.data());
    gemm_nn(false, K, plane, ck, kernel.data.data(), cols.data(),
            out.data.data() + n * K * plane);
  }
  return out;
}

template <typename T>
void conv2d_backward(const Tensor<T>& input, const Tensor<T>& kernel, int64_t stride, int64_t pad,
                     const Tensor<T>& upstream, Tensor<T>* grad_input, Tensor<T>* grad_kernel) {
  const int64_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int64_t K = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  ConvDims d = conv_output_dims(H, W, kh, kw, stride, pad, "conv2d");
  const int64_t plane = d.out_h * d.out_w;
  const int64_t ck = C * kh * kw;
  std::vector<T> cols(static_cast<size_t>(ck * plane));
  std::vector<T> dcols;
  if (grad_input != nullptr) dcols.resize(static_cast<size_t>(ck * plane));
  for (int64_t n = 0; n < N; ++n) {
    const T* up = upstream.data.data() + n * K * plane;
    if (grad_kernel != nullptr) {
      im2col(input.data.data() + n * C * H * W, C, H, W, kh, kw, stride, pad, d.out_h, d.out_w,
             cols.data());
      gemm_nt(true, K, ck, plane, up, cols.data(), grad_kernel->data.data());
    }
    if (grad_input != nullptr) {
      gemm_tn(false, ck, plane, K, kernel.data.data(), up, dcols.data());
      col2im(dcols.data(), C, H, W, kh, kw, stride, pad, d.out_h, d.out_w,
             grad_input->data.data() + n * C * H * W);
    }
  }
}

enum class BnMode { Train, Eval };

template <typename T>
struct BnSaved {
  std::vector<T> mean;     // per channel, the statistics actually used
  std::vector<T> inv_std;  // 1/sqrt(var+eps)
};

// Normalizes over N*H*W per channel (biased variance). Running stats are
// updated in place when pointers are supplied and mode is Train.
template <typename T>
Tensor<T> batch_norm_forward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                             double eps, BnMode mode, Tensor<T>* running_mean,
                             Tensor<T>* running_var, double stat_momentum, BnSaved<T>* saved) {
  if (x.ndim() != 4) throw ShapeError("batch_norm: expects [N,C,H,W]");
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (gamma.numel() != C || beta.numel() != C)
    throw ShapeError("batch_norm: gamma/beta must have one entry per channel");
  const int64_t M = N * H * W;
  if (mode == BnMode::Train && M < 2)
    throw ShapeError("batch_norm: train mode needs at least 2 values per channel");

  std::vector<T> mean(static_cast<size_t>(C)), inv_std(static_cast<size_t>(C));
  const int64_t plane = H * W;
  if (mode == BnMode::Train) {
    for (int64_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (int64_t n = 0; n < N; ++n) {
        const T* p = x.data.data() + (n * C + c) * plane;
        for (int64_t i = 0; i < plane; ++i) s += p[i];
      }
      double mu = s / static_cast<double>(M);
      double v = 0.0;
      for (int64_t n = 0; n < N; ++n) {
        const T* p = x.data.data() + (n * C + c) * plane;
        for (int64_t i = 0; i < plane; ++i) {
          double dlt = p[i] - mu;
          v += dlt * dlt;
        }
      }
      v /= static_cast<double>(M);
      mean[c] = static_cast<T>(mu);
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(v + eps));
      if (running_mean != nullptr && running_var != nullptr) {
        (*running_mean)[c] =
            static_cast<T>((1.0 - stat_momentum) * (*running_mean)[c] + stat_momentum * mu);
        (*running_var)[c] =
            static_cast<T>((1.0 - stat_momentum) * (*running_var)[c] + stat_momentum * v);
      }
    }
  } else {
    if (running_mean == nullptr || running_var == nullptr)
      throw ShapeError("batch_norm: eval mode requires running statistics");
    for (int64_t c = 0; c < C; ++c) {
      mean[c] = (*running_mean)[c];
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>((*running_var)[c]) + eps));
    }
  }

  Tensor<T> y(x.shape);
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t c = 0; c < C; ++c) {
      const T* p = x.data.data() + (n * C + c) * plane;
      T* q = y.data.data() + (n * C + c) * plane;
      T mu = mean[c], is = inv_std[c], g = gamma[c], b = beta[c];
      for (int64_t i = 0; i < plane; ++i) q[i] = (p[i] - mu) * is * g + b;
    }
  }
  if (saved != nullptr) {
    saved->mean = std::move(mean);
    saved->inv_std = std::move(inv_std);
  }
  return y;
}

template <typename T>
void batch_norm_backward(const Tensor<T>& x, const Tensor<T>& gamma, const BnSaved<T>& saved,
                         BnMode mode, const Tensor<T>& upstream, Tensor<T>* grad_x,
                         Tensor<T>* grad_gamma, Tensor<T>* grad_beta) {
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t plane = H * W;
  const double M = static_cast<double>(N * plane);
  for (int64_t c = 0; c < C; ++c) {
    const T mu = saved.mean[c], is = saved.inv_std[c];
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (int64_t n = 0; n < N; ++n) {
      const T* dy = upstream.data.data() + (n * C + c) * plane;
      const T* px = x.data.data() + (n * C + c) * plane;
      for (int64_t i = 0; i < plane; ++i) {
        sum_dy += dy[i];
        sum_dy_xhat += dy[i] * (px[i] - mu) * is;
      }
    }
    if (grad_gamma != nullptr) (*grad_gamma)[c] += static_cast<T>(sum_dy_xhat);
    if (grad_beta != nullptr) (*grad_beta)[c] += static_cast<T>(sum_dy);
    if (grad_x != nullptr) {
      const T g = gamma[c];
      for (int64_t n = 0; n < N; ++n) {
        const T* dy = upstream.data.data() + (n * C + c) * plane;
        const T* px = x.data.data() + (n * C + c) * plane;
        T* dx = grad_x->data.data() + (n * C + c) * plane;
        if (mode == BnMode::Train) {
          for (int64_t i = 0; i < plane; ++i) {
            double xhat = (px[i] - mu) * is;
            dx[i] += static_cast<T>(static_cast<double>(g) * is *
                                    (dy[i] - sum_dy / M - xhat * sum_dy_xhat / M));
          }
        } else {
          for (int64_t i = 0; i < plane; ++i) dx[i] += static_cast<T>(g * is * dy[i]);
        }
      }
    }
  }
}

template <typename T>
struct CosineSaved {
  std::vector<T> norm_a, norm_b;          // raw norms
  std::vector<T> clamped_a, clamped_b;    // max(norm, eps)
  Tensor<T> sim;
};

// sim[i][j] = dot(a_i, b_j) / (max(|a_i|,eps) * max(|b_j|,eps))
template <typename T>
Tensor<T> cosine_matrix_forward(const Tensor<T>& a, const Tensor<T>& b, double eps,
                                CosineSaved<T>* saved) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(1))
    throw ShapeError("cosine_similarity_matrix: expects [P,D] and [Q,D] with matching D");
  if (a.dim(1) < 1) throw ShapeError("cosine_similarity_matrix: D must be >= 1");
  const int64_t P = a.dim(0), Q = b.dim(0), D = a.dim(1);
  std::vector<T> na(static_cast<size_t>(P)), nb(static_cast<size_t>(Q));
  std::vector<T> ca(static_cast<size_t>(P)), cb(static_cast<size_t>(Q));
  for (int64_t i = 0; i < P; ++i) {
    double s = 0.0;
    const T* row = a.data.data() + i * D;
    for (int64_t d = 0; d < D; ++d) s += static_cast<double>(row[d]) * row[d];
    na[i] = static_cast<T>(std::sqrt(s));
    ca[i] = std::max(na[i], static_cast<T>(eps));
  }
  for (int64_t j = 0; j < Q; ++j) {
    double s = 0.0;
    const T* row = b.data.data() + j * D;
    for (int64_t d = 0; d < D; ++d) s += static_cast<double>(row[d]) * row[d];
    nb[j] = static_cast<T>(std::sqrt(s));
    cb[j] = std::max(nb[j], static_cast<T>(eps));
  }
  Tensor<T> sim({P, Q});
  gemm_nt(false, P, Q, D, a.data.data(), b.data.data(), sim.data.data());
  for (int64_t i = 0; i < P; ++i)
    for (int64_t j = 0; j < Q; ++j) sim.at2(i, j) /= ca[i] * cb[j];
  if (saved != nullptr) {
    saved->norm_a = std::move(na);
    saved->norm_b = std::move(nb);
    saved->clamped_a = std::move(ca);
    saved->clamped_b = std::move(cb);
    saved->sim = sim;
  }
  return sim;
}

template <typename T>
void cosine_matrix_backward(const Tensor<T>& a, const Tensor<T>& b, double eps,
                            const CosineSaved<T>& saved, const Tensor<T>& upstream,
                            Tensor<T>* grad_a, Tensor<T>* grad_b) {
  const int64_t P = a.dim(0), Q = b.dim(0), D = a.dim(1);
  Tensor<T> coef({P, Q});
  for (int64_t i = 0; i < P; ++i)
    for (int64_t j = 0; j < Q; ++j)
      coef.at2(i, j) = upstream.at2(i, j) / (saved.clamped_a[i] * saved.clamped_b[j]);
  if (grad_a != nullptr) {
    gemm_nn(true, P, D, Q, coef.data.data(), b.data.data(), grad_a->data.data());
    for (int64_t i = 0; i < P; ++i) {
      if (saved.norm_a[i] <= static_cast<T>(eps)) continue;  // clamp active: norm term is constant
      double w = 0.0;
      for (int64_t j = 0; j < Q; ++j)
        w += static_cast<double>(upstream.at2(i, j)) * saved.sim.at2(i, j);
      w /= static_cast<double>(saved.clamped_a[i]) * saved.norm_a[i];
      const T* arow = a.data.data() + i * D;
      T* grow = grad_a->data.data() + i * D;
      for (int64_t d = 0; d < D; ++d) grow[d] -= static_cast<T>(w * arow[d]);
    }
  }
  if (grad_b != nullptr) {
    gemm_tn(true, Q, D, P, coef.data.data(), a.data.data(), grad_b->data.data());
    for (int64_t j = 0; j < Q; ++j) {
      if (saved.norm_b[j] <= static_cast<T>(eps)) continue;
      double w = 0.0;
      for (int64_t i = 0; i < P; ++i)
        w += static_cast<double>(upstream.at2(i, j)) * saved.sim.at2(i, j);
      w /= static_cast<double>(saved.clamped_b[j]) * saved.norm_b[j];
      const T* brow = b.data.data() + j * D;
      T* grow = grad_b->data.data() + j * D;
      for (int64_t d = 0; d < D; ++d) grow[d] -= static_cast<T>(w * brow[d]);
    }
  }
}

// Integer-factor bilinear upsample with pixel-center alignment.
template <typename T>
Tensor<T> upsample_bilinear_forward(const Tensor<T>& x, int64_t factor) {
  if (x.ndim() != 4) throw ShapeError("upsample: expects [N,C,H,W]");
  if (factor < 1) throw ShapeError("upsample: factor must be >= 1");
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t OH = H * factor, OW = W * factor;
  Tensor<T> out({N, C, OH, OW});
  const double inv = 1.0 / static_cast<double>(factor);
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t c = 0; c < C; ++c) {
      const T* src = x.data.data() + (n * C + c) * H * W;
      T* dst = out.data.data() + (n * C + c) * OH * OW;
      for (int64_t oy = 0; oy < OH; ++oy) {
        double sy = (oy + 0.5) * inv - 0.5;
        int64_t y0 = static_cast<int64_t>(std::floor(sy));
        double fy = sy - y0;
        int64_t y0c = std::clamp<int64_t>(y0, 0, H - 1);
        int64_t y1c = std::clamp<int64_t>(y0 + 1, 0, H - 1);
        for (int64_t ox = 0; ox < OW; ++ox) {
          double sx = (ox + 0.5) * inv - 0.5;
          int64_t x0 = static_cast<int64_t>(std::floor(sx));
          double fx = sx - x0;
          int64_t x0c = std::clamp<int64_t>(x0, 0, W - 1);
          int64_t x1c = std::clamp<int64_t>(x0 + 1, 0, W - 1);
          double v = (1 - fy) * ((1 - fx) * src[y0c * W + x0c] + fx * src[y0c * W + x1c]) +
                     fy * ((1 - fx) * src[y1c * W + x0c] + fx * src[y1c * W + x1c]);
          dst[oy * OW + ox] = static_cast<T>(v);
        }
      }
    }
  }
  return out;
}

template <typename T>
void upsample_bilinear_backward(int64_t N, int64_t C, int64_t H, int64_t W, int64_t factor,
                                const Tensor<T>& upstream, Tensor<T>* grad_x) {
  const int64_t OH = H * factor, OW = W * factor;
  const double inv = 1.0 / static_cast<double>(factor);
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t c = 0; c < C; ++c) {
      const T* up = upstream.data.data() + (n * C + c) * OH * OW;
      T* dst = grad_x->data.data() + (n * C + c) * H * W;
      for (int64_t oy = 0; oy < OH; ++oy) {
        double sy = (oy + 0.5) * inv - 0.5;
        int64_t y0 = static_cast<int64_t>(std::floor(sy));
        double fy = sy - y0;
        int64_t y0c = std::clamp<int64_t>(y0, 0, H - 1);
        int64_t y1c = std::clamp<int64_t>(y0 + 1, 0, H - 1);
        for (int64_t ox = 0; ox < OW; ++ox) {
          double sx = (ox + 0.5) * inv - 0.5;
          int64_t x0 = static_cast<int64_t>(std::floor(sx));
          double fx = sx - x0;
          int64_t x0c = std::clamp<int64_t>(x0, 0, W - 1);
          int64_t x1c = std::clamp<int64_t>(x0 + 1, 0, W - 1);
          double g = up[oy * OW + ox];
          dst[y0c * W + x0c] += static_cast<T>(g * (1 - fy) * (1 - fx));
          dst[y0c * W + x1c] += static_cast<T>(g * (1 - fy) * fx);
          dst[y1c * W + x0c] += static_cast<T>(g * fy * (1 - fx));
          dst[y1c * W + x1c] += static_cast<T>(g * fy * fx);
        }
      }
    }
  }
}

}  // namespace panopix::detail
