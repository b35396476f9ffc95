#pragma once

// Differentiable primitives over Tensor<T>. Every op here has a backward
// rule checked against central finite differences in the test suite.
// Reduction orders are fixed, so forward results are bitwise reproducible.

#include <algorithm>
#include <cstring>
#include <limits>

#include "gridsight/tensor.hpp"

namespace gridsight {

namespace detail {

// exp for the float training path: Cephes-style range reduction with a
// degree-6 polynomial, ~2 ulp, branch-free so the activation loops
// vectorize. The double path keeps libm exp.
inline float exp_elem(float x) {
  x = std::min(87.0f, std::max(-87.0f, x));
  const float n = std::floor(x * 1.44269504088896341f + 0.5f);
  // x - n*ln2 with the constant split in two so the reduction stays exact
  float z = x - n * 0.693359375f;
  z -= n * -2.12194440e-4f;
  float p = 1.0f / 720.0f;
  p = p * z + 1.0f / 120.0f;
  p = p * z + 1.0f / 24.0f;
  p = p * z + 1.0f / 6.0f;
  p = p * z + 0.5f;
  p = p * z + 1.0f;
  p = p * z + 1.0f;
  const float scale = std::bit_cast<float>(uint32_t(int32_t(n) + 127) << 23);
  return p * scale;
}

inline double exp_elem(double x) { return std::exp(x); }

template <typename T>
void sigmoid_kernel(const T* __restrict x, T* __restrict y, size_t n) noexcept {
  for (size_t i = 0; i < n; ++i) y[i] = T(1) / (T(1) + exp_elem(-x[i]));
}

template <typename T>
void silu_kernel(const T* __restrict x, T* __restrict y, T* __restrict sig,
                 size_t n) noexcept {
  for (size_t i = 0; i < n; ++i) {
    const T s = T(1) / (T(1) + exp_elem(-x[i]));
    sig[i] = s;
    y[i] = x[i] * s;
  }
}

template <typename T>
void check_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw input_error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
}

template <typename T>
void check_4d(const char* op, const Tensor<T>& t) {
  if (t.ndim() != 4)
    throw input_error(std::string(op) + ": expected 4-d tensor, got " + shape_str(t.shape()));
}

inline int conv_out_extent(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape("add", a, b);
  std::vector<T> out(a.data().begin(), a.data().end());
  const T* pb = b.data().data();
  for (size_t i = 0; i < out.size(); ++i) out[i] += pb[i];
  TensorData<T>*pa = a.impl(), *pbi = b.impl();
  return make_tracked<T>("add", a.shape(), std::move(out), {a, b},
                         [pa, pbi](const TensorData<T>& o) {
                           if (pa->tracked()) {
                             pa->ensure_grad();
                             for (size_t i = 0; i < o.grad.size(); ++i) pa->grad[i] += o.grad[i];
                           }
                           if (pbi->tracked()) {
                             pbi->ensure_grad();
                             for (size_t i = 0; i < o.grad.size(); ++i) pbi->grad[i] += o.grad[i];
                           }
                         });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape("sub", a, b);
  std::vector<T> out(a.data().begin(), a.data().end());
  const T* pb = b.data().data();
  for (size_t i = 0; i < out.size(); ++i) out[i] -= pb[i];
  TensorData<T>*pa = a.impl(), *pbi = b.impl();
  return make_tracked<T>("sub", a.shape(), std::move(out), {a, b},
                         [pa, pbi](const TensorData<T>& o) {
                           if (pa->tracked()) {
                             pa->ensure_grad();
                             for (size_t i = 0; i < o.grad.size(); ++i) pa->grad[i] += o.grad[i];
                           }
                           if (pbi->tracked()) {
                             pbi->ensure_grad();
                             for (size_t i = 0; i < o.grad.size(); ++i) pbi->grad[i] -= o.grad[i];
                           }
                         });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape("mul", a, b);
  std::vector<T> out(a.data().begin(), a.data().end());
  const T* pb = b.data().data();
  for (size_t i = 0; i < out.size(); ++i) out[i] *= pb[i];
  TensorData<T>*pa = a.impl(), *pbi = b.impl();
  return make_tracked<T>("mul", a.shape(), std::move(out), {a, b},
                         [pa, pbi](const TensorData<T>& o) {
                           if (pa->tracked()) {
                             pa->ensure_grad();
                             for (size_t i = 0; i < o.grad.size(); ++i)
                               pa->grad[i] += o.grad[i] * pbi->value[i];
                           }
                           if (pbi->tracked()) {
                             pbi->ensure_grad();
                             for (size_t i = 0; i < o.grad.size(); ++i)
                               pbi->grad[i] += o.grad[i] * pa->value[i];
                           }
                         });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T c) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (T& v : out) v *= c;
  TensorData<T>* pa = a.impl();
  return make_tracked<T>("mul_scalar", a.shape(), std::move(out), {a},
                         [pa, c](const TensorData<T>& o) {
                           if (!pa->tracked()) return;
                           pa->ensure_grad();
                           for (size_t i = 0; i < o.grad.size(); ++i) pa->grad[i] += c * o.grad[i];
                         });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (T& v : out) v += c;
  TensorData<T>* pa = a.impl();
  return make_tracked<T>("add_scalar", a.shape(), std::move(out), {a},
                         [pa](const TensorData<T>& o) {
                           if (!pa->tracked()) return;
                           pa->ensure_grad();
                           for (size_t i = 0; i < o.grad.size(); ++i) pa->grad[i] += o.grad[i];
                         });
}

// Graph identity: same values, new node, so several consumers can branch
// from one producer (the Silence block).
template <typename T>
Tensor<T> identity(const Tensor<T>& a) {
  std::vector<T> out(a.data().begin(), a.data().end());
  TensorData<T>* pa = a.impl();
  return make_tracked<T>("identity", a.shape(), std::move(out), {a},
                         [pa](const TensorData<T>& o) {
                           if (!pa->tracked()) return;
                           pa->ensure_grad();
                           for (size_t i = 0; i < o.grad.size(); ++i) pa->grad[i] += o.grad[i];
                         });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  detail::sigmoid_kernel(a.data().data(), out.data(), out.size());
  TensorData<T>* pia = a.impl();
  return make_tracked<T>("sigmoid", a.shape(), std::move(out), {a},
                         [pia](const TensorData<T>& o) {
                           if (!pia->tracked()) return;
                           pia->ensure_grad();
                           for (size_t i = 0; i < o.grad.size(); ++i) {
                             T y = o.value[i];
                             pia->grad[i] += o.grad[i] * y * (T(1) - y);
                           }
                         });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  auto sig = std::make_shared<std::vector<T>>(a.size());
  detail::silu_kernel(a.data().data(), out.data(), sig->data(), out.size());
  TensorData<T>* pia = a.impl();
  return make_tracked<T>("silu", a.shape(), std::move(out), {a},
                         [pia, sig](const TensorData<T>& o) {
                           if (!pia->tracked()) return;
                           pia->ensure_grad();
                           for (size_t i = 0; i < o.grad.size(); ++i) {
                             T s = (*sig)[i];
                             T x = pia->value[i];
                             pia->grad[i] += o.grad[i] * (s + x * s * (T(1) - s));
                           }
                         });
}

// Element-wise square root; inputs must be non-negative.
template <typename T>
Tensor<T> sqrt_elem(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  const T* pa = a.data().data();
  for (size_t i = 0; i < out.size(); ++i) {
    if (pa[i] < T(0)) throw numeric_error("sqrt: negative input");
    out[i] = std::sqrt(pa[i]);
  }
  TensorData<T>* pia = a.impl();
  return make_tracked<T>("sqrt", a.shape(), std::move(out), {a},
                         [pia](const TensorData<T>& o) {
                           if (!pia->tracked()) return;
                           pia->ensure_grad();
                           for (size_t i = 0; i < o.grad.size(); ++i)
                             pia->grad[i] += o.grad[i] * T(0.5) / o.value[i];
                         });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = T(0);
  for (T v : a.data()) acc += v;
  TensorData<T>* pa = a.impl();
  return make_tracked<T>("sum", Shape{1}, std::vector<T>{acc}, {a},
                         [pa](const TensorData<T>& o) {
                           if (!pa->tracked()) return;
                           pa->ensure_grad();
                           T g = o.grad[0];
                           for (size_t i = 0; i < pa->grad.size(); ++i) pa->grad[i] += g;
                         });
}

// ---------------------------------------------------------------- convolution

// Standard cross-correlation, zero padding, NCHW. Output extents follow
// floor((in + 2*pad - k) / stride) + 1.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int stride,
                 int padding) {
  detail::check_4d("conv2d", x);
  detail::check_4d("conv2d", w);
  if (stride < 1) throw input_error("conv2d: stride must be >= 1");
  if (padding < 0) throw input_error("conv2d: padding must be >= 0");
  const int N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != Cin)
    throw input_error("conv2d: input channels " + std::to_string(Cin) +
                      " != weight in-channels " + std::to_string(w.dim(1)));
  if (H + 2 * padding < kh)
    throw input_error("conv2d: padded height " + std::to_string(H + 2 * padding) +
                      " < kernel height " + std::to_string(kh));
  if (W + 2 * padding < kw)
    throw input_error("conv2d: padded width " + std::to_string(W + 2 * padding) +
                      " < kernel width " + std::to_string(kw));
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != Cout))
    throw input_error("conv2d: bias length != out channels " + std::to_string(Cout));

  const int OH = detail::conv_out_extent(H, kh, stride, padding);
  const int OW = detail::conv_out_extent(W, kw, stride, padding);
  const int64_t K = int64_t(Cin) * kh * kw;
  const int64_t P = int64_t(OH) * OW;

  // im2col for one sample: col[k][p], k = (c,ki,kj), p = (oi,oj).
  auto build_col = [=](const T* xs, T* col) {
    for (int c = 0; c < Cin; ++c) {
      const T* plane = xs + int64_t(c) * H * W;
      for (int ki = 0; ki < kh; ++ki) {
        for (int kj = 0; kj < kw; ++kj) {
          T* row = col + (int64_t(c) * kh * kw + ki * kw + kj) * P;
          for (int oi = 0; oi < OH; ++oi) {
            int si = oi * stride - padding + ki;
            T* dst = row + int64_t(oi) * OW;
            if (si < 0 || si >= H) {
              std::fill(dst, dst + OW, T(0));
              continue;
            }
            const T* src = plane + int64_t(si) * W;
            if (stride == 1) {
              int sj0 = -padding + kj;
              int lo = std::max(0, -sj0);
              int hi = std::min(OW, W - sj0);
              if (lo > 0) std::fill(dst, dst + lo, T(0));
              if (hi > lo) std::memcpy(dst + lo, src + sj0 + lo, size_t(hi - lo) * sizeof(T));
              if (hi < OW) std::fill(dst + std::max(hi, lo), dst + OW, T(0));
            } else {
              for (int oj = 0; oj < OW; ++oj) {
                int sj = oj * stride - padding + kj;
                dst[oj] = (sj >= 0 && sj < W) ? src[sj] : T(0);
              }
            }
          }
        }
      }
    }
  };

  std::vector<T> out(size_t(N) * Cout * P);
  {
    std::vector<T> col(size_t(K) * P);
    const T* xd = x.data().data();
    const T* wd = w.data().data();
    const T* bd = bias.defined() ? bias.data().data() : nullptr;
    for (int n = 0; n < N; ++n) {
      build_col(xd + int64_t(n) * Cin * H * W, col.data());
      for (int co = 0; co < Cout; ++co) {
        T* orow = out.data() + (int64_t(n) * Cout + co) * P;
        std::fill(orow, orow + P, bd ? bd[co] : T(0));
        const T* wrow = wd + int64_t(co) * K;
        for (int64_t k = 0; k < K; ++k) {
          const T a = wrow[k];
          const T* crow = col.data() + k * P;
          for (int64_t p = 0; p < P; ++p) orow[p] += a * crow[p];
        }
      }
    }
  }

  TensorData<T>* px = x.impl();
  TensorData<T>* pw = w.impl();
  TensorData<T>* pb = bias.defined() ? bias.impl() : nullptr;
  std::vector<Tensor<T>> parents = {x, w};
  if (bias.defined()) parents.push_back(bias);

  auto back = [=](const TensorData<T>& o) {
    const bool need_x = px->tracked(), need_w = pw->tracked();
    const bool need_b = pb && pb->tracked();
    if (need_x) px->ensure_grad();
    if (need_w) pw->ensure_grad();
    if (need_b) pb->ensure_grad();
    std::vector<T> col;
    if (need_w || need_x) col.resize(size_t(K) * P);
    std::vector<T> colT;  // p-major transpose so the dW inner loop runs over k
    if (need_w) colT.resize(size_t(K) * P);
    std::vector<T> dcol;
    if (need_x) dcol.resize(size_t(K) * P);
    for (int n = 0; n < N; ++n) {
      const T* dy = o.grad.data() + int64_t(n) * Cout * P;
      if (need_b) {
        for (int co = 0; co < Cout; ++co) {
          T acc = T(0);
          const T* dyr = dy + int64_t(co) * P;
          for (int64_t p = 0; p < P; ++p) acc += dyr[p];
          pb->grad[co] += acc;
        }
      }
      if (need_w || need_x) build_col(px->value.data() + int64_t(n) * Cin * H * W, col.data());
      if (need_w) {
        constexpr int64_t kTile = 64;
        for (int64_t p0 = 0; p0 < P; p0 += kTile)
          for (int64_t k = 0; k < K; ++k)
            for (int64_t p = p0; p < std::min(P, p0 + kTile); ++p)
              colT[p * K + k] = col[k * P + p];
        for (int co = 0; co < Cout; ++co) {
          const T* dyr = dy + int64_t(co) * P;
          T* dwrow = pw->grad.data() + int64_t(co) * K;
          for (int64_t p = 0; p < P; ++p) {
            const T a = dyr[p];
            const T* crow = colT.data() + p * K;
            for (int64_t k = 0; k < K; ++k) dwrow[k] += a * crow[k];
          }
        }
      }
      if (need_x) {
        std::fill(dcol.begin(), dcol.end(), T(0));
        for (int64_t k = 0; k < K; ++k) {
          T* drow = dcol.data() + k * P;
          for (int co = 0; co < Cout; ++co) {
            const T a = pw->value[int64_t(co) * K + k];
            const T* dyr = dy + int64_t(co) * P;
            for (int64_t p = 0; p < P; ++p) drow[p] += a * dyr[p];
          }
        }
        // col2im scatter, fixed row-major order
        T* dx = px->grad.data() + int64_t(n) * Cin * H * W;
        for (int c = 0; c < Cin; ++c) {
          for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
              const T* drow = dcol.data() + (int64_t(c) * kh * kw + ki * kw + kj) * P;
              T* plane = dx + int64_t(c) * H * W;
              for (int oi = 0; oi < OH; ++oi) {
                int si = oi * stride - padding + ki;
                if (si < 0 || si >= H) continue;
                const T* src = drow + int64_t(oi) * OW;
                T* dstrow = plane + int64_t(si) * W;
                if (stride == 1) {
                  int sj0 = -padding + kj;
                  int lo = std::max(0, -sj0);
                  int hi = std::min(OW, W - sj0);
                  for (int oj = lo; oj < hi; ++oj) dstrow[sj0 + oj] += src[oj];
                } else {
                  for (int oj = 0; oj < OW; ++oj) {
                    int sj = oj * stride - padding + kj;
                    if (sj >= 0 && sj < W) dstrow[sj] += src[oj];
                  }
                }
              }
            }
          }
        }
      }
    }
  };

  return make_tracked<T>("conv2d", Shape{N, Cout, OH, OW}, std::move(out), std::move(parents),
                         std::move(back));
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, int stride, int padding) {
  return conv2d(x, w, Tensor<T>(), stride, padding);
}

// ------------------------------------------------------------------ batchnorm

// Per-channel batch normalization. Train mode normalizes with batch
// statistics and (optionally) moves the running stats by `momentum`;
// infer mode normalizes with the running stats.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                      bool update_stats, T eps, T momentum) {
  detail::check_4d("batchnorm2d", x);
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (gamma.size() != C || beta.size() != C || running_mean.size() != C ||
      running_var.size() != C)
    throw input_error("batchnorm2d: parameter length != channel count " + std::to_string(C));
  const int64_t plane = int64_t(H) * W;
  const int64_t m = int64_t(N) * plane;
  if (training && m < 2)
    throw input_error("batchnorm2d: train mode needs N*H*W >= 2, got " + std::to_string(m));

  auto mean_v = std::make_shared<std::vector<T>>(C);
  auto invstd_v = std::make_shared<std::vector<T>>(C);
  const T* xd = x.data().data();

  if (training) {
    for (int c = 0; c < C; ++c) {
      T s = T(0);
      for (int n = 0; n < N; ++n) {
        const T* p = xd + (int64_t(n) * C + c) * plane;
        for (int64_t i = 0; i < plane; ++i) s += p[i];
      }
      T mu = s / T(m);
      T sq = T(0);
      for (int n = 0; n < N; ++n) {
        const T* p = xd + (int64_t(n) * C + c) * plane;
        for (int64_t i = 0; i < plane; ++i) {
          T d = p[i] - mu;
          sq += d * d;
        }
      }
      T var = sq / T(m);
      if (!std::isfinite(static_cast<double>(var)))
        throw numeric_error("batchnorm2d: non-finite batch variance");
      (*mean_v)[c] = mu;
      (*invstd_v)[c] = T(1) / std::sqrt(var + eps);
      if (update_stats) {
        running_mean.data()[c] = (T(1) - momentum) * running_mean.data()[c] + momentum * mu;
        running_var.data()[c] = (T(1) - momentum) * running_var.data()[c] + momentum * var;
      }
    }
  } else {
    for (int c = 0; c < C; ++c) {
      (*mean_v)[c] = running_mean.data()[c];
      (*invstd_v)[c] = T(1) / std::sqrt(running_var.data()[c] + eps);
    }
  }

  std::vector<T> out(x.size());
  const T* gd = gamma.data().data();
  const T* bd = beta.data().data();
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const T mu = (*mean_v)[c], is = (*invstd_v)[c], g = gd[c], b = bd[c];
      const T* p = xd + (int64_t(n) * C + c) * plane;
      T* q = out.data() + (int64_t(n) * C + c) * plane;
      for (int64_t i = 0; i < plane; ++i) q[i] = (p[i] - mu) * is * g + b;
    }
  }

  TensorData<T>*px = x.impl(), *pg = gamma.impl(), *pbt = beta.impl();
  auto back = [=](const TensorData<T>& o) {
    const bool need_x = px->tracked(), need_g = pg->tracked(), need_b = pbt->tracked();
    if (need_x) px->ensure_grad();
    if (need_g) pg->ensure_grad();
    if (need_b) pbt->ensure_grad();
    for (int c = 0; c < C; ++c) {
      const T mu = (*mean_v)[c], is = (*invstd_v)[c], g = pg->value[c];
      // channel reductions
      T sum_dy = T(0), sum_dy_xhat = T(0);
      for (int n = 0; n < N; ++n) {
        const T* dy = o.grad.data() + (int64_t(n) * C + c) * plane;
        const T* xv = px->value.data() + (int64_t(n) * C + c) * plane;
        for (int64_t i = 0; i < plane; ++i) {
          sum_dy += dy[i];
          sum_dy_xhat += dy[i] * (xv[i] - mu) * is;
        }
      }
      if (need_g) pg->grad[c] += sum_dy_xhat;
      if (need_b) pbt->grad[c] += sum_dy;
      if (!need_x) continue;
      if (training) {
        const T inv_m = T(1) / T(m);
        for (int n = 0; n < N; ++n) {
          const T* dy = o.grad.data() + (int64_t(n) * C + c) * plane;
          const T* xv = px->value.data() + (int64_t(n) * C + c) * plane;
          T* dx = px->grad.data() + (int64_t(n) * C + c) * plane;
          for (int64_t i = 0; i < plane; ++i) {
            T xhat = (xv[i] - mu) * is;
            dx[i] += g * is * (dy[i] - inv_m * sum_dy - xhat * inv_m * sum_dy_xhat);
          }
        }
      } else {
        for (int n = 0; n < N; ++n) {
          const T* dy = o.grad.data() + (int64_t(n) * C + c) * plane;
          T* dx = px->grad.data() + (int64_t(n) * C + c) * plane;
          for (int64_t i = 0; i < plane; ++i) dx[i] += dy[i] * g * is;
        }
      }
    }
  };

  return make_tracked<T>("batchnorm2d", x.shape(), std::move(out), {x, gamma, beta},
                         std::move(back));
}

// -------------------------------------------------------------------- pooling

// Max pooling; padded cells count as -inf. Gradient routes to the first
// (row-major) argmax of each window.
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, int k, int stride, int padding) {
  detail::check_4d("maxpool2d", x);
  if (k < 1 || stride < 1 || padding < 0) throw input_error("maxpool2d: bad k/stride/padding");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H + 2 * padding < k || W + 2 * padding < k)
    throw input_error("maxpool2d: kernel " + std::to_string(k) + " larger than padded input " +
                      std::to_string(std::min(H, W) + 2 * padding));
  const int OH = detail::conv_out_extent(H, k, stride, padding);
  const int OW = detail::conv_out_extent(W, k, stride, padding);

  std::vector<T> out(size_t(N) * C * OH * OW);
  auto argmax = std::make_shared<std::vector<int64_t>>(out.size(), -1);
  const T* xd = x.data().data();
  int64_t oi_idx = 0;
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const T* plane = xd + (int64_t(n) * C + c) * H * W;
      const int64_t plane_off = (int64_t(n) * C + c) * H * W;
      for (int oi = 0; oi < OH; ++oi) {
        for (int oj = 0; oj < OW; ++oj, ++oi_idx) {
          T best = -std::numeric_limits<T>::infinity();
          int64_t best_at = -1;
          for (int ki = 0; ki < k; ++ki) {
            int si = oi * stride - padding + ki;
            if (si < 0 || si >= H) continue;
            for (int kj = 0; kj < k; ++kj) {
              int sj = oj * stride - padding + kj;
              if (sj < 0 || sj >= W) continue;
              T v = plane[int64_t(si) * W + sj];
              if (v > best) {
                best = v;
                best_at = plane_off + int64_t(si) * W + sj;
              }
            }
          }
          out[oi_idx] = best;
          (*argmax)[oi_idx] = best_at;
        }
      }
    }
  }

  TensorData<T>* px = x.impl();
  return make_tracked<T>("maxpool2d", Shape{N, C, OH, OW}, std::move(out), {x},
                         [px, argmax](const TensorData<T>& o) {
                           if (!px->tracked()) return;
                           px->ensure_grad();
                           for (size_t i = 0; i < o.grad.size(); ++i) {
                             int64_t at = (*argmax)[i];
                             if (at >= 0) px->grad[at] += o.grad[i];
                           }
                         });
}

// ------------------------------------------------------------------- resizing

// Each source cell replicated into a factor x factor block.
template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& x, int factor) {
  detail::check_4d("upsample_nearest", x);
  if (factor < 1) throw input_error("upsample_nearest: factor must be >= 1");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int OH = H * factor, OW = W * factor;
  std::vector<T> out(size_t(N) * C * OH * OW);
  const T* xd = x.data().data();
  for (int64_t nc = 0; nc < int64_t(N) * C; ++nc) {
    const T* src = xd + nc * H * W;
    T* dst = out.data() + nc * OH * OW;
    for (int oi = 0; oi < OH; ++oi) {
      const T* srow = src + int64_t(oi / factor) * W;
      T* drow = dst + int64_t(oi) * OW;
      for (int oj = 0; oj < OW; ++oj) drow[oj] = srow[oj / factor];
    }
  }
  TensorData<T>* px = x.impl();
  return make_tracked<T>("upsample_nearest", Shape{N, C, OH, OW}, std::move(out), {x},
                         [px, N, C, H, W, factor](const TensorData<T>& o) {
                           if (!px->tracked()) return;
                           px->ensure_grad();
                           const int OH = H * factor, OW = W * factor;
                           for (int64_t nc = 0; nc < int64_t(N) * C; ++nc) {
                             const T* gsrc = o.grad.data() + nc * OH * OW;
                             T* gdst = px->grad.data() + nc * H * W;
                             for (int oi = 0; oi < OH; ++oi)
                               for (int oj = 0; oj < OW; ++oj)
                                 gdst[int64_t(oi / factor) * W + oj / factor] +=
                                     gsrc[int64_t(oi) * OW + oj];
                           }
                         });
}

// Nearest-neighbor resize to an arbitrary target extent (used by CB-Fuse).
template <typename T>
Tensor<T> resize_nearest(const Tensor<T>& x, int out_h, int out_w) {
  detail::check_4d("resize_nearest", x);
  if (out_h < 1 || out_w < 1) throw input_error("resize_nearest: bad target size");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (out_h == H && out_w == W) {
    // still a graph node so gradients flow; plain copy
    std::vector<T> out(x.data().begin(), x.data().end());
    TensorData<T>* px = x.impl();
    return make_tracked<T>("resize_nearest", x.shape(), std::move(out), {x},
                           [px](const TensorData<T>& o) {
                             if (!px->tracked()) return;
                             px->ensure_grad();
                             for (size_t i = 0; i < o.grad.size(); ++i) px->grad[i] += o.grad[i];
                           });
  }
  std::vector<T> out(size_t(N) * C * out_h * out_w);
  const T* xd = x.data().data();
  for (int64_t nc = 0; nc < int64_t(N) * C; ++nc) {
    const T* src = xd + nc * H * W;
    T* dst = out.data() + nc * int64_t(out_h) * out_w;
    for (int oi = 0; oi < out_h; ++oi) {
      int si = int(int64_t(oi) * H / out_h);
      for (int oj = 0; oj < out_w; ++oj) {
        int sj = int(int64_t(oj) * W / out_w);
        dst[int64_t(oi) * out_w + oj] = src[int64_t(si) * W + sj];
      }
    }
  }
  TensorData<T>* px = x.impl();
  return make_tracked<T>("resize_nearest", Shape{N, C, out_h, out_w}, std::move(out), {x},
                         [px, N, C, H, W, out_h, out_w](const TensorData<T>& o) {
                           if (!px->tracked()) return;
                           px->ensure_grad();
                           for (int64_t nc = 0; nc < int64_t(N) * C; ++nc) {
                             const T* gsrc = o.grad.data() + nc * int64_t(out_h) * out_w;
                             T* gdst = px->grad.data() + nc * H * W;
                             for (int oi = 0; oi < out_h; ++oi) {
                               int si = int(int64_t(oi) * H / out_h);
                               for (int oj = 0; oj < out_w; ++oj) {
                                 int sj = int(int64_t(oj) * W / out_w);
                                 gdst[int64_t(si) * W + sj] += gsrc[int64_t(oi) * out_w + oj];
                               }
                             }
                           }
                         });
}

// ------------------------------------------------------------ shape plumbing

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw input_error("concat_channels: empty input list");
  detail::check_4d("concat_channels", xs[0]);
  const int N = xs[0].dim(0), H = xs[0].dim(2), W = xs[0].dim(3);
  int C = 0;
  for (const auto& t : xs) {
    detail::check_4d("concat_channels", t);
    if (t.dim(0) != N || t.dim(2) != H || t.dim(3) != W)
      throw input_error("concat_channels: spatial mismatch " + shape_str(t.shape()) + " vs " +
                        shape_str(xs[0].shape()));
    C += t.dim(1);
  }
  const int64_t plane = int64_t(H) * W;
  std::vector<T> out(size_t(N) * C * plane);
  int c0 = 0;
  for (const auto& t : xs) {
    const int tc = t.dim(1);
    const T* src = t.data().data();
    for (int n = 0; n < N; ++n)
      std::memcpy(out.data() + (int64_t(n) * C + c0) * plane,
                  src + int64_t(n) * tc * plane, size_t(tc) * plane * sizeof(T));
    c0 += tc;
  }
  std::vector<Tensor<T>> parents = xs;
  auto back = [parents, N, C, plane](const TensorData<T>& o) {
    int c0 = 0;
    for (const auto& t : parents) {
      const int tc = t.dim(1);
      TensorData<T>* p = t.impl();
      if (p->tracked()) {
        p->ensure_grad();
        for (int n = 0; n < N; ++n) {
          const T* gs = o.grad.data() + (int64_t(n) * C + c0) * plane;
          T* gd = p->grad.data() + int64_t(n) * tc * plane;
          for (int64_t i = 0; i < int64_t(tc) * plane; ++i) gd[i] += gs[i];
        }
      }
      c0 += tc;
    }
  };
  return make_tracked<T>("concat_channels", Shape{N, C, H, W}, std::move(out),
                         std::move(parents), std::move(back));
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int c0, int len) {
  detail::check_4d("slice_channels", x);
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (c0 < 0 || len < 1 || c0 + len > C)
    throw input_error("slice_channels: [" + std::to_string(c0) + "," +
                      std::to_string(c0 + len) + ") out of " + std::to_string(C) + " channels");
  const int64_t plane = int64_t(H) * W;
  std::vector<T> out(size_t(N) * len * plane);
  const T* xd = x.data().data();
  for (int n = 0; n < N; ++n)
    std::memcpy(out.data() + int64_t(n) * len * plane, xd + (int64_t(n) * C + c0) * plane,
                size_t(len) * plane * sizeof(T));
  TensorData<T>* px = x.impl();
  return make_tracked<T>("slice_channels", Shape{N, len, H, W}, std::move(out), {x},
                         [px, N, C, c0, len, plane](const TensorData<T>& o) {
                           if (!px->tracked()) return;
                           px->ensure_grad();
                           for (int n = 0; n < N; ++n) {
                             const T* gs = o.grad.data() + int64_t(n) * len * plane;
                             T* gd = px->grad.data() + (int64_t(n) * C + c0) * plane;
                             for (int64_t i = 0; i < int64_t(len) * plane; ++i) gd[i] += gs[i];
                           }
                         });
}

// Slice along the last dimension (predictions in N,S,S,(B*5+C) layout).
template <typename T>
Tensor<T> slice_last(const Tensor<T>& x, int o0, int len) {
  const int L = x.shape().back();
  if (o0 < 0 || len < 1 || o0 + len > L)
    throw input_error("slice_last: [" + std::to_string(o0) + "," + std::to_string(o0 + len) +
                      ") out of " + std::to_string(L));
  const int64_t rows = x.size() / L;
  Shape os = x.shape();
  os.back() = len;
  std::vector<T> out(size_t(rows) * len);
  const T* xd = x.data().data();
  for (int64_t r = 0; r < rows; ++r)
    std::memcpy(out.data() + r * len, xd + r * L + o0, size_t(len) * sizeof(T));
  TensorData<T>* px = x.impl();
  return make_tracked<T>("slice_last", std::move(os), std::move(out), {x},
                         [px, rows, L, o0, len](const TensorData<T>& o) {
                           if (!px->tracked()) return;
                           px->ensure_grad();
                           for (int64_t r = 0; r < rows; ++r) {
                             const T* gs = o.grad.data() + r * len;
                             T* gd = px->grad.data() + r * L + o0;
                             for (int i = 0; i < len; ++i) gd[i] += gs[i];
                           }
                         });
}

template <typename T>
Tensor<T> nchw_to_nhwc(const Tensor<T>& x) {
  detail::check_4d("nchw_to_nhwc", x);
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  std::vector<T> out(x.size());
  const T* xd = x.data().data();
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j)
          out[((int64_t(n) * H + i) * W + j) * C + c] = xd[((int64_t(n) * C + c) * H + i) * W + j];
  TensorData<T>* px = x.impl();
  return make_tracked<T>("nchw_to_nhwc", Shape{N, H, W, C}, std::move(out), {x},
                         [px, N, C, H, W](const TensorData<T>& o) {
                           if (!px->tracked()) return;
                           px->ensure_grad();
                           for (int n = 0; n < N; ++n)
                             for (int c = 0; c < C; ++c)
                               for (int i = 0; i < H; ++i)
                                 for (int j = 0; j < W; ++j)
                                   px->grad[((int64_t(n) * C + c) * H + i) * W + j] +=
                                       o.grad[((int64_t(n) * H + i) * W + j) * C + c];
                         });
}

// --------------------------------------------------------------- fused losses

// Per-row softmax cross-entropy over the last dimension against a constant
// probability target. Output shape = input shape with last extent 1.
template <typename T>
Tensor<T> softmax_xent_lastdim(const Tensor<T>& logits, const Tensor<T>& target) {
  detail::check_same_shape("softmax_xent", logits, target);
  const int L = logits.shape().back();
  const int64_t rows = logits.size() / L;
  Shape os = logits.shape();
  os.back() = 1;
  std::vector<T> out(static_cast<size_t>(rows));
  auto probs = std::make_shared<std::vector<T>>(logits.size());
  const T* xd = logits.data().data();
  const T* td = target.data().data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = xd + r * L;
    T m = xr[0];
    for (int k = 1; k < L; ++k) m = std::max(m, xr[k]);
    T z = T(0);
    for (int k = 0; k < L; ++k) {
      T e = std::exp(xr[k] - m);
      (*probs)[r * L + k] = e;
      z += e;
    }
    T inv_z = T(1) / z;
    T xent = std::log(z) + m;
    for (int k = 0; k < L; ++k) {
      (*probs)[r * L + k] *= inv_z;
      xent -= td[r * L + k] * xr[k];
    }
    out[r] = xent;
  }
  TensorData<T>*px = logits.impl(), *pt = target.impl();
  return make_tracked<T>("softmax_xent", std::move(os), std::move(out), {logits, target},
                         [px, pt, probs, rows, L](const TensorData<T>& o) {
                           if (!px->tracked()) return;
                           px->ensure_grad();
                           for (int64_t r = 0; r < rows; ++r) {
                             T g = o.grad[r];
                             for (int k = 0; k < L; ++k)
                               px->grad[r * L + k] +=
                                   g * ((*probs)[r * L + k] - pt->value[r * L + k]);
                           }
                         });
}

}  // namespace gridsight
