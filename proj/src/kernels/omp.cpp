// SPDX-License-Identifier: Apache-2.0
#include <omp.h>

#include <algorithm>
#include <cmath>
#include <cstring>

#include "attention_layout.hpp"
#include "echoedm/kernels.hpp"

namespace echoedm::kernels {

namespace {
int g_threads = 0;  // 0: OpenMP default
}

void set_num_threads(int n) {
  g_threads = std::max(1, n);
  omp_set_num_threads(g_threads);
}

int num_threads() { return g_threads > 0 ? g_threads : omp_get_max_threads(); }

namespace omp {
namespace {

constexpr int kTileP = 256;  // positions per output tile
constexpr int kRows = 8;     // output rows per register block

/// One 64-byte SIMD register of T, unaligned.
template <class T>
struct Simd {
  typedef T type __attribute__((vector_size(64), aligned(sizeof(T)), may_alias));
  static constexpr int width = 64 / sizeof(T);
};

/// C[m][p] (+)= sum_k A[m*K + k] * B[k][p] for p in [p0, p0 + pn).
/// Rows of B and C are `ldp` apart. Kept out of line and written with
/// explicit vectors: GCC does not register-allocate a generic version.
template <class T>
[[gnu::noinline]] void gemm_tile(const T* __restrict A, int M, int K,
                                 const T* __restrict B, T* __restrict C,
                                 std::size_t ldp, int p0, int pn) {
  using V = typename Simd<T>::type;
  constexpr int W = Simd<T>::width;
  int m = 0;
  for (; m + kRows <= M; m += kRows) {
    const T* a = A + static_cast<std::size_t>(m) * K;
    int p = 0;
    for (; p + 2 * W <= pn; p += 2 * W) {
      V acc0[kRows], acc1[kRows];
      for (int r = 0; r < kRows; ++r) {
        acc0[r] = *reinterpret_cast<const V*>(C + (m + r) * ldp + p0 + p);
        acc1[r] = *reinterpret_cast<const V*>(C + (m + r) * ldp + p0 + p + W);
      }
      const T* b = B + p0 + p;
      for (int k = 0; k < K; ++k, b += ldp) {
        const V b0 = *reinterpret_cast<const V*>(b);
        const V b1 = *reinterpret_cast<const V*>(b + W);
        for (int r = 0; r < kRows; ++r) {
          const T av = a[r * K + k];
          acc0[r] += av * b0;
          acc1[r] += av * b1;
        }
      }
      for (int r = 0; r < kRows; ++r) {
        *reinterpret_cast<V*>(C + (m + r) * ldp + p0 + p) = acc0[r];
        *reinterpret_cast<V*>(C + (m + r) * ldp + p0 + p + W) = acc1[r];
      }
    }
    for (; p < pn; ++p)
      for (int r = 0; r < kRows; ++r) {
        T acc = C[(m + r) * ldp + p0 + p];
        for (int k = 0; k < K; ++k) acc += a[r * K + k] * B[k * ldp + p0 + p];
        C[(m + r) * ldp + p0 + p] = acc;
      }
  }
  for (; m < M; ++m) {
    T* c = C + m * ldp + p0;
    for (int k = 0; k < K; ++k) {
      const T av = A[m * K + k];
      const T* b = B + k * ldp + p0;
      for (int p = 0; p < pn; ++p) c[p] += av * b[p];
    }
  }
}

/// C = A * B with A (M x K, row-major), B (K x P), C (M x P), tiled over P.
/// C must hold the initial values to accumulate onto.
template <class T>
void gemm_nn(const T* A, int M, int K, const T* B, T* C, std::size_t P) {
  const int tiles = static_cast<int>((P + kTileP - 1) / kTileP);
#pragma omp parallel for schedule(static)
  for (int t = 0; t < tiles; ++t) {
    const int p0 = t * kTileP;
    const int pn = static_cast<int>(std::min<std::size_t>(kTileP, P - p0));
    gemm_tile(A, M, K, B, C, P, p0, pn);
  }
}

/// Rows [m0, m1) of C[m][n] += sum_p A[m][p] * B[n][p].
template <class T>
[[gnu::noinline]] void gemm_nt_rows(const T* __restrict A, int m0, int m1,
                                    const T* __restrict B, int N, T* __restrict C,
                                    std::size_t P) {
  using V = typename Simd<T>::type;
  constexpr int W = Simd<T>::width;
  const std::size_t Pv = P - P % W;
  auto hsum = [](const V& v) {
    T s = 0;
    for (int i = 0; i < W; ++i) s += v[i];
    return s;
  };
  for (int m = m0; m < m1; ++m) {
    const T* a = A + m * P;
    int n = 0;
    for (; n + 4 <= N; n += 4) {
      const T* b0 = B + (n + 0) * P;
      const T* b1 = B + (n + 1) * P;
      const T* b2 = B + (n + 2) * P;
      const T* b3 = B + (n + 3) * P;
      V s0 = {}, s1 = {}, s2 = {}, s3 = {};
      for (std::size_t p = 0; p < Pv; p += W) {
        const V av = *reinterpret_cast<const V*>(a + p);
        s0 += av * *reinterpret_cast<const V*>(b0 + p);
        s1 += av * *reinterpret_cast<const V*>(b1 + p);
        s2 += av * *reinterpret_cast<const V*>(b2 + p);
        s3 += av * *reinterpret_cast<const V*>(b3 + p);
      }
      T t0 = hsum(s0), t1 = hsum(s1), t2 = hsum(s2), t3 = hsum(s3);
      for (std::size_t p = Pv; p < P; ++p) {
        t0 += a[p] * b0[p];
        t1 += a[p] * b1[p];
        t2 += a[p] * b2[p];
        t3 += a[p] * b3[p];
      }
      C[m * N + n + 0] += t0;
      C[m * N + n + 1] += t1;
      C[m * N + n + 2] += t2;
      C[m * N + n + 3] += t3;
    }
    for (; n < N; ++n) {
      const T* b = B + n * P;
      T acc = 0;
      for (std::size_t p = 0; p < P; ++p) acc += a[p] * b[p];
      C[m * N + n] += acc;
    }
  }
}

/// C[m][n] += sum_p A[m][p] * B[n][p]; parallel over m.
template <class T>
void gemm_nt(const T* A, int M, const T* B, int N, T* C, std::size_t P) {
#pragma omp parallel for schedule(static)
  for (int m = 0; m < M; ++m) gemm_nt_rows(A, m, m + 1, B, N, C, P);
}

template <class T>
std::vector<T>& scratch(int slot) {
  thread_local std::vector<T> buffers[3];
  return buffers[slot];
}

/// col[(ci * k + ky) * k + kx][p] = x[ci] shifted by (ky - r, kx - r).
template <class T>
void im2col(const Tensor<T>& x, int k, std::vector<T>& col) {
  const int r = k / 2;
  const std::size_t P = x.plane();
  col.resize(static_cast<std::size_t>(x.c) * k * k * P);
#pragma omp parallel for schedule(static)
  for (int ci = 0; ci < x.c; ++ci)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        T* dst = col.data() + ((ci * k + ky) * k + kx) * P;
        const int dy = ky - r, dx = kx - r;
        const int x0 = std::max(0, -dx), x1 = std::min(x.w, x.w - dx);
        for (int f = 0; f < x.f; ++f)
          for (int y = 0; y < x.h; ++y) {
            const int sy = y + dy;
            T* d = dst + (static_cast<std::size_t>(f) * x.h + y) * x.w;
            if (sy < 0 || sy >= x.h) {
              std::fill(d, d + x.w, T(0));
              continue;
            }
            const T* s = &x.at(ci, f, sy, 0);
            std::fill(d, d + x0, T(0));
            for (int xx = x0; xx < x1; ++xx) d[xx] = s[xx + dx];
            std::fill(d + x1, d + x.w, T(0));
          }
      }
}

/// Adjoint of im2col.
template <class T>
void col2im(const std::vector<T>& col, int k, Tensor<T>& dx) {
  const int r = k / 2;
  const std::size_t P = dx.plane();
#pragma omp parallel for schedule(static)
  for (int ci = 0; ci < dx.c; ++ci)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const T* src = col.data() + ((ci * k + ky) * k + kx) * P;
        const int dy = ky - r, ddx = kx - r;
        const int x0 = std::max(0, -ddx), x1 = std::min(dx.w, dx.w - ddx);
        for (int f = 0; f < dx.f; ++f)
          for (int y = 0; y < dx.h; ++y) {
            const int sy = y + dy;
            if (sy < 0 || sy >= dx.h) continue;
            const T* s = src + (static_cast<std::size_t>(f) * dx.h + y) * dx.w;
            T* d = &dx.at(ci, f, sy, 0);
            for (int xx = x0; xx < x1; ++xx) d[xx + ddx] += s[xx];
          }
      }
}

}  // namespace

template <class T>
void conv2d_forward(const Tensor<T>& x, std::span<const T> weight,
                    std::span<const T> bias, ConvShape s, Tensor<T>& out) {
  const std::size_t P = x.plane();
  out = Tensor<T>(s.cout, x.f, x.h, x.w);
  if (!bias.empty())
    for (int co = 0; co < s.cout; ++co)
      std::fill(out.channel(co), out.channel(co) + P, bias[co]);
  const int K = s.cin * s.k * s.k;
  if (s.k == 1) {
    gemm_nn(weight.data(), s.cout, K, x.data.data(), out.data.data(), P);
    return;
  }
  auto& col = scratch<T>(0);
  im2col(x, s.k, col);
  gemm_nn(weight.data(), s.cout, K, col.data(), out.data.data(), P);
}

template <class T>
void conv2d_backward(const Tensor<T>& x, std::span<const T> weight,
                     const Tensor<T>& dout, ConvShape s, Tensor<T>* dx,
                     std::span<T> dweight, std::span<T> dbias) {
  const std::size_t P = x.plane();
  const int K = s.cin * s.k * s.k;
  if (!dbias.empty())
    for (int co = 0; co < s.cout; ++co) {
      const T* g = dout.channel(co);
      T acc = 0;
      for (std::size_t p = 0; p < P; ++p) acc += g[p];
      dbias[co] += acc;
    }

  const T* col_ptr = x.data.data();
  if (s.k != 1) {
    auto& col = scratch<T>(0);
    im2col(x, s.k, col);
    col_ptr = col.data();
  }
  gemm_nt(dout.data.data(), s.cout, col_ptr, K, dweight.data(), P);

  if (!dx) return;
  auto& wt = scratch<T>(1);
  wt.resize(static_cast<std::size_t>(K) * s.cout);
  for (int co = 0; co < s.cout; ++co)
    for (int k = 0; k < K; ++k) wt[k * s.cout + co] = weight[co * K + k];
  if (s.k == 1) {
    *dx = Tensor<T>(s.cin, x.f, x.h, x.w);
    gemm_nn(wt.data(), K, s.cout, dout.data.data(), dx->data.data(), P);
    return;
  }
  auto& dcol = scratch<T>(2);
  dcol.assign(static_cast<std::size_t>(K) * P, T(0));
  gemm_nn(wt.data(), K, s.cout, dout.data.data(), dcol.data(), P);
  *dx = Tensor<T>(s.cin, x.f, x.h, x.w);
  col2im(dcol, s.k, *dx);
}

template <class T>
void attention_forward(const Tensor<T>& qkv, std::span<const T> rel_bias,
                       AttnShape s, Tensor<T>& out, std::vector<T>& probs) {
  const int C = s.channels;
  const int d = C / s.heads;
  const auto lay = detail::SeqLayout::of(qkv, s.axis);
  const int L = lay.length;
  const T scale = T(1) / std::sqrt(static_cast<T>(d));
  out = Tensor<T>(C, qkv.f, qkv.h, qkv.w);
  probs.resize(static_cast<std::size_t>(lay.groups) * s.heads * L * L);

#pragma omp parallel
  {
    // token-major copies of one head: q[i][c], k[j][c], v[j][c]
    std::vector<T> q(static_cast<std::size_t>(L) * d), kk(q.size()), v(q.size()),
        o(q.size());
#pragma omp for schedule(static)
    for (int g = 0; g < lay.groups; ++g)
      for (int hd = 0; hd < s.heads; ++hd) {
        for (int i = 0; i < L; ++i)
          for (int c = 0; c < d; ++c) {
            const int ch = hd * d + c;
            q[i * d + c] = qkv.data[lay.offset(ch, g, i)] * scale;
            kk[i * d + c] = qkv.data[lay.offset(C + ch, g, i)];
            v[i * d + c] = qkv.data[lay.offset(2 * C + ch, g, i)];
          }
        T* P = probs.data() + (static_cast<std::size_t>(g) * s.heads + hd) * L * L;
        const T* bias = rel_bias.empty() ? nullptr : rel_bias.data() + hd * (2 * L - 1);
        std::fill(o.begin(), o.end(), T(0));
        for (int i = 0; i < L; ++i) {
          T* row = P + i * L;
          const T* qi = q.data() + i * d;
          T mx = -INFINITY;
          for (int j = 0; j < L; ++j) {
            const T* kj = kk.data() + j * d;
            T acc = 0;
            for (int c = 0; c < d; ++c) acc += qi[c] * kj[c];
            if (bias) acc += bias[j - i + L - 1];
            row[j] = acc;
            mx = std::max(mx, acc);
          }
          T sum = 0;
          for (int j = 0; j < L; ++j) sum += (row[j] = std::exp(row[j] - mx));
          const T inv = T(1) / sum;
          T* oi = o.data() + i * d;
          for (int j = 0; j < L; ++j) {
            row[j] *= inv;
            const T* vj = v.data() + j * d;
            for (int c = 0; c < d; ++c) oi[c] += row[j] * vj[c];
          }
        }
        for (int i = 0; i < L; ++i)
          for (int c = 0; c < d; ++c)
            out.data[lay.offset(hd * d + c, g, i)] = o[i * d + c];
      }
  }
}

template <class T>
void attention_backward(const Tensor<T>& qkv, std::span<const T> rel_bias,
                        const std::vector<T>& probs, const Tensor<T>& dout,
                        AttnShape s, Tensor<T>& dqkv, std::span<T> drel_bias) {
  const int C = s.channels;
  const int d = C / s.heads;
  const auto lay = detail::SeqLayout::of(qkv, s.axis);
  const int L = lay.length;
  const T scale = T(1) / std::sqrt(static_cast<T>(d));
  dqkv = Tensor<T>(3 * C, qkv.f, qkv.h, qkv.w);
  const bool want_bias = !drel_bias.empty();
  const std::size_t nb = static_cast<std::size_t>(2 * L - 1);
  // per-group partial bias gradients, reduced serially afterwards
  std::vector<T> bias_parts(want_bias ? lay.groups * s.heads * nb : 0, T(0));

#pragma omp parallel
  {
    const std::size_t n = static_cast<std::size_t>(L) * d;
    std::vector<T> q(n), kk(n), v(n), go(n), dq(n), dk(n), dv(n), dl(L);
#pragma omp for schedule(static)
    for (int g = 0; g < lay.groups; ++g)
      for (int hd = 0; hd < s.heads; ++hd) {
        for (int i = 0; i < L; ++i)
          for (int c = 0; c < d; ++c) {
            const int ch = hd * d + c;
            q[i * d + c] = qkv.data[lay.offset(ch, g, i)];
            kk[i * d + c] = qkv.data[lay.offset(C + ch, g, i)];
            v[i * d + c] = qkv.data[lay.offset(2 * C + ch, g, i)];
            go[i * d + c] = dout.data[lay.offset(ch, g, i)];
          }
        std::fill(dq.begin(), dq.end(), T(0));
        std::fill(dk.begin(), dk.end(), T(0));
        std::fill(dv.begin(), dv.end(), T(0));
        const T* P = probs.data() + (static_cast<std::size_t>(g) * s.heads + hd) * L * L;
        T* bpart = want_bias ? bias_parts.data() + (g * s.heads + hd) * nb : nullptr;
        for (int i = 0; i < L; ++i) {
          const T* row = P + i * L;
          const T* gi = go.data() + i * d;
          T dot = 0;
          for (int j = 0; j < L; ++j) {
            const T* vj = v.data() + j * d;
            T* dvj = dv.data() + j * d;
            T acc = 0;
            for (int c = 0; c < d; ++c) {
              acc += gi[c] * vj[c];
              dvj[c] += row[j] * gi[c];
            }
            dl[j] = acc;
            dot += acc * row[j];
          }
          T* dqi = dq.data() + i * d;
          const T* qi = q.data() + i * d;
          for (int j = 0; j < L; ++j) {
            const T dlj = row[j] * (dl[j] - dot);
            if (bpart) bpart[j - i + L - 1] += dlj;
            const T w = dlj * scale;
            const T* kj = kk.data() + j * d;
            T* dkj = dk.data() + j * d;
            for (int c = 0; c < d; ++c) {
              dqi[c] += w * kj[c];
              dkj[c] += w * qi[c];
            }
          }
        }
        for (int i = 0; i < L; ++i)
          for (int c = 0; c < d; ++c) {
            const int ch = hd * d + c;
            dqkv.data[lay.offset(ch, g, i)] = dq[i * d + c];
            dqkv.data[lay.offset(C + ch, g, i)] = dk[i * d + c];
            dqkv.data[lay.offset(2 * C + ch, g, i)] = dv[i * d + c];
          }
      }
  }
  if (want_bias)
    for (int g = 0; g < lay.groups; ++g)
      for (int hd = 0; hd < s.heads; ++hd)
        for (std::size_t b = 0; b < nb; ++b)
          drel_bias[hd * nb + b] += bias_parts[(g * s.heads + hd) * nb + b];
  (void)rel_bias;
}

#define INSTANTIATE(T)                                                          \
  template void conv2d_forward<T>(const Tensor<T>&, std::span<const T>,        \
                                  std::span<const T>, ConvShape, Tensor<T>&);  \
  template void conv2d_backward<T>(const Tensor<T>&, std::span<const T>,       \
                                   const Tensor<T>&, ConvShape, Tensor<T>*,    \
                                   std::span<T>, std::span<T>);                \
  template void attention_forward<T>(const Tensor<T>&, std::span<const T>,     \
                                     AttnShape, Tensor<T>&, std::vector<T>&);  \
  template void attention_backward<T>(const Tensor<T>&, std::span<const T>,    \
                                      const std::vector<T>&, const Tensor<T>&, \
                                      AttnShape, Tensor<T>&, std::span<T>);
INSTANTIATE(float)
INSTANTIATE(double)
#undef INSTANTIATE

}  // namespace omp
}  // namespace echoedm::kernels
