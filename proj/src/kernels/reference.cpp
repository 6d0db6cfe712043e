// SPDX-License-Identifier: Apache-2.0
// Serial loop-nest kernels. Slow; used as the oracle for the omp versions.
#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "attention_layout.hpp"
#include "echoedm/kernels.hpp"

namespace echoedm::kernels::reference {

template <class T>
void conv2d_forward(const Tensor<T>& x, std::span<const T> weight,
                    std::span<const T> bias, ConvShape s, Tensor<T>& out) {
  const int r = s.k / 2;
  out = Tensor<T>(s.cout, x.f, x.h, x.w);
  for (int co = 0; co < s.cout; ++co)
    for (int f = 0; f < x.f; ++f)
      for (int y = 0; y < x.h; ++y)
        for (int xx = 0; xx < x.w; ++xx) {
          T acc = bias.empty() ? T(0) : bias[co];
          for (int ci = 0; ci < s.cin; ++ci)
            for (int ky = 0; ky < s.k; ++ky)
              for (int kx = 0; kx < s.k; ++kx) {
                const int sy = y + ky - r;
                const int sx = xx + kx - r;
                if (sy < 0 || sy >= x.h || sx < 0 || sx >= x.w) continue;
                acc += weight[((co * s.cin + ci) * s.k + ky) * s.k + kx] *
                       x.at(ci, f, sy, sx);
              }
          out.at(co, f, y, xx) = acc;
        }
}

template <class T>
void conv2d_backward(const Tensor<T>& x, std::span<const T> weight,
                     const Tensor<T>& dout, ConvShape s, Tensor<T>* dx,
                     std::span<T> dweight, std::span<T> dbias) {
  const int r = s.k / 2;
  if (dx) *dx = Tensor<T>(s.cin, x.f, x.h, x.w);
  for (int co = 0; co < s.cout; ++co)
    for (int f = 0; f < x.f; ++f)
      for (int y = 0; y < x.h; ++y)
        for (int xx = 0; xx < x.w; ++xx) {
          const T g = dout.at(co, f, y, xx);
          if (!dbias.empty()) dbias[co] += g;
          for (int ci = 0; ci < s.cin; ++ci)
            for (int ky = 0; ky < s.k; ++ky)
              for (int kx = 0; kx < s.k; ++kx) {
                const int sy = y + ky - r;
                const int sx = xx + kx - r;
                if (sy < 0 || sy >= x.h || sx < 0 || sx >= x.w) continue;
                const std::size_t wi = ((co * s.cin + ci) * s.k + ky) * s.k + kx;
                dweight[wi] += g * x.at(ci, f, sy, sx);
                if (dx) dx->at(ci, f, sy, sx) += g * weight[wi];
              }
        }
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
  probs.assign(static_cast<std::size_t>(lay.groups) * s.heads * L * L, T(0));
  std::vector<T> row(L);
  for (int g = 0; g < lay.groups; ++g)
    for (int hd = 0; hd < s.heads; ++hd) {
      T* P = probs.data() + (static_cast<std::size_t>(g) * s.heads + hd) * L * L;
      for (int i = 0; i < L; ++i) {
        T mx = -INFINITY;
        for (int j = 0; j < L; ++j) {
          T acc = 0;
          for (int c = hd * d; c < (hd + 1) * d; ++c)
            acc += qkv.data[lay.offset(c, g, i)] * qkv.data[lay.offset(C + c, g, j)];
          acc *= scale;
          if (!rel_bias.empty()) acc += rel_bias[hd * (2 * L - 1) + (j - i + L - 1)];
          row[j] = acc;
          mx = std::max(mx, acc);
        }
        T sum = 0;
        for (int j = 0; j < L; ++j) sum += (row[j] = std::exp(row[j] - mx));
        for (int j = 0; j < L; ++j) P[i * L + j] = row[j] / sum;
        for (int c = hd * d; c < (hd + 1) * d; ++c) {
          T acc = 0;
          for (int j = 0; j < L; ++j)
            acc += P[i * L + j] * qkv.data[lay.offset(2 * C + c, g, j)];
          out.data[lay.offset(c, g, i)] = acc;
        }
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
  std::vector<T> dP(L), dl(L);
  for (int g = 0; g < lay.groups; ++g)
    for (int hd = 0; hd < s.heads; ++hd) {
      const T* P = probs.data() + (static_cast<std::size_t>(g) * s.heads + hd) * L * L;
      for (int i = 0; i < L; ++i) {
        T dot = 0;
        for (int j = 0; j < L; ++j) {
          T acc = 0;
          for (int c = hd * d; c < (hd + 1) * d; ++c) {
            const T go = dout.data[lay.offset(c, g, i)];
            acc += go * qkv.data[lay.offset(2 * C + c, g, j)];
            dqkv.data[lay.offset(2 * C + c, g, j)] += P[i * L + j] * go;
          }
          dP[j] = acc;
          dot += acc * P[i * L + j];
        }
        for (int j = 0; j < L; ++j) {
          dl[j] = P[i * L + j] * (dP[j] - dot);
          if (!drel_bias.empty()) drel_bias[hd * (2 * L - 1) + (j - i + L - 1)] += dl[j];
        }
        for (int j = 0; j < L; ++j)
          for (int c = hd * d; c < (hd + 1) * d; ++c) {
            dqkv.data[lay.offset(c, g, i)] +=
                dl[j] * scale * qkv.data[lay.offset(C + c, g, j)];
            dqkv.data[lay.offset(C + c, g, j)] +=
                dl[j] * scale * qkv.data[lay.offset(c, g, i)];
          }
      }
    }
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

}  // namespace echoedm::kernels::reference
