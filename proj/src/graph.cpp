// SPDX-License-Identifier: Apache-2.0
#include "echoedm/graph.hpp"

#include <cmath>
#include <stdexcept>

#include "echoedm/error.hpp"

namespace echoedm {

template <class T>
Graph<T>::Graph(std::span<const T> params, std::span<T> grads)
    : params_(params), grads_(grads) {
  if (!grads_.empty() && grads_.size() != params_.size())
    throw ValidationError("Graph: gradient array does not match parameters");
}

template <class T>
typename Graph<T>::Id Graph<T>::push(Tensor<T> value) {
  auto node = std::make_unique<Node>();
  node->value = std::move(value);
  nodes_.push_back(std::move(node));
  return static_cast<Id>(nodes_.size() - 1);
}

template <class T>
Tensor<T>& Graph<T>::grad_of(Id id) {
  Node& n = *nodes_[id];
  if (n.grad.data.empty())
    n.grad = Tensor<T>(n.value.c, n.value.f, n.value.h, n.value.w);
  return n.grad;
}

template <class T>
typename Graph<T>::Id Graph<T>::input(Tensor<T> t) {
  return push(std::move(t));
}

template <class T>
typename Graph<T>::Id Graph<T>::conv(Id x, ParamRef weight, ParamRef bias,
                                     kernels::ConvShape s) {
  const Tensor<T>& xv = value(x);
  if (xv.c != s.cin) throw ValidationError("conv: channel mismatch");
  Tensor<T> out;
  kernels::omp::conv2d_forward<T>(xv, param(weight), param(bias), s, out);
  const Id id = push(std::move(out));
  if (recording())
    nodes_[id]->backward = [this, x, id, weight, bias, s] {
      Tensor<T> dx;
      kernels::omp::conv2d_backward<T>(value(x), param(weight), nodes_[id]->grad, s,
                                       &dx, dparam(weight), dparam(bias));
      Tensor<T>& gx = grad_of(x);
      for (std::size_t i = 0; i < dx.size(); ++i) gx.data[i] += dx.data[i];
    };
  return id;
}

template <class T>
typename Graph<T>::Id Graph<T>::group_norm(Id x, ParamRef gamma, ParamRef beta,
                                           int groups) {
  const Tensor<T>& xv = value(x);
  if (groups < 1 || xv.c % groups != 0)
    throw ValidationError("group_norm: channels not divisible by groups");
  const int cg = xv.c / groups;
  const std::size_t hw = xv.frame_plane();
  const std::size_t P = xv.plane();
  const T eps = T(1e-5);
  auto normed = std::make_shared<Tensor<T>>(xv.c, xv.f, xv.h, xv.w);
  auto rstd = std::make_shared<std::vector<T>>(static_cast<std::size_t>(xv.f) * groups);
  Tensor<T> out(xv.c, xv.f, xv.h, xv.w);
  auto g = param(gamma);
  auto b = param(beta);
  const std::size_t n = static_cast<std::size_t>(cg) * hw;

#pragma omp parallel for collapse(2) schedule(static)
  for (int f = 0; f < xv.f; ++f)
    for (int gr = 0; gr < groups; ++gr) {
      T mean = 0;
      for (int c = gr * cg; c < (gr + 1) * cg; ++c) {
        const T* src = xv.channel(c) + f * hw;
        for (std::size_t i = 0; i < hw; ++i) mean += src[i];
      }
      mean /= static_cast<T>(n);
      T var = 0;
      for (int c = gr * cg; c < (gr + 1) * cg; ++c) {
        const T* src = xv.channel(c) + f * hw;
        for (std::size_t i = 0; i < hw; ++i) var += (src[i] - mean) * (src[i] - mean);
      }
      var /= static_cast<T>(n);
      const T r = T(1) / std::sqrt(var + eps);
      (*rstd)[f * groups + gr] = r;
      for (int c = gr * cg; c < (gr + 1) * cg; ++c) {
        const T* src = xv.channel(c) + f * hw;
        T* nd = normed->channel(c) + f * hw;
        T* o = out.channel(c) + f * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          nd[i] = (src[i] - mean) * r;
          o[i] = nd[i] * g[c] + b[c];
        }
      }
    }
  (void)P;
  const Id id = push(std::move(out));
  if (recording())
    nodes_[id]->backward = [this, x, id, gamma, beta, groups, cg, hw, n, normed, rstd] {
      const Tensor<T>& dy = nodes_[id]->grad;
      Tensor<T>& gx = grad_of(x);
      auto g = param(gamma);
      auto dg = dparam(gamma);
      auto db = dparam(beta);
      const int C = dy.c, F = dy.f;
      for (int c = 0; c < C; ++c) {
        const T* d = dy.channel(c);
        const T* nd = normed->channel(c);
        T sg = 0, sb = 0;
        for (std::size_t i = 0; i < dy.plane(); ++i) {
          sg += d[i] * nd[i];
          sb += d[i];
        }
        dg[c] += sg;
        db[c] += sb;
      }
#pragma omp parallel for collapse(2) schedule(static)
      for (int f = 0; f < F; ++f)
        for (int gr = 0; gr < groups; ++gr) {
          T m1 = 0, m2 = 0;
          for (int c = gr * cg; c < (gr + 1) * cg; ++c) {
            const T* d = dy.channel(c) + f * hw;
            const T* nd = normed->channel(c) + f * hw;
            for (std::size_t i = 0; i < hw; ++i) {
              const T dn = d[i] * g[c];
              m1 += dn;
              m2 += dn * nd[i];
            }
          }
          m1 /= static_cast<T>(n);
          m2 /= static_cast<T>(n);
          const T r = (*rstd)[f * groups + gr];
          for (int c = gr * cg; c < (gr + 1) * cg; ++c) {
            const T* d = dy.channel(c) + f * hw;
            const T* nd = normed->channel(c) + f * hw;
            T* o = gx.channel(c) + f * hw;
            for (std::size_t i = 0; i < hw; ++i)
              o[i] += r * (d[i] * g[c] - m1 - nd[i] * m2);
          }
        }
    };
  return id;
}

template <class T>
typename Graph<T>::Id Graph<T>::silu(Id x) {
  const Tensor<T>& xv = value(x);
  Tensor<T> out(xv.c, xv.f, xv.h, xv.w);
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const T v = xv.data[i];
    out.data[i] = v / (T(1) + std::exp(-v));
  }
  const Id id = push(std::move(out));
  if (recording())
    nodes_[id]->backward = [this, x, id] {
      const Tensor<T>& xv = value(x);
      const Tensor<T>& dy = nodes_[id]->grad;
      Tensor<T>& gx = grad_of(x);
#pragma omp parallel for schedule(static)
      for (std::size_t i = 0; i < xv.size(); ++i) {
        const T v = xv.data[i];
        const T s = T(1) / (T(1) + std::exp(-v));
        gx.data[i] += dy.data[i] * s * (T(1) + v * (T(1) - s));
      }
    };
  return id;
}

template <class T>
typename Graph<T>::Id Graph<T>::add(Id a, Id b) {
  const Tensor<T>& av = value(a);
  const Tensor<T>& bv = value(b);
  if (!av.same_shape(bv)) throw ValidationError("add: shape mismatch");
  Tensor<T> out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += bv.data[i];
  const Id id = push(std::move(out));
  if (recording())
    nodes_[id]->backward = [this, a, b, id] {
      const Tensor<T>& dy = nodes_[id]->grad;
      for (Id t : {a, b}) {
        Tensor<T>& g = grad_of(t);
        for (std::size_t i = 0; i < dy.size(); ++i) g.data[i] += dy.data[i];
      }
    };
  return id;
}

template <class T>
typename Graph<T>::Id Graph<T>::concat(Id a, Id b) {
  const Tensor<T>& av = value(a);
  const Tensor<T>& bv = value(b);
  if (av.f != bv.f || av.h != bv.h || av.w != bv.w)
    throw ValidationError("concat: spatial/temporal shape mismatch");
  Tensor<T> out(av.c + bv.c, av.f, av.h, av.w);
  std::copy(av.data.begin(), av.data.end(), out.data.begin());
  std::copy(bv.data.begin(), bv.data.end(), out.data.begin() + av.size());
  const Id id = push(std::move(out));
  if (recording())
    nodes_[id]->backward = [this, a, b, id] {
      const Tensor<T>& dy = nodes_[id]->grad;
      Tensor<T>& ga = grad_of(a);
      Tensor<T>& gb = grad_of(b);
      for (std::size_t i = 0; i < ga.size(); ++i) ga.data[i] += dy.data[i];
      for (std::size_t i = 0; i < gb.size(); ++i) gb.data[i] += dy.data[ga.size() + i];
    };
  return id;
}

template <class T>
typename Graph<T>::Id Graph<T>::avg_pool2(Id x) {
  const Tensor<T>& xv = value(x);
  if (xv.h % 2 || xv.w % 2) throw ValidationError("avg_pool2: odd spatial size");
  Tensor<T> out(xv.c, xv.f, xv.h / 2, xv.w / 2);
  for (int c = 0; c < xv.c; ++c)
    for (int f = 0; f < xv.f; ++f)
      for (int y = 0; y < out.h; ++y)
        for (int xx = 0; xx < out.w; ++xx)
          out.at(c, f, y, xx) =
              T(0.25) * (xv.at(c, f, 2 * y, 2 * xx) + xv.at(c, f, 2 * y, 2 * xx + 1) +
                         xv.at(c, f, 2 * y + 1, 2 * xx) +
                         xv.at(c, f, 2 * y + 1, 2 * xx + 1));
  const Id id = push(std::move(out));
  if (recording())
    nodes_[id]->backward = [this, x, id] {
      const Tensor<T>& dy = nodes_[id]->grad;
      Tensor<T>& g = grad_of(x);
      for (int c = 0; c < dy.c; ++c)
        for (int f = 0; f < dy.f; ++f)
          for (int y = 0; y < dy.h; ++y)
            for (int xx = 0; xx < dy.w; ++xx) {
              const T v = T(0.25) * dy.at(c, f, y, xx);
              g.at(c, f, 2 * y, 2 * xx) += v;
              g.at(c, f, 2 * y, 2 * xx + 1) += v;
              g.at(c, f, 2 * y + 1, 2 * xx) += v;
              g.at(c, f, 2 * y + 1, 2 * xx + 1) += v;
            }
    };
  return id;
}

template <class T>
typename Graph<T>::Id Graph<T>::upsample2(Id x) {
  const Tensor<T>& xv = value(x);
  Tensor<T> out(xv.c, xv.f, xv.h * 2, xv.w * 2);
  for (int c = 0; c < out.c; ++c)
    for (int f = 0; f < out.f; ++f)
      for (int y = 0; y < out.h; ++y)
        for (int xx = 0; xx < out.w; ++xx) out.at(c, f, y, xx) = xv.at(c, f, y / 2, xx / 2);
  const Id id = push(std::move(out));
  if (recording())
    nodes_[id]->backward = [this, x, id] {
      const Tensor<T>& dy = nodes_[id]->grad;
      Tensor<T>& g = grad_of(x);
      for (int c = 0; c < dy.c; ++c)
        for (int f = 0; f < dy.f; ++f)
          for (int y = 0; y < dy.h; ++y)
            for (int xx = 0; xx < dy.w; ++xx) g.at(c, f, y / 2, xx / 2) += dy.at(c, f, y, xx);
    };
  return id;
}

template <class T>
typename Graph<T>::Id Graph<T>::linear(Id v, ParamRef weight, ParamRef bias, int out_dim) {
  const Tensor<T>& vv = value(v);
  const int in = static_cast<int>(vv.size());
  if (weight.size != static_cast<std::size_t>(in) * out_dim)
    throw ValidationError("linear: weight size mismatch");
  auto W = param(weight);
  auto b = param(bias);
  Tensor<T> out(out_dim, 1, 1, 1);
  for (int o = 0; o < out_dim; ++o) {
    T acc = b[o];
    for (int i = 0; i < in; ++i) acc += W[o * in + i] * vv.data[i];
    out.data[o] = acc;
  }
  const Id id = push(std::move(out));
  if (recording())
    nodes_[id]->backward = [this, v, id, weight, bias, in, out_dim] {
      const Tensor<T>& dy = nodes_[id]->grad;
      const Tensor<T>& vv = value(v);
      auto W = param(weight);
      auto dW = dparam(weight);
      auto db = dparam(bias);
      Tensor<T>& gv = grad_of(v);
      for (int o = 0; o < out_dim; ++o) {
        db[o] += dy.data[o];
        for (int i = 0; i < in; ++i) {
          dW[o * in + i] += dy.data[o] * vv.data[i];
          gv.data[i] += dy.data[o] * W[o * in + i];
        }
      }
    };
  return id;
}

template <class T>
typename Graph<T>::Id Graph<T>::film(Id h, Id scale_shift) {
  const Tensor<T>& hv = value(h);
  const Tensor<T>& ss = value(scale_shift);
  if (static_cast<int>(ss.size()) != 2 * hv.c) throw ValidationError("film: size mismatch");
  Tensor<T> out(hv.c, hv.f, hv.h, hv.w);
  const std::size_t P = hv.plane();
  for (int c = 0; c < hv.c; ++c) {
    const T s = T(1) + ss.data[c];
    const T sh = ss.data[hv.c + c];
    const T* src = hv.channel(c);
    T* o = out.channel(c);
    for (std::size_t i = 0; i < P; ++i) o[i] = src[i] * s + sh;
  }
  const Id id = push(std::move(out));
  if (recording())
    nodes_[id]->backward = [this, h, scale_shift, id] {
      const Tensor<T>& dy = nodes_[id]->grad;
      const Tensor<T>& hv = value(h);
      const Tensor<T>& ss = value(scale_shift);
      Tensor<T>& gh = grad_of(h);
      Tensor<T>& gs = grad_of(scale_shift);
      const std::size_t P = hv.plane();
      for (int c = 0; c < hv.c; ++c) {
        const T s = T(1) + ss.data[c];
        const T* d = dy.channel(c);
        const T* src = hv.channel(c);
        T* g = gh.channel(c);
        T dscale = 0, dshift = 0;
        for (std::size_t i = 0; i < P; ++i) {
          g[i] += d[i] * s;
          dscale += d[i] * src[i];
          dshift += d[i];
        }
        gs.data[c] += dscale;
        gs.data[hv.c + c] += dshift;
      }
    };
  return id;
}

template <class T>
typename Graph<T>::Id Graph<T>::attention(Id qkv, ParamRef rel_bias, kernels::AttnShape s) {
  const Tensor<T>& qv = value(qkv);
  if (qv.c != 3 * s.channels || s.channels % s.heads != 0)
    throw ValidationError("attention: bad channel layout");
  if (s.axis == kernels::AttnAxis::Temporal)
    ++temporal_calls_;
  else
    ++spatial_calls_;
  Tensor<T> out;
  auto probs = std::make_shared<std::vector<T>>();
  kernels::omp::attention_forward<T>(qv, param(rel_bias), s, out, *probs);
  const Id id = push(std::move(out));
  if (recording())
    nodes_[id]->backward = [this, qkv, rel_bias, s, id, probs] {
      Tensor<T> dqkv;
      kernels::omp::attention_backward<T>(value(qkv), param(rel_bias), *probs,
                                          nodes_[id]->grad, s, dqkv, dparam(rel_bias));
      Tensor<T>& g = grad_of(qkv);
      for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += dqkv.data[i];
    };
  return id;
}

template <class T>
void Graph<T>::backward(Id out, const Tensor<T>& dout) {
  if (!recording()) throw ValidationError("Graph::backward on a non-recording graph");
  if (!dout.same_shape(value(out))) throw ValidationError("backward: seed shape mismatch");
  grad_of(out) = dout;
  for (Id i = out; i >= 0; --i) {
    Node& n = *nodes_[i];
    if (n.backward && !n.grad.data.empty()) n.backward();
  }
}

template class Graph<float>;
template class Graph<double>;

}  // namespace echoedm
