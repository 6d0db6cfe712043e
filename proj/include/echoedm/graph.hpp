// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "echoedm/kernels.hpp"
#include "echoedm/tensor.hpp"

namespace echoedm {

/// Slice of the flat parameter vector.
struct ParamRef {
  std::size_t offset = 0;
  std::size_t size = 0;
};

/// Reverse-mode tape over the handful of layer types the denoiser uses.
///
/// Values live in the graph; parameters live in one flat array owned by the
/// caller and are addressed through ParamRef. When constructed without a
/// gradient array the graph records no backward closures.
template <class T>
class Graph {
 public:
  using Id = int;

  Graph(std::span<const T> params, std::span<T> grads);
  explicit Graph(std::span<const T> params) : Graph(params, {}) {}

  bool recording() const { return !grads_.empty(); }

  Id input(Tensor<T> t);
  const Tensor<T>& value(Id id) const { return nodes_[id]->value; }

  Id conv(Id x, ParamRef weight, ParamRef bias, kernels::ConvShape s);
  /// Group normalization with statistics per frame, so it never mixes frames.
  Id group_norm(Id x, ParamRef gamma, ParamRef beta, int groups);
  Id silu(Id x);
  Id add(Id a, Id b);
  Id concat(Id a, Id b);
  Id avg_pool2(Id x);
  Id upsample2(Id x);
  /// Dense layer on a (n, 1, 1, 1) vector; weight is [out][in].
  Id linear(Id v, ParamRef weight, ParamRef bias, int out);
  /// h * (1 + scale) + shift with per-channel scale|shift from a 2C vector.
  Id film(Id h, Id scale_shift);
  Id attention(Id qkv, ParamRef rel_bias, kernels::AttnShape s);

  /// Seeds d(loss)/d(out) and runs the tape backwards, accumulating into the
  /// gradient array.
  void backward(Id out, const Tensor<T>& dout);
  /// Gradient reaching a graph input after backward().
  const Tensor<T>& grad(Id id) const { return nodes_[id]->grad; }

  int temporal_attention_calls() const { return temporal_calls_; }
  int spatial_attention_calls() const { return spatial_calls_; }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    std::function<void()> backward;
  };

  Id push(Tensor<T> value);
  Tensor<T>& grad_of(Id id);
  std::span<const T> param(ParamRef r) const { return params_.subspan(r.offset, r.size); }
  std::span<T> dparam(ParamRef r) { return grads_.subspan(r.offset, r.size); }

  std::span<const T> params_;
  std::span<T> grads_;
  std::vector<std::unique_ptr<Node>> nodes_;
  int temporal_calls_ = 0;
  int spatial_calls_ = 0;
};

extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace echoedm
