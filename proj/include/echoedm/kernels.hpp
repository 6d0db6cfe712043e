// SPDX-License-Identifier: Apache-2.0
#pragma once

// Compute kernels behind the denoiser network.
//
// Every kernel exists twice: `reference` is a direct serial loop nest kept as
// the test oracle, `omp` is the production path (im2col + blocked products,
// OpenMP over independent outputs). Parallel loops never share an
// accumulator, so results do not depend on the thread count.

#include <span>
#include <vector>

#include "echoedm/tensor.hpp"

namespace echoedm::kernels {

/// Per-frame 2-D convolution with "same" zero padding. Weight layout is
/// [cout][cin][k][k], k odd.
struct ConvShape {
  int cin;
  int cout;
  int k;
};

enum class AttnAxis {
  Temporal,  ///< sequence over frames at each pixel
  Spatial,   ///< sequence over pixels within each frame
};

/// Multi-head attention on a fused q|k|v tensor of 3*C channels. Output has
/// C channels. `rel_bias` (may be empty) holds heads * (2F - 1) additive
/// logits indexed by key frame - query frame; temporal axis only.
struct AttnShape {
  int channels;
  int heads;
  AttnAxis axis;
};

namespace reference {
template <class T>
void conv2d_forward(const Tensor<T>& x, std::span<const T> weight,
                    std::span<const T> bias, ConvShape s, Tensor<T>& out);
/// Writes dx (when non-null); accumulates into dweight and dbias.
template <class T>
void conv2d_backward(const Tensor<T>& x, std::span<const T> weight,
                     const Tensor<T>& dout, ConvShape s, Tensor<T>* dx,
                     std::span<T> dweight, std::span<T> dbias);
/// `probs` receives the softmax weights the backward pass needs.
template <class T>
void attention_forward(const Tensor<T>& qkv, std::span<const T> rel_bias,
                       AttnShape s, Tensor<T>& out, std::vector<T>& probs);
/// Writes dqkv; accumulates into drel_bias.
template <class T>
void attention_backward(const Tensor<T>& qkv, std::span<const T> rel_bias,
                        const std::vector<T>& probs, const Tensor<T>& dout,
                        AttnShape s, Tensor<T>& dqkv, std::span<T> drel_bias);
}  // namespace reference

namespace omp {
template <class T>
void conv2d_forward(const Tensor<T>& x, std::span<const T> weight,
                    std::span<const T> bias, ConvShape s, Tensor<T>& out);
/// Writes dx (when non-null); accumulates into dweight and dbias.
template <class T>
void conv2d_backward(const Tensor<T>& x, std::span<const T> weight,
                     const Tensor<T>& dout, ConvShape s, Tensor<T>* dx,
                     std::span<T> dweight, std::span<T> dbias);
/// `probs` receives the softmax weights the backward pass needs.
template <class T>
void attention_forward(const Tensor<T>& qkv, std::span<const T> rel_bias,
                       AttnShape s, Tensor<T>& out, std::vector<T>& probs);
/// Writes dqkv; accumulates into drel_bias.
template <class T>
void attention_backward(const Tensor<T>& qkv, std::span<const T> rel_bias,
                        const std::vector<T>& probs, const Tensor<T>& dout,
                        AttnShape s, Tensor<T>& dqkv, std::span<T> drel_bias);
}  // namespace omp

/// Worker threads used by the omp kernels (1 forces serial execution).
void set_num_threads(int n);
int num_threads();

}  // namespace echoedm::kernels
