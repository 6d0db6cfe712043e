// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>

#include "echoedm/kernels.hpp"

namespace echoedm::kernels::detail {

/// Addressing of one attention sequence inside a channel plane.
struct SeqLayout {
  int groups;       // independent sequences
  int length;       // tokens per sequence
  std::size_t group_stride;
  std::size_t token_stride;
  std::size_t plane;  // channel stride

  template <class T>
  static SeqLayout of(const Tensor<T>& t, AttnAxis axis) {
    const std::size_t hw = t.frame_plane();
    if (axis == AttnAxis::Temporal)
      return {static_cast<int>(hw), t.f, 1, hw, t.plane()};
    return {t.f, static_cast<int>(hw), hw, 1, t.plane()};
  }

  std::size_t offset(int c, int g, int s) const {
    return c * plane + g * group_stride + s * token_stride;
  }
};

}  // namespace echoedm::kernels::detail
