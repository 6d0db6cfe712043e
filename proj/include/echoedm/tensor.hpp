// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace echoedm {

/// Channels x frames x height x width activation, channel-major so that one
/// channel is a contiguous run of frames * height * width values.
template <class T>
struct Tensor {
  int c = 0;
  int f = 0;
  int h = 0;
  int w = 0;
  std::vector<T> data;

  Tensor() = default;
  Tensor(int c_, int f_, int h_, int w_, T fill = T(0))
      : c(c_), f(f_), h(h_), w(w_),
        data(static_cast<std::size_t>(c_) * f_ * h_ * w_, fill) {}

  std::size_t size() const { return data.size(); }
  /// Positions per channel.
  std::size_t plane() const { return static_cast<std::size_t>(f) * h * w; }
  std::size_t frame_plane() const { return static_cast<std::size_t>(h) * w; }
  bool same_shape(const Tensor& o) const {
    return c == o.c && f == o.f && h == o.h && w == o.w;
  }

  T* channel(int ci) { return data.data() + ci * plane(); }
  const T* channel(int ci) const { return data.data() + ci * plane(); }

  T& at(int ci, int fi, int y, int x) {
    return data[((static_cast<std::size_t>(ci) * f + fi) * h + y) * w + x];
  }
  const T& at(int ci, int fi, int y, int x) const {
    return data[((static_cast<std::size_t>(ci) * f + fi) * h + y) * w + x];
  }
};

}  // namespace echoedm
