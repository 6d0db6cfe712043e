// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "echoedm/error.hpp"

namespace echoedm {

struct VideoShape {
  int frames = 0;
  int height = 0;
  int width = 0;

  std::size_t size() const {
    return static_cast<std::size_t>(frames) * height * width;
  }
  bool operator==(const VideoShape&) const = default;
  std::string str() const;
};

/// Single-channel frames x height x width array, frame-major.
///
/// Model code works in [-1, 1]; files on disk hold [0, 1]. A reference frame
/// (I_c) is a video with one frame.
template <class T>
struct BasicVideo {
  int frames = 0;
  int height = 0;
  int width = 0;
  std::vector<T> data;

  BasicVideo() = default;
  BasicVideo(int f, int h, int w, T fill = T(0))
      : frames(f), height(h), width(w),
        data(static_cast<std::size_t>(f) * h * w, fill) {}
  explicit BasicVideo(VideoShape s, T fill = T(0))
      : BasicVideo(s.frames, s.height, s.width, fill) {}

  VideoShape shape() const { return {frames, height, width}; }
  std::size_t size() const { return data.size(); }
  std::size_t frame_size() const {
    return static_cast<std::size_t>(height) * width;
  }

  T& at(int f, int y, int x) {
    return data[(static_cast<std::size_t>(f) * height + y) * width + x];
  }
  const T& at(int f, int y, int x) const {
    return data[(static_cast<std::size_t>(f) * height + y) * width + x];
  }

  std::span<T> frame(int f) {
    return {data.data() + f * frame_size(), frame_size()};
  }
  std::span<const T> frame(int f) const {
    return {data.data() + f * frame_size(), frame_size()};
  }

  bool all_finite() const {
    for (const T& v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

using Video = BasicVideo<float>;
using VideoD = BasicVideo<double>;

template <class To, class From>
BasicVideo<To> video_cast(const BasicVideo<From>& v) {
  BasicVideo<To> out(v.frames, v.height, v.width);
  for (std::size_t i = 0; i < v.size(); ++i)
    out.data[i] = static_cast<To>(v.data[i]);
  return out;
}

/// Copy of frame `f` as a one-frame video.
template <class T>
BasicVideo<T> extract_frame(const BasicVideo<T>& v, int f) {
  if (f < 0 || f >= v.frames)
    throw ValidationError("extract_frame: frame index out of range");
  BasicVideo<T> out(1, v.height, v.width);
  auto src = v.frame(f);
  std::copy(src.begin(), src.end(), out.data.begin());
  return out;
}

/// [0, 1] disk range to [-1, 1] model range: x -> 2x - 1.
Video to_model_range(const Video& v);
/// [-1, 1] model range to [0, 1] disk range, clamped.
Video to_disk_range(const Video& v);

}  // namespace echoedm
