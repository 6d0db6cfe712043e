// SPDX-License-Identifier: Apache-2.0
#include "echoedm/resample.hpp"

#include <algorithm>
#include <cmath>

namespace echoedm {

Video resize_bilinear(const Video& v, int height, int width) {
  if (height < 1 || width < 1) throw ValidationError("resize_bilinear: empty target");
  Video out(v.frames, height, width);
  const double sy = static_cast<double>(v.height) / height;
  const double sx = static_cast<double>(v.width) / width;
  for (int f = 0; f < v.frames; ++f)
    for (int y = 0; y < height; ++y) {
      const double py = std::clamp((y + 0.5) * sy - 0.5, 0.0, v.height - 1.0);
      const int y0 = static_cast<int>(py);
      const int y1 = std::min(y0 + 1, v.height - 1);
      const double wy = py - y0;
      for (int x = 0; x < width; ++x) {
        const double px = std::clamp((x + 0.5) * sx - 0.5, 0.0, v.width - 1.0);
        const int x0 = static_cast<int>(px);
        const int x1 = std::min(x0 + 1, v.width - 1);
        const double wx = px - x0;
        const double top = (1 - wx) * v.at(f, y0, x0) + wx * v.at(f, y0, x1);
        const double bot = (1 - wx) * v.at(f, y1, x0) + wx * v.at(f, y1, x1);
        out.at(f, y, x) = static_cast<float>((1 - wy) * top + wy * bot);
      }
    }
  return out;
}

Video downscale_area(const Video& v, int height, int width) {
  if (height < 1 || width < 1 || v.height % height || v.width % width)
    throw ValidationError("downscale_area: " + v.shape().str() + " is not an integer multiple of " +
                          std::to_string(height) + "x" + std::to_string(width));
  const int fy = v.height / height, fx = v.width / width;
  Video out(v.frames, height, width);
  const double inv = 1.0 / (fy * fx);
  for (int f = 0; f < v.frames; ++f)
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        double acc = 0;
        for (int dy = 0; dy < fy; ++dy)
          for (int dx = 0; dx < fx; ++dx) acc += v.at(f, y * fy + dy, x * fx + dx);
        out.at(f, y, x) = static_cast<float>(acc * inv);
      }
  return out;
}

namespace {

Video sample_at(const Video& v, int frames, auto&& position) {
  Video out(frames, v.height, v.width);
  const std::size_t n = v.frame_size();
  for (int k = 0; k < frames; ++k) {
    const double p = std::clamp(position(k), 0.0, v.frames - 1.0);
    const int i0 = static_cast<int>(p);
    const int i1 = std::min(i0 + 1, v.frames - 1);
    const double w = p - i0;
    const float* a = v.data.data() + i0 * n;
    const float* b = v.data.data() + i1 * n;
    float* o = out.data.data() + k * n;
    if (w == 0.0)
      std::copy(a, a + n, o);
    else
      for (std::size_t i = 0; i < n; ++i) o[i] = static_cast<float>((1 - w) * a[i] + w * b[i]);
  }
  return out;
}

}  // namespace

Video resample_frames(const Video& v, int frames) {
  if (frames < 1 || v.frames < 1) throw ValidationError("resample_frames: empty video");
  if (frames == 1) return sample_at(v, 1, [](int) { return 0.0; });
  const double step = (v.frames - 1.0) / (frames - 1.0);
  return sample_at(v, frames, [&](int k) { return k * step; });
}

Video rescale_video(const Video& v, int frames, int height, int width) {
  Video t = v.frames == frames ? v : resample_frames(v, frames);
  if (t.height == height && t.width == width) return t;
  return resize_bilinear(t, height, width);
}

int resampled_frame_count(int frames, double src_fps, double dst_fps) {
  if (!(src_fps > 0.0) || !(dst_fps > 0.0))
    throw ValidationError("frame rates must be positive");
  if (frames < 1) throw ValidationError("resample_time: empty video");
  return static_cast<int>(std::floor((frames - 1) * dst_fps / src_fps + 1e-9)) + 1;
}

Video resample_time(const Video& v, double src_fps, double dst_fps) {
  const int n = resampled_frame_count(v.frames, src_fps, dst_fps);
  if (src_fps == dst_fps) return v;
  const double ratio = src_fps / dst_fps;
  return sample_at(v, n, [&](int k) { return k * ratio; });
}

}  // namespace echoedm
