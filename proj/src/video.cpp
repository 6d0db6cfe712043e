// SPDX-License-Identifier: Apache-2.0
#include "echoedm/video.hpp"

#include <algorithm>

namespace echoedm {

std::string VideoShape::str() const {
  return std::to_string(frames) + "x" + std::to_string(height) + "x" +
         std::to_string(width);
}

Video to_model_range(const Video& v) {
  Video out = v;
  for (float& x : out.data) x = 2.0f * x - 1.0f;
  return out;
}

Video to_disk_range(const Video& v) {
  Video out = v;
  for (float& x : out.data) x = std::clamp(0.5f * (x + 1.0f), 0.0f, 1.0f);
  return out;
}

}  // namespace echoedm
