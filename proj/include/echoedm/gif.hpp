// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "echoedm/video.hpp"

namespace echoedm {

/// Looping grayscale GIF89a of a [0, 1] video, each pixel enlarged to a
/// scale x scale block.
std::vector<std::uint8_t> encode_gif(const Video& v, double fps, int scale = 1);

void write_gif(const std::filesystem::path& path, const Video& v, double fps, int scale = 1);

}  // namespace echoedm
