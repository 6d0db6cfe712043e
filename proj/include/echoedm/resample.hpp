// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "echoedm/video.hpp"

namespace echoedm {

/// Per-frame bilinear resize with half-pixel centres and clamped edges.
Video resize_bilinear(const Video& v, int height, int width);

/// Per-frame box-filter downscale; source dims must be integer multiples.
Video downscale_area(const Video& v, int height, int width);

/// Linear interpolation along time onto `frames` samples with the first and
/// last frames aligned to the source endpoints.
Video resample_frames(const Video& v, int frames);

/// Linear interpolation of a clip recorded at `src_fps` onto the grid
/// k / dst_fps, k = 0 .. floor((n - 1) * dst / src).
Video resample_time(const Video& v, double src_fps, double dst_fps);

/// Temporal then spatial interpolation onto (frames, height, width).
Video rescale_video(const Video& v, int frames, int height, int width);

/// Number of frames resample_time() produces.
int resampled_frame_count(int frames, double src_fps, double dst_fps);

}  // namespace echoedm
