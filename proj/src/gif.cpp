// SPDX-License-Identifier: Apache-2.0
#include "echoedm/gif.hpp"

#include <algorithm>
#include <cmath>

#include "echoedm/error.hpp"
#include "io_util.hpp"

namespace echoedm {

namespace {

void put16(std::vector<std::uint8_t>& out, int v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
}

/// LZW stream with 9-bit codes only: a clear code every 254 literals keeps
/// the decoder's table from growing past 511 entries.
std::vector<std::uint8_t> lzw_literal(const std::vector<std::uint8_t>& idx) {
  constexpr int kClear = 256, kEnd = 257;
  std::vector<std::uint8_t> bytes;
  std::uint32_t acc = 0;
  int nbits = 0;
  auto emit = [&](int code) {
    acc |= static_cast<std::uint32_t>(code) << nbits;
    nbits += 9;
    while (nbits >= 8) {
      bytes.push_back(static_cast<std::uint8_t>(acc & 0xff));
      acc >>= 8;
      nbits -= 8;
    }
  };
  int run = 0;
  emit(kClear);
  for (std::uint8_t v : idx) {
    if (run == 254) {
      emit(kClear);
      run = 0;
    }
    emit(v);
    ++run;
  }
  emit(kEnd);
  if (nbits > 0) bytes.push_back(static_cast<std::uint8_t>(acc & 0xff));
  return bytes;
}

}  // namespace

std::vector<std::uint8_t> encode_gif(const Video& v, double fps, int scale) {
  if (scale < 1) throw ValidationError("gif scale must be >= 1");
  if (!(fps > 0.0)) throw ValidationError("gif fps must be > 0");
  const int w = v.width * scale, h = v.height * scale;
  if (w > 65535 || h > 65535) throw ValidationError("gif dimensions too large");

  std::vector<std::uint8_t> out = {'G', 'I', 'F', '8', '9', 'a'};
  put16(out, w);
  put16(out, h);
  out.push_back(0xf7);  // global table, 8 bits per colour, 256 entries
  out.push_back(0);
  out.push_back(0);
  for (int i = 0; i < 256; ++i)
    for (int c = 0; c < 3; ++c) out.push_back(static_cast<std::uint8_t>(i));

  const std::uint8_t loop[] = {0x21, 0xff, 0x0b, 'N', 'E', 'T', 'S', 'C', 'A', 'P', 'E',
                               '2',  '.',  '0',  0x03, 0x01, 0x00, 0x00, 0x00};
  out.insert(out.end(), std::begin(loop), std::end(loop));

  const int delay = std::max(1, static_cast<int>(std::lround(100.0 / fps)));
  std::vector<std::uint8_t> idx(static_cast<std::size_t>(w) * h);
  for (int f = 0; f < v.frames; ++f) {
    out.insert(out.end(), {0x21, 0xf9, 0x04, 0x00});
    put16(out, delay);
    out.insert(out.end(), {0x00, 0x00});

    out.push_back(0x2c);
    put16(out, 0);
    put16(out, 0);
    put16(out, w);
    put16(out, h);
    out.push_back(0);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const float p = std::clamp(v.at(f, y / scale, x / scale), 0.0f, 1.0f);
        idx[static_cast<std::size_t>(y) * w + x] = static_cast<std::uint8_t>(std::lround(p * 255.0f));
      }
    out.push_back(8);
    const auto data = lzw_literal(idx);
    for (std::size_t pos = 0; pos < data.size(); pos += 255) {
      const std::size_t n = std::min<std::size_t>(255, data.size() - pos);
      out.push_back(static_cast<std::uint8_t>(n));
      out.insert(out.end(), data.begin() + pos, data.begin() + pos + n);
    }
    out.push_back(0);
  }
  out.push_back(0x3b);
  return out;
}

void write_gif(const std::filesystem::path& path, const Video& v, double fps, int scale) {
  io::write_file(path, encode_gif(v, fps, scale));
}

}  // namespace echoedm
