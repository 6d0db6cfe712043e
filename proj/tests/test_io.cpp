// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <cstdlib>
#include <fstream>

#include "doctest.h"
#include "echoedm/config.hpp"
#include "echoedm/error.hpp"
#include "echoedm/gif.hpp"
#include "test_util.hpp"

using namespace echoedm;
using echoedm::testing::TempDir;

namespace {

/// Plain variable-width LZW decoder for GIF image data.
std::vector<std::uint8_t> lzw_decode(const std::vector<std::uint8_t>& data, int min_code) {
  const int clear = 1 << min_code, end = clear + 1;
  std::vector<std::vector<std::uint8_t>> table;
  auto reset = [&] {
    table.clear();
    for (int i = 0; i < clear; ++i) table.push_back({static_cast<std::uint8_t>(i)});
    table.push_back({});
    table.push_back({});
  };
  reset();
  int width = min_code + 1;
  std::size_t bitpos = 0;
  std::vector<std::uint8_t> out;
  int prev = -1;
  while (bitpos + width <= data.size() * 8) {
    int code = 0;
    for (int b = 0; b < width; ++b, ++bitpos)
      code |= ((data[bitpos / 8] >> (bitpos % 8)) & 1) << b;
    if (code == clear) {
      reset();
      width = min_code + 1;
      prev = -1;
      continue;
    }
    if (code == end) break;
    std::vector<std::uint8_t> entry;
    if (code < static_cast<int>(table.size())) {
      entry = table[code];
      if (prev >= 0) {
        auto e = table[prev];
        e.push_back(entry[0]);
        table.push_back(e);
      }
    } else {
      entry = table[prev];
      entry.push_back(entry[0]);
      table.push_back(entry);
    }
    out.insert(out.end(), entry.begin(), entry.end());
    prev = code;
    if (static_cast<int>(table.size()) == (1 << width) && width < 12) ++width;
  }
  return out;
}

struct DecodedGif {
  int width = 0, height = 0, frames = 0, delay = 0;
  bool loops = false;
  std::vector<std::vector<std::uint8_t>> pixels;
};

DecodedGif decode_gif(const std::vector<std::uint8_t>& b) {
  DecodedGif g;
  REQUIRE(std::string(b.begin(), b.begin() + 6) == "GIF89a");
  g.width = b[6] | b[7] << 8;
  g.height = b[8] | b[9] << 8;
  REQUIRE((b[10] & 0x80) != 0);
  std::size_t pos = 13 + 3 * (1u << ((b[10] & 7) + 1));
  auto sub_blocks = [&](std::vector<std::uint8_t>* out) {
    while (b.at(pos) != 0) {
      const int n = b[pos++];
      if (out) out->insert(out->end(), b.begin() + pos, b.begin() + pos + n);
      pos += n;
    }
    ++pos;
  };
  while (b.at(pos) != 0x3b) {
    if (b[pos] == 0x21) {
      const int label = b[pos + 1];
      if (label == 0xff && std::string(b.begin() + pos + 3, b.begin() + pos + 14) == "NETSCAPE2.0") g.loops = true;
      if (label == 0xf9) g.delay = b[pos + 4] | b[pos + 5] << 8;
      pos += 2;
      sub_blocks(nullptr);
    } else {
      REQUIRE(b[pos] == 0x2c);
      const int w = b[pos + 5] | b[pos + 6] << 8, h = b[pos + 7] | b[pos + 8] << 8;
      CHECK(w == g.width);
      CHECK(h == g.height);
      pos += 10;
      const int min_code = b[pos++];
      std::vector<std::uint8_t> data;
      sub_blocks(&data);
      g.pixels.push_back(lzw_decode(data, min_code));
      ++g.frames;
    }
  }
  return g;
}

}  // namespace

TEST_CASE("GIF export decodes to the quantized video") {
  Video v(3, 20, 30);
  Rng rng(1);
  for (auto& x : v.data) x = static_cast<float>(rng.uniform());
  v.data[0] = -0.5f;
  v.data[1] = 1.7f;
  const auto bytes = encode_gif(v, 8.0, 2);
  const DecodedGif g = decode_gif(bytes);
  CHECK(g.width == 60);
  CHECK(g.height == 40);
  CHECK(g.frames == 3);
  CHECK(g.loops);
  CHECK(g.delay == 13);
  for (int f = 0; f < 3; ++f) {
    REQUIRE(g.pixels[f].size() == 60u * 40u);
    int bad = 0;
    for (int y = 0; y < 40; ++y)
      for (int x = 0; x < 60; ++x) {
        const float p = std::clamp(v.at(f, y / 2, x / 2), 0.0f, 1.0f);
        bad += g.pixels[f][y * 60 + x] != static_cast<std::uint8_t>(std::lround(p * 255.0f));
      }
    CHECK(bad == 0);
  }
  CHECK_THROWS_AS(encode_gif(v, 0.0), ValidationError);
  CHECK_THROWS_AS(encode_gif(v, 8.0, 0), ValidationError);

  TempDir dir("gif");
  write_gif(dir.path / "a.gif", v, 8.0);
  std::ifstream in(dir.path / "a.gif", std::ios::binary);
  const std::vector<std::uint8_t> disk((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  CHECK(disk == encode_gif(v, 8.0));
}

TEST_CASE("data config JSON") {
  DataGenConfig c;
  c.n_train = 12;
  c.ef_min = 0.3;
  c.ef_distribution = EfDistribution::Skewed;
  c.speckle.enabled = false;
  c.seed = 77;
  const DataGenConfig back = data_config_from_json(data_config_to_json(c));
  CHECK(data_config_to_json(back) == data_config_to_json(c));
  CHECK(back.n_train == 12);
  CHECK(back.ef_distribution == EfDistribution::Skewed);
  CHECK_FALSE(back.speckle.enabled);

  SUBCASE("nested section and partial keys") {
    const auto d = data_config_from_json(R"({"data": {"n_test": 5, "ef_range": [0.6, 0.6]}})");
    CHECK(d.n_test == 5);
    CHECK(d.ef_min == 0.6);
    CHECK(d.ef_max == 0.6);
    CHECK(d.n_train == DataGenConfig{}.n_train);
  }
  SUBCASE("every bad field is named") {
    try {
      data_config_from_json(R"({"heigth": 3, "fps": "fast", "speckle": {"strenght": 1}, "ef_range": [0.1]})");
      FAIL("expected an error");
    } catch (const ValidationError& e) {
      const std::string m = e.what();
      CHECK(m.find("data.heigth") != std::string::npos);
      CHECK(m.find("data.fps") != std::string::npos);
      CHECK(m.find("data.speckle.strenght") != std::string::npos);
      CHECK(m.find("data.ef_range") != std::string::npos);
    }
  }
  CHECK_THROWS_AS(data_config_from_json(R"({"ef_range": [0.8, 0.2]})"), ValidationError);
  CHECK_THROWS_AS(data_config_from_json("not json"), ValidationError);
  CHECK_THROWS_AS(data_config_from_json("[1]"), ValidationError);
}

TEST_CASE("train config JSON") {
  TrainConfig c;
  c.learning_rate = 3e-4;
  c.grad_accum = 2;
  c.seed = 9;
  const TrainConfig back = train_config_from_json(train_config_to_json(c));
  CHECK(train_config_to_json(back) == train_config_to_json(c));
  CHECK(train_config_from_json(R"({"train": {"max_steps": 7}})").max_steps == 7);
  CHECK_THROWS_AS(train_config_from_json(R"({"learning_rate": -1})"), ValidationError);
  CHECK_THROWS_AS(train_config_from_json(R"({"lr": 1e-4})"), ValidationError);
}

TEST_CASE("config lookup in the default directory") {
  TempDir dir("configdir");
  {
    std::ofstream(dir.path / "small.json") << R"({"n_train": 3})";
  }
  ::setenv("ECHOEDM_CONFIG_DIR", dir.path.c_str(), 1);
  CHECK(default_config_dir() == dir.path);
  CHECK(resolve_config_path("small") == dir.path / "small.json");
  CHECK(resolve_config_path("small.json") == dir.path / "small.json");
  CHECK(data_config_from_json(read_text_file(resolve_config_path("small"))).n_train == 3);
  CHECK_THROWS_AS(resolve_config_path("missing"), IoError);
  ::unsetenv("ECHOEDM_CONFIG_DIR");
  CHECK_THROWS_AS(resolve_config_path("small"), IoError);
  CHECK(text_hash("abc") == 0x352441c2u);
}
