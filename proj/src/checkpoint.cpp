// SPDX-License-Identifier: Apache-2.0
#include <cstring>

#include "echoedm/trainer.hpp"
#include "io_util.hpp"
#include "json.hpp"

namespace echoedm {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'E', 'D', 'M', 'C', 'K', 'P', 'T', '\0'};

void put_block(std::vector<std::uint8_t>& out, const std::vector<float>& v) {
  io::put_le<std::uint64_t>(out, v.size());
  io::put_le_span<float>(out, v);
}

std::vector<float> get_block(io::Reader& r, std::uint64_t expect, const char* what) {
  const auto n = r.get<std::uint64_t>();
  if (n != expect)
    throw IoError(std::string("checkpoint block '") + what + "' has " + std::to_string(n) +
                  " values, expected " + std::to_string(expect));
  std::vector<float> v(n);
  r.get_span<float>(v);
  return v;
}

}  // namespace

std::string net_config_to_json(const NetConfig& c) {
  json j = {{"dims", c.base_dims},
            {"layers", c.layers_per_level},
            {"bottleneck_attention", c.bottleneck_attention},
            {"mem_opti", c.mem_opti},
            {"mode", to_string(c.mode)},
            {"frames", c.in_frames},
            {"height", c.in_height},
            {"width", c.in_width}};
  return j.dump();
}

NetConfig net_config_from_json(const std::string& s) {
  try {
    const json j = json::parse(s);
    NetConfig c;
    c.base_dims = j.at("dims");
    c.layers_per_level = j.at("layers").get<std::vector<int>>();
    c.bottleneck_attention = j.at("bottleneck_attention");
    c.mem_opti = j.value("mem_opti", false);
    c.mode = stage_mode_from_string(j.at("mode"));
    c.in_frames = j.at("frames");
    c.in_height = j.at("height");
    c.in_width = j.at("width");
    return c;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed network config: ") + e.what());
  }
}

void save_checkpoint(const fs::path& path, const TrainState& s) {
  const std::size_t P = s.params.size();
  if (s.ema.shadow.size() != P || s.adam.m.size() != P || s.adam.v.size() != P)
    throw ValidationError("save_checkpoint: inconsistent state sizes");
  std::vector<std::uint8_t> out;
  out.reserve(32 + 16 * P + 256);
  out.insert(out.end(), kMagic, kMagic + 8);
  io::put_le<std::uint32_t>(out, kCheckpointVersion);
  io::put_le<std::uint64_t>(out, config_hash(s.net));
  const std::string cj = net_config_to_json(s.net);
  io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(cj.size()));
  out.insert(out.end(), cj.begin(), cj.end());
  io::put_le<double>(out, s.sigma_q);
  io::put_le<std::int64_t>(out, s.step);
  io::put_le<std::uint64_t>(out, s.seed);
  io::put_le<double>(out, s.ema.decay);
  io::put_le<std::uint64_t>(out, P);
  put_block(out, s.params);
  put_block(out, s.ema.shadow);
  put_block(out, s.adam.m);
  put_block(out, s.adam.v);
  io::put_le<std::uint32_t>(out, io::crc32_bytes(out.data(), out.size()));
  io::write_file(path, out);
}

TrainState load_checkpoint(const fs::path& path) {
  const auto bytes = io::read_file(path);
  const std::string what = path.string();
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 8) != 0)
    throw IoError(what + ": not a checkpoint file");
  io::Reader r(bytes, what);
  std::uint8_t magic[8];
  r.get_span<std::uint8_t>(magic);
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw IoError(what + ": checkpoint version " + std::to_string(version) + " is not supported (expected " +
                  std::to_string(kCheckpointVersion) + ")");
  TrainState s;
  const auto hash = r.get<std::uint64_t>();
  const auto len = r.get<std::uint32_t>();
  if (len > r.remaining()) throw IoError(what + ": truncated file");
  std::string cj(len, '\0');
  r.get_span<char>(std::span(cj.data(), cj.size()));
  s.sigma_q = r.get<double>();
  s.step = r.get<std::int64_t>();
  s.seed = r.get<std::uint64_t>();
  s.ema.decay = r.get<double>();
  const auto P = r.get<std::uint64_t>();
  if (P > r.remaining() / 4) throw IoError(what + ": truncated file");
  s.params = get_block(r, P, "params");
  s.ema.shadow = get_block(r, P, "ema");
  s.adam.m = get_block(r, P, "adam_m");
  s.adam.v = get_block(r, P, "adam_v");
  const std::size_t body = r.pos();
  const auto stored = r.get<std::uint32_t>();
  if (r.remaining() != 0) throw IoError(what + ": trailing bytes after the checksum");
  if (io::crc32_bytes(bytes.data(), body) != stored) throw IoError(what + ": checksum mismatch");
  s.net = net_config_from_json(cj);
  if (config_hash(s.net) != hash) throw IoError(what + ": stored config hash does not match its config");
  return s;
}

TrainState load_checkpoint(const fs::path& path, const NetConfig& expected) {
  TrainState s = load_checkpoint(path);
  if (config_hash(s.net) != config_hash(expected) || !(s.net == expected))
    throw ValidationError(path.string() + ": checkpoint network config " + net_config_to_json(s.net) +
                          " does not match the expected config " + net_config_to_json(expected));
  return s;
}

}  // namespace echoedm
