// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <cstdio>

#include "echoedm/synthdata.hpp"

#include "echoedm/config.hpp"
#include "io_util.hpp"
#include "parallel_util.hpp"
#include "json.hpp"

namespace echoedm {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json params_to_json(const SynthParams& p) {
  return {{"ef", p.ef},
          {"heart_rate_bpm", p.heart_rate_bpm},
          {"phase", p.phase},
          {"center_x", p.center_x},
          {"center_y", p.center_y},
          {"axis_a", p.axis_a},
          {"axis_b", p.axis_b},
          {"angle", p.angle},
          {"tissue", p.tissue},
          {"blood", p.blood},
          {"speckle_seed", p.speckle_seed},
          {"height", p.height},
          {"width", p.width},
          {"fps", p.fps},
          {"duration_s", p.duration_s},
          {"cone_angle", p.cone_angle},
          {"speckle",
           {{"enabled", p.speckle.enabled},
            {"strength", p.speckle.strength},
            {"decorrelation", p.speckle.decorrelation},
            {"smooth", p.speckle.smooth}}}};
}

SynthParams params_from_json(const json& j) {
  SynthParams p;
  p.ef = j.at("ef");
  p.heart_rate_bpm = j.at("heart_rate_bpm");
  p.phase = j.at("phase");
  p.center_x = j.at("center_x");
  p.center_y = j.at("center_y");
  p.axis_a = j.at("axis_a");
  p.axis_b = j.at("axis_b");
  p.angle = j.at("angle");
  p.tissue = j.at("tissue");
  p.blood = j.at("blood");
  p.speckle_seed = j.at("speckle_seed");
  p.height = j.at("height");
  p.width = j.at("width");
  p.fps = j.at("fps");
  p.duration_s = j.at("duration_s");
  p.cone_angle = j.at("cone_angle");
  const json& s = j.at("speckle");
  p.speckle.enabled = s.at("enabled");
  p.speckle.strength = s.at("strength");
  p.speckle.decorrelation = s.at("decorrelation");
  p.speckle.smooth = s.at("smooth");
  return p;
}

json entry_to_json(const ManifestEntry& e) {
  return {{"id", e.id},         {"file", e.file},     {"meta", e.meta},
          {"split", e.split},   {"provenance", e.provenance},
          {"ef_true", e.ef_true}, {"fps", e.fps},     {"frames", e.frames},
          {"height", e.height}, {"width", e.width},   {"seed", e.seed},
          {"checksum", io::hex32(e.checksum)}};
}

ManifestEntry entry_from_json(const json& j) {
  ManifestEntry e;
  e.id = j.at("id");
  e.file = j.at("file");
  e.meta = j.at("meta");
  e.split = j.at("split");
  e.provenance = j.at("provenance");
  e.ef_true = j.at("ef_true");
  e.fps = j.at("fps");
  e.frames = j.at("frames");
  e.height = j.at("height");
  e.width = j.at("width");
  e.seed = j.at("seed");
  e.checksum = io::parse_hex32(j.at("checksum").get<std::string>());
  return e;
}

std::vector<std::uint8_t> video_bytes(const Video& v) {
  std::vector<std::uint8_t> b;
  b.reserve(v.size() * 4);
  io::put_le_span<float>(b, v.data);
  return b;
}

}  // namespace

std::vector<std::size_t> DatasetManifest::split_indices(const std::string& split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < entries.size(); ++i)
    if (entries[i].split == split) out.push_back(i);
  return out;
}

DatasetWriter::DatasetWriter(fs::path dir, int height, int width, double cone_angle)
    : dir_(std::move(dir)) {
  manifest_.height = height;
  manifest_.width = width;
  manifest_.cone_angle = cone_angle;
  std::error_code ec;
  fs::create_directories(dir_, ec);
  if (ec) throw IoError("cannot create dataset directory " + dir_.string() + ": " + ec.message());
}

void DatasetWriter::account(const Video& v, const std::string& split) {
  for (float x : v.data) {
    const double m = 2.0 * x - 1.0;
    sum_all_ += m;
    sumsq_all_ += m * m;
    if (split == "train") {
      sum_train_ += m;
      sumsq_train_ += m * m;
    }
  }
  n_all_ += v.size();
  if (split == "train") n_train_ += v.size();
}

void DatasetWriter::add(const VideoSample& s, const std::string& split, std::uint64_t seed,
                        const std::string& provenance) {
  for (float x : s.video.data)
    if (!(x >= 0.0f && x <= 1.0f)) throw ValidationError("dataset pixels must lie in [0, 1]");
  char name[32];
  std::snprintf(name, sizeof name, "%06zu", manifest_.entries.size());
  ManifestEntry e;
  e.id = split + "/" + name;
  e.file = e.id + ".f32";
  e.meta = e.id + ".json";
  e.split = split;
  e.provenance = provenance;
  e.ef_true = s.ef_true;
  e.fps = s.fps;
  e.frames = s.video.frames;
  e.height = s.video.height;
  e.width = s.video.width;
  e.seed = seed;
  const auto bytes = video_bytes(s.video);
  e.checksum = io::crc32_bytes(bytes.data(), bytes.size());
  io::write_file(dir_ / e.file, bytes);

  json side = entry_to_json(e);
  side["format_version"] = kDatasetFormatVersion;
  if (s.params) side["params"] = params_to_json(*s.params);
  io::write_text(dir_ / e.meta, side.dump(1));
  account(s.video, split);
  manifest_.entries.push_back(std::move(e));
}

void DatasetWriter::add_copy(const Dataset& src, std::size_t index, const std::string& split) {
  const VideoSample s = src.load(index);
  add(s, split, src.entry(index).seed, src.entry(index).provenance);
}

DatasetManifest DatasetWriter::finish(const std::string& generator_json) {
  const bool have_train = n_train_ > 0;
  const double n = have_train ? n_train_ : n_all_;
  const double sum = have_train ? sum_train_ : sum_all_;
  const double sumsq = have_train ? sumsq_train_ : sumsq_all_;
  if (n > 0) {
    const double mean = sum / n;
    manifest_.sigma_q = std::sqrt(std::max(0.0, sumsq / n - mean * mean));
  }
  manifest_.generator_json = generator_json;
  json m;
  m["format_version"] = manifest_.format_version;
  m["sigma_q"] = manifest_.sigma_q;
  m["height"] = manifest_.height;
  m["width"] = manifest_.width;
  m["cone_angle"] = manifest_.cone_angle;
  m["generator"] = json::parse(generator_json);
  m["entries"] = json::array();
  for (const auto& e : manifest_.entries) m["entries"].push_back(entry_to_json(e));
  io::write_text(dir_ / "manifest.json", m.dump(1));
  return manifest_;
}

Dataset Dataset::open(const fs::path& dir) {
  Dataset d;
  d.dir_ = dir;
  const fs::path mpath = dir / "manifest.json";
  if (!fs::exists(mpath)) throw IoError("no manifest.json in " + dir.string());
  json m;
  try {
    m = json::parse(io::read_text(mpath));
  } catch (const json::exception& e) {
    throw IoError("malformed manifest " + mpath.string() + ": " + e.what());
  }
  try {
    d.manifest_.format_version = m.at("format_version");
    if (d.manifest_.format_version != kDatasetFormatVersion)
      throw IoError("dataset format version " + std::to_string(d.manifest_.format_version) +
                    " is not supported (expected " + std::to_string(kDatasetFormatVersion) + ")");
    d.manifest_.sigma_q = m.at("sigma_q");
    d.manifest_.height = m.at("height");
    d.manifest_.width = m.at("width");
    d.manifest_.cone_angle = m.at("cone_angle");
    d.manifest_.generator_json = m.value("generator", json::object()).dump();
    for (const auto& e : m.at("entries")) d.manifest_.entries.push_back(entry_from_json(e));
  } catch (const json::exception& e) {
    throw IoError("malformed manifest " + mpath.string() + ": " + e.what());
  }
  return d;
}

VideoSample Dataset::load(std::size_t i) const {
  const ManifestEntry& e = entry(i);
  const fs::path meta = dir_ / e.meta;
  if (!fs::exists(meta)) throw IoError("missing sidecar " + meta.string());
  json side;
  try {
    side = json::parse(io::read_text(meta));
    if (side.at("format_version").get<int>() != kDatasetFormatVersion)
      throw IoError("sidecar version mismatch in " + meta.string());
    if (io::parse_hex32(side.at("checksum")) != e.checksum || side.at("frames") != e.frames ||
        side.at("height") != e.height || side.at("width") != e.width)
      throw IoError("sidecar " + meta.string() + " disagrees with the manifest");
  } catch (const json::exception& ex) {
    throw IoError("malformed sidecar " + meta.string() + ": " + ex.what());
  }
  const auto bytes = io::read_file(dir_ / e.file);
  const std::size_t expect = static_cast<std::size_t>(e.frames) * e.height * e.width * 4;
  if (bytes.size() != expect)
    throw IoError(e.file + ": expected " + std::to_string(expect) + " bytes, found " +
                  std::to_string(bytes.size()));
  if (io::crc32_bytes(bytes.data(), bytes.size()) != e.checksum)
    throw IoError(e.file + ": checksum mismatch");

  VideoSample s;
  s.video = Video(e.frames, e.height, e.width);
  io::Reader r(bytes, e.file);
  r.get_span<float>(s.video.data);
  s.ef_true = e.ef_true;
  s.fps = e.fps;
  if (side.contains("params")) {
    s.params = params_from_json(side["params"]);
    std::vector<double> times(e.frames);
    for (int f = 0; f < e.frames; ++f) times[f] = f / e.fps;
    s.area_curve = area_curve(*s.params, times);
  }
  return s;
}

std::vector<std::uint8_t> Dataset::cone() const {
  return cone_mask(manifest_.height, manifest_.width, manifest_.cone_angle);
}

void write_dataset(const std::vector<VideoSample>& samples, const std::vector<std::string>& splits,
                   const fs::path& dir, double cone_angle) {
  if (samples.size() != splits.size()) throw ValidationError("write_dataset: one split per sample");
  if (samples.empty()) throw ValidationError("write_dataset: no samples");
  DatasetWriter w(dir, samples[0].video.height, samples[0].video.width, cone_angle);
  for (std::size_t i = 0; i < samples.size(); ++i)
    w.add(samples[i], splits[i], samples[i].params ? samples[i].params->speckle_seed : 0);
  w.finish();
}

DatasetManifest generate_dataset(const DataGenConfig& cfg, const fs::path& dir) {
  cfg.validate();
  DatasetWriter w(dir, cfg.height, cfg.width, cfg.cone_angle_deg * std::numbers::pi / 180.0);
  const Rng master(cfg.seed);
  struct Job {
    std::string split;
    std::uint64_t stream;
  };
  std::vector<Job> jobs;
  // streams are keyed by split and position so resizing one split leaves the
  // others untouched
  for (int i = 0; i < cfg.n_train; ++i) jobs.push_back({"train", 0x100000000ULL + i});
  for (int i = 0; i < cfg.n_val; ++i) jobs.push_back({"val", 0x200000000ULL + i});
  for (int i = 0; i < cfg.n_test; ++i) jobs.push_back({"test", 0x300000000ULL + i});

  constexpr int kChunk = 64;
  std::vector<VideoSample> chunk;
  for (std::size_t start = 0; start < jobs.size(); start += kChunk) {
    const int n = static_cast<int>(std::min<std::size_t>(kChunk, jobs.size() - start));
    chunk.assign(n, VideoSample{});
    detail::parallel_for_dynamic(n, [&](int k) {
      Rng rng = master.fork(jobs[start + k].stream);
      chunk[k] = synth_video(random_params(cfg, rng));
    });
    for (int k = 0; k < n; ++k)
      w.add(chunk[k], jobs[start + k].split, chunk[k].params->speckle_seed);
  }

  return w.finish(data_config_to_json(cfg));
}

}  // namespace echoedm
