// SPDX-License-Identifier: Apache-2.0
#pragma once

// Synthetic echo-like videos with analytically known ejection fraction: a
// dark pulsing ellipse (the ventricle) inside an ultrasound sector, with
// multiplicative speckle. Also the clip preprocessing and the on-disk
// dataset format.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "echoedm/rng.hpp"
#include "echoedm/video.hpp"

namespace echoedm {

struct SpeckleParams {
  bool enabled = true;
  double strength = 0.6;       ///< mix of the unit-mean texture into the image
  double decorrelation = 0.3;  ///< fraction of the field redrawn each frame
  bool smooth = true;          ///< 3x3 binomial blur of the amplitude
};

struct SynthParams {
  double ef = 0.6;
  double heart_rate_bpm = 50.0;
  double phase = 0.0;
  double center_x = 0.5;  ///< ellipse centre, fraction of width
  double center_y = 0.56; ///< ellipse centre, fraction of height
  double axis_a = 0.17;   ///< end-diastolic horizontal semi-axis, fraction of width
  double axis_b = 0.22;   ///< end-diastolic vertical semi-axis, fraction of height
  double angle = 0.0;     ///< ellipse rotation in radians
  double tissue = 0.65;
  double blood = 0.06;
  std::uint64_t speckle_seed = 0;
  int height = 32;
  int width = 32;
  double fps = 32.0;
  double duration_s = 4.0;
  double cone_angle = 1.3089969389957472;  ///< full opening angle, radians (75 degrees)
  SpeckleParams speckle;

  int frames() const;
  double ed_area() const;  ///< pixels^2
  /// Throws ValidationError on out-of-range values or an ellipse leaving the cone.
  void validate() const;
};

/// A(t) = A_ed - (A_ed - A_es) * (1 - cos(2 pi hr / 60 t + phase)) / 2, with
/// A_es = (1 - ef) A_ed. Areas in pixels^2.
std::vector<double> area_curve(const SynthParams& p, const std::vector<double>& times);

/// (max - min) / max; 0 for an empty or non-positive curve.
double ef_from_areas(const std::vector<double>& areas);

/// 1 inside the sector (pixel centre test), 0 outside. Apex at the top centre,
/// radius equal to the image height.
std::vector<std::uint8_t> cone_mask(int height, int width, double cone_angle);

struct VideoSample {
  Video video;  ///< [0, 1]
  double ef_true = 0.0;
  double fps = 0.0;
  std::vector<double> area_curve;  ///< per frame, pixels^2
  std::optional<SynthParams> params;
};

/// Renders the clip. Deterministic given the parameters (speckle_seed drives
/// the texture).
VideoSample synth_video(const SynthParams& p);

/// Linear resampling in time; ef_true carried over.
VideoSample resample_fps(const VideoSample& v, double target_fps);

/// Keeps the first n frames or pads by repeating the final frame.
VideoSample pad_or_truncate(const VideoSample& v, int n_frames = 64);

struct CondPick {
  int index = 0;
  bool inside_window = false;
  Video frame;  ///< one frame
};

/// Uniform frame over the whole source clip, which may fall outside the
/// training window [window_start, window_start + window_frames).
CondPick pick_cond_frame(const Video& full, int window_start, int window_frames, Rng& rng);

// ---------------------------------------------------------------------------
// Dataset generation

enum class EfDistribution { Uniform, Skewed };

struct DataGenConfig {
  int height = 32;
  int width = 32;
  double fps = 32.0;
  double duration_s = 4.0;
  int n_train = 2000;
  int n_val = 300;
  int n_test = 300;
  EfDistribution ef_distribution = EfDistribution::Uniform;
  double ef_min = 0.10;
  double ef_max = 0.90;
  /// Skewed mode: mixture weight and shape of the dominant mode.
  double skew_weight = 0.85;
  double skew_mean = 0.62;
  double skew_std = 0.07;
  double hr_min = 40.0;
  double hr_max = 60.0;
  double cone_angle_deg = 75.0;
  SpeckleParams speckle;
  std::uint64_t seed = 0;

  void validate() const;
};

std::string to_string(EfDistribution d);
EfDistribution ef_distribution_from_string(const std::string& s);

/// EF draw for the configured distribution.
double sample_ef(const DataGenConfig& cfg, Rng& rng);
/// Probability that a draw is <= x, for histogram checks.
double ef_cdf(const DataGenConfig& cfg, double x);

/// Randomized geometry, texture and heart rate for one video.
SynthParams random_params(const DataGenConfig& cfg, Rng& rng);

// ---------------------------------------------------------------------------
// Dataset on disk
//
//   <dir>/manifest.json            index, sigma_q, format_version
//   <dir>/<split>/<id>.f32         raw little-endian float32, frame-major, [0, 1]
//   <dir>/<split>/<id>.json        sidecar: ef_true, fps, dims, seed, crc32

inline constexpr int kDatasetFormatVersion = 1;

struct ManifestEntry {
  std::string id;
  std::string file;  ///< relative to the dataset directory
  std::string meta;  ///< sidecar, relative
  std::string split;
  std::string provenance = "real";  ///< or "synthetic"
  double ef_true = 0.0;
  double fps = 0.0;
  int frames = 0;
  int height = 0;
  int width = 0;
  std::uint64_t seed = 0;
  std::uint32_t checksum = 0;
};

struct DatasetManifest {
  int format_version = kDatasetFormatVersion;
  double sigma_q = 0.0;
  int height = 0;
  int width = 0;
  double cone_angle = 0.0;
  std::vector<ManifestEntry> entries;
  std::string generator_json;  ///< free-form provenance

  std::vector<std::size_t> split_indices(const std::string& split) const;
};

/// Streams samples to disk and writes the manifest on finish().
class DatasetWriter {
 public:
  DatasetWriter(std::filesystem::path dir, int height, int width, double cone_angle);

  void add(const VideoSample& s, const std::string& split, std::uint64_t seed,
           const std::string& provenance = "real");
  /// Copies an already-stored entry (video bytes re-verified).
  void add_copy(const class Dataset& src, std::size_t index, const std::string& split);
  /// sigma_q is measured over the train split in model range, or over all
  /// entries when there is no train split.
  DatasetManifest finish(const std::string& generator_json = "{}");

 private:
  void account(const Video& v, const std::string& split);

  std::filesystem::path dir_;
  DatasetManifest manifest_;
  double sum_train_ = 0, sumsq_train_ = 0, sum_all_ = 0, sumsq_all_ = 0;
  double n_train_ = 0, n_all_ = 0;
};

/// Read access with per-entry verification.
class Dataset {
 public:
  static Dataset open(const std::filesystem::path& dir);

  const DatasetManifest& manifest() const { return manifest_; }
  const std::filesystem::path& dir() const { return dir_; }
  std::size_t size() const { return manifest_.entries.size(); }
  const ManifestEntry& entry(std::size_t i) const { return manifest_.entries.at(i); }
  /// Reads, checks the sidecar and checksum. Throws IoError on mismatch.
  VideoSample load(std::size_t i) const;
  std::vector<std::uint8_t> cone() const;

 private:
  std::filesystem::path dir_;
  DatasetManifest manifest_;
};

void write_dataset(const std::vector<VideoSample>& samples, const std::vector<std::string>& splits,
                   const std::filesystem::path& dir, double cone_angle);

/// Generates the three splits with independent per-video streams.
DatasetManifest generate_dataset(const DataGenConfig& cfg, const std::filesystem::path& dir);

}  // namespace echoedm
