// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "echoedm/edm.hpp"
#include "echoedm/net.hpp"
#include "echoedm/rng.hpp"
#include "echoedm/synthdata.hpp"

namespace echoedm {

struct TrainConfig {
  double learning_rate = 1e-4;
  int batch_size = 4;
  int grad_accum = 1;
  double ema_decay = 0.999;
  double time_layer_drop_prob = 0.25;
  /// Upper bound of the std of the noise added to v_prev, in model units.
  double cond_noise_max = 0.1;
  int max_steps = 1000;
  std::uint64_t seed = 0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  int effective_batch() const { return batch_size * grad_accum; }
  /// Throws ValidationError; returns warnings (e.g. a learning rate above 5e-4).
  std::vector<std::string> validate() const;
};

/// One training element in model range.
struct TrainSample {
  Video video;
  Conditioning cond;
};

struct AdamState {
  std::vector<float> m, v;
};

/// Everything a run needs to continue bit-exactly.
struct TrainState {
  NetConfig net;
  double sigma_q = 0.5;
  std::int64_t step = 0;  ///< optimizer updates performed
  std::uint64_t seed = 0;
  std::vector<float> params;
  EmaState ema;
  AdamState adam;

  /// Fresh parameters from `seed`; EMA starts equal to them.
  static TrainState initialize(const UNet<float>& net, double sigma_q, std::uint64_t seed,
                               double ema_decay);
};

/// Counters for structural assertions in tests.
struct TrainCounters {
  std::int64_t forwards = 0;
  std::int64_t forwards_without_time_layers = 0;
  std::int64_t cond_corruptions = 0;
};

/// Process-wide count of conditioning corruptions. Only the training path
/// increments it; sampling code never touches v_prev.
std::int64_t cond_corruption_count();

/// Adds N(0, std^2) noise to v_prev with std ~ U[0, max_std] and counts it.
void corrupt_conditioning(Conditioning& cond, double max_std, Rng& rng);

struct StepResult {
  double loss = 0.0;
  double grad_norm = 0.0;
};

/// One optimizer update over cfg.effective_batch() samples split into
/// grad_accum micro-batches. Element i uses rng.fork(i) for its sigma,
/// noise, time-layer drop and conditioning corruption, so the draws do not
/// depend on the micro-batch split. Throws NumericalError on a non-finite
/// loss. `grad_out` receives the accumulated gradient of the mean loss.
StepResult train_step(const UNet<float>& net, TrainState& state, const std::vector<TrainSample>& batch,
                      const TrainConfig& cfg, const TrainingSigmaDist& dist, const Rng& rng,
                      TrainCounters* counters = nullptr, std::vector<float>* grad_out = nullptr);

/// Output geometry of a stage and, for super-resolution stages, of the stage
/// feeding it.
struct StageSpec {
  StageMode mode = StageMode::Base;
  int frames = 8, height = 16, width = 16;
  double fps = 4.0;
  int prev_frames = 0, prev_height = 0, prev_width = 0;
  double prev_fps = 0.0;

  bool has_prev() const { return mode != StageMode::Base; }
};

/// Stage-resolution copies of the dataset videos and a sampler of training
/// elements from them.
class StageData {
 public:
  /// Loads `split` (all entries when empty), resampled to the stage fps and
  /// area-downscaled to the stage resolution. max_videos <= 0 keeps all.
  StageData(const Dataset& ds, const std::string& split, StageSpec spec, int max_videos = 0);

  std::size_t size() const { return clips_.size(); }
  const StageSpec& spec() const { return spec_; }
  double ef(std::size_t i) const { return efs_.at(i); }

  /// Random video, random window, reference frame drawn from the whole clip
  /// and, for super-resolution stages, the clean v_prev built from the window.
  TrainSample draw(Rng& rng) const;
  /// Same with a fixed video and window start.
  TrainSample make(std::size_t video, int window_start, int ref_index) const;

 private:
  StageSpec spec_;
  std::vector<Video> clips_;  ///< model range
  std::vector<double> efs_;
};

/// Real window -> previous-stage geometry -> back up to the stage geometry.
Video degrade_to_prev(const Video& window, const StageSpec& spec);

struct TrainLogLine {
  std::int64_t step;
  double loss;
  double ema_loss;
  double wall_s;
};

std::string format_log_line(const TrainLogLine& l);
TrainLogLine parse_log_line(const std::string& line);

struct TrainRunOptions {
  std::filesystem::path checkpoint;   ///< written at the end and every checkpoint_every steps
  int checkpoint_every = 0;           ///< 0: only at the end
  std::ostream* log = nullptr;
  double loss_smoothing = 0.98;       ///< EMA factor of the logged loss
};

/// Runs optimizer steps until state.step == cfg.max_steps. The batch of step
/// k is drawn from Rng(cfg.seed).fork(k), so a resumed run matches a
/// straight one.
void train(const UNet<float>& net, TrainState& state, const StageData& data, const TrainConfig& cfg,
           const TrainingSigmaDist& dist, const TrainRunOptions& opts,
           TrainCounters* counters = nullptr);

// ---------------------------------------------------------------------------
// Checkpoints
//
//   "EDMCKPT\0" | u32 version | u64 config hash | u32 n + NetConfig JSON |
//   f64 sigma_q | i64 step | u64 seed | f64 ema decay | u64 num_params |
//   4 x (u64 n + n f32: params, ema, adam m, adam v) | u32 crc32 of all prior bytes
// All little endian.

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string net_config_to_json(const NetConfig& c);
NetConfig net_config_from_json(const std::string& s);

void save_checkpoint(const std::filesystem::path& path, const TrainState& state);
/// Throws IoError on a bad checksum, version or truncation.
TrainState load_checkpoint(const std::filesystem::path& path);
/// Also throws ValidationError when the stored network config differs.
TrainState load_checkpoint(const std::filesystem::path& path, const NetConfig& expected);

}  // namespace echoedm
