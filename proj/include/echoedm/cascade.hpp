// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "echoedm/edm.hpp"
#include "echoedm/net.hpp"
#include "echoedm/sampler.hpp"
#include "echoedm/trainer.hpp"

namespace echoedm {

struct StageConfig {
  StageMode mode = StageMode::Base;
  int out_height = 16;
  int out_width = 16;
  int out_frames = 8;
  double fps = 4.0;
  int sampling_steps = 32;
  double s_churn = 0.0;
  /// Width, depth and attention settings; the mode and input dims are kept
  /// in sync with the stage by CascadeConfig::normalize().
  NetConfig net;

  VideoShape shape() const { return {out_frames, out_height, out_width}; }
};

struct CascadeConfig {
  std::string name;
  std::vector<StageConfig> stages;
  /// Shared sampler settings; s_churn is taken per stage.
  SamplerConstants sampler;
  double sigma_min = 0.002;
  double sigma_max = 80.0;
  double rho = 7.0;

  /// Copies each stage's mode and output dims into its NetConfig.
  void normalize();
  /// Throws ValidationError naming the offending stage.
  void validate() const;
  /// Soft checks, e.g. stage durations that differ from 2 s.
  std::vector<std::string> warnings() const;
  /// Denoiser evaluations of one cascade sample: sum of 2 N_s - 1.
  int expected_evaluations() const;
};

/// Known names: 1SCM, 2SCM, 4SCM, toy1, toy2.
CascadeConfig preset(const std::string& name);
std::vector<std::string> preset_names();

std::string cascade_to_json(const CascadeConfig& c);
/// Parses and validates.
CascadeConfig cascade_from_json(const std::string& text);
/// A preset name or a path to a JSON file.
CascadeConfig load_cascade(const std::string& name_or_path);

/// Geometry used to prepare training data for stage s.
StageSpec stage_spec(const CascadeConfig& c, int s);

/// Upscales a video (frames and resolution) or a single frame (resolution
/// only) to the stage output geometry. Throws ValidationError when any
/// dimension would shrink.
Video rescale_to_stage(const Video& v, const StageConfig& stage);

/// Brings a source-resolution reference frame to the stage resolution: area
/// average for integer factors, bilinear otherwise.
Video ref_frame_for_stage(const Video& frame, const StageConfig& stage);

/// D(x; sigma) around a raw network with its conditioning bound. `calls`
/// counts evaluations when given.
Denoiser make_denoiser(const UNet<float>& net, std::span<const float> params, double sigma_q,
                       Conditioning cond, int* calls = nullptr);

/// Per-stage denoiser for the conditioning of that stage.
using StageDenoiserFactory = std::function<Denoiser(int stage, const Conditioning& cond)>;

struct CascadeTrace {
  std::vector<int> evaluations;  ///< per stage
  std::vector<Video> stage_outputs;
  int total() const;
};

/// Sequential sampling through all stages with any denoiser source.
Video run_cascade_with(const CascadeConfig& cc, const StageDenoiserFactory& factory, const Video& ref_frame,
                       double lambda_c, Rng& rng, CascadeTrace* trace = nullptr);

/// Trained networks of a cascade (EMA parameters).
class CascadeModels {
 public:
  /// One checkpoint per stage, checked against the stage network config.
  static CascadeModels load(const CascadeConfig& cc, const std::vector<std::filesystem::path>& checkpoints);
  /// From in-memory states (tests).
  static CascadeModels from_states(const CascadeConfig& cc, const std::vector<TrainState>& states);

  std::size_t size() const { return nets_.size(); }
  StageDenoiserFactory factory(int* calls = nullptr) const;

 private:
  std::vector<UNet<float>> nets_;
  std::vector<std::vector<float>> params_;
  std::vector<double> sigma_q_;
};

/// Stage 0 from noise conditioned on (I_c, lambda_c); each later stage on the
/// rescaled output of the previous one. `ref_frame` is one frame at source
/// resolution in model range; lambda_c in [0, 1]. Output in [-1, 1].
Video run_cascade(const CascadeConfig& cc, const CascadeModels& models, const Video& ref_frame,
                  double lambda_c, Rng& rng, CascadeTrace* trace = nullptr);

}  // namespace echoedm
