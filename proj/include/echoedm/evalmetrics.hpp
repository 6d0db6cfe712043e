// SPDX-License-Identifier: Apache-2.0
#pragma once

// EF estimation from pixels, regression metrics, SSIM, the best-of-k
// evaluation protocol, dataset rebalancing and a small EF regressor.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "echoedm/cascade.hpp"
#include "echoedm/rng.hpp"
#include "echoedm/synthdata.hpp"
#include "echoedm/video.hpp"

namespace echoedm {

// ---------------------------------------------------------------------------
// EF estimation

/// Otsu threshold of values in [0, 1] over a 256-bin histogram.
double otsu_threshold(std::span<const float> values);

struct AreaTrace {
  double threshold = 0.0;
  double dark_level = 0.0;    ///< mean of the dark class
  double bright_level = 0.0;  ///< mean of the bright class
  std::vector<double> areas;  ///< per frame, pixels
  bool ok = false;
};

/// Per-frame ventricle area: one Otsu threshold per video over the cone
/// interior, the largest 4-connected dark component of each frame and the
/// partial-volume fraction of its pixels and their neighbours. `ok` is false
/// when some frame has no dark pixel inside the cone.
AreaTrace dark_region_areas(const Video& v, const std::vector<std::uint8_t>& cone);

/// (max A - min A) / max A for a [0, 1] video; nullopt when estimation fails.
std::optional<double> estimate_ef(const Video& v, const std::vector<std::uint8_t>& cone);

// ---------------------------------------------------------------------------
// Metrics

struct RegressionMetrics {
  int n = 0;
  double r2 = 0.0;  ///< NaN when the target has zero variance
  double mae = 0.0;
  double rmse = 0.0;
  bool r2_defined = true;
};

/// Throws ValidationError on empty or unequal inputs.
RegressionMetrics regression_metrics(std::span<const double> pred, std::span<const double> target);

/// Gaussian-window SSIM (11 x 11, sigma 1.5, K1 0.01, K2 0.03, range 1) of
/// two one-frame images, averaged over the valid window positions. Frames
/// smaller than the window use a window cropped to the frame.
double ssim(const Video& a, const Video& b);
/// Mean frame SSIM of two videos of equal shape.
double video_ssim(const Video& a, const Video& b);

// ---------------------------------------------------------------------------
// Evaluation

enum class EvalTask { Gen, Rec };
std::string to_string(EvalTask t);
EvalTask eval_task_from_string(const std::string& s);

/// Sample given a one-frame reference in model range and lambda_c; returns a
/// model-range video.
using VideoGenerator = std::function<Video(const Video& ref_frame, double lambda_c, Rng& rng)>;

struct GeneratorInfo {
  VideoShape shape;
  double fps = 0.0;
};

VideoGenerator cascade_generator(const CascadeConfig& cc, const CascadeModels& models);
GeneratorInfo cascade_output_info(const CascadeConfig& cc);

struct EvalOptions {
  EvalTask task = EvalTask::Gen;
  int k = 3;
  int max_videos = 0;  ///< first n videos of the split; 0 keeps all
  std::uint64_t seed = 0;
  std::string split = "test";
  double gen_min = 0.15;
  double gen_max = 0.85;

  void validate() const;
};

std::string eval_options_to_json(const EvalOptions& o);

struct EvalRecord {
  std::string id;
  double ef_true = 0.0;
  double target = 0.0;  ///< lambda_c
  std::vector<int> ref_indices;
  std::vector<std::optional<double>> candidates;  ///< estimated EF per draw
  int chosen = -1;                                ///< -1 when every draw failed
  double estimate = 0.0;
  double ssim = 0.0;  ///< chosen sample vs the ground-truth clip
};

struct EvalReport {
  EvalTask task = EvalTask::Gen;
  int k = 0;
  std::uint64_t seed = 0;
  int n_videos = 0;    ///< videos with a kept sample
  int n_failed = 0;    ///< videos where every draw failed estimation
  RegressionMetrics metrics;          ///< best of k
  RegressionMetrics first_candidate;  ///< draw 0 only, over videos where it succeeded
  RegressionMetrics best_on_first_set;  ///< best of k over that same subset
  double ssim_mean = 0.0;
  std::vector<EvalRecord> records;
};

/// For each video of the split: lambda_c is ef_true (Rec) or uniform in
/// [gen_min, gen_max] (Gen); k draws with independent noise and reference
/// frames; the draw whose estimated EF is closest to lambda_c is kept.
/// Video i uses Rng(seed).fork(i) whatever the thread count.
EvalReport evaluate(const VideoGenerator& gen, const GeneratorInfo& info, const Dataset& ds,
                    const EvalOptions& opts, std::ostream* progress = nullptr);

/// Same with the output geometry of a cascade.
EvalReport evaluate(const CascadeConfig& cc, const CascadeModels& models, const Dataset& ds,
                    const EvalOptions& opts, std::ostream* progress = nullptr);

/// Ground-truth clip in the generator geometry: resampled to `info.fps`,
/// area-downscaled, first `info.shape.frames` frames. [0, 1] range.
Video reference_clip(const VideoSample& s, const GeneratorInfo& info);

// EvalReport JSON:
//   {task, k, seed, n_videos, n_failed, ssim_mean,
//    metrics {n, r2, mae, rmse, r2_defined}, first_candidate {...},
//    best_on_first_set {...},
//    videos [{id, ef_true, lambda_c, ef_hat, chosen, ssim, ref_indices, candidates}]}
// Failed candidates are null.
std::string eval_report_to_json(const EvalReport& r);
EvalReport eval_report_from_json(const std::string& text);
/// Tab-separated, one row per video.
std::string eval_report_table(const EvalReport& r);
std::string summary_header();
std::string summary_row(const EvalReport& r, const std::string& model);

// ---------------------------------------------------------------------------
// Rebalancing

struct RebalanceOptions {
  std::string split = "train";
  double bin_width = 0.01;
  int target_per_bin = 10;
  double ef_min = 0.10;
  double ef_max = 0.90;
  int max_attempts = 10;      ///< generations per missing sample
  double accept_tol = 0.10;   ///< |EF_hat - lambda_c| bound; <= 0 accepts any estimate
  std::uint64_t seed = 0;

  int bins() const;
  void validate() const;
};

std::string rebalance_options_to_json(const RebalanceOptions& o);

struct RebalanceReport {
  std::size_t n_real = 0;
  std::size_t n_synthetic = 0;
  std::size_t n_real_dropped = 0;  ///< real videos above the per-bin target
  int shortfall = 0;
  int bins_short = 0;
  int attempts = 0;
  std::vector<int> real_per_bin;
  std::vector<int> final_per_bin;

  double real_fraction() const;
};

std::string rebalance_report_to_json(const RebalanceReport& r);

/// EF bin of a value; -1 outside [ef_min, ef_max).
int ef_bin(double ef, const RebalanceOptions& o);

/// Writes a train split with exactly target_per_bin videos per EF bin where
/// generation succeeds: real videos up to the target (a random subset when a
/// bin holds more) and generated ones, labelled with their lambda_c, for the
/// rest. Real videos outside the EF range are dropped. Synthetic videos are
/// conditioned on frames of random real videos of the split.
RebalanceReport rebalance_dataset(const VideoGenerator& gen, const GeneratorInfo& info, const Dataset& ds,
                                  const RebalanceOptions& opts, const std::filesystem::path& out,
                                  std::ostream* progress = nullptr);

// ---------------------------------------------------------------------------
// EF regressor

/// Input geometry shared by real and generated videos.
struct RegressorInput {
  int frames = 16;
  int height = 32;
  int width = 32;
  double fps = 8.0;
};

struct RegressorOptions {
  RegressorInput input;
  int channels = 8;
  int hidden = 32;
  int epochs = 30;
  int batch_size = 16;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;

  void validate() const;
};

std::string regressor_options_to_json(const RegressorOptions& o);

/// Conv -> SiLU -> pool, three times, then two dense layers. Predicts EF.
class EfRegressor {
 public:
  explicit EfRegressor(const RegressorOptions& o);

  std::size_t num_params() const { return n_params_; }
  std::vector<float> init_params(Rng& rng) const;
  /// Model-range clip in the input geometry.
  double predict(std::span<const float> params, const Video& clip) const;
  /// Squared error of one clip; adds d/dparams into grads.
  double loss_and_grad(std::span<const float> params, const Video& clip, double target,
                       std::span<float> grads) const;

 private:
  template <class G>
  int build(G& g, const Video& clip) const;

  RegressorOptions o_;
  std::size_t n_params_ = 0;
  struct Layer {
    std::size_t w_off, w_n, b_off, b_n;
    int fan_in;
  };
  std::vector<Layer> layers_;
};

/// Converts a dataset video to the regressor input (model range).
Video regressor_clip(const VideoSample& s, const RegressorInput& in);

struct RegressorResult {
  int n_train = 0;
  double real_fraction = 0.0;
  RegressionMetrics val;
  std::vector<double> epoch_loss;
};

std::string regressor_result_to_json(const RegressorResult& r);

RegressorResult train_and_validate_regressor(const Dataset& train, const std::string& train_split,
                                             const Dataset& val, const std::string& val_split,
                                             const RegressorOptions& opts);

}  // namespace echoedm
