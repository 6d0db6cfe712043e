// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "echoedm/edm.hpp"
#include "echoedm/graph.hpp"
#include "echoedm/rng.hpp"
#include "echoedm/video.hpp"

namespace echoedm {

enum class StageMode { Base, TSR, SSR, TSSR };

std::string to_string(StageMode m);
StageMode stage_mode_from_string(const std::string& s);

struct NetConfig {
  int base_dims = 16;  ///< channels at the top level, doubled per level
  std::vector<int> layers_per_level{2, 2, 2};
  bool bottleneck_attention = true;
  /// Reserved: modified down/upsampling blocks. Accepted and stored, no effect.
  bool mem_opti = false;
  StageMode mode = StageMode::Base;
  int in_frames = 8;
  int in_height = 16;
  int in_width = 16;

  int depth() const { return static_cast<int>(layers_per_level.size()); }
  int channels_at(int level) const { return base_dims << level; }
  int emb_dims() const { return 4 * base_dims; }
  /// x, the broadcast reference frame, and v_prev for super-resolution stages.
  int input_channels() const { return mode == StageMode::Base ? 2 : 3; }
  VideoShape shape() const { return {in_frames, in_height, in_width}; }

  void validate() const;
  bool operator==(const NetConfig&) const = default;
};

/// Stable 64-bit digest of a NetConfig, stored in checkpoints.
std::uint64_t config_hash(const NetConfig& cfg);

/// Conditioning inputs in model range.
struct Conditioning {
  Video ref_frame;              ///< I_c, one frame at the stage resolution
  double lambda_c = 0.5;        ///< normalized EF in [0, 1]
  std::optional<Video> v_prev;  ///< previous stage output at the stage dims
};

/// Number of Fourier features per scalar fed to the embedding MLPs.
inline constexpr int kScalarFeatures = 17;
/// [v, sin(2 pi f_k v), cos(2 pi f_k v)] with f_k = 2^(k-3), k = 0..7.
std::vector<double> scalar_features(double v);

/// Builds the channel stack [x, I_c broadcast over frames, v_prev].
template <class T>
Tensor<T> inject_conditioning(const BasicVideo<T>& x_in, const Conditioning& cond,
                              const NetConfig& cfg);

struct ForwardTrace {
  int temporal_attention_calls = 0;
  int spatial_attention_calls = 0;
};

/// The raw network F: a small video UNet with per-frame residual blocks,
/// factorized temporal attention, optional bottleneck spatial attention and
/// FiLM conditioning from the (c_noise, lambda_c) embedding.
template <class T>
class UNet {
 public:
  explicit UNet(NetConfig cfg);

  const NetConfig& config() const { return cfg_; }
  std::size_t num_params() const { return num_params_; }
  std::vector<T> init_params(Rng& rng) const;

  /// Adds the network to `g`; returns the 1-channel output node.
  typename Graph<T>::Id build(Graph<T>& g, typename Graph<T>::Id x_stack, double c_noise,
                              double lambda_c, bool time_layers) const;

  /// Inference: F(x_in; c_noise, cond) for a single video.
  BasicVideo<T> forward(std::span<const T> params, const BasicVideo<T>& x_in,
                        double c_noise, const Conditioning& cond, bool time_layers = true,
                        ForwardTrace* trace = nullptr) const;

  /// Summed (c_noise, lambda_c) embedding before the activation.
  std::vector<T> embedding(std::span<const T> params, double c_noise, double lambda_c) const;

  /// Ordered layer names, for structural assertions.
  std::vector<std::string> layer_graph(bool time_layers = true) const;

 private:
  struct Conv {
    ParamRef w, b;
    kernels::ConvShape s;
  };
  struct Norm {
    ParamRef g, b;
    int groups;
  };
  struct Linear {
    ParamRef w, b;
    int in, out;
  };
  struct ResBlock {
    Norm n1;
    Conv c1;
    Linear emb;
    Norm n2;
    Conv c2;
    std::optional<Conv> skip;
  };
  struct Attn {
    Norm n;
    Conv qkv, out;
    ParamRef rel_bias;
    int channels, heads;
    kernels::AttnAxis axis;
  };
  struct Level {
    std::vector<ResBlock> down, up;
    Attn tattn_down, tattn_up;
  };
  enum class Init { Fan, Zero, One };
  struct InitOp {
    ParamRef ref;
    Init kind;
    int fan_in;
  };

  ParamRef alloc(std::size_t n, Init kind, int fan_in = 1);
  Conv make_conv(int cin, int cout, int k, bool zero = false);
  Norm make_norm(int c);
  Linear make_linear(int in, int out, bool zero = false);
  ResBlock make_res(int cin, int cout);
  Attn make_attn(int c, kernels::AttnAxis axis);

  using Id = typename Graph<T>::Id;
  Id run_res(Graph<T>& g, const ResBlock& r, Id x, Id emb) const;
  Id run_attn(Graph<T>& g, const Attn& a, Id x) const;
  Id embed(Graph<T>& g, double c_noise, double lambda_c) const;

  NetConfig cfg_;
  std::size_t num_params_ = 0;
  std::vector<InitOp> inits_;
  Linear noise_mlp1_, noise_mlp2_, lambda_mlp1_, lambda_mlp2_;
  Conv conv_in_;
  std::vector<Level> levels_;
  ResBlock mid1_, mid2_;
  Attn mid_sattn_, mid_tattn_;
  Norm out_norm_;
  Conv conv_out_;
};

extern template class UNet<float>;
extern template class UNet<double>;

/// Exponential moving average of the parameters. The shadow is never part of
/// a gradient computation.
struct EmaState {
  double decay = 0.999;
  std::vector<float> shadow;
};

/// shadow <- decay * shadow + (1 - decay) * params.
void ema_update(EmaState& ema, std::span<const float> params);

struct GradCheckOptions {
  int n_params = 200;
  double step = 1e-5;
  std::uint64_t seed = 1;
  /// Negative control: negate the analytic gradient before comparing.
  bool flip_sign = false;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  int checked = 0;
  double max_abs_grad = 0.0;
};

/// Probe for the gradient check: a clean video y, fixed noise n, a noise
/// level and conditioning. The loss is mean((D(y + n; sigma) - y)^2).
struct GradProbe {
  VideoD y;
  VideoD noise;
  double sigma = 0.5;
  Conditioning cond;
  DataStats stats;
  bool time_layers = true;
};

/// Denoising loss of the probe and its gradient w.r.t. all parameters.
double probe_loss_and_grad(const UNet<double>& net, std::span<const double> params,
                           const GradProbe& probe, std::vector<double>* grad);

/// Compares analytic parameter gradients of the denoising loss with central
/// finite differences on randomly chosen parameters.
GradCheckResult gradient_check(const UNet<double>& net, std::span<const double> params,
                               const GradProbe& probe, GradCheckOptions opts = {});

}  // namespace echoedm
