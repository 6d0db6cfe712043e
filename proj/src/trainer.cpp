// SPDX-License-Identifier: Apache-2.0
#include "echoedm/trainer.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <sstream>

#include "echoedm/resample.hpp"

namespace echoedm {

namespace {

std::atomic<std::int64_t> g_cond_corruptions{0};

}  // namespace

std::vector<std::string> TrainConfig::validate() const {
  if (!(learning_rate > 0.0 && std::isfinite(learning_rate)))
    throw ValidationError("train.learning_rate must be > 0");
  if (batch_size < 1) throw ValidationError("train.batch_size must be >= 1");
  if (grad_accum < 1) throw ValidationError("train.grad_accum must be >= 1");
  if (!(ema_decay > 0.0 && ema_decay < 1.0)) throw ValidationError("train.ema_decay must lie in (0, 1)");
  if (!(time_layer_drop_prob >= 0.0 && time_layer_drop_prob <= 1.0))
    throw ValidationError("train.time_layer_drop_prob must lie in [0, 1]");
  if (!(cond_noise_max >= 0.0)) throw ValidationError("train.cond_noise_max must be >= 0");
  if (max_steps < 1) throw ValidationError("train.max_steps must be >= 1");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0 && adam_eps > 0.0))
    throw ValidationError("train.adam parameters out of range");
  std::vector<std::string> warnings;
  if (learning_rate > 5e-4)
    warnings.push_back("learning rate " + std::to_string(learning_rate) +
                       " is above 5e-4; training may be unstable");
  return warnings;
}

TrainState TrainState::initialize(const UNet<float>& net, double sigma_q, std::uint64_t seed,
                                  double ema_decay) {
  TrainState s;
  s.net = net.config();
  s.sigma_q = sigma_q;
  s.seed = seed;
  Rng rng(seed);
  s.params = net.init_params(rng);
  s.ema.decay = ema_decay;
  s.ema.shadow = s.params;
  s.adam.m.assign(s.params.size(), 0.0f);
  s.adam.v.assign(s.params.size(), 0.0f);
  return s;
}

std::int64_t cond_corruption_count() { return g_cond_corruptions.load(); }

void corrupt_conditioning(Conditioning& cond, double max_std, Rng& rng) {
  if (!cond.v_prev) return;
  const double s = rng.uniform(0.0, max_std);
  for (float& v : cond.v_prev->data) v += static_cast<float>(s * rng.normal());
  ++g_cond_corruptions;
}

StepResult train_step(const UNet<float>& net, TrainState& state, const std::vector<TrainSample>& batch,
                      const TrainConfig& cfg, const TrainingSigmaDist& dist, const Rng& rng,
                      TrainCounters* counters, std::vector<float>* grad_out) {
  const int B = cfg.effective_batch();
  if (static_cast<int>(batch.size()) != B)
    throw ValidationError("train_step: batch has " + std::to_string(batch.size()) +
                          " elements, expected " + std::to_string(B));
  if (state.params.size() != net.num_params())
    throw ValidationError("train_step: parameter count does not match the network");
  const std::size_t P = state.params.size();
  const DataStats stats{state.sigma_q};
  const NetConfig& nc = net.config();

  std::vector<float> total(P, 0.0f), micro(P);
  double loss_sum = 0.0;
  for (int m = 0; m < cfg.grad_accum; ++m) {
    std::fill(micro.begin(), micro.end(), 0.0f);
    for (int j = 0; j < cfg.batch_size; ++j) {
      const int i = m * cfg.batch_size + j;
      const TrainSample& s = batch[i];
      Rng r = rng.fork(static_cast<std::uint64_t>(i));
      const double sigma = sample_training_sigma(r, dist);
      const Precond pc = precondition_coeffs(sigma, stats);
      const bool time_layers = !r.bernoulli(cfg.time_layer_drop_prob);
      Conditioning cond = s.cond;
      if (nc.mode != StageMode::Base) corrupt_conditioning(cond, cfg.cond_noise_max, r);

      Video noisy = s.video;
      for (float& v : noisy.data) v += static_cast<float>(sigma * r.normal());
      Video scaled = noisy;
      for (float& v : scaled.data) v = static_cast<float>(v * pc.c_in);

      Graph<float> g(state.params, micro);
      const auto x = g.input(inject_conditioning(scaled, cond, nc));
      const auto out = net.build(g, x, pc.c_noise, cond.lambda_c, time_layers);
      const Tensor<float>& F = g.value(out);
      const double n = static_cast<double>(F.size());
      double loss = 0.0;
      Tensor<float> dF(F.c, F.f, F.h, F.w);
      for (std::size_t k = 0; k < F.size(); ++k) {
        const double e = pc.c_skip * noisy.data[k] + pc.c_out * F.data[k] - s.video.data[k];
        loss += e * e;
        dF.data[k] = static_cast<float>(2.0 * e * pc.c_out / (n * B));
      }
      loss /= n;
      if (!std::isfinite(loss)) {
        std::ostringstream os;
        os << "non-finite loss at step " << state.step << ", element " << i << ", sigma " << sigma;
        throw NumericalError(os.str());
      }
      g.backward(out, dF);
      loss_sum += loss;
      if (counters) {
        ++counters->forwards;
        if (!time_layers) ++counters->forwards_without_time_layers;
        if (nc.mode != StageMode::Base) ++counters->cond_corruptions;
      }
    }
    for (std::size_t k = 0; k < P; ++k) total[k] += micro[k];
  }

  double gn = 0.0;
  for (float gk : total) gn += double(gk) * gk;
  if (!std::isfinite(gn))
    throw NumericalError("non-finite gradient at step " + std::to_string(state.step));

  // Adam with bias correction
  const double t = static_cast<double>(state.step + 1);
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, t), c2 = 1.0 - std::pow(b2, t);
  const float lr_t = static_cast<float>(cfg.learning_rate * std::sqrt(c2) / c1);
  const float eps_t = static_cast<float>(cfg.adam_eps * std::sqrt(c2));
  for (std::size_t k = 0; k < P; ++k) {
    const float gk = total[k];
    float& m = state.adam.m[k];
    float& v = state.adam.v[k];
    m = static_cast<float>(b1 * m + (1.0 - b1) * gk);
    v = static_cast<float>(b2 * v + (1.0 - b2) * double(gk) * gk);
    state.params[k] -= lr_t * m / (std::sqrt(v) + eps_t);
  }
  ema_update(state.ema, state.params);
  ++state.step;
  if (grad_out) *grad_out = std::move(total);
  return {loss_sum / B, std::sqrt(gn)};
}

// ---------------------------------------------------------------------------

Video degrade_to_prev(const Video& window, const StageSpec& spec) {
  Video t = resample_time(window, spec.fps, spec.prev_fps);
  if (t.frames != spec.prev_frames) t = resample_frames(t, spec.prev_frames);
  Video s = (t.height % spec.prev_height == 0 && t.width % spec.prev_width == 0)
                ? downscale_area(t, spec.prev_height, spec.prev_width)
                : resize_bilinear(t, spec.prev_height, spec.prev_width);
  return rescale_video(s, spec.frames, spec.height, spec.width);
}

StageData::StageData(const Dataset& ds, const std::string& split, StageSpec spec, int max_videos)
    : spec_(spec) {
  if (spec.frames < 1 || spec.height < 1 || spec.width < 1 || !(spec.fps > 0.0))
    throw ValidationError("stage geometry must be positive");
  if (spec.has_prev() && (spec.prev_frames < 1 || spec.prev_height < 1 || spec.prev_width < 1 ||
                          !(spec.prev_fps > 0.0)))
    throw ValidationError("super-resolution stage needs the previous stage geometry");
  const auto& m = ds.manifest();
  if (m.height % spec.height || m.width % spec.width)
    throw ValidationError("dataset resolution " + std::to_string(m.height) + "x" + std::to_string(m.width) +
                          " is not an integer multiple of the stage resolution " +
                          std::to_string(spec.height) + "x" + std::to_string(spec.width));
  std::vector<std::size_t> idx;
  if (split.empty())
    for (std::size_t i = 0; i < ds.size(); ++i) idx.push_back(i);
  else
    idx = m.split_indices(split);
  if (max_videos > 0 && idx.size() > static_cast<std::size_t>(max_videos)) idx.resize(max_videos);
  if (idx.empty()) throw ValidationError("no videos in split '" + split + "'");

  clips_.resize(idx.size());
  efs_.resize(idx.size());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const VideoSample s = ds.load(idx[k]);
    Video v = resample_time(s.video, s.fps, spec.fps);
    v = downscale_area(v, spec.height, spec.width);
    if (v.frames < spec.frames) v = pad_or_truncate({v, s.ef_true, spec.fps, {}, {}}, spec.frames).video;
    clips_[k] = to_model_range(v);
    efs_[k] = s.ef_true;
  }
}

TrainSample StageData::make(std::size_t video, int window_start, int ref_index) const {
  const Video& clip = clips_.at(video);
  if (window_start < 0 || window_start + spec_.frames > clip.frames)
    throw ValidationError("window outside the clip");
  TrainSample s;
  s.video = Video(spec_.frames, spec_.height, spec_.width);
  const std::size_t fs = clip.frame_size();
  std::copy_n(clip.data.begin() + window_start * fs, spec_.frames * fs, s.video.data.begin());
  s.cond.ref_frame = extract_frame(clip, ref_index);
  s.cond.lambda_c = efs_[video];
  if (spec_.has_prev()) s.cond.v_prev = degrade_to_prev(s.video, spec_);
  return s;
}

TrainSample StageData::draw(Rng& rng) const {
  const std::size_t v = rng.uniform_index(clips_.size());
  const Video& clip = clips_[v];
  const int start = static_cast<int>(rng.uniform_index(clip.frames - spec_.frames + 1));
  const CondPick pick = pick_cond_frame(clip, start, spec_.frames, rng);
  return make(v, start, pick.index);
}

// ---------------------------------------------------------------------------

std::string format_log_line(const TrainLogLine& l) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "step=%lld loss=%.6e ema_loss=%.6e wall=%.3f",
                static_cast<long long>(l.step), l.loss, l.ema_loss, l.wall_s);
  return buf;
}

TrainLogLine parse_log_line(const std::string& line) {
  TrainLogLine l{};
  long long step = 0;
  if (std::sscanf(line.c_str(), "step=%lld loss=%lf ema_loss=%lf wall=%lf", &step, &l.loss, &l.ema_loss,
                  &l.wall_s) != 4)
    throw ValidationError("not a training log line: " + line);
  l.step = step;
  return l;
}

void train(const UNet<float>& net, TrainState& state, const StageData& data, const TrainConfig& cfg,
           const TrainingSigmaDist& dist, const TrainRunOptions& opts, TrainCounters* counters) {
  cfg.validate();
  if (!(state.net == net.config())) throw ValidationError("train: state was built for a different network");
  const auto& sp = data.spec();
  const NetConfig& nc = net.config();
  if (sp.mode != nc.mode || sp.frames != nc.in_frames || sp.height != nc.in_height || sp.width != nc.in_width)
    throw ValidationError("train: stage data geometry does not match the network config");

  const Rng master(cfg.seed);
  const auto t0 = std::chrono::steady_clock::now();
  double smoothed = std::nan("");
  while (state.step < cfg.max_steps) {
    Rng step_rng = master.fork(static_cast<std::uint64_t>(state.step));
    Rng draw = step_rng.fork(0);
    std::vector<TrainSample> batch;
    batch.reserve(cfg.effective_batch());
    for (int i = 0; i < cfg.effective_batch(); ++i) batch.push_back(data.draw(draw));
    const StepResult r = train_step(net, state, batch, cfg, dist, step_rng.fork(1), counters);
    smoothed = std::isnan(smoothed) ? r.loss
                                    : opts.loss_smoothing * smoothed + (1.0 - opts.loss_smoothing) * r.loss;
    if (opts.log) {
      const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      *opts.log << format_log_line({state.step, r.loss, smoothed, wall}) << '\n' << std::flush;
    }
    const bool last = state.step == cfg.max_steps;
    if (!opts.checkpoint.empty() &&
        (last || (opts.checkpoint_every > 0 && state.step % opts.checkpoint_every == 0)))
      save_checkpoint(opts.checkpoint, state);
  }
}

}  // namespace echoedm
