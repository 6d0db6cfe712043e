// SPDX-License-Identifier: Apache-2.0
#include "echoedm/cascade.hpp"

#include "echoedm/config.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "echoedm/resample.hpp"
#include "json.hpp"

namespace echoedm {

using nlohmann::json;

namespace {

StageConfig stage(StageMode mode, int hw, int frames, double fps, int steps, double churn, int dims,
                  bool bottleneck = true) {
  StageConfig s;
  s.mode = mode;
  s.out_height = s.out_width = hw;
  s.out_frames = frames;
  s.fps = fps;
  s.sampling_steps = steps;
  s.s_churn = churn;
  s.net.base_dims = dims;
  s.net.layers_per_level = {2, 2, 2};
  s.net.bottleneck_attention = bottleneck;
  return s;
}

std::string stage_name(const CascadeConfig& c, int s) {
  return "stage " + std::to_string(s) + " (" + to_string(c.stages[s].mode) + ")";
}

}  // namespace

void CascadeConfig::normalize() {
  for (auto& s : stages) {
    s.net.mode = s.mode;
    s.net.in_frames = s.out_frames;
    s.net.in_height = s.out_height;
    s.net.in_width = s.out_width;
  }
}

void CascadeConfig::validate() const {
  if (stages.empty()) throw ValidationError("cascade '" + name + "' has no stages");
  sampler.validate();
  if (!(sigma_min > 0.0 && sigma_max > sigma_min && rho > 0.0))
    throw ValidationError("cascade sigma range must satisfy 0 < sigma_min < sigma_max and rho > 0");
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const StageConfig& s = stages[i];
    const std::string who = stage_name(*this, static_cast<int>(i));
    if (s.out_height < 1 || s.out_width < 1 || s.out_frames < 1 || !(s.fps > 0.0))
      throw ValidationError(who + ": output geometry must be positive");
    if (s.sampling_steps < 1) throw ValidationError(who + ": sampling_steps must be >= 1");
    if (!(s.s_churn >= 0.0)) throw ValidationError(who + ": s_churn must be >= 0");
    if (s.net.mode != s.mode || s.net.in_frames != s.out_frames || s.net.in_height != s.out_height ||
        s.net.in_width != s.out_width)
      throw ValidationError(who + ": network dims do not match the stage output");
    try {
      s.net.validate();
    } catch (const ValidationError& e) {
      throw ValidationError(who + ": " + e.what());
    }
    if (i == 0) {
      if (s.mode != StageMode::Base) throw ValidationError("the first stage must be Base");
      continue;
    }
    const StageConfig& p = stages[i - 1];
    const bool more_frames = s.out_frames > p.out_frames, same_frames = s.out_frames == p.out_frames;
    const bool larger = s.out_height >= p.out_height && s.out_width >= p.out_width &&
                        (s.out_height > p.out_height || s.out_width > p.out_width);
    const bool same_res = s.out_height == p.out_height && s.out_width == p.out_width;
    switch (s.mode) {
      case StageMode::Base:
        throw ValidationError(who + ": only the first stage may be Base");
      case StageMode::TSR:
        if (!(more_frames && same_res)) throw ValidationError(who + ": TSR must add frames at the same resolution");
        break;
      case StageMode::SSR:
        if (!(larger && same_frames)) throw ValidationError(who + ": SSR must raise the resolution only");
        break;
      case StageMode::TSSR:
        if (!(larger && more_frames)) throw ValidationError(who + ": TSSR must raise frames and resolution");
        break;
    }
  }
}

std::vector<std::string> CascadeConfig::warnings() const {
  std::vector<std::string> w;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const double d = stages[i].out_frames / stages[i].fps;
    if (std::abs(d - 2.0) > 1e-9) {
      std::ostringstream os;
      os << stage_name(*this, static_cast<int>(i)) << " lasts " << d << " s instead of 2 s";
      w.push_back(os.str());
    }
  }
  return w;
}

int CascadeConfig::expected_evaluations() const {
  int n = 0;
  for (const auto& s : stages) n += 2 * s.sampling_steps - 1;
  return n;
}

CascadeConfig preset(const std::string& name) {
  CascadeConfig c;
  c.name = name;
  using M = StageMode;
  if (name == "1SCM") {
    c.stages = {stage(M::Base, 112, 16, 8, 64, 160, 64, false)};
  } else if (name == "2SCM") {
    c.stages = {stage(M::Base, 56, 16, 8, 32, 80, 64), stage(M::TSSR, 112, 64, 32, 64, 160, 64)};
  } else if (name == "4SCM") {
    c.stages = {stage(M::Base, 56, 16, 8, 32, 40, 64), stage(M::TSR, 56, 32, 16, 32, 80, 64),
                stage(M::TSR, 56, 64, 32, 32, 160, 64), stage(M::SSR, 112, 64, 32, 64, 160, 64, false)};
  } else if (name == "toy1") {
    c.stages = {stage(M::Base, 32, 16, 8, 32, 80, 16, false)};
  } else if (name == "toy2") {
    c.stages = {stage(M::Base, 16, 8, 4, 32, 80, 16), stage(M::TSSR, 32, 16, 8, 16, 40, 8)};
  } else {
    throw ValidationError("unknown cascade preset '" + name + "' (1SCM|2SCM|4SCM|toy1|toy2)");
  }
  c.normalize();
  c.validate();
  return c;
}

std::vector<std::string> preset_names() { return {"1SCM", "2SCM", "4SCM", "toy1", "toy2"}; }

std::string cascade_to_json(const CascadeConfig& c) {
  json j;
  j["name"] = c.name;
  j["sampler"] = {{"s_noise", c.sampler.s_noise}, {"s_tmin", c.sampler.s_tmin}, {"s_tmax", c.sampler.s_tmax},
                  {"sigma_min", c.sigma_min},     {"sigma_max", c.sigma_max},   {"rho", c.rho}};
  j["stages"] = json::array();
  for (const auto& s : c.stages)
    j["stages"].push_back({{"mode", to_string(s.mode)},
                           {"height", s.out_height},
                           {"width", s.out_width},
                           {"frames", s.out_frames},
                           {"fps", s.fps},
                           {"steps", s.sampling_steps},
                           {"s_churn", s.s_churn},
                           {"net",
                            {{"dims", s.net.base_dims},
                             {"layers", s.net.layers_per_level},
                             {"bottleneck_attention", s.net.bottleneck_attention},
                             {"mem_opti", s.net.mem_opti}}}});
  return j.dump(2);
}

CascadeConfig cascade_from_json(const std::string& text) {
  CascadeConfig c;
  try {
    const json j = json::parse(text);
    c.name = j.value("name", std::string("custom"));
    if (j.contains("sampler")) {
      const json& k = j["sampler"];
      c.sampler.s_noise = k.value("s_noise", c.sampler.s_noise);
      c.sampler.s_tmin = k.value("s_tmin", c.sampler.s_tmin);
      c.sampler.s_tmax = k.value("s_tmax", c.sampler.s_tmax);
      c.sigma_min = k.value("sigma_min", c.sigma_min);
      c.sigma_max = k.value("sigma_max", c.sigma_max);
      c.rho = k.value("rho", c.rho);
    }
    for (const json& s : j.at("stages")) {
      StageConfig st;
      st.mode = stage_mode_from_string(s.at("mode"));
      st.out_height = s.at("height");
      st.out_width = s.at("width");
      st.out_frames = s.at("frames");
      st.fps = s.at("fps");
      st.sampling_steps = s.at("steps");
      st.s_churn = s.value("s_churn", 0.0);
      if (s.contains("net")) {
        const json& n = s["net"];
        st.net.base_dims = n.value("dims", st.net.base_dims);
        if (n.contains("layers")) st.net.layers_per_level = n["layers"].get<std::vector<int>>();
        st.net.bottleneck_attention = n.value("bottleneck_attention", true);
        st.net.mem_opti = n.value("mem_opti", false);
      }
      c.stages.push_back(st);
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed cascade config: ") + e.what());
  }
  c.normalize();
  c.validate();
  return c;
}

CascadeConfig load_cascade(const std::string& name_or_path) {
  for (const auto& n : preset_names())
    if (n == name_or_path) return preset(n);
  std::filesystem::path path;
  try {
    path = resolve_config_path(name_or_path);
  } catch (const IoError&) {
    throw IoError("cannot open cascade config '" + name_or_path + "' (not a preset name either)");
  }
  return cascade_from_json(read_text_file(path));
}

StageSpec stage_spec(const CascadeConfig& c, int s) {
  if (s < 0 || s >= static_cast<int>(c.stages.size()))
    throw ValidationError("stage index " + std::to_string(s) + " out of range");
  const StageConfig& st = c.stages[s];
  StageSpec spec;
  spec.mode = st.mode;
  spec.frames = st.out_frames;
  spec.height = st.out_height;
  spec.width = st.out_width;
  spec.fps = st.fps;
  if (s > 0) {
    const StageConfig& p = c.stages[s - 1];
    spec.prev_frames = p.out_frames;
    spec.prev_height = p.out_height;
    spec.prev_width = p.out_width;
    spec.prev_fps = p.fps;
  }
  return spec;
}

Video rescale_to_stage(const Video& v, const StageConfig& stage) {
  const bool frame = v.frames == 1;
  if (v.height > stage.out_height || v.width > stage.out_width || (!frame && v.frames > stage.out_frames))
    throw ValidationError("rescale_to_stage: " + v.shape().str() + " would be downscaled to " +
                          stage.shape().str());
  return rescale_video(v, frame ? 1 : stage.out_frames, stage.out_height, stage.out_width);
}

Video ref_frame_for_stage(const Video& frame, const StageConfig& stage) {
  if (frame.frames != 1) throw ValidationError("reference must be a single frame");
  if (frame.height == stage.out_height && frame.width == stage.out_width) return frame;
  if (frame.height >= stage.out_height && frame.width >= stage.out_width &&
      frame.height % stage.out_height == 0 && frame.width % stage.out_width == 0)
    return downscale_area(frame, stage.out_height, stage.out_width);
  return resize_bilinear(frame, stage.out_height, stage.out_width);
}

Denoiser make_denoiser(const UNet<float>& net, std::span<const float> params, double sigma_q,
                       Conditioning cond, int* calls) {
  const DataStats stats{sigma_q};
  return [&net, params, stats, cond = std::move(cond), calls](const VideoD& x, double sigma) {
    if (calls) ++*calls;
    const Precond pc = precondition_coeffs(sigma, stats);
    Video in(x.frames, x.height, x.width);
    for (std::size_t i = 0; i < x.size(); ++i) in.data[i] = static_cast<float>(pc.c_in * x.data[i]);
    const Video F = net.forward(params, in, pc.c_noise, cond, true);
    VideoD d(x.frames, x.height, x.width);
    for (std::size_t i = 0; i < x.size(); ++i) d.data[i] = pc.c_skip * x.data[i] + pc.c_out * F.data[i];
    return d;
  };
}

int CascadeTrace::total() const {
  int n = 0;
  for (int e : evaluations) n += e;
  return n;
}

Video run_cascade_with(const CascadeConfig& cc, const StageDenoiserFactory& factory, const Video& ref_frame,
                       double lambda_c, Rng& rng, CascadeTrace* trace) {
  cc.validate();
  if (!(lambda_c >= 0.0 && lambda_c <= 1.0)) throw ValidationError("lambda_c must lie in [0, 1]");
  if (ref_frame.frames != 1) throw ValidationError("reference must be a single frame");
  if (trace) *trace = {};
  // one draw from the caller's generator seeds all stage streams
  const Rng base(rng.next_u64());
  Video prev;
  for (std::size_t s = 0; s < cc.stages.size(); ++s) {
    const StageConfig& st = cc.stages[s];
    Conditioning cond;
    cond.ref_frame = ref_frame_for_stage(ref_frame, st);
    cond.lambda_c = lambda_c;
    if (s > 0) cond.v_prev = rescale_to_stage(prev, st);

    int calls = 0;
    const Denoiser inner = factory(static_cast<int>(s), cond);
    const Denoiser counted = [&](const VideoD& x, double sigma) {
      ++calls;
      return inner(x, sigma);
    };
    SamplerConstants k = cc.sampler;
    k.s_churn = st.s_churn;
    const SigmaSchedule sched = build_schedule(st.sampling_steps, cc.sigma_min, cc.sigma_max, cc.rho);
    Rng stage_rng = base.fork(static_cast<std::uint64_t>(s));
    const VideoD out = sample(counted, st.shape(), sched, k, stage_rng, {true});
    if (!out.all_finite())
      throw NumericalError("non-finite sample in stage " + std::to_string(s) + " (" + to_string(st.mode) + ")");
    prev = video_cast<float>(out);
    if (trace) {
      trace->evaluations.push_back(calls);
      trace->stage_outputs.push_back(prev);
    }
  }
  return prev;
}

CascadeModels CascadeModels::load(const CascadeConfig& cc, const std::vector<std::filesystem::path>& checkpoints) {
  if (checkpoints.size() != cc.stages.size())
    throw ValidationError("cascade '" + cc.name + "' has " + std::to_string(cc.stages.size()) + " stages but " +
                          std::to_string(checkpoints.size()) + " checkpoints were given");
  std::vector<TrainState> states;
  for (std::size_t s = 0; s < checkpoints.size(); ++s) {
    const std::string who = stage_name(cc, static_cast<int>(s));
    if (!std::filesystem::exists(checkpoints[s]))
      throw IoError(who + ": missing checkpoint " + checkpoints[s].string());
    try {
      states.push_back(load_checkpoint(checkpoints[s], cc.stages[s].net));
    } catch (const ValidationError& e) {
      throw ValidationError(who + ": " + e.what());
    } catch (const IoError& e) {
      throw IoError(who + ": " + e.what());
    }
  }
  return from_states(cc, states);
}

CascadeModels CascadeModels::from_states(const CascadeConfig& cc, const std::vector<TrainState>& states) {
  if (states.size() != cc.stages.size()) throw ValidationError("one training state per stage required");
  CascadeModels m;
  for (std::size_t s = 0; s < states.size(); ++s) {
    if (!(states[s].net == cc.stages[s].net))
      throw ValidationError(stage_name(cc, static_cast<int>(s)) + ": network config mismatch");
    m.nets_.emplace_back(cc.stages[s].net);
    m.params_.push_back(states[s].ema.shadow);
    m.sigma_q_.push_back(states[s].sigma_q);
  }
  return m;
}

StageDenoiserFactory CascadeModels::factory(int* calls) const {
  return [this, calls](int s, const Conditioning& cond) {
    return make_denoiser(nets_.at(s), params_.at(s), sigma_q_.at(s), cond, calls);
  };
}

Video run_cascade(const CascadeConfig& cc, const CascadeModels& models, const Video& ref_frame,
                  double lambda_c, Rng& rng, CascadeTrace* trace) {
  if (models.size() != cc.stages.size()) throw ValidationError("one model per stage required");
  return run_cascade_with(cc, models.factory(), ref_frame, lambda_c, rng, trace);
}

}  // namespace echoedm
