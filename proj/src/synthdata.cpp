// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <numbers>

#include "echoedm/resample.hpp"
#include "echoedm/synthdata.hpp"

namespace echoedm {

namespace {

constexpr double kPi = std::numbers::pi;

struct Cone {
  double apex_x, radius, half;

  Cone(int height, int width, double angle) : apex_x(0.5 * width), radius(height), half(0.5 * angle) {}

  bool contains(double px, double py) const {
    const double dx = px - apex_x, dy = py;
    if (dx * dx + dy * dy > radius * radius) return false;
    return std::abs(std::atan2(dx, dy)) <= half;
  }
};

struct Ellipse {
  double cx, cy, a, b, cos_t, sin_t;

  double radius2(double px, double py) const {
    const double dx = px - cx, dy = py - cy;
    const double u = (dx * cos_t + dy * sin_t) / a;
    const double v = (-dx * sin_t + dy * cos_t) / b;
    return u * u + v * v;
  }

  /// Area fraction of the pixel [x, x+1) x [y, y+1) inside the ellipse.
  double coverage(int x, int y) const {
    const double r = std::sqrt(radius2(x + 0.5, y + 0.5));
    // points this far from the boundary, in pixels, cannot straddle it
    if ((r - 1.0) * std::min(a, b) > 1.5) return 0.0;
    if ((1.0 - r) * std::min(a, b) > 1.5) return 1.0;
    constexpr int n = 8;
    int inside = 0;
    for (int sy = 0; sy < n; ++sy)
      for (int sx = 0; sx < n; ++sx)
        inside += radius2(x + (sx + 0.5) / n, y + (sy + 0.5) / n) <= 1.0;
    return inside / double(n * n);
  }
};

Ellipse ellipse_at(const SynthParams& p, double area) {
  const double s = std::sqrt(std::max(0.0, area) / p.ed_area());
  return {p.center_x * p.width, p.center_y * p.height, p.axis_a * p.width * s,
          p.axis_b * p.height * s, std::cos(p.angle), std::sin(p.angle)};
}

/// Unit-mean speckle amplitude for every frame: a complex Gaussian field,
/// partially redrawn per frame, whose modulus is Rayleigh distributed.
std::vector<std::vector<float>> speckle_fields(const SynthParams& p, int frames) {
  const int H = p.height, W = p.width;
  const std::size_t n = static_cast<std::size_t>(H) * W;
  Rng rng(p.speckle_seed);
  std::vector<double> re0(n), im0(n);
  for (std::size_t i = 0; i < n; ++i) {
    re0[i] = rng.normal();
    im0[i] = rng.normal();
  }
  const double keep = std::sqrt(1.0 - p.speckle.decorrelation);
  const double fresh = std::sqrt(p.speckle.decorrelation);
  const double mean_rayleigh = std::sqrt(kPi / 2.0);
  std::vector<std::vector<float>> out(frames, std::vector<float>(n));
  std::vector<double> amp(n);
  for (int f = 0; f < frames; ++f) {
    for (std::size_t i = 0; i < n; ++i) {
      const double re = keep * re0[i] + fresh * rng.normal();
      const double im = keep * im0[i] + fresh * rng.normal();
      amp[i] = std::sqrt(re * re + im * im);
    }
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double v;
        if (p.speckle.smooth) {
          double acc = 0, wsum = 0;
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              const int yy = y + dy, xx = x + dx;
              if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
              const double w = (2 - std::abs(dy)) * (2 - std::abs(dx));
              acc += w * amp[yy * W + xx];
              wsum += w;
            }
          v = acc / wsum;
        } else {
          v = amp[y * W + x];
        }
        out[f][y * W + x] = static_cast<float>(v / mean_rayleigh);
      }
  }
  return out;
}

}  // namespace

int SynthParams::frames() const {
  return std::max(1, static_cast<int>(std::lround(duration_s * fps)));
}

double SynthParams::ed_area() const {
  return kPi * axis_a * width * axis_b * height;
}

void SynthParams::validate() const {
  if (!(ef >= 0.0 && ef < 1.0)) throw ValidationError("synth: ef must lie in [0, 1)");
  if (!(heart_rate_bpm >= 40.0 && heart_rate_bpm <= 180.0))
    throw ValidationError("synth: heart_rate_bpm must lie in [40, 180]");
  if (height < 4 || width < 4) throw ValidationError("synth: image too small");
  if (!(fps > 0.0)) throw ValidationError("synth: fps must be > 0");
  if (!(duration_s * heart_rate_bpm / 60.0 >= 1.0 - 1e-9))
    throw ValidationError("synth: duration must cover one cardiac cycle");
  if (!(axis_a > 0.0 && axis_b > 0.0)) throw ValidationError("synth: axes must be positive");
  if (!(cone_angle > 0.0 && cone_angle < kPi)) throw ValidationError("synth: cone angle out of range");
  if (!(tissue > blood && blood >= 0.0 && tissue <= 1.0))
    throw ValidationError("synth: need 0 <= blood < tissue <= 1");
  if (speckle.strength < 0.0 || speckle.strength > 1.0 || speckle.decorrelation < 0.0 ||
      speckle.decorrelation > 1.0)
    throw ValidationError("synth: speckle strength and decorrelation must lie in [0, 1]");
  // the end-diastolic outline plus a one-pixel margin must sit inside the sector
  const Cone cone(height, width, cone_angle);
  const Ellipse e = ellipse_at(*this, ed_area());
  for (int k = 0; k < 256; ++k) {
    const double t = 2.0 * kPi * k / 256;
    const double ux = (e.a + 1.0) * std::cos(t), uy = (e.b + 1.0) * std::sin(t);
    const double px = e.cx + ux * e.cos_t - uy * e.sin_t;
    const double py = e.cy + ux * e.sin_t + uy * e.cos_t;
    if (!cone.contains(px, py) || px < 0 || py < 0 || px > width || py > height)
      throw ValidationError("synth: ventricle ellipse leaves the imaging sector");
  }
}

std::vector<double> area_curve(const SynthParams& p, const std::vector<double>& times) {
  const double a_ed = p.ed_area();
  const double a_es = (1.0 - p.ef) * a_ed;
  const double w = 2.0 * kPi * p.heart_rate_bpm / 60.0;
  std::vector<double> out;
  out.reserve(times.size());
  for (double t : times) out.push_back(a_ed - (a_ed - a_es) * 0.5 * (1.0 - std::cos(w * t + p.phase)));
  return out;
}

double ef_from_areas(const std::vector<double>& areas) {
  if (areas.empty()) return 0.0;
  const auto [mn, mx] = std::minmax_element(areas.begin(), areas.end());
  if (!(*mx > 0.0)) return 0.0;
  return (*mx - *mn) / *mx;
}

std::vector<std::uint8_t> cone_mask(int height, int width, double cone_angle) {
  const Cone cone(height, width, cone_angle);
  std::vector<std::uint8_t> m(static_cast<std::size_t>(height) * width);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) m[y * width + x] = cone.contains(x + 0.5, y + 0.5);
  return m;
}

VideoSample synth_video(const SynthParams& p) {
  p.validate();
  const int F = p.frames();
  std::vector<double> times(F);
  for (int f = 0; f < F; ++f) times[f] = f / p.fps;

  VideoSample s;
  s.fps = p.fps;
  s.ef_true = p.ef;
  s.params = p;
  s.area_curve = area_curve(p, times);
  s.video = Video(F, p.height, p.width);
  const auto mask = cone_mask(p.height, p.width, p.cone_angle);
  std::vector<std::vector<float>> speckle;
  if (p.speckle.enabled) speckle = speckle_fields(p, F);
  const double k = p.speckle.strength;

  for (int f = 0; f < F; ++f) {
    const Ellipse e = ellipse_at(p, s.area_curve[f]);
    for (int y = 0; y < p.height; ++y)
      for (int x = 0; x < p.width; ++x) {
        const std::size_t i = static_cast<std::size_t>(y) * p.width + x;
        if (!mask[i]) continue;
        const double c = e.coverage(x, y);
        double v = p.tissue * (1.0 - c) + p.blood * c;
        if (p.speckle.enabled) v *= (1.0 - k) + k * speckle[f][i];
        s.video.at(f, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
  }
  return s;
}

VideoSample resample_fps(const VideoSample& v, double target_fps) {
  VideoSample out;
  out.ef_true = v.ef_true;
  out.fps = target_fps;
  out.params = v.params;
  out.video = resample_time(v.video, v.fps, target_fps);
  if (v.params) {
    std::vector<double> times(out.video.frames);
    for (int k = 0; k < out.video.frames; ++k) times[k] = k / target_fps;
    out.area_curve = area_curve(*v.params, times);
  } else if (!v.area_curve.empty()) {
    // areas interpolated like the pixels
    Video a(static_cast<int>(v.area_curve.size()), 1, 1);
    for (std::size_t i = 0; i < v.area_curve.size(); ++i) a.data[i] = static_cast<float>(v.area_curve[i]);
    const Video r = resample_time(a, v.fps, target_fps);
    out.area_curve.assign(r.data.begin(), r.data.end());
  }
  return out;
}

VideoSample pad_or_truncate(const VideoSample& v, int n_frames) {
  if (n_frames < 1) throw ValidationError("pad_or_truncate: n_frames must be >= 1");
  if (v.video.frames < 1) throw ValidationError("pad_or_truncate: empty video");
  VideoSample out = v;
  const int F = v.video.frames;
  const std::size_t fs = v.video.frame_size();
  out.video = Video(n_frames, v.video.height, v.video.width);
  for (int f = 0; f < n_frames; ++f) {
    const int src = std::min(f, F - 1);
    std::copy_n(v.video.data.begin() + src * fs, fs, out.video.data.begin() + f * fs);
  }
  if (!v.area_curve.empty()) {
    out.area_curve.resize(n_frames);
    for (int f = 0; f < n_frames; ++f)
      out.area_curve[f] = v.area_curve[std::min<std::size_t>(f, v.area_curve.size() - 1)];
  }
  return out;
}

CondPick pick_cond_frame(const Video& full, int window_start, int window_frames, Rng& rng) {
  if (full.frames < 1) throw ValidationError("pick_cond_frame: empty video");
  CondPick c;
  c.index = static_cast<int>(rng.uniform_index(full.frames));
  c.inside_window = c.index >= window_start && c.index < window_start + window_frames;
  c.frame = extract_frame(full, c.index);
  return c;
}

void DataGenConfig::validate() const {
  if (height < 4 || width < 4) throw ValidationError("data.height/width must be >= 4");
  if (!(fps > 0.0)) throw ValidationError("data.fps must be > 0");
  if (!(duration_s > 0.0)) throw ValidationError("data.duration_s must be > 0");
  if (n_train < 0 || n_val < 0 || n_test < 0) throw ValidationError("data split sizes must be >= 0");
  if (!(ef_min >= 0.05 && ef_max <= 0.90 && ef_min <= ef_max))
    throw ValidationError("data.ef_range must satisfy 0.05 <= min <= max <= 0.90");
  if (!(hr_min >= 40.0 && hr_max <= 180.0 && hr_min <= hr_max))
    throw ValidationError("data.heart_rate_range must lie in [40, 180]");
  if (!(duration_s * hr_min / 60.0 >= 1.0))
    throw ValidationError("data.duration_s must cover one cardiac cycle at the lowest heart rate");
  if (!(cone_angle_deg > 10.0 && cone_angle_deg < 170.0))
    throw ValidationError("data.cone_angle_deg must lie in (10, 170)");
  if (!(skew_weight >= 0.0 && skew_weight <= 1.0 && skew_std > 0.0))
    throw ValidationError("data.skew parameters out of range");
}

std::string to_string(EfDistribution d) { return d == EfDistribution::Uniform ? "uniform" : "skewed"; }

EfDistribution ef_distribution_from_string(const std::string& s) {
  if (s == "uniform") return EfDistribution::Uniform;
  if (s == "skewed") return EfDistribution::Skewed;
  throw ValidationError("unknown ef_distribution '" + s + "' (uniform|skewed)");
}

namespace {

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

}  // namespace

double sample_ef(const DataGenConfig& cfg, Rng& rng) {
  if (cfg.ef_min == cfg.ef_max) return cfg.ef_min;
  if (cfg.ef_distribution == EfDistribution::Skewed && rng.uniform() < cfg.skew_weight) {
    // normal truncated to the range, by rejection
    for (;;) {
      const double e = rng.normal(cfg.skew_mean, cfg.skew_std);
      if (e >= cfg.ef_min && e <= cfg.ef_max) return e;
    }
  }
  return rng.uniform(cfg.ef_min, cfg.ef_max);
}

double ef_cdf(const DataGenConfig& cfg, double x) {
  if (x < cfg.ef_min) return 0.0;
  if (x >= cfg.ef_max) return 1.0;
  const double uni = (x - cfg.ef_min) / (cfg.ef_max - cfg.ef_min);
  if (cfg.ef_distribution == EfDistribution::Uniform) return uni;
  const double lo = normal_cdf((cfg.ef_min - cfg.skew_mean) / cfg.skew_std);
  const double hi = normal_cdf((cfg.ef_max - cfg.skew_mean) / cfg.skew_std);
  const double tn = (normal_cdf((x - cfg.skew_mean) / cfg.skew_std) - lo) / (hi - lo);
  return cfg.skew_weight * tn + (1.0 - cfg.skew_weight) * uni;
}

SynthParams random_params(const DataGenConfig& cfg, Rng& rng) {
  SynthParams p;
  p.height = cfg.height;
  p.width = cfg.width;
  p.fps = cfg.fps;
  p.duration_s = cfg.duration_s;
  p.cone_angle = cfg.cone_angle_deg * kPi / 180.0;
  p.speckle = cfg.speckle;
  p.ef = sample_ef(cfg, rng);
  p.heart_rate_bpm = rng.uniform(cfg.hr_min, cfg.hr_max);
  p.phase = rng.uniform(0.0, 2.0 * kPi);
  p.tissue = rng.uniform(0.5, 0.8);
  p.blood = rng.uniform(0.03, 0.10);
  p.speckle_seed = rng.next_u64();
  // geometry is redrawn until the ventricle fits the sector
  for (int attempt = 0;; ++attempt) {
    p.center_x = rng.uniform(0.42, 0.58);
    p.center_y = rng.uniform(0.50, 0.62);
    p.axis_a = rng.uniform(0.13, 0.19);
    p.axis_b = rng.uniform(0.18, 0.25);
    p.angle = rng.uniform(-0.3, 0.3);
    try {
      p.validate();
      return p;
    } catch (const ValidationError&) {
      if (attempt > 1000) throw;
    }
  }
}

}  // namespace echoedm
