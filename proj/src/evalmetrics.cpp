// SPDX-License-Identifier: Apache-2.0
#include "echoedm/evalmetrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <sstream>

#include "echoedm/error.hpp"
#include "echoedm/graph.hpp"
#include "echoedm/resample.hpp"
#include "json.hpp"
#include "parallel_util.hpp"

namespace echoedm {

using nlohmann::json;

// ---------------------------------------------------------------------------
// EF estimation

double otsu_threshold(std::span<const float> values) {
  if (values.empty()) throw ValidationError("otsu_threshold: no values");
  constexpr int kBins = 256;
  std::vector<double> hist(kBins, 0.0);
  for (float v : values) {
    const int b = std::clamp(static_cast<int>(v * kBins), 0, kBins - 1);
    hist[b] += 1.0;
  }
  const double total = static_cast<double>(values.size());
  double sum_all = 0.0;
  for (int b = 0; b < kBins; ++b) sum_all += (b + 0.5) * hist[b];
  std::vector<double> between(kBins - 1, -1.0);
  double w0 = 0.0, sum0 = 0.0, best = -1.0;
  for (int b = 0; b < kBins - 1; ++b) {
    w0 += hist[b];
    sum0 += (b + 0.5) * hist[b];
    const double w1 = total - w0;
    if (w0 == 0.0 || w1 == 0.0) continue;
    const double m0 = sum0 / w0, m1 = (sum_all - sum0) / w1;
    between[b] = w0 * w1 * (m0 - m1) * (m0 - m1);
    best = std::max(best, between[b]);
  }
  if (best < 0.0) return 0.5;
  // empty bins between the classes leave a plateau of equal scores; take its middle
  int lo = 0;
  while (between[lo] < best * (1.0 - 1e-12)) ++lo;
  int hi = lo;
  while (hi + 1 < kBins - 1 && between[hi + 1] >= best * (1.0 - 1e-12)) ++hi;
  return (0.5 * (lo + hi) + 1.0) / kBins;
}

namespace {

/// Largest 4-connected component of `mask`; empty when the mask is empty.
std::vector<int> largest_component(const std::vector<std::uint8_t>& mask, int h, int w) {
  std::vector<int> label(mask.size(), -1), best, current, stack;
  for (int start = 0; start < h * w; ++start) {
    if (!mask[start] || label[start] >= 0) continue;
    current.clear();
    stack.assign(1, start);
    label[start] = start;
    while (!stack.empty()) {
      const int p = stack.back();
      stack.pop_back();
      current.push_back(p);
      const int y = p / w, x = p % w;
      const int nb[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
      for (const auto& n : nb) {
        if (n[0] < 0 || n[0] >= h || n[1] < 0 || n[1] >= w) continue;
        const int q = n[0] * w + n[1];
        if (mask[q] && label[q] < 0) {
          label[q] = start;
          stack.push_back(q);
        }
      }
    }
    if (current.size() > best.size()) best = current;
  }
  return best;
}

}  // namespace

AreaTrace dark_region_areas(const Video& v, const std::vector<std::uint8_t>& cone) {
  const int h = v.height, w = v.width;
  if (cone.size() != v.frame_size()) throw ValidationError("dark_region_areas: cone mask size mismatch");
  AreaTrace t;
  std::vector<float> inside;
  inside.reserve(v.size());
  for (int f = 0; f < v.frames; ++f) {
    const auto fr = v.frame(f);
    for (std::size_t i = 0; i < fr.size(); ++i)
      if (cone[i]) inside.push_back(fr[i]);
  }
  if (inside.empty()) return t;
  t.threshold = otsu_threshold(inside);
  double s0 = 0, s1 = 0, n0 = 0, n1 = 0;
  for (float x : inside) {
    if (x < t.threshold) {
      s0 += x;
      n0 += 1;
    } else {
      s1 += x;
      n1 += 1;
    }
  }
  if (n0 == 0 || n1 == 0) return t;
  t.dark_level = s0 / n0;
  t.bright_level = s1 / n1;
  const double span = t.bright_level - t.dark_level;
  if (!(span > 0.0)) return t;

  std::vector<std::uint8_t> dark(v.frame_size()), region(v.frame_size());
  t.areas.resize(v.frames);
  for (int f = 0; f < v.frames; ++f) {
    const auto fr = v.frame(f);
    for (std::size_t i = 0; i < fr.size(); ++i) dark[i] = cone[i] && fr[i] < t.threshold;
    const auto comp = largest_component(dark, h, w);
    if (comp.empty()) {
      t.areas.clear();
      return t;
    }
    std::fill(region.begin(), region.end(), 0);
    for (int p : comp) {
      const int y = p / w, x = p % w;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy >= 0 && yy < h && xx >= 0 && xx < w && cone[yy * w + xx]) region[yy * w + xx] = 1;
        }
    }
    double a = 0.0;
    for (std::size_t i = 0; i < fr.size(); ++i)
      if (region[i]) a += std::clamp((t.bright_level - fr[i]) / span, 0.0, 1.0);
    t.areas[f] = a;
  }
  t.ok = true;
  return t;
}

std::optional<double> estimate_ef(const Video& v, const std::vector<std::uint8_t>& cone) {
  const AreaTrace t = dark_region_areas(v, cone);
  if (!t.ok) return std::nullopt;
  const auto [lo, hi] = std::minmax_element(t.areas.begin(), t.areas.end());
  if (!(*hi > 0.0)) return std::nullopt;
  return (*hi - *lo) / *hi;
}

// ---------------------------------------------------------------------------
// Metrics

RegressionMetrics regression_metrics(std::span<const double> pred, std::span<const double> target) {
  if (pred.empty() || pred.size() != target.size())
    throw ValidationError("regression_metrics: need equal, nonzero lengths");
  RegressionMetrics m;
  m.n = static_cast<int>(pred.size());
  const double n = static_cast<double>(pred.size());
  const double mean_t = std::accumulate(target.begin(), target.end(), 0.0) / n;
  double ss_res = 0, ss_tot = 0, abs_sum = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double e = pred[i] - target[i];
    ss_res += e * e;
    abs_sum += std::abs(e);
    ss_tot += (target[i] - mean_t) * (target[i] - mean_t);
  }
  m.mae = abs_sum / n;
  m.rmse = std::sqrt(ss_res / n);
  if (ss_tot > 0.0) {
    m.r2 = 1.0 - ss_res / ss_tot;
  } else {
    m.r2 = std::nan("");
    m.r2_defined = false;
  }
  return m;
}

namespace {

std::vector<double> gaussian_window(int size, double sigma) {
  std::vector<double> g(size);
  const double c = (size - 1) / 2.0;
  for (int i = 0; i < size; ++i) g[i] = std::exp(-(i - c) * (i - c) / (2 * sigma * sigma));
  const double s = std::accumulate(g.begin(), g.end(), 0.0);
  for (double& x : g) x /= s;
  return g;
}

/// Separable "valid" filtering of a h x w image.
std::vector<double> filter_valid(const std::vector<double>& img, int h, int w, const std::vector<double>& gy,
                                 const std::vector<double>& gx) {
  const int ky = static_cast<int>(gy.size()), kx = static_cast<int>(gx.size());
  const int oh = h - ky + 1, ow = w - kx + 1;
  std::vector<double> tmp(static_cast<std::size_t>(h) * ow), out(static_cast<std::size_t>(oh) * ow);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0;
      for (int k = 0; k < kx; ++k) s += gx[k] * img[y * w + x + k];
      tmp[y * ow + x] = s;
    }
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0;
      for (int k = 0; k < ky; ++k) s += gy[k] * tmp[(y + k) * ow + x];
      out[y * ow + x] = s;
    }
  return out;
}

}  // namespace

double ssim(const Video& a, const Video& b) {
  if (a.shape() != b.shape() || a.frames != 1)
    throw ValidationError("ssim: need two one-frame images of equal size, got " + a.shape().str() + " and " +
                          b.shape().str());
  constexpr double kC1 = 0.01 * 0.01, kC2 = 0.03 * 0.03;
  const int h = a.height, w = a.width;
  const auto gy = gaussian_window(std::min(11, h), 1.5);
  const auto gx = gaussian_window(std::min(11, w), 1.5);
  const std::size_t n = a.size();
  std::vector<double> x(n), y(n), xx(n), yy(n), xy(n);
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = a.data[i];
    y[i] = b.data[i];
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const auto mx = filter_valid(x, h, w, gy, gx), my = filter_valid(y, h, w, gy, gx);
  const auto sxx = filter_valid(xx, h, w, gy, gx), syy = filter_valid(yy, h, w, gy, gx),
             sxy = filter_valid(xy, h, w, gy, gx);
  double total = 0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cxy = sxy[i] - mx[i] * my[i];
    total += ((2 * mx[i] * my[i] + kC1) * (2 * cxy + kC2)) /
             ((mx[i] * mx[i] + my[i] * my[i] + kC1) * (vx + vy + kC2));
  }
  return total / static_cast<double>(mx.size());
}

double video_ssim(const Video& a, const Video& b) {
  if (a.shape() != b.shape() || a.frames < 1)
    throw ValidationError("video_ssim: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  double s = 0;
  for (int f = 0; f < a.frames; ++f) s += ssim(extract_frame(a, f), extract_frame(b, f));
  return s / a.frames;
}

// ---------------------------------------------------------------------------
// Evaluation

std::string to_string(EvalTask t) { return t == EvalTask::Gen ? "gen" : "rec"; }

EvalTask eval_task_from_string(const std::string& s) {
  if (s == "gen" || s == "Gen") return EvalTask::Gen;
  if (s == "rec" || s == "Rec") return EvalTask::Rec;
  throw ValidationError("unknown eval task '" + s + "' (gen|rec)");
}

VideoGenerator cascade_generator(const CascadeConfig& cc, const CascadeModels& models) {
  return [&cc, &models](const Video& ref, double lambda_c, Rng& rng) {
    return run_cascade(cc, models, ref, lambda_c, rng);
  };
}

GeneratorInfo cascade_output_info(const CascadeConfig& cc) {
  if (cc.stages.empty()) throw ValidationError("cascade has no stages");
  return {cc.stages.back().shape(), cc.stages.back().fps};
}

void EvalOptions::validate() const {
  if (k < 1) throw ValidationError("eval: k must be >= 1");
  if (max_videos < 0) throw ValidationError("eval: n must be >= 0");
  if (!(gen_min >= 0.0 && gen_max <= 1.0 && gen_min <= gen_max))
    throw ValidationError("eval: counterfactual range must lie in [0, 1]");
}

std::string eval_options_to_json(const EvalOptions& o) {
  return json{{"task", to_string(o.task)}, {"k", o.k},         {"max_videos", o.max_videos},
              {"seed", o.seed},            {"split", o.split}, {"gen_range", {o.gen_min, o.gen_max}}}
      .dump();
}

Video reference_clip(const VideoSample& s, const GeneratorInfo& info) {
  Video v = resample_time(s.video, s.fps, info.fps);
  if (v.height % info.shape.height == 0 && v.width % info.shape.width == 0)
    v = downscale_area(v, info.shape.height, info.shape.width);
  else
    v = resize_bilinear(v, info.shape.height, info.shape.width);
  return pad_or_truncate({v, s.ef_true, info.fps, {}, {}}, info.shape.frames).video;
}

EvalReport evaluate(const VideoGenerator& gen, const GeneratorInfo& info, const Dataset& ds,
                    const EvalOptions& opts, std::ostream* progress) {
  opts.validate();
  auto idx = ds.manifest().split_indices(opts.split);
  if (opts.max_videos > 0 && idx.size() > static_cast<std::size_t>(opts.max_videos)) idx.resize(opts.max_videos);
  if (idx.empty()) throw ValidationError("eval: no videos in split '" + opts.split + "'");
  const auto cone = cone_mask(info.shape.height, info.shape.width, ds.manifest().cone_angle);

  EvalReport r;
  r.task = opts.task;
  r.k = opts.k;
  r.seed = opts.seed;
  r.records.resize(idx.size());
  const Rng master(opts.seed);
  const int n = static_cast<int>(idx.size());
  int done = 0;

  detail::parallel_for_dynamic(n, [&](int i) {
    const VideoSample s = ds.load(idx[i]);
    EvalRecord rec;
    rec.id = ds.entry(idx[i]).id;
    rec.ef_true = s.ef_true;
    const Rng vr = master.fork(static_cast<std::uint64_t>(i));
    Rng lr = vr.fork(0);
    rec.target = opts.task == EvalTask::Rec ? s.ef_true : lr.uniform(opts.gen_min, opts.gen_max);
    std::vector<Video> outs;
    double best = 0.0;
    for (int j = 0; j < opts.k; ++j) {
      Rng cr = vr.fork(1 + static_cast<std::uint64_t>(j));
      const int ref = static_cast<int>(cr.uniform_index(s.video.frames));
      rec.ref_indices.push_back(ref);
      const Video out = to_disk_range(gen(to_model_range(extract_frame(s.video, ref)), rec.target, cr));
      if (out.shape() != info.shape)
        throw ValidationError("eval: generator produced " + out.shape().str() + ", expected " +
                              info.shape.str());
      const auto est = estimate_ef(out, cone);
      rec.candidates.push_back(est);
      if (est && (rec.chosen < 0 || std::abs(*est - rec.target) < best)) {
        rec.chosen = j;
        best = std::abs(*est - rec.target);
        rec.estimate = *est;
      }
      outs.push_back(out);
    }
    if (rec.chosen >= 0) rec.ssim = video_ssim(outs[rec.chosen], reference_clip(s, info));
    r.records[i] = std::move(rec);
#pragma omp critical(eval_progress)
    {
      ++done;
      if (progress) {
        const EvalRecord& e = r.records[i];
        *progress << "eval " << done << "/" << n << " " << e.id << " lambda_c " << e.target << " ef_hat "
                  << (e.chosen >= 0 ? std::to_string(e.estimate) : std::string("failed")) << '\n'
                  << std::flush;
      }
    }
  });

  std::vector<double> pred, target, pred1, target1, best1;
  double ssim_sum = 0;
  for (const auto& e : r.records) {
    if (e.chosen < 0) {
      ++r.n_failed;
      continue;
    }
    pred.push_back(e.estimate);
    target.push_back(e.target);
    ssim_sum += e.ssim;
    if (e.candidates[0]) {
      pred1.push_back(*e.candidates[0]);
      target1.push_back(e.target);
      best1.push_back(e.estimate);
    }
  }
  r.n_videos = static_cast<int>(pred.size());
  if (!pred.empty()) {
    r.metrics = regression_metrics(pred, target);
    r.ssim_mean = ssim_sum / pred.size();
  }
  if (!pred1.empty()) {
    r.first_candidate = regression_metrics(pred1, target1);
    r.best_on_first_set = regression_metrics(best1, target1);
  }
  return r;
}

EvalReport evaluate(const CascadeConfig& cc, const CascadeModels& models, const Dataset& ds,
                    const EvalOptions& opts, std::ostream* progress) {
  return evaluate(cascade_generator(cc, models), cascade_output_info(cc), ds, opts, progress);
}

namespace {

json metrics_to_json(const RegressionMetrics& m) {
  json j = {{"n", m.n}, {"mae", m.mae}, {"rmse", m.rmse}, {"r2_defined", m.r2_defined}};
  j["r2"] = m.r2_defined ? json(m.r2) : json(nullptr);
  return j;
}

RegressionMetrics metrics_from_json(const json& j) {
  RegressionMetrics m;
  m.n = j.at("n");
  m.mae = j.at("mae");
  m.rmse = j.at("rmse");
  m.r2_defined = j.at("r2_defined");
  m.r2 = j.at("r2").is_null() ? std::nan("") : j.at("r2").get<double>();
  return m;
}

}  // namespace

std::string eval_report_to_json(const EvalReport& r) {
  json j = {{"task", to_string(r.task)},
            {"k", r.k},
            {"seed", r.seed},
            {"n_videos", r.n_videos},
            {"n_failed", r.n_failed},
            {"ssim_mean", r.ssim_mean},
            {"metrics", metrics_to_json(r.metrics)},
            {"first_candidate", metrics_to_json(r.first_candidate)},
            {"best_on_first_set", metrics_to_json(r.best_on_first_set)}};
  json vids = json::array();
  for (const auto& e : r.records) {
    json c = json::array();
    for (const auto& x : e.candidates) c.push_back(x ? json(*x) : json(nullptr));
    json v = {{"id", e.id},       {"ef_true", e.ef_true}, {"lambda_c", e.target},
              {"chosen", e.chosen}, {"ssim", e.ssim},    {"ref_indices", e.ref_indices},
              {"candidates", c}};
    v["ef_hat"] = e.chosen >= 0 ? json(e.estimate) : json(nullptr);
    vids.push_back(v);
  }
  j["videos"] = vids;
  return j.dump(1);
}

EvalReport eval_report_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    EvalReport r;
    r.task = eval_task_from_string(j.at("task"));
    r.k = j.at("k");
    r.seed = j.at("seed");
    r.n_videos = j.at("n_videos");
    r.n_failed = j.at("n_failed");
    r.ssim_mean = j.at("ssim_mean");
    r.metrics = metrics_from_json(j.at("metrics"));
    r.first_candidate = metrics_from_json(j.at("first_candidate"));
    r.best_on_first_set = metrics_from_json(j.at("best_on_first_set"));
    for (const auto& v : j.at("videos")) {
      EvalRecord e;
      e.id = v.at("id");
      e.ef_true = v.at("ef_true");
      e.target = v.at("lambda_c");
      e.chosen = v.at("chosen");
      e.ssim = v.at("ssim");
      e.ref_indices = v.at("ref_indices").get<std::vector<int>>();
      for (const auto& c : v.at("candidates"))
        e.candidates.push_back(c.is_null() ? std::nullopt : std::optional<double>(c.get<double>()));
      e.estimate = v.at("ef_hat").is_null() ? 0.0 : v.at("ef_hat").get<double>();
      r.records.push_back(std::move(e));
    }
    return r;
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed eval report: ") + e.what());
  }
}

std::string eval_report_table(const EvalReport& r) {
  std::ostringstream os;
  os << "id\tef_true\tlambda_c\tef_hat\tchosen\tssim";
  for (int j = 0; j < r.k; ++j) os << "\tcand_" << j;
  os << '\n';
  char buf[64];
  for (const auto& e : r.records) {
    os << e.id;
    std::snprintf(buf, sizeof buf, "\t%.6f\t%.6f", e.ef_true, e.target);
    os << buf;
    if (e.chosen >= 0) {
      std::snprintf(buf, sizeof buf, "\t%.6f\t%d\t%.6f", e.estimate, e.chosen, e.ssim);
      os << buf;
    } else {
      os << "\tnan\t-1\tnan";
    }
    for (const auto& c : e.candidates) {
      if (c) {
        std::snprintf(buf, sizeof buf, "\t%.6f", *c);
        os << buf;
      } else {
        os << "\tnan";
      }
    }
    os << '\n';
  }
  return os.str();
}

std::string summary_header() { return "model\ttask\tk\tn\tR2\tMAE\tRMSE\tSSIM\tfailed"; }

std::string summary_row(const EvalReport& r, const std::string& model) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%s\t%s\t%d\t%d\t%.4f\t%.4f\t%.4f\t%.4f\t%d", model.c_str(),
                to_string(r.task).c_str(), r.k, r.n_videos, r.metrics.r2, r.metrics.mae, r.metrics.rmse,
                r.ssim_mean, r.n_failed);
  return buf;
}

// ---------------------------------------------------------------------------
// Rebalancing

int RebalanceOptions::bins() const { return static_cast<int>(std::lround((ef_max - ef_min) / bin_width)); }

void RebalanceOptions::validate() const {
  if (!(bin_width > 0.0)) throw ValidationError("rebalance: bin width must be > 0");
  if (!(ef_min >= 0.0 && ef_max <= 1.0 && ef_min < ef_max))
    throw ValidationError("rebalance: EF range must satisfy 0 <= min < max <= 1");
  if (std::abs(bins() * bin_width - (ef_max - ef_min)) > 1e-9)
    throw ValidationError("rebalance: the EF range must be a whole number of bins");
  if (target_per_bin < 1) throw ValidationError("rebalance: target per bin must be >= 1");
  if (max_attempts < 1) throw ValidationError("rebalance: max attempts must be >= 1");
}

std::string rebalance_options_to_json(const RebalanceOptions& o) {
  return json{{"split", o.split},
              {"bin_width", o.bin_width},
              {"target_per_bin", o.target_per_bin},
              {"ef_range", {o.ef_min, o.ef_max}},
              {"max_attempts", o.max_attempts},
              {"accept_tol", o.accept_tol},
              {"seed", o.seed}}
      .dump();
}

double RebalanceReport::real_fraction() const {
  const double n = static_cast<double>(n_real + n_synthetic);
  return n > 0 ? n_real / n : 0.0;
}

std::string rebalance_report_to_json(const RebalanceReport& r) {
  return json{{"n_real", r.n_real},
              {"n_synthetic", r.n_synthetic},
              {"n_real_dropped", r.n_real_dropped},
              {"real_fraction", r.real_fraction()},
              {"shortfall", r.shortfall},
              {"bins_short", r.bins_short},
              {"attempts", r.attempts},
              {"real_per_bin", r.real_per_bin},
              {"final_per_bin", r.final_per_bin}}
      .dump();
}

int ef_bin(double ef, const RebalanceOptions& o) {
  if (!(ef >= o.ef_min && ef < o.ef_max)) return -1;
  // small offset so values on a bin edge land in the upper bin despite rounding
  const int b = static_cast<int>(std::floor((ef - o.ef_min) / o.bin_width + 1e-9));
  return std::min(b, o.bins() - 1);
}

RebalanceReport rebalance_dataset(const VideoGenerator& gen, const GeneratorInfo& info, const Dataset& ds,
                                  const RebalanceOptions& opts, const std::filesystem::path& out,
                                  std::ostream* progress) {
  opts.validate();
  const auto& m = ds.manifest();
  if (info.shape.height != m.height || info.shape.width != m.width)
    throw ValidationError("rebalance: generator output " + info.shape.str() + " does not match the dataset " +
                          std::to_string(m.height) + "x" + std::to_string(m.width));
  const auto idx = m.split_indices(opts.split);
  if (idx.empty()) throw ValidationError("rebalance: no videos in split '" + opts.split + "'");

  const int nb = opts.bins();
  RebalanceReport rep;
  rep.real_per_bin.assign(nb, 0);
  std::vector<std::vector<std::size_t>> members(nb);
  for (std::size_t i : idx) {
    const int b = ef_bin(m.entries[i].ef_true, opts);
    if (b < 0) {
      ++rep.n_real_dropped;
      continue;
    }
    members[b].push_back(i);
    ++rep.real_per_bin[b];
  }

  const Rng master(opts.seed);
  Rng pick = master.fork(0xffffffffULL);
  struct Slot {
    int bin;
    std::uint64_t stream;
  };
  std::vector<Slot> slots;
  for (int b = 0; b < nb; ++b) {
    auto& v = members[b];
    if (static_cast<int>(v.size()) > opts.target_per_bin) {
      // partial Fisher-Yates keeps a uniform subset, then restores file order
      for (int k = 0; k < opts.target_per_bin; ++k)
        std::swap(v[k], v[k + pick.uniform_index(v.size() - k)]);
      rep.n_real_dropped += v.size() - opts.target_per_bin;
      v.resize(opts.target_per_bin);
      std::sort(v.begin(), v.end());
    }
    for (int k = static_cast<int>(v.size()); k < opts.target_per_bin; ++k)
      slots.push_back({b, static_cast<std::uint64_t>(b) * 1000003ULL + k});
  }

  struct Made {
    bool ok = false;
    int attempts = 0;
    VideoSample sample;
  };
  std::vector<Made> made(slots.size());
  const auto cone = cone_mask(info.shape.height, info.shape.width, m.cone_angle);
  const int ns = static_cast<int>(slots.size());
  int done = 0;
  detail::parallel_for_dynamic(ns, [&](int s) {
    const Rng sr = master.fork(slots[s].stream);
    const double lo = opts.ef_min + slots[s].bin * opts.bin_width;
    Made& out_s = made[s];
    for (int a = 0; a < opts.max_attempts && !out_s.ok; ++a) {
      ++out_s.attempts;
      Rng ar = sr.fork(static_cast<std::uint64_t>(a));
      const double lambda = ar.uniform(lo, lo + opts.bin_width);
      const std::size_t src = idx[ar.uniform_index(idx.size())];
      const VideoSample real = ds.load(src);
      const int frame = static_cast<int>(ar.uniform_index(real.video.frames));
      Video v;
      try {
        v = to_disk_range(gen(to_model_range(extract_frame(real.video, frame)), lambda, ar));
      } catch (const NumericalError&) {
        continue;
      }
      const auto est = estimate_ef(v, cone);
      if (!est || (opts.accept_tol > 0.0 && std::abs(*est - lambda) > opts.accept_tol)) continue;
      out_s.ok = true;
      out_s.sample.video = std::move(v);
      out_s.sample.ef_true = lambda;
      out_s.sample.fps = info.fps;
    }
#pragma omp critical(rebalance_progress)
    {
      ++done;
      if (progress && (done % 10 == 0 || done == ns))
        *progress << "rebalance " << done << "/" << ns << '\n' << std::flush;
    }
  });

  std::filesystem::create_directories(out);
  DatasetWriter w(out, m.height, m.width, m.cone_angle);
  rep.final_per_bin.assign(nb, 0);
  std::size_t si = 0;
  for (int b = 0; b < nb; ++b) {
    for (std::size_t i : members[b]) {
      w.add_copy(ds, i, "train");
      ++rep.n_real;
      ++rep.final_per_bin[b];
    }
    bool short_bin = false;
    for (; si < slots.size() && slots[si].bin == b; ++si) {
      rep.attempts += made[si].attempts;
      if (!made[si].ok) {
        ++rep.shortfall;
        short_bin = true;
        continue;
      }
      w.add(made[si].sample, "train", slots[si].stream, "synthetic");
      ++rep.n_synthetic;
      ++rep.final_per_bin[b];
    }
    if (short_bin) ++rep.bins_short;
  }
  w.finish(json{{"rebalance", json::parse(rebalance_options_to_json(opts))},
                {"source", ds.dir().string()},
                {"report", json::parse(rebalance_report_to_json(rep))}}
               .dump());
  return rep;
}

// ---------------------------------------------------------------------------
// EF regressor

void RegressorOptions::validate() const {
  if (input.frames < 1 || input.height < 8 || input.width < 8 || !(input.fps > 0.0))
    throw ValidationError("regressor: bad input geometry");
  if (input.height % 8 || input.width % 8) throw ValidationError("regressor: input size must be divisible by 8");
  if (channels < 1 || hidden < 1) throw ValidationError("regressor: channels and hidden must be >= 1");
  if (epochs < 1 || batch_size < 1) throw ValidationError("regressor: epochs and batch must be >= 1");
  if (!(learning_rate > 0.0)) throw ValidationError("regressor: learning rate must be > 0");
}

std::string regressor_options_to_json(const RegressorOptions& o) {
  return json{{"input", {{"frames", o.input.frames}, {"height", o.input.height}, {"width", o.input.width},
                         {"fps", o.input.fps}}},
              {"channels", o.channels},
              {"hidden", o.hidden},
              {"epochs", o.epochs},
              {"batch_size", o.batch_size},
              {"learning_rate", o.learning_rate},
              {"seed", o.seed}}
      .dump();
}

EfRegressor::EfRegressor(const RegressorOptions& o) : o_(o) {
  o.validate();
  auto add = [&](std::size_t wn, std::size_t bn, int fan_in) {
    Layer l{n_params_, wn, n_params_ + wn, bn, fan_in};
    n_params_ += wn + bn;
    layers_.push_back(l);
  };
  const int c1 = o.channels, c2 = 2 * o.channels;
  add(static_cast<std::size_t>(c1) * 1 * 9, c1, 9);
  add(static_cast<std::size_t>(c2) * c1 * 9, c2, c1 * 9);
  add(static_cast<std::size_t>(c2) * c2 * 9, c2, c2 * 9);
  const int flat = c2 * o.input.frames * (o.input.height / 8) * (o.input.width / 8);
  add(static_cast<std::size_t>(o.hidden) * flat, o.hidden, flat);
  add(static_cast<std::size_t>(o.hidden), 1, o.hidden);
}

std::vector<float> EfRegressor::init_params(Rng& rng) const {
  std::vector<float> p(n_params_, 0.0f);
  for (const Layer& l : layers_) {
    const double s = std::sqrt(2.0 / l.fan_in);
    for (std::size_t i = 0; i < l.w_n; ++i) p[l.w_off + i] = static_cast<float>(rng.normal(0.0, s));
  }
  p[layers_.back().b_off] = 0.5f;
  return p;
}

template <class G>
int EfRegressor::build(G& g, const Video& clip) const {
  const auto& in = o_.input;
  if (clip.frames != in.frames || clip.height != in.height || clip.width != in.width)
    throw ValidationError("regressor: clip " + clip.shape().str() + " does not match the input geometry");
  Tensor<float> t(1, in.frames, in.height, in.width);
  std::copy(clip.data.begin(), clip.data.end(), t.data.begin());
  auto ref = [](std::size_t off, std::size_t n) { return ParamRef{off, n}; };
  const int c1 = o_.channels, c2 = 2 * o_.channels;
  int x = g.input(std::move(t));
  const int cin[3] = {1, c1, c2}, cout[3] = {c1, c2, c2};
  for (int i = 0; i < 3; ++i) {
    const Layer& l = layers_[i];
    x = g.conv(x, ref(l.w_off, l.w_n), ref(l.b_off, l.b_n), {cin[i], cout[i], 3});
    x = g.avg_pool2(g.silu(x));
  }
  const Layer& d1 = layers_[3];
  x = g.silu(g.linear(x, ref(d1.w_off, d1.w_n), ref(d1.b_off, d1.b_n), o_.hidden));
  const Layer& d2 = layers_[4];
  return g.linear(x, ref(d2.w_off, d2.w_n), ref(d2.b_off, d2.b_n), 1);
}

double EfRegressor::predict(std::span<const float> params, const Video& clip) const {
  Graph<float> g(params);
  const int y = build(g, clip);
  return g.value(y).data[0];
}

double EfRegressor::loss_and_grad(std::span<const float> params, const Video& clip, double target,
                                  std::span<float> grads) const {
  Graph<float> g(params, grads);
  const int y = build(g, clip);
  const double e = g.value(y).data[0] - target;
  Tensor<float> d(1, 1, 1, 1, static_cast<float>(2.0 * e));
  g.backward(y, d);
  return e * e;
}

Video regressor_clip(const VideoSample& s, const RegressorInput& in) {
  GeneratorInfo info{{in.frames, in.height, in.width}, in.fps};
  return to_model_range(reference_clip(s, info));
}

std::string regressor_result_to_json(const RegressorResult& r) {
  return json{{"n_train", r.n_train},
              {"real_fraction", r.real_fraction},
              {"val", metrics_to_json(r.val)},
              {"epoch_loss", r.epoch_loss}}
      .dump(1);
}

RegressorResult train_and_validate_regressor(const Dataset& train, const std::string& train_split,
                                             const Dataset& val, const std::string& val_split,
                                             const RegressorOptions& opts) {
  opts.validate();
  auto load = [&](const Dataset& ds, const std::string& split, std::vector<Video>& clips,
                  std::vector<double>& ef, int* n_real) {
    const auto idx = ds.manifest().split_indices(split);
    if (idx.empty()) throw ValidationError("regressor: no videos in split '" + split + "'");
    clips.resize(idx.size());
    ef.resize(idx.size());
    const int n = static_cast<int>(idx.size());
    detail::parallel_for_dynamic(n, [&](int i) {
      const VideoSample s = ds.load(idx[i]);
      clips[i] = regressor_clip(s, opts.input);
      ef[i] = s.ef_true;
    });
    if (n_real) {
      *n_real = 0;
      for (std::size_t i : idx) *n_real += ds.entry(i).provenance == "real";
    }
  };
  std::vector<Video> tc, vc;
  std::vector<double> te, ve;
  int n_real = 0;
  load(train, train_split, tc, te, &n_real);
  load(val, val_split, vc, ve, nullptr);

  const EfRegressor net(opts);
  Rng rng(opts.seed);
  Rng init = rng.fork(0);
  std::vector<float> p = net.init_params(init);
  std::vector<float> m(p.size(), 0.0f), v(p.size(), 0.0f), g(p.size());
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  long step = 0;

  RegressorResult res;
  res.n_train = static_cast<int>(tc.size());
  res.real_fraction = tc.empty() ? 0.0 : static_cast<double>(n_real) / tc.size();
  std::vector<std::size_t> order(tc.size());
  std::iota(order.begin(), order.end(), 0);
  for (int ep = 0; ep < opts.epochs; ++ep) {
    Rng er = rng.fork(1 + static_cast<std::uint64_t>(ep));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[er.uniform_index(i)]);
    double ep_loss = 0;
    for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
      const std::size_t end = std::min(order.size(), start + opts.batch_size);
      std::fill(g.begin(), g.end(), 0.0f);
      for (std::size_t k = start; k < end; ++k) ep_loss += net.loss_and_grad(p, tc[order[k]], te[order[k]], g);
      const float inv = 1.0f / static_cast<float>(end - start);
      ++step;
      const double c1 = 1.0 - std::pow(b1, step), c2 = 1.0 - std::pow(b2, step);
      const double lr_t = opts.learning_rate * std::sqrt(c2) / c1;
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = g[i] * inv;
        m[i] = static_cast<float>(b1 * m[i] + (1 - b1) * gi);
        v[i] = static_cast<float>(b2 * v[i] + (1 - b2) * gi * gi);
        p[i] -= static_cast<float>(lr_t * m[i] / (std::sqrt(v[i]) + eps * std::sqrt(c2)));
      }
    }
    const double mean_loss = ep_loss / order.size();
    if (!std::isfinite(mean_loss)) throw NumericalError("regressor: non-finite loss in epoch " + std::to_string(ep));
    res.epoch_loss.push_back(mean_loss);
  }

  std::vector<double> pred(vc.size());
  for (std::size_t i = 0; i < vc.size(); ++i) pred[i] = net.predict(p, vc[i]);
  res.val = regression_metrics(pred, ve);
  return res;
}

}  // namespace echoedm
