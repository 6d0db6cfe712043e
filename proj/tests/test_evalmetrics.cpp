// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "doctest.h"
#include "echoedm/error.hpp"
#include "echoedm/evalmetrics.hpp"
#include "echoedm/resample.hpp"
#include "test_util.hpp"

using namespace echoedm;
using echoedm::testing::TempDir;

namespace {

SynthParams params_for(double ef, bool speckle, std::uint64_t seed) {
  DataGenConfig cfg;
  cfg.speckle.enabled = speckle;
  Rng rng(seed);
  SynthParams p = random_params(cfg, rng);
  p.ef = ef;
  p.duration_s = 2.0;
  return p;
}

const GeneratorInfo kOut{{16, 32, 32}, 8.0};

/// Renders a fresh noiseless video with the requested EF in the output geometry.
Video oracle_video(double lambda, Rng& rng) {
  DataGenConfig cfg;
  cfg.fps = kOut.fps;
  cfg.duration_s = 2.0;
  cfg.speckle.enabled = false;
  SynthParams p = random_params(cfg, rng);
  p.ef = lambda;
  const VideoSample s = pad_or_truncate(synth_video(p), kOut.shape.frames);
  return to_model_range(s.video);
}

/// Small noiseless dataset shared by the evaluation tests.
const Dataset& small_dataset() {
  static TempDir dir("evalmetrics_ds");
  static const Dataset ds = [] {
    DataGenConfig cfg;
    cfg.n_train = 0;
    cfg.n_val = 0;
    cfg.n_test = 24;
    cfg.duration_s = 2.0;
    cfg.speckle.enabled = false;
    cfg.seed = 9;
    generate_dataset(cfg, dir.path);
    return Dataset::open(dir.path);
  }();
  return ds;
}

}  // namespace

TEST_CASE("regression_metrics") {
  SUBCASE("hand-computed example") {
    const std::vector<double> pred{1, 2, 3}, target{1, 2, 4};
    const auto m = regression_metrics(pred, target);
    // SS_tot about 7/3: 16/9 + 1/9 + 25/9 = 42/9; SS_res = 1
    CHECK(m.r2 == doctest::Approx(1.0 - 1.0 / (42.0 / 9.0)).epsilon(1e-12));
    CHECK(m.r2 == doctest::Approx(0.7857).epsilon(1e-4));
    CHECK(m.mae == doctest::Approx(0.3333).epsilon(1e-4));
    CHECK(m.rmse == doctest::Approx(0.5774).epsilon(1e-4));
    CHECK(m.n == 3);
  }
  SUBCASE("perfect prediction") {
    const std::vector<double> t{0.2, 0.5, 0.7, 0.1};
    const auto m = regression_metrics(t, t);
    CHECK(m.r2 == 1.0);
    CHECK(m.mae == 0.0);
    CHECK(m.rmse == 0.0);
  }
  SUBCASE("predicting the mean gives zero R2") {
    const std::vector<double> t{0.2, 0.5, 0.7, 0.1};
    const double mean = std::accumulate(t.begin(), t.end(), 0.0) / t.size();
    const std::vector<double> p(t.size(), mean);
    CHECK(regression_metrics(p, t).r2 == doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("zero-variance target") {
    const std::vector<double> t{0.5, 0.5, 0.5}, p{0.4, 0.5, 0.6};
    const auto m = regression_metrics(p, t);
    CHECK_FALSE(m.r2_defined);
    CHECK(std::isnan(m.r2));
    CHECK(m.mae == doctest::Approx(0.2 / 3));
  }
  SUBCASE("invalid input") {
    const std::vector<double> a{1, 2}, b{1};
    CHECK_THROWS_AS(regression_metrics(a, b), ValidationError);
    CHECK_THROWS_AS(regression_metrics({}, {}), ValidationError);
  }
  SUBCASE("rmse >= mae and R2 = 1 only when exact") {
    Rng rng(4);
    for (int trial = 0; trial < 200; ++trial) {
      std::vector<double> p(10), t(10);
      for (int i = 0; i < 10; ++i) {
        t[i] = rng.uniform();
        p[i] = t[i] + (trial % 2 ? rng.normal(0.0, 0.1) : 0.0);
      }
      const auto m = regression_metrics(p, t);
      CHECK(m.rmse >= m.mae);
      CHECK(m.r2 <= 1.0);
      CHECK((m.r2 == 1.0) == (trial % 2 == 0));
    }
  }
}

TEST_CASE("ssim") {
  Rng rng(2);
  Video a(1, 32, 32), b(1, 32, 32);
  for (auto& x : a.data) x = static_cast<float>(rng.uniform());
  for (auto& x : b.data) x = static_cast<float>(rng.uniform());

  CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(ssim(a, b) == doctest::Approx(ssim(b, a)).epsilon(1e-12));
  CHECK(ssim(a, b) < 0.2);

  SUBCASE("constant images follow the closed form") {
    const double c1 = 1e-4;
    const Video zero(1, 24, 24, 0.0f), one(1, 24, 24, 1.0f);
    CHECK(ssim(zero, one) == doctest::Approx(c1 / (1.0 + c1)).epsilon(1e-9));
    CHECK(ssim(zero, one) == doctest::Approx(1e-4).epsilon(1e-3));
  }
  SUBCASE("a 2-pixel shift of a speckle image lowers SSIM") {
    const auto s = synth_video(params_for(0.6, true, 8));
    const Video f = extract_frame(s.video, 0);
    Video shifted(1, f.height, f.width);
    for (int y = 0; y < f.height; ++y)
      for (int x = 0; x < f.width; ++x) shifted.at(0, y, x) = f.at(0, y, std::max(0, x - 2));
    const double v = ssim(f, shifted);
    CHECK(v < 1.0 - 1e-3);
    CHECK(v < ssim(f, f));
  }
  SUBCASE("frames smaller than the window") {
    Video s(1, 8, 8), t(1, 8, 8);
    for (auto& x : s.data) x = static_cast<float>(rng.uniform());
    t = s;
    CHECK(ssim(s, t) == doctest::Approx(1.0));
  }
  SUBCASE("video SSIM averages frames") {
    Video v(2, 16, 16), w(2, 16, 16);
    for (auto& x : v.data) x = static_cast<float>(rng.uniform());
    w = v;
    std::fill(w.data.begin() + 256, w.data.end(), 0.5f);
    const double expect = 0.5 * (1.0 + ssim(extract_frame(v, 1), extract_frame(w, 1)));
    CHECK(video_ssim(v, w) == doctest::Approx(expect).epsilon(1e-12));
  }
  CHECK_THROWS_AS(ssim(Video(1, 8, 8), Video(1, 8, 9)), ValidationError);
  CHECK_THROWS_AS(video_ssim(Video(2, 8, 8), Video(3, 8, 8)), ValidationError);
}

TEST_CASE("otsu threshold splits a bimodal sample") {
  std::vector<float> v;
  Rng rng(3);
  for (int i = 0; i < 500; ++i) v.push_back(static_cast<float>(0.1 + 0.02 * rng.normal()));
  for (int i = 0; i < 1500; ++i) v.push_back(static_cast<float>(0.7 + 0.05 * rng.normal()));
  const double t = otsu_threshold(v);
  CHECK(t > 0.2);
  CHECK(t < 0.6);
}

TEST_CASE("estimate_ef") {
  const auto cone = cone_mask(32, 32, DataGenConfig{}.cone_angle_deg * M_PI / 180.0);
  SUBCASE("noiseless video") {
    for (std::uint64_t seed : {1, 2, 3, 4}) {
      const auto s = synth_video(params_for(0.6, false, seed));
      const auto ef = estimate_ef(s.video, cone);
      REQUIRE(ef);
      CHECK(*ef >= 0.58);
      CHECK(*ef <= 0.62);
    }
  }
  SUBCASE("static video") {
    const auto s = synth_video(params_for(0.6, false, 1));
    Video still(8, 32, 32);
    for (int f = 0; f < 8; ++f) std::copy(s.video.frame(0).begin(), s.video.frame(0).end(), still.frame(f).begin());
    const auto ef = estimate_ef(still, cone);
    REQUIRE(ef);
    CHECK(*ef == 0.0);
  }
  SUBCASE("speckled video over 100 seeds") {
    double worst = 0, sum = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      const auto s = synth_video(params_for(0.6, true, 1000 + seed));
      const auto ef = estimate_ef(s.video, cone);
      REQUIRE(ef);
      worst = std::max(worst, std::abs(*ef - 0.6));
      sum += std::abs(*ef - 0.6);
    }
    MESSAGE("speckle noise floor at ef 0.6: mean |err| " << sum / 100 << ", worst " << worst);
    CHECK(worst <= 0.05);
  }
  SUBCASE("no dark region") {
    const Video bright(4, 32, 32, 0.7f);
    CHECK_FALSE(estimate_ef(bright, cone).has_value());
    Video partly = bright;
    for (int f = 0; f < 3; ++f) partly.at(f, 20, 16) = 0.05f;
    CHECK_FALSE(estimate_ef(partly, cone).has_value());
  }
  SUBCASE("a stray dark speck does not count") {
    auto s = synth_video(params_for(0.5, false, 6));
    const auto clean = estimate_ef(s.video, cone);
    s.video.at(0, 29, 16) = 0.0f;
    s.video.at(0, 29, 17) = 0.0f;
    const auto dirty = estimate_ef(s.video, cone);
    REQUIRE(clean);
    REQUIRE(dirty);
    CHECK(*dirty == doctest::Approx(*clean).epsilon(1e-3));
  }
  CHECK_THROWS_AS(estimate_ef(Video(2, 16, 16), cone), ValidationError);
}

TEST_CASE("evaluate with an oracle generator") {
  const Dataset& ds = small_dataset();
  const VideoGenerator oracle = [](const Video&, double lambda, Rng& rng) { return oracle_video(lambda, rng); };

  EvalOptions o;
  o.task = EvalTask::Gen;
  o.k = 3;
  o.seed = 5;
  const EvalReport r3 = evaluate(oracle, kOut, ds, o);
  CHECK(r3.n_videos == 24);
  CHECK(r3.n_failed == 0);
  CHECK(r3.metrics.r2 >= 0.95);
  for (const auto& e : r3.records) {
    CHECK(e.target >= 0.15);
    CHECK(e.target <= 0.85);
    CHECK(e.candidates.size() == 3);
    CHECK(e.ref_indices.size() == 3);
    for (const auto& c : e.candidates)
      CHECK(std::abs(*c - e.target) >= std::abs(e.estimate - e.target));
  }

  SUBCASE("best of k never loses to the first draw") {
    CHECK(r3.best_on_first_set.mae <= r3.first_candidate.mae);
    o.k = 1;
    const EvalReport r1 = evaluate(oracle, kOut, ds, o);
    // k = 1 is the first draw of the k = 3 run
    CHECK(r1.metrics.mae == doctest::Approx(r3.first_candidate.mae).epsilon(1e-12));
    CHECK(r3.metrics.mae <= r1.metrics.mae);
    for (std::size_t i = 0; i < r1.records.size(); ++i) {
      CHECK(r1.records[i].chosen == 0);
      CHECK(r1.records[i].target == r3.records[i].target);
    }
  }
  SUBCASE("reproducible") {
    const EvalReport again = evaluate(oracle, kOut, ds, o);
    CHECK(eval_report_to_json(again) == eval_report_to_json(r3));
    o.seed = 6;
    CHECK(eval_report_to_json(evaluate(oracle, kOut, ds, o)) != eval_report_to_json(r3));
  }
  SUBCASE("reconstruction task targets the true EF") {
    o.task = EvalTask::Rec;
    o.k = 1;
    o.max_videos = 5;
    const EvalReport r = evaluate(oracle, kOut, ds, o);
    CHECK(r.records.size() == 5);
    for (const auto& e : r.records) CHECK(e.target == e.ef_true);
    CHECK(r.ssim_mean > -1.0);
    CHECK(r.ssim_mean < 1.0);
  }
  SUBCASE("the ground-truth video itself scores SSIM 1") {
    const VideoGenerator identity = [&](const Video&, double lambda, Rng&) {
      for (std::size_t i = 0; i < ds.size(); ++i) {
        const VideoSample s = ds.load(i);
        if (s.ef_true == lambda) return to_model_range(reference_clip(s, kOut));
      }
      throw ValidationError("no match");
    };
    o.task = EvalTask::Rec;
    o.k = 1;
    o.max_videos = 6;
    const EvalReport r = evaluate(identity, kOut, ds, o);
    CHECK(r.ssim_mean == doctest::Approx(1.0).epsilon(1e-4));
    CHECK(r.metrics.mae < 0.02);
  }
  SUBCASE("estimation failures are excluded and counted") {
    const VideoGenerator flat = [](const Video&, double, Rng&) { return Video(kOut.shape, 0.4f); };
    o.max_videos = 4;
    const EvalReport r = evaluate(flat, kOut, ds, o);
    CHECK(r.n_failed == 4);
    CHECK(r.n_videos == 0);
  }
  SUBCASE("report JSON round trip") {
    const EvalReport back = eval_report_from_json(eval_report_to_json(r3));
    CHECK(eval_report_to_json(back) == eval_report_to_json(r3));
    const std::string table = eval_report_table(r3);
    CHECK(std::count(table.begin(), table.end(), '\n') == 25);
    CHECK(summary_row(r3, "oracle").find("oracle\tgen\t3\t24") == 0);
  }
  SUBCASE("wrong output shape") {
    const VideoGenerator bad = [](const Video&, double, Rng&) { return Video(8, 16, 16); };
    CHECK_THROWS_AS(evaluate(bad, kOut, ds, o), ValidationError);
  }
  o.k = 0;
  CHECK_THROWS_AS(evaluate(oracle, kOut, ds, o), ValidationError);
}

TEST_CASE("rebalance_dataset") {
  TempDir dir("rebalance");
  RebalanceOptions o;
  o.bin_width = 0.1;
  o.ef_min = 0.1;
  o.ef_max = 0.9;
  o.target_per_bin = 3;
  o.seed = 4;
  const VideoGenerator oracle = [](const Video&, double lambda, Rng& rng) { return oracle_video(lambda, rng); };

  DataGenConfig cfg;
  cfg.height = 32;
  cfg.width = 32;
  cfg.fps = 8;
  cfg.duration_s = 2.0;
  cfg.speckle.enabled = false;
  cfg.n_val = cfg.n_test = 0;

  SUBCASE("skewed input fills every bin to the target") {
    cfg.n_train = 30;
    cfg.ef_distribution = EfDistribution::Skewed;
    cfg.seed = 12;
    generate_dataset(cfg, dir.path / "src");
    const Dataset src = Dataset::open(dir.path / "src");
    const RebalanceReport r = rebalance_dataset(oracle, kOut, src, o, dir.path / "out");
    CHECK(r.shortfall == 0);
    const Dataset out = Dataset::open(dir.path / "out");
    std::vector<int> hist(o.bins(), 0);
    std::size_t real = 0;
    for (const auto& e : out.manifest().entries) {
      const int b = ef_bin(e.ef_true, o);
      REQUIRE(b >= 0);
      ++hist[b];
      real += e.provenance == "real";
    }
    for (int h : hist) CHECK(std::abs(h - o.target_per_bin) <= 1);
    CHECK(real == r.n_real);
    CHECK(out.size() == r.n_real + r.n_synthetic);
    CHECK(r.n_synthetic > 0);
    CHECK(r.real_fraction() == doctest::Approx(double(real) / out.size()));
    MESSAGE("real fraction " << r.real_fraction());
    for (std::size_t i = 0; i < out.size(); ++i) CHECK(out.load(i).video.height == 32);

    // same seed, same bytes
    rebalance_dataset(oracle, kOut, src, o, dir.path / "again");
    const Dataset again = Dataset::open(dir.path / "again");
    REQUIRE(again.size() == out.size());
    for (std::size_t i = 0; i < out.size(); ++i) CHECK(again.entry(i).checksum == out.entry(i).checksum);
  }
  SUBCASE("already balanced input gains nothing") {
    VideoSample s;
    std::vector<VideoSample> samples;
    Rng rng(1);
    for (int b = 0; b < o.bins(); ++b)
      for (int k = 0; k < o.target_per_bin; ++k) {
        SynthParams p = random_params(cfg, rng);
        p.ef = o.ef_min + (b + 0.5) * o.bin_width;
        samples.push_back(synth_video(p));
      }
    write_dataset(samples, std::vector<std::string>(samples.size(), "train"), dir.path / "bal",
                  cfg.cone_angle_deg * M_PI / 180.0);
    const Dataset src = Dataset::open(dir.path / "bal");
    int calls = 0;
    const VideoGenerator counting = [&](const Video& f, double l, Rng& r) {
      ++calls;
      return oracle(f, l, r);
    };
    const RebalanceReport r = rebalance_dataset(counting, kOut, src, o, dir.path / "out");
    CHECK(r.n_synthetic == 0);
    CHECK(calls == 0);
    CHECK(r.n_real == samples.size());
    CHECK(r.real_fraction() == 1.0);
  }
  SUBCASE("failing generator reports a shortfall") {
    cfg.n_train = 6;
    cfg.ef_min = cfg.ef_max = 0.6;
    cfg.seed = 2;
    generate_dataset(cfg, dir.path / "src");
    const Dataset src = Dataset::open(dir.path / "src");
    const VideoGenerator flat = [](const Video&, double, Rng&) { return Video(kOut.shape, 0.4f); };
    o.max_attempts = 2;
    const RebalanceReport r = rebalance_dataset(flat, kOut, src, o, dir.path / "out");
    CHECK(r.n_real == 3);
    CHECK(r.n_real_dropped == 3);
    CHECK(r.n_synthetic == 0);
    CHECK(r.shortfall == 7 * 3);
    CHECK(r.bins_short == 7);
    CHECK(r.attempts == 2 * 21);
  }
  SUBCASE("options") {
    o.bin_width = 0.03;
    CHECK_THROWS_AS(o.validate(), ValidationError);
    o.bin_width = 0.01;
    o.ef_min = 0.1;
    o.ef_max = 0.9;
    CHECK(o.bins() == 80);
    CHECK(ef_bin(0.1, o) == 0);
    CHECK(ef_bin(0.899999, o) == 79);
    CHECK(ef_bin(0.9, o) == -1);
    CHECK(ef_bin(0.35, o) == 25);
  }
}

TEST_CASE("EF regressor") {
  RegressorOptions o;
  o.input = {4, 16, 16, 8.0};
  o.channels = 2;
  o.hidden = 4;
  const EfRegressor net(o);
  Rng rng(1);
  const std::vector<float> p = net.init_params(rng);
  REQUIRE(p.size() == net.num_params());
  Video clip(4, 16, 16);
  for (auto& x : clip.data) x = static_cast<float>(rng.uniform(-1, 1));

  SUBCASE("gradient matches finite differences") {
    std::vector<float> g(p.size(), 0.0f);
    net.loss_and_grad(p, clip, 0.3, g);
    Rng pick(5);
    int checked = 0;
    for (int t = 0; t < 40; ++t) {
      const std::size_t i = pick.uniform_index(p.size());
      std::vector<float> q = p;
      const float h = 1e-2f;
      q[i] = p[i] + h;
      const double up = std::pow(net.predict(q, clip) - 0.3, 2);
      q[i] = p[i] - h;
      const double dn = std::pow(net.predict(q, clip) - 0.3, 2);
      const double fd = (up - dn) / (2 * h);
      if (std::abs(fd) < 1e-4 && std::abs(g[i]) < 1e-4) continue;
      CHECK(g[i] == doctest::Approx(fd).epsilon(0.05));
      ++checked;
    }
    CHECK(checked > 10);
  }
  SUBCASE("learns EF from a handful of videos") {
    TempDir dir("regressor");
    DataGenConfig cfg;
    cfg.height = cfg.width = 16;
    cfg.duration_s = 2.0;
    cfg.n_train = 24;
    cfg.n_val = 8;
    cfg.n_test = 0;
    cfg.seed = 3;
    generate_dataset(cfg, dir.path);
    const Dataset ds = Dataset::open(dir.path);
    RegressorOptions ro;
    ro.input = {16, 16, 16, 8.0};
    ro.epochs = 15;
    ro.batch_size = 4;
    const RegressorResult r = train_and_validate_regressor(ds, "train", ds, "val", ro);
    CHECK(r.n_train == 24);
    CHECK(r.real_fraction == 1.0);
    CHECK(r.epoch_loss.back() < r.epoch_loss.front());
    CHECK(std::isfinite(r.val.mae));
    const RegressorResult again = train_and_validate_regressor(ds, "train", ds, "val", ro);
    CHECK(again.val.mae == r.val.mae);
  }
  CHECK_THROWS_AS(net.predict(p, Video(4, 8, 8)), ValidationError);
  o.input.height = 12;
  CHECK_THROWS_AS(o.validate(), ValidationError);
}
