// SPDX-License-Identifier: Apache-2.0
// echoedm: data generation, training, sampling, evaluation and rebalancing.

#include <omp.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "echoedm/cascade.hpp"
#include "echoedm/config.hpp"
#include "echoedm/error.hpp"
#include "echoedm/evalmetrics.hpp"
#include "echoedm/gif.hpp"
#include "echoedm/oracle.hpp"
#include "echoedm/synthdata.hpp"
#include "echoedm/trainer.hpp"
#include "json.hpp"
#include "run_record.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace echoedm::cli {
namespace {

std::vector<std::string> g_argv;
/// Primary output of the running command; an error marker is written next
/// to it when the command fails after creating it.
fs::path g_output;
bool g_output_is_dir = false;

void claim_output(const fs::path& p, bool is_dir) {
  g_output = p;
  g_output_is_dir = is_dir;
  std::error_code ec;
  fs::remove(is_dir ? p / "FAILED" : fs::path(p.string() + ".FAILED"), ec);
}

void write_failure_marker(const std::string& what) {
  if (g_output.empty()) return;
  std::error_code ec;
  if (!fs::exists(g_output, ec)) return;
  const fs::path marker = g_output_is_dir ? g_output / "FAILED" : fs::path(g_output.string() + ".FAILED");
  std::ofstream(marker) << what << '\n';
}

fs::path record_path_for_file(const fs::path& p) { return p.string() + ".run.json"; }

void print_warnings(const std::vector<std::string>& ws) {
  for (const auto& w : ws) std::cerr << "warning: " << w << '\n';
}

CascadeConfig load_cascade_checked(const std::string& name) {
  CascadeConfig cc = load_cascade(name);
  print_warnings(cc.warnings());
  return cc;
}

void check_checkpoint_count(const CascadeConfig& cc, const std::vector<std::string>& ckpts) {
  if (ckpts.size() != cc.stages.size())
    throw ValidationError("cascade " + cc.name + " has " + std::to_string(cc.stages.size()) +
                          " stages but " + std::to_string(ckpts.size()) + " checkpoints were given");
}

std::vector<fs::path> to_paths(const std::vector<std::string>& v) { return {v.begin(), v.end()}; }

/// 8-bit binary or ASCII PGM, returned in [0, 1].
Video read_pgm(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  std::string magic;
  in >> magic;
  if (magic != "P5" && magic != "P2") throw IoError(p.string() + ": not a PGM file");
  auto next_int = [&]() {
    while (true) {
      in >> std::ws;
      if (in.peek() == '#') {
        std::string line;
        std::getline(in, line);
        continue;
      }
      int v = -1;
      if (!(in >> v)) throw IoError(p.string() + ": malformed PGM header");
      return v;
    }
  };
  const int w = next_int(), h = next_int(), maxv = next_int();
  if (w < 1 || h < 1 || maxv < 1 || maxv > 255) throw IoError(p.string() + ": unsupported PGM");
  Video v(1, h, w);
  if (magic == "P5") {
    in.get();
    std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h);
    if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
      throw IoError(p.string() + ": truncated PGM");
    for (std::size_t i = 0; i < buf.size(); ++i) v.data[i] = static_cast<float>(buf[i]) / maxv;
  } else {
    for (float& x : v.data) x = static_cast<float>(next_int()) / maxv;
  }
  return v;
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<int> n_train, n_val, n_test;
  std::vector<double> ef_range;
  std::string distribution;
  std::optional<bool> speckle;
};

int cmd_gen_data(const GenDataArgs& a) {
  DataGenConfig cfg;
  if (!a.config.empty()) cfg = data_config_from_json(read_text_file(resolve_config_path(a.config)));
  if (a.seed) cfg.seed = *a.seed;
  if (a.n_train) cfg.n_train = *a.n_train;
  if (a.n_val) cfg.n_val = *a.n_val;
  if (a.n_test) cfg.n_test = *a.n_test;
  if (!a.ef_range.empty()) {
    cfg.ef_min = a.ef_range[0];
    cfg.ef_max = a.ef_range[1];
  }
  if (!a.distribution.empty()) cfg.ef_distribution = ef_distribution_from_string(a.distribution);
  if (a.speckle) cfg.speckle.enabled = *a.speckle;
  cfg.validate();

  const fs::path out = a.out;
  claim_output(out, true);
  RunRecord rec(g_argv, "gen-data");
  rec.set_seed(cfg.seed);
  rec.set_config(json::parse(data_config_to_json(cfg)));
  const DatasetManifest m = generate_dataset(cfg, out);
  rec.add_output(out / "manifest.json");
  rec.extra()["n_entries"] = m.entries.size();
  rec.extra()["sigma_q"] = m.sigma_q;
  rec.write(out / "run_record.json");
  std::printf("wrote %zu videos (train %zu, val %zu, test %zu) to %s, sigma_q %.6f\n", m.entries.size(),
              m.split_indices("train").size(), m.split_indices("val").size(), m.split_indices("test").size(),
              out.string().c_str(), m.sigma_q);
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string cascade;
  int stage = 0;
  std::string data;
  std::string split = "train";
  std::string out;
  std::string config;
  std::optional<int> steps, batch, accum;
  std::optional<double> lr, ema_decay;
  std::optional<std::uint64_t> seed;
  std::string resume;
  std::string log;
  int checkpoint_every = 0;
  int max_videos = 0;
};

int cmd_train(const TrainArgs& a) {
  const CascadeConfig cc = load_cascade_checked(a.cascade);
  const StageSpec spec = stage_spec(cc, a.stage);
  const StageConfig& st = cc.stages[a.stage];

  TrainConfig tc;
  if (!a.config.empty()) tc = train_config_from_json(read_text_file(resolve_config_path(a.config)));
  if (a.steps) tc.max_steps = *a.steps;
  if (a.batch) tc.batch_size = *a.batch;
  if (a.accum) tc.grad_accum = *a.accum;
  if (a.lr) tc.learning_rate = *a.lr;
  if (a.ema_decay) tc.ema_decay = *a.ema_decay;
  if (a.seed) tc.seed = *a.seed;

  std::optional<TrainState> resumed;
  if (!a.resume.empty()) {
    resumed = load_checkpoint(a.resume, st.net);
    if (a.seed && *a.seed != resumed->seed)
      throw ValidationError("--seed " + std::to_string(*a.seed) + " differs from the checkpoint seed " +
                            std::to_string(resumed->seed));
    tc.seed = resumed->seed;
    if (std::abs(resumed->ema.decay - tc.ema_decay) > 0.0 && !a.ema_decay) tc.ema_decay = resumed->ema.decay;
    if (resumed->step > tc.max_steps)
      throw ValidationError("checkpoint is at step " + std::to_string(resumed->step) + ", beyond --steps " +
                            std::to_string(tc.max_steps));
  }
  print_warnings(tc.validate());

  const Dataset ds = Dataset::open(a.data);
  const auto& m = ds.manifest();
  if (m.height % spec.height || m.width % spec.width)
    throw ValidationError("dataset " + std::to_string(m.height) + "x" + std::to_string(m.width) +
                          " cannot feed stage " + std::to_string(a.stage) + " (" + to_string(spec.mode) +
                          ") at " + std::to_string(spec.height) + "x" + std::to_string(spec.width));
  const StageData data(ds, a.split, spec, a.max_videos);

  const UNet<float> net(st.net);
  TrainState state = resumed ? std::move(*resumed) : TrainState::initialize(net, m.sigma_q, tc.seed, tc.ema_decay);
  if (state.sigma_q != m.sigma_q)
    std::cerr << "warning: checkpoint sigma_q " << state.sigma_q << " differs from the dataset's " << m.sigma_q
              << '\n';

  const fs::path out = a.out;
  claim_output(out, false);
  const fs::path log_path = a.log.empty() ? fs::path(out.string() + ".log") : fs::path(a.log);
  std::ofstream log(log_path, resumed ? std::ios::app : std::ios::trunc);
  if (!log) throw IoError("cannot write " + log_path.string());

  RunRecord rec(g_argv, "train");
  rec.set_seed(tc.seed);
  rec.set_config({{"cascade", json::parse(cascade_to_json(cc))},
                  {"stage", a.stage},
                  {"train", json::parse(train_config_to_json(tc))},
                  {"data", a.data},
                  {"split", a.split},
                  {"max_videos", a.max_videos},
                  {"resume", a.resume}});
  std::printf("training stage %d (%s) of %s: %zu params, %zu videos, steps %lld -> %d\n", a.stage,
              to_string(spec.mode).c_str(), cc.name.c_str(), state.params.size(), data.size(),
              static_cast<long long>(state.step), tc.max_steps);
  std::fflush(stdout);

  TrainRunOptions opts;
  opts.checkpoint = out;
  opts.checkpoint_every = a.checkpoint_every;
  opts.log = &log;
  train(net, state, data, tc, TrainingSigmaDist{}, opts);
  if (state.step == 0) save_checkpoint(out, state);

  rec.add_output(out);
  rec.add_output(log_path);
  rec.extra()["final_step"] = state.step;
  rec.write(record_path_for_file(out));
  std::printf("wrote %s\n", out.string().c_str());
  return 0;
}

// ---------------------------------------------------------------------------

struct SampleArgs {
  std::string cascade;
  std::vector<std::string> checkpoints;
  double ef = -1.0;
  std::string ref_frame;
  std::string data;
  std::string split = "test";
  int ref_frame_index = 0;
  std::uint64_t seed = 0;
  std::string out;
  std::string gif;
  int gif_scale = 4;
};

int cmd_sample(const SampleArgs& a) {
  if (!(a.ef >= 0.0 && a.ef <= 1.0)) throw ValidationError("--ef must lie in [0, 1]");
  const CascadeConfig cc = load_cascade_checked(a.cascade);
  check_checkpoint_count(cc, a.checkpoints);

  Video ref;
  double cone_angle = DataGenConfig{}.cone_angle_deg * M_PI / 180.0;
  json ref_desc;
  bool is_index = !a.ref_frame.empty() && a.ref_frame.find_first_not_of("0123456789") == std::string::npos;
  if (is_index) {
    if (a.data.empty()) throw ValidationError("--ref-frame given as an index needs --data");
    const Dataset ds = Dataset::open(a.data);
    const auto idx = ds.manifest().split_indices(a.split);
    const std::size_t k = std::stoul(a.ref_frame);
    if (k >= idx.size())
      throw ValidationError("--ref-frame " + a.ref_frame + " exceeds the " + std::to_string(idx.size()) +
                            " videos of split '" + a.split + "'");
    const VideoSample s = ds.load(idx[k]);
    if (a.ref_frame_index < 0 || a.ref_frame_index >= s.video.frames)
      throw ValidationError("--ref-frame-index out of range");
    ref = extract_frame(s.video, a.ref_frame_index);
    cone_angle = ds.manifest().cone_angle;
    ref_desc = {{"dataset", a.data}, {"split", a.split}, {"index", k}, {"id", ds.entry(idx[k]).id},
                {"frame", a.ref_frame_index}};
  } else if (!a.ref_frame.empty()) {
    ref = read_pgm(a.ref_frame);
    ref_desc = {{"file", a.ref_frame}};
  } else {
    throw ValidationError("--ref-frame is required");
  }

  const CascadeModels models = CascadeModels::load(cc, to_paths(a.checkpoints));
  const fs::path out = a.out;
  claim_output(out, true);
  RunRecord rec(g_argv, "sample");
  rec.set_seed(a.seed);
  rec.set_config({{"cascade", json::parse(cascade_to_json(cc))},
                  {"checkpoints", a.checkpoints},
                  {"ef", a.ef},
                  {"ref_frame", ref_desc}});
  rec.extra()["lambda_c"] = a.ef;

  Rng rng(a.seed);
  CascadeTrace trace;
  const Video v = run_cascade(cc, models, to_model_range(ref), a.ef, rng, &trace);
  const StageConfig& last = cc.stages.back();
  VideoSample s;
  s.video = to_disk_range(v);
  s.ef_true = a.ef;
  s.fps = last.fps;
  DatasetWriter w(out, s.video.height, s.video.width, cone_angle);
  w.add(s, "sample", a.seed, "synthetic");
  w.finish(json{{"command", "sample"}, {"lambda_c", a.ef}, {"seed", a.seed}}.dump());
  rec.add_output(out / "manifest.json");
  const double ef_hat = estimate_ef(s.video, cone_mask(s.video.height, s.video.width, cone_angle)).value_or(-1.0);
  rec.extra()["ef_estimate"] = ef_hat;
  rec.extra()["evaluations"] = trace.total();
  if (!a.gif.empty()) {
    write_gif(a.gif, s.video, last.fps, a.gif_scale);
    rec.add_output(a.gif);
  }
  rec.write(out / "run_record.json");
  std::printf("sampled %s at lambda_c %.4f with %d evaluations, estimated EF %.4f\n", v.shape().str().c_str(),
              a.ef, trace.total(), ef_hat);
  return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string cascade;
  std::vector<std::string> checkpoints;
  std::string data;
  std::string split = "test";
  std::string task = "gen";
  int k = 3;
  int n = 0;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_eval(const EvalArgs& a) {
  const CascadeConfig cc = load_cascade_checked(a.cascade);
  check_checkpoint_count(cc, a.checkpoints);
  EvalOptions opts;
  opts.task = eval_task_from_string(a.task);
  opts.k = a.k;
  opts.max_videos = a.n;
  opts.seed = a.seed;
  opts.split = a.split;
  opts.validate();
  const Dataset ds = Dataset::open(a.data);
  const CascadeModels models = CascadeModels::load(cc, to_paths(a.checkpoints));

  const fs::path out = a.out;
  claim_output(out, true);
  RunRecord rec(g_argv, "eval");
  rec.set_seed(a.seed);
  rec.set_config({{"cascade", json::parse(cascade_to_json(cc))},
                  {"checkpoints", a.checkpoints},
                  {"data", a.data},
                  {"eval", json::parse(eval_options_to_json(opts))}});
  const EvalReport r = evaluate(cc, models, ds, opts, &std::cerr);
  fs::create_directories(out);
  write_text_file(out / "report.json", eval_report_to_json(r));
  write_text_file(out / "per_video.tsv", eval_report_table(r));
  rec.add_output(out / "report.json");
  rec.add_output(out / "per_video.tsv");
  rec.extra()["summary"] = json::parse(eval_report_to_json(r)).at("metrics");
  rec.write(out / "run_record.json");
  std::printf("%s\n%s\n", summary_header().c_str(), summary_row(r, cc.name).c_str());
  return 0;
}

// ---------------------------------------------------------------------------

struct OracleArgs {
  OracleCheckOptions o;
  std::string out;
};

int cmd_oracle_check(const OracleArgs& a) {
  if (a.o.n_steps < 1 || a.o.samples < 2) throw ValidationError("--n-steps >= 1 and --samples >= 2 required");
  if (a.o.s_churn < 0.0) throw ValidationError("--s-churn must be >= 0");
  const OracleCheckReport r = run_oracle_check(a.o);
  json j = {{"n_steps", a.o.n_steps}, {"s_churn", a.o.s_churn}, {"samples", a.o.samples},
            {"mu", a.o.mu},           {"s", a.o.s},             {"seed", a.o.seed},
            {"mean", r.mean},         {"std", r.std},           {"mean_err", r.mean_err},
            {"std_rel_err", r.std_rel_err}, {"ks", r.ks},       {"evaluations", r.evaluations},
            {"tolerances", {{"mean", a.o.mean_tol}, {"std_rel", a.o.std_rel_tol}, {"ks", a.o.ks_tol}}},
            {"pass", r.pass},         {"diagnostics", r.diagnostics}};
  std::printf("oracle-check N=%d S_churn=%g samples=%d: mean %.5f (err %.5f) std %.5f (rel err %.4f) "
              "KS %.4f evals/sample %ld -> %s\n",
              a.o.n_steps, a.o.s_churn, a.o.samples, r.mean, r.mean_err, r.std, r.std_rel_err, r.ks,
              r.evaluations, r.pass ? "PASS" : "FAIL");
  if (!r.pass) std::printf("%s\n", r.diagnostics.c_str());
  if (!a.out.empty()) {
    const fs::path out = a.out;
    claim_output(out, false);
    write_text_file(out, j.dump(2) + "\n");
    RunRecord rec(g_argv, "oracle-check");
    rec.set_seed(a.o.seed);
    rec.set_config({{"n_steps", a.o.n_steps}, {"s_churn", a.o.s_churn}, {"samples", a.o.samples},
                    {"mu", a.o.mu}, {"s", a.o.s}});
    rec.add_output(out);
    rec.write(record_path_for_file(out));
  }
  return r.pass ? 0 : 2;
}

// ---------------------------------------------------------------------------

struct RebalanceArgs {
  std::string cascade;
  std::vector<std::string> checkpoints;
  std::string data;
  std::string split = "train";
  double bin_width = 0.01;
  int target = 10;
  std::vector<double> ef_range{0.10, 0.90};
  int max_attempts = 10;
  double accept_tol = 0.10;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_rebalance(const RebalanceArgs& a) {
  const CascadeConfig cc = load_cascade_checked(a.cascade);
  check_checkpoint_count(cc, a.checkpoints);
  RebalanceOptions opts;
  opts.split = a.split;
  opts.bin_width = a.bin_width;
  opts.target_per_bin = a.target;
  opts.ef_min = a.ef_range[0];
  opts.ef_max = a.ef_range[1];
  opts.max_attempts = a.max_attempts;
  opts.accept_tol = a.accept_tol;
  opts.seed = a.seed;
  opts.validate();
  const Dataset ds = Dataset::open(a.data);
  const CascadeModels models = CascadeModels::load(cc, to_paths(a.checkpoints));
  const VideoGenerator gen = cascade_generator(cc, models);

  const fs::path out = a.out;
  claim_output(out, true);
  RunRecord rec(g_argv, "rebalance");
  rec.set_seed(a.seed);
  rec.set_config({{"cascade", json::parse(cascade_to_json(cc))},
                  {"checkpoints", a.checkpoints},
                  {"data", a.data},
                  {"rebalance", json::parse(rebalance_options_to_json(opts))}});
  const RebalanceReport r = rebalance_dataset(gen, cascade_output_info(cc), ds, opts, out, &std::cerr);
  rec.add_output(out / "manifest.json");
  rec.extra()["report"] = json::parse(rebalance_report_to_json(r));
  rec.write(out / "run_record.json");
  std::printf("rebalanced %zu real + %zu synthetic = %zu videos (real %.1f%%), shortfall %d in %d bins\n",
              r.n_real, r.n_synthetic, r.n_real + r.n_synthetic, 100.0 * r.real_fraction(), r.shortfall,
              r.bins_short);
  return 0;
}

// ---------------------------------------------------------------------------

struct RegressArgs {
  std::string train_data;
  std::string train_split = "train";
  std::string val_data;
  std::string val_split = "val";
  RegressorOptions o;
  std::string out;
};

int cmd_regress(const RegressArgs& a) {
  a.o.validate();
  const Dataset train_ds = Dataset::open(a.train_data);
  const Dataset val_ds = a.val_data.empty() ? Dataset::open(a.train_data) : Dataset::open(a.val_data);
  const fs::path out = a.out;
  claim_output(out, false);
  RunRecord rec(g_argv, "regress");
  rec.set_seed(a.o.seed);
  rec.set_config({{"train_data", a.train_data}, {"train_split", a.train_split}, {"val_data", a.val_data},
                  {"val_split", a.val_split}, {"regressor", json::parse(regressor_options_to_json(a.o))}});
  const RegressorResult r = train_and_validate_regressor(train_ds, a.train_split, val_ds, a.val_split, a.o);
  write_text_file(out, regressor_result_to_json(r) + "\n");
  rec.add_output(out);
  rec.write(record_path_for_file(out));
  std::printf("regressor on %d videos (real %.1f%%): val R2 %.4f MAE %.4f RMSE %.4f\n", r.n_train,
              100.0 * r.real_fraction, r.val.r2, r.val.mae, r.val.rmse);
  return 0;
}

}  // namespace
}  // namespace echoedm::cli

int main(int argc, char** argv) {
  using namespace echoedm;
  using namespace echoedm::cli;
  g_argv.assign(argv, argv + argc);

  CLI::App app{"Cascaded EDM video synthesis on synthetic echo data"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "Worker threads (1 is bit-reproducible)")->check(CLI::NonNegativeNumber);

  GenDataArgs gd;
  auto* c_gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  c_gen->add_option("--config", gd.config, "Data config JSON (name or path)");
  c_gen->add_option("--out", gd.out, "Output directory")->required();
  c_gen->add_option("--seed", gd.seed);
  c_gen->add_option("--n-train", gd.n_train);
  c_gen->add_option("--n-val", gd.n_val);
  c_gen->add_option("--n-test", gd.n_test);
  c_gen->add_option("--ef-range", gd.ef_range)->expected(2);
  c_gen->add_option("--distribution", gd.distribution)->check(CLI::IsMember({"uniform", "skewed"}));
  c_gen->add_flag("--speckle,!--no-speckle", gd.speckle);

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "Train one cascade stage");
  c_train->add_option("--cascade", tr.cascade, "Preset name or cascade JSON")->required();
  c_train->add_option("--stage", tr.stage)->required();
  c_train->add_option("--data", tr.data)->required();
  c_train->add_option("--split", tr.split);
  c_train->add_option("--out", tr.out, "Checkpoint path")->required();
  c_train->add_option("--config", tr.config, "Train config JSON");
  c_train->add_option("--steps", tr.steps, "Total optimizer steps");
  c_train->add_option("--lr", tr.lr);
  c_train->add_option("--batch", tr.batch);
  c_train->add_option("--accum", tr.accum);
  c_train->add_option("--ema-decay", tr.ema_decay);
  c_train->add_option("--seed", tr.seed);
  c_train->add_option("--resume", tr.resume, "Checkpoint to continue from");
  c_train->add_option("--log", tr.log, "Loss log (default <out>.log)");
  c_train->add_option("--checkpoint-every", tr.checkpoint_every);
  c_train->add_option("--max-videos", tr.max_videos);

  SampleArgs sa;
  auto* c_sample = app.add_subcommand("sample", "Generate one video with a trained cascade");
  c_sample->add_option("--cascade", sa.cascade)->required();
  c_sample->add_option("--checkpoints", sa.checkpoints, "One per stage")->required();
  c_sample->add_option("--ef", sa.ef, "lambda_c in [0, 1]")->required();
  c_sample->add_option("--ref-frame", sa.ref_frame, "Dataset index (with --data) or PGM file")->required();
  c_sample->add_option("--data", sa.data);
  c_sample->add_option("--split", sa.split);
  c_sample->add_option("--ref-frame-index", sa.ref_frame_index, "Frame of the dataset video");
  c_sample->add_option("--seed", sa.seed);
  c_sample->add_option("--out", sa.out, "Output directory")->required();
  c_sample->add_option("--gif", sa.gif, "Also write an animated GIF");
  c_sample->add_option("--gif-scale", sa.gif_scale);

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "Best-of-k EF evaluation");
  c_eval->add_option("--cascade", ev.cascade)->required();
  c_eval->add_option("--checkpoints", ev.checkpoints)->required();
  c_eval->add_option("--data", ev.data)->required();
  c_eval->add_option("--split", ev.split);
  c_eval->add_option("--task", ev.task)->check(CLI::IsMember({"gen", "rec"}));
  c_eval->add_option("--k", ev.k);
  c_eval->add_option("--n", ev.n, "Videos to evaluate (0: all)");
  c_eval->add_option("--seed", ev.seed);
  c_eval->add_option("--out", ev.out)->required();

  OracleArgs oc;
  auto* c_oracle = app.add_subcommand("oracle-check", "Sampler check against the Gaussian oracle");
  c_oracle->add_option("--n-steps", oc.o.n_steps);
  c_oracle->add_option("--s-churn", oc.o.s_churn);
  c_oracle->add_option("--samples", oc.o.samples);
  c_oracle->add_option("--mu", oc.o.mu);
  c_oracle->add_option("--s", oc.o.s);
  c_oracle->add_option("--seed", oc.o.seed);
  c_oracle->add_option("--mean-tol", oc.o.mean_tol);
  c_oracle->add_option("--std-rel-tol", oc.o.std_rel_tol);
  c_oracle->add_option("--ks-tol", oc.o.ks_tol);
  c_oracle->add_option("--out", oc.out, "JSON report");

  RebalanceArgs rb;
  auto* c_reb = app.add_subcommand("rebalance", "Fill sparse EF bins with generated videos");
  c_reb->add_option("--cascade", rb.cascade)->required();
  c_reb->add_option("--checkpoints", rb.checkpoints)->required();
  c_reb->add_option("--data", rb.data)->required();
  c_reb->add_option("--split", rb.split);
  c_reb->add_option("--bin-width", rb.bin_width);
  c_reb->add_option("--target-per-bin", rb.target);
  c_reb->add_option("--ef-range", rb.ef_range)->expected(2);
  c_reb->add_option("--max-attempts", rb.max_attempts);
  c_reb->add_option("--accept-tol", rb.accept_tol, "Largest |EF_hat - lambda_c| kept (<= 0: any)");
  c_reb->add_option("--seed", rb.seed);
  c_reb->add_option("--out", rb.out)->required();

  RegressArgs rg;
  auto* c_reg = app.add_subcommand("regress", "Train the EF regressor and validate it");
  c_reg->add_option("--train-data", rg.train_data)->required();
  c_reg->add_option("--train-split", rg.train_split);
  c_reg->add_option("--val-data", rg.val_data);
  c_reg->add_option("--val-split", rg.val_split);
  c_reg->add_option("--epochs", rg.o.epochs);
  c_reg->add_option("--lr", rg.o.learning_rate);
  c_reg->add_option("--batch", rg.o.batch_size);
  c_reg->add_option("--seed", rg.o.seed);
  c_reg->add_option("--out", rg.out, "JSON result")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  if (threads > 0) omp_set_num_threads(threads);

  try {
    if (*c_gen) return cmd_gen_data(gd);
    if (*c_train) return cmd_train(tr);
    if (*c_sample) return cmd_sample(sa);
    if (*c_eval) return cmd_eval(ev);
    if (*c_oracle) return cmd_oracle_check(oc);
    if (*c_reb) return cmd_rebalance(rb);
    if (*c_reg) return cmd_regress(rg);
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    write_failure_marker(e.what());
    return 1;
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical error: %s\n", e.what());
    write_failure_marker(e.what());
    return 2;
  } catch (const IoError& e) {
    std::fprintf(stderr, "i/o error: %s\n", e.what());
    write_failure_marker(e.what());
    return 3;
  } catch (const std::filesystem::filesystem_error& e) {
    std::fprintf(stderr, "i/o error: %s\n", e.what());
    write_failure_marker(e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    write_failure_marker(e.what());
    return 1;
  }
  return 1;
}
