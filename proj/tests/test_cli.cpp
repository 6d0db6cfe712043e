// SPDX-License-Identifier: Apache-2.0
#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "echoedm/evalmetrics.hpp"
#include "echoedm/synthdata.hpp"
#include "echoedm/trainer.hpp"
#include "json.hpp"
#include "test_util.hpp"

using namespace echoedm;
using echoedm::testing::TempDir;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const char* kMiniCascade = R"({
  "name": "mini",
  "stages": [
    {"mode": "Base", "height": 8, "width": 8, "frames": 4, "fps": 4.0, "steps": 4, "s_churn": 0.0,
     "net": {"dims": 8, "layers": [1, 1], "bottleneck_attention": true, "mem_opti": false}},
    {"mode": "TSSR", "height": 16, "width": 16, "frames": 8, "fps": 8.0, "steps": 3, "s_churn": 10.0,
     "net": {"dims": 8, "layers": [1, 1], "bottleneck_attention": true, "mem_opti": false}}
  ]
})";

struct Result {
  int code;
  std::string output;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Result run(const fs::path& cwd, const std::string& args) {
  const std::string cmd = "cd '" + cwd.string() + "' && '" ECHOEDM_CLI_PATH "' " + args + " > cli_out.txt 2>&1";
  const int st = std::system(cmd.c_str());
  return {WIFEXITED(st) ? WEXITSTATUS(st) : -1, slurp(cwd / "cli_out.txt")};
}

/// Small dataset, mini cascade config and two briefly trained checkpoints.
struct Workspace {
  TempDir dir{"cli"};
  Workspace() {
    std::ofstream(dir.path / "mini.json") << kMiniCascade;
    std::ofstream(dir.path / "data.json")
        << R"({"height": 16, "width": 16, "duration_s": 2.0, "n_train": 6, "n_val": 2, "n_test": 3})";
    REQUIRE(run(dir.path, "gen-data --config data.json --out data --seed 3").code == 0);
    REQUIRE(run(dir.path, "train --cascade mini.json --stage 0 --data data --out s0.ckpt --steps 2 --seed 1").code == 0);
    REQUIRE(run(dir.path, "train --cascade mini.json --stage 1 --data data --out s1.ckpt --steps 2 --seed 2").code == 0);
  }
  const fs::path& path() const { return dir.path; }
};

Workspace& workspace() {
  static Workspace w;
  return w;
}

}  // namespace

TEST_CASE("gen-data") {
  const fs::path d = workspace().path();
  SUBCASE("splits, run record and determinism") {
    REQUIRE(run(d, "gen-data --config data.json --out again --seed 3").code == 0);
    const Dataset a = Dataset::open(d / "data"), b = Dataset::open(d / "again");
    CHECK(a.manifest().split_indices("train").size() == 6);
    CHECK(a.manifest().split_indices("val").size() == 2);
    CHECK(a.manifest().split_indices("test").size() == 3);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a.entry(i).checksum == b.entry(i).checksum);
    const json rec = json::parse(slurp(d / "data" / "run_record.json"));
    CHECK(rec.at("seed") == 3);
    CHECK(rec.at("command") == "gen-data");
    CHECK(rec.at("command_line").size() == 8);
    CHECK(rec.at("config").at("n_train") == 6);
    CHECK(rec.at("config_hash").get<std::string>().size() == 8);
    CHECK(!rec.at("code_version").get<std::string>().empty());
    CHECK(rec.contains("started_utc"));
    CHECK(rec.at("outputs").size() == 1);
  }
  SUBCASE("default toy sizes") {
    std::ofstream(d / "tiny_defaults.json") << R"({"height": 8, "width": 8, "duration_s": 1.5,
      "speckle": {"enabled": false}})";
    REQUIRE(run(d, "gen-data --config tiny_defaults.json --out defaults").code == 0);
    const Dataset ds = Dataset::open(d / "defaults");
    CHECK(ds.manifest().split_indices("train").size() == 2000);
    CHECK(ds.manifest().split_indices("val").size() == 300);
    CHECK(ds.manifest().split_indices("test").size() == 300);
    fs::remove_all(d / "defaults");
  }
  SUBCASE("degenerate EF range") {
    REQUIRE(run(d, "gen-data --config data.json --out fixed --ef-range 0.6 0.6").code == 0);
    const Dataset ds = Dataset::open(d / "fixed");
    for (const auto& e : ds.manifest().entries) CHECK(e.ef_true == 0.6);
  }
  SUBCASE("invalid config fields are listed") {
    std::ofstream(d / "bad.json") << R"({"n_trian": 3, "fps": "x"})";
    const Result r = run(d, "gen-data --config bad.json --out bad");
    CHECK(r.code == 1);
    CHECK(r.output.find("data.n_trian") != std::string::npos);
    CHECK(r.output.find("data.fps") != std::string::npos);
    CHECK_FALSE(fs::exists(d / "bad"));
  }
  SUBCASE("config found through the default directory") {
    fs::create_directories(d / "configs");
    std::ofstream(d / "configs" / "named.json") << R"({"height": 16, "width": 16, "duration_s": 2.0,
      "n_train": 1, "n_val": 0, "n_test": 0})";
    ::setenv("ECHOEDM_CONFIG_DIR", (d / "configs").c_str(), 1);
    const Result r = run(d, "gen-data --config named --out named");
    ::unsetenv("ECHOEDM_CONFIG_DIR");
    CHECK(r.code == 0);
    CHECK(Dataset::open(d / "named").size() == 1);
  }
  CHECK(run(d, "gen-data --config missing.json --out x").code == 3);
  CHECK(run(d, "gen-data --out x --bogus").code == 1);
}

TEST_CASE("train") {
  const fs::path d = workspace().path();
  SUBCASE("one log line per step") {
    REQUIRE(run(d, "train --cascade mini.json --stage 0 --data data --out t10.ckpt --steps 10 --seed 5").code == 0);
    std::ifstream log(d / "t10.ckpt.log");
    std::string line;
    int n = 0;
    while (std::getline(log, line)) {
      CHECK(parse_log_line(line).step == n + 1);
      ++n;
    }
    CHECK(n == 10);
    const json rec = json::parse(slurp(d / "t10.ckpt.run.json"));
    CHECK(rec.at("final_step") == 10);
    CHECK(rec.at("seed") == 5);

    SUBCASE("resume matches a straight run") {
      REQUIRE(run(d, "train --cascade mini.json --stage 0 --data data --out t5.ckpt --steps 5 --seed 5").code == 0);
      REQUIRE(run(d, "train --cascade mini.json --stage 0 --data data --out t5.ckpt --steps 10 --resume t5.ckpt")
                  .code == 0);
      CHECK(slurp(d / "t5.ckpt") == slurp(d / "t10.ckpt"));
    }
  }
  SUBCASE("guards") {
    const Result lr = run(d, "train --cascade mini.json --stage 0 --data data --out x.ckpt --steps 2 --lr -1");
    CHECK(lr.code == 1);
    CHECK(lr.output.find("learning") != std::string::npos);
    // a 16x16 dataset cannot feed a 24x24 stage
    std::string wide = kMiniCascade;
    const std::string from = "\"height\": 16, \"width\": 16";
    wide.replace(wide.find(from), from.size(), "\"height\": 24, \"width\": 24");
    std::ofstream(d / "wide.json") << wide;
    const Result geo = run(d, "train --cascade wide.json --stage 1 --data data --out x.ckpt --steps 2");
    CHECK(geo.code == 1);
    CHECK(geo.output.find("cannot feed stage 1") != std::string::npos);
    CHECK_FALSE(fs::exists(d / "x.ckpt"));
    CHECK(run(d, "train --cascade mini.json --stage 0 --data nowhere --out x.ckpt --steps 2").code == 3);
    CHECK(run(d, "train --cascade mini.json --stage 1 --data data --out x.ckpt --steps 4 --resume s0.ckpt").code ==
          1);
    CHECK(run(d, "train --cascade nosuch --stage 0 --data data --out x.ckpt").code == 3);
    CHECK(run(d, "train --cascade mini.json --stage 2 --data data --out x.ckpt").code == 1);
  }
}

TEST_CASE("sample") {
  const fs::path d = workspace().path();
  const std::string base = "sample --cascade mini.json --checkpoints s0.ckpt s1.ckpt --data data ";
  REQUIRE(run(d, base + "--ef 0.6 --ref-frame 1 --seed 4 --out smp_a --gif smp_a.gif").code == 0);
  REQUIRE(run(d, base + "--ef 0.6 --ref-frame 1 --seed 4 --out smp_b").code == 0);
  const Dataset a = Dataset::open(d / "smp_a"), b = Dataset::open(d / "smp_b");
  REQUIRE(a.size() == 1);
  CHECK(a.entry(0).frames == 8);
  CHECK(a.entry(0).height == 16);
  CHECK(a.entry(0).ef_true == 0.6);
  CHECK(a.entry(0).provenance == "synthetic");
  CHECK(slurp(d / "smp_a" / a.entry(0).file) == slurp(d / "smp_b" / b.entry(0).file));
  CHECK(slurp(d / "smp_a.gif").substr(0, 6) == "GIF89a");
  const json rec = json::parse(slurp(d / "smp_a" / "run_record.json"));
  CHECK(rec.at("lambda_c") == 0.6);
  CHECK(rec.at("seed") == 4);
  CHECK(rec.at("evaluations") == 7 + 5);

  REQUIRE(run(d, base + "--ef 0.6 --ref-frame 1 --seed 5 --out smp_c").code == 0);
  CHECK(slurp(d / "smp_a" / a.entry(0).file) != slurp(d / "smp_c" / a.entry(0).file));

  SUBCASE("PGM reference frame") {
    std::ofstream(d / "ref.pgm", std::ios::binary) << "P2\n# test\n4 4\n255\n"
                                                     << "0 10 20 30 40 50 60 70 80 90 100 110 120 130 140 150\n";
    CHECK(run(d, "sample --cascade mini.json --checkpoints s0.ckpt s1.ckpt --ef 0.3 --ref-frame ref.pgm "
                 "--out smp_pgm")
              .code == 0);
  }
  const Result bad = run(d, base + "--ef 1.5 --ref-frame 1 --out smp_x");
  CHECK(bad.code == 1);
  CHECK_FALSE(fs::exists(d / "smp_x"));
  const Result swapped = run(d, "sample --cascade mini.json --checkpoints s1.ckpt s0.ckpt --data data --ef 0.5 "
                                "--ref-frame 0 --out smp_y");
  CHECK(swapped.code == 1);
  CHECK(swapped.output.find("stage 0") != std::string::npos);
  CHECK(run(d, base + "--ef 0.5 --ref-frame 99 --out smp_z").code == 1);
  CHECK(run(d, "sample --cascade mini.json --checkpoints s0.ckpt --data data --ef 0.5 --ref-frame 0 --out q")
            .code == 1);
}

TEST_CASE("eval") {
  const fs::path d = workspace().path();
  const std::string base = "eval --cascade mini.json --checkpoints s0.ckpt s1.ckpt --data data --n 3 --seed 2 ";
  REQUIRE(run(d, base + "--task gen --k 3 --out ev3").code == 0);
  const Result r1 = run(d, base + "--task gen --k 1 --out ev1");
  REQUIRE(r1.code == 0);
  CHECK(r1.output.find("model\ttask\tk\tn\tR2") != std::string::npos);
  const EvalReport e3 = eval_report_from_json(slurp(d / "ev3" / "report.json"));
  const EvalReport e1 = eval_report_from_json(slurp(d / "ev1" / "report.json"));
  CHECK(e3.records.size() == 3);
  if (e3.n_failed == 0 && e1.n_failed == 0) CHECK(e3.metrics.mae <= e1.metrics.mae);
  CHECK(fs::exists(d / "ev3" / "per_video.tsv"));
  CHECK(fs::exists(d / "ev3" / "run_record.json"));

  const Result missing =
      run(d, "eval --cascade mini.json --checkpoints s0.ckpt nothere.ckpt --data data --out evm");
  CHECK(missing.code == 3);
  CHECK(missing.output.find("stage 1 (TSSR)") != std::string::npos);
  CHECK(run(d, base + "--task foo --out evx").code == 1);
}

TEST_CASE("oracle-check") {
  const fs::path d = workspace().path();
  const Result ok = run(d, "oracle-check --out oracle.json");
  CHECK(ok.code == 0);
  CHECK(ok.output.find("PASS") != std::string::npos);
  const json j = json::parse(slurp(d / "oracle.json"));
  CHECK(j.at("pass") == true);
  CHECK(j.at("samples") == 10000);
  CHECK(fs::exists(d / "oracle.json.run.json"));
  const Result one = run(d, "oracle-check --n-steps 1 --samples 2000");
  CHECK(one.code == 2);
  CHECK(one.output.find("FAIL") != std::string::npos);
  CHECK(run(d, "oracle-check --n-steps 0").code == 1);
}

TEST_CASE("rebalance and regress") {
  const fs::path d = workspace().path();
  REQUIRE(run(d, "gen-data --config data.json --out skew --distribution skewed --n-train 8 --n-val 0 --n-test 0 "
                 "--seed 8")
              .code == 0);
  const Result r = run(d, "rebalance --cascade mini.json --checkpoints s0.ckpt s1.ckpt --data skew "
                          "--bin-width 0.2 --ef-range 0.1 0.9 --target-per-bin 2 --accept-tol 0 --out reb");
  REQUIRE(r.code == 0);
  const Dataset out = Dataset::open(d / "reb");
  CHECK(out.size() == 8);
  const json rec = json::parse(slurp(d / "reb" / "run_record.json"));
  CHECK(rec.at("report").at("shortfall") == 0);
  CHECK(rec.at("report").at("final_per_bin") == json::array({2, 2, 2, 2}));

  const Result g = run(d, "regress --train-data reb --val-data data --val-split val --epochs 2 --out reg.json");
  CHECK(g.code == 0);
  const json res = json::parse(slurp(d / "reg.json"));
  CHECK(res.at("n_train") == 8);
  CHECK(res.at("val").at("n") == 2);
}

TEST_CASE("replaying a run record reproduces the artifact") {
  const fs::path d = workspace().path();
  const json rec = json::parse(slurp(d / "s0.ckpt.run.json"));
  std::string args;
  auto argv = rec.at("command_line").get<std::vector<std::string>>();
  for (std::size_t i = 1; i < argv.size(); ++i) {
    std::string a = argv[i];
    if (i > 1 && argv[i - 1] == "--out") a = "replay.ckpt";
    args += "'" + a + "' ";
  }
  REQUIRE(run(d, "--threads 1 " + args).code == 0);
  CHECK(slurp(d / "replay.ckpt") == slurp(d / "s0.ckpt"));
}

TEST_CASE("a failure after outputs exist leaves a marker") {
  const fs::path d = workspace().path();
  const Result r = run(d, "train --cascade mini.json --stage 0 --data data --out blowup.ckpt --steps 30 "
                          "--lr 1e9 --checkpoint-every 1 --seed 3");
  CHECK(r.code == 2);
  CHECK(r.output.find("non-finite") != std::string::npos);
  CHECK(fs::exists(d / "blowup.ckpt"));
  CHECK(fs::exists(d / "blowup.ckpt.FAILED"));
  CHECK_FALSE(fs::exists(d / "blowup.ckpt.run.json"));

  const Result cut = run(d, "sample --cascade mini.json --checkpoints s0.ckpt s1.ckpt --ef 0.3 --ref-frame "
                            "nothere.pgm --out cutout");
  CHECK(cut.code == 3);
  CHECK_FALSE(fs::exists(d / "cutout"));
}
