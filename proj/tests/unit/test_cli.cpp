#include <doctest.h>

#include <fstream>
#include <sstream>

#include "spinecobb/checkpoint.hpp"
#include "spinecobb/cli.hpp"
#include "spinecobb/trainer.hpp"
#include "support.hpp"

using namespace spinecobb;
using namespace testsupport;
namespace fs = std::filesystem;

namespace {

struct Ran {
  int code;
  std::string out, err;
};

Ran cli_run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

fs::path write_config(const fs::path& dir, const RunConfig& cfg) {
  const fs::path p = dir / "config.json";
  write_text(p, cfg.to_json().dump(2));
  return p;
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = slurp(e.path());
  return files;
}

fs::path synth_dir(const std::string& tag, int n, const std::string& spec_json = "{}") {
  const fs::path dir = temp_dir(tag);
  write_text(dir / "spec.json", spec_json);
  const auto r = cli_run({"synth", "--spec", (dir / "spec.json").string(), "--n", std::to_string(n), "--out",
                          (dir / "data").string(), "--seed", "7"});
  REQUIRE(r.code == 0);
  return dir / "data";
}

}  // namespace

TEST_CASE("usage errors") {
  CHECK(cli_run({}).code == cli::kInputError);
  CHECK(cli_run({"bogus"}).code == cli::kInputError);
  CHECK(cli_run({"--help"}).code == cli::kOk);
  CHECK(cli_run({"train", "--config", "x.json", "--stage", "7", "--out", "y"}).code == cli::kInputError);
}

TEST_CASE("synth") {
  const fs::path dir = temp_dir("cli_synth");
  write_text(dir / "spec.json", "{}");
  const auto r = cli_run({"synth", "--spec", (dir / "spec.json").string(), "--n", "20", "--out",
                          (dir / "a").string(), "--seed", "7"});
  CHECK(r.code == 0);
  CHECK(r.out.find("self-check: pass") != std::string::npos);
  const auto m = data::load_manifest(dir / "a");
  CHECK(m.records.size() == 20);
  CHECK(m.count(data::Split::Test) == 4);

  cli_run({"synth", "--spec", (dir / "spec.json").string(), "--n", "20", "--out", (dir / "b").string(), "--seed", "7"});
  CHECK(tree(dir / "a") == tree(dir / "b"));

  write_text(dir / "flat.json", R"({"amplitude": 0})");
  CHECK(cli_run({"synth", "--spec", (dir / "flat.json").string(), "--n", "5", "--out", (dir / "flat").string()}).code == 0);
  for (const auto& rec : data::load_manifest(dir / "flat").records) CHECK(rec.angles == AngleDegrees{0, 0, 0});

  write_text(dir / "wild.json", R"({"amplitude": 100})");
  CHECK(cli_run({"synth", "--spec", (dir / "wild.json").string(), "--n", "5", "--out", (dir / "w").string()}).code ==
        cli::kInputError);
}

TEST_CASE("prepare") {
  const fs::path data = synth_dir("cli_prep", 6);
  const fs::path out = data.parent_path() / "prepared";
  // Drop the generator masks so prepare has to rasterize them.
  for (const char* split : {"train", "test"}) fs::remove_all(data / split / "masks");
  const auto r = cli_run({"prepare", "--data", data.string(), "--out", out.string()});
  CHECK(r.code == 0);
  CHECK(r.out.find("6 masks") != std::string::npos);
  std::size_t masks = 0;
  for (const char* split : {"train", "test"})
    for (const auto& e : fs::directory_iterator(out / split / "masks")) masks += e.path().extension() == ".png";
  CHECK(masks == 6);
  CHECK(fs::exists(out / "train" / "angles.csv"));

  const auto first = tree(out);
  CHECK(cli_run({"prepare", "--data", data.string(), "--out", out.string()}).code == 0);
  CHECK(tree(out) == first);

  // Collapse one vertebra onto a line: warning, still exit 0.
  const fs::path lm = data / "train" / "landmarks" / "syn00000.txt";
  std::vector<std::string> lines;
  {
    std::ifstream in(lm);
    for (std::string l; std::getline(in, l);) lines.push_back(l);
  }
  for (int i = 0; i < 4; ++i) lines[static_cast<std::size_t>(i)] = "10 " + std::to_string(5 + 3 * i);
  {
    std::ofstream o(lm);
    for (const auto& l : lines) o << l << "\n";
  }
  const auto w = cli_run({"prepare", "--data", data.string(), "--out", (data.parent_path() / "p2").string()});
  CHECK(w.code == 0);
  CHECK(w.err.find("warning") != std::string::npos);

  CHECK(cli_run({"prepare", "--data", (data / "nope").string(), "--out", out.string()}).code == cli::kInputError);
  CHECK(cli_run({"prepare", "--data", data.string(), "--out", data.string()}).code == cli::kInputError);
}

TEST_CASE("train, eval and cam") {
  const fs::path dir = temp_dir("cli_train");
  const fs::path cfg = write_config(dir, micro_config(16));
  const fs::path run = dir / "run";

  CHECK(cli_run({"train", "--config", cfg.string()}).code == cli::kInputError);
  const auto s4 = cli_run({"train", "--config", cfg.string(), "--stage", "4", "--out", run.string()});
  CHECK(s4.code == cli::kStateError);
  CHECK(s4.err.find("stage-3") != std::string::npos);

  CHECK(cli_run({"train", "--config", cfg.string(), "--stage", "1", "--out", run.string()}).code == 0);
  CHECK(cli_run({"train", "--config", cfg.string(), "--stage", "3", "--out", run.string()}).code == cli::kStateError);
  const auto rest = cli_run({"train", "--config", cfg.string(), "--stage", "all", "--resume", run.string()});
  CHECK(rest.code == 0);
  CHECK(rest.out.find("resumed after stage 1") != std::string::npos);
  for (int k = 1; k <= 5; ++k) CHECK(fs::exists(stage_dir(run, k) / "report.json"));

  // Uninterrupted run gives the same final parameters.
  const fs::path run2 = dir / "run2";
  CHECK(cli_run({"train", "--config", cfg.string(), "--out", run2.string()}).code == 0);
  CHECK(slurp(stage_dir(run, 5) / "regnet.bin") == slurp(stage_dir(run2, 5) / "regnet.bin"));
  CHECK(slurp(stage_dir(run, 5) / "segnet.bin") == slurp(stage_dir(run2, 5) / "segnet.bin"));

  RunConfig changed = micro_config(16);
  changed.segnet.lambda = 0.25;
  fs::create_directories(dir / "changed");
  const fs::path cfg2 = write_config(dir / "changed", changed);
  CHECK(cli_run({"train", "--config", cfg2.string(), "--resume", run.string()}).code == cli::kStateError);

  const fs::path data = synth_dir("cli_train_data", 6);
  const auto ev = cli_run({"eval", "--ckpt", run.string(), "--data", data.string(), "--out", (dir / "eval.json").string()});
  CHECK(ev.code == 0);
  CHECK(fs::exists(dir / "eval.txt"));
  CHECK(fs::exists(dir / "eval.csv"));
  const auto rep = metrics::EvalReport::from_json(nlohmann::json::parse(slurp(dir / "eval.json")));
  CHECK(rep.sample_count == 1);
  CHECK(rep.seg.has_value());
  CHECK(cli_run({"eval", "--ckpt", (dir / "none").string(), "--data", data.string(), "--out",
                 (dir / "e2.json").string()})
            .code == cli::kInputError);

  const auto cam = cli_run({"cam", "--ckpt", stage_dir(run, 5).string(), "--data", data.string(), "--out",
                            (dir / "figs").string(), "--with-ar-baseline"});
  CHECK(cam.code == 0);
  CHECK(fs::exists(dir / "figs" / "syn00005_cam.png"));
  CHECK(fs::exists(dir / "figs" / "syn00005_seg.png"));
  CHECK(fs::exists(dir / "figs" / "syn00005_ar.png"));
  fs::remove_all(data / "test" / "masks");
  fs::remove_all(data / "test" / "landmarks");
  CHECK(cli_run({"cam", "--ckpt", run.string(), "--data", data.string(), "--out", (dir / "f2").string()}).code ==
        cli::kInputError);
}

TEST_CASE("eval of an exact regressor reports zero SMAPE") {
  const fs::path dir = temp_dir("cli_oracle");
  RunConfig cfg = micro_config(8);
  for (auto& s : cfg.schedule.stages) s.epochs = 0;
  const fs::path run = dir / "run";
  CHECK(cli_run({"train", "--config", write_config(dir, cfg).string(), "--stage", "1", "--out", run.string()}).code == 0);

  // Zero weights and zero bias put every output at sigmoid(0) = 0.5, i.e. 45 degrees.
  CheckpointMeta meta;
  ParameterSet reg = load_checkpoint(stage_dir(run, 1) / "regnet.bin", &meta);
  for (auto& [name, arr] : reg.entries()) std::fill(arr.values.begin(), arr.values.end(), 0.0);
  save_checkpoint(stage_dir(run, 1) / "regnet.bin", reg, meta);

  const fs::path data = synth_dir("cli_oracle_data", 5);
  std::vector<data::AngleRow> rows;
  for (const auto& r : data::read_angle_csv(data / "test" / "angles.csv")) rows.push_back({r.source_id, {45, 45, 45}});
  data::write_angle_csv(data / "test" / "angles.csv", rows);
  const auto ev = cli_run({"eval", "--ckpt", run.string(), "--data", data.string(), "--out", (dir / "e.json").string()});
  REQUIRE(ev.code == 0);
  const auto rep = metrics::EvalReport::from_json(nlohmann::json::parse(slurp(dir / "e.json")));
  CHECK(rep.smape == 0.0);
  CHECK(rep.mae == std::array<double, 3>{0, 0, 0});
}

TEST_CASE("divergence exits with 3") {
  const fs::path dir = temp_dir("cli_div");
  RunConfig cfg = micro_config(24, 8);
  cfg.schedule.stages[1].learning_rate = 5.0;
  cfg.schedule.divergence_factor = 1.0000001;
  cfg.schedule.divergence_patience = 1;
  const auto r = cli_run({"train", "--config", write_config(dir, cfg).string(), "--stage", "all", "--out",
                          (dir / "run").string()});
  CHECK(r.code == cli::kDiverged);
  CHECK(r.err.find("diverged") != std::string::npos);
}

TEST_CASE("ablate bookkeeping") {
  const fs::path dir = temp_dir("cli_ablate");
  const fs::path cfg = write_config(dir, micro_config(12));
  write_text(dir / "grid.json", R"({"cells": [{"label": "Seg", "ar": false, "roie": false, "tcl": false},
                                              {"label": "+AR", "ar": true, "roie": false, "tcl": false}]})");
  auto run = [&](const std::string& out) {
    return cli_run({"ablate", "--config", cfg.string(), "--grid", (dir / "grid.json").string(), "--seeds", "1,2",
                    "--out", (dir / out).string()});
  };
  const auto a = run("a");
  REQUIRE(a.code == 0);
  std::size_t runs = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir / "a" / "runs")) runs += e.is_regular_file();
  CHECK(runs == 4);
  const auto summary = nlohmann::json::parse(slurp(dir / "a" / "summary.json"));
  CHECK(summary.at("rows").size() == 2);
  CHECK(summary.at("rows")[0].at("runs") == 2);
  CHECK(summary.at("rows")[1].at("label") == "+AR");
  CHECK(fs::exists(dir / "a" / "summary.txt"));

  REQUIRE(run("b").code == 0);
  CHECK(slurp(dir / "a" / "summary.json") == slurp(dir / "b" / "summary.json"));

  write_text(dir / "bad.json", R"({"cells": [{"label": "x", "arr": true}]})");
  CHECK(cli_run({"ablate", "--config", cfg.string(), "--grid", (dir / "bad.json").string(), "--seeds", "1", "--out",
                 (dir / "c").string()})
            .code == cli::kInputError);
}

TEST_CASE("ablation summary statistics") {
  const auto ms = cli::mean_sd({1.0, 2.0, 3.0, 4.0});
  CHECK(ms.mean == 2.5);
  CHECK(std::abs(ms.sd - std::sqrt(5.0 / 3.0)) < 1e-15);
  CHECK(cli::mean_sd({7.0}).sd == 0.0);
  CHECK(cli::reference_footnote().find("8.47") != std::string::npos);
  CHECK(cli::reference_footnote().find("7.32") != std::string::npos);
}
