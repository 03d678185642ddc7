#include <doctest.h>

#include <fstream>

#include "support.hpp"

using namespace spinecobb;
using namespace testsupport;
using nlohmann::json;

TEST_CASE("schedule defaults") {
  const auto s = TrainSchedule::defaults();
  const int epochs[] = {90, 200, 30, 30, 200};
  for (int k = 0; k < kStageCount; ++k) CHECK(s.stages[k].epochs == epochs[k]);
  CHECK(s.stages[0].learning_rate == 1e-4);
  CHECK(s.stages[1].learning_rate == 1e-3);
  CHECK(s.stages[0].weight_decay == 1e-5);
  CHECK(s.stages[1].weight_decay == 1e-5);
  CHECK(s.stages[3].trains == NetworkRole::Segmenter);
  CHECK(s.stages[3].frozen() == NetworkRole::Regressor);
  CHECK(s.stages[1].trains == NetworkRole::Regressor);
  CHECK(s.stages[4].recipe == LossRecipe::RegSiameseArRetrain);
  CHECK(s.batch_size == 8);
  CHECK(s.divergence_factor == 10.0);
  CHECK(s.divergence_patience == 3);
}

TEST_CASE("config round trip and hash") {
  const RunConfig cfg = desk_config();
  const RunConfig back = RunConfig::from_json(cfg.to_json());
  CHECK(back.to_json() == cfg.to_json());
  CHECK(back.hash() == cfg.hash());
  CHECK(cfg.hash_hex().size() == 16);

  RunConfig other = cfg;
  other.schedule.stages[2].epochs += 1;
  CHECK(other.hash() != cfg.hash());
}

TEST_CASE("hash ignores key order in the file") {
  const json a = json::parse(R"({"data": {"synthetic": {"count": 5}}, "segnet": {"lambda": 0.5, "preset": "tiny"}, "schedule": {"seed": 3, "batch_size": 4}})");
  const json b = json::parse(R"({"schedule": {"batch_size": 4, "seed": 3}, "segnet": {"preset": "tiny", "lambda": 0.5}, "data": {"synthetic": {"count": 5}}})");
  CHECK(RunConfig::from_json(a).hash() == RunConfig::from_json(b).hash());
}

TEST_CASE("strict parsing") {
  CHECK_NOTHROW(RunConfig::from_json(json::parse(R"({"data": {"synthetic": {}}})")));
  CHECK_THROWS_AS(RunConfig::from_json(json::parse(R"({"segnet": {}})")), InvalidArgumentError);
  try {
    RunConfig::from_json(json::parse(R"({"data": {"synthetic": {}}, "segnet": {"lamda": 1.0}})"));
    FAIL("accepted unknown key");
  } catch (const InvalidArgumentError& e) {
    CHECK(std::string(e.what()).find("segnet.lamda") != std::string::npos);
  }
  CHECK_THROWS_AS(RunConfig::from_json(json::parse(R"({"data": {"synthetic": {}}, "nope": 1})")), InvalidArgumentError);
  CHECK_THROWS_AS(RunConfig::from_json(json::parse(R"({"data": {"synthetic": {}}, "schedule": {"stages": [{}, {}]}})")), InvalidArgumentError);
  CHECK_THROWS_AS(RunConfig::from_json(json::parse(R"({"data": {"synthetic": {}}, "regnet": {"epsilon": 0}})")), InvalidArgumentError);
  CHECK_THROWS_AS(RunConfig::from_json(json::parse(R"({"data": {"synthetic": {}}, "segnet": {"lambda": "x"}})")), InvalidArgumentError);
  CHECK_THROWS_AS(parse_synthetic_spec(json::parse(R"({"amplitud": 1})")), InvalidArgumentError);
}

TEST_CASE("relative data root resolves against the config file") {
  const auto dir = temp_dir("cfgroot");
  std::ofstream(dir / "c.json") << R"({"data": {"root": "sub/data"}})";
  const RunConfig cfg = load_run_config(dir / "c.json");
  CHECK(std::filesystem::path(cfg.data.root) == dir / "sub/data");
  std::ofstream(dir / "bad.json") << "{ not json";
  CHECK_THROWS_AS(load_run_config(dir / "bad.json"), InvalidArgumentError);
}

TEST_CASE("shipped configs parse") {
  for (const char* name : {"desk.json", "paper.json"}) {
    CAPTURE(name);
    CHECK_NOTHROW(load_run_config(source_dir() / "configs" / name));
  }
  CHECK_NOTHROW(parse_synthetic_spec(read_json_file(source_dir() / "configs" / "synth_spec.json")));
  const RunConfig paper = load_run_config(source_dir() / "configs" / "paper.json");
  CHECK(paper.data.rows == 512);
  CHECK(paper.data.cols == 256);
  CHECK(paper.segnet.preset == "resnet50-like");
}

TEST_CASE("synthetic data follows the configured size") {
  RunConfig cfg = micro_config(10);
  cfg.data.rows = 32;
  cfg.data.cols = 16;
  const auto ds = load_configured_data(cfg);
  CHECK(ds.train.size() + ds.test.size() == 10);
  CHECK(ds.train[0].image.rows() == 32);
  CHECK(ds.train[0].mask->cols() == 16);
}
