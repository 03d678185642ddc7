#pragma once

// Run configuration: one JSON document covering every module. Unknown keys
// are rejected; the hash is taken over the fully resolved document, so key
// order in the file does not matter.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "spinecobb/data.hpp"
#include "spinecobb/regnet.hpp"
#include "spinecobb/segnet.hpp"

namespace spinecobb {

enum class LossRecipe {
  SegDiceCe,           // stage 1
  RegSiameseAr,        // stage 2
  SegRoieDiceCe,       // stage 3
  SegViaFrozenReg,     // stage 4
  RegSiameseArRetrain  // stage 5
};

std::string recipe_name(LossRecipe r);

struct StageSpec {
  int epochs = 0;
  double learning_rate = 1e-3;
  double weight_decay = 1e-5;
  NetworkRole trains = NetworkRole::Segmenter;
  LossRecipe recipe = LossRecipe::SegDiceCe;

  NetworkRole frozen() const {
    return trains == NetworkRole::Segmenter ? NetworkRole::Regressor : NetworkRole::Segmenter;
  }
};

inline constexpr int kStageCount = 5;

struct TrainSchedule {
  std::array<StageSpec, kStageCount> stages;
  std::uint64_t seed = 0;
  int batch_size = 8;
  /// Stage 5 restarts the regressor from a fresh initialization.
  bool reinit_regressor_stage5 = false;
  double divergence_factor = 10.0;
  int divergence_patience = 3;

  /// 90 / 200 / 30 / 30 / 200 epochs; Adam lr 1e-4 (segmenter) and 1e-3
  /// (regressor); weight decay 1e-5.
  static TrainSchedule defaults();
  void validate() const;
};

/// Which couplings are active; used by the ablation grid.
struct Variant {
  bool ar = true;
  bool roie = true;
  bool tcl = true;
  InputMode input = InputMode::ImageAndMask;
};

struct SyntheticSource {
  data::SyntheticSpec spec;
  int count = 250;
};

struct DataConfig {
  /// Dataset root in the on-disk layout; ignored when synthetic is set.
  std::string root;
  std::optional<SyntheticSource> synthetic;
  int rows = 512;
  int cols = 256;
  bool augment = true;
  data::AugmentationConfig augmentation;
};

struct RunConfig {
  DataConfig data;
  SegNetConfig segnet;
  RegNetConfig regnet;
  TrainSchedule schedule = TrainSchedule::defaults();
  Variant variant;
  double angle_divisor = kDefaultAngleDivisor;

  /// Strict parse; relative data.root is resolved against base_dir.
  static RunConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
  nlohmann::json to_json() const;
  std::uint64_t hash() const;
  std::string hash_hex() const;
  void validate() const;
};

RunConfig load_run_config(const std::filesystem::path& path);

/// Strict parse of a synthetic-generator spec (all keys optional).
data::SyntheticSpec parse_synthetic_spec(const nlohmann::json& j, const std::string& where = "");
nlohmann::json synthetic_spec_to_json(const data::SyntheticSpec& spec);
/// Reads and parses a JSON file; malformed JSON raises InvalidArgumentError.
nlohmann::json read_json_file(const std::filesystem::path& path);

/// Loads the configured data (disk or synthetic), preprocessed to rows x cols.
data::Dataset load_configured_data(const RunConfig& cfg);

}  // namespace spinecobb
