#pragma once

// Five-stage schedule that trains the segmenter (theta1) and the regressor
// (theta2) alternately, each stage freezing the other network.
//
//   1  theta1 on Dice + lambda * BCE
//   2  theta2 on the Siamese SMAPE + AR loss, fed cached s(x) of frozen theta1
//   3  theta1 fine-tuned with CAMs of frozen theta2 gated into the encoder
//   4  theta1 fine-tuned through frozen theta2: SMAPE(r(0 (+) s(x)), r(0 (+) y))
//   5  theta2 retrained on s(x) of the updated theta1

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "spinecobb/config.hpp"
#include "spinecobb/data.hpp"
#include "spinecobb/metrics.hpp"
#include "spinecobb/regnet.hpp"
#include "spinecobb/segnet.hpp"

namespace spinecobb {

inline constexpr const char* kCacheEnvVar = "SEG4REG_CACHE";

/// s(x) keyed by (segmenter state, source_id). Held in memory; also mirrored
/// to disk when a directory is given.
class SxCache {
 public:
  explicit SxCache(std::optional<std::filesystem::path> disk_dir = std::nullopt);
  /// Uses $SEG4REG_CACHE when set.
  static SxCache from_env();

  Tensor get(const std::string& key, const std::string& source_id, const std::function<Tensor()>& compute);
  void clear_memory() { memory_.clear(); }

  std::size_t hits() const { return hits_; }
  std::size_t misses() const { return misses_; }
  const std::optional<std::filesystem::path>& disk_dir() const { return disk_dir_; }

 private:
  std::optional<std::filesystem::path> disk_dir_;
  std::map<std::string, Tensor> memory_;
  std::size_t hits_ = 0;
  std::size_t misses_ = 0;
};

/// Inference over the joint model. Holds references; the networks and
/// parameter sets must outlive it.
class Pipeline {
 public:
  Pipeline(const SegNet& seg, const RegNet& reg, const ParameterSet& theta1, const ParameterSet& theta2,
           bool gate_active, InputMode mode);

  SpineMask segment_ungated(const Tensor& image) const;
  /// CAM of the regressor's branch A for (image, mask).
  Cam branch_a_cam(const Tensor& image, const Tensor& mask) const;
  /// Two passes when the gate is active: ungated mask -> CAM -> gated mask.
  SpineMask segment(const Tensor& image) const;

  struct Output {
    SpineMask mask;
    RegForward reg;
    Cam cam;
  };
  Output run(const Tensor& image) const;

 private:
  const SegNet& seg_;
  const RegNet& reg_;
  const ParameterSet& theta1_;
  const ParameterSet& theta2_;
  bool gate_active_;
  InputMode mode_;
};

/// Runs the pipeline over samples; segmentation metrics are included when
/// every sample has a ground-truth mask.
metrics::EvalReport evaluate_samples(const Pipeline& pipeline, std::span<const data::Sample> samples,
                                     double angle_divisor);

struct StageReport {
  int stage = 0;
  std::string recipe;
  std::string trains;
  bool skipped = false;
  int epochs = 0;
  std::vector<double> loss_curve;
  /// Mean AR loss over the test split after each epoch (stages 2 and 5).
  std::vector<double> test_ar_curve;
  std::optional<metrics::EvalReport> eval;  // test split after the stage
  double alpha = 0.0;
  bool gate_active = false;
  std::string theta1_hash;
  std::string theta2_hash;
  std::string sx_cache_key;
  double seconds = 0.0;

  nlohmann::json to_json() const;
  static StageReport from_json(const nlohmann::json& j);
};

struct LoadedModel {
  RunConfig config;
  ParameterSet theta1{NetworkRole::Segmenter};
  ParameterSet theta2{NetworkRole::Regressor};
  bool gate_active = false;
  int stage = 0;
};

/// Accepts a stage directory or a run directory (latest stage is used).
LoadedModel load_model(const std::filesystem::path& ckpt);
std::filesystem::path stage_dir(const std::filesystem::path& run_dir, int stage);

class Trainer {
 public:
  Trainer(RunConfig cfg, data::Dataset data);

  const RunConfig& config() const { return cfg_; }
  const data::Dataset& dataset() const { return data_; }
  const SegNet& segnet() const { return seg_; }
  const RegNet& regnet() const { return reg_; }
  const ParameterSet& theta1() const { return theta1_; }
  const ParameterSet& theta2() const { return theta2_; }
  bool gate_active() const { return gate_active_; }
  int completed_stage() const { return completed_; }

  /// Adopts another run's state, e.g. a shared stage-1 segmenter.
  void set_state(const ParameterSet& theta1, const ParameterSet& theta2, bool gate_active, int completed);

  StageReport stage1_train_seg();
  StageReport stage2_train_reg_with_ar();
  StageReport stage3_finetune_seg_with_roie();
  StageReport stage4_finetune_seg_via_reg();
  StageReport stage5_retrain_reg();
  StageReport run_stage(int stage);

  /// Runs every remaining stage up to last_stage, checkpointing each one
  /// under run_dir when given.
  std::vector<StageReport> run_schedule(const std::optional<std::filesystem::path>& run_dir = std::nullopt,
                                        int last_stage = kStageCount);

  void save_stage(const std::filesystem::path& run_dir, const StageReport& report) const;
  /// Loads run_dir/stage<k>; the stored config hash must match this run's.
  void resume(const std::filesystem::path& run_dir, int stage);

  Pipeline pipeline() const;
  metrics::EvalReport evaluate(data::Split split) const;
  /// Mean AR loss over a split using cached s(x).
  double mean_ar(data::Split split);

  SxCache& cache() { return cache_; }
  std::function<void(int stage, int epoch, double loss)> on_epoch;

 private:
  /// Returns nullopt for samples the recipe cannot use (no ground-truth mask).
  using SampleLoss = std::function<std::optional<double>(const data::Sample&, int epoch, GradientSet&)>;

  StageReport begin_stage(int stage);
  void finish_stage(StageReport& r, double seconds);
  void train_epochs(int stage, ParameterSet& trained, StageReport& report, const SampleLoss& fn,
                    const std::function<void(int epoch)>& after_epoch = {});
  std::string cache_key() const;
  Tensor cached_sx(const data::Sample& s);
  StageReport train_regressor(int stage);
  Cam current_cam(const Tensor& image) const;
  data::Augmented training_view(const data::Sample& s, const Tensor& mask, int stage, int epoch) const;

  RunConfig cfg_;
  data::Dataset data_;
  SegNet seg_;
  RegNet reg_;
  ParameterSet theta1_{NetworkRole::Segmenter};
  ParameterSet theta2_{NetworkRole::Regressor};
  bool gate_active_ = false;
  int completed_ = 0;
  SxCache cache_;
  std::string sx_key_;  // pinned while a regressor stage runs
};

}  // namespace spinecobb
