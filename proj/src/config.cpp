#include "spinecobb/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace spinecobb {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Reads fields out of one JSON object and remembers which keys were used, so
// that leftovers can be reported as unknown.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw InvalidArgumentError("config: '" + path_ + "' must be an object");
  }

  template <class T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw InvalidArgumentError("config: '" + where(key) + "' has the wrong type");
    }
  }

  bool has(const char* key) {
    seen_.insert(key);
    return j_.contains(key);
  }
  const json& sub(const char* key) const { return j_.at(key); }
  std::string where(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw InvalidArgumentError("config: unknown key '" + where(it.key()) + "'");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_synthetic(Section& s, data::SyntheticSpec& spec) {
  s.read("rows", spec.rows);
  s.read("cols", spec.cols);
  s.read("vertebra_count", spec.vertebra_count);
  s.read("amplitude", spec.amplitude);
  s.read("min_amplitude_fraction", spec.min_amplitude_fraction);
  s.read("vertebra_width", spec.vertebra_width);
  s.read("vertebra_height_ratio", spec.vertebra_height_ratio);
  s.read("margin", spec.margin);
  s.read("blur_sigma", spec.blur_sigma);
  s.read("noise", spec.noise);
  s.read("test_fraction", spec.test_fraction);
  s.read("seed", spec.seed);
}

}  // namespace

json synthetic_spec_to_json(const data::SyntheticSpec& spec) {
  return {{"rows", spec.rows},
          {"cols", spec.cols},
          {"vertebra_count", spec.vertebra_count},
          {"amplitude", spec.amplitude},
          {"min_amplitude_fraction", spec.min_amplitude_fraction},
          {"vertebra_width", spec.vertebra_width},
          {"vertebra_height_ratio", spec.vertebra_height_ratio},
          {"margin", spec.margin},
          {"blur_sigma", spec.blur_sigma},
          {"noise", spec.noise},
          {"test_fraction", spec.test_fraction},
          {"seed", spec.seed}};
}

data::SyntheticSpec parse_synthetic_spec(const json& j, const std::string& where) {
  Section s(j, where);
  data::SyntheticSpec spec;
  read_synthetic(s, spec);
  s.finish();
  spec.validate();
  return spec;
}

std::string recipe_name(LossRecipe r) {
  switch (r) {
    case LossRecipe::SegDiceCe: return "seg_dice_ce";
    case LossRecipe::RegSiameseAr: return "reg_siamese_ar";
    case LossRecipe::SegRoieDiceCe: return "seg_roie_dice_ce";
    case LossRecipe::SegViaFrozenReg: return "seg_via_frozen_reg";
    case LossRecipe::RegSiameseArRetrain: return "reg_siamese_ar_retrain";
  }
  return "?";
}

TrainSchedule TrainSchedule::defaults() {
  using R = NetworkRole;
  TrainSchedule s;
  s.stages = {StageSpec{90, 1e-4, 1e-5, R::Segmenter, LossRecipe::SegDiceCe},
              StageSpec{200, 1e-3, 1e-5, R::Regressor, LossRecipe::RegSiameseAr},
              StageSpec{30, 1e-4, 1e-5, R::Segmenter, LossRecipe::SegRoieDiceCe},
              StageSpec{30, 1e-4, 1e-5, R::Segmenter, LossRecipe::SegViaFrozenReg},
              StageSpec{200, 1e-3, 1e-5, R::Regressor, LossRecipe::RegSiameseArRetrain}};
  return s;
}

void TrainSchedule::validate() const {
  if (batch_size < 1) throw InvalidArgumentError("schedule.batch_size must be >= 1");
  if (!(divergence_factor > 1.0)) throw InvalidArgumentError("schedule.divergence_factor must be > 1");
  if (divergence_patience < 1) throw InvalidArgumentError("schedule.divergence_patience must be >= 1");
  for (int k = 0; k < kStageCount; ++k) {
    const auto& st = stages[k];
    const std::string at = "schedule.stages[" + std::to_string(k) + "]";
    if (st.epochs < 0) throw InvalidArgumentError(at + ".epochs must be >= 0");
    if (!(st.learning_rate > 0.0)) throw InvalidArgumentError(at + ".learning_rate must be > 0");
    if (!(st.weight_decay >= 0.0)) throw InvalidArgumentError(at + ".weight_decay must be >= 0");
  }
}

void RunConfig::validate() const {
  if (data.rows < kMinImageSide || data.cols < kMinImageSide)
    throw InvalidArgumentError("data.rows and data.cols must be >= 8");
  if (data.root.empty() && !data.synthetic)
    throw InvalidArgumentError("config: either data.root or data.synthetic is required");
  if (data.synthetic) {
    data.synthetic->spec.validate();
    if (data.synthetic->count < 2) throw InvalidArgumentError("data.synthetic.count must be >= 2");
  }
  data.augmentation.validate();
  segnet.validate();
  regnet.validate();
  schedule.validate();
  if (!(angle_divisor > 0.0)) throw InvalidArgumentError("angle_divisor must be > 0");
}

RunConfig RunConfig::from_json(const json& j, const fs::path& base_dir) {
  RunConfig cfg;
  Section top(j, "");

  if (top.has("data")) {
    Section s(top.sub("data"), "data");
    s.read("root", cfg.data.root);
    s.read("rows", cfg.data.rows);
    s.read("cols", cfg.data.cols);
    s.read("augment", cfg.data.augment);
    if (s.has("synthetic")) {
      Section syn(s.sub("synthetic"), "data.synthetic");
      SyntheticSource src;
      syn.read("count", src.count);
      read_synthetic(syn, src.spec);
      syn.finish();
      cfg.data.synthetic = src;
    }
    if (s.has("augmentation")) {
      Section a(s.sub("augmentation"), "data.augmentation");
      auto& ac = cfg.data.augmentation;
      a.read("flip_probability", ac.flip_probability);
      a.read("rotation_lo", ac.rotation_lo);
      a.read("rotation_hi", ac.rotation_hi);
      a.read("rescale_lo", ac.rescale_lo);
      a.read("rescale_hi", ac.rescale_hi);
      a.finish();
    }
    s.finish();
  }
  cfg.data.augmentation.target_rows = cfg.data.rows;
  cfg.data.augmentation.target_cols = cfg.data.cols;
  if (!cfg.data.root.empty() && fs::path(cfg.data.root).is_relative() && !base_dir.empty())
    cfg.data.root = (base_dir / cfg.data.root).lexically_normal().string();

  if (top.has("segnet")) {
    Section s(top.sub("segnet"), "segnet");
    s.read("preset", cfg.segnet.preset);
    s.read("dilations", cfg.segnet.dilations);
    s.read("injection", cfg.segnet.injection);
    s.read("output_stride", cfg.segnet.output_stride);
    s.read("lambda", cfg.segnet.lambda);
    s.finish();
  }

  if (top.has("regnet")) {
    Section s(top.sub("regnet"), "regnet");
    s.read("preset", cfg.regnet.preset);
    s.read("epsilon", cfg.regnet.epsilon);
    s.read("w_ar", cfg.regnet.w_ar);
    std::string mode = cam_mode_name(cfg.regnet.cam_mode);
    s.read("cam_mode", mode);
    cfg.regnet.cam_mode = parse_cam_mode(mode);
    s.finish();
  }

  if (top.has("schedule")) {
    Section s(top.sub("schedule"), "schedule");
    auto& sc = cfg.schedule;
    s.read("seed", sc.seed);
    s.read("batch_size", sc.batch_size);
    s.read("reinit_regressor_stage5", sc.reinit_regressor_stage5);
    s.read("divergence_factor", sc.divergence_factor);
    s.read("divergence_patience", sc.divergence_patience);
    if (s.has("stages")) {
      const json& arr = s.sub("stages");
      if (!arr.is_array() || arr.size() != kStageCount)
        throw InvalidArgumentError("config: 'schedule.stages' must be an array of 5 objects");
      for (int k = 0; k < kStageCount; ++k) {
        Section st(arr[k], "schedule.stages[" + std::to_string(k) + "]");
        st.read("epochs", sc.stages[k].epochs);
        st.read("learning_rate", sc.stages[k].learning_rate);
        st.read("weight_decay", sc.stages[k].weight_decay);
        st.finish();
      }
    }
    s.finish();
  }
  cfg.data.augmentation.seed = cfg.schedule.seed;

  if (top.has("variant")) {
    Section s(top.sub("variant"), "variant");
    s.read("ar", cfg.variant.ar);
    s.read("roie", cfg.variant.roie);
    s.read("tcl", cfg.variant.tcl);
    std::string mode = input_mode_name(cfg.variant.input);
    s.read("input", mode);
    cfg.variant.input = parse_input_mode(mode);
    s.finish();
  }

  top.read("angle_divisor", cfg.angle_divisor);
  top.finish();
  cfg.validate();
  return cfg;
}

json RunConfig::to_json() const {
  json d{{"root", data.root},
         {"rows", data.rows},
         {"cols", data.cols},
         {"augment", data.augment},
         {"augmentation",
          {{"flip_probability", data.augmentation.flip_probability},
           {"rotation_lo", data.augmentation.rotation_lo},
           {"rotation_hi", data.augmentation.rotation_hi},
           {"rescale_lo", data.augmentation.rescale_lo},
           {"rescale_hi", data.augmentation.rescale_hi}}}};
  if (data.synthetic) {
    json syn = synthetic_spec_to_json(data.synthetic->spec);
    syn["count"] = data.synthetic->count;
    d["synthetic"] = std::move(syn);
  }
  json stages = json::array();
  for (const auto& st : schedule.stages)
    stages.push_back({{"epochs", st.epochs}, {"learning_rate", st.learning_rate}, {"weight_decay", st.weight_decay}});
  return {{"data", std::move(d)},
          {"segnet",
           {{"preset", segnet.preset},
            {"dilations", segnet.dilations},
            {"injection", segnet.injection},
            {"output_stride", segnet.output_stride},
            {"lambda", segnet.lambda}}},
          {"regnet",
           {{"preset", regnet.preset},
            {"epsilon", regnet.epsilon},
            {"w_ar", regnet.w_ar},
            {"cam_mode", cam_mode_name(regnet.cam_mode)}}},
          {"schedule",
           {{"seed", schedule.seed},
            {"batch_size", schedule.batch_size},
            {"reinit_regressor_stage5", schedule.reinit_regressor_stage5},
            {"divergence_factor", schedule.divergence_factor},
            {"divergence_patience", schedule.divergence_patience},
            {"stages", std::move(stages)}}},
          {"variant",
           {{"ar", variant.ar},
            {"roie", variant.roie},
            {"tcl", variant.tcl},
            {"input", input_mode_name(variant.input)}}},
          {"angle_divisor", angle_divisor}};
}

std::uint64_t RunConfig::hash() const {
  // nlohmann::json objects keep keys sorted, so dump() is canonical.
  return fnv1a(to_json().dump());
}

std::string RunConfig::hash_hex() const { return hex64(hash()); }

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw InvalidArgumentError(path.string() + ": " + e.what());
  }
}

RunConfig load_run_config(const fs::path& path) { return RunConfig::from_json(read_json_file(path), path.parent_path()); }

data::Dataset load_configured_data(const RunConfig& cfg) {
  if (!cfg.data.synthetic)
    return data::load_dataset(data::load_manifest(cfg.data.root), cfg.data.rows, cfg.data.cols, cfg.angle_divisor);

  const auto& src = *cfg.data.synthetic;
  data::Dataset ds = data::synthesize_dataset(src.spec, src.count);
  const bool resize = src.spec.rows != cfg.data.rows || src.spec.cols != cfg.data.cols;
  for (auto* part : {&ds.train, &ds.test}) {
    for (auto& s : *part) {
      if (cfg.angle_divisor != kDefaultAngleDivisor)
        s.angles = normalize_angles(s.angles.degrees(), cfg.angle_divisor);
      if (resize) {
        s.image = data::preprocess(s.image, cfg.data.rows, cfg.data.cols);
        if (s.mask) s.mask = data::resize_mask(*s.mask, cfg.data.rows, cfg.data.cols);
      }
    }
  }
  return ds;
}

}  // namespace spinecobb
