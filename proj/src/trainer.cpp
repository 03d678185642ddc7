#include "spinecobb/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>

#include "spinecobb/checkpoint.hpp"
#include "spinecobb/nn.hpp"

namespace spinecobb {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// SxCache
// ---------------------------------------------------------------------------

namespace {

std::string encode_plane(const Tensor& t) {
  std::string out(3 * sizeof(std::int32_t), '\0');
  const std::int32_t dims[3] = {t.channels, t.height, t.width};
  std::memcpy(out.data(), dims, sizeof(dims));
  out.append(reinterpret_cast<const char*>(t.values.data()), t.values.size() * sizeof(double));
  return out;
}

std::optional<Tensor> decode_plane(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  const std::string b((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::int32_t dims[3];
  if (b.size() < sizeof(dims)) return std::nullopt;
  std::memcpy(dims, b.data(), sizeof(dims));
  if (dims[0] <= 0 || dims[1] <= 0 || dims[2] <= 0) return std::nullopt;
  Tensor t(dims[0], dims[1], dims[2]);
  if (b.size() != sizeof(dims) + t.size() * sizeof(double)) return std::nullopt;
  std::memcpy(t.values.data(), b.data() + sizeof(dims), t.size() * sizeof(double));
  return t;
}

}  // namespace

SxCache::SxCache(std::optional<fs::path> disk_dir) : disk_dir_(std::move(disk_dir)) {}

SxCache SxCache::from_env() {
  const char* dir = std::getenv(kCacheEnvVar);
  if (dir == nullptr || *dir == '\0') return SxCache();
  return SxCache(fs::path(dir));
}

Tensor SxCache::get(const std::string& key, const std::string& source_id, const std::function<Tensor()>& compute) {
  const std::string mkey = key + "/" + source_id;
  if (auto it = memory_.find(mkey); it != memory_.end()) {
    ++hits_;
    return it->second;
  }
  if (disk_dir_) {
    if (auto t = decode_plane(*disk_dir_ / key / (source_id + ".bin"))) {
      ++hits_;
      return memory_[mkey] = std::move(*t);
    }
  }
  ++misses_;
  Tensor t = compute();
  if (disk_dir_) data::write_file_atomic(*disk_dir_ / key / (source_id + ".bin"), encode_plane(t));
  return memory_[mkey] = std::move(t);
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

Pipeline::Pipeline(const SegNet& seg, const RegNet& reg, const ParameterSet& theta1, const ParameterSet& theta2,
                   bool gate_active, InputMode mode)
    : seg_(seg), reg_(reg), theta1_(theta1), theta2_(theta2), gate_active_(gate_active), mode_(mode) {}

SpineMask Pipeline::segment_ungated(const Tensor& image) const { return seg_.forward(theta1_, image).mask; }

Cam Pipeline::branch_a_cam(const Tensor& image, const Tensor& mask) const {
  return extract_cam(reg_.forward(theta2_, compose_input(image, mask, mode_)).maps, reg_.config().cam_mode);
}

SpineMask Pipeline::segment(const Tensor& image) const {
  SpineMask s0 = segment_ungated(image);
  if (!gate_active_) return s0;
  const Cam cam = branch_a_cam(image, s0.values());
  return seg_.forward(theta1_, image, &cam).mask;
}

Pipeline::Output Pipeline::run(const Tensor& image) const {
  SpineMask mask = segment(image);
  RegForward r = reg_.forward(theta2_, compose_input(image, mask.values(), mode_));
  Cam cam = extract_cam(r.maps, reg_.config().cam_mode);
  return {std::move(mask), std::move(r), std::move(cam)};
}

// ---------------------------------------------------------------------------
// StageReport
// ---------------------------------------------------------------------------

json StageReport::to_json() const {
  json j{{"stage", stage},
         {"recipe", recipe},
         {"trains", trains},
         {"skipped", skipped},
         {"epochs", epochs},
         {"loss_curve", loss_curve},
         {"test_ar_curve", test_ar_curve},
         {"alpha", alpha},
         {"gate_active", gate_active},
         {"theta1_hash", theta1_hash},
         {"theta2_hash", theta2_hash},
         {"sx_cache_key", sx_cache_key},
         {"seconds", seconds}};
  if (eval) j["eval"] = eval->to_json();
  return j;
}

StageReport StageReport::from_json(const json& j) {
  StageReport r;
  r.stage = j.at("stage").get<int>();
  r.recipe = j.at("recipe").get<std::string>();
  r.trains = j.at("trains").get<std::string>();
  r.skipped = j.at("skipped").get<bool>();
  r.epochs = j.at("epochs").get<int>();
  r.loss_curve = j.at("loss_curve").get<std::vector<double>>();
  r.test_ar_curve = j.at("test_ar_curve").get<std::vector<double>>();
  r.alpha = j.at("alpha").get<double>();
  r.gate_active = j.at("gate_active").get<bool>();
  r.theta1_hash = j.at("theta1_hash").get<std::string>();
  r.theta2_hash = j.at("theta2_hash").get<std::string>();
  r.sx_cache_key = j.at("sx_cache_key").get<std::string>();
  r.seconds = j.at("seconds").get<double>();
  if (j.contains("eval")) r.eval = metrics::EvalReport::from_json(j.at("eval"));
  return r;
}

// ---------------------------------------------------------------------------
// Checkpoint directories
// ---------------------------------------------------------------------------

fs::path stage_dir(const fs::path& run_dir, int stage) { return run_dir / ("stage" + std::to_string(stage)); }

LoadedModel load_model(const fs::path& ckpt) {
  fs::path dir = ckpt;
  if (!fs::exists(dir / "segnet.bin")) {
    int best = 0;
    for (int k = 1; k <= kStageCount; ++k)
      if (fs::exists(stage_dir(ckpt, k) / "segnet.bin")) best = k;
    if (best == 0) throw IoError("no checkpoint found under " + ckpt.string());
    dir = stage_dir(ckpt, best);
  }
  CheckpointMeta m1, m2;
  LoadedModel out;
  out.theta1 = load_checkpoint(dir / "segnet.bin", &m1);
  out.theta2 = load_checkpoint(dir / "regnet.bin", &m2);
  if (out.theta1.role() != NetworkRole::Segmenter || out.theta2.role() != NetworkRole::Regressor)
    throw IoError("checkpoint roles are swapped in " + dir.string());
  if (m1.config_hash != m2.config_hash || m1.stage != m2.stage)
    throw StateError("segmenter and regressor checkpoints in " + dir.string() + " come from different runs");
  out.config = RunConfig::from_json(m1.config);
  if (out.config.hash_hex() != m1.config_hash)
    throw StateError("checkpoint config does not reproduce its stored hash");
  out.gate_active = m1.gate_active;
  out.stage = m1.stage;
  return out;
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

namespace {

// Stage 5 repeats stage 2, shuffles and augmentation draws included.
int random_stream(int stage) { return stage == 5 ? 2 : stage; }

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Tensor channel_plane(const Tensor& t, int c) {
  Tensor out = Tensor::plane(t.height, t.width);
  std::copy(t.channel(c).begin(), t.channel(c).end(), out.values.begin());
  return out;
}

}  // namespace

Trainer::Trainer(RunConfig cfg, data::Dataset data)
    : cfg_(std::move(cfg)), data_(std::move(data)), seg_(cfg_.segnet), reg_(cfg_.regnet), cache_(SxCache::from_env()) {
  cfg_.validate();
  if (data_.train.empty()) throw InvalidArgumentError("training split is empty");
  theta1_ = seg_.init(sample_seed(cfg_.schedule.seed, "segnet"));
  theta2_ = reg_.init(sample_seed(cfg_.schedule.seed, "regnet"));
}

void Trainer::set_state(const ParameterSet& theta1, const ParameterSet& theta2, bool gate_active, int completed) {
  if (theta1.role() != NetworkRole::Segmenter || theta2.role() != NetworkRole::Regressor)
    throw InvalidArgumentError("set_state: parameter roles are swapped");
  if (completed < 0 || completed > kStageCount) throw OutOfRangeError("set_state: stage out of range");
  theta1_ = theta1;
  theta2_ = theta2;
  gate_active_ = gate_active;
  completed_ = completed;
}

Pipeline Trainer::pipeline() const {
  return Pipeline(seg_, reg_, theta1_, theta2_, gate_active_, cfg_.variant.input);
}

std::string Trainer::cache_key() const {
  // The gated segmenter also depends on theta2 through the CAM.
  std::string key = hex64(theta1_.hash());
  if (gate_active_) key += "-" + hex64(theta2_.hash());
  return key;
}

Tensor Trainer::cached_sx(const data::Sample& s) {
  return cache_.get(sx_key_.empty() ? cache_key() : sx_key_, s.source_id(), [&] { return pipeline().segment(s.image.pixels()).values(); });
}

Cam Trainer::current_cam(const Tensor& image) const {
  // Ungated mask of the current theta1 through the frozen regressor. The CAM
  // is treated as a constant input to the gated pass.
  return pipeline().branch_a_cam(image, seg_.forward(theta1_, image).mask.values());
}

data::Augmented Trainer::training_view(const data::Sample& s, const Tensor& mask, int stage, int epoch) const {
  SpineMask m(mask, MaskKind::Predicted);
  if (!cfg_.data.augment) return {s.image, std::move(m), s.angles};
  const std::string tag = "aug/" + std::to_string(random_stream(stage)) + "/" + std::to_string(epoch);
  Rng rng(sample_seed(sample_seed(cfg_.schedule.seed, tag), s.source_id()));
  return data::augment(s.image, m, s.angles, cfg_.data.augmentation, rng);
}

StageReport Trainer::begin_stage(int stage) {
  if (stage < 1 || stage > kStageCount) throw OutOfRangeError("stage must be in 1..5");
  if (completed_ != stage - 1)
    throw StateError("stage " + std::to_string(stage) + " requires stage " + std::to_string(stage - 1) +
                     " to be complete (last completed: " + std::to_string(completed_) + ")");
  const StageSpec& spec = cfg_.schedule.stages[stage - 1];
  theta1_.set_frozen(spec.trains != NetworkRole::Segmenter);
  theta2_.set_frozen(spec.trains != NetworkRole::Regressor);
  StageReport r;
  r.stage = stage;
  r.recipe = recipe_name(spec.recipe);
  r.trains = std::string(role_name(spec.trains));
  r.epochs = spec.epochs;
  return r;
}

void Trainer::finish_stage(StageReport& r, double seconds) {
  theta1_.set_frozen(false);
  theta2_.set_frozen(false);
  completed_ = r.stage;
  r.alpha = theta1_.at(kAlphaKey).values[0];
  r.gate_active = gate_active_;
  r.theta1_hash = hex64(theta1_.hash());
  r.theta2_hash = hex64(theta2_.hash());
  if (!data_.test.empty()) r.eval = evaluate(data::Split::Test);
  r.seconds = seconds;
}

void Trainer::train_epochs(int stage, ParameterSet& trained, StageReport& report, const SampleLoss& fn,
                           const std::function<void(int)>& after_epoch) {
  const StageSpec& spec = cfg_.schedule.stages[stage - 1];
  nn::Adam opt(nn::AdamConfig{spec.learning_rate, 0.9, 0.999, 1e-8, spec.weight_decay});
  Rng rng(sample_seed(cfg_.schedule.seed, "stage" + std::to_string(random_stream(stage))));
  std::vector<std::size_t> order(data_.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t batch = static_cast<std::size_t>(cfg_.schedule.batch_size);

  auto diverged = [&](int epoch) {
    return DivergenceError("stage " + std::to_string(stage) + " epoch " + std::to_string(epoch + 1) +
                           ": parameters or loss became non-finite");
  };
  if (!trained.all_finite()) throw diverged(0);
  double first = 0.0;
  int runaway = 0;
  for (int epoch = 0; epoch < spec.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    std::size_t counted = 0;
    for (std::size_t b = 0; b < order.size(); b += batch) {
      GradientSet grads;
      double batch_loss = 0.0;
      std::size_t n = 0;
      for (std::size_t i = b; i < std::min(order.size(), b + batch); ++i) {
        const std::optional<double> l = fn(data_.train[order[i]], epoch, grads);
        if (!l) continue;  // sample not usable by this recipe
        batch_loss += *l;
        ++n;
      }
      if (n == 0) continue;
      grads.scale(1.0 / static_cast<double>(n));
      opt.step(trained, grads);
      if (!trained.all_finite()) throw diverged(epoch);
      total += batch_loss;
      counted += n;
    }
    if (counted == 0) throw InvalidArgumentError("no training sample is usable for stage " + std::to_string(stage));
    const double loss = total / static_cast<double>(counted);
    report.loss_curve.push_back(loss);
    if (!std::isfinite(loss)) throw diverged(epoch);
    if (epoch == 0) first = loss;
    runaway = loss > cfg_.schedule.divergence_factor * first ? runaway + 1 : 0;
    if (runaway >= cfg_.schedule.divergence_patience)
      throw DivergenceError("stage " + std::to_string(stage) + ": loss above " +
                            std::to_string(cfg_.schedule.divergence_factor) + "x its first-epoch value for " +
                            std::to_string(runaway) + " epochs");
    if (after_epoch) after_epoch(epoch);
    if (on_epoch) on_epoch(stage, epoch + 1, loss);
  }
}

StageReport Trainer::stage1_train_seg() {
  StageReport r = begin_stage(1);
  const auto t0 = std::chrono::steady_clock::now();
  const double lambda = cfg_.segnet.lambda;
  train_epochs(1, theta1_, r, [&](const data::Sample& s, int epoch, GradientSet& g) -> std::optional<double> {
    if (!s.mask) return std::nullopt;
    const data::Augmented v = training_view(s, s.mask->values(), 1, epoch);
    SegNet::Trace tr;
    const SegForward f = seg_.forward(theta1_, v.image.pixels(), nullptr, &tr);
    const double loss = seg_loss_parts(f.mask.values(), v.mask.values(), lambda).total;
    seg_.backward(theta1_, tr, seg_loss_grad(f.mask.values(), v.mask.values(), lambda), &g);
    return loss;
  });
  finish_stage(r, seconds_since(t0));
  return r;
}

double Trainer::mean_ar(data::Split split) {
  const auto& part = split == data::Split::Train ? data_.train : data_.test;
  if (part.empty()) return std::nan("");
  double sum = 0.0;
  for (const auto& s : part) {
    const SiamesePair pair = make_siamese_pair(s.image.pixels(), cached_sx(s), cfg_.variant.input);
    sum += siamese_step(reg_, theta2_, pair, s.angles, nullptr, true).loss.ar;
  }
  return sum / static_cast<double>(part.size());
}

StageReport Trainer::train_regressor(int stage) {
  StageReport r = begin_stage(stage);
  const auto t0 = std::chrono::steady_clock::now();
  // s(x) is fixed for the whole stage. With the gate active it depends on
  // theta2 as it was when the stage began, so fill the cache up front.
  sx_key_.clear();
  r.sx_cache_key = cache_key();
  for (const auto* part : {&data_.train, &data_.test})
    for (const auto& s : *part) cached_sx(s);
  sx_key_ = r.sx_cache_key;
  const bool use_ar = cfg_.variant.ar;
  train_epochs(
      stage, theta2_, r,
      [&](const data::Sample& s, int epoch, GradientSet& g) -> std::optional<double> {
        const data::Augmented v = training_view(s, cached_sx(s), stage, epoch);
        const SiamesePair pair = make_siamese_pair(v.image.pixels(), v.mask.values(), cfg_.variant.input);
        return siamese_step(reg_, theta2_, pair, v.angles, &g, use_ar).loss.total;
      },
      [&](int) {
        if (!data_.test.empty()) r.test_ar_curve.push_back(mean_ar(data::Split::Test));
      });
  sx_key_.clear();
  finish_stage(r, seconds_since(t0));
  return r;
}

StageReport Trainer::stage2_train_reg_with_ar() { return train_regressor(2); }

StageReport Trainer::stage3_finetune_seg_with_roie() {
  StageReport r = begin_stage(3);
  const auto t0 = std::chrono::steady_clock::now();
  // Without the gate this stage is a plain fine-tune of equal length, so the
  // comparison isolates the gate rather than the extra epochs.
  gate_active_ = cfg_.variant.roie;
  const double lambda = cfg_.segnet.lambda;
  train_epochs(3, theta1_, r, [&](const data::Sample& s, int epoch, GradientSet& g) -> std::optional<double> {
    if (!s.mask) return std::nullopt;
    const data::Augmented v = training_view(s, s.mask->values(), 3, epoch);
    const Tensor& x = v.image.pixels();
    std::optional<Cam> cam;
    if (gate_active_) cam = current_cam(x);
    SegNet::Trace tr;
    const SegForward f = seg_.forward(theta1_, x, cam ? &*cam : nullptr, &tr);
    const double loss = seg_loss_parts(f.mask.values(), v.mask.values(), lambda).total;
    seg_.backward(theta1_, tr, seg_loss_grad(f.mask.values(), v.mask.values(), lambda), &g);
    return loss;
  });
  finish_stage(r, seconds_since(t0));
  return r;
}

StageReport Trainer::stage4_finetune_seg_via_reg() {
  StageReport r = begin_stage(4);
  const auto t0 = std::chrono::steady_clock::now();
  if (!cfg_.variant.tcl) {
    r.skipped = true;
    finish_stage(r, seconds_since(t0));
    return r;
  }
  const double eps = cfg_.regnet.epsilon;
  train_epochs(4, theta1_, r, [&](const data::Sample& s, int epoch, GradientSet& g) -> std::optional<double> {
    if (!s.mask) return std::nullopt;
    const data::Augmented v = training_view(s, s.mask->values(), 4, epoch);
    const Tensor& x = v.image.pixels();
    const Tensor zeros = Tensor::plane(x.height, x.width);

    std::optional<Cam> cam;
    if (gate_active_) cam = current_cam(x);
    SegNet::Trace st;
    const SegForward f = seg_.forward(theta1_, x, cam ? &*cam : nullptr, &st);

    const RegForward target = reg_.forward(theta2_, compose_input(zeros, v.mask.values(), InputMode::MaskOnly));
    RegNet::Trace rt;
    const RegForward out =
        reg_.forward(theta2_, compose_input(zeros, f.mask.values(), InputMode::MaskOnly), &rt);
    const double loss = smape_loss(out.pred, target.pred, eps);
    // theta2 is frozen: only the input gradient is needed, channel 1 being s(x).
    const Tensor gin = reg_.backward(theta2_, rt, smape_loss_grad(out.pred, target.pred, eps), nullptr, nullptr, true);
    seg_.backward(theta1_, st, channel_plane(gin, 1), &g);
    return loss;
  });
  finish_stage(r, seconds_since(t0));
  return r;
}

StageReport Trainer::stage5_retrain_reg() {
  if (completed_ == 4 && !cfg_.variant.tcl) {
    StageReport r = begin_stage(5);
    r.skipped = true;
    finish_stage(r, 0.0);
    return r;
  }
  if (completed_ == 4 && cfg_.schedule.reinit_regressor_stage5)
    theta2_ = reg_.init(sample_seed(cfg_.schedule.seed, "regnet"));
  return train_regressor(5);
}

StageReport Trainer::run_stage(int stage) {
  switch (stage) {
    case 1: return stage1_train_seg();
    case 2: return stage2_train_reg_with_ar();
    case 3: return stage3_finetune_seg_with_roie();
    case 4: return stage4_finetune_seg_via_reg();
    case 5: return stage5_retrain_reg();
    default: throw OutOfRangeError("stage must be in 1..5");
  }
}

std::vector<StageReport> Trainer::run_schedule(const std::optional<fs::path>& run_dir, int last_stage) {
  if (last_stage < 1 || last_stage > kStageCount) throw OutOfRangeError("last stage must be in 1..5");
  if (run_dir) data::write_file_atomic(*run_dir / "config.json", cfg_.to_json().dump(2) + "\n");
  std::vector<StageReport> out;
  for (int k = completed_ + 1; k <= last_stage; ++k) {
    out.push_back(run_stage(k));
    if (run_dir) save_stage(*run_dir, out.back());
  }
  return out;
}

void Trainer::save_stage(const fs::path& run_dir, const StageReport& report) const {
  const fs::path dir = stage_dir(run_dir, report.stage);
  CheckpointMeta meta{cfg_.hash_hex(), report.stage, report.epochs, cfg_.schedule.seed, gate_active_, cfg_.to_json()};
  save_checkpoint(dir / "segnet.bin", theta1_, meta);
  save_checkpoint(dir / "regnet.bin", theta2_, meta);
  data::write_file_atomic(dir / "report.json", report.to_json().dump(2) + "\n");
}

void Trainer::resume(const fs::path& run_dir, int stage) {
  const fs::path dir = stage_dir(run_dir, stage);
  CheckpointMeta m1, m2;
  ParameterSet t1 = load_checkpoint(dir / "segnet.bin", &m1);
  ParameterSet t2 = load_checkpoint(dir / "regnet.bin", &m2);
  if (m1.config_hash != cfg_.hash_hex() || m2.config_hash != cfg_.hash_hex())
    throw StateError("checkpoint in " + dir.string() + " was written with config " + m1.config_hash +
                     ", this run uses " + cfg_.hash_hex());
  if (m1.stage != stage || m2.stage != stage) throw StateError("checkpoint stage mismatch in " + dir.string());
  set_state(t1, t2, m1.gate_active, stage);
}

metrics::EvalReport evaluate_samples(const Pipeline& pipeline, std::span<const data::Sample> samples,
                                     double angle_divisor) {
  if (samples.empty()) throw InvalidArgumentError("cannot evaluate an empty split");
  std::vector<std::string> ids;
  std::vector<AngleDegrees> preds, gts;
  std::vector<metrics::SegPair> seg;
  const bool all_masks =
      std::all_of(samples.begin(), samples.end(), [](const auto& s) { return s.mask.has_value(); });
  for (const auto& s : samples) {
    const Pipeline::Output o = pipeline.run(s.image.pixels());
    ids.push_back(s.source_id());
    preds.push_back(o.reg.triple().degrees(angle_divisor));
    gts.push_back(s.angles.degrees(angle_divisor));
    if (all_masks) seg.push_back({o.mask.values(), s.mask->values()});
  }
  return metrics::build_report(ids, preds, gts, seg);
}

metrics::EvalReport Trainer::evaluate(data::Split split) const {
  const auto& part = split == data::Split::Train ? data_.train : data_.test;
  return evaluate_samples(pipeline(), part, cfg_.angle_divisor);
}

}  // namespace spinecobb
