#include "spinecobb/regnet.hpp"

#include <algorithm>
#include <cmath>

namespace spinecobb {

namespace {

constexpr const char* kPrefix = "regnet";
constexpr double kHeadPrior = 0.2;

struct UnitSpec {
  std::string name;
  int out_channels;
  int stride;
  bool residual;
};

std::vector<UnitSpec> preset_units(const std::string& preset) {
  if (preset == "tiny")
    return {{"r1", 8, 1, false}, {"r2", 16, 2, false}, {"r3", 32, 2, false},
            {"r4", 32, 2, false}, {"r5", 32, 1, false}};
  if (preset == "resnet18-like") {
    std::vector<UnitSpec> u{{"stem", 64, 2, false}};
    const int widths[] = {64, 128, 256, 512};
    for (int s = 0; s < 4; ++s)
      for (int r = 0; r < 2; ++r)
        u.push_back({"layer" + std::to_string(s + 1) + "_" + std::to_string(r), widths[s],
                     (r == 0 && s > 0) ? 2 : 1, true});
    return u;
  }
  if (preset == "efficientnet-b1-like") {
    // Stage widths/depths/strides of B1; plain residual blocks stand in for MBConv.
    std::vector<UnitSpec> u{{"stem", 32, 2, false}};
    const int widths[] = {16, 24, 40, 80, 112, 192, 320};
    const int repeats[] = {2, 3, 3, 4, 4, 5, 2};
    const int strides[] = {1, 2, 2, 2, 1, 2, 1};
    for (int s = 0; s < 7; ++s)
      for (int r = 0; r < repeats[s]; ++r)
        u.push_back({"stage" + std::to_string(s + 1) + "_" + std::to_string(r), widths[s],
                     r == 0 ? strides[s] : 1, true});
    u.push_back({"top", 1280, 1, false});
    return u;
  }
  throw InvalidArgumentError("unknown regnet preset '" + preset + "'");
}

}  // namespace

CamMode parse_cam_mode(const std::string& name) {
  if (name == "sum") return CamMode::Sum;
  if (name == "channel0" || name == "pt") return CamMode::Channel0;
  if (name == "channel1" || name == "mt") return CamMode::Channel1;
  if (name == "channel2" || name == "tl") return CamMode::Channel2;
  throw InvalidArgumentError("unknown cam_mode '" + name + "'");
}

std::string cam_mode_name(CamMode mode) {
  switch (mode) {
    case CamMode::Sum: return "sum";
    case CamMode::Channel0: return "channel0";
    case CamMode::Channel1: return "channel1";
    case CamMode::Channel2: return "channel2";
  }
  return "sum";
}

void RegNetConfig::validate() const {
  (void)preset_units(preset);
  if (input_channels != 2) throw InvalidArgumentError("regnet input_channels must be 2");
  if (!(epsilon > 0.0)) throw InvalidArgumentError("regnet epsilon must be > 0");
  if (!(w_ar >= 0.0)) throw InvalidArgumentError("regnet w_ar must be >= 0");
}

RegNet::RegNet(RegNetConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  int in_ch = cfg_.input_channels;
  for (const UnitSpec& u : preset_units(cfg_.preset)) {
    if (u.residual)
      units_.push_back(std::make_unique<nn::ResidualUnit>(u.name, in_ch, u.out_channels, u.stride));
    else
      units_.push_back(std::make_unique<nn::ConvUnit>(
          u.name, nn::ConvGeom{in_ch, u.out_channels, 3, u.stride, 1}, true));
    in_ch = u.out_channels;
  }
  head_ = std::make_unique<nn::ConvUnit>("head", nn::ConvGeom{in_ch, 3, 1, 1, 1}, false, 1.0);
}

ParameterSet RegNet::init(std::uint64_t seed) const {
  ParameterSet params(NetworkRole::Regressor);
  Rng rng(seed);
  for (const auto& u : units_) u->init(params, kPrefix, rng);
  head_->init(params, kPrefix, rng);
  // Pooled logits start near a typical normalized angle.
  for (double& b : params.at(head_->key(kPrefix, "bias")).values) b = std::log(kHeadPrior / (1.0 - kHeadPrior));
  return params;
}

RegForward RegNet::forward(const ParameterSet& params, const Tensor& input, Trace* trace) const {
  if (input.channels != cfg_.input_channels)
    throw ShapeMismatchError("regnet expects " + std::to_string(cfg_.input_channels) +
                             " input channels, got " + std::to_string(input.channels));
  if (trace != nullptr) trace->units.assign(units_.size(), {});
  Tensor x = input;
  for (std::size_t i = 0; i < units_.size(); ++i)
    x = units_[i]->forward(params, kPrefix, x, trace ? &trace->units[i] : nullptr);
  RegForward out;
  // Logits come from the pooled raw maps. The exported evidence maps are
  // centred per channel: each channel carries its own offset (a small target
  // angle means a strongly negative logit), and left in, those offsets make
  // the channel sum negative everywhere so the ReLU in the CAM erases it.
  out.maps = head_->forward(params, kPrefix, x, trace ? &trace->head : nullptr);
  const Tensor pooled = nn::global_avg_pool(out.maps);
  for (int k = 0; k < 3; ++k) {
    out.pred[k] = nn::sigmoid(pooled.values[k]);
    for (double& v : out.maps.channel(k)) v -= pooled.values[k];
  }
  if (trace != nullptr) trace->pred = out.pred;
  return out;
}

Tensor RegNet::backward(const ParameterSet& params, const Trace& trace,
                        const std::array<double, 3>& grad_pred, const Tensor* grad_maps,
                        GradientSet* grads, bool need_input_grad) const {
  const Tensor& head_out = trace.head.saved.at(1);
  Tensor g_pool(3, 1, 1);
  for (int k = 0; k < 3; ++k) g_pool.values[k] = grad_pred[k] * trace.pred[k] * (1.0 - trace.pred[k]);
  Tensor g = nn::global_avg_pool_backward(g_pool, head_out.height, head_out.width);
  if (grad_maps != nullptr) {
    if (!grad_maps->same_shape(g)) throw ShapeMismatchError("regnet backward: map gradient shape");
    for (int k = 0; k < 3; ++k) {
      const auto gm = grad_maps->channel(k);
      double mean = 0.0;
      for (double v : gm) mean += v;
      mean /= static_cast<double>(gm.size());
      auto gk = g.channel(k);
      for (std::size_t i = 0; i < gk.size(); ++i) gk[i] += gm[i] - mean;
    }
  }
  g = head_->backward(params, kPrefix, trace.head, g, grads, true);
  for (std::size_t k = units_.size(); k-- > 0;)
    g = units_[k]->backward(params, kPrefix, trace.units[k], g, grads, k > 0 || need_input_grad);
  return g;
}

// ---------------------------------------------------------------------------

namespace {

Tensor cam_source(const Tensor& maps, CamMode mode) {
  if (maps.channels < 1) throw ShapeMismatchError("extract_cam: no channels");
  Tensor s = Tensor::plane(maps.height, maps.width);
  if (mode == CamMode::Sum) {
    for (int c = 0; c < maps.channels; ++c) {
      auto ch = maps.channel(c);
      for (std::size_t i = 0; i < ch.size(); ++i) s.values[i] += ch[i];
    }
  } else {
    const int c = static_cast<int>(mode) - 1;
    if (c >= maps.channels) throw ShapeMismatchError("extract_cam: channel out of range");
    auto ch = maps.channel(c);
    std::copy(ch.begin(), ch.end(), s.values.begin());
  }
  return s;
}

constexpr double kCamRangeGuard = 1e-12;

}  // namespace

Cam extract_cam(const Tensor& maps, CamMode mode) {
  Tensor r = cam_source(maps, mode);
  for (double& v : r.values) v = v > 0.0 ? v : 0.0;
  const auto [mn_it, mx_it] = std::minmax_element(r.values.begin(), r.values.end());
  const double mn = *mn_it, mx = *mx_it;
  if (mx - mn < kCamRangeGuard) {
    const double fill = mx > 0.0 ? 1.0 : 0.0;
    std::fill(r.values.begin(), r.values.end(), fill);
  } else {
    for (double& v : r.values) v = (v - mn) / (mx - mn);
  }
  return {std::move(r), CamResolution::Native};
}

Tensor extract_cam_backward(const Tensor& maps, const Tensor& grad_cam, CamMode mode) {
  Tensor s = cam_source(maps, mode);
  if (grad_cam.size() != s.size()) throw ShapeMismatchError("extract_cam_backward: gradient shape");
  Tensor r = s;
  for (double& v : r.values) v = v > 0.0 ? v : 0.0;
  const auto mn_it = std::min_element(r.values.begin(), r.values.end());
  const auto mx_it = std::max_element(r.values.begin(), r.values.end());
  const double mn = *mn_it, mx = *mx_it;
  Tensor g_maps(maps.channels, maps.height, maps.width);
  const double range = mx - mn;
  if (range < kCamRangeGuard) return g_maps;
  const std::size_t jmin = static_cast<std::size_t>(mn_it - r.values.begin());
  const std::size_t jmax = static_cast<std::size_t>(mx_it - r.values.begin());

  double sum_g = 0.0, sum_gc = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    sum_g += grad_cam.values[i];
    sum_gc += grad_cam.values[i] * (r.values[i] - mn) / range;
  }
  Tensor g_r = Tensor::plane(s.height, s.width);
  for (std::size_t j = 0; j < r.size(); ++j) g_r.values[j] = grad_cam.values[j] / range;
  g_r.values[jmin] += (-sum_g + sum_gc) / range;
  g_r.values[jmax] += -sum_gc / range;
  for (std::size_t j = 0; j < r.size(); ++j)
    if (!(s.values[j] > 0.0)) g_r.values[j] = 0.0;

  if (mode == CamMode::Sum) {
    for (int c = 0; c < maps.channels; ++c) {
      auto ch = g_maps.channel(c);
      std::copy(g_r.values.begin(), g_r.values.end(), ch.begin());
    }
  } else {
    auto ch = g_maps.channel(static_cast<int>(mode) - 1);
    std::copy(g_r.values.begin(), g_r.values.end(), ch.begin());
  }
  return g_maps;
}

Cam resample_cam(const Cam& cam, int rows, int cols) {
  if (cam.values.height == rows && cam.values.width == cols) return cam;
  Tensor t = nn::resample_bilinear(cam.values, rows, cols);
  for (double& v : t.values) v = std::clamp(v, 0.0, 1.0);
  return {std::move(t), CamResolution::Resampled};
}

// ---------------------------------------------------------------------------

double smape_loss(const std::array<double, 3>& pred, const std::array<double, 3>& gt, double epsilon) {
  double num = 0.0, den = 0.0;
  for (int i = 0; i < 3; ++i) {
    num += std::abs(gt[i] - pred[i]);
    den += std::abs(gt[i] + pred[i] + epsilon);
  }
  return num == 0.0 ? 0.0 : num / den;
}

double smape_loss(const CobbTriple& pred, const CobbTriple& gt, double epsilon) {
  return smape_loss(pred.normalized(), gt.normalized(), epsilon);
}

std::array<double, 3> smape_loss_grad(const std::array<double, 3>& pred, const std::array<double, 3>& gt,
                                      double epsilon) {
  double num = 0.0, den = 0.0;
  for (int i = 0; i < 3; ++i) {
    num += std::abs(gt[i] - pred[i]);
    den += std::abs(gt[i] + pred[i] + epsilon);
  }
  std::array<double, 3> g{};
  if (den == 0.0) return g;
  auto sign = [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); };
  for (int i = 0; i < 3; ++i) {
    const double dnum = -sign(gt[i] - pred[i]);
    const double dden = sign(gt[i] + pred[i] + epsilon);
    g[i] = (dnum * den - num * dden) / (den * den);
  }
  return g;
}

// ---------------------------------------------------------------------------

InputMode parse_input_mode(const std::string& name) {
  if (name == "img+seg") return InputMode::ImageAndMask;
  if (name == "img") return InputMode::ImageOnly;
  if (name == "seg") return InputMode::MaskOnly;
  throw InvalidArgumentError("unknown input mode '" + name + "' (img | seg | img+seg)");
}

std::string input_mode_name(InputMode mode) {
  switch (mode) {
    case InputMode::ImageAndMask: return "img+seg";
    case InputMode::ImageOnly: return "img";
    case InputMode::MaskOnly: return "seg";
  }
  return "img+seg";
}

Tensor compose_input(const Tensor& image, const Tensor& mask, InputMode mode) {
  if (image.channels != 1 || mask.channels != 1 || image.height != mask.height || image.width != mask.width)
    throw ShapeMismatchError("compose_input: image " + image.shape_string() + " vs mask " +
                             mask.shape_string());
  Tensor out(2, image.height, image.width);
  if (mode != InputMode::MaskOnly) std::copy(image.values.begin(), image.values.end(), out.channel(0).begin());
  if (mode != InputMode::ImageOnly) std::copy(mask.values.begin(), mask.values.end(), out.channel(1).begin());
  return out;
}

SiamesePair make_siamese_pair(const Tensor& image, const Tensor& mask, InputMode mode) {
  return {compose_input(image, mask, mode), compose_input(image, mask, InputMode::MaskOnly)};
}

SiameseResult siamese_step(const RegNet& net, const ParameterSet& params, const SiamesePair& pair,
                           const CobbTriple& gt, GradientSet* grads, bool use_ar) {
  if (!pair.branch_a.same_shape(pair.branch_b))
    throw ShapeMismatchError("siamese_step: branch inputs differ in shape");
  const RegNetConfig& cfg = net.config();
  const bool need_grad = grads != nullptr;
  RegNet::Trace ta, tb;
  SiameseResult res;
  res.out_a = net.forward(params, pair.branch_a, need_grad ? &ta : nullptr);
  res.cam_a = extract_cam(res.out_a.maps, cfg.cam_mode);
  res.loss.smape_a = smape_loss(res.out_a.pred, gt.normalized(), cfg.epsilon);
  if (!use_ar) {
    res.loss.total = res.loss.smape_a;
    if (need_grad)
      net.backward(params, ta, smape_loss_grad(res.out_a.pred, gt.normalized(), cfg.epsilon), nullptr, grads);
    return res;
  }
  res.out_b = net.forward(params, pair.branch_b, need_grad ? &tb : nullptr);
  res.cam_b = extract_cam(res.out_b.maps, cfg.cam_mode);
  res.loss.smape_b = smape_loss(res.out_b.pred, gt.normalized(), cfg.epsilon);
  res.loss.ar = ar_loss(res.cam_a, res.cam_b);
  res.loss.total = res.loss.smape_a + res.loss.smape_b + cfg.w_ar * res.loss.ar;
  if (need_grad) {
    const auto ga = smape_loss_grad(res.out_a.pred, gt.normalized(), cfg.epsilon);
    const auto gb = smape_loss_grad(res.out_b.pred, gt.normalized(), cfg.epsilon);
    Tensor gmaps_a, gmaps_b;
    const Tensor* pa = nullptr;
    const Tensor* pb = nullptr;
    if (cfg.w_ar != 0.0) {
      ArLossGrad arg = ar_loss_grad(res.cam_a, res.cam_b);
      for (double& v : arg.grad_a.values) v *= cfg.w_ar;
      for (double& v : arg.grad_b.values) v *= cfg.w_ar;
      gmaps_a = extract_cam_backward(res.out_a.maps, arg.grad_a, cfg.cam_mode);
      gmaps_b = extract_cam_backward(res.out_b.maps, arg.grad_b, cfg.cam_mode);
      pa = &gmaps_a;
      pb = &gmaps_b;
    }
    net.backward(params, ta, ga, pa, grads);
    net.backward(params, tb, gb, pb, grads);
  }
  return res;
}

}  // namespace spinecobb
