#include "spinecobb/segnet.hpp"

#include <algorithm>
#include <cmath>

namespace spinecobb {

namespace {

constexpr const char* kPrefix = "segnet";

struct UnitSpec {
  std::string name;
  int out_channels;
  int stride;
  bool residual;
};

struct PresetSpec {
  std::vector<UnitSpec> encoder;
  int default_output_stride;
  int branch_channels;
  int fuse_channels;
  int decode_channels;
};

PresetSpec preset_spec(const std::string& preset) {
  if (preset == "tiny")
    return {{{"enc1", 8, 1, false}, {"enc2", 16, 2, false}, {"enc3", 16, 2, false}}, 4, 8, 16, 8};
  if (preset == "small")
    return {{{"enc1", 16, 1, false},
             {"enc2", 32, 2, false},
             {"enc3", 32, 2, true},
             {"enc4", 64, 2, true}},
            8, 16, 32, 16};
  if (preset == "resnet50-like") {
    PresetSpec p{{{"stem", 32, 1, false}}, 8, 128, 256, 64};
    const int widths[] = {64, 128, 256, 512};
    const int repeats[] = {3, 4, 6, 3};
    for (int s = 0; s < 4; ++s)
      for (int r = 0; r < repeats[s]; ++r)
        p.encoder.push_back({"layer" + std::to_string(s + 1) + "_" + std::to_string(r), widths[s],
                             r == 0 ? 2 : 1, true});
    return p;
  }
  throw InvalidArgumentError("unknown segnet preset '" + preset + "'");
}

}  // namespace

void SegNetConfig::validate() const {
  (void)preset_spec(preset);
  if (!(lambda >= 0.0)) throw InvalidArgumentError("segnet lambda must be >= 0");
  if (dilations.empty()) throw InvalidArgumentError("segnet needs at least one dilation rate");
  for (int d : dilations)
    if (d < 1) throw InvalidArgumentError("segnet dilation rates must be >= 1");
  if (output_stride != 0 && (output_stride < 1 || (output_stride & (output_stride - 1)) != 0))
    throw InvalidArgumentError("segnet output_stride must be a power of two");
}

SegNet::SegNet(SegNetConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const PresetSpec spec = preset_spec(cfg_.preset);
  output_stride_ = cfg_.output_stride == 0 ? spec.default_output_stride : cfg_.output_stride;

  int in_ch = 1;
  int stride = 1;
  int dilation = 1;
  for (const UnitSpec& u : spec.encoder) {
    int s = u.stride;
    if (s == 2 && stride * 2 > output_stride_) {
      s = 1;
      dilation *= 2;  // keep the receptive field once downsampling stops
    }
    stride *= s;
    if (u.residual)
      encoder_.push_back(std::make_unique<nn::ResidualUnit>(u.name, in_ch, u.out_channels, s,
                                                            s == 1 ? dilation : 1));
    else
      encoder_.push_back(std::make_unique<nn::ConvUnit>(
          u.name, nn::ConvGeom{in_ch, u.out_channels, 3, s, s == 1 ? dilation : 1}, true));
    in_ch = u.out_channels;
  }
  if (stride != output_stride_)
    throw InvalidArgumentError("segnet preset '" + cfg_.preset + "' cannot reach output stride " +
                               std::to_string(output_stride_));

  if (cfg_.injection.empty()) {
    injection_ = encoder_.size() - 1;
  } else {
    auto it = std::find_if(encoder_.begin(), encoder_.end(),
                           [&](const nn::UnitPtr& u) { return u->name() == cfg_.injection; });
    if (it == encoder_.end())
      throw InvalidArgumentError("segnet injection layer '" + cfg_.injection + "' does not exist");
    injection_ = static_cast<std::size_t>(it - encoder_.begin());
  }
  injection_name_ = encoder_[injection_]->name();

  pyramid_ = std::make_unique<nn::PyramidUnit>("pyramid", in_ch, spec.branch_channels, cfg_.dilations);
  fuse_ = std::make_unique<nn::ConvUnit>(
      "fuse", nn::ConvGeom{pyramid_->out_channels(), spec.fuse_channels, 1, 1, 1}, true);
  const int skip_ch = encoder_.front()->out_channels();
  decode_ = std::make_unique<nn::ConvUnit>(
      "decode", nn::ConvGeom{spec.fuse_channels + skip_ch, spec.decode_channels, 3, 1, 1}, true);
  head_ = std::make_unique<nn::ConvUnit>("head", nn::ConvGeom{spec.decode_channels, 1, 1, 1, 1},
                                         false, 1.0);
}

std::vector<std::string> SegNet::encoder_unit_names() const {
  std::vector<std::string> names;
  for (const auto& u : encoder_) names.push_back(u->name());
  return names;
}

ParameterSet SegNet::init(std::uint64_t seed) const {
  ParameterSet params(NetworkRole::Segmenter);
  Rng rng(seed);
  for (const auto& u : encoder_) u->init(params, kPrefix, rng);
  pyramid_->init(params, kPrefix, rng);
  fuse_->init(params, kPrefix, rng);
  decode_->init(params, kPrefix, rng);
  head_->init(params, kPrefix, rng);
  params.add(kAlphaKey, {1}, 0.0);
  return params;
}

SegForward SegNet::forward(const ParameterSet& params, const Tensor& image, const Cam* cam,
                           Trace* trace) const {
  if (image.channels != 1) throw ShapeMismatchError("segnet expects a single-channel image");
  if (trace != nullptr) {
    trace->input = image;
    trace->encoder.assign(encoder_.size(), {});
    trace->cam.reset();
  }
  Tensor x = image;
  Tensor skip;
  MidFeature mid;
  for (std::size_t i = 0; i < encoder_.size(); ++i) {
    x = encoder_[i]->forward(params, kPrefix, x, trace ? &trace->encoder[i] : nullptr);
    if (i == 0) skip = x;
    if (i == injection_) {
      if (cam != nullptr) {
        Cam resampled{nn::resample_bilinear(cam->values, x.height, x.width),
                      cam->values.height == x.height && cam->values.width == x.width
                          ? cam->resolution
                          : CamResolution::Resampled};
        if (trace != nullptr) {
          trace->pre_gate = MidFeature{x};
          trace->cam = resampled;
        }
        x = roie_fuse(resampled, MidFeature{std::move(x)}, RoieGate{params.at(kAlphaKey).values[0]})
                .values;
      }
      mid.values = x;
    }
  }
  Tensor p = pyramid_->forward(params, kPrefix, x, trace ? &trace->pyramid : nullptr);
  Tensor f = fuse_->forward(params, kPrefix, p, trace ? &trace->fuse : nullptr);
  Tensor up = nn::resample_bilinear(f, skip.height, skip.width);
  const Tensor* parts[] = {&up, &skip};
  Tensor d = decode_->forward(params, kPrefix, concat_channels(parts), trace ? &trace->decode : nullptr);
  Tensor logit = head_->forward(params, kPrefix, d, trace ? &trace->head : nullptr);
  const int lr = logit.height, lc = logit.width;
  if (lr != image.height || lc != image.width) logit = nn::resample_bilinear(logit, image.height, image.width);
  for (double& v : logit.values) v = nn::sigmoid(v);
  if (trace != nullptr) {
    trace->skip = skip;
    trace->fused_rows = f.height;
    trace->fused_cols = f.width;
    trace->logit_rows = lr;
    trace->logit_cols = lc;
    trace->prob = logit;
  }
  return {SpineMask(std::move(logit), MaskKind::Predicted), std::move(mid)};
}

Tensor SegNet::backward(const ParameterSet& params, const Trace& trace, const Tensor& grad_prob,
                        GradientSet* grads, bool need_input_grad) const {
  if (!grad_prob.same_shape(trace.prob)) throw ShapeMismatchError("segnet backward: gradient shape");
  Tensor g = grad_prob;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double p = trace.prob.values[i];
    g.values[i] *= p * (1.0 - p);
  }
  g = nn::resample_bilinear_adjoint(g, trace.logit_rows, trace.logit_cols);
  g = head_->backward(params, kPrefix, trace.head, g, grads, true);
  Tensor g_cat = decode_->backward(params, kPrefix, trace.decode, g, grads, true);

  const int fuse_ch = fuse_->out_channels();
  const std::size_t plane = trace.skip.plane_size();
  Tensor g_up(fuse_ch, trace.skip.height, trace.skip.width);
  Tensor g_skip(trace.skip.channels, trace.skip.height, trace.skip.width);
  std::copy_n(g_cat.values.begin(), fuse_ch * plane, g_up.values.begin());
  std::copy(g_cat.values.begin() + static_cast<std::ptrdiff_t>(fuse_ch * plane), g_cat.values.end(),
            g_skip.values.begin());

  g = nn::resample_bilinear_adjoint(g_up, trace.fused_rows, trace.fused_cols);
  g = fuse_->backward(params, kPrefix, trace.fuse, g, grads, true);
  g = pyramid_->backward(params, kPrefix, trace.pyramid, g, grads, true);

  for (std::size_t k = encoder_.size(); k-- > 0;) {
    if (k == injection_ && trace.cam) {
      RoieFuseGrad rg = roie_fuse_backward(*trace.cam, trace.pre_gate,
                                           RoieGate{params.at(kAlphaKey).values[0]}, g);
      g = std::move(rg.grad_feature);
      if (grads != nullptr) grads->slot(kAlphaKey, 1)[0] += rg.grad_alpha;
    }
    if (k == 0)
      for (std::size_t i = 0; i < g.size(); ++i) g.values[i] += g_skip.values[i];
    g = encoder_[k]->backward(params, kPrefix, trace.encoder[k], g, grads, k > 0 || need_input_grad);
  }
  return g;
}

// ---------------------------------------------------------------------------

namespace {

void check_loss_inputs(const Tensor& pred, const Tensor& gt) {
  if (!pred.same_shape(gt))
    throw ShapeMismatchError("seg_loss: prediction " + pred.shape_string() + " vs ground truth " +
                             gt.shape_string());
  for (double v : gt.values)
    if (v != 0.0 && v != 1.0) throw OutOfRangeError("seg_loss: ground truth must be binary");
  for (double v : pred.values)
    if (!(v >= 0.0 && v <= 1.0)) throw OutOfRangeError("seg_loss: prediction outside [0,1]");
}

}  // namespace

SegLossParts seg_loss_parts(const Tensor& pred, const Tensor& gt, double lambda) {
  check_loss_inputs(pred, gt);
  double inter = 0.0, sum_p = 0.0, sum_g = 0.0, ce = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = pred.values[i];
    const double y = gt.values[i];
    inter += p * y;
    sum_p += p;
    sum_g += y;
    ce -= y == 1.0 ? std::log(std::max(p, kProbClamp)) : std::log(std::max(1.0 - p, kProbClamp));
  }
  SegLossParts parts;
  parts.dice = 1.0 - 2.0 * inter / (sum_p + sum_g + kDiceSmooth);
  parts.cross_entropy = ce / static_cast<double>(pred.size());
  parts.total = parts.dice + lambda * parts.cross_entropy;
  return parts;
}

double seg_loss(const SpineMask& pred, const SpineMask& gt, double lambda) {
  if (gt.kind() != MaskKind::GroundTruth) throw InvalidArgumentError("seg_loss: gt must be ground truth");
  return seg_loss_parts(pred.values(), gt.values(), lambda).total;
}

Tensor seg_loss_grad(const Tensor& pred, const Tensor& gt, double lambda) {
  check_loss_inputs(pred, gt);
  double inter = 0.0, sum_p = 0.0, sum_g = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    inter += pred.values[i] * gt.values[i];
    sum_p += pred.values[i];
    sum_g += gt.values[i];
  }
  const double denom = sum_p + sum_g + kDiceSmooth;
  const double n = static_cast<double>(pred.size());
  Tensor g(pred.channels, pred.height, pred.width);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = pred.values[i];
    const double y = gt.values[i];
    double dce = 0.0;
    if (y == 1.0) {
      if (p > kProbClamp) dce = -1.0 / p;
    } else if (1.0 - p > kProbClamp) {
      dce = 1.0 / (1.0 - p);
    }
    g.values[i] = -2.0 * (y * denom - inter) / (denom * denom) + lambda * dce / n;
  }
  return g;
}

}  // namespace spinecobb
