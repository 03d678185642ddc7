#pragma once

// Segmentation network: encoder -> dilated pyramid context -> decoder with a
// full-resolution skip. The ROIE gate can be attached at any encoder unit.

#include <optional>
#include <string>
#include <vector>

#include "spinecobb/consistency.hpp"
#include "spinecobb/core.hpp"
#include "spinecobb/nn.hpp"

namespace spinecobb {

struct SegNetConfig {
  /// tiny | small | resnet50-like
  std::string preset = "tiny";
  std::vector<int> dilations{1, 2, 4};
  /// Encoder unit receiving the gate; empty selects the deepest one.
  std::string injection;
  /// 0 selects the preset default.
  int output_stride = 0;
  /// Cross-entropy weight.
  double lambda = 1.0;

  void validate() const;
};

struct SegForward {
  SpineMask mask;          // sigmoid output at input resolution
  MidFeature mid_feature;  // gated feature when a CAM was supplied
};

class SegNet {
 public:
  explicit SegNet(SegNetConfig cfg);

  const SegNetConfig& config() const { return cfg_; }
  int output_stride() const { return output_stride_; }
  const std::string& injection_unit() const { return injection_name_; }
  std::vector<std::string> encoder_unit_names() const;

  ParameterSet init(std::uint64_t seed) const;

  struct Trace {
    Tensor input;
    std::vector<nn::UnitCache> encoder;
    MidFeature pre_gate;
    std::optional<Cam> cam;  // resampled to the feature resolution
    nn::UnitCache pyramid, fuse, decode, head;
    Tensor skip;
    int fused_rows = 0, fused_cols = 0;
    int logit_rows = 0, logit_cols = 0;
    Tensor prob;
  };

  /// image: 1 x H x W. With cam, the injection feature is replaced by
  /// roie_fuse(cam, f_m, alpha) using the alpha stored in params.
  SegForward forward(const ParameterSet& params, const Tensor& image, const Cam* cam = nullptr,
                     Trace* trace = nullptr) const;

  /// grad_prob: dLoss/dprob at input resolution. Accumulates parameter
  /// gradients (including alpha when gated) into grads when non-null.
  Tensor backward(const ParameterSet& params, const Trace& trace, const Tensor& grad_prob,
                  GradientSet* grads, bool need_input_grad = false) const;

 private:
  SegNetConfig cfg_;
  int output_stride_ = 4;
  std::vector<nn::UnitPtr> encoder_;
  std::size_t injection_ = 0;
  std::string injection_name_;
  std::unique_ptr<nn::PyramidUnit> pyramid_;
  std::unique_ptr<nn::ConvUnit> fuse_, decode_, head_;
};

// ---------------------------------------------------------------------------
// Loss: global soft Dice + lambda * mean binary cross-entropy
// ---------------------------------------------------------------------------

inline constexpr double kDiceSmooth = 1e-7;
inline constexpr double kProbClamp = 1e-7;

struct SegLossParts {
  double dice = 0.0;
  double cross_entropy = 0.0;
  double total = 0.0;
};

SegLossParts seg_loss_parts(const Tensor& pred, const Tensor& gt, double lambda);
double seg_loss(const SpineMask& pred, const SpineMask& gt, double lambda);
/// d seg_loss / d pred.
Tensor seg_loss_grad(const Tensor& pred, const Tensor& gt, double lambda);

}  // namespace spinecobb
