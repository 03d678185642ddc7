#pragma once

// Regression network: classification-style backbone whose last convolution
// emits one spatial map per Cobb angle; global average pooling and a sigmoid
// turn the maps into the three normalized angles. The same maps feed the CAM.

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "spinecobb/consistency.hpp"
#include "spinecobb/core.hpp"
#include "spinecobb/nn.hpp"

namespace spinecobb {

enum class CamMode { Sum, Channel0, Channel1, Channel2 };

CamMode parse_cam_mode(const std::string& name);
std::string cam_mode_name(CamMode mode);

struct RegNetConfig {
  /// tiny | resnet18-like | efficientnet-b1-like
  std::string preset = "tiny";
  int input_channels = 2;
  /// SMAPE smoothing term.
  double epsilon = 1e-8;
  CamMode cam_mode = CamMode::Sum;
  double w_ar = 1.0;

  void validate() const;
};

struct RegForward {
  std::array<double, 3> pred{};  // sigmoid outputs in (0, 1)
  Tensor maps;                   // 3 x h x w evidence maps, each channel centred

  CobbTriple triple() const { return {pred[0], pred[1], pred[2]}; }
};

class RegNet {
 public:
  explicit RegNet(RegNetConfig cfg);

  const RegNetConfig& config() const { return cfg_; }
  ParameterSet init(std::uint64_t seed) const;

  struct Trace {
    std::vector<nn::UnitCache> units;
    nn::UnitCache head;
    std::array<double, 3> pred{};
  };

  /// input: input_channels x H x W.
  RegForward forward(const ParameterSet& params, const Tensor& input, Trace* trace = nullptr) const;

  /// grad_pred: dLoss/dpred. grad_maps (optional, same shape as maps) adds
  /// gradient arriving through the CAM. Returns the input gradient on request.
  Tensor backward(const ParameterSet& params, const Trace& trace, const std::array<double, 3>& grad_pred,
                  const Tensor* grad_maps, GradientSet* grads, bool need_input_grad = false) const;

 private:
  RegNetConfig cfg_;
  std::vector<nn::UnitPtr> units_;
  std::unique_ptr<nn::ConvUnit> head_;
};

// ---------------------------------------------------------------------------
// CAM
// ---------------------------------------------------------------------------

/// Min-max normalized ReLU of the channel sum (or one channel in per-channel
/// modes). Maps whose ReLU is constant produce a constant 0 or 1 map.
Cam extract_cam(const Tensor& maps, CamMode mode = CamMode::Sum);
/// Gradient of <grad_cam, extract_cam(maps)> with respect to maps.
Tensor extract_cam_backward(const Tensor& maps, const Tensor& grad_cam, CamMode mode = CamMode::Sum);
Cam resample_cam(const Cam& cam, int rows, int cols);

// ---------------------------------------------------------------------------
// SMAPE loss: sum|gt - pred| / sum|gt + pred + eps| over the three angles
// ---------------------------------------------------------------------------

double smape_loss(const std::array<double, 3>& pred, const std::array<double, 3>& gt, double epsilon);
double smape_loss(const CobbTriple& pred, const CobbTriple& gt, double epsilon);
std::array<double, 3> smape_loss_grad(const std::array<double, 3>& pred, const std::array<double, 3>& gt,
                                      double epsilon);

// ---------------------------------------------------------------------------
// Siamese AR training step
// ---------------------------------------------------------------------------

/// Composition of the regressor's branch-A input.
enum class InputMode { ImageAndMask, ImageOnly, MaskOnly };

InputMode parse_input_mode(const std::string& name);
std::string input_mode_name(InputMode mode);

/// Channel 0 image, channel 1 mask; the channel dropped by the mode is zero.
Tensor compose_input(const Tensor& image, const Tensor& mask, InputMode mode);

struct SiamesePair {
  Tensor branch_a;  // image (+) mask per InputMode
  Tensor branch_b;  // zeros (+) mask
};

SiamesePair make_siamese_pair(const Tensor& image, const Tensor& mask,
                              InputMode mode = InputMode::ImageAndMask);

struct SiameseLoss {
  double smape_a = 0.0;
  double smape_b = 0.0;
  double ar = 0.0;
  double total = 0.0;
};

struct SiameseResult {
  SiameseLoss loss;
  RegForward out_a;
  RegForward out_b;
  Cam cam_a;
  Cam cam_b;
};

/// total = smape_a + smape_b + w_ar * ar. With use_ar false only branch A
/// runs and total = smape_a. Gradients w.r.t. the shared parameters are
/// accumulated into grads when non-null.
SiameseResult siamese_step(const RegNet& net, const ParameterSet& params, const SiamesePair& pair,
                           const CobbTriple& gt, GradientSet* grads, bool use_ar = true);

}  // namespace spinecobb
