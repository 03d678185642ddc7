#pragma once

// Cross-task couplings between the two networks: CAM agreement between the
// Siamese regressor branches, and CAM-gated fusion into the segmenter.

#include "spinecobb/core.hpp"

namespace spinecobb {

/// Feature map taken from the segmenter's injection layer (C x h x w).
struct MidFeature {
  Tensor values;
};

/// Learnable gate strength. Lives in the segmenter's ParameterSet under
/// kAlphaKey and starts at exactly zero.
struct RoieGate {
  double alpha = 0.0;
};

inline constexpr const char* kAlphaKey = "segnet/roie/alpha";

/// Mean absolute difference between two CAMs of equal resolution.
double ar_loss(const Cam& a, const Cam& b);

struct ArLossGrad {
  Tensor grad_a;
  Tensor grad_b;
};

/// Subgradient of ar_loss; ties contribute zero.
ArLossGrad ar_loss_grad(const Cam& a, const Cam& b);

/// f' = alpha * (cam o f) + f, the single-channel cam broadcast over channels.
/// The cam must already match the feature's spatial size.
MidFeature roie_fuse(const Cam& cam, const MidFeature& feature, const RoieGate& gate);

struct RoieFuseGrad {
  Tensor grad_feature;
  double grad_alpha = 0.0;
  Tensor grad_cam;
};

RoieFuseGrad roie_fuse_backward(const Cam& cam, const MidFeature& feature, const RoieGate& gate,
                                const Tensor& grad_out);

}  // namespace spinecobb
