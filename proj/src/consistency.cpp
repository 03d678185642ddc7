#include "spinecobb/consistency.hpp"

#include <cmath>

namespace spinecobb {

namespace {

void check_same(const Cam& a, const Cam& b) {
  if (!a.values.same_shape(b.values))
    throw ShapeMismatchError("ar_loss: CAM resolution mismatch " + a.values.shape_string() + " vs " +
                             b.values.shape_string());
  if (a.values.size() == 0) throw ShapeMismatchError("ar_loss: empty CAM");
}

void check_gate_inputs(const Cam& cam, const MidFeature& feature) {
  const Tensor& c = cam.values;
  const Tensor& f = feature.values;
  if (c.channels != 1 || c.height != f.height || c.width != f.width)
    throw ShapeMismatchError("roie_fuse: CAM " + c.shape_string() + " does not match feature " +
                             f.shape_string());
  if (!c.all_finite()) throw OutOfRangeError("roie_fuse: non-finite CAM values");
}

}  // namespace

double ar_loss(const Cam& a, const Cam& b) {
  check_same(a, b);
  double s = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) s += std::abs(a.values.values[i] - b.values.values[i]);
  return s / static_cast<double>(a.values.size());
}

ArLossGrad ar_loss_grad(const Cam& a, const Cam& b) {
  check_same(a, b);
  const double inv_n = 1.0 / static_cast<double>(a.values.size());
  ArLossGrad g{Tensor(a.values.channels, a.values.height, a.values.width),
               Tensor(a.values.channels, a.values.height, a.values.width)};
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    const double d = a.values.values[i] - b.values.values[i];
    const double s = d > 0.0 ? inv_n : (d < 0.0 ? -inv_n : 0.0);
    g.grad_a.values[i] = s;
    g.grad_b.values[i] = -s;
  }
  return g;
}

MidFeature roie_fuse(const Cam& cam, const MidFeature& feature, const RoieGate& gate) {
  check_gate_inputs(cam, feature);
  const Tensor& f = feature.values;
  MidFeature out{f};
  if (gate.alpha == 0.0) return out;
  const std::size_t plane = f.plane_size();
  for (int ch = 0; ch < f.channels; ++ch) {
    for (std::size_t i = 0; i < plane; ++i) {
      const std::size_t k = ch * plane + i;
      out.values.values[k] = gate.alpha * (cam.values.values[i] * f.values[k]) + f.values[k];
    }
  }
  return out;
}

RoieFuseGrad roie_fuse_backward(const Cam& cam, const MidFeature& feature, const RoieGate& gate,
                                const Tensor& grad_out) {
  check_gate_inputs(cam, feature);
  const Tensor& f = feature.values;
  if (!grad_out.same_shape(f)) throw ShapeMismatchError("roie_fuse_backward: gradient shape");
  RoieFuseGrad g{Tensor(f.channels, f.height, f.width), 0.0, Tensor::plane(f.height, f.width)};
  const std::size_t plane = f.plane_size();
  for (int ch = 0; ch < f.channels; ++ch) {
    for (std::size_t i = 0; i < plane; ++i) {
      const std::size_t k = ch * plane + i;
      const double c = cam.values.values[i];
      g.grad_feature.values[k] = grad_out.values[k] * (gate.alpha * c + 1.0);
      g.grad_alpha += grad_out.values[k] * c * f.values[k];
      g.grad_cam.values[i] += grad_out.values[k] * gate.alpha * f.values[k];
    }
  }
  return g;
}

}  // namespace spinecobb
