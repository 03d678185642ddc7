#pragma once

// Minimal fp64 convolutional building blocks with explicit backward passes.
// Every unit caches what its backward needs in a UnitCache owned by the
// caller, so several forward passes (e.g. Siamese branches) can share one
// ParameterSet without interfering.

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "spinecobb/core.hpp"

namespace spinecobb::nn {

struct ConvGeom {
  int in_channels = 1;
  int out_channels = 1;
  int kernel = 3;
  int stride = 1;
  int dilation = 1;

  int pad() const { return dilation * (kernel - 1) / 2; }
  int out_size(int in) const { return (in + 2 * pad() - dilation * (kernel - 1) - 1) / stride + 1; }
  int fan_in() const { return in_channels * kernel * kernel; }
};

Tensor conv2d_forward(const Tensor& x, std::span<const double> weight, std::span<const double> bias,
                      const ConvGeom& g);

/// Accumulates into grad_weight / grad_bias when non-empty; writes grad_input when non-null.
void conv2d_backward(const Tensor& x, std::span<const double> weight, const Tensor& grad_out,
                     const ConvGeom& g, std::span<double> grad_weight, std::span<double> grad_bias,
                     Tensor* grad_input);

void relu_inplace(Tensor& t);
/// Zeroes grad where the ReLU output was not positive.
void relu_backward_inplace(Tensor& grad, const Tensor& relu_out);

double sigmoid(double z);

/// Bilinear resampling with half-pixel centres and edge clamping.
Tensor resample_bilinear(const Tensor& x, int out_h, int out_w);
/// Exact adjoint of resample_bilinear.
Tensor resample_bilinear_adjoint(const Tensor& grad_out, int in_h, int in_w);

/// Per-channel spatial mean; returns a C x 1 x 1 tensor.
Tensor global_avg_pool(const Tensor& x);
Tensor global_avg_pool_backward(const Tensor& grad_out, int h, int w);

// ---------------------------------------------------------------------------
// Units
// ---------------------------------------------------------------------------

struct UnitCache {
  std::vector<Tensor> saved;
};

class Unit {
 public:
  explicit Unit(std::string name) : name_(std::move(name)) {}
  virtual ~Unit() = default;

  const std::string& name() const { return name_; }

  virtual void init(ParameterSet& params, const std::string& prefix, Rng& rng) const = 0;
  virtual Tensor forward(const ParameterSet& params, const std::string& prefix, const Tensor& x,
                         UnitCache* cache) const = 0;
  /// grads may be null (frozen parameters); input gradient only when requested.
  virtual Tensor backward(const ParameterSet& params, const std::string& prefix,
                          const UnitCache& cache, const Tensor& grad_out, GradientSet* grads,
                          bool need_input_grad) const = 0;
  virtual int out_channels() const = 0;
  virtual int stride() const = 0;

  std::string key(const std::string& prefix, const std::string& param) const {
    return prefix + "/" + name_ + "/" + param;
  }

 private:
  std::string name_;
};

using UnitPtr = std::unique_ptr<Unit>;

/// Convolution with optional trailing ReLU.
class ConvUnit : public Unit {
 public:
  ConvUnit(std::string name, ConvGeom geom, bool relu, double init_gain = 2.0);

  void init(ParameterSet& params, const std::string& prefix, Rng& rng) const override;
  Tensor forward(const ParameterSet& params, const std::string& prefix, const Tensor& x,
                 UnitCache* cache) const override;
  Tensor backward(const ParameterSet& params, const std::string& prefix, const UnitCache& cache,
                  const Tensor& grad_out, GradientSet* grads, bool need_input_grad) const override;
  int out_channels() const override { return geom_.out_channels; }
  int stride() const override { return geom_.stride; }
  const ConvGeom& geom() const { return geom_; }

 private:
  ConvGeom geom_;
  bool relu_;
  double init_gain_;
};

/// Basic residual block: relu(conv-relu-conv(x) + proj(x)).
class ResidualUnit : public Unit {
 public:
  ResidualUnit(std::string name, int in_channels, int out_channels, int stride, int dilation = 1);

  void init(ParameterSet& params, const std::string& prefix, Rng& rng) const override;
  Tensor forward(const ParameterSet& params, const std::string& prefix, const Tensor& x,
                 UnitCache* cache) const override;
  Tensor backward(const ParameterSet& params, const std::string& prefix, const UnitCache& cache,
                  const Tensor& grad_out, GradientSet* grads, bool need_input_grad) const override;
  int out_channels() const override { return second_.geom().out_channels; }
  int stride() const override { return first_.geom().stride; }

 private:
  ConvUnit first_;
  ConvUnit second_;
  std::unique_ptr<ConvUnit> projection_;
};

/// Pyramid context module with dilated convolutions in place of pooling.
/// Output = concat(x, relu(conv_d1(x)), relu(conv_d2(x)), ...).
class PyramidUnit : public Unit {
 public:
  PyramidUnit(std::string name, int in_channels, int branch_channels, std::vector<int> dilations);

  void init(ParameterSet& params, const std::string& prefix, Rng& rng) const override;
  Tensor forward(const ParameterSet& params, const std::string& prefix, const Tensor& x,
                 UnitCache* cache) const override;
  Tensor backward(const ParameterSet& params, const std::string& prefix, const UnitCache& cache,
                  const Tensor& grad_out, GradientSet* grads, bool need_input_grad) const override;
  int out_channels() const override;
  int stride() const override { return 1; }

 private:
  int in_channels_;
  std::vector<ConvUnit> branches_;
};

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  /// L2 penalty folded into the gradient.
  double weight_decay = 0.0;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  /// No-op when params is frozen. Entries without a gradient are skipped.
  void step(ParameterSet& params, const GradientSet& grads);
  long steps() const { return t_; }

 private:
  AdamConfig cfg_;
  long t_ = 0;
  std::map<std::string, std::vector<double>> m_;
  std::map<std::string, std::vector<double>> v_;
};

}  // namespace spinecobb::nn
