#include "spinecobb/nn.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>

namespace spinecobb::nn {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMatrix = Eigen::Map<RowMatrix>;
using ConstMapMatrix = Eigen::Map<const RowMatrix>;

// Rows: (c, ki, kj); columns: output pixels.
RowMatrix im2col(const Tensor& x, const ConvGeom& g, int out_h, int out_w) {
  const int k = g.kernel;
  const int pad = g.pad();
  RowMatrix cols(static_cast<Eigen::Index>(g.in_channels) * k * k,
                 static_cast<Eigen::Index>(out_h) * out_w);
  for (int c = 0; c < g.in_channels; ++c) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        double* row = cols.row((c * k + ki) * k + kj).data();
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * g.stride - pad + ki * g.dilation;
          for (int ox = 0; ox < out_w; ++ox) {
            const int ix = ox * g.stride - pad + kj * g.dilation;
            row[oy * out_w + ox] = (iy >= 0 && iy < x.height && ix >= 0 && ix < x.width)
                                       ? x.at(c, iy, ix)
                                       : 0.0;
          }
        }
      }
    }
  }
  return cols;
}

void col2im(const RowMatrix& cols, const ConvGeom& g, int out_h, int out_w, Tensor& gx) {
  const int k = g.kernel;
  const int pad = g.pad();
  for (int c = 0; c < g.in_channels; ++c) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        const double* row = cols.row((c * k + ki) * k + kj).data();
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * g.stride - pad + ki * g.dilation;
          if (iy < 0 || iy >= gx.height) continue;
          for (int ox = 0; ox < out_w; ++ox) {
            const int ix = ox * g.stride - pad + kj * g.dilation;
            if (ix < 0 || ix >= gx.width) continue;
            gx.at(c, iy, ix) += row[oy * out_w + ox];
          }
        }
      }
    }
  }
}

bool is_pointwise(const ConvGeom& g) { return g.kernel == 1 && g.stride == 1; }

struct AxisWeights {
  std::vector<int> lo, hi;
  std::vector<double> frac;
};

AxisWeights axis_weights(int in, int out) {
  AxisWeights a;
  a.lo.resize(out);
  a.hi.resize(out);
  a.frac.resize(out);
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const int i0 = static_cast<int>(std::floor(src));
    a.lo[o] = i0;
    a.hi[o] = std::min(i0 + 1, in - 1);
    a.frac[o] = src - i0;
  }
  return a;
}

}  // namespace

Tensor conv2d_forward(const Tensor& x, std::span<const double> weight, std::span<const double> bias,
                      const ConvGeom& g) {
  if (x.channels != g.in_channels)
    throw ShapeMismatchError("conv2d: expected " + std::to_string(g.in_channels) +
                             " input channels, got " + std::to_string(x.channels));
  const int oh = g.out_size(x.height);
  const int ow = g.out_size(x.width);
  Tensor y(g.out_channels, oh, ow);
  ConstMapMatrix w(weight.data(), g.out_channels, g.fan_in());
  MapMatrix out(y.values.data(), g.out_channels, static_cast<Eigen::Index>(oh) * ow);
  if (is_pointwise(g)) {
    out.noalias() = w * ConstMapMatrix(x.values.data(), g.in_channels,
                                       static_cast<Eigen::Index>(x.height) * x.width);
  } else {
    out.noalias() = w * im2col(x, g, oh, ow);
  }
  for (int o = 0; o < g.out_channels; ++o) out.row(o).array() += bias[o];
  return y;
}

void conv2d_backward(const Tensor& x, std::span<const double> weight, const Tensor& grad_out,
                     const ConvGeom& g, std::span<double> grad_weight, std::span<double> grad_bias,
                     Tensor* grad_input) {
  const int oh = grad_out.height;
  const int ow = grad_out.width;
  const Eigen::Index npix = static_cast<Eigen::Index>(oh) * ow;
  ConstMapMatrix gy(grad_out.values.data(), g.out_channels, npix);
  const bool pointwise = is_pointwise(g);

  if (!grad_weight.empty()) {
    MapMatrix gw(grad_weight.data(), g.out_channels, g.fan_in());
    if (pointwise) {
      gw.noalias() += gy * ConstMapMatrix(x.values.data(), g.in_channels, npix).transpose();
    } else {
      gw.noalias() += gy * im2col(x, g, oh, ow).transpose();
    }
  }
  if (!grad_bias.empty()) {
    for (int o = 0; o < g.out_channels; ++o) grad_bias[o] += gy.row(o).sum();
  }
  if (grad_input != nullptr) {
    ConstMapMatrix w(weight.data(), g.out_channels, g.fan_in());
    *grad_input = Tensor(g.in_channels, x.height, x.width);
    if (pointwise) {
      MapMatrix(grad_input->values.data(), g.in_channels, npix).noalias() = w.transpose() * gy;
    } else {
      RowMatrix gcols = w.transpose() * gy;
      col2im(gcols, g, oh, ow, *grad_input);
    }
  }
}

void relu_inplace(Tensor& t) {
  for (double& v : t.values) v = v > 0.0 ? v : 0.0;
}

void relu_backward_inplace(Tensor& grad, const Tensor& relu_out) {
  for (std::size_t i = 0; i < grad.values.size(); ++i)
    if (!(relu_out.values[i] > 0.0)) grad.values[i] = 0.0;
}

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

Tensor resample_bilinear(const Tensor& x, int out_h, int out_w) {
  if (out_h <= 0 || out_w <= 0) throw InvalidArgumentError("resample target must be positive");
  if (x.height == out_h && x.width == out_w) return x;
  const AxisWeights ry = axis_weights(x.height, out_h);
  const AxisWeights rx = axis_weights(x.width, out_w);
  Tensor y(x.channels, out_h, out_w);
  for (int c = 0; c < x.channels; ++c) {
    for (int oy = 0; oy < out_h; ++oy) {
      const double fy = ry.frac[oy];
      for (int ox = 0; ox < out_w; ++ox) {
        const double fx = rx.frac[ox];
        const double top = (1 - fx) * x.at(c, ry.lo[oy], rx.lo[ox]) + fx * x.at(c, ry.lo[oy], rx.hi[ox]);
        const double bot = (1 - fx) * x.at(c, ry.hi[oy], rx.lo[ox]) + fx * x.at(c, ry.hi[oy], rx.hi[ox]);
        y.at(c, oy, ox) = (1 - fy) * top + fy * bot;
      }
    }
  }
  return y;
}

Tensor resample_bilinear_adjoint(const Tensor& grad_out, int in_h, int in_w) {
  if (grad_out.height == in_h && grad_out.width == in_w) return grad_out;
  const AxisWeights ry = axis_weights(in_h, grad_out.height);
  const AxisWeights rx = axis_weights(in_w, grad_out.width);
  Tensor gx(grad_out.channels, in_h, in_w);
  for (int c = 0; c < grad_out.channels; ++c) {
    for (int oy = 0; oy < grad_out.height; ++oy) {
      const double fy = ry.frac[oy];
      for (int ox = 0; ox < grad_out.width; ++ox) {
        const double fx = rx.frac[ox];
        const double g = grad_out.at(c, oy, ox);
        gx.at(c, ry.lo[oy], rx.lo[ox]) += (1 - fy) * (1 - fx) * g;
        gx.at(c, ry.lo[oy], rx.hi[ox]) += (1 - fy) * fx * g;
        gx.at(c, ry.hi[oy], rx.lo[ox]) += fy * (1 - fx) * g;
        gx.at(c, ry.hi[oy], rx.hi[ox]) += fy * fx * g;
      }
    }
  }
  return gx;
}

Tensor global_avg_pool(const Tensor& x) {
  Tensor y(x.channels, 1, 1);
  const double n = static_cast<double>(x.plane_size());
  for (int c = 0; c < x.channels; ++c) {
    double s = 0.0;
    for (double v : x.channel(c)) s += v;
    y.values[c] = s / n;
  }
  return y;
}

Tensor global_avg_pool_backward(const Tensor& grad_out, int h, int w) {
  Tensor gx(grad_out.channels, h, w);
  const double n = static_cast<double>(h) * w;
  for (int c = 0; c < grad_out.channels; ++c) {
    auto ch = gx.channel(c);
    std::fill(ch.begin(), ch.end(), grad_out.values[c] / n);
  }
  return gx;
}

// ---------------------------------------------------------------------------

ConvUnit::ConvUnit(std::string name, ConvGeom geom, bool relu, double init_gain)
    : Unit(std::move(name)), geom_(geom), relu_(relu), init_gain_(init_gain) {}

void ConvUnit::init(ParameterSet& params, const std::string& prefix, Rng& rng) const {
  auto& w = params.add(key(prefix, "weight"),
                       {geom_.out_channels, geom_.in_channels, geom_.kernel, geom_.kernel});
  std::normal_distribution<double> dist(0.0, std::sqrt(init_gain_ / geom_.fan_in()));
  for (double& v : w.values) v = dist(rng);
  params.add(key(prefix, "bias"), {geom_.out_channels});
}

Tensor ConvUnit::forward(const ParameterSet& params, const std::string& prefix, const Tensor& x,
                         UnitCache* cache) const {
  Tensor y = conv2d_forward(x, params.at(key(prefix, "weight")).values,
                            params.at(key(prefix, "bias")).values, geom_);
  if (relu_) relu_inplace(y);
  if (cache != nullptr) cache->saved = {x, y};
  return y;
}

Tensor ConvUnit::backward(const ParameterSet& params, const std::string& prefix,
                          const UnitCache& cache, const Tensor& grad_out, GradientSet* grads,
                          bool need_input_grad) const {
  const Tensor& x = cache.saved.at(0);
  Tensor g = grad_out;
  if (relu_) relu_backward_inplace(g, cache.saved.at(1));
  const auto& w = params.at(key(prefix, "weight"));
  std::span<double> gw, gb;
  if (grads != nullptr) {
    gw = grads->slot(key(prefix, "weight"), w.values.size());
    gb = grads->slot(key(prefix, "bias"), static_cast<std::size_t>(geom_.out_channels));
  }
  Tensor gx;
  conv2d_backward(x, w.values, g, geom_, gw, gb, need_input_grad ? &gx : nullptr);
  return gx;
}

// ---------------------------------------------------------------------------

ResidualUnit::ResidualUnit(std::string name, int in_channels, int out_channels, int stride,
                           int dilation)
    : Unit(std::move(name)),
      first_("conv1", ConvGeom{in_channels, out_channels, 3, stride, dilation}, true),
      second_("conv2", ConvGeom{out_channels, out_channels, 3, 1, dilation}, false, 1.0) {
  if (in_channels != out_channels || stride != 1)
    projection_ = std::make_unique<ConvUnit>(
        "proj", ConvGeom{in_channels, out_channels, 1, stride, 1}, false, 1.0);
}

void ResidualUnit::init(ParameterSet& params, const std::string& prefix, Rng& rng) const {
  const std::string sub = prefix + "/" + name();
  first_.init(params, sub, rng);
  second_.init(params, sub, rng);
  if (projection_) projection_->init(params, sub, rng);
}

Tensor ResidualUnit::forward(const ParameterSet& params, const std::string& prefix,
                             const Tensor& x, UnitCache* cache) const {
  const std::string sub = prefix + "/" + name();
  UnitCache c1, c2, cp;
  const bool keep = cache != nullptr;
  Tensor a = first_.forward(params, sub, x, keep ? &c1 : nullptr);
  Tensor y = second_.forward(params, sub, a, keep ? &c2 : nullptr);
  if (projection_) {
    Tensor s = projection_->forward(params, sub, x, keep ? &cp : nullptr);
    for (std::size_t i = 0; i < y.size(); ++i) y.values[i] += s.values[i];
  } else {
    for (std::size_t i = 0; i < y.size(); ++i) y.values[i] += x.values[i];
  }
  relu_inplace(y);
  if (keep) {
    cache->saved = {y, c1.saved[0], c1.saved[1], c2.saved[0], c2.saved[1]};
    if (projection_) cache->saved.insert(cache->saved.end(), cp.saved.begin(), cp.saved.end());
  }
  return y;
}

Tensor ResidualUnit::backward(const ParameterSet& params, const std::string& prefix,
                              const UnitCache& cache, const Tensor& grad_out, GradientSet* grads,
                              bool need_input_grad) const {
  const std::string sub = prefix + "/" + name();
  // saved: [y, x, a, a, b, (x, s)]
  Tensor g = grad_out;
  relu_backward_inplace(g, cache.saved[0]);
  UnitCache c1{{cache.saved[1], cache.saved[2]}};
  UnitCache c2{{cache.saved[3], cache.saved[4]}};
  Tensor ga = second_.backward(params, sub, c2, g, grads, true);
  Tensor gx = first_.backward(params, sub, c1, ga, grads, need_input_grad);
  if (projection_) {
    UnitCache cp{{cache.saved[5], cache.saved[6]}};
    Tensor gs = projection_->backward(params, sub, cp, g, grads, need_input_grad);
    if (need_input_grad)
      for (std::size_t i = 0; i < gx.size(); ++i) gx.values[i] += gs.values[i];
  } else if (need_input_grad) {
    for (std::size_t i = 0; i < gx.size(); ++i) gx.values[i] += g.values[i];
  }
  return gx;
}

// ---------------------------------------------------------------------------

PyramidUnit::PyramidUnit(std::string name, int in_channels, int branch_channels,
                         std::vector<int> dilations)
    : Unit(std::move(name)), in_channels_(in_channels) {
  if (dilations.empty()) throw InvalidArgumentError("pyramid needs at least one dilation rate");
  for (int d : dilations) {
    if (d < 1) throw InvalidArgumentError("dilation rates must be >= 1");
    branches_.emplace_back("d" + std::to_string(d),
                           ConvGeom{in_channels, branch_channels, 3, 1, d}, true);
  }
}

int PyramidUnit::out_channels() const {
  int c = in_channels_;
  for (const auto& b : branches_) c += b.out_channels();
  return c;
}

void PyramidUnit::init(ParameterSet& params, const std::string& prefix, Rng& rng) const {
  const std::string sub = prefix + "/" + name();
  for (const auto& b : branches_) b.init(params, sub, rng);
}

Tensor PyramidUnit::forward(const ParameterSet& params, const std::string& prefix,
                            const Tensor& x, UnitCache* cache) const {
  const std::string sub = prefix + "/" + name();
  std::vector<Tensor> outs;
  outs.reserve(branches_.size());
  if (cache != nullptr) cache->saved = {x};
  for (const auto& b : branches_) {
    outs.push_back(b.forward(params, sub, x, nullptr));
    if (cache != nullptr) cache->saved.push_back(outs.back());
  }
  std::vector<const Tensor*> parts{&x};
  for (const auto& o : outs) parts.push_back(&o);
  return concat_channels(parts);
}

Tensor PyramidUnit::backward(const ParameterSet& params, const std::string& prefix,
                             const UnitCache& cache, const Tensor& grad_out, GradientSet* grads,
                             bool need_input_grad) const {
  const std::string sub = prefix + "/" + name();
  const Tensor& x = cache.saved[0];
  const std::size_t plane = x.plane_size();
  Tensor gx(x.channels, x.height, x.width);
  std::copy_n(grad_out.values.begin(), x.size(), gx.values.begin());
  std::size_t offset = x.size();
  for (std::size_t i = 0; i < branches_.size(); ++i) {
    const int bc = branches_[i].out_channels();
    Tensor gb(bc, x.height, x.width);
    std::copy_n(grad_out.values.begin() + static_cast<std::ptrdiff_t>(offset), bc * plane,
                gb.values.begin());
    offset += bc * plane;
    UnitCache bcache{{x, cache.saved[i + 1]}};
    Tensor g = branches_[i].backward(params, sub, bcache, gb, grads, need_input_grad);
    if (need_input_grad)
      for (std::size_t j = 0; j < gx.size(); ++j) gx.values[j] += g.values[j];
  }
  return gx;
}

// ---------------------------------------------------------------------------

void Adam::step(ParameterSet& params, const GradientSet& grads) {
  if (params.frozen()) return;
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (auto& [name, arr] : params.entries()) {
    if (!grads.contains(name)) continue;
    const auto& g = grads.at(name);
    auto& m = m_[name];
    auto& v = v_[name];
    if (m.empty()) {
      m.assign(arr.values.size(), 0.0);
      v.assign(arr.values.size(), 0.0);
    }
    for (std::size_t i = 0; i < arr.values.size(); ++i) {
      const double gi = g[i] + cfg_.weight_decay * arr.values[i];
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      arr.values[i] -= cfg_.learning_rate * mhat / (std::sqrt(vhat) + cfg_.epsilon);
    }
  }
}

}  // namespace spinecobb::nn
