#pragma once

// Helpers shared by the unit tests and the acceptance binary: random inputs,
// brute-force reference computations written independently of the library,
// and a central-difference gradient checker.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "spinecobb/config.hpp"
#include "spinecobb/core.hpp"
#include "spinecobb/data.hpp"

namespace testsupport {

using namespace spinecobb;

inline Tensor random_tensor(Rng& rng, int c, int h, int w, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(c, h, w);
  for (double& v : t.values) v = u(rng);
  return t;
}

inline Tensor random_binary(Rng& rng, int h, int w, double p = 0.5) {
  std::bernoulli_distribution b(p);
  Tensor t = Tensor::plane(h, w);
  for (double& v : t.values) v = b(rng) ? 1.0 : 0.0;
  return t;
}

inline Cam random_cam(Rng& rng, int h, int w) { return Cam{random_tensor(rng, 1, h, w), CamResolution::Native}; }

// ---------------------------------------------------------------------------
// Brute-force references
// ---------------------------------------------------------------------------

/// 1 - 2 sum(s y) / (sum s + sum y + 1e-7) + lambda * mean(-y ln s - (1-y) ln(1-s)),
/// with each logarithm argument clamped to [1e-7, 1 - 1e-7].
inline double ref_seg_loss(const Tensor& s, const Tensor& y, double lambda) {
  double sy = 0, ss = 0, yy = 0, ce = 0;
  for (int r = 0; r < s.height; ++r)
    for (int c = 0; c < s.width; ++c) {
      const double p = s(r, c), t = y(r, c);
      sy += p * t;
      ss += p;
      yy += t;
      const double pc = std::min(std::max(p, 1e-7), 1.0 - 1e-7);
      if (t != 0.0) ce -= t * std::log(pc);
      if (t != 1.0) ce -= (1.0 - t) * std::log(1.0 - pc);
    }
  const double n = static_cast<double>(s.height) * s.width;
  return (1.0 - 2.0 * sy / (ss + yy + 1e-7)) + lambda * ce / n;
}

/// Dice coefficient by pixel loop, then 1 - dice.
inline double ref_dice_loss(const Tensor& s, const Tensor& y) {
  double inter = 0, total = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    inter += s.values[i] * y.values[i];
    total += s.values[i] + y.values[i];
  }
  return 1.0 - (2.0 * inter) / (total + 1e-7);
}

inline double ref_smape(const std::array<double, 3>& p, const std::array<double, 3>& g, double eps) {
  const double num = std::abs(g[0] - p[0]) + std::abs(g[1] - p[1]) + std::abs(g[2] - p[2]);
  const double den = std::abs(g[0] + p[0] + eps) + std::abs(g[1] + p[1] + eps) + std::abs(g[2] + p[2] + eps);
  return num == 0.0 ? 0.0 : num / den;
}

inline double ref_ar(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a.values[i] - b.values[i]);
  return s / static_cast<double>(a.size());
}

struct RefCounts {
  long tp = 0, fp = 0, fn = 0, tn = 0;
};

inline RefCounts ref_counts(unsigned pred_bits, unsigned gt_bits, int n) {
  RefCounts c;
  for (int i = 0; i < n; ++i) {
    const bool p = (pred_bits >> i) & 1u, g = (gt_bits >> i) & 1u;
    c.tp += p && g;
    c.fp += p && !g;
    c.fn += !p && g;
    c.tn += !p && !g;
  }
  return c;
}

inline double ref_ratio(double num, double den) { return den == 0.0 ? 1.0 : num / den; }

struct RefCobb {
  AngleDegrees deg{};
  int upper = 0, lower = 0;
};

/// Exhaustive search over endplate pairs. MT is the pair with the largest
/// tilt difference; PT / TL are the largest pairs entirely at or above the MT
/// upper endplate / at or below the MT lower endplate.
inline RefCobb ref_cobb(const std::vector<double>& t) {
  const int n = static_cast<int>(t.size());
  RefCobb out;
  double best = -1.0;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      const double d = std::abs(t[i] - t[j]);
      if (d > best) {
        best = d;
        out.upper = i;
        out.lower = j;
      }
    }
  out.deg[1] = best;
  auto region_max = [&](int lo, int hi) {
    double m = 0.0;
    for (int i = lo; i <= hi; ++i)
      for (int j = i + 1; j <= hi; ++j) m = std::max(m, std::abs(t[i] - t[j]));
    return m;
  };
  out.deg[0] = region_max(0, out.upper);
  out.deg[2] = region_max(out.lower, n - 1);
  return out;
}

inline std::vector<double> endplate_tilts(const LandmarkSet& lm) {
  std::vector<double> t;
  for (int v = 0; v < lm.vertebra_count(); ++v) {
    t.push_back(data::endplate_angle_deg(lm.corner(v, kTopLeft), lm.corner(v, kTopRight)));
    t.push_back(data::endplate_angle_deg(lm.corner(v, kBottomLeft), lm.corner(v, kBottomRight)));
  }
  return t;
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

/// ||a - n|| / max(||a||, ||n||, floor) over the supplied coordinates.
inline double relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric,
                             double floor = 1e-10) {
  double diff = 0, na = 0, nn = 0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), floor});
}

inline double central_difference(const std::function<double()>& f, double& x, double h = 1e-5) {
  const double x0 = x;
  x = x0 + h;
  const double fp = f();
  x = x0 - h;
  const double fm = f();
  x = x0;
  return (fp - fm) / (2.0 * h);
}

/// Compares grads against central differences on up to per_entry randomly
/// chosen coordinates of every parameter array.
inline double param_grad_error(ParameterSet& params, const GradientSet& grads, const std::function<double()>& loss,
                               Rng& rng, int per_entry = 4) {
  std::vector<double> a, n;
  for (auto& [name, arr] : params.entries()) {
    std::uniform_int_distribution<std::size_t> pick(0, arr.values.size() - 1);
    for (int k = 0; k < per_entry; ++k) {
      const std::size_t i = pick(rng);
      a.push_back(grads.contains(name) ? grads.at(name)[i] : 0.0);
      n.push_back(central_difference(loss, arr.values[i]));
    }
  }
  return relative_error(a, n);
}

/// Freshly initialized biases are exactly zero, which puts ReLUs fed by
/// constant-zero inputs on their kink; shift them before finite differencing.
inline void jitter_biases(ParameterSet& params, Rng& rng, double scale = 0.05) {
  std::uniform_real_distribution<double> u(0.5 * scale, 1.5 * scale);
  for (auto& [name, arr] : params.entries())
    if (name.size() >= 5 && name.compare(name.size() - 5, 5, "/bias") == 0)
      for (double& v : arr.values) v += u(rng);
}

// ---------------------------------------------------------------------------
// Configs
// ---------------------------------------------------------------------------

inline std::filesystem::path source_dir() { return SPINECOBB_SOURCE_DIR; }

inline RunConfig desk_config() { return load_run_config(source_dir() / "configs" / "desk.json"); }

/// A few-sample, few-epoch configuration for fast contract tests.
inline RunConfig micro_config(int count = 24, int epochs = 1) {
  RunConfig cfg;
  SyntheticSource src;
  src.count = count;
  src.spec.seed = 11;
  cfg.data.synthetic = src;
  cfg.data.rows = 64;
  cfg.data.cols = 32;
  cfg.data.augment = false;
  cfg.data.augmentation.target_rows = 64;
  cfg.data.augmentation.target_cols = 32;
  cfg.schedule.seed = 5;
  for (auto& s : cfg.schedule.stages) {
    s.epochs = epochs;
    s.learning_rate = 1e-3;
  }
  return cfg;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& tag) {
  const auto p = std::filesystem::temp_directory_path() / ("spinecobb_test_" + tag);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testsupport
