#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace spinecobb {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeMismatchError : public Error {
 public:
  using Error::Error;
};

class OutOfRangeError : public Error {
 public:
  using Error::Error;
};

class InvalidArgumentError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Raised by the trainer when a loss becomes non-finite or runs away.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

/// Raised for missing stage dependencies and resume-hash mismatches.
class StateError : public Error {
 public:
  using Error::Error;
};

using Rng = std::mt19937_64;

// ---------------------------------------------------------------------------
// Hashing
// ---------------------------------------------------------------------------

inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;

std::uint64_t fnv1a(std::span<const std::byte> bytes, std::uint64_t seed = kFnvOffset);
std::uint64_t fnv1a(std::string_view text, std::uint64_t seed = kFnvOffset);
std::string hex64(std::uint64_t value);

/// Per-sample seed, independent of iteration order.
std::uint64_t sample_seed(std::uint64_t global_seed, std::string_view source_id);

// ---------------------------------------------------------------------------
// Dense arrays
// ---------------------------------------------------------------------------

/// Channel-major (C x H x W) array of doubles. Single-channel planes use C = 1.
struct Tensor {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> values;

  Tensor() = default;
  Tensor(int c, int h, int w, double fill = 0.0);

  static Tensor plane(int h, int w, double fill = 0.0) { return Tensor(1, h, w, fill); }

  std::size_t size() const { return values.size(); }
  std::size_t plane_size() const { return static_cast<std::size_t>(height) * width; }
  bool same_shape(const Tensor& other) const {
    return channels == other.channels && height == other.height && width == other.width;
  }

  double& at(int c, int r, int col) {
    return values[(static_cast<std::size_t>(c) * height + r) * width + col];
  }
  double at(int c, int r, int col) const {
    return values[(static_cast<std::size_t>(c) * height + r) * width + col];
  }
  double& operator()(int r, int col) { return at(0, r, col); }
  double operator()(int r, int col) const { return at(0, r, col); }

  std::span<double> channel(int c) {
    return {values.data() + static_cast<std::size_t>(c) * plane_size(), plane_size()};
  }
  std::span<const double> channel(int c) const {
    return {values.data() + static_cast<std::size_t>(c) * plane_size(), plane_size()};
  }

  bool all_finite() const;
  std::string shape_string() const;
};

/// Stacks single- or multi-channel tensors of equal spatial size along channels.
Tensor concat_channels(std::span<const Tensor* const> parts);

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

inline constexpr int kMinImageSide = 8;

/// Single-channel radiograph, intensities in [0, 1].
class XrayImage {
 public:
  XrayImage(Tensor pixels, std::string source_id);

  const Tensor& pixels() const { return pixels_; }
  const std::string& source_id() const { return source_id_; }
  int rows() const { return pixels_.height; }
  int cols() const { return pixels_.width; }

 private:
  Tensor pixels_;
  std::string source_id_;
};

enum class MaskKind { GroundTruth, Predicted };

/// Spine label map. Value-range checks happen in validate_pair / validate().
class SpineMask {
 public:
  SpineMask(Tensor values, MaskKind kind);

  const Tensor& values() const { return values_; }
  MaskKind kind() const { return kind_; }
  int rows() const { return values_.height; }
  int cols() const { return values_.width; }

  /// Throws OutOfRangeError unless ground-truth is {0,1} and predicted is [0,1].
  void validate() const;

 private:
  Tensor values_;
  MaskKind kind_;
};

inline constexpr double kDefaultAngleDivisor = 90.0;

using AngleDegrees = std::array<double, 3>;

/// PT / MT / TL Cobb angles, stored normalized to [0, 1].
class CobbTriple {
 public:
  CobbTriple() = default;
  CobbTriple(double pt, double mt, double tl);

  double pt() const { return v_[0]; }
  double mt() const { return v_[1]; }
  double tl() const { return v_[2]; }
  const std::array<double, 3>& normalized() const { return v_; }
  double operator[](std::size_t i) const { return v_[i]; }

  AngleDegrees degrees(double divisor = kDefaultAngleDivisor) const;

  bool operator==(const CobbTriple&) const = default;

 private:
  std::array<double, 3> v_{0.0, 0.0, 0.0};
};

/// Linear map of degrees into [0, 1]; throws OutOfRangeError outside [0, divisor].
CobbTriple normalize_angles(const AngleDegrees& degrees, double divisor = kDefaultAngleDivisor);

enum class CamResolution { Native, Resampled };

/// Class-activation map, values in [0, 1].
struct Cam {
  Tensor values;
  CamResolution resolution = CamResolution::Native;
};

struct Point2 {
  double row = 0.0;
  double col = 0.0;
  bool operator==(const Point2&) const = default;
};

enum Corner : int { kTopLeft = 0, kTopRight = 1, kBottomLeft = 2, kBottomRight = 3 };

inline constexpr int kAasceVertebrae = 17;
inline constexpr int kAasceLandmarks = 4 * kAasceVertebrae;

/// Four corners per vertebra in fixed order (TL, TR, BL, BR), top to bottom.
/// AASCE files carry 17 vertebrae; synthetic sets may use any count >= 3.
class LandmarkSet {
 public:
  LandmarkSet(std::vector<Point2> points, int image_rows, int image_cols);

  const std::vector<Point2>& points() const { return points_; }
  int vertebra_count() const { return static_cast<int>(points_.size() / 4); }
  const Point2& corner(int vertebra, Corner c) const { return points_[4 * vertebra + c]; }
  int image_rows() const { return rows_; }
  int image_cols() const { return cols_; }

 private:
  std::vector<Point2> points_;
  int rows_;
  int cols_;
};

struct ImageMaskPair {
  XrayImage image;
  SpineMask mask;
};

/// Returns copies of the pair iff shapes agree and value invariants hold.
ImageMaskPair validate_pair(const XrayImage& img, const SpineMask& mask);

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct ParamArray {
  std::vector<int> shape;
  std::vector<double> values;

  std::size_t numel() const;
};

enum class NetworkRole { Segmenter, Regressor };

std::string_view role_name(NetworkRole role);

/// Named arrays for one network. Ordered by name so hashing and
/// serialization are deterministic.
class ParameterSet {
 public:
  explicit ParameterSet(NetworkRole role = NetworkRole::Segmenter) : role_(role) {}

  NetworkRole role() const { return role_; }
  bool frozen() const { return frozen_; }
  void set_frozen(bool frozen) { frozen_ = frozen; }

  ParamArray& add(const std::string& name, std::vector<int> shape, double fill = 0.0);
  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  ParamArray& at(const std::string& name);
  const ParamArray& at(const std::string& name) const;

  const std::map<std::string, ParamArray>& entries() const { return entries_; }
  std::map<std::string, ParamArray>& entries() { return entries_; }

  std::size_t parameter_count() const;
  bool all_finite() const;
  /// Content hash over names, shapes and values (bitwise).
  std::uint64_t hash() const;

  bool operator==(const ParameterSet& other) const;

 private:
  NetworkRole role_;
  bool frozen_ = false;
  std::map<std::string, ParamArray> entries_;
};

/// Gradient buffers keyed like a ParameterSet; entries allocated on first use.
class GradientSet {
 public:
  std::vector<double>& slot(const std::string& name, std::size_t size);
  const std::map<std::string, std::vector<double>>& entries() const { return entries_; }
  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  const std::vector<double>& at(const std::string& name) const { return entries_.at(name); }

  void scale(double factor);
  void clear() { entries_.clear(); }
  void add(const GradientSet& other, double factor = 1.0);

 private:
  std::map<std::string, std::vector<double>> entries_;
};

}  // namespace spinecobb
