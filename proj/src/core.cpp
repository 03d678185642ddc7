#include "spinecobb/core.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <sstream>

namespace spinecobb {

std::uint64_t fnv1a(std::span<const std::byte> bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (std::byte b : bytes) {
    h ^= static_cast<std::uint64_t>(b);
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv1a(std::string_view text, std::uint64_t seed) {
  return fnv1a(std::as_bytes(std::span(text.data(), text.size())), seed);
}

std::string hex64(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

std::uint64_t sample_seed(std::uint64_t global_seed, std::string_view source_id) {
  std::array<std::byte, 8> seed_bytes{};
  std::memcpy(seed_bytes.data(), &global_seed, sizeof(global_seed));
  return fnv1a(source_id, fnv1a(seed_bytes));
}

// ---------------------------------------------------------------------------

Tensor::Tensor(int c, int h, int w, double fill) : channels(c), height(h), width(w) {
  if (c < 0 || h < 0 || w < 0) throw InvalidArgumentError("negative tensor dimension");
  values.assign(static_cast<std::size_t>(c) * h * w, fill);
}

bool Tensor::all_finite() const {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

std::string Tensor::shape_string() const {
  std::ostringstream os;
  os << channels << "x" << height << "x" << width;
  return os.str();
}

Tensor concat_channels(std::span<const Tensor* const> parts) {
  if (parts.empty()) return {};
  const int h = parts[0]->height;
  const int w = parts[0]->width;
  int c = 0;
  for (const Tensor* t : parts) {
    if (t->height != h || t->width != w)
      throw ShapeMismatchError("concat_channels: spatial size mismatch " + t->shape_string());
    c += t->channels;
  }
  Tensor out(c, h, w);
  auto it = out.values.begin();
  for (const Tensor* t : parts) it = std::copy(t->values.begin(), t->values.end(), it);
  return out;
}

// ---------------------------------------------------------------------------

XrayImage::XrayImage(Tensor pixels, std::string source_id)
    : pixels_(std::move(pixels)), source_id_(std::move(source_id)) {
  if (pixels_.channels != 1) throw ShapeMismatchError("XrayImage must be single-channel");
  if (pixels_.height < kMinImageSide || pixels_.width < kMinImageSide)
    throw ShapeMismatchError("XrayImage smaller than 8x8: " + pixels_.shape_string());
  for (double v : pixels_.values) {
    if (!std::isfinite(v) || v < 0.0 || v > 1.0)
      throw OutOfRangeError("XrayImage intensity outside [0,1] in " + source_id_);
  }
}

SpineMask::SpineMask(Tensor values, MaskKind kind) : values_(std::move(values)), kind_(kind) {
  if (values_.channels != 1) throw ShapeMismatchError("SpineMask must be single-channel");
  if (!values_.all_finite()) throw OutOfRangeError("SpineMask contains non-finite values");
}

void SpineMask::validate() const {
  for (double v : values_.values) {
    if (kind_ == MaskKind::GroundTruth) {
      if (v != 0.0 && v != 1.0) throw OutOfRangeError("ground-truth mask value not in {0,1}");
    } else if (v < 0.0 || v > 1.0) {
      throw OutOfRangeError("predicted mask value outside [0,1]");
    }
  }
}

ImageMaskPair validate_pair(const XrayImage& img, const SpineMask& mask) {
  if (img.rows() != mask.rows() || img.cols() != mask.cols())
    throw ShapeMismatchError("image " + img.pixels().shape_string() + " vs mask " +
                             mask.values().shape_string());
  mask.validate();
  return {img, mask};
}

// ---------------------------------------------------------------------------

CobbTriple::CobbTriple(double pt, double mt, double tl) : v_{pt, mt, tl} {
  for (double v : v_) {
    if (!std::isfinite(v) || v < 0.0 || v > 1.0)
      throw OutOfRangeError("normalized Cobb angle outside [0,1]");
  }
}

AngleDegrees CobbTriple::degrees(double divisor) const {
  return {v_[0] * divisor, v_[1] * divisor, v_[2] * divisor};
}

CobbTriple normalize_angles(const AngleDegrees& degrees, double divisor) {
  if (!(divisor > 0.0)) throw InvalidArgumentError("angle divisor must be positive");
  for (double d : degrees) {
    if (!std::isfinite(d) || d < 0.0 || d > divisor) {
      std::ostringstream os;
      os << "Cobb angle " << d << " outside [0, " << divisor << "] degrees";
      throw OutOfRangeError(os.str());
    }
  }
  return {degrees[0] / divisor, degrees[1] / divisor, degrees[2] / divisor};
}

// ---------------------------------------------------------------------------

LandmarkSet::LandmarkSet(std::vector<Point2> points, int image_rows, int image_cols)
    : points_(std::move(points)), rows_(image_rows), cols_(image_cols) {
  if (points_.size() % 4 != 0 || points_.size() < 12)
    throw InvalidArgumentError("landmark count must be 4 per vertebra, at least 3 vertebrae");
  if (rows_ <= 0 || cols_ <= 0) throw InvalidArgumentError("landmark image shape must be positive");
  for (const Point2& p : points_) {
    if (!std::isfinite(p.row) || !std::isfinite(p.col) || p.row < 0.0 || p.col < 0.0 ||
        p.row > rows_ - 1 || p.col > cols_ - 1)
      throw OutOfRangeError("landmark outside image bounds");
  }
}

// ---------------------------------------------------------------------------

std::size_t ParamArray::numel() const {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

std::string_view role_name(NetworkRole role) {
  return role == NetworkRole::Segmenter ? "segnet" : "regnet";
}

ParamArray& ParameterSet::add(const std::string& name, std::vector<int> shape, double fill) {
  ParamArray arr{std::move(shape), {}};
  arr.values.assign(arr.numel(), fill);
  auto [it, inserted] = entries_.insert_or_assign(name, std::move(arr));
  return it->second;
}

ParamArray& ParameterSet::at(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw InvalidArgumentError("unknown parameter " + name);
  return it->second;
}

const ParamArray& ParameterSet::at(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw InvalidArgumentError("unknown parameter " + name);
  return it->second;
}

std::size_t ParameterSet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, a] : entries_) n += a.values.size();
  return n;
}

bool ParameterSet::all_finite() const {
  for (const auto& [_, a] : entries_)
    for (double v : a.values)
      if (!std::isfinite(v)) return false;
  return true;
}

std::uint64_t ParameterSet::hash() const {
  std::uint64_t h = fnv1a(role_name(role_));
  for (const auto& [name, a] : entries_) {
    h = fnv1a(name, h);
    h = fnv1a(std::as_bytes(std::span(a.shape)), h);
    h = fnv1a(std::as_bytes(std::span(a.values)), h);
  }
  return h;
}

bool ParameterSet::operator==(const ParameterSet& other) const {
  if (role_ != other.role_ || entries_.size() != other.entries_.size()) return false;
  for (auto a = entries_.begin(), b = other.entries_.begin(); a != entries_.end(); ++a, ++b) {
    if (a->first != b->first || a->second.shape != b->second.shape) return false;
    if (std::memcmp(a->second.values.data(), b->second.values.data(),
                    a->second.values.size() * sizeof(double)) != 0)
      return false;
  }
  return true;
}

std::vector<double>& GradientSet::slot(const std::string& name, std::size_t size) {
  auto& v = entries_[name];
  if (v.empty()) v.assign(size, 0.0);
  if (v.size() != size) throw ShapeMismatchError("gradient slot size changed for " + name);
  return v;
}

void GradientSet::scale(double factor) {
  for (auto& [_, v] : entries_)
    for (double& x : v) x *= factor;
}

void GradientSet::add(const GradientSet& other, double factor) {
  for (const auto& [name, g] : other.entries_) {
    auto& dst = slot(name, g.size());
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += factor * g[i];
  }
}

}  // namespace spinecobb
