#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "spinecobb/core.hpp"

namespace spinecobb::data {

namespace fs = std::filesystem;

enum class Split { Train, Test };

std::string_view split_name(Split s);

// ---------------------------------------------------------------------------
// Manifest and on-disk layout
//
//   <root>/{train,test}/angles.csv          source_id,pt_deg,mt_deg,tl_deg
//   <root>/{train,test}/images/<id>.png     (.jpg / .jpeg also accepted)
//   <root>/{train,test}/landmarks/<id>.txt  68 lines "row col" (optional)
//   <root>/{train,test}/masks/<id>.png      0/255 (optional, written by prepare)
//
// A root without train/ and test/ is read as a single train split.
// ---------------------------------------------------------------------------

struct ManifestRecord {
  std::string source_id;
  fs::path image_path;
  std::optional<fs::path> landmark_path;
  std::optional<fs::path> mask_path;
  AngleDegrees angles{};
  Split split = Split::Train;
};

struct DatasetManifest {
  fs::path root;
  std::vector<ManifestRecord> records;  // sorted by (split, source_id)

  std::size_t count(Split s) const;
};

DatasetManifest load_manifest(const fs::path& root);

struct AngleRow {
  std::string source_id;
  AngleDegrees degrees{};
};

std::vector<AngleRow> read_angle_csv(const fs::path& path);
void write_angle_csv(const fs::path& path, std::span<const AngleRow> rows);

/// 8-bit sources are scaled by 1/255, 16-bit by 1/65535.
XrayImage read_image(const fs::path& path, const std::string& source_id);
/// Writes an 8-bit grayscale PNG, values rounded from [0,1].
void write_gray_png(const fs::path& path, const Tensor& plane);
/// Binary mask from an 8-bit PNG (> 127 is spine).
SpineMask read_mask_png(const fs::path& path);

LandmarkSet read_landmarks(const fs::path& path, int image_rows, int image_cols,
                           int expected_points = kAasceLandmarks);
void write_landmarks(const fs::path& path, const LandmarkSet& lm);

/// Writes to a sibling temporary then renames into place.
void write_file_atomic(const fs::path& path, std::string_view bytes);

// ---------------------------------------------------------------------------
// Preprocessing and augmentation
// ---------------------------------------------------------------------------

/// Bilinear resize to (rows, cols), clamped to [0,1].
XrayImage preprocess(const XrayImage& img, int rows, int cols);
/// Nearest-neighbour resize; keeps binary masks binary.
SpineMask resize_mask(const SpineMask& mask, int rows, int cols);
LandmarkSet rescale_landmarks(const LandmarkSet& lm, int rows, int cols);

struct AugmentationConfig {
  double flip_probability = 0.5;
  double rotation_lo = -45.0;
  double rotation_hi = 45.0;
  double rescale_lo = 0.85;
  double rescale_hi = 1.25;
  int target_rows = 512;
  int target_cols = 256;
  std::uint64_t seed = 0;

  void validate() const;
};

struct AugmentParams {
  bool flip = false;
  double rotation_deg = 0.0;
  double scale = 1.0;
};

struct Augmented {
  XrayImage image;
  SpineMask mask;
  CobbTriple angles;
};

AugmentParams draw_augmentation(const AugmentationConfig& cfg, Rng& rng);

/// Same affine warp on image (bilinear) and mask (nearest). Angles are
/// returned unchanged: mirroring and global rotation preserve Cobb angles.
Augmented apply_augmentation(const XrayImage& img, const SpineMask& mask, const CobbTriple& angles,
                             const AugmentParams& params, int target_rows, int target_cols);

Augmented augment(const XrayImage& img, const SpineMask& mask, const CobbTriple& angles,
                  const AugmentationConfig& cfg, Rng& rng);

// ---------------------------------------------------------------------------
// Landmarks -> mask, landmarks -> Cobb angles
// ---------------------------------------------------------------------------

struct RasterResult {
  SpineMask mask;
  std::vector<std::string> warnings;
};

/// Union of per-vertebra filled quadrilaterals. A pixel is set when its centre
/// lies in the closed quadrilateral; each corner's own pixel is always set.
/// Self-intersecting corners fall back to the convex hull; collinear corners
/// contribute nothing. Both cases add a warning.
RasterResult masks_from_landmarks(const LandmarkSet& lm);

struct CobbMeasurement {
  AngleDegrees degrees{};
  std::vector<double> endplate_deg;  // upper, lower per vertebra, top to bottom
  int mt_upper = 0;                  // endplate indices bounding the MT curve
  int mt_lower = 0;
};

/// Region split on a sequence of endplate tilts (degrees, top to bottom):
/// MT is the largest tilt difference overall; PT is the largest at or above
/// the MT upper endplate, TL the largest at or below the MT lower endplate.
CobbMeasurement cobb_from_endplates(std::span<const double> endplate_deg);

CobbMeasurement measure_cobb(const LandmarkSet& lm);
AngleDegrees cobb_from_landmarks(const LandmarkSet& lm);

/// Endplate tilt of the segment left -> right, folded into (-90, 90].
double endplate_angle_deg(const Point2& left, const Point2& right);

// ---------------------------------------------------------------------------
// Synthetic spines
// ---------------------------------------------------------------------------

struct SyntheticSpec {
  int rows = 64;
  int cols = 32;
  int vertebra_count = kAasceVertebrae;
  /// Upper bound of the lateral deviation in pixels; each sample draws
  /// amplitude * U(min_amplitude_fraction, 1).
  double amplitude = 4.0;
  double min_amplitude_fraction = 0.3;
  double vertebra_width = 10.0;
  /// Vertebra height as a fraction of the vertical pitch.
  double vertebra_height_ratio = 0.75;
  double margin = 3.0;
  double blur_sigma = 1.0;
  double noise = 0.05;
  double test_fraction = 0.2;
  std::uint64_t seed = 0;

  /// Throws InvalidArgumentError when the worst-case curve leaves the frame.
  void validate() const;
};

struct SyntheticSample {
  XrayImage image;
  SpineMask mask;
  LandmarkSet landmarks;
  AngleDegrees analytic_degrees{};
  CobbTriple angles;
};

SyntheticSample generate_synthetic(const SyntheticSpec& spec, Rng& rng,
                                   const std::string& source_id = "synthetic");

// ---------------------------------------------------------------------------
// In-memory dataset
// ---------------------------------------------------------------------------

struct Sample {
  XrayImage image;
  std::optional<SpineMask> mask;
  CobbTriple angles;
  Split split = Split::Train;

  const std::string& source_id() const { return image.source_id(); }
};

struct Dataset {
  std::vector<Sample> train;
  std::vector<Sample> test;
};

/// Loads, preprocesses to (rows, cols) and attaches ground-truth masks from
/// masks/ or, failing that, rasterized landmarks.
Dataset load_dataset(const DatasetManifest& manifest, int rows, int cols,
                     double angle_divisor = kDefaultAngleDivisor);

/// "syn%05d"; the last round(count * test_fraction) indices form the test split.
std::string synthetic_id(int index);
Split synthetic_split(int index, int count, double test_fraction);

/// Generates a full synthetic dataset in memory (no disk I/O).
Dataset synthesize_dataset(const SyntheticSpec& spec, int count);

/// Writes one sample in the on-disk layout under <root>/<split>/.
void write_sample_files(const fs::path& split_dir, const XrayImage& image,
                        const std::optional<SpineMask>& mask,
                        const std::optional<LandmarkSet>& landmarks);

}  // namespace spinecobb::data
