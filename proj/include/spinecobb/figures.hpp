#pragma once

// Result figures: CAM heat overlays and segmentation error maps.
//
// Palette (8-bit sRGB), blended over the grayscale radiograph with alpha 0.45:
//   true positive   #FFD700 (yellow)
//   false negative  #FF0000 (red)
//   false positive  #00B000 (green)
// Blend per channel: round((1 - a) * gray + a * colour).

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "spinecobb/core.hpp"

namespace spinecobb::figures {

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  bool operator==(const Rgb&) const = default;
};

inline constexpr Rgb kTruePositive{0xFF, 0xD7, 0x00};
inline constexpr Rgb kFalseNegative{0xFF, 0x00, 0x00};
inline constexpr Rgb kFalsePositive{0x00, 0xB0, 0x00};
inline constexpr double kOverlayAlpha = 0.45;

struct RgbImage {
  int rows = 0;
  int cols = 0;
  std::vector<Rgb> pixels;  // row-major

  RgbImage() = default;
  RgbImage(int r, int c) : rows(r), cols(c), pixels(static_cast<std::size_t>(r) * c) {}
  Rgb& at(int r, int c) { return pixels[static_cast<std::size_t>(r) * cols + c]; }
  const Rgb& at(int r, int c) const { return pixels[static_cast<std::size_t>(r) * cols + c]; }
};

std::uint8_t to_gray8(double v);
Rgb blend(std::uint8_t gray, Rgb colour, double alpha);

RgbImage grayscale(const Tensor& image);
/// pred and gt are thresholded at 0.5; true negatives stay gray.
RgbImage error_overlay(const Tensor& image, const Tensor& pred, const Tensor& gt);
/// Jet-coloured CAM with per-pixel alpha 0.45 * cam, so a zero CAM leaves the
/// radiograph untouched. The CAM is resampled to the image size.
RgbImage cam_overlay(const Tensor& image, const Cam& cam);
/// Side by side, separated by a 2-pixel white gutter.
RgbImage hstack(std::span<const RgbImage> panels);

void write_png(const std::filesystem::path& path, const RgbImage& img);
RgbImage read_png(const std::filesystem::path& path);

}  // namespace spinecobb::figures
