#include "spinecobb/figures.hpp"

#include <algorithm>
#include <cmath>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "spinecobb/data.hpp"
#include "spinecobb/metrics.hpp"
#include "spinecobb/regnet.hpp"

namespace spinecobb::figures {

std::uint8_t to_gray8(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

Rgb blend(std::uint8_t gray, Rgb colour, double alpha) {
  auto mix = [&](std::uint8_t c) {
    return static_cast<std::uint8_t>(std::lround((1.0 - alpha) * gray + alpha * c));
  };
  return {mix(colour.r), mix(colour.g), mix(colour.b)};
}

RgbImage grayscale(const Tensor& image) {
  if (image.channels != 1) throw ShapeMismatchError("figures expect a single-channel image");
  RgbImage out(image.height, image.width);
  for (int r = 0; r < image.height; ++r)
    for (int c = 0; c < image.width; ++c) {
      const std::uint8_t g = to_gray8(image(r, c));
      out.at(r, c) = {g, g, g};
    }
  return out;
}

RgbImage error_overlay(const Tensor& image, const Tensor& pred, const Tensor& gt) {
  if (!image.same_shape(pred) || !image.same_shape(gt))
    throw ShapeMismatchError("error_overlay: image, prediction and ground truth differ in shape");
  RgbImage out = grayscale(image);
  for (int r = 0; r < image.height; ++r)
    for (int c = 0; c < image.width; ++c) {
      const bool p = pred(r, c) >= metrics::kMaskThreshold;
      const bool g = gt(r, c) >= metrics::kMaskThreshold;
      if (!p && !g) continue;
      const Rgb colour = p && g ? kTruePositive : (g ? kFalseNegative : kFalsePositive);
      out.at(r, c) = blend(out.at(r, c).r, colour, kOverlayAlpha);
    }
  return out;
}

RgbImage cam_overlay(const Tensor& image, const Cam& cam) {
  RgbImage out = grayscale(image);
  const Cam full = resample_cam(cam, image.height, image.width);
  cv::Mat cam8(image.height, image.width, CV_8UC1);
  for (int r = 0; r < image.height; ++r)
    for (int c = 0; c < image.width; ++c) cam8.at<std::uint8_t>(r, c) = to_gray8(full.values(r, c));
  cv::Mat heat;
  cv::applyColorMap(cam8, heat, cv::COLORMAP_JET);
  for (int r = 0; r < image.height; ++r)
    for (int c = 0; c < image.width; ++c) {
      const double a = kOverlayAlpha * std::clamp(full.values(r, c), 0.0, 1.0);
      if (a == 0.0) continue;
      const auto bgr = heat.at<cv::Vec3b>(r, c);
      out.at(r, c) = blend(out.at(r, c).r, Rgb{bgr[2], bgr[1], bgr[0]}, a);
    }
  return out;
}

RgbImage hstack(std::span<const RgbImage> panels) {
  if (panels.empty()) throw InvalidArgumentError("hstack: no panels");
  constexpr int kGutter = 2;
  int rows = 0, cols = 0;
  for (const auto& p : panels) {
    rows = std::max(rows, p.rows);
    cols += p.cols;
  }
  cols += kGutter * static_cast<int>(panels.size() - 1);
  RgbImage out(rows, cols);
  std::fill(out.pixels.begin(), out.pixels.end(), Rgb{255, 255, 255});
  int x0 = 0;
  for (const auto& p : panels) {
    for (int r = 0; r < p.rows; ++r)
      for (int c = 0; c < p.cols; ++c) out.at(r, x0 + c) = p.at(r, c);
    x0 += p.cols + kGutter;
  }
  return out;
}

void write_png(const std::filesystem::path& path, const RgbImage& img) {
  cv::Mat m(img.rows, img.cols, CV_8UC3);
  for (int r = 0; r < img.rows; ++r)
    for (int c = 0; c < img.cols; ++c) {
      const Rgb& p = img.at(r, c);
      m.at<cv::Vec3b>(r, c) = {p.b, p.g, p.r};
    }
  std::vector<std::uint8_t> buf;
  if (!cv::imencode(".png", m, buf)) throw IoError("cannot encode " + path.string());
  data::write_file_atomic(path, std::string_view(reinterpret_cast<const char*>(buf.data()), buf.size()));
}

RgbImage read_png(const std::filesystem::path& path) {
  const cv::Mat m = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (m.empty()) throw IoError("cannot read " + path.string());
  RgbImage out(m.rows, m.cols);
  for (int r = 0; r < m.rows; ++r)
    for (int c = 0; c < m.cols; ++c) {
      const auto bgr = m.at<cv::Vec3b>(r, c);
      out.at(r, c) = {bgr[2], bgr[1], bgr[0]};
    }
  return out;
}

}  // namespace spinecobb::figures
