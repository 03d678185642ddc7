#include <doctest.h>

#include <set>

#include "spinecobb/figures.hpp"
#include "support.hpp"

using namespace spinecobb;
using namespace testsupport;
namespace fig = spinecobb::figures;

TEST_CASE("palette and blend") {
  CHECK(fig::kTruePositive == fig::Rgb{0xFF, 0xD7, 0x00});
  CHECK(fig::kFalseNegative == fig::Rgb{0xFF, 0x00, 0x00});
  CHECK(fig::kFalsePositive == fig::Rgb{0x00, 0xB0, 0x00});
  // round(0.55 * 100 + 0.45 * 255) = 169.75 -> 170; 0.55 * 100 + 0.45 * 215 = 151.75 -> 152
  CHECK(fig::blend(100, fig::kTruePositive, 0.45) == fig::Rgb{170, 152, 55});
  CHECK(fig::to_gray8(0.0) == 0);
  CHECK(fig::to_gray8(1.0) == 255);
  CHECK(fig::to_gray8(0.5) == 128);
}

TEST_CASE("zero CAM leaves the radiograph gray") {
  Rng rng(1);
  const Tensor img = random_tensor(rng, 1, 16, 8);
  const auto out = fig::cam_overlay(img, Cam{Tensor::plane(4, 2)});
  CHECK(out.pixels == fig::grayscale(img).pixels);
  for (const auto& p : out.pixels) {
    CHECK(p.r == p.g);
    CHECK(p.g == p.b);
  }
  const auto hot = fig::cam_overlay(img, Cam{Tensor::plane(4, 2, 1.0)});
  CHECK_FALSE(hot.pixels == out.pixels);
}

TEST_CASE("error overlay colours") {
  Rng rng(2);
  const Tensor img = Tensor::plane(8, 8, 0.4);
  const Tensor gt = random_binary(rng, 8, 8);
  const std::uint8_t g = fig::to_gray8(0.4);
  const fig::Rgb yellow = fig::blend(g, fig::kTruePositive, fig::kOverlayAlpha);
  const fig::Rgb red = fig::blend(g, fig::kFalseNegative, fig::kOverlayAlpha);
  const fig::Rgb green = fig::blend(g, fig::kFalsePositive, fig::kOverlayAlpha);
  const fig::Rgb gray{g, g, g};

  SUBCASE("prediction equal to ground truth shows only yellow and background") {
    const auto out = fig::error_overlay(img, gt, gt);
    for (int r = 0; r < 8; ++r)
      for (int c = 0; c < 8; ++c) CHECK(out.at(r, c) == (gt(r, c) == 1.0 ? yellow : gray));
  }
  SUBCASE("each confusion class gets its colour") {
    Tensor pred = Tensor::plane(8, 8), truth = Tensor::plane(8, 8);
    pred(0, 0) = truth(0, 0) = 1.0;
    truth(0, 1) = 1.0;
    pred(0, 2) = 0.7;
    const auto out = fig::error_overlay(img, pred, truth);
    CHECK(out.at(0, 0) == yellow);
    CHECK(out.at(0, 1) == red);
    CHECK(out.at(0, 2) == green);
    CHECK(out.at(0, 3) == gray);
  }
  SUBCASE("shape mismatch") {
    CHECK_THROWS_AS(fig::error_overlay(img, Tensor::plane(8, 7), gt), ShapeMismatchError);
  }
}

TEST_CASE("hstack and PNG round trip") {
  fig::RgbImage a(4, 3), b(2, 5);
  std::fill(a.pixels.begin(), a.pixels.end(), fig::Rgb{1, 2, 3});
  std::fill(b.pixels.begin(), b.pixels.end(), fig::Rgb{9, 8, 7});
  const std::vector<fig::RgbImage> panels{a, b};
  const auto s = fig::hstack(panels);
  CHECK(s.rows == 4);
  CHECK(s.cols == 3 + 2 + 5);
  CHECK(s.at(0, 3) == fig::Rgb{255, 255, 255});
  CHECK(s.at(1, 5) == fig::Rgb{9, 8, 7});
  CHECK(s.at(3, 5) == fig::Rgb{255, 255, 255});

  const auto dir = temp_dir("fig");
  fig::write_png(dir / "s.png", s);
  CHECK(fig::read_png(dir / "s.png").pixels == s.pixels);
}
