#include <doctest.h>

#include <fstream>

#include "support.hpp"

using namespace spinecobb;
using namespace testsupport;
namespace fs = std::filesystem;

namespace {

void write_csv(const fs::path& p, const std::string& body) {
  std::ofstream(p) << "source_id,pt_deg,mt_deg,tl_deg\n" << body;
}

fs::path three_image_root(const std::string& tag) {
  const fs::path root = temp_dir(tag);
  fs::create_directories(root / "images");
  for (const char* id : {"a", "b", "c"}) data::write_gray_png(root / "images" / (std::string(id) + ".png"), Tensor::plane(16, 8, 0.4));
  return root;
}

LandmarkSet rect_spine(int rows, int cols, int n, int top, int pitch, int height, int c0, int c1) {
  std::vector<Point2> pts;
  for (int k = 0; k < n; ++k) {
    const double r0 = top + k * pitch, r1 = r0 + height;
    pts.push_back({r0, double(c0)});
    pts.push_back({r0, double(c1)});
    pts.push_back({r1, double(c0)});
    pts.push_back({r1, double(c1)});
  }
  return LandmarkSet(pts, rows, cols);
}

LandmarkSet mirrored(const LandmarkSet& lm) {
  std::vector<Point2> pts;
  const double w = lm.image_cols() - 1;
  for (int v = 0; v < lm.vertebra_count(); ++v) {
    auto m = [&](Corner c) { return Point2{lm.corner(v, c).row, w - lm.corner(v, c).col}; };
    pts.push_back(m(kTopRight));
    pts.push_back(m(kTopLeft));
    pts.push_back(m(kBottomRight));
    pts.push_back(m(kBottomLeft));
  }
  return LandmarkSet(pts, lm.image_rows(), lm.image_cols());
}

data::SyntheticSpec default_spec(std::uint64_t seed) {
  data::SyntheticSpec s;
  s.seed = seed;
  return s;
}

}  // namespace

TEST_CASE("manifest from images and CSV") {
  const fs::path root = three_image_root("manifest");
  write_csv(root / "angles.csv", "a,1,2,3\nb,10,20,30\nc,0,90,0\n");
  const auto m = data::load_manifest(root);
  CHECK(m.records.size() == 3);
  CHECK(m.count(data::Split::Train) == 3);
  CHECK(m.records[1].angles[2] == 30.0);

  write_csv(root / "angles.csv", "a,1,2,3\nb,10,95,30\nc,0,90,0\n");
  CHECK_THROWS_AS(data::load_manifest(root), OutOfRangeError);

  write_csv(root / "angles.csv", "a,1,2,3\nb,10,20,30\nzz,0,90,0\n");
  CHECK_THROWS_AS(data::load_manifest(root), IoError);

  write_csv(root / "angles.csv", "a,1,2,3\na,1,2,3\n");
  CHECK_THROWS_AS(data::load_manifest(root), InvalidArgumentError);
}

TEST_CASE("angle CSV round trip") {
  const fs::path root = temp_dir("csv");
  const std::vector<data::AngleRow> rows{{"x1", {1.25, 40.0, 7.5}}, {"x2", {0.0, 0.0, 0.0}}};
  data::write_angle_csv(root / "angles.csv", rows);
  const auto back = data::read_angle_csv(root / "angles.csv");
  REQUIRE(back.size() == 2);
  CHECK(back[0].source_id == "x1");
  CHECK(back[0].degrees == rows[0].degrees);
}

TEST_CASE("landmark file round trip") {
  const auto lm = rect_spine(100, 40, 17, 2, 5, 3, 10, 20);
  const fs::path root = temp_dir("lm");
  data::write_landmarks(root / "x.txt", lm);
  const auto back = data::read_landmarks(root / "x.txt", 100, 40);
  CHECK(back.points() == lm.points());
  CHECK_THROWS_AS(data::read_landmarks(root / "x.txt", 100, 40, 72), InvalidArgumentError);
}

TEST_CASE("preprocess") {
  SUBCASE("1024x512 to 512x256") {
    const auto out = data::preprocess(XrayImage(Tensor::plane(1024, 512, 0.3), "x"), 512, 256);
    CHECK(out.rows() == 512);
    CHECK(out.cols() == 256);
  }
  SUBCASE("identity at target size") {
    Rng rng(1);
    const XrayImage img(random_tensor(rng, 1, 40, 20), "x");
    const auto out = data::preprocess(img, 40, 20);
    for (std::size_t i = 0; i < out.pixels().size(); ++i)
      CHECK(std::abs(out.pixels().values[i] - img.pixels().values[i]) < 1e-6);
  }
  SUBCASE("constant image stays constant") {
    for (auto [r, c] : {std::pair{33, 17}, std::pair{128, 64}, std::pair{9, 9}}) {
      const auto out = data::preprocess(XrayImage(Tensor::plane(64, 32, 0.7), "x"), r, c);
      for (double v : out.pixels().values) CHECK(std::abs(v - 0.7) < 1e-12);
    }
  }
  SUBCASE("mask resize stays binary") {
    Rng rng(2);
    const SpineMask m(random_binary(rng, 64, 32), MaskKind::GroundTruth);
    const auto out = data::resize_mask(m, 37, 19);
    for (double v : out.values().values) CHECK((v == 0.0 || v == 1.0));
  }
}

TEST_CASE("augmentation") {
  Rng rng(3);
  const XrayImage img(random_tensor(rng, 1, 32, 16), "x");
  const SpineMask mask(random_binary(rng, 32, 16), MaskKind::GroundTruth);
  const CobbTriple angles(0.1, 0.2, 0.3);

  SUBCASE("identity parameters return inputs") {
    const auto out = data::apply_augmentation(img, mask, angles, {false, 0.0, 1.0}, 32, 16);
    CHECK(out.image.pixels().values == img.pixels().values);
    CHECK(out.mask.values().values == mask.values().values);
    CHECK(out.angles == angles);
  }
  SUBCASE("flip mirrors image and mask identically") {
    const auto out = data::apply_augmentation(img, mask, angles, {true, 0.0, 1.0}, 32, 16);
    for (int r = 0; r < 32; ++r)
      for (int c = 0; c < 16; ++c) {
        CHECK(out.mask.values()(r, c) == mask.values()(r, 15 - c));
        CHECK(std::abs(out.image.pixels()(r, c) - img.pixels()(r, 15 - c)) < 1e-6);
      }
    CHECK(out.angles == angles);
  }
  SUBCASE("same seed gives bit-identical outputs") {
    data::AugmentationConfig cfg;
    cfg.target_rows = 32;
    cfg.target_cols = 16;
    for (std::uint64_t seed : {1ULL, 2ULL, 99ULL}) {
      Rng r1(seed), r2(seed);
      const auto a = data::augment(img, mask, angles, cfg, r1);
      const auto b = data::augment(img, mask, angles, cfg, r2);
      CHECK(a.image.pixels().values == b.image.pixels().values);
      CHECK(a.mask.values().values == b.mask.values().values);
      for (double v : a.mask.values().values) CHECK((v == 0.0 || v == 1.0));
      CHECK(a.angles == angles);
    }
  }
  SUBCASE("draws stay inside the configured ranges") {
    data::AugmentationConfig cfg;
    for (int i = 0; i < 200; ++i) {
      const auto p = data::draw_augmentation(cfg, rng);
      CHECK(p.rotation_deg >= -45.0);
      CHECK(p.rotation_deg <= 45.0);
      CHECK(p.scale >= 0.85);
      CHECK(p.scale <= 1.25);
    }
  }
  SUBCASE("invalid ranges rejected") {
    data::AugmentationConfig cfg;
    cfg.rescale_lo = 1.5;
    CHECK_THROWS_AS(cfg.validate(), InvalidArgumentError);
  }
}

TEST_CASE("rasterizing axis-aligned rectangles counts their pixels") {
  // 17 rectangles with integer corners: rows r0..r0+8, cols 10..25, closed.
  const auto lm = rect_spine(200, 40, 17, 3, 11, 8, 10, 25);
  const auto res = data::masks_from_landmarks(lm);
  CHECK(res.warnings.empty());
  double area = 0;
  for (double v : res.mask.values().values) area += v;
  CHECK(area == 17 * 9 * 16);
}

TEST_CASE("collinear corners contribute nothing and warn") {
  std::vector<Point2> pts = rect_spine(100, 40, 4, 3, 20, 8, 10, 25).points();
  pts[4] = {30, 10};
  pts[5] = {30, 15};
  pts[6] = {30, 20};
  pts[7] = {30, 25};
  const auto res = data::masks_from_landmarks(LandmarkSet(pts, 100, 40));
  CHECK(res.warnings.size() == 1);
  double area = 0;
  for (double v : res.mask.values().values) area += v;
  // Corner pixels are still stamped, so 3 rectangles plus up to 4 stray pixels.
  CHECK(area <= 3 * 9 * 16 + 4);
  CHECK(area >= 3 * 9 * 16);
}

TEST_CASE("self-intersecting corners fall back to the hull") {
  std::vector<Point2> pts = rect_spine(100, 40, 3, 3, 20, 8, 10, 25).points();
  std::swap(pts[2], pts[3]);  // bow-tie
  const auto res = data::masks_from_landmarks(LandmarkSet(pts, 100, 40));
  CHECK(res.warnings.size() == 1);
  double area = 0;
  for (double v : res.mask.values().values) area += v;
  CHECK(area == 3 * 9 * 16);
}

TEST_CASE("endplate angles") {
  CHECK(data::endplate_angle_deg({10, 0}, {10, 5}) == doctest::Approx(0.0));
  CHECK(data::endplate_angle_deg({10, 0}, {5, 5}) == doctest::Approx(45.0));
  CHECK(data::endplate_angle_deg({5, 0}, {10, 5}) == doctest::Approx(-45.0));
}

TEST_CASE("Cobb angles from landmarks") {
  SUBCASE("straight spine") {
    const auto d = data::cobb_from_landmarks(rect_spine(200, 40, 17, 3, 11, 8, 10, 25));
    CHECK(d == AngleDegrees{0, 0, 0});
  }
  SUBCASE("two tilted endplates, rest flat") {
    std::vector<double> t(34, 0.0);
    t[6] = 10.0;
    t[21] = -10.0;
    const auto m = data::cobb_from_endplates(t);
    CHECK(m.degrees[1] == doctest::Approx(20.0));
    const auto ref = ref_cobb(t);
    for (int k = 0; k < 3; ++k) CHECK(m.degrees[k] == doctest::Approx(ref.deg[k]));
  }
  SUBCASE("random tilt sequences agree with exhaustive pair search") {
    Rng rng(4);
    std::uniform_real_distribution<double> u(-30.0, 30.0);
    for (int trial = 0; trial < 300; ++trial) {
      std::vector<double> t(34);
      for (auto& x : t) x = u(rng);
      const auto m = data::cobb_from_endplates(t);
      const auto ref = ref_cobb(t);
      for (int k = 0; k < 3; ++k) CHECK(std::abs(m.degrees[k] - ref.deg[k]) < 1e-12);
      CHECK(m.mt_upper == ref.upper);
      CHECK(m.mt_lower == ref.lower);
    }
  }
  SUBCASE("tied tilts resolve to the first pair, as the pair search does") {
    const std::vector<double> t{5.0, 5.0, 0.0, -5.0, -5.0, 1.0};
    const auto m = data::cobb_from_endplates(t);
    const auto ref = ref_cobb(t);
    CHECK(m.mt_upper == 0);
    CHECK(m.mt_lower == 3);
    CHECK(m.mt_upper == ref.upper);
    CHECK(m.mt_lower == ref.lower);
    CHECK(m.degrees == ref.deg);
  }
  SUBCASE("synthetic spine matches the generator's analytic angles") {
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
      Rng rng(seed);
      const auto s = data::generate_synthetic(default_spec(seed), rng);
      const auto d = data::cobb_from_landmarks(s.landmarks);
      const auto ref = ref_cobb(endplate_tilts(s.landmarks));
      for (int k = 0; k < 3; ++k) {
        CHECK(std::abs(d[k] - s.analytic_degrees[k]) < 1.0);
        CHECK(std::abs(ref.deg[k] - s.analytic_degrees[k]) < 1.0);
      }
    }
  }
  SUBCASE("mirror and scale invariance") {
    Rng rng(5);
    const auto s = data::generate_synthetic(default_spec(5), rng);
    const auto d = data::cobb_from_landmarks(s.landmarks);
    const auto dm = data::cobb_from_landmarks(mirrored(s.landmarks));
    for (int k = 0; k < 3; ++k) CHECK(std::abs(d[k] - dm[k]) < 1e-9);
    for (double k : {0.5, 3.0}) {
      std::vector<Point2> pts;
      for (const auto& p : s.landmarks.points()) pts.push_back({p.row * k, p.col * k});
      const auto ds = data::cobb_from_landmarks(LandmarkSet(pts, int(64 * k) + 1, int(32 * k) + 1));
      for (int j = 0; j < 3; ++j) CHECK(std::abs(d[j] - ds[j]) < 1e-9);
    }
  }
}

TEST_CASE("synthetic generator") {
  SUBCASE("zero amplitude gives a straight spine") {
    auto spec = default_spec(1);
    spec.amplitude = 0.0;
    Rng rng(1);
    const auto s = data::generate_synthetic(spec, rng);
    for (int k = 0; k < 3; ++k) {
      CHECK(std::abs(s.analytic_degrees[k]) < 1e-9);
      CHECK(std::abs(data::cobb_from_landmarks(s.landmarks)[k]) < 1e-9);
    }
  }
  SUBCASE("same seed gives the same sample") {
    Rng a(7), b(7);
    const auto s1 = data::generate_synthetic(default_spec(7), a);
    const auto s2 = data::generate_synthetic(default_spec(7), b);
    CHECK(s1.image.pixels().values == s2.image.pixels().values);
    CHECK(s1.mask.values().values == s2.mask.values().values);
    CHECK(s1.landmarks.points() == s2.landmarks.points());
  }
  SUBCASE("mask equals the rasterized landmarks and covers every landmark") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng rng(seed);
      const auto s = data::generate_synthetic(default_spec(seed), rng);
      CHECK(data::masks_from_landmarks(s.landmarks).mask.values().values == s.mask.values().values);
      for (const auto& p : s.landmarks.points())
        CHECK(s.mask.values()(std::lround(p.row), std::lround(p.col)) == 1.0);
      CHECK(data::masks_from_landmarks(s.landmarks).warnings.empty());
    }
  }
  SUBCASE("oversized amplitude rejected") {
    auto spec = default_spec(1);
    spec.amplitude = 40.0;
    CHECK_THROWS_AS(spec.validate(), InvalidArgumentError);
  }
  SUBCASE("dataset split and ids") {
    const auto ds = data::synthesize_dataset(default_spec(2), 10);
    CHECK(ds.train.size() == 8);
    CHECK(ds.test.size() == 2);
    CHECK(ds.train[0].source_id() == "syn00000");
    CHECK(ds.test[1].source_id() == "syn00009");
    CHECK(data::synthetic_id(42) == "syn00042");
  }
}

TEST_CASE("written synthetic samples load back through the manifest") {
  const fs::path root = temp_dir("layout");
  Rng rng(6);
  std::vector<data::AngleRow> rows;
  for (int i = 0; i < 3; ++i) {
    const auto s = data::generate_synthetic(default_spec(6), rng, data::synthetic_id(i));
    data::write_sample_files(root / "train", s.image, std::nullopt, s.landmarks);
    rows.push_back({s.image.source_id(), s.analytic_degrees});
  }
  data::write_angle_csv(root / "train" / "angles.csv", rows);
  data::write_angle_csv(root / "test" / "angles.csv", {});
  const auto ds = data::load_dataset(data::load_manifest(root), 64, 32);
  REQUIRE(ds.train.size() == 3);
  for (const auto& s : ds.train) {
    REQUIRE(s.mask.has_value());
    CHECK(s.mask->kind() == MaskKind::GroundTruth);
  }
}
