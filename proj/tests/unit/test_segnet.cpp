#include <doctest.h>

#include "spinecobb/segnet.hpp"
#include "support.hpp"

using namespace spinecobb;
using namespace testsupport;

namespace {

SpineMask soft(const Tensor& t) { return SpineMask(t, MaskKind::Predicted); }
SpineMask hard(const Tensor& t) { return SpineMask(t, MaskKind::GroundTruth); }

}  // namespace

TEST_CASE("seg_loss examples") {
  SUBCASE("confident exact prediction") {
    Rng rng(1);
    const Tensor y = random_binary(rng, 4, 4);
    CHECK(seg_loss(soft(y), hard(y), 1.0) == doctest::Approx(0.0).epsilon(1e-6));
  }
  SUBCASE("2x2 hand computation") {
    Tensor y = Tensor::plane(2, 2);
    y(0, 0) = 1.0;
    const double v = seg_loss(soft(Tensor::plane(2, 2, 0.5)), hard(y), 1.0);
    CHECK(std::abs(v - (2.0 / 3.0 + std::log(2.0))) < 1e-6);
    CHECK(std::abs(v - 1.3598) < 1e-4);
  }
  SUBCASE("lambda 0 equals an independent Dice routine") {
    Rng rng(2);
    for (int i = 0; i < 20; ++i) {
      const Tensor s = random_tensor(rng, 1, 4, 4, 0.01, 0.99);
      const Tensor y = random_binary(rng, 4, 4);
      CHECK(std::abs(seg_loss(soft(s), hard(y), 0.0) - ref_dice_loss(s, y)) < 1e-9);
    }
  }
  SUBCASE("full loss equals the reference") {
    Rng rng(3);
    for (int i = 0; i < 20; ++i) {
      const Tensor s = random_tensor(rng, 1, 6, 5);
      const Tensor y = random_binary(rng, 6, 5);
      CHECK(std::abs(seg_loss(soft(s), hard(y), 0.7) - ref_seg_loss(s, y, 0.7)) < 1e-12);
    }
  }
  SUBCASE("non-binary ground truth rejected") {
    CHECK_THROWS_AS(seg_loss(soft(Tensor::plane(2, 2, 0.5)), SpineMask(Tensor::plane(2, 2, 0.5), MaskKind::GroundTruth), 1.0),
                    OutOfRangeError);
    CHECK_THROWS_AS(seg_loss(soft(Tensor::plane(2, 2, 0.5)), hard(Tensor::plane(2, 3)), 1.0), ShapeMismatchError);
  }
}

TEST_CASE("seg_loss is non-negative and monotone under loss of confidence") {
  Rng rng(4);
  for (int i = 0; i < 20; ++i) {
    const Tensor y = random_binary(rng, 4, 4);
    Tensor s = y;
    const double base = seg_loss(soft(s), hard(y), 1.0);
    CHECK(base >= 0.0);
    s.values[static_cast<std::size_t>(i % 16)] = 0.5;
    CHECK(seg_loss(soft(s), hard(y), 1.0) > base);
    const Tensor r = random_tensor(rng, 1, 4, 4);
    CHECK(seg_loss(soft(r), hard(y), 1.0) >= 0.0);
  }
}

TEST_CASE("seg_loss gradient matches central differences") {
  Rng rng(5);
  for (int i = 0; i < 10; ++i) {
    Tensor s = random_tensor(rng, 1, 4, 4, 0.05, 0.95);
    const Tensor y = random_binary(rng, 4, 4);
    const Tensor g = seg_loss_grad(s, y, 1.0);
    std::vector<double> a, n;
    for (std::size_t k = 0; k < s.size(); ++k) {
      a.push_back(g.values[k]);
      n.push_back(central_difference([&] { return ref_seg_loss(s, y, 1.0); }, s.values[k]));
    }
    CHECK(relative_error(a, n) < 1e-4);
  }
}

TEST_CASE("segnet forward contracts") {
  const SegNet net({});
  ParameterSet p = net.init(7);
  Rng rng(6);
  const Tensor img = random_tensor(rng, 1, 32, 16);

  SUBCASE("output shape and range, alpha starts at zero") {
    const auto out = net.forward(p, img);
    CHECK(out.mask.rows() == 32);
    CHECK(out.mask.cols() == 16);
    CHECK(out.mask.kind() == MaskKind::Predicted);
    for (double v : out.mask.values().values) CHECK((v > 0.0 && v < 1.0));
    CHECK(p.at(kAlphaKey).values == std::vector<double>{0.0});
    CHECK(p.parameter_count() <= 200000);
  }
  SUBCASE("gate with alpha 0 equals the ungated forward") {
    const Cam cam = random_cam(rng, 32, 16);
    const auto a = net.forward(p, img);
    const auto b = net.forward(p, img, &cam);
    for (std::size_t i = 0; i < a.mask.values().size(); ++i)
      CHECK(std::abs(a.mask.values().values[i] - b.mask.values().values[i]) < 1e-6);
    p.at(kAlphaKey).values[0] = 0.5;
    const auto c = net.forward(p, img, &cam);
    CHECK(c.mask.values().values != a.mask.values().values);
  }
  SUBCASE("zero parameters give sigmoid(bias) everywhere") {
    for (auto& [name, arr] : p.entries()) std::fill(arr.values.begin(), arr.values.end(), 0.0);
    p.at("segnet/head/bias").values[0] = 0.3;
    const auto out = net.forward(p, img);
    for (double v : out.mask.values().values) CHECK(std::abs(v - nn::sigmoid(0.3)) < 1e-15);
  }
  SUBCASE("mid feature is the injection-layer resolution") {
    const auto out = net.forward(p, img);
    CHECK(out.mid_feature.values.height == 32 / net.output_stride());
    CHECK(out.mid_feature.values.width == 16 / net.output_stride());
    CHECK(net.injection_unit() == net.encoder_unit_names().back());
  }
  SUBCASE("bad injection name rejected") {
    SegNetConfig cfg;
    cfg.injection = "nope";
    CHECK_THROWS_AS(SegNet{cfg}, InvalidArgumentError);
    SegNetConfig neg;
    neg.lambda = -1.0;
    CHECK_THROWS_AS(neg.validate(), InvalidArgumentError);
  }
}

TEST_CASE("segnet backward matches central differences") {
  const SegNet net({});
  ParameterSet p = net.init(8);
  Rng rng(7);
  jitter_biases(p, rng);
  const Tensor img = random_tensor(rng, 1, 16, 16);
  const Tensor y = random_binary(rng, 16, 16, 0.3);

  for (bool gated : {false, true}) {
    CAPTURE(gated);
    const Cam cam = random_cam(rng, 16, 16);
    const Cam* cp = gated ? &cam : nullptr;
    if (gated) p.at(kAlphaKey).values[0] = 0.4;
    SegNet::Trace trace;
    const auto out = net.forward(p, img, cp, &trace);
    const Tensor gp = seg_loss_grad(out.mask.values(), y, 1.0);
    GradientSet grads;
    net.backward(p, trace, gp, &grads);
    CHECK(grads.contains(kAlphaKey) == gated);
    auto loss = [&] { return ref_seg_loss(net.forward(p, img, cp).mask.values(), y, 1.0); };
    CHECK(param_grad_error(p, grads, loss, rng, 2) < 1e-4);
    if (gated) {
      const double fd = central_difference(loss, p.at(kAlphaKey).values[0]);
      CHECK(std::abs(grads.at(kAlphaKey)[0] - fd) <= 1e-4 * std::max(std::abs(fd), 1e-8));
    }
  }
}

TEST_CASE("presets") {
  for (const char* preset : {"tiny", "small", "resnet50-like"}) {
    SegNetConfig cfg;
    cfg.preset = preset;
    const SegNet net(cfg);
    CHECK(net.init(1).contains(kAlphaKey));
  }
  SegNetConfig cfg;
  cfg.preset = "huge";
  CHECK_THROWS(SegNet{cfg});
}
