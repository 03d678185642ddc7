#include <sstream>

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "spinecobb/cli.hpp"
#include "spinecobb/consistency.hpp"
#include "spinecobb/figures.hpp"
#include "spinecobb/metrics.hpp"
#include "spinecobb/regnet.hpp"
#include "spinecobb/segnet.hpp"
#include "spinecobb/trainer.hpp"

namespace py = pybind11;
using namespace spinecobb;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  if (a.ndim() == 2) {
    Tensor t = Tensor::plane(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)));
    std::copy(a.data(), a.data() + a.size(), t.values.begin());
    return t;
  }
  if (a.ndim() == 3) {
    Tensor t(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), static_cast<int>(a.shape(2)));
    std::copy(a.data(), a.data() + a.size(), t.values.begin());
    return t;
  }
  throw py::value_error("expected a 2-D (H, W) or 3-D (C, H, W) array");
}

py::array_t<double> to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape;
  if (t.channels == 1)
    shape = {t.height, t.width};
  else
    shape = {t.channels, t.height, t.width};
  py::array_t<double> out(shape);
  std::copy(t.values.begin(), t.values.end(), out.mutable_data());
  return out;
}

py::array_t<std::uint8_t> to_array(const figures::RgbImage& img) {
  py::array_t<std::uint8_t> out({img.rows, img.cols, 3});
  auto* p = out.mutable_data();
  for (const auto& px : img.pixels) {
    *p++ = px.r;
    *p++ = px.g;
    *p++ = px.b;
  }
  return out;
}

py::dict metrics_dict(const metrics::SegMetrics& m) {
  py::dict d;
  d["ja"] = m.ja;
  d["dice"] = m.dice;
  d["ac"] = m.ac;
  d["se"] = m.se;
  d["sp"] = m.sp;
  return d;
}

LandmarkSet to_landmarks(const Array& pts, int rows, int cols) {
  if (pts.ndim() != 2 || pts.shape(1) != 2) throw py::value_error("landmarks must be an (N, 2) array of (row, col)");
  std::vector<Point2> points;
  for (py::ssize_t i = 0; i < pts.shape(0); ++i) points.push_back({pts.at(i, 0), pts.at(i, 1)});
  return LandmarkSet(std::move(points), rows, cols);
}

/// A trained checkpoint ready for inference.
class Model {
 public:
  explicit Model(const std::filesystem::path& ckpt)
      : loaded_(load_model(ckpt)),
        seg_(loaded_.config.segnet),
        reg_(loaded_.config.regnet),
        pipe_(seg_, reg_, loaded_.theta1, loaded_.theta2, loaded_.gate_active, loaded_.config.variant.input) {}

  py::dict predict(const Array& image) const {
    const Pipeline::Output o = pipe_.run(to_tensor(image));
    py::dict d;
    d["mask"] = to_array(o.mask.values());
    d["cam"] = to_array(o.cam.values);
    d["angles"] = o.reg.triple().degrees(loaded_.config.angle_divisor);
    return d;
  }

  int stage() const { return loaded_.stage; }
  bool gate_active() const { return loaded_.gate_active; }
  std::pair<int, int> input_shape() const { return {loaded_.config.data.rows, loaded_.config.data.cols}; }
  std::string config_json() const { return loaded_.config.to_json().dump(); }

 private:
  LoadedModel loaded_;
  SegNet seg_;
  RegNet reg_;
  Pipeline pipe_;
};

}  // namespace

PYBIND11_MODULE(_spinecobb, m) {
  m.doc() = "Cobb angle estimation with a jointly trained segmenter and regressor";

  py::register_exception<Error>(m, "SpinecobbError", PyExc_RuntimeError);

  m.def(
      "smape_loss",
      [](std::array<double, 3> pred, std::array<double, 3> gt, double epsilon) {
        return smape_loss(pred, gt, epsilon);
      },
      py::arg("pred"), py::arg("gt"), py::arg("epsilon") = 1e-8);
  m.def(
      "seg_loss",
      [](const Array& pred, const Array& gt, double lam) {
        return seg_loss(SpineMask(to_tensor(pred), MaskKind::Predicted), SpineMask(to_tensor(gt), MaskKind::GroundTruth),
                        lam);
      },
      py::arg("pred"), py::arg("gt"), py::arg("lam") = 1.0);
  m.def(
      "ar_loss", [](const Array& a, const Array& b) { return ar_loss(Cam{to_tensor(a)}, Cam{to_tensor(b)}); },
      py::arg("cam_a"), py::arg("cam_b"));
  m.def(
      "roie_fuse",
      [](const Array& cam, const Array& feature, double alpha) {
        return to_array(roie_fuse(Cam{to_tensor(cam)}, MidFeature{to_tensor(feature)}, RoieGate{alpha}).values);
      },
      py::arg("cam"), py::arg("feature"), py::arg("alpha"));
  m.def(
      "extract_cam", [](const Array& maps) { return to_array(extract_cam(to_tensor(maps)).values); }, py::arg("maps"));

  m.def(
      "seg_metrics", [](const Array& pred, const Array& gt) {
        return metrics_dict(metrics::seg_metrics(to_tensor(pred), to_tensor(gt)));
      },
      py::arg("pred"), py::arg("gt"));
  m.def(
      "smape_percent",
      [](const std::vector<AngleDegrees>& preds, const std::vector<AngleDegrees>& gts) {
        return metrics::smape_percent(preds, gts);
      },
      py::arg("preds"), py::arg("gts"));

  m.def(
      "cobb_from_landmarks",
      [](const Array& pts, int rows, int cols) { return data::cobb_from_landmarks(to_landmarks(pts, rows, cols)); },
      py::arg("landmarks"), py::arg("rows"), py::arg("cols"));
  m.def(
      "normalize_angles",
      [](const AngleDegrees& deg, double divisor) { return normalize_angles(deg, divisor).normalized(); },
      py::arg("degrees"), py::arg("divisor") = kDefaultAngleDivisor);

  m.def(
      "generate_synthetic",
      [](const std::string& spec_json, std::uint64_t seed) {
        const data::SyntheticSpec spec = parse_synthetic_spec(nlohmann::json::parse(spec_json));
        Rng rng(seed);
        const auto s = data::generate_synthetic(spec, rng);
        py::array_t<double> lm({static_cast<py::ssize_t>(s.landmarks.points().size()), py::ssize_t{2}});
        double* p = lm.mutable_data();
        for (const auto& pt : s.landmarks.points()) {
          *p++ = pt.row;
          *p++ = pt.col;
        }
        py::dict d;
        d["image"] = to_array(s.image.pixels());
        d["mask"] = to_array(s.mask.values());
        d["landmarks"] = lm;
        d["angles"] = s.analytic_degrees;
        return d;
      },
      py::arg("spec_json"), py::arg("seed"));

  m.def(
      "error_overlay",
      [](const Array& image, const Array& pred, const Array& gt) {
        return to_array(figures::error_overlay(to_tensor(image), to_tensor(pred), to_tensor(gt)));
      },
      py::arg("image"), py::arg("pred"), py::arg("gt"));
  m.def(
      "cam_overlay",
      [](const Array& image, const Array& cam) {
        return to_array(figures::cam_overlay(to_tensor(image), Cam{to_tensor(cam)}));
      },
      py::arg("image"), py::arg("cam"));

  m.def(
      "config_hash", [](const std::filesystem::path& path) { return load_run_config(path).hash_hex(); },
      py::arg("path"));

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = cli::run(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs one CLI subcommand in-process; returns (exit_code, stdout, stderr).");

  py::class_<Model>(m, "Model")
      .def(py::init<const std::filesystem::path&>(), py::arg("ckpt"))
      .def("predict", &Model::predict, py::arg("image"))
      .def_property_readonly("stage", &Model::stage)
      .def_property_readonly("gate_active", &Model::gate_active)
      .def_property_readonly("input_shape", &Model::input_shape)
      .def("config_json", &Model::config_json);
}
