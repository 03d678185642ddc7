#include "spinecobb/data.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>
#include <unistd.h>

#include "spinecobb/nn.hpp"

namespace spinecobb::data {

namespace {

constexpr std::string_view kAngleHeader = "source_id,pt_deg,mt_deg,tl_deg";

std::string trim(std::string s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == '\n' || s.back() == ' ' || s.back() == '\t'))
    s.pop_back();
  std::size_t i = 0;
  while (i < s.size() && (s[i] == ' ' || s[i] == '\t')) ++i;
  return s.substr(i);
}

bool parse_double(std::string_view text, double& out) {
  text = std::string_view(text.data(), text.size());
  while (!text.empty() && text.front() == ' ') text.remove_prefix(1);
  while (!text.empty() && text.back() == ' ') text.remove_suffix(1);
  if (!text.empty() && text.front() == '+') text.remove_prefix(1);
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), out);
  return ec == std::errc() && ptr == text.data() + text.size();
}

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

std::optional<fs::path> find_image(const fs::path& dir, const std::string& id) {
  for (const char* ext : {".png", ".jpg", ".jpeg", ".PNG", ".JPG"}) {
    fs::path p = dir / (id + ext);
    if (fs::exists(p)) return p;
  }
  return std::nullopt;
}

void load_split(const fs::path& dir, Split split, std::vector<ManifestRecord>& out) {
  const fs::path csv = dir / "angles.csv";
  if (!fs::exists(csv)) throw IoError("missing angle CSV: " + csv.string());
  auto rows = read_angle_csv(csv);
  std::sort(rows.begin(), rows.end(),
            [](const AngleRow& a, const AngleRow& b) { return a.source_id < b.source_id; });
  for (const auto& row : rows) {
    ManifestRecord rec;
    rec.source_id = row.source_id;
    rec.angles = row.degrees;
    rec.split = split;
    auto img = find_image(dir / "images", row.source_id);
    if (!img) throw IoError("missing image for " + row.source_id + " under " + (dir / "images").string());
    rec.image_path = *img;
    fs::path lm = dir / "landmarks" / (row.source_id + ".txt");
    if (fs::exists(lm)) rec.landmark_path = lm;
    fs::path mk = dir / "masks" / (row.source_id + ".png");
    if (fs::exists(mk)) rec.mask_path = mk;
    out.push_back(std::move(rec));
  }
}

// Orientation of (b - a) x (c - a) in (col, row) coordinates.
double cross(const Point2& a, const Point2& b, const Point2& c) {
  return (b.col - a.col) * (c.row - a.row) - (b.row - a.row) * (c.col - a.col);
}

bool segments_cross(const Point2& p1, const Point2& p2, const Point2& q1, const Point2& q2) {
  const double d1 = cross(q1, q2, p1);
  const double d2 = cross(q1, q2, p2);
  const double d3 = cross(p1, p2, q1);
  const double d4 = cross(p1, p2, q2);
  return ((d1 > 0 && d2 < 0) || (d1 < 0 && d2 > 0)) && ((d3 > 0 && d4 < 0) || (d3 < 0 && d4 > 0));
}

std::vector<Point2> convex_hull(std::vector<Point2> pts) {
  std::sort(pts.begin(), pts.end(), [](const Point2& a, const Point2& b) {
    return a.col < b.col || (a.col == b.col && a.row < b.row);
  });
  pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
  if (pts.size() < 3) return pts;
  std::vector<Point2> hull(2 * pts.size());
  std::size_t k = 0;
  for (const auto& p : pts) {
    while (k >= 2 && cross(hull[k - 2], hull[k - 1], p) <= 0) --k;
    hull[k++] = p;
  }
  for (std::size_t i = pts.size() - 1, t = k + 1; i > 0; --i) {
    while (k >= t && cross(hull[k - 2], hull[k - 1], pts[i - 1]) <= 0) --k;
    hull[k++] = pts[i - 1];
  }
  hull.resize(k - 1);
  return hull;
}

double polygon_area(const std::vector<Point2>& poly) {
  double a = 0.0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const auto& p = poly[i];
    const auto& q = poly[(i + 1) % poly.size()];
    a += p.col * q.row - q.col * p.row;
  }
  return 0.5 * a;
}

void fill_convex(const std::vector<Point2>& hull, Tensor& mask) {
  double rmin = hull[0].row, rmax = hull[0].row, cmin = hull[0].col, cmax = hull[0].col;
  for (const auto& p : hull) {
    rmin = std::min(rmin, p.row);
    rmax = std::max(rmax, p.row);
    cmin = std::min(cmin, p.col);
    cmax = std::max(cmax, p.col);
  }
  const int r0 = std::max(0, static_cast<int>(std::ceil(rmin - 1e-9)));
  const int r1 = std::min(mask.height - 1, static_cast<int>(std::floor(rmax + 1e-9)));
  const int c0 = std::max(0, static_cast<int>(std::ceil(cmin - 1e-9)));
  const int c1 = std::min(mask.width - 1, static_cast<int>(std::floor(cmax + 1e-9)));
  for (int r = r0; r <= r1; ++r) {
    for (int c = c0; c <= c1; ++c) {
      const Point2 p{static_cast<double>(r), static_cast<double>(c)};
      bool inside = true;
      for (std::size_t i = 0; i < hull.size() && inside; ++i) {
        const auto& a = hull[i];
        const auto& b = hull[(i + 1) % hull.size()];
        const double len = std::hypot(b.row - a.row, b.col - a.col);
        if (cross(a, b, p) < -1e-9 * len) inside = false;
      }
      if (inside) mask(r, c) = 1.0;
    }
  }
}

int clamp_index(long v, int n) { return static_cast<int>(std::clamp<long>(v, 0, n - 1)); }

}  // namespace

std::string_view split_name(Split s) { return s == Split::Train ? "train" : "test"; }

std::size_t DatasetManifest::count(Split s) const {
  return static_cast<std::size_t>(std::count_if(records.begin(), records.end(),
                                                [s](const ManifestRecord& r) { return r.split == s; }));
}

// ---------------------------------------------------------------------------

std::vector<AngleRow> read_angle_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw InvalidArgumentError("malformed CSV (empty): " + path.string());
  if (line.rfind("\xEF\xBB\xBF", 0) == 0) line = line.substr(3);
  if (trim(line) != kAngleHeader)
    throw InvalidArgumentError("malformed CSV header in " + path.string() + ": expected '" +
                               std::string(kAngleHeader) + "'");
  std::vector<AngleRow> rows;
  std::set<std::string> seen;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(trim(f));
    if (fields.size() != 4 || fields[0].empty())
      throw InvalidArgumentError("malformed CSV row " + std::to_string(lineno) + " in " + path.string());
    AngleRow row;
    row.source_id = fields[0];
    for (int i = 0; i < 3; ++i) {
      if (!parse_double(fields[i + 1], row.degrees[i]))
        throw InvalidArgumentError("malformed angle '" + fields[i + 1] + "' on row " +
                                   std::to_string(lineno) + " in " + path.string());
      if (!(row.degrees[i] >= 0.0 && row.degrees[i] <= kDefaultAngleDivisor))
        throw OutOfRangeError("angle " + fields[i + 1] + " outside [0, 90] for " + row.source_id);
    }
    if (!seen.insert(row.source_id).second)
      throw InvalidArgumentError("duplicate source_id " + row.source_id + " in " + path.string());
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_angle_csv(const fs::path& path, std::span<const AngleRow> rows) {
  std::string out(kAngleHeader);
  out += '\n';
  for (const auto& r : rows) {
    out += r.source_id;
    for (double d : r.degrees) {
      out += ',';
      out += format_double(d);
    }
    out += '\n';
  }
  write_file_atomic(path, out);
}

DatasetManifest load_manifest(const fs::path& root) {
  if (!fs::is_directory(root)) throw IoError("dataset root not found: " + root.string());
  DatasetManifest m;
  m.root = root;
  const bool has_splits = fs::is_directory(root / "train") || fs::is_directory(root / "test");
  if (has_splits) {
    if (fs::is_directory(root / "train")) load_split(root / "train", Split::Train, m.records);
    if (fs::is_directory(root / "test")) load_split(root / "test", Split::Test, m.records);
  } else {
    load_split(root, Split::Train, m.records);
  }
  std::set<std::string> ids;
  for (const auto& r : m.records)
    if (!ids.insert(r.source_id).second)
      throw InvalidArgumentError("duplicate source_id across splits: " + r.source_id);
  return m;
}

void write_file_atomic(const fs::path& path, std::string_view bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp" + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

XrayImage read_image(const fs::path& path, const std::string& source_id) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (m.empty()) throw IoError("cannot read image " + path.string());
  if (m.channels() == 3) cv::cvtColor(m, m, cv::COLOR_BGR2GRAY);
  if (m.channels() == 4) cv::cvtColor(m, m, cv::COLOR_BGRA2GRAY);
  double scale = 1.0;
  if (m.depth() == CV_8U) scale = 1.0 / 255.0;
  else if (m.depth() == CV_16U) scale = 1.0 / 65535.0;
  else throw IoError("unsupported image depth in " + path.string());
  cv::Mat d;
  m.convertTo(d, CV_64F, scale);
  Tensor t = Tensor::plane(d.rows, d.cols);
  for (int r = 0; r < d.rows; ++r)
    for (int c = 0; c < d.cols; ++c) t(r, c) = d.at<double>(r, c);
  return {std::move(t), source_id};
}

void write_gray_png(const fs::path& path, const Tensor& plane) {
  cv::Mat m(plane.height, plane.width, CV_8U);
  for (int r = 0; r < plane.height; ++r)
    for (int c = 0; c < plane.width; ++c)
      m.at<std::uint8_t>(r, c) =
          static_cast<std::uint8_t>(std::lround(std::clamp(plane(r, c), 0.0, 1.0) * 255.0));
  std::vector<std::uint8_t> buf;
  if (!cv::imencode(".png", m, buf)) throw IoError("PNG encode failed for " + path.string());
  write_file_atomic(path, std::string_view(reinterpret_cast<const char*>(buf.data()), buf.size()));
}

SpineMask read_mask_png(const fs::path& path) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  if (m.empty()) throw IoError("cannot read mask " + path.string());
  Tensor t = Tensor::plane(m.rows, m.cols);
  for (int r = 0; r < m.rows; ++r)
    for (int c = 0; c < m.cols; ++c) t(r, c) = m.at<std::uint8_t>(r, c) > 127 ? 1.0 : 0.0;
  return {std::move(t), MaskKind::GroundTruth};
}

LandmarkSet read_landmarks(const fs::path& path, int image_rows, int image_cols, int expected_points) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open landmarks " + path.string());
  std::vector<Point2> pts;
  std::string line;
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string a, b, extra;
    if (!(ss >> a >> b) || (ss >> extra))
      throw InvalidArgumentError("malformed landmark line in " + path.string());
    Point2 p;
    if (!parse_double(a, p.row) || !parse_double(b, p.col))
      throw InvalidArgumentError("malformed landmark coordinate in " + path.string());
    pts.push_back(p);
  }
  if (expected_points > 0 && static_cast<int>(pts.size()) != expected_points)
    throw InvalidArgumentError(path.string() + ": expected " + std::to_string(expected_points) +
                               " landmarks, found " + std::to_string(pts.size()));
  return {std::move(pts), image_rows, image_cols};
}

void write_landmarks(const fs::path& path, const LandmarkSet& lm) {
  std::string out;
  for (const auto& p : lm.points()) out += format_double(p.row) + " " + format_double(p.col) + "\n";
  write_file_atomic(path, out);
}

// ---------------------------------------------------------------------------

XrayImage preprocess(const XrayImage& img, int rows, int cols) {
  if (rows < kMinImageSide || cols < kMinImageSide)
    throw InvalidArgumentError("degenerate preprocess target " + std::to_string(rows) + "x" +
                               std::to_string(cols));
  Tensor out = nn::resample_bilinear(img.pixels(), rows, cols);
  for (double& v : out.values) v = std::clamp(v, 0.0, 1.0);
  return {std::move(out), img.source_id()};
}

SpineMask resize_mask(const SpineMask& mask, int rows, int cols) {
  const Tensor& src = mask.values();
  if (src.height == rows && src.width == cols) return mask;
  Tensor out = Tensor::plane(rows, cols);
  for (int r = 0; r < rows; ++r) {
    const int sr = clamp_index(static_cast<long>(std::floor((r + 0.5) * src.height / rows)), src.height);
    for (int c = 0; c < cols; ++c) {
      const int sc = clamp_index(static_cast<long>(std::floor((c + 0.5) * src.width / cols)), src.width);
      out(r, c) = src(sr, sc);
    }
  }
  return {std::move(out), mask.kind()};
}

LandmarkSet rescale_landmarks(const LandmarkSet& lm, int rows, int cols) {
  const double sr = static_cast<double>(rows) / lm.image_rows();
  const double sc = static_cast<double>(cols) / lm.image_cols();
  std::vector<Point2> pts;
  pts.reserve(lm.points().size());
  for (const auto& p : lm.points())
    pts.push_back({std::clamp((p.row + 0.5) * sr - 0.5, 0.0, rows - 1.0),
                   std::clamp((p.col + 0.5) * sc - 0.5, 0.0, cols - 1.0)});
  return {std::move(pts), rows, cols};
}

void AugmentationConfig::validate() const {
  if (!(rotation_lo <= rotation_hi)) throw InvalidArgumentError("rotation range lo > hi");
  if (!(rescale_lo <= rescale_hi) || rescale_lo <= 0.0)
    throw InvalidArgumentError("rescale range must satisfy 0 < lo <= hi");
  if (flip_probability < 0.0 || flip_probability > 1.0)
    throw InvalidArgumentError("flip probability outside [0,1]");
  if (target_rows <= 0 || target_cols <= 0) throw InvalidArgumentError("target size must be positive");
}

AugmentParams draw_augmentation(const AugmentationConfig& cfg, Rng& rng) {
  cfg.validate();
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  AugmentParams p;
  p.flip = unit(rng) < cfg.flip_probability;
  p.rotation_deg = cfg.rotation_lo + (cfg.rotation_hi - cfg.rotation_lo) * unit(rng);
  p.scale = cfg.rescale_lo + (cfg.rescale_hi - cfg.rescale_lo) * unit(rng);
  return p;
}

Augmented apply_augmentation(const XrayImage& img, const SpineMask& mask, const CobbTriple& angles,
                             const AugmentParams& params, int target_rows, int target_cols) {
  if (img.rows() != mask.rows() || img.cols() != mask.cols())
    throw ShapeMismatchError("augment: image and mask shapes differ");
  const bool identity = !params.flip && params.rotation_deg == 0.0 && params.scale == 1.0 &&
                        img.rows() == target_rows && img.cols() == target_cols;
  if (identity) return {img, mask, angles};

  // dst = centre_out + D * s * R * F * (src - centre_in), in (x = col, y = row).
  const double sx = params.scale * target_cols / img.cols();
  const double sy = params.scale * target_rows / img.rows();
  const double th = params.rotation_deg * std::numbers::pi / 180.0;
  const double f = params.flip ? -1.0 : 1.0;
  const double a00 = sx * std::cos(th) * f, a01 = -sx * std::sin(th);
  const double a10 = sy * std::sin(th) * f, a11 = sy * std::cos(th);
  const double cx_in = (img.cols() - 1) / 2.0, cy_in = (img.rows() - 1) / 2.0;
  const double cx_out = (target_cols - 1) / 2.0, cy_out = (target_rows - 1) / 2.0;
  cv::Mat M = (cv::Mat_<double>(2, 3) << a00, a01, cx_out - a00 * cx_in - a01 * cy_in,  //
               a10, a11, cy_out - a10 * cx_in - a11 * cy_in);

  auto warp = [&](const Tensor& t, int interp) {
    cv::Mat src(t.height, t.width, CV_64F, const_cast<double*>(t.values.data()));
    cv::Mat dst;
    cv::warpAffine(src, dst, M, cv::Size(target_cols, target_rows), interp, cv::BORDER_CONSTANT, 0.0);
    Tensor out = Tensor::plane(target_rows, target_cols);
    for (int r = 0; r < target_rows; ++r)
      for (int c = 0; c < target_cols; ++c) out(r, c) = std::clamp(dst.at<double>(r, c), 0.0, 1.0);
    return out;
  };
  return {XrayImage(warp(img.pixels(), cv::INTER_LINEAR), img.source_id()),
          SpineMask(warp(mask.values(), cv::INTER_NEAREST), mask.kind()), angles};
}

Augmented augment(const XrayImage& img, const SpineMask& mask, const CobbTriple& angles,
                  const AugmentationConfig& cfg, Rng& rng) {
  return apply_augmentation(img, mask, angles, draw_augmentation(cfg, rng), cfg.target_rows,
                            cfg.target_cols);
}

// ---------------------------------------------------------------------------

RasterResult masks_from_landmarks(const LandmarkSet& lm) {
  Tensor mask = Tensor::plane(lm.image_rows(), lm.image_cols());
  std::vector<std::string> warnings;
  for (int v = 0; v < lm.vertebra_count(); ++v) {
    const Point2& tl = lm.corner(v, kTopLeft);
    const Point2& tr = lm.corner(v, kTopRight);
    const Point2& bl = lm.corner(v, kBottomLeft);
    const Point2& br = lm.corner(v, kBottomRight);
    std::vector<Point2> hull = convex_hull({tl, tr, br, bl});
    if (hull.size() < 3 || std::abs(polygon_area(hull)) < 1e-9) {
      warnings.push_back("vertebra " + std::to_string(v) + ": degenerate corners, no area");
      continue;
    }
    if (segments_cross(tl, tr, br, bl) || segments_cross(tr, br, bl, tl))
      warnings.push_back("vertebra " + std::to_string(v) +
                         ": self-intersecting corners, using convex hull");
    fill_convex(hull, mask);
    for (const Point2* p : {&tl, &tr, &bl, &br})
      mask(clamp_index(std::lround(p->row), mask.height), clamp_index(std::lround(p->col), mask.width)) = 1.0;
  }
  return {SpineMask(std::move(mask), MaskKind::GroundTruth), std::move(warnings)};
}

double endplate_angle_deg(const Point2& left, const Point2& right) {
  double a = std::atan2(-(right.row - left.row), right.col - left.col) * 180.0 / std::numbers::pi;
  if (a > 90.0) a -= 180.0;
  if (a <= -90.0) a += 180.0;
  return a;
}

CobbMeasurement cobb_from_endplates(std::span<const double> endplate_deg) {
  if (endplate_deg.size() < 2) throw InvalidArgumentError("need at least two endplates");
  CobbMeasurement m;
  m.endplate_deg.assign(endplate_deg.begin(), endplate_deg.end());
  const auto n = static_cast<int>(endplate_deg.size());
  // Exhaustive pair search; near-ties resolve to the first pair in
  // top-to-bottom order, which argmax/argmin would not guarantee.
  double best = -1.0;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      const double d = std::abs(endplate_deg[i] - endplate_deg[j]);
      if (d > best) {
        best = d;
        m.mt_upper = i;
        m.mt_lower = j;
      }
    }
  auto range = [&](int lo, int hi) {
    double mx = endplate_deg[lo], mn = endplate_deg[lo];
    for (int i = lo + 1; i <= hi; ++i) {
      mx = std::max(mx, endplate_deg[i]);
      mn = std::min(mn, endplate_deg[i]);
    }
    return mx - mn;
  };
  m.degrees = {range(0, m.mt_upper), best, range(m.mt_lower, n - 1)};
  return m;
}

CobbMeasurement measure_cobb(const LandmarkSet& lm) {
  std::vector<double> centre_rows;
  std::vector<double> endplates;
  for (int v = 0; v < lm.vertebra_count(); ++v) {
    const Point2& tl = lm.corner(v, kTopLeft);
    const Point2& tr = lm.corner(v, kTopRight);
    const Point2& bl = lm.corner(v, kBottomLeft);
    const Point2& br = lm.corner(v, kBottomRight);
    centre_rows.push_back((tl.row + tr.row + bl.row + br.row) / 4.0);
    endplates.push_back(endplate_angle_deg(tl, tr));
    endplates.push_back(endplate_angle_deg(bl, br));
  }
  std::sort(centre_rows.begin(), centre_rows.end());
  int distinct = centre_rows.empty() ? 0 : 1;
  for (std::size_t i = 1; i < centre_rows.size(); ++i)
    if (centre_rows[i] - centre_rows[i - 1] > 1e-6) ++distinct;
  if (distinct < 3) throw InvalidArgumentError("fewer than 3 distinct vertebra rows");
  return cobb_from_endplates(endplates);
}

AngleDegrees cobb_from_landmarks(const LandmarkSet& lm) { return measure_cobb(lm).degrees; }

// ---------------------------------------------------------------------------

namespace {

struct CurveBounds {
  double pitch;
  double length;
  double height;
  double max_slope;
};

constexpr double kMaxFrequency = 1.25;
constexpr double kMinFrequency = 0.5;

CurveBounds curve_bounds(const SyntheticSpec& s) {
  CurveBounds b;
  b.pitch = (s.rows - 1 - 2.0 * s.margin) / s.vertebra_count;
  b.length = b.pitch * s.vertebra_count;
  b.height = s.vertebra_height_ratio * b.pitch;
  b.max_slope = s.amplitude * 2.0 * std::numbers::pi * kMaxFrequency / b.length;
  return b;
}

}  // namespace

void SyntheticSpec::validate() const {
  if (vertebra_count < 3) throw InvalidArgumentError("synthetic spine needs >= 3 vertebrae");
  if (rows < kMinImageSide || cols < kMinImageSide) throw InvalidArgumentError("synthetic image too small");
  if (amplitude < 0.0 || vertebra_width <= 0.0 || vertebra_height_ratio <= 0.0 ||
      vertebra_height_ratio > 1.0 || margin < 0.0 || noise < 0.0 || blur_sigma < 0.0 ||
      min_amplitude_fraction < 0.0 || min_amplitude_fraction > 1.0 || test_fraction < 0.0 ||
      test_fraction > 1.0)
    throw InvalidArgumentError("synthetic spec field out of range");
  const CurveBounds b = curve_bounds(*this);
  if (b.pitch <= 0.0) throw InvalidArgumentError("margin leaves no room for vertebrae");
  const double norm = std::sqrt(1.0 + b.max_slope * b.max_slope);
  const double half_col = (b.height / 2.0) * b.max_slope / norm + (vertebra_width / 2.0);
  const double half_row = b.height / 2.0 + (vertebra_width / 2.0) * b.max_slope / norm;
  const double centre_col = (cols - 1) / 2.0;
  if (centre_col - amplitude - half_col < 0.0)
    throw InvalidArgumentError("synthetic spec pushes vertebrae out of frame (columns)");
  if (margin + b.pitch / 2.0 - half_row < 0.0)
    throw InvalidArgumentError("synthetic spec pushes vertebrae out of frame (rows)");
  if (std::atan(b.max_slope) * 2.0 * 180.0 / std::numbers::pi > kDefaultAngleDivisor)
    throw InvalidArgumentError("synthetic spec can produce Cobb angles above 90 degrees");
}

SyntheticSample generate_synthetic(const SyntheticSpec& spec, Rng& rng, const std::string& source_id) {
  spec.validate();
  const CurveBounds b = curve_bounds(spec);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double amp =
      spec.amplitude * (spec.min_amplitude_fraction + (1.0 - spec.min_amplitude_fraction) * unit(rng));
  const double freq = kMinFrequency + (kMaxFrequency - kMinFrequency) * unit(rng);
  const double phase = 2.0 * std::numbers::pi * unit(rng);
  const double omega = 2.0 * std::numbers::pi * freq / b.length;
  const double centre_col = (spec.cols - 1) / 2.0;

  std::vector<Point2> pts;
  std::vector<double> tangent_deg;
  const double hh = b.height / 2.0;
  const double hw = spec.vertebra_width / 2.0;
  for (int k = 0; k < spec.vertebra_count; ++k) {
    const double s = (k + 0.5) * b.pitch;  // arc parameter along the rows
    const double row = spec.margin + s;
    const double col = centre_col + amp * std::sin(omega * s + phase);
    const double slope = amp * omega * std::cos(omega * s + phase);
    const double n = std::sqrt(1.0 + slope * slope);
    const Point2 axis{1.0 / n, slope / n};
    const Point2 perp{-slope / n, 1.0 / n};
    auto corner = [&](double da, double dp) {
      return Point2{row + da * axis.row + dp * perp.row, col + da * axis.col + dp * perp.col};
    };
    pts.push_back(corner(-hh, -hw));  // TL
    pts.push_back(corner(-hh, hw));   // TR
    pts.push_back(corner(hh, -hw));   // BL
    pts.push_back(corner(hh, hw));    // BR
    const double tilt = std::atan(slope) * 180.0 / std::numbers::pi;
    tangent_deg.push_back(tilt);
    tangent_deg.push_back(tilt);
  }
  LandmarkSet lm(std::move(pts), spec.rows, spec.cols);
  const AngleDegrees analytic = cobb_from_endplates(tangent_deg).degrees;
  RasterResult raster = masks_from_landmarks(lm);

  cv::Mat mask_mat(spec.rows, spec.cols, CV_64F, const_cast<double*>(raster.mask.values().values.data()));
  cv::Mat blurred;
  if (spec.blur_sigma > 0.0)
    cv::GaussianBlur(mask_mat, blurred, cv::Size(0, 0), spec.blur_sigma, spec.blur_sigma);
  else
    blurred = mask_mat.clone();
  std::normal_distribution<double> noise(0.0, 1.0);
  Tensor img = Tensor::plane(spec.rows, spec.cols);
  for (int r = 0; r < spec.rows; ++r)
    for (int c = 0; c < spec.cols; ++c)
      img(r, c) = std::clamp(0.15 + 0.65 * blurred.at<double>(r, c) + spec.noise * noise(rng), 0.0, 1.0);

  return {XrayImage(std::move(img), source_id), std::move(raster.mask), std::move(lm), analytic,
          normalize_angles(analytic)};
}

// ---------------------------------------------------------------------------

Dataset load_dataset(const DatasetManifest& manifest, int rows, int cols, double angle_divisor) {
  Dataset ds;
  for (const auto& rec : manifest.records) {
    XrayImage raw = read_image(rec.image_path, rec.source_id);
    std::optional<SpineMask> mask;
    if (rec.mask_path) {
      mask = read_mask_png(*rec.mask_path);
    } else if (rec.landmark_path) {
      mask = masks_from_landmarks(read_landmarks(*rec.landmark_path, raw.rows(), raw.cols())).mask;
    }
    if (mask) {
      validate_pair(raw, *mask);
      mask = resize_mask(*mask, rows, cols);
    }
    Sample s{preprocess(raw, rows, cols), std::move(mask), normalize_angles(rec.angles, angle_divisor), rec.split};
    (rec.split == Split::Train ? ds.train : ds.test).push_back(std::move(s));
  }
  return ds;
}

std::string synthetic_id(int index) {
  char id[32];
  std::snprintf(id, sizeof(id), "syn%05d", index);
  return id;
}

Split synthetic_split(int index, int count, double test_fraction) {
  const int n_test = static_cast<int>(std::lround(count * test_fraction));
  return index >= count - n_test ? Split::Test : Split::Train;
}

Dataset synthesize_dataset(const SyntheticSpec& spec, int count) {
  spec.validate();
  Dataset ds;
  for (int i = 0; i < count; ++i) {
    const std::string id = synthetic_id(i);
    Rng rng(sample_seed(spec.seed, id));
    SyntheticSample s = generate_synthetic(spec, rng, id);
    const Split split = synthetic_split(i, count, spec.test_fraction);
    Sample sample{std::move(s.image), std::move(s.mask), s.angles, split};
    (split == Split::Train ? ds.train : ds.test).push_back(std::move(sample));
  }
  return ds;
}

void write_sample_files(const fs::path& split_dir, const XrayImage& image,
                        const std::optional<SpineMask>& mask,
                        const std::optional<LandmarkSet>& landmarks) {
  write_gray_png(split_dir / "images" / (image.source_id() + ".png"), image.pixels());
  if (mask) write_gray_png(split_dir / "masks" / (image.source_id() + ".png"), mask->values());
  if (landmarks) write_landmarks(split_dir / "landmarks" / (image.source_id() + ".txt"), *landmarks);
}

}  // namespace spinecobb::data
