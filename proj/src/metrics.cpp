#include "spinecobb/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

namespace spinecobb::metrics {

namespace {

double ratio_or_one(double num, double den) { return den == 0.0 ? 1.0 : num / den; }

void check_lists(std::span<const AngleDegrees> preds, std::span<const AngleDegrees> gts) {
  if (preds.empty()) throw InvalidArgumentError("metric over an empty list");
  if (preds.size() != gts.size())
    throw ShapeMismatchError("prediction and ground-truth lists differ in length");
}

std::string fmt2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

std::string pad(std::string s, std::size_t width) {
  if (s.size() < width) s.append(width - s.size(), ' ');
  return s;
}

nlohmann::json seg_to_json(const SegMetrics& s) {
  return {{"ja", s.ja}, {"dice", s.dice}, {"ac", s.ac}, {"se", s.se}, {"sp", s.sp}};
}

SegMetrics seg_from_json(const nlohmann::json& j) {
  return {j.at("ja").get<double>(), j.at("dice").get<double>(), j.at("ac").get<double>(),
          j.at("se").get<double>(), j.at("sp").get<double>()};
}

bool seg_equal(const std::optional<SegMetrics>& a, const std::optional<SegMetrics>& b) {
  if (a.has_value() != b.has_value()) return false;
  if (!a) return true;
  return a->ja == b->ja && a->dice == b->dice && a->ac == b->ac && a->se == b->se && a->sp == b->sp;
}

}  // namespace

Tensor binarize(const Tensor& soft, double threshold) {
  Tensor out = soft;
  for (double& v : out.values) v = v >= threshold ? 1.0 : 0.0;
  return out;
}

ConfusionCounts confusion(const Tensor& pred, const Tensor& gt) {
  if (!pred.same_shape(gt))
    throw ShapeMismatchError("seg_metrics: " + pred.shape_string() + " vs " + gt.shape_string());
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = pred.values[i];
    const double g = gt.values[i];
    if ((p != 0.0 && p != 1.0) || (g != 0.0 && g != 1.0))
      throw OutOfRangeError("seg_metrics expects binary masks");
    if (p == 1.0) (g == 1.0 ? c.tp : c.fp)++;
    else (g == 1.0 ? c.fn : c.tn)++;
  }
  return c;
}

SegMetrics seg_metrics_from_counts(const ConfusionCounts& c) {
  const auto tp = static_cast<double>(c.tp), fp = static_cast<double>(c.fp);
  const auto fn = static_cast<double>(c.fn), tn = static_cast<double>(c.tn);
  SegMetrics m;
  m.ja = ratio_or_one(tp, tp + fp + fn);
  m.dice = ratio_or_one(2.0 * tp, 2.0 * tp + fp + fn);
  m.ac = ratio_or_one(tp + tn, tp + fp + fn + tn);
  m.se = ratio_or_one(tp, tp + fn);
  m.sp = ratio_or_one(tn, tn + fp);
  return m;
}

SegMetrics seg_metrics(const Tensor& pred, const Tensor& gt) {
  return seg_metrics_from_counts(confusion(pred, gt));
}

std::array<double, 3> mae_deg(std::span<const AngleDegrees> preds, std::span<const AngleDegrees> gts) {
  check_lists(preds, gts);
  std::array<double, 3> m{};
  for (std::size_t s = 0; s < preds.size(); ++s)
    for (int k = 0; k < 3; ++k) m[k] += std::abs(preds[s][k] - gts[s][k]);
  for (double& v : m) v /= static_cast<double>(preds.size());
  return m;
}

namespace {

double sample_smape(const AngleDegrees& pred, const AngleDegrees& gt, double epsilon) {
  double num = 0.0, den = 0.0;
  for (int k = 0; k < 3; ++k) {
    num += std::abs(gt[k] - pred[k]);
    den += gt[k] + pred[k] + epsilon;
  }
  return num == 0.0 ? 0.0 : num / den;
}

}  // namespace

double smape_percent(std::span<const AngleDegrees> preds, std::span<const AngleDegrees> gts,
                     double epsilon) {
  check_lists(preds, gts);
  double total = 0.0;
  for (std::size_t s = 0; s < preds.size(); ++s) total += sample_smape(preds[s], gts[s], epsilon);
  return 100.0 * total / static_cast<double>(preds.size());
}

EvalReport build_report(std::span<const std::string> ids, std::span<const AngleDegrees> preds,
                        std::span<const AngleDegrees> gts, std::span<const SegPair> seg) {
  if (ids.size() != preds.size() || preds.size() != gts.size())
    throw ShapeMismatchError("build_report: ids, predictions and ground truth are not aligned");
  if (!seg.empty() && seg.size() != ids.size())
    throw ShapeMismatchError("build_report: segmentation outputs are not aligned");
  EvalReport r;
  r.sample_count = ids.size();
  r.mae = mae_deg(preds, gts);
  r.smape = smape_percent(preds, gts);
  SegMetrics sum{0, 0, 0, 0, 0};
  for (std::size_t i = 0; i < ids.size(); ++i) {
    SampleRecord rec{ids[i], preds[i], gts[i], 100.0 * sample_smape(preds[i], gts[i], kSmapeEpsilon), {}};
    if (!seg.empty()) {
      rec.seg = seg_metrics(binarize(seg[i].pred), binarize(seg[i].gt));
      sum.ja += rec.seg->ja;
      sum.dice += rec.seg->dice;
      sum.ac += rec.seg->ac;
      sum.se += rec.seg->se;
      sum.sp += rec.seg->sp;
    }
    r.samples.push_back(std::move(rec));
  }
  if (!seg.empty()) {
    const double n = static_cast<double>(seg.size());
    r.seg = SegMetrics{sum.ja / n, sum.dice / n, sum.ac / n, sum.se / n, sum.sp / n};
  }
  return r;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  j["sample_count"] = sample_count;
  j["mae_deg"] = {{"pt", mae[0]}, {"mt", mae[1]}, {"tl", mae[2]}};
  j["smape_percent"] = smape;
  if (seg) j["segmentation"] = seg_to_json(*seg);
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& s : samples) {
    nlohmann::json e{{"source_id", s.source_id},
                     {"pred_deg", s.pred},
                     {"gt_deg", s.gt},
                     {"smape_percent", s.smape}};
    if (s.seg) e["segmentation"] = seg_to_json(*s.seg);
    arr.push_back(std::move(e));
  }
  j["samples"] = std::move(arr);
  return j;
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  EvalReport r;
  r.sample_count = j.at("sample_count").get<std::size_t>();
  const auto& m = j.at("mae_deg");
  r.mae = {m.at("pt").get<double>(), m.at("mt").get<double>(), m.at("tl").get<double>()};
  r.smape = j.at("smape_percent").get<double>();
  if (j.contains("segmentation")) r.seg = seg_from_json(j.at("segmentation"));
  for (const auto& e : j.at("samples")) {
    SampleRecord s;
    s.source_id = e.at("source_id").get<std::string>();
    s.pred = e.at("pred_deg").get<AngleDegrees>();
    s.gt = e.at("gt_deg").get<AngleDegrees>();
    s.smape = e.at("smape_percent").get<double>();
    if (e.contains("segmentation")) s.seg = seg_from_json(e.at("segmentation"));
    r.samples.push_back(std::move(s));
  }
  return r;
}

bool EvalReport::operator==(const EvalReport& o) const {
  if (sample_count != o.sample_count || mae != o.mae || smape != o.smape || !seg_equal(seg, o.seg) ||
      samples.size() != o.samples.size())
    return false;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& a = samples[i];
    const auto& b = o.samples[i];
    if (a.source_id != b.source_id || a.pred != b.pred || a.gt != b.gt || a.smape != b.smape ||
        !seg_equal(a.seg, b.seg))
      return false;
  }
  return true;
}

std::string EvalReport::table_row(const std::string& label) const {
  return pad(label, 28) + pad(fmt2(mae[0]) + ", " + fmt2(mae[1]) + ", " + fmt2(mae[2]), 26) + fmt2(smape);
}

std::string EvalReport::table() const {
  std::ostringstream os;
  os << pad("Model", 28) << pad("MAE (PT, MT, TL)", 26) << "SMAPE (%)\n";
  os << table_row("this run") << "\n";
  if (seg) {
    os << "\n"
       << pad("JA", 10) << pad("Dice", 10) << pad("pixel-AC", 10) << pad("pixel-SE", 10) << "pixel-SP\n"
       << pad(fmt2(100 * seg->ja), 10) << pad(fmt2(100 * seg->dice), 10) << pad(fmt2(100 * seg->ac), 10)
       << pad(fmt2(100 * seg->se), 10) << fmt2(100 * seg->sp) << "\n";
  }
  os << "\nsamples: " << sample_count << "\n";
  return os.str();
}

std::string EvalReport::per_sample_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "source_id,pred_pt,pred_mt,pred_tl,gt_pt,gt_mt,gt_tl,smape_percent,ja,dice,ac,se,sp\n";
  for (const auto& s : samples) {
    os << s.source_id;
    for (double v : s.pred) os << ',' << v;
    for (double v : s.gt) os << ',' << v;
    os << ',' << s.smape;
    if (s.seg) os << ',' << s.seg->ja << ',' << s.seg->dice << ',' << s.seg->ac << ',' << s.seg->se << ',' << s.seg->sp;
    else os << ",,,,,";
    os << '\n';
  }
  return os.str();
}

}  // namespace spinecobb::metrics
