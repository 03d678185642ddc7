#include "spinecobb/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <iterator>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "spinecobb/data.hpp"
#include "spinecobb/figures.hpp"
#include "spinecobb/trainer.hpp"

namespace spinecobb::cli {

using nlohmann::json;

namespace {

template <class F>
int guarded(std::ostream& err, F&& body) {
  try {
    return body();
  } catch (const DivergenceError& e) {
    err << "error: diverged: " << e.what() << "\n";
    return kDiverged;
  } catch (const StateError& e) {
    err << "error: " << e.what() << "\n";
    return kStateError;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kInputError;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kInputError;
  } catch (const json::exception& e) {
    err << "error: malformed JSON: " << e.what() << "\n";
    return kInputError;
  }
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string fixed(double v, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

void refuse_same_dir(const fs::path& in, const fs::path& out) {
  if (fs::exists(out) && fs::equivalent(in, out))
    throw InvalidArgumentError("--out must differ from the input directory");
}

struct LoadedEvalData {
  LoadedModel model;
  std::vector<data::Sample> samples;
  std::string split;
};

LoadedEvalData load_for_eval(const fs::path& ckpt, const fs::path& data_dir) {
  LoadedEvalData d{load_model(ckpt), {}, {}};
  const auto& cfg = d.model.config;
  data::Dataset ds =
      data::load_dataset(data::load_manifest(data_dir), cfg.data.rows, cfg.data.cols, cfg.angle_divisor);
  if (!ds.test.empty()) {
    d.samples = std::move(ds.test);
    d.split = "test";
  } else {
    d.samples = std::move(ds.train);
    d.split = "train";
  }
  if (d.samples.empty()) throw InvalidArgumentError("no samples under " + data_dir.string());
  return d;
}

}  // namespace

std::string reference_footnote() {
  return "Reference: full-scale training on the complete AASCE set reaches 8.47 (ablation setting) and "
         "7.32 (final model) SMAPE %.\nThose figures need GPU-scale training and are not expected at desk scale.\n";
}

// ---------------------------------------------------------------------------
// prepare
// ---------------------------------------------------------------------------

int cmd_prepare(const PrepareOptions& o, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    refuse_same_dir(o.data, o.out);
    const data::DatasetManifest m = data::load_manifest(o.data);
    std::map<data::Split, std::vector<data::AngleRow>> rows;
    std::size_t warnings = 0, masks = 0;
    for (const auto& rec : m.records) {
      const fs::path split_dir = o.out / data::split_name(rec.split);
      const XrayImage img = data::read_image(rec.image_path, rec.source_id);
      data::write_file_atomic(split_dir / "images" / rec.image_path.filename(), read_bytes(rec.image_path));
      if (rec.landmark_path) {
        const LandmarkSet lm = data::read_landmarks(*rec.landmark_path, img.rows(), img.cols());
        data::RasterResult raster = data::masks_from_landmarks(lm);
        for (const auto& w : raster.warnings) {
          err << "warning: " << data::split_name(rec.split) << "/" << rec.source_id << ": " << w << "\n";
          ++warnings;
        }
        data::write_gray_png(split_dir / "masks" / (rec.source_id + ".png"), raster.mask.values());
        data::write_file_atomic(split_dir / "landmarks" / rec.landmark_path->filename(),
                                read_bytes(*rec.landmark_path));
      } else if (rec.mask_path) {
        validate_pair(img, data::read_mask_png(*rec.mask_path));
        data::write_file_atomic(split_dir / "masks" / (rec.source_id + ".png"), read_bytes(*rec.mask_path));
      } else {
        throw InvalidArgumentError("sample " + rec.source_id + " has neither landmarks nor a mask");
      }
      ++masks;
      rows[rec.split].push_back({rec.source_id, rec.angles});
    }
    for (const auto& [split, r] : rows)
      data::write_angle_csv(o.out / data::split_name(split) / "angles.csv", r);
    out << "prepared " << m.records.size() << " images (train " << m.count(data::Split::Train) << ", test "
        << m.count(data::Split::Test) << "), " << masks << " masks, " << warnings << " warnings\n";
    return kOk;
  });
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

int cmd_synth(const SynthOptions& o, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (o.n < 1) throw InvalidArgumentError("--n must be >= 1");
    data::SyntheticSpec spec = parse_synthetic_spec(read_json_file(o.spec), "spec");
    if (o.seed) spec.seed = *o.seed;
    std::map<data::Split, std::vector<data::AngleRow>> rows;
    double worst = 0.0;
    for (int i = 0; i < o.n; ++i) {
      const std::string id = data::synthetic_id(i);
      Rng rng(sample_seed(spec.seed, id));
      const data::SyntheticSample s = data::generate_synthetic(spec, rng, id);
      const AngleDegrees measured = data::cobb_from_landmarks(s.landmarks);
      for (int k = 0; k < 3; ++k) worst = std::max(worst, std::abs(measured[k] - s.analytic_degrees[k]));
      const data::Split split = data::synthetic_split(i, o.n, spec.test_fraction);
      data::write_sample_files(o.out / data::split_name(split), s.image, s.mask, s.landmarks);
      rows[split].push_back({id, s.analytic_degrees});
    }
    for (const auto& [split, r] : rows)
      data::write_angle_csv(o.out / data::split_name(split) / "angles.csv", r);
    const bool pass = worst <= 1.0;
    out << "wrote " << o.n << " synthetic samples to " << o.out.string() << "\n"
        << "self-check: " << (pass ? "pass" : "FAIL") << " (max |landmark Cobb - analytic| = " << fixed(worst, 4)
        << " deg, limit 1)\n";
    return pass ? kOk : kInputError;
  });
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

namespace {

void print_stage(std::ostream& out, const StageReport& r) {
  out << "stage " << r.stage << " [" << r.recipe << ", trains " << r.trains << "]";
  if (r.skipped) {
    out << " skipped (variant has TCL off)\n";
    return;
  }
  if (!r.loss_curve.empty())
    out << " loss " << fixed(r.loss_curve.front(), 4) << " -> " << fixed(r.loss_curve.back(), 4);
  if (r.eval) {
    out << ", test SMAPE " << fixed(r.eval->smape) << "%";
    if (r.eval->seg) out << ", Dice " << fixed(r.eval->seg->dice, 4);
  }
  out << ", alpha " << fixed(r.alpha, 4) << ", " << fixed(r.seconds, 1) << " s\n";
}

int latest_stage(const fs::path& run_dir, int at_most) {
  int best = 0;
  for (int k = 1; k <= at_most; ++k)
    if (fs::exists(stage_dir(run_dir, k) / "segnet.bin") && fs::exists(stage_dir(run_dir, k) / "regnet.bin"))
      best = k;
  return best;
}

}  // namespace

int cmd_train(const TrainOptions& o, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    int only = 0;
    if (o.stage != "all") {
      if (o.stage.size() != 1 || o.stage[0] < '1' || o.stage[0] > '5')
        throw InvalidArgumentError("--stage must be 1..5 or all");
      only = o.stage[0] - '0';
    }
    if (!o.out && !o.resume) throw InvalidArgumentError("--out or --resume is required");
    const fs::path run_dir = o.out ? *o.out : *o.resume;

    RunConfig cfg = load_run_config(o.config);
    Trainer t(cfg, load_configured_data(cfg));
    t.on_epoch = [&](int stage, int epoch, double loss) {
      err << "stage " << stage << " epoch " << epoch << "/" << cfg.schedule.stages[stage - 1].epochs << " loss "
          << fixed(loss, 6) << "\n";
    };

    if (o.resume) {
      const int s = latest_stage(*o.resume, only ? only - 1 : kStageCount);
      if (s > 0) t.resume(*o.resume, s);
    } else if (only > 1) {
      if (latest_stage(run_dir, only - 1) != only - 1)
        throw StateError("stage " + std::to_string(only) + " needs a stage-" + std::to_string(only - 1) +
                         " checkpoint in " + run_dir.string());
      t.resume(run_dir, only - 1);
    }
    if (only && t.completed_stage() != only - 1)
      throw StateError("stage " + std::to_string(only) + " needs stage " + std::to_string(only - 1) +
                       " complete; checkpoint has stage " + std::to_string(t.completed_stage()));

    out << "config " << cfg.hash_hex() << ", run directory " << run_dir.string() << "\n";
    if (t.completed_stage() > 0) out << "resumed after stage " << t.completed_stage() << "\n";
    const int last = only ? only : kStageCount;
    if (t.completed_stage() >= last) {
      out << "nothing to do: stage " << last << " already complete\n";
      return kOk;
    }
    for (const auto& r : t.run_schedule(run_dir, last)) print_stage(out, r);
    return kOk;
  });
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

int cmd_eval(const EvalOptions& o, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    LoadedEvalData d = load_for_eval(o.ckpt, o.data);
    const RunConfig& cfg = d.model.config;
    const SegNet seg(cfg.segnet);
    const RegNet reg(cfg.regnet);
    const Pipeline p(seg, reg, d.model.theta1, d.model.theta2, d.model.gate_active, cfg.variant.input);
    const metrics::EvalReport report = evaluate_samples(p, d.samples, cfg.angle_divisor);

    fs::path stem = o.out;
    if (stem.extension() == ".json") stem.replace_extension();
    const std::string label = "stage " + std::to_string(d.model.stage) + " (" + d.split + ")";
    data::write_file_atomic(o.out, report.to_json().dump(2) + "\n");
    data::write_file_atomic(fs::path(stem.string() + ".txt"), report.table() + "\n" + reference_footnote());
    data::write_file_atomic(fs::path(stem.string() + ".csv"), report.per_sample_csv());

    out << report.table_row(label) << "\n";
    if (report.seg)
      out << "segmentation: JA " << fixed(100 * report.seg->ja) << ", Dice " << fixed(100 * report.seg->dice)
          << ", AC " << fixed(100 * report.seg->ac) << ", SE " << fixed(100 * report.seg->se) << ", SP "
          << fixed(100 * report.seg->sp) << "\n";
    out << reference_footnote();
    return kOk;
  });
}

// ---------------------------------------------------------------------------
// cam
// ---------------------------------------------------------------------------

int cmd_cam(const CamOptions& o, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    LoadedEvalData d = load_for_eval(o.ckpt, o.data);
    const RunConfig& cfg = d.model.config;
    for (const auto& s : d.samples)
      if (!s.mask) throw InvalidArgumentError("sample " + s.source_id() + " has no ground-truth mask");
    const SegNet seg(cfg.segnet);
    const RegNet reg(cfg.regnet);
    const Pipeline p(seg, reg, d.model.theta1, d.model.theta2, d.model.gate_active, cfg.variant.input);

    std::size_t written = 0;
    for (const auto& s : d.samples) {
      const Tensor& x = s.image.pixels();
      const Pipeline::Output o2 = p.run(x);
      figures::write_png(o.out / (s.source_id() + "_cam.png"), figures::cam_overlay(x, o2.cam));
      figures::write_png(o.out / (s.source_id() + "_seg.png"),
                         figures::error_overlay(x, o2.mask.values(), s.mask->values()));
      written += 2;
      if (o.with_ar_baseline) {
        // Branch A (image and mask) next to branch B (mask only): the pair the
        // AR term pulls together.
        const SiamesePair pair = make_siamese_pair(x, o2.mask.values(), cfg.variant.input);
        const Cam cam_b = extract_cam(reg.forward(d.model.theta2, pair.branch_b).maps, cfg.regnet.cam_mode);
        const std::vector<figures::RgbImage> panels{figures::grayscale(x), figures::cam_overlay(x, o2.cam),
                                                    figures::cam_overlay(x, cam_b)};
        figures::write_png(o.out / (s.source_id() + "_ar.png"), figures::hstack(panels));
        ++written;
      }
    }
    out << "wrote " << written << " figures for " << d.samples.size() << " " << d.split << " samples to "
        << o.out.string() << "\n";
    return kOk;
  });
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

std::vector<AblationCell> parse_grid(const json& j) {
  if (!j.is_object() || !j.contains("cells") || !j.at("cells").is_array())
    throw InvalidArgumentError("grid: expected {\"cells\": [...]}");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (it.key() != "cells") throw InvalidArgumentError("grid: unknown key '" + it.key() + "'");
  static const std::set<std::string> allowed{"label", "ar", "roie", "tcl", "input"};
  std::vector<AblationCell> cells;
  std::set<std::string> labels;
  for (const auto& c : j.at("cells")) {
    if (!c.is_object()) throw InvalidArgumentError("grid: each cell must be an object");
    for (auto it = c.begin(); it != c.end(); ++it)
      if (!allowed.count(it.key())) throw InvalidArgumentError("grid: unknown cell key '" + it.key() + "'");
    AblationCell cell;
    cell.label = c.at("label").get<std::string>();
    if (cell.label.empty() || !labels.insert(cell.label).second)
      throw InvalidArgumentError("grid: labels must be unique and non-empty");
    cell.variant.ar = c.value("ar", true);
    cell.variant.roie = c.value("roie", true);
    cell.variant.tcl = c.value("tcl", true);
    cell.variant.input = parse_input_mode(c.value("input", std::string("img+seg")));
    cells.push_back(std::move(cell));
  }
  if (cells.empty()) throw InvalidArgumentError("grid: no cells");
  return cells;
}

MeanSd mean_sd(const std::vector<double>& xs) {
  if (xs.empty()) return {};
  double m = 0.0;
  for (double x : xs) m += x;
  m /= static_cast<double>(xs.size());
  double v = 0.0;
  for (double x : xs) v += (x - m) * (x - m);
  return {m, xs.size() > 1 ? std::sqrt(v / static_cast<double>(xs.size() - 1)) : 0.0};
}

AblationRow summarize_cell(const std::string& label, const std::vector<metrics::EvalReport>& reports) {
  AblationRow row;
  row.label = label;
  row.runs = reports.size();
  std::array<std::vector<double>, 3> mae;
  std::vector<double> smape, dice, ja;
  for (const auto& r : reports) {
    for (int k = 0; k < 3; ++k) mae[k].push_back(r.mae[k]);
    smape.push_back(r.smape);
    if (r.seg) {
      dice.push_back(r.seg->dice);
      ja.push_back(r.seg->ja);
    }
  }
  for (int k = 0; k < 3; ++k) row.mae[k] = mean_sd(mae[k]);
  row.smape = mean_sd(smape);
  if (!dice.empty() && dice.size() == reports.size()) {
    row.dice = mean_sd(dice);
    row.ja = mean_sd(ja);
  }
  return row;
}

std::string ablation_table(const std::vector<AblationRow>& rows) {
  auto pm = [](const MeanSd& m, int digits) { return fixed(m.mean, digits) + "±" + fixed(m.sd, digits); };
  auto pad = [](std::string s, std::size_t w) {
    // "±" is two bytes but one column.
    std::size_t cols = 0;
    for (unsigned char ch : s) cols += (ch & 0xC0) != 0x80;
    if (cols < w) s.append(w - cols, ' ');
    return s;
  };
  std::ostringstream os;
  os << pad("Model", 24) << pad("runs", 6) << pad("MAE (PT, MT, TL)", 40) << pad("SMAPE (%)", 16) << "Dice (%)\n";
  for (const auto& r : rows) {
    os << pad(r.label, 24) << pad(std::to_string(r.runs), 6)
       << pad(pm(r.mae[0], 2) + ", " + pm(r.mae[1], 2) + ", " + pm(r.mae[2], 2), 40) << pad(pm(r.smape, 2), 16);
    if (r.dice) os << pm(MeanSd{100 * r.dice->mean, 100 * r.dice->sd}, 2);
    else os << "-";
    os << "\n";
  }
  return os.str();
}

json ablation_json(const std::vector<AblationRow>& rows) {
  json arr = json::array();
  auto ms = [](const MeanSd& m) { return json{{"mean", m.mean}, {"sd", m.sd}}; };
  for (const auto& r : rows) {
    json j{{"label", r.label},
           {"runs", r.runs},
           {"mae_deg", {{"pt", ms(r.mae[0])}, {"mt", ms(r.mae[1])}, {"tl", ms(r.mae[2])}}},
           {"smape_percent", ms(r.smape)}};
    if (r.dice) j["dice"] = ms(*r.dice);
    if (r.ja) j["ja"] = ms(*r.ja);
    arr.push_back(std::move(j));
  }
  return {{"rows", std::move(arr)}};
}

int cmd_ablate(const AblateOptions& o, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (o.seeds.empty()) throw InvalidArgumentError("--seeds needs at least one seed");
    const RunConfig base = load_run_config(o.config);
    const std::vector<AblationCell> cells = parse_grid(read_json_file(o.grid));
    const data::Dataset ds = load_configured_data(base);
    const std::size_t n = ds.train.size() + ds.test.size();
    if (n > kAblationGuard && !o.force)
      throw InvalidArgumentError("dataset has " + std::to_string(n) + " images; the ablation grid is limited to " +
                                 std::to_string(kAblationGuard) + " without --force");

    std::vector<std::vector<metrics::EvalReport>> results(cells.size());
    for (std::uint64_t seed : o.seeds) {
      // Stage 1 does not depend on the variant, so every cell shares it.
      RunConfig c1 = base;
      c1.schedule.seed = seed;
      c1.data.augmentation.seed = seed;
      Trainer shared(c1, ds);
      err << "seed " << seed << ": stage 1\n";
      shared.stage1_train_seg();
      for (std::size_t i = 0; i < cells.size(); ++i) {
        RunConfig c = c1;
        c.variant = cells[i].variant;
        Trainer t(c, ds);
        t.set_state(shared.theta1(), shared.theta2(), false, 1);
        err << "seed " << seed << ": " << cells[i].label << "\n";
        t.run_schedule();
        const metrics::EvalReport r = t.evaluate(ds.test.empty() ? data::Split::Train : data::Split::Test);
        data::write_file_atomic(o.out / "runs" / cells[i].label / ("seed" + std::to_string(seed) + ".json"),
                                r.to_json().dump(2) + "\n");
        results[i].push_back(r);
      }
    }
    std::vector<AblationRow> rows;
    for (std::size_t i = 0; i < cells.size(); ++i) rows.push_back(summarize_cell(cells[i].label, results[i]));
    const std::string table = ablation_table(rows);
    json summary = ablation_json(rows);
    summary["seeds"] = o.seeds;
    summary["config_hash"] = base.hash_hex();
    data::write_file_atomic(o.out / "summary.json", summary.dump(2) + "\n");
    data::write_file_atomic(o.out / "summary.txt", table);
    out << table;
    return kOk;
  });
}

// ---------------------------------------------------------------------------
// dispatch
// ---------------------------------------------------------------------------

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Joint spine segmentation and Cobb-angle regression"};
  app.require_subcommand(1);

  PrepareOptions prep;
  auto* c_prep = app.add_subcommand("prepare", "Rasterize landmark masks and validate a dataset");
  c_prep->add_option("--data", prep.data, "Dataset root")->required();
  c_prep->add_option("--out", prep.out, "Output root")->required();

  SynthOptions syn;
  std::uint64_t syn_seed = 0;
  auto* c_syn = app.add_subcommand("synth", "Generate a synthetic dataset");
  c_syn->add_option("--spec", syn.spec, "Synthetic spec (JSON)")->required();
  c_syn->add_option("--n", syn.n, "Number of samples")->required();
  c_syn->add_option("--out", syn.out, "Output root")->required();
  auto* o_seed = c_syn->add_option("--seed", syn_seed, "Overrides the spec seed");

  TrainOptions tr;
  std::string tr_resume, tr_out;
  auto* c_tr = app.add_subcommand("train", "Run training stages");
  c_tr->add_option("--config", tr.config, "Run config (JSON)")->required();
  c_tr->add_option("--stage", tr.stage, "1..5 or all")->capture_default_str();
  auto* o_resume = c_tr->add_option("--resume", tr_resume, "Run directory to resume from");
  auto* o_out = c_tr->add_option("--out", tr_out, "Run directory for checkpoints");

  EvalOptions ev;
  auto* c_ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  c_ev->add_option("--ckpt", ev.ckpt, "Stage or run directory")->required();
  c_ev->add_option("--data", ev.data, "Dataset root")->required();
  c_ev->add_option("--out", ev.out, "Report file (JSON); .txt and .csv written alongside")->required();

  CamOptions cam;
  auto* c_cam = app.add_subcommand("cam", "Write CAM and segmentation-error figures");
  c_cam->add_option("--ckpt", cam.ckpt, "Stage or run directory")->required();
  c_cam->add_option("--data", cam.data, "Dataset root")->required();
  c_cam->add_option("--out", cam.out, "Figure directory")->required();
  c_cam->add_flag("--with-ar-baseline", cam.with_ar_baseline, "Also write branch-A vs branch-B CAM panels");

  AblateOptions ab;
  std::string ab_seeds;
  auto* c_ab = app.add_subcommand("ablate", "Run the AR / ROIE / TCL / input ablation grid");
  c_ab->add_option("--config", ab.config, "Base run config (JSON)")->required();
  c_ab->add_option("--grid", ab.grid, "Grid file (JSON)")->required();
  c_ab->add_option("--seeds", ab_seeds, "Comma-separated seeds")->required();
  c_ab->add_option("--out", ab.out, "Output directory")->required();
  c_ab->add_flag("--force", ab.force, "Allow datasets above the size guard");

  std::vector<std::string> storage{"spinecobb"};
  storage.insert(storage.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& s : storage) argv.push_back(s.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kInputError;
  }

  if (c_prep->parsed()) return cmd_prepare(prep, out, err);
  if (c_syn->parsed()) {
    if (o_seed->count() > 0) syn.seed = syn_seed;
    return cmd_synth(syn, out, err);
  }
  if (c_tr->parsed()) {
    if (o_resume->count() > 0) tr.resume = tr_resume;
    if (o_out->count() > 0) tr.out = tr_out;
    return cmd_train(tr, out, err);
  }
  if (c_ev->parsed()) return cmd_eval(ev, out, err);
  if (c_cam->parsed()) return cmd_cam(cam, out, err);
  if (c_ab->parsed()) {
    std::stringstream ss(ab_seeds);
    std::string tok;
    try {
      while (std::getline(ss, tok, ',')) ab.seeds.push_back(std::stoull(tok));
    } catch (const std::exception&) {
      err << "error: --seeds must be a comma-separated list of integers\n";
      return kInputError;
    }
    return cmd_ablate(ab, out, err);
  }
  return kInputError;
}

}  // namespace spinecobb::cli
