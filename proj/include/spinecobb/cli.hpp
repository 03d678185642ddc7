#pragma once

// Command implementations behind the `spinecobb` executable. Each returns a
// process exit code: 0 ok, 2 input error, 3 divergence, 4 state/dependency.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "spinecobb/config.hpp"
#include "spinecobb/metrics.hpp"

namespace spinecobb::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kInputError = 2, kDiverged = 3, kStateError = 4 };

/// Largest dataset the ablation grid accepts without --force.
inline constexpr std::size_t kAblationGuard = 1000;

struct PrepareOptions {
  fs::path data;
  fs::path out;
};

struct SynthOptions {
  fs::path spec;
  int n = 0;
  fs::path out;
  std::optional<std::uint64_t> seed;
};

struct TrainOptions {
  fs::path config;
  std::string stage = "all";  // 1..5 or all
  std::optional<fs::path> resume;
  std::optional<fs::path> out;
};

struct EvalOptions {
  fs::path ckpt;
  fs::path data;
  fs::path out;
};

struct CamOptions {
  fs::path ckpt;
  fs::path data;
  fs::path out;
  bool with_ar_baseline = false;
};

struct AblateOptions {
  fs::path config;
  fs::path grid;
  std::vector<std::uint64_t> seeds;
  fs::path out;
  bool force = false;
};

int cmd_prepare(const PrepareOptions& o, std::ostream& out, std::ostream& err);
int cmd_synth(const SynthOptions& o, std::ostream& out, std::ostream& err);
int cmd_train(const TrainOptions& o, std::ostream& out, std::ostream& err);
int cmd_eval(const EvalOptions& o, std::ostream& out, std::ostream& err);
int cmd_cam(const CamOptions& o, std::ostream& out, std::ostream& err);
int cmd_ablate(const AblateOptions& o, std::ostream& out, std::ostream& err);

/// Parses argv (without the program name) and dispatches.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Ablation grid -------------------------------------------------------------

struct AblationCell {
  std::string label;
  Variant variant;
};

/// {"cells": [{"label": ..., "ar": bool, "roie": bool, "tcl": bool, "input": "img+seg"}]}
std::vector<AblationCell> parse_grid(const nlohmann::json& j);

struct MeanSd {
  double mean = 0.0;
  double sd = 0.0;  // sample standard deviation; 0 for a single run
};

MeanSd mean_sd(const std::vector<double>& xs);

struct AblationRow {
  std::string label;
  std::size_t runs = 0;
  std::array<MeanSd, 3> mae{};
  MeanSd smape;
  std::optional<MeanSd> dice;
  std::optional<MeanSd> ja;
};

AblationRow summarize_cell(const std::string& label, const std::vector<metrics::EvalReport>& reports);
std::string ablation_table(const std::vector<AblationRow>& rows);
nlohmann::json ablation_json(const std::vector<AblationRow>& rows);

/// Printed under evaluation tables.
std::string reference_footnote();

}  // namespace spinecobb::cli
