#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cel/estimators.hpp"
#include "cel/synth.hpp"
#include "cel/tbehrt/config.hpp"

namespace cel::bench {

/// Model identifiers accepted in ExperimentConfig::models.
inline const std::vector<std::string>& known_models() {
  static const std::vector<std::string> names = {"empirical", "lr",        "lr-l1",     "lr-l2",           "lr-tmle",
                                                 "tarnet",    "tarnet-mem", "dragonnet-cvtmle", "t-behrt-cvtmle"};
  return names;
}

bool is_deep_model(const std::string& model);

struct ExperimentConfig {
  synth::SynthConfig synth;
  std::vector<double> beta_grid;
  std::vector<std::string> models;
  int k_folds = 5;
  /// Subsample suite only; the base cohort uses beta_grid.front().
  std::vector<double> subsample_fractions;
  bool withhold_confounder = true;
  std::uint64_t seed = 0;
  tbehrt::ModelConfig model;
  double penalty_lambda = 1.0;
  /// Wall-clock cap per cell; 0 disables it.
  double cell_timeout_seconds = 0.0;

  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& cfg);
/// Reads a config; `synth` and `model` objects override their defaults.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
std::string config_hash(const ExperimentConfig& cfg);

struct CellResult {
  std::string model;
  double beta = 0.0;
  /// Set in the subsample suite.
  std::optional<double> fraction;
  std::size_t n_patients = 0;
  /// "ok", "failed" or "timeout".
  std::string status = "ok";
  std::string error;
  std::optional<estimators::EstimateReport> estimate;
  double truth = 0.0;
  /// |estimate - truth|, only meaningful when status is ok.
  double abs_error = 0.0;
  /// Audits of the deep-model fit; absent for other models.
  std::optional<bool> out_of_fold_ok;
  std::optional<bool> inputs_clean;

  bool ok() const { return status == "ok"; }
};

struct ModelSummary {
  std::string model;
  double sae = 0.0;
  double sae_se = 0.0;
  double max_abs_error = 0.0;
  std::size_t cells = 0;
  std::size_t cells_ok = 0;
  /// SAE is reported only when every cell succeeded.
  bool complete() const { return cells == cells_ok; }
};

/// Change in mean per-cell absolute error between consecutive module presets.
struct InclusionDelta {
  std::string from;
  std::string to;
  double delta_mean_abs_error = 0.0;
};

struct BenchReport {
  /// "confounding" or "subsample".
  std::string suite;
  std::string config_hash;
  nlohmann::json config;
  /// Cell coordinates: betas for the confounding suite, fractions for the
  /// subsample suite (betas then hold the single base beta).
  std::vector<double> betas;
  std::vector<double> fractions;
  /// Ground truth per coordinate, aligned with betas or fractions.
  std::vector<synth::GroundTruth> truths;
  std::vector<CellResult> cells;
  std::vector<ModelSummary> summaries;
  std::vector<InclusionDelta> inclusion_deltas;

  bool all_ok() const;
  const ModelSummary* summary(const std::string& model) const;
};

nlohmann::json to_json(const BenchReport& r);
BenchReport bench_report_from_json(const nlohmann::json& j);

struct RunOptions {
  int jobs = 1;
  /// Progress lines on stderr.
  bool verbose = false;
};

/// Wall-clock seconds per cell, kept out of the report so that reports stay
/// byte-identical across runs.
struct Timing {
  std::vector<double> cell_seconds;
  double total_seconds = 0.0;
};

/// One cohort per beta (shared by every model), k-fold estimation per model.
BenchReport run_confounding_suite(const ExperimentConfig& cfg, const RunOptions& run = {}, Timing* timing = nullptr);

/// Nested subsamples of one base cohort at beta_grid.front().
BenchReport run_subsample_suite(const ExperimentConfig& cfg, const RunOptions& run = {}, Timing* timing = nullptr);

/// Patient indices of the nested subsample for `fraction`, ascending. The
/// prefix of one seeded permutation, so smaller fractions are subsets of
/// larger ones. Throws when fewer than 2k patients remain.
std::vector<std::size_t> subsample_indices(std::size_t n, double fraction, std::uint64_t seed, int k_folds);

/// Recomputes per-model summaries and inclusion deltas from the cells.
void summarize(BenchReport& report);

/// Writes report.json, cells.csv and plot.csv into `dir`.
void emit_report(const BenchReport& report, const std::filesystem::path& dir);
void write_timing(const Timing& timing, const BenchReport& report, const std::filesystem::path& path);

std::string cells_csv(const BenchReport& report);
std::string plot_csv(const BenchReport& report);

}  // namespace cel::bench
