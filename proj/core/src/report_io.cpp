#include <cstdio>
#include <fstream>

#include "cel/bench.hpp"
#include "cel/errors.hpp"

namespace cel::bench {

using nlohmann::json;

namespace {

std::string num(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

json cell_json(const CellResult& c) {
  json j = {{"model", c.model},     {"beta", c.beta},   {"n_patients", c.n_patients},
            {"status", c.status},   {"truth", c.truth}, {"abs_error", c.abs_error}};
  if (c.fraction) j["fraction"] = *c.fraction;
  if (!c.error.empty()) j["error"] = c.error;
  if (c.estimate) j["estimate"] = estimators::to_json(*c.estimate);
  if (c.out_of_fold_ok) j["out_of_fold_ok"] = *c.out_of_fold_ok;
  if (c.inputs_clean) j["inputs_clean"] = *c.inputs_clean;
  return j;
}

CellResult cell_from_json(const json& j) {
  CellResult c;
  c.model = j.at("model").get<std::string>();
  c.beta = j.at("beta").get<double>();
  c.n_patients = j.at("n_patients").get<std::size_t>();
  c.status = j.at("status").get<std::string>();
  c.truth = j.at("truth").get<double>();
  c.abs_error = j.at("abs_error").get<double>();
  if (j.contains("fraction")) c.fraction = j.at("fraction").get<double>();
  c.error = j.value("error", std::string());
  if (j.contains("estimate")) c.estimate = estimators::estimate_report_from_json(j.at("estimate"));
  if (j.contains("out_of_fold_ok")) c.out_of_fold_ok = j.at("out_of_fold_ok").get<bool>();
  if (j.contains("inputs_clean")) c.inputs_clean = j.at("inputs_clean").get<bool>();
  return c;
}

}  // namespace

json to_json(const ExperimentConfig& cfg) {
  return {{"synth", synth::to_json(cfg.synth)},
          {"beta_grid", cfg.beta_grid},
          {"models", cfg.models},
          {"k_folds", cfg.k_folds},
          {"subsample_fractions", cfg.subsample_fractions},
          {"withhold_confounder", cfg.withhold_confounder},
          {"seed", cfg.seed},
          {"model", tbehrt::to_json(cfg.model)},
          {"penalty_lambda", cfg.penalty_lambda},
          {"cell_timeout_seconds", cfg.cell_timeout_seconds}};
}

ExperimentConfig experiment_config_from_json(const json& j) {
  if (!j.is_object()) throw ValidationError("experiment config must be a JSON object");
  ExperimentConfig cfg;
  try {
    if (j.contains("synth")) cfg.synth = synth::synth_config_from_json(j.at("synth"));
    cfg.beta_grid = j.value("beta_grid", cfg.beta_grid);
    cfg.models = j.value("models", cfg.models);
    cfg.k_folds = j.value("k_folds", cfg.k_folds);
    cfg.subsample_fractions = j.value("subsample_fractions", cfg.subsample_fractions);
    cfg.withhold_confounder = j.value("withhold_confounder", cfg.withhold_confounder);
    // Without an explicit seed the cohort seed doubles as the master seed.
    cfg.seed = j.value("seed", cfg.synth.seed);
    if (j.contains("model")) {
      const auto& m = j.at("model");
      cfg.model = tbehrt::model_config_from_json(
          m, tbehrt::ModelConfig::from_preset(m.value("preset", std::string("desk"))));
    }
    cfg.penalty_lambda = j.value("penalty_lambda", cfg.penalty_lambda);
    cfg.cell_timeout_seconds = j.value("cell_timeout_seconds", cfg.cell_timeout_seconds);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("experiment config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

json to_json(const BenchReport& r) {
  json cells = json::array();
  for (const auto& c : r.cells) cells.push_back(cell_json(c));
  json truths = json::array();
  for (const auto& t : r.truths) truths.push_back(synth::to_json(t));
  json summaries = json::array();
  for (const auto& s : r.summaries) {
    json js = {{"model", s.model},
               {"cells", s.cells},
               {"cells_ok", s.cells_ok},
               {"max_abs_error", s.max_abs_error},
               {"complete", s.complete()}};
    // SAE only over a complete grid; partial sums stay out of the table.
    if (s.complete()) {
      js["sae"] = s.sae;
      js["sae_se"] = s.sae_se;
    }
    summaries.push_back(js);
  }
  json deltas = json::array();
  for (const auto& d : r.inclusion_deltas) {
    deltas.push_back({{"from", d.from}, {"to", d.to}, {"delta_mean_abs_error", d.delta_mean_abs_error}});
  }
  return {{"suite", r.suite},   {"config_hash", r.config_hash}, {"config", r.config},
          {"betas", r.betas},   {"fractions", r.fractions},     {"truths", truths},
          {"cells", cells},     {"summaries", summaries},       {"inclusion_deltas", deltas},
          {"all_ok", r.all_ok()}};
}

BenchReport bench_report_from_json(const json& j) {
  BenchReport r;
  try {
    r.suite = j.at("suite").get<std::string>();
    r.config_hash = j.at("config_hash").get<std::string>();
    r.config = j.at("config");
    r.betas = j.at("betas").get<std::vector<double>>();
    r.fractions = j.at("fractions").get<std::vector<double>>();
    for (const auto& t : j.at("truths")) r.truths.push_back(synth::ground_truth_from_json(t));
    for (const auto& c : j.at("cells")) r.cells.push_back(cell_from_json(c));
    for (const auto& d : j.at("inclusion_deltas")) {
      r.inclusion_deltas.push_back({d.at("from").get<std::string>(), d.at("to").get<std::string>(),
                                    d.at("delta_mean_abs_error").get<double>()});
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("bench report: ") + e.what());
  }
  // Summaries are derived data; rebuild them rather than trust the file.
  auto deltas = r.inclusion_deltas;
  summarize(r);
  r.inclusion_deltas = std::move(deltas);
  return r;
}

std::string cells_csv(const BenchReport& r) {
  std::string out = "suite,model,beta,fraction,n_patients,estimate,ci_low,ci_high,truth,abs_error,se,status\n";
  for (const auto& c : r.cells) {
    out += r.suite + "," + c.model + "," + num(c.beta) + "," + (c.fraction ? num(*c.fraction) : "") + "," +
           std::to_string(c.n_patients) + ",";
    if (c.estimate) {
      out += num(c.estimate->rr) + "," + num(c.estimate->ci_low) + "," + num(c.estimate->ci_high) + ",";
    } else {
      out += ",,,";
    }
    out += num(c.truth) + ",";
    out += c.ok() ? num(c.abs_error) : "";
    out += ",";
    out += c.estimate ? num(c.estimate->se) : "";
    out += "," + c.status + "\n";
  }
  return out;
}

std::string plot_csv(const BenchReport& r) {
  // Long format: one point per (model, x); x is beta or the subsample fraction.
  std::string out = "suite,model,x_kind,x,estimate,ci_low,ci_high,truth,abs_error\n";
  for (const auto& c : r.cells) {
    if (!c.ok() || !c.estimate) continue;
    const bool by_fraction = c.fraction.has_value();
    out += r.suite + "," + c.model + "," + (by_fraction ? "fraction" : "beta") + "," +
           num(by_fraction ? *c.fraction : c.beta) + "," + num(c.estimate->rr) + "," + num(c.estimate->ci_low) +
           "," + num(c.estimate->ci_high) + "," + num(c.truth) + "," + num(c.abs_error) + "\n";
  }
  return out;
}

void emit_report(const BenchReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_file(dir / "report.json", to_json(report).dump(2) + "\n");
  write_file(dir / "cells.csv", cells_csv(report));
  write_file(dir / "plot.csv", plot_csv(report));
}

void write_timing(const Timing& timing, const BenchReport& report, const std::filesystem::path& path) {
  json cells = json::array();
  for (std::size_t i = 0; i < report.cells.size() && i < timing.cell_seconds.size(); ++i) {
    json c = {{"model", report.cells[i].model}, {"beta", report.cells[i].beta}, {"seconds", timing.cell_seconds[i]}};
    if (report.cells[i].fraction) c["fraction"] = *report.cells[i].fraction;
    cells.push_back(c);
  }
  json j = {{"config_hash", report.config_hash}, {"total_seconds", timing.total_seconds}, {"cells", cells}};
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_file(path, j.dump(2) + "\n");
}

}  // namespace cel::bench
