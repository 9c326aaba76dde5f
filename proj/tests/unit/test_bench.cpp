#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "cel/bench.hpp"
#include "cel/errors.hpp"
#include "cel/synth.hpp"

using namespace cel;
using namespace cel::bench;

namespace {

ExperimentConfig base_config() {
  ExperimentConfig cfg;
  cfg.synth.n_patients = 600;
  cfg.beta_grid = {1, 5};
  cfg.models = {"empirical", "lr", "lr-tmle"};
  cfg.seed = 5;
  return cfg;
}

tbehrt::ModelConfig tiny_model() {
  auto m = tbehrt::ModelConfig::desk();
  m.hidden = 8;
  m.intermediate = 12;
  m.heads = 2;
  m.head_hidden = 6;
  m.vae_latent_dim = 4;
  m.epochs_pretrain = 1;
  m.epochs_joint = 1;
  m.min_steps = 0;
  return m;
}

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (!line.empty() && line.back() == ',') f.emplace_back();
    rows.push_back(f);
  }
  return rows;
}

}  // namespace

TEST_SUITE("bench") {
  TEST_CASE("config validation") {
    auto cfg = base_config();
    CHECK_NOTHROW(cfg.validate());
    cfg.models = {"lr", "bart"};
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
    cfg = base_config();
    cfg.models = {"lr", "lr"};
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
    cfg = base_config();
    cfg.k_folds = 1;
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
    cfg = base_config();
    cfg.beta_grid.clear();
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
    cfg = base_config();
    cfg.subsample_fractions = {0.5, 1.5};
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
    cfg.subsample_fractions = {0.0};
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
  }

  TEST_CASE("config JSON round-trips and hashes stably") {
    auto cfg = base_config();
    cfg.model = tiny_model();
    cfg.subsample_fractions = {0.25, 1.0};
    const auto back = experiment_config_from_json(to_json(cfg));
    CHECK(to_json(back) == to_json(cfg));
    CHECK(config_hash(back) == config_hash(cfg));
    auto other = cfg;
    other.seed += 1;
    CHECK(config_hash(other) != config_hash(cfg));
    // partial configs fill in defaults; the cohort seed stands in for a missing master seed
    const auto partial = experiment_config_from_json(nlohmann::json::parse(
        R"({"synth":{"n_patients":100,"seed":42},"beta_grid":[1],"models":["empirical"],"model":{"preset":"paper"}})"));
    CHECK(partial.seed == 42);
    CHECK(partial.model.hidden == 150);
    CHECK(partial.k_folds == 5);
  }

  TEST_CASE("degenerate suite: empirical only, one beta") {
    auto cfg = base_config();
    cfg.models = {"empirical"};
    cfg.beta_grid = {5};
    const auto r = run_confounding_suite(cfg);
    REQUIRE(r.cells.size() == 1);
    auto sc = cfg.synth;
    sc.beta = 5;
    sc.seed = cfg.seed;
    const auto c = synth::generate_cohort(sc);
    const double emp = synth::empirical_rr(c);
    const double truth = synth::ground_truth_rr(c, sc).rr;
    CHECK(r.cells[0].estimate->rr == emp);
    CHECK(r.cells[0].truth == truth);
    REQUIRE(r.summary("empirical"));
    CHECK(r.summary("empirical")->sae == std::abs(emp - truth));
    CHECK(r.cells[0].estimate->interval_kind == "katz-log");
    CHECK(r.cells[0].estimate->ci_low < emp);
  }

  TEST_CASE("beta zero leaves only sampling noise") {
    auto cfg = base_config();
    cfg.synth.n_patients = 4000;
    cfg.beta_grid = {0};
    cfg.models = {"empirical", "lr-tmle"};
    const auto r = run_confounding_suite(cfg);
    REQUIRE(r.all_ok());
    const auto& emp = r.cells[0];
    const auto& adj = r.cells[1];
    CHECK(emp.abs_error < 4 * emp.estimate->se);
    // covariates carry no confounding, so adjusting for them barely moves the estimate
    CHECK(std::abs(adj.estimate->rr - emp.estimate->rr) < 2 * emp.estimate->se);
  }

  TEST_CASE("CSV shape, JSON round trip and SAE recomputation") {
    auto cfg = base_config();
    const auto r = run_confounding_suite(cfg);
    const auto rows = parse_csv(cells_csv(r));
    REQUIRE(rows.size() == 1 + cfg.models.size() * cfg.beta_grid.size());
    CHECK(rows[0][0] == "suite");
    for (const auto& m : cfg.models) {
      double sum = 0.0;
      for (std::size_t i = 1; i < rows.size(); ++i) {
        if (rows[i][1] == m) sum += std::stod(rows[i][9]);
      }
      CHECK(std::abs(sum - r.summary(m)->sae) <= 1e-12);
    }
    const auto j = to_json(r);
    const auto back = bench_report_from_json(nlohmann::json::parse(j.dump()));
    CHECK(to_json(back).dump() == j.dump());
    CHECK(parse_csv(plot_csv(r)).size() == rows.size());
  }

  TEST_CASE("empty model list gives a header-only CSV") {
    auto cfg = base_config();
    cfg.models.clear();
    const auto r = run_confounding_suite(cfg);
    CHECK(r.cells.empty());
    CHECK(parse_csv(cells_csv(r)).size() == 1);
    CHECK(r.all_ok());
  }

  TEST_CASE("reports are byte-identical across runs and pool widths") {
    auto cfg = base_config();
    const auto a = to_json(run_confounding_suite(cfg)).dump();
    RunOptions wide;
    wide.jobs = 3;
    CHECK(to_json(run_confounding_suite(cfg, wide)).dump() == a);
    CHECK(to_json(run_confounding_suite(cfg)).dump() == a);
  }

  TEST_CASE("emit writes report, cells and plot files") {
    auto cfg = base_config();
    Timing timing;
    const auto r = run_confounding_suite(cfg, {}, &timing);
    CHECK(timing.cell_seconds.size() == r.cells.size());
    const auto dir = std::filesystem::temp_directory_path() / "cel_bench_emit";
    std::filesystem::remove_all(dir);
    emit_report(r, dir);
    write_timing(timing, r, dir / "timing.json");
    for (const char* f : {"report.json", "cells.csv", "plot.csv", "timing.json"}) CHECK(std::filesystem::exists(dir / f));
    std::ifstream in(dir / "report.json");
    CHECK(bench_report_from_json(nlohmann::json::parse(in)).cells.size() == r.cells.size());
    std::filesystem::remove_all(dir);
  }

  TEST_CASE("nested subsamples") {
    const auto small = subsample_indices(1000, 0.025, 7, 5);
    const auto mid = subsample_indices(1000, 0.05, 7, 5);
    const auto all = subsample_indices(1000, 1.0, 7, 5);
    CHECK(small.size() == 25);
    CHECK(mid.size() == 50);
    CHECK(all.size() == 1000);
    CHECK(std::includes(mid.begin(), mid.end(), small.begin(), small.end()));
    CHECK(std::is_sorted(small.begin(), small.end()));
    CHECK_THROWS_AS(subsample_indices(100, 0.05, 7, 5), ValidationError);
  }

  TEST_CASE("full-size subsample reproduces the confounding cell") {
    auto cfg = base_config();
    cfg.synth.n_patients = 150;
    cfg.beta_grid = {5};
    cfg.models = {"empirical", "lr-tmle", "t-behrt-cvtmle"};
    cfg.model = tiny_model();
    cfg.subsample_fractions = {0.5, 1.0};
    const auto conf = run_confounding_suite(cfg);
    const auto sub = run_subsample_suite(cfg);
    REQUIRE(sub.cells.size() == 6);
    for (const auto& m : cfg.models) {
      const CellResult *a = nullptr, *b = nullptr;
      for (const auto& c : conf.cells) {
        if (c.model == m) a = &c;
      }
      for (const auto& c : sub.cells) {
        if (c.model == m && c.fraction == 1.0) b = &c;
      }
      REQUIRE(a);
      REQUIRE(b);
      REQUIRE(a->ok());
      CHECK(nlohmann::json(estimators::to_json(*a->estimate)) == estimators::to_json(*b->estimate));
      CHECK(a->truth == b->truth);
    }
    for (const auto& c : sub.cells) {
      if (bench::is_deep_model(c.model)) {
        CHECK(c.out_of_fold_ok == true);
        CHECK(c.inputs_clean == true);
      }
    }
    CHECK(sub.fractions == cfg.subsample_fractions);
    cfg.subsample_fractions = {0.01};
    CHECK_THROWS_AS(run_subsample_suite(cfg), ValidationError);
  }

  TEST_CASE("cells over the wall-clock cap are marked, not fatal") {
    auto cfg = base_config();
    cfg.synth.n_patients = 100;
    cfg.beta_grid = {1};
    cfg.models = {"empirical", "tarnet"};
    cfg.model = tiny_model();
    cfg.cell_timeout_seconds = 1e-9;
    const auto r = run_confounding_suite(cfg);
    REQUIRE(r.cells.size() == 2);
    CHECK(r.cells[1].status == "timeout");
    CHECK_FALSE(r.all_ok());
    const auto j = to_json(r);
    CHECK_FALSE(j["summaries"][1].contains("sae"));
    CHECK(cells_csv(r).find("timeout") != std::string::npos);
  }

  TEST_CASE("inclusion deltas follow the module chain") {
    BenchReport r;
    r.suite = "confounding";
    auto cell = [](std::string m, double err) {
      CellResult c;
      c.model = std::move(m);
      c.abs_error = err;
      c.estimate = estimators::EstimateReport{};
      return c;
    };
    r.cells = {cell("tarnet", 0.4), cell("tarnet", 0.2), cell("dragonnet-cvtmle", 0.1), cell("dragonnet-cvtmle", 0.1),
               cell("t-behrt-cvtmle", 0.05), cell("t-behrt-cvtmle", 0.05)};
    summarize(r);
    REQUIRE(r.inclusion_deltas.size() == 2);
    CHECK(r.inclusion_deltas[0].from == "tarnet");
    CHECK(r.inclusion_deltas[0].to == "dragonnet-cvtmle");
    CHECK(r.inclusion_deltas[0].delta_mean_abs_error == doctest::Approx(-0.2));
    CHECK(r.inclusion_deltas[1].delta_mean_abs_error == doctest::Approx(-0.05));
  }
}
