#include "cel/bench.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <chrono>
#include <cmath>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <numeric>
#include <thread>

#include "cel/baselines.hpp"
#include "cel/errors.hpp"
#include "cel/folds.hpp"
#include "cel/hashing.hpp"
#include "cel/rng.hpp"
#include "cel/tbehrt/trainer.hpp"

namespace cel::bench {

namespace {

using Clock = std::chrono::steady_clock;

// Seed streams; each job derives its own from the master seed.
constexpr std::uint64_t kFoldStream = 10;
constexpr std::uint64_t kModelStream = 20;
constexpr std::uint64_t kSubsampleStream = 30;

std::uint64_t bits(double x) { return std::bit_cast<std::uint64_t>(x); }

tbehrt::FitMode deep_mode(const std::string& model) {
  if (model == "tarnet") return tbehrt::FitMode::tarnet;
  if (model == "tarnet-mem") return tbehrt::FitMode::tarnet_mem;
  if (model == "dragonnet-cvtmle") return tbehrt::FitMode::dragonnet;
  return tbehrt::FitMode::t_behrt;
}

bool uses_tmle(const std::string& model) { return model == "dragonnet-cvtmle" || model == "t-behrt-cvtmle"; }

// One cohort shared by every model at a cell coordinate.
struct CohortCell {
  double beta = 0.0;
  std::optional<double> fraction;
  Cohort cohort;
  std::vector<int> folds;
  synth::GroundTruth truth;
};

struct Job {
  std::size_t cohort_index = 0;
  std::string model;
};

estimators::EstimateReport empirical_report(const Cohort& cohort) {
  double a = 0, n1 = 0, c = 0, n0 = 0;
  for (const auto& p : cohort.patients) {
    if (p.t == 1) {
      n1 += 1;
      a += p.y;
    } else {
      n0 += 1;
      c += p.y;
    }
  }
  if (a == 0 || c == 0 || n1 == 0 || n0 == 0) throw EstimationError("empirical RR undefined: empty arm or no events");
  estimators::EstimateReport r;
  r.method = "empirical";
  r.rr = (a / n1) / (c / n0);
  // Katz log interval
  const double se_log = std::sqrt(1.0 / a - 1.0 / n1 + 1.0 / c - 1.0 / n0);
  r.ci_low = r.rr * std::exp(-1.959963984540054 * se_log);
  r.ci_high = r.rr * std::exp(1.959963984540054 * se_log);
  r.interval_kind = "katz-log";
  r.se = r.rr * se_log;
  return r;
}

baselines::FeatureOptions baseline_withholding(const ExperimentConfig& cfg) {
  baselines::FeatureOptions f;
  if (!cfg.withhold_confounder) return f;
  const auto& spec = cfg.synth.confounder;
  if (spec.kind == synth::ConfounderKind::transient) {
    f.withhold_groups.insert(spec.definition);
  } else if (spec.definition == "sex") {
    f.withhold_sex = true;
  } else {
    f.withhold_smoking = true;
  }
  return f;
}

EncodeOptions deep_withholding(const ExperimentConfig& cfg, const Vocabulary& vocab) {
  if (!cfg.withhold_confounder) return {};
  return tbehrt::withhold_confounder(vocab, cfg.synth.confounder.kind == synth::ConfounderKind::transient,
                                     cfg.synth.confounder.definition);
}

CellResult run_cell(const ExperimentConfig& cfg, const CohortCell& cc, const std::string& model) {
  CellResult cell;
  cell.model = model;
  cell.beta = cc.beta;
  cell.fraction = cc.fraction;
  cell.n_patients = cc.cohort.patients.size();
  cell.truth = cc.truth.rr;

  const auto start = Clock::now();
  std::optional<Clock::time_point> deadline;
  if (cfg.cell_timeout_seconds > 0) {
    deadline = start + std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(cfg.cell_timeout_seconds));
  }

  try {
    estimators::EstimateReport report;
    if (model == "empirical") {
      report = empirical_report(cc.cohort);
    } else if (model == "lr" || model == "lr-l1" || model == "lr-l2") {
      baselines::Penalty pen;
      pen.kind = model == "lr" ? baselines::PenaltyKind::none
                               : (model == "lr-l1" ? baselines::PenaltyKind::l1 : baselines::PenaltyKind::l2);
      pen.lambda = cfg.penalty_lambda;
      report = baselines::lr_plugin(cc.cohort, cc.folds, pen, baseline_withholding(cfg));
    } else if (model == "lr-tmle") {
      report = baselines::lr_tmle(cc.cohort, cc.folds, baseline_withholding(cfg));
    } else {
      tbehrt::ModelConfig mcfg = cfg.model;
      mcfg.n_regions = std::max(mcfg.n_regions, cfg.synth.vocab.n_regions);
      // Depends on the cohort coordinates only, so a full-size subsample
      // reproduces the confounding-suite fit.
      mcfg.seed = derive_seed(cfg.seed, {kModelStream, bits(cc.beta), cc.cohort.patients.size()});
      tbehrt::FitOptions fo;
      fo.mode = deep_mode(model);
      fo.k_folds = cfg.k_folds;
      fo.folds = cc.folds;
      fo.encode = deep_withholding(cfg, cc.cohort.vocabulary);
      fo.deadline = deadline;
      const auto fit = tbehrt::fit(cc.cohort, mcfg, fo);
      cell.out_of_fold_ok = fit.out_of_fold_ok;
      cell.inputs_clean = fit.input_audit.clean();
      if (!fit.out_of_fold_ok) throw ValidationError("out-of-fold prediction audit failed");
      if (!fit.input_audit.clean()) throw ValidationError("withheld confounder reached the network input");
      report = uses_tmle(model) ? estimators::cv_tmle_rr(fit.predictions) : estimators::naive_rr(fit.predictions);
    }
    report.method = model;
    if (deadline && Clock::now() > *deadline) throw TimeoutError("cell exceeded its wall-clock cap");
    cell.abs_error = std::abs(report.rr - cell.truth);
    cell.estimate = std::move(report);
  } catch (const TimeoutError& e) {
    cell.status = "timeout";
    cell.error = e.what();
    cell.estimate.reset();
  } catch (const std::exception& e) {
    cell.status = "failed";
    cell.error = e.what();
    cell.estimate.reset();
  }
  return cell;
}

std::string describe(const CellResult& c) {
  std::string s = c.model + " beta=" + std::to_string(c.beta);
  if (c.fraction) s += " fraction=" + std::to_string(*c.fraction);
  return s;
}

// Runs one job per (model, cohort cell) on a pool of `jobs` workers. Results
// land in job order, so the report does not depend on scheduling.
std::vector<CellResult> run_jobs(const ExperimentConfig& cfg, const std::vector<CohortCell>& cohorts,
                                 const RunOptions& run, Timing* timing) {
  std::vector<Job> jobs;
  for (const auto& model : cfg.models) {
    for (std::size_t i = 0; i < cohorts.size(); ++i) jobs.push_back({i, model});
  }
  std::vector<CellResult> results(jobs.size());
  std::vector<double> seconds(jobs.size(), 0.0);
  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;

  auto worker = [&] {
    for (std::size_t j = next++; j < jobs.size(); j = next++) {
      const auto start = Clock::now();
      results[j] = run_cell(cfg, cohorts[jobs[j].cohort_index], jobs[j].model);
      seconds[j] = std::chrono::duration<double>(Clock::now() - start).count();
      if (run.verbose) {
        std::lock_guard lock(log_mutex);
        std::cerr << "[" << (j + 1) << "/" << jobs.size() << "] " << describe(results[j]) << " " << results[j].status;
        if (results[j].estimate) std::cerr << " rr=" << results[j].estimate->rr << " truth=" << results[j].truth;
        if (!results[j].error.empty()) std::cerr << " (" << results[j].error << ")";
        std::cerr << " " << seconds[j] << "s\n";
      }
    }
  };

  const int width = std::max(1, std::min<int>(run.jobs, static_cast<int>(std::max<std::size_t>(jobs.size(), 1))));
  if (width == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < width; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (timing) timing->cell_seconds = std::move(seconds);
  return results;
}

std::vector<int> folds_for(const Cohort& cohort, const ExperimentConfig& cfg) {
  std::vector<int> t;
  t.reserve(cohort.patients.size());
  for (const auto& p : cohort.patients) t.push_back(p.t);
  return kfold_split(t, cfg.k_folds, derive_seed(cfg.seed, {kFoldStream, cohort.patients.size()}));
}

synth::SynthConfig synth_at(const ExperimentConfig& cfg, double beta) {
  synth::SynthConfig s = cfg.synth;
  s.beta = beta;
  s.seed = cfg.seed;
  return s;
}

BenchReport assemble(const ExperimentConfig& cfg, std::string suite, std::vector<CohortCell>& cohorts,
                     const RunOptions& run, Timing* timing) {
  const auto start = Clock::now();
  BenchReport report;
  report.suite = std::move(suite);
  report.config = to_json(cfg);
  report.config_hash = config_hash(cfg);
  report.cells = run_jobs(cfg, cohorts, run, timing);
  for (const auto& cc : cohorts) report.truths.push_back(cc.truth);
  summarize(report);
  if (timing) timing->total_seconds = std::chrono::duration<double>(Clock::now() - start).count();
  return report;
}

}  // namespace

bool is_deep_model(const std::string& model) {
  return model == "tarnet" || model == "tarnet-mem" || model == "dragonnet-cvtmle" || model == "t-behrt-cvtmle";
}

void ExperimentConfig::validate() const {
  synth.validate();
  model.validate();
  if (k_folds < 2) throw ValidationError("k_folds must be at least 2");
  if (beta_grid.empty()) throw ValidationError("beta_grid must not be empty");
  for (double b : beta_grid) {
    if (!std::isfinite(b)) throw ValidationError("beta_grid entries must be finite");
  }
  const auto& known = known_models();
  for (std::size_t i = 0; i < models.size(); ++i) {
    if (std::find(known.begin(), known.end(), models[i]) == known.end()) {
      throw ValidationError("unknown model '" + models[i] + "'");
    }
    if (std::find(models.begin(), models.begin() + static_cast<std::ptrdiff_t>(i), models[i]) !=
        models.begin() + static_cast<std::ptrdiff_t>(i)) {
      throw ValidationError("model '" + models[i] + "' listed twice");
    }
  }
  for (double f : subsample_fractions) {
    if (!(f > 0.0 && f <= 1.0)) throw ValidationError("subsample fractions must lie in (0, 1]");
  }
  if (!(penalty_lambda > 0.0)) throw ValidationError("penalty_lambda must be positive");
  if (!(cell_timeout_seconds >= 0.0)) throw ValidationError("cell_timeout_seconds must be non-negative");
}

std::string config_hash(const ExperimentConfig& cfg) { return hash_hex(to_json(cfg).dump()); }

bool BenchReport::all_ok() const {
  return std::all_of(cells.begin(), cells.end(), [](const CellResult& c) { return c.ok(); });
}

const ModelSummary* BenchReport::summary(const std::string& model) const {
  for (const auto& s : summaries) {
    if (s.model == model) return &s;
  }
  return nullptr;
}

std::vector<std::size_t> subsample_indices(std::size_t n, double fraction, std::uint64_t seed, int k_folds) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ValidationError("fraction must lie in (0, 1]");
  const auto count = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  if (count < 2 * static_cast<std::size_t>(std::max(k_folds, 1))) {
    throw ValidationError("fraction " + std::to_string(fraction) + " leaves " + std::to_string(count) +
                          " patients, fewer than 2k");
  }
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(perm);
  perm.resize(count);
  std::sort(perm.begin(), perm.end());
  return perm;
}

void summarize(BenchReport& report) {
  std::vector<std::string> order;
  std::map<std::string, ModelSummary> by_model;
  std::map<std::string, double> se_sq;
  for (const auto& c : report.cells) {
    auto [it, inserted] = by_model.try_emplace(c.model);
    if (inserted) {
      order.push_back(c.model);
      it->second.model = c.model;
    }
    auto& s = it->second;
    ++s.cells;
    if (!c.ok() || !c.estimate) continue;
    ++s.cells_ok;
    s.sae += c.abs_error;
    s.max_abs_error = std::max(s.max_abs_error, c.abs_error);
    se_sq[c.model] += c.estimate->se * c.estimate->se;
  }
  report.summaries.clear();
  for (const auto& m : order) {
    auto s = by_model[m];
    s.sae_se = std::sqrt(se_sq[m]);
    report.summaries.push_back(s);
  }

  report.inclusion_deltas.clear();
  static const std::vector<std::string> chain = {"tarnet", "tarnet-mem", "dragonnet-cvtmle", "t-behrt-cvtmle"};
  const ModelSummary* prev = nullptr;
  for (const auto& name : chain) {
    const ModelSummary* s = report.summary(name);
    if (!s || !s->complete() || s->cells == 0) continue;
    if (prev) {
      report.inclusion_deltas.push_back(
          {prev->model, s->model,
           s->sae / static_cast<double>(s->cells) - prev->sae / static_cast<double>(prev->cells)});
    }
    prev = s;
  }
}

BenchReport run_confounding_suite(const ExperimentConfig& cfg, const RunOptions& run, Timing* timing) {
  cfg.validate();
  std::vector<CohortCell> cohorts;
  for (double beta : cfg.beta_grid) {
    const auto scfg = synth_at(cfg, beta);
    CohortCell cc;
    cc.beta = beta;
    cc.cohort = synth::generate_cohort(scfg);
    cc.folds = folds_for(cc.cohort, cfg);
    cc.truth = synth::ground_truth_rr(cc.cohort, scfg);
    cohorts.push_back(std::move(cc));
  }
  auto report = assemble(cfg, "confounding", cohorts, run, timing);
  report.betas = cfg.beta_grid;
  return report;
}

BenchReport run_subsample_suite(const ExperimentConfig& cfg, const RunOptions& run, Timing* timing) {
  cfg.validate();
  if (cfg.subsample_fractions.empty()) throw ValidationError("subsample suite needs subsample_fractions");
  const double beta = cfg.beta_grid.front();
  const auto scfg = synth_at(cfg, beta);
  const Cohort base = synth::generate_cohort(scfg);
  const auto sub_seed = derive_seed(cfg.seed, {kSubsampleStream});

  std::vector<CohortCell> cohorts;
  for (double f : cfg.subsample_fractions) {
    CohortCell cc;
    cc.beta = beta;
    cc.fraction = f;
    cc.cohort.vocabulary = base.vocabulary;
    cc.cohort.provenance = base.provenance;
    for (std::size_t i : subsample_indices(base.patients.size(), f, sub_seed, cfg.k_folds)) {
      cc.cohort.patients.push_back(base.patients[i]);
    }
    cc.folds = folds_for(cc.cohort, cfg);
    cc.truth = synth::ground_truth_rr(cc.cohort, scfg);
    cohorts.push_back(std::move(cc));
  }
  auto report = assemble(cfg, "subsample", cohorts, run, timing);
  report.betas = {beta};
  report.fractions = cfg.subsample_fractions;
  return report;
}

}  // namespace cel::bench
