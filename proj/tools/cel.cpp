#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cel/baselines.hpp"
#include "cel/bench.hpp"
#include "cel/cohort_io.hpp"
#include "cel/errors.hpp"
#include "cel/folds.hpp"
#include "cel/hashing.hpp"
#include "cel/predictions_io.hpp"
#include "cel/synth.hpp"
#include "cel/tbehrt/params.hpp"
#include "cel/tbehrt/trainer.hpp"

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw cel::ParseError(path.string() + ": " + e.what(), 1);
  }
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << j.dump(2) << "\n";
}

fs::path sidecar(const fs::path& out, const std::string& name) {
  return out.has_parent_path() ? out.parent_path() / name : fs::path(name);
}

// cohort.jsonl -> cohort.truth.json
fs::path truth_path(const fs::path& cohort) {
  fs::path p = cohort;
  p.replace_extension(".truth.json");
  return p;
}

std::optional<std::uint64_t> env_seed() {
  const char* s = std::getenv("CEL_SEED");
  if (!s || !*s) return std::nullopt;
  try {
    std::size_t used = 0;
    const auto v = std::stoull(s, &used);
    if (used != std::string(s).size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw cel::ValidationError(std::string("CEL_SEED is not an unsigned integer: ") + s);
  }
}

bool is_static_name(const std::string& s) { return s == "sex" || s == "smoking" || s == "region"; }

cel::EncodeOptions deep_withholding(const cel::Vocabulary& vocab, const std::vector<std::string>& names) {
  cel::EncodeOptions out;
  for (const auto& n : names) {
    const auto one = cel::tbehrt::withhold_confounder(vocab, !is_static_name(n), n);
    if (out.drop_codes.empty()) out.drop_codes.assign(vocab.size(), false);
    for (std::size_t i = 0; i < one.drop_codes.size(); ++i) {
      if (one.drop_codes[i]) out.drop_codes[i] = true;
    }
    for (std::size_t s = 0; s < cel::kNumStatics; ++s) out.withhold_statics[s] |= one.withhold_statics[s];
  }
  return out;
}

cel::baselines::FeatureOptions baseline_withholding(const std::vector<std::string>& names) {
  cel::baselines::FeatureOptions f;
  for (const auto& n : names) {
    if (n == "sex") {
      f.withhold_sex = true;
    } else if (n == "smoking") {
      f.withhold_smoking = true;
    } else if (n == "region") {
      throw cel::ValidationError("baseline features have no region column to withhold");
    } else {
      f.withhold_groups.insert(n);
    }
  }
  return f;
}

int cmd_synth(const fs::path& config, const fs::path& out) {
  const auto cfg = cel::synth::synth_config_from_json(read_json(config));
  const auto cohort = cel::synth::generate_cohort(cfg);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  cel::write_cohort(cohort, out);
  const json truth = {{"ground_truth", cel::synth::to_json(cel::synth::ground_truth_rr(cohort, cfg))},
                      {"config_hash", cel::synth::config_hash(cfg)},
                      {"config", cel::synth::to_json(cfg)}};
  write_json(truth_path(out), truth);
  std::cerr << "wrote " << cohort.patients.size() << " patients to " << out.string() << "\n";
  return 0;
}

struct FitArgs {
  fs::path cohort, config, out, params;
  std::string mode = "t-behrt";
  std::string preset = "desk";
  int k_folds = 5;
  std::uint64_t fold_seed = 0;
  std::vector<std::string> withhold;
  bool verbose = false;
};

int cmd_fit(const FitArgs& a) {
  const auto cohort = cel::read_cohort(a.cohort);
  auto cfg = cel::tbehrt::ModelConfig::from_preset(a.preset);
  if (!a.config.empty()) cfg = cel::tbehrt::model_config_from_json(read_json(a.config), cfg);
  cfg.validate();
  cel::tbehrt::FitOptions fo;
  fo.mode = cel::tbehrt::parse_fit_mode(a.mode);
  fo.k_folds = a.k_folds;
  fo.fold_seed = a.fold_seed;
  fo.encode = deep_withholding(cohort.vocabulary, a.withhold);
  if (a.verbose) {
    fo.on_epoch = [](const cel::tbehrt::EpochLog& e) {
      std::cerr << (e.fold < 0 ? std::string("pretrain") : "fold " + std::to_string(e.fold)) << " epoch " << e.epoch
                << " loss " << e.mean.total << "\n";
    };
  }
  const auto result = cel::tbehrt::fit(cohort, cfg, fo);
  if (!result.out_of_fold_ok) throw cel::ValidationError("out-of-fold prediction audit failed");
  if (!result.input_audit.clean()) throw cel::ValidationError("withheld information reached the network input");

  const std::string hash =
      cel::hash_hex(cel::tbehrt::to_json(cfg).dump() + "|" + std::string(cel::tbehrt::to_string(fo.mode)) + "|" +
                    cohort.provenance);
  if (a.out.has_parent_path()) fs::create_directories(a.out.parent_path());
  cel::write_predictions(result.predictions, a.out, hash);
  if (!a.params.empty()) {
    std::vector<std::pair<std::string, cel::tbehrt::ModelParams>> sets;
    for (std::size_t f = 0; f < result.fold_params.size(); ++f) {
      sets.emplace_back("fold" + std::to_string(f), result.fold_params[f]);
    }
    cel::tbehrt::save_params(a.params, cfg, sets);
  }
  const auto& d = result.encode_diagnostics;
  std::cerr << "fit " << a.mode << ": " << result.predictions.size() << " predictions; unknown codes "
            << d.unknown_codes << ", dropped " << d.dropped_codes << ", truncated " << d.truncated_encounters << "\n";
  return 0;
}

int cmd_estimate(const fs::path& preds_path, const std::string& method, const fs::path& truth, const fs::path& out) {
  const auto preds = cel::read_predictions(preds_path);
  cel::estimators::EstimateReport r;
  if (method == "naive") {
    r = cel::estimators::naive_rr(preds.rows);
  } else if (method == "tmle") {
    r = cel::estimators::foldwise_tmle_rr(preds.rows);
  } else {
    r = cel::estimators::cv_tmle_rr(preds.rows);
  }
  json j = cel::estimators::to_json(r);
  j["config_hash"] = preds.config_hash ? json(*preds.config_hash) : json(nullptr);
  if (!truth.empty()) {
    const auto t = read_json(truth);
    const auto gt = cel::synth::ground_truth_from_json(t.contains("ground_truth") ? t.at("ground_truth") : t);
    j["truth"] = gt.rr;
    j["abs_error"] = std::abs(r.rr - gt.rr);
  }
  write_json(out, j);
  std::cout << method << " rr=" << r.rr << " [" << r.ci_low << ", " << r.ci_high << "]\n";
  return 0;
}

struct BaselineArgs {
  fs::path cohort, out;
  std::string model = "lr";
  int k_folds = 5;
  std::uint64_t seed = 0;
  double lambda = 1.0;
  std::vector<std::string> withhold;
};

int cmd_baseline(const BaselineArgs& a) {
  const auto cohort = cel::read_cohort(a.cohort);
  const auto features = baseline_withholding(a.withhold);
  std::vector<int> t;
  for (const auto& p : cohort.patients) t.push_back(p.t);
  const auto folds = cel::kfold_split(t, a.k_folds, a.seed);
  cel::estimators::EstimateReport r;
  if (a.model == "lr-tmle") {
    r = cel::baselines::lr_tmle(cohort, folds, features);
  } else {
    cel::baselines::Penalty pen;
    pen.kind = a.model == "lr" ? cel::baselines::PenaltyKind::none
                               : (a.model == "lr-l1" ? cel::baselines::PenaltyKind::l1 : cel::baselines::PenaltyKind::l2);
    pen.lambda = a.lambda;
    r = cel::baselines::lr_plugin(cohort, folds, pen, features);
  }
  json j = cel::estimators::to_json(r);
  j["cohort_provenance"] = cohort.provenance;
  write_json(a.out, j);
  write_json(sidecar(a.out, "features.manifest.json"),
             cel::baselines::feature_manifest(cel::baselines::build_features(cohort, features)));
  std::cout << a.model << " rr=" << r.rr << " [" << r.ci_low << ", " << r.ci_high << "]\n";
  return 0;
}

int cmd_bench(const fs::path& config, const fs::path& out_dir, int jobs, bool verbose,
              const std::optional<std::vector<double>>& fractions) {
  auto j = read_json(config);
  if (const auto s = env_seed()) j["seed"] = *s;
  if (fractions) j["subsample_fractions"] = *fractions;
  const auto cfg = cel::bench::experiment_config_from_json(j);
  cel::bench::RunOptions run;
  run.jobs = jobs;
  run.verbose = verbose;
  cel::bench::Timing timing;
  const auto report = fractions ? cel::bench::run_subsample_suite(cfg, run, &timing)
                                : cel::bench::run_confounding_suite(cfg, run, &timing);
  cel::bench::emit_report(report, out_dir);
  cel::bench::write_timing(timing, report, out_dir / "timing.json");
  for (const auto& s : report.summaries) {
    std::cout << s.model << ": ";
    if (s.complete()) {
      std::cout << "SAE " << s.sae << " (SE " << s.sae_se << "), max abs error " << s.max_abs_error << "\n";
    } else {
      std::cout << s.cells_ok << "/" << s.cells << " cells ok, SAE not reported\n";
    }
  }
  return report.all_ok() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Causal-estimation lab: synthetic cohorts, T-BEHRT fits, TMLE and benchmarks"};
  app.require_subcommand(1);

  fs::path synth_config, synth_out;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic cohort and its ground-truth sidecar");
  synth->add_option("--config", synth_config, "SynthConfig JSON")->required()->check(CLI::ExistingFile);
  synth->add_option("--out", synth_out, "Output cohort JSONL")->required();

  FitArgs fa;
  auto* fit = app.add_subcommand("fit", "K-fold fit; writes out-of-fold predictions");
  fit->add_option("--cohort", fa.cohort, "Cohort JSONL")->required()->check(CLI::ExistingFile);
  fit->add_option("--mode", fa.mode, "tarnet|tarnet-mem|dragonnet|t-behrt")
      ->check(CLI::IsMember({"tarnet", "tarnet-mem", "dragonnet", "t-behrt"}));
  fit->add_option("--config", fa.config, "ModelConfig JSON overriding the preset")->check(CLI::ExistingFile);
  fit->add_option("--preset", fa.preset, "desk|paper")->check(CLI::IsMember({"desk", "paper"}));
  fit->add_option("--out", fa.out, "Predictions CSV")->required();
  fit->add_option("--params", fa.params, "Per-fold parameter file");
  fit->add_option("--folds", fa.k_folds, "Number of folds")->check(CLI::Range(2, 1000));
  fit->add_option("--fold-seed", fa.fold_seed, "Fold assignment seed");
  fit->add_option("--withhold", fa.withhold, "Static variable or code group hidden from the model");
  fit->add_flag("--verbose", fa.verbose, "Per-epoch loss on stderr");

  fs::path est_preds, est_truth, est_out;
  std::string est_method = "cv-tmle";
  auto* est = app.add_subcommand("estimate", "Risk ratio from a predictions CSV");
  est->add_option("--preds", est_preds, "Predictions CSV")->required()->check(CLI::ExistingFile);
  est->add_option("--method", est_method, "naive|tmle|cv-tmle")->check(CLI::IsMember({"naive", "tmle", "cv-tmle"}));
  est->add_option("--truth", est_truth, "Ground-truth sidecar")->check(CLI::ExistingFile);
  est->add_option("--out", est_out, "Report JSON")->required();

  BaselineArgs ba;
  auto* base = app.add_subcommand("baseline", "Logistic-regression baselines");
  base->add_option("--cohort", ba.cohort, "Cohort JSONL")->required()->check(CLI::ExistingFile);
  base->add_option("--model", ba.model, "lr|lr-l1|lr-l2|lr-tmle")
      ->check(CLI::IsMember({"lr", "lr-l1", "lr-l2", "lr-tmle"}));
  base->add_option("--out", ba.out, "Report JSON")->required();
  base->add_option("--folds", ba.k_folds, "Number of folds")->check(CLI::Range(2, 1000));
  base->add_option("--seed", ba.seed, "Fold assignment seed");
  base->add_option("--lambda", ba.lambda, "Penalty strength")->check(CLI::PositiveNumber);
  base->add_option("--withhold", ba.withhold, "Static variable or code group dropped from the features");

  fs::path bench_config, bench_out;
  int bench_jobs = 1;
  bool bench_verbose = false;
  auto* bench = app.add_subcommand("bench", "Confounding suite over the beta grid");
  bench->add_option("--config", bench_config, "ExperimentConfig JSON")->required()->check(CLI::ExistingFile);
  bench->add_option("--out-dir", bench_out, "Output directory")->required();
  bench->add_option("--jobs", bench_jobs, "Worker threads")->check(CLI::Range(1, 1024));
  bench->add_flag("--verbose", bench_verbose, "Per-cell progress on stderr");

  fs::path sub_config, sub_out;
  int sub_jobs = 1;
  bool sub_verbose = false;
  std::vector<double> sub_fractions;
  auto* sub = app.add_subcommand("subsample", "Nested-subsample suite at the first grid beta");
  sub->add_option("--config", sub_config, "ExperimentConfig JSON")->required()->check(CLI::ExistingFile);
  sub->add_option("--out-dir", sub_out, "Output directory")->required();
  auto* sub_fractions_opt =
      sub->add_option("--fractions", sub_fractions, "Comma-separated fractions in (0, 1]; overrides the config")
          ->delimiter(',');
  sub->add_option("--jobs", sub_jobs, "Worker threads")->check(CLI::Range(1, 1024));
  sub->add_flag("--verbose", sub_verbose, "Per-cell progress on stderr");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) return cmd_synth(synth_config, synth_out);
    if (*fit) return cmd_fit(fa);
    if (*est) return cmd_estimate(est_preds, est_method, est_truth, est_out);
    if (*base) return cmd_baseline(ba);
    if (*bench) return cmd_bench(bench_config, bench_out, bench_jobs, bench_verbose, std::nullopt);
    if (*sub) {
      // Config fractions win over the default list; the flag wins over both.
      std::vector<double> fr = sub_fractions;
      if (sub_fractions_opt->count() == 0) {
        const auto j = read_json(sub_config);
        fr = j.contains("subsample_fractions") ? j.at("subsample_fractions").get<std::vector<double>>()
                                               : std::vector<double>{0.025, 0.05, 0.1, 0.25, 0.5, 1.0};
      }
      return cmd_bench(sub_config, sub_out, sub_jobs, sub_verbose, fr);
    }
  } catch (const cel::ValidationError& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return 2;
  } catch (const cel::ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
