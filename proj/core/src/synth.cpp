#include "cel/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>

#include "cel/errors.hpp"
#include "cel/hashing.hpp"
#include "cel/rng.hpp"

namespace cel::synth {

using nlohmann::json;

namespace {

constexpr std::uint64_t kStreamHistory = 1;
constexpr std::uint64_t kStreamExposure = 2;
constexpr std::uint64_t kStreamOutcome = 3;

// History shape. These describe the synthetic population, not the confounding
// mechanism, so they are fixed rather than exposed through SynthConfig.
constexpr double kSexFemaleRate = 0.5;
constexpr double kSmokingRate = 0.25;
constexpr double kCardiometabolicRate = 0.35;
constexpr double kBpShare = 0.2;
constexpr double kMedicationShare = 0.25;
constexpr double kSexLinkedShare = 0.15;
constexpr double kCardioMedAfterOnset = 1.0;
constexpr double kCardioMedShareAfterOnset = 0.7;
constexpr double kCardioMedNoise = 0.0;

std::string disease_group_name(int g) {
  if (g == 0) return kCardiometabolicGroup;
  if (g == 1) return kSexLinkedFemaleGroup;
  if (g == 2) return kSexLinkedMaleGroup;
  char buf[32];
  std::snprintf(buf, sizeof(buf), "disease_%02d", g);
  return buf;
}

std::string medication_group_name(int g) {
  if (g == 0) return kCardiometabolicMedGroup;
  char buf[32];
  std::snprintf(buf, sizeof(buf), "medication_%02d", g);
  return buf;
}

std::string patient_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "P%07zu", i);
  return buf;
}

std::string_view kind_name(ConfounderKind k) {
  return k == ConfounderKind::persistent ? "persistent" : "transient";
}

ConfounderKind parse_kind(const std::string& s) {
  if (s == "persistent") return ConfounderKind::persistent;
  if (s == "transient") return ConfounderKind::transient;
  throw ValidationError("confounder kind must be 'persistent' or 'transient', got '" + s + "'");
}

int pick(Rng& rng, const std::vector<int>& v) { return v[rng.index(v.size())]; }

}  // namespace

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void SynthConfig::validate() const {
  if (n_patients < 2) throw ValidationError("n_patients must be at least 2");
  if (!(p1 > 0.0 && p1 < 1.0 && p0 > 0.0 && p0 < 1.0)) throw ValidationError("p1 and p0 must lie in (0,1)");
  if (history_min > history_max) throw ValidationError("history_min exceeds history_max");
  if (history_min < 3) throw ValidationError("history_min must be at least 3");
  if (!(beta >= 0.0) || !std::isfinite(beta)) throw ValidationError("beta must be finite and non-negative");
  if (!std::isfinite(coeffs.a) || !std::isfinite(coeffs.m) || !std::isfinite(coeffs.c)) {
    throw ValidationError("outcome coefficients must be finite");
  }
  if (vocab.n_disease_groups < 4 || vocab.codes_per_disease_group < 1) {
    throw ValidationError("vocabulary too small: need at least 4 disease groups with one code each");
  }
  if (vocab.n_medication_groups < 2 || vocab.codes_per_medication_group < 1) {
    throw ValidationError("vocabulary too small: need at least 2 medication groups with one code each");
  }
  if (vocab.n_regions < 1) throw ValidationError("n_regions must be positive");
  if (confounder.kind == ConfounderKind::persistent && confounder.definition != "sex" &&
      confounder.definition != "smoking") {
    throw ValidationError("persistent confounder must be 'sex' or 'smoking'");
  }
}

json to_json(const SynthConfig& cfg) {
  return {{"n_patients", cfg.n_patients},
          {"vocab_spec",
           {{"n_disease_groups", cfg.vocab.n_disease_groups},
            {"codes_per_disease_group", cfg.vocab.codes_per_disease_group},
            {"n_medication_groups", cfg.vocab.n_medication_groups},
            {"codes_per_medication_group", cfg.vocab.codes_per_medication_group},
            {"n_regions", cfg.vocab.n_regions}}},
          {"confounder", {{"kind", std::string(kind_name(cfg.confounder.kind))}, {"definition", cfg.confounder.definition}}},
          {"beta", cfg.beta},
          {"coeffs", {{"a", cfg.coeffs.a}, {"m", cfg.coeffs.m}, {"c", cfg.coeffs.c}}},
          {"exposure_assoc", {{"p1", cfg.p1}, {"p0", cfg.p0}}},
          {"history_len_range", {cfg.history_min, cfg.history_max}},
          {"seed", cfg.seed}};
}

SynthConfig synth_config_from_json(const json& j) {
  SynthConfig cfg;
  cfg.n_patients = j.value("n_patients", cfg.n_patients);
  if (j.contains("vocab_spec")) {
    const auto& v = j.at("vocab_spec");
    cfg.vocab.n_disease_groups = v.value("n_disease_groups", cfg.vocab.n_disease_groups);
    cfg.vocab.codes_per_disease_group = v.value("codes_per_disease_group", cfg.vocab.codes_per_disease_group);
    cfg.vocab.n_medication_groups = v.value("n_medication_groups", cfg.vocab.n_medication_groups);
    cfg.vocab.codes_per_medication_group = v.value("codes_per_medication_group", cfg.vocab.codes_per_medication_group);
    cfg.vocab.n_regions = v.value("n_regions", cfg.vocab.n_regions);
  }
  if (j.contains("confounder")) {
    const auto& c = j.at("confounder");
    cfg.confounder.kind = parse_kind(c.value("kind", std::string("persistent")));
    cfg.confounder.definition = c.value("definition", cfg.confounder.kind == ConfounderKind::persistent
                                                          ? std::string("sex")
                                                          : std::string(kCardiometabolicGroup));
  }
  cfg.beta = j.value("beta", cfg.beta);
  if (j.contains("coeffs")) {
    const auto& c = j.at("coeffs");
    cfg.coeffs.a = c.value("a", cfg.coeffs.a);
    cfg.coeffs.m = c.value("m", cfg.coeffs.m);
    cfg.coeffs.c = c.value("c", cfg.coeffs.c);
  }
  if (j.contains("exposure_assoc")) {
    cfg.p1 = j.at("exposure_assoc").value("p1", cfg.p1);
    cfg.p0 = j.at("exposure_assoc").value("p0", cfg.p0);
  }
  if (j.contains("history_len_range")) {
    cfg.history_min = j.at("history_len_range").at(0).get<int>();
    cfg.history_max = j.at("history_len_range").at(1).get<int>();
  }
  cfg.seed = j.value("seed", cfg.seed);
  cfg.validate();
  return cfg;
}

std::string config_hash(const SynthConfig& cfg) { return hash_hex(to_json(cfg).dump()); }

json to_json(const GroundTruth& g) {
  json j = {{"rr", g.rr}, {"ey1", g.ey1}, {"ey0", g.ey0}};
  if (g.sampled_ey1) j["sampled_ey1"] = *g.sampled_ey1;
  if (g.sampled_ey0) j["sampled_ey0"] = *g.sampled_ey0;
  if (g.sampled_rr) j["sampled_rr"] = *g.sampled_rr;
  return j;
}

GroundTruth ground_truth_from_json(const json& j) {
  GroundTruth g;
  g.rr = j.at("rr").get<double>();
  g.ey1 = j.at("ey1").get<double>();
  g.ey0 = j.at("ey0").get<double>();
  if (j.contains("sampled_ey1")) g.sampled_ey1 = j.at("sampled_ey1").get<double>();
  if (j.contains("sampled_ey0")) g.sampled_ey0 = j.at("sampled_ey0").get<double>();
  if (j.contains("sampled_rr")) g.sampled_rr = j.at("sampled_rr").get<double>();
  return g;
}

Vocabulary build_vocabulary(const VocabSpec& spec) {
  Vocabulary v = Vocabulary::with_specials();
  for (int g = 0; g < spec.n_disease_groups; ++g) {
    const std::string name = disease_group_name(g);
    for (int c = 0; c < spec.codes_per_disease_group; ++c) {
      v.assign_group(v.add_token(name + "/" + std::to_string(c), TokenCategory::diagnosis), name);
    }
  }
  for (int g = 0; g < spec.n_medication_groups; ++g) {
    const std::string name = medication_group_name(g);
    for (int c = 0; c < spec.codes_per_medication_group; ++c) {
      v.assign_group(v.add_token(name + "/" + std::to_string(c), TokenCategory::medication), name);
    }
  }
  for (int b = 0; b < kNumBpBuckets; ++b) v.add_token(bp_bucket_label(b), TokenCategory::bp_bucket);
  v.add_protected(v.add_token("EXPOSURE/class_1", TokenCategory::medication));
  v.add_protected(v.add_token("EXPOSURE/class_2", TokenCategory::medication));
  v.add_protected(v.add_token("OUTCOME/cancer", TokenCategory::diagnosis));
  return v;
}

Cohort gen_histories(const SynthConfig& cfg) {
  cfg.validate();
  Cohort cohort;
  cohort.vocabulary = build_vocabulary(cfg.vocab);
  cohort.provenance = "synth:" + config_hash(cfg);
  const Vocabulary& vocab = cohort.vocabulary;

  const auto& cardio_dx = vocab.group_members(kCardiometabolicGroup);
  const auto& cardio_med = vocab.group_members(kCardiometabolicMedGroup);
  const auto& female_dx = vocab.group_members(kSexLinkedFemaleGroup);
  const auto& male_dx = vocab.group_members(kSexLinkedMaleGroup);
  std::vector<std::vector<int>> generic_dx;
  for (int g = 3; g < cfg.vocab.n_disease_groups; ++g) generic_dx.push_back(vocab.group_members(disease_group_name(g)));
  std::vector<std::vector<int>> generic_med;
  for (int g = 1; g < cfg.vocab.n_medication_groups; ++g) {
    generic_med.push_back(vocab.group_members(medication_group_name(g)));
  }

  cohort.patients.resize(static_cast<std::size_t>(cfg.n_patients));
  for (std::size_t i = 0; i < cohort.patients.size(); ++i) {
    Rng rng(derive_seed(cfg.seed, {kStreamHistory, i}));
    PatientRecord& p = cohort.patients[i];
    p.id = patient_id(i);
    p.statics.sex = rng.bernoulli(kSexFemaleRate) ? 1 : 0;
    p.statics.region = rng.uniform_int(0, cfg.vocab.n_regions - 1);
    p.statics.smoking = rng.bernoulli(kSmokingRate) ? 1 : 0;
    const bool cardio = rng.bernoulli(kCardiometabolicRate);

    const int k = rng.uniform_int(cfg.history_min, cfg.history_max);
    const int baseline_age = rng.uniform_int(45, 80);
    const int baseline_year = rng.uniform_int(2005, 2015);
    std::vector<int> ages(static_cast<std::size_t>(k));
    for (auto& a : ages) a = rng.uniform_int(baseline_age - 10, baseline_age - 1);
    std::sort(ages.begin(), ages.end());

    // Slots reserved for the sex-linked marker and, when present, the
    // cardiometabolic onset and its follow-up prescription.
    std::vector<int> slots(static_cast<std::size_t>(k));
    for (int j = 0; j < k; ++j) slots[static_cast<std::size_t>(j)] = j;
    rng.shuffle(slots);
    const int sex_slot = slots[0];
    const int onset = std::min(slots[1], slots[2]);
    const int followup = std::max(slots[1], slots[2]);
    const auto& own_sex_dx = p.statics.sex == 1 ? female_dx : male_dx;

    p.encounters.resize(static_cast<std::size_t>(k));
    for (int j = 0; j < k; ++j) {
      const bool after_onset = cardio && j > onset;
      int code;
      const double u = rng.uniform();
      if (u < kBpShare) {
        const double systolic = after_onset ? 150.0 + 14.0 * rng.normal() : 127.0 + 12.0 * rng.normal();
        code = bucket_bp(std::max(systolic, 60.0), vocab);
      } else if (u < kBpShare + kMedicationShare) {
        const double cardio_share = after_onset ? kCardioMedShareAfterOnset : kCardioMedNoise;
        code = rng.bernoulli(cardio_share) ? pick(rng, cardio_med) : pick(rng, generic_med[rng.index(generic_med.size())]);
      } else if (rng.bernoulli(kSexLinkedShare)) {
        code = pick(rng, own_sex_dx);
      } else {
        code = pick(rng, generic_dx[rng.index(generic_dx.size())]);
      }
      if (j == sex_slot) code = pick(rng, own_sex_dx);
      if (cardio && j == onset) code = pick(rng, cardio_dx);
      if (cardio && j == followup && rng.bernoulli(kCardioMedAfterOnset)) code = pick(rng, cardio_med);
      const auto uj = static_cast<std::size_t>(j);
      p.encounters[uj] = Encounter{code, ages[uj], baseline_year - (baseline_age - ages[uj]), j};
    }
  }

  for (std::size_t i = 0; i < cohort.patients.size(); ++i) {
    PatientRecord& p = cohort.patients[i];
    Rng rng(derive_seed(cfg.seed, {kStreamExposure, i}));
    const bool z = confounder_value(p, vocab, cfg.confounder);
    p.t = rng.bernoulli(z ? cfg.p1 : cfg.p0) ? 1 : 0;
    p.y = 0;
  }
  return cohort;
}

bool confounder_value(const PatientRecord& p, const Vocabulary& vocab, const ConfounderSpec& spec) {
  if (spec.kind == ConfounderKind::persistent) {
    if (spec.definition == "sex") return p.statics.sex == 1;
    if (spec.definition == "smoking") return p.statics.smoking == 1;
    throw ValidationError("unknown persistent confounder '" + spec.definition + "'");
  }
  const auto& members = vocab.group_members(spec.definition);
  return std::any_of(p.encounters.begin(), p.encounters.end(), [&](const Encounter& e) {
    return std::binary_search(members.begin(), members.end(), e.code);
  });
}

std::vector<double> compute_lambda(const Cohort& cohort, const ConfounderSpec& spec) {
  std::array<std::size_t, 2> n{}, treated{};
  std::vector<int> z(cohort.patients.size());
  for (std::size_t i = 0; i < cohort.patients.size(); ++i) {
    const auto& p = cohort.patients[i];
    z[i] = confounder_value(p, cohort.vocabulary, spec) ? 1 : 0;
    ++n[static_cast<std::size_t>(z[i])];
    treated[static_cast<std::size_t>(z[i])] += static_cast<std::size_t>(p.t);
  }
  if (n[0] == 0 || n[1] == 0) throw ValidationError("confounder stratum is empty; lambda undefined");
  std::vector<double> lambda(cohort.patients.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    const auto s = static_cast<std::size_t>(z[i]);
    lambda[i] = static_cast<double>(treated[s]) / static_cast<double>(n[s]);
  }
  return lambda;
}

Cohort attach_lambda(Cohort cohort, const ConfounderSpec& spec) {
  const auto lambda = compute_lambda(cohort, spec);
  for (std::size_t i = 0; i < lambda.size(); ++i) cohort.patients[i].lambda = lambda[i];
  return cohort;
}

double outcome_logit(const SynthConfig& cfg, int t, double lambda) {
  return cfg.coeffs.a * t + cfg.coeffs.m * cfg.beta * (lambda + cfg.coeffs.c);
}

Cohort sample_outcomes(Cohort cohort, const SynthConfig& cfg) {
  for (std::size_t i = 0; i < cohort.patients.size(); ++i) {
    PatientRecord& p = cohort.patients[i];
    if (!p.lambda) throw ValidationError("patient '" + p.id + "': lambda must be attached before sampling outcomes");
    Rng rng(derive_seed(cfg.seed, {kStreamOutcome, i}));
    const double u0 = rng.uniform();
    const double u1 = rng.uniform();
    const int y0 = u0 < sigmoid(outcome_logit(cfg, 0, *p.lambda)) ? 1 : 0;
    const int y1 = u1 < sigmoid(outcome_logit(cfg, 1, *p.lambda)) ? 1 : 0;
    p.potential_outcomes = std::make_pair(y0, y1);
    p.y = p.t == 1 ? y1 : y0;
  }
  return cohort;
}

GroundTruth ground_truth_rr(const Cohort& cohort, const SynthConfig& cfg) {
  if (cohort.patients.empty()) throw EstimationError("ground truth of an empty cohort");
  double s1 = 0.0, s0 = 0.0, c1 = 0.0, c0 = 0.0;
  bool have_counterfactuals = true;
  for (const auto& p : cohort.patients) {
    if (!p.lambda) throw ValidationError("patient '" + p.id + "': lambda missing");
    s1 += sigmoid(outcome_logit(cfg, 1, *p.lambda));
    s0 += sigmoid(outcome_logit(cfg, 0, *p.lambda));
    if (p.potential_outcomes) {
      c0 += p.potential_outcomes->first;
      c1 += p.potential_outcomes->second;
    } else {
      have_counterfactuals = false;
    }
  }
  const double n = static_cast<double>(cohort.patients.size());
  GroundTruth g;
  g.ey1 = s1 / n;
  g.ey0 = s0 / n;
  g.rr = g.ey1 / g.ey0;
  if (have_counterfactuals) {
    g.sampled_ey1 = c1 / n;
    g.sampled_ey0 = c0 / n;
    if (c0 > 0) g.sampled_rr = c1 / c0;
  }
  return g;
}

double empirical_rr(const Cohort& cohort) {
  double n1 = 0, e1 = 0, n0 = 0, e0 = 0;
  for (const auto& p : cohort.patients) {
    if (p.t == 1) {
      n1 += 1;
      e1 += p.y;
    } else {
      n0 += 1;
      e0 += p.y;
    }
  }
  if (n1 == 0 || n0 == 0) throw EstimationError("empirical RR needs both exposure groups");
  if (e0 == 0) throw EstimationError("empirical RR undefined: no events in the control group");
  return (e1 / n1) / (e0 / n0);
}

StandardizedEstimate standardized_rr(const Cohort& cohort, const ConfounderSpec& spec) {
  // counts[z][t] and events[z][t]
  double counts[2][2] = {{0, 0}, {0, 0}};
  double events[2][2] = {{0, 0}, {0, 0}};
  std::vector<int> z(cohort.patients.size());
  for (std::size_t i = 0; i < cohort.patients.size(); ++i) {
    const auto& p = cohort.patients[i];
    z[i] = confounder_value(p, cohort.vocabulary, spec) ? 1 : 0;
    counts[z[i]][p.t] += 1;
    events[z[i]][p.t] += p.y;
  }
  const double n = static_cast<double>(cohort.patients.size());
  double rate[2][2];
  for (int s = 0; s < 2; ++s) {
    for (int t = 0; t < 2; ++t) {
      if (counts[s][t] == 0) throw EstimationError("standardization needs every (Z, T) cell populated");
      rate[s][t] = events[s][t] / counts[s][t];
    }
  }
  StandardizedEstimate est;
  for (int s = 0; s < 2; ++s) {
    const double pi = (counts[s][0] + counts[s][1]) / n;
    est.ey1 += pi * rate[s][1];
    est.ey0 += pi * rate[s][0];
  }
  if (est.ey0 <= 0) throw EstimationError("standardized control risk is zero");
  est.rr = est.ey1 / est.ey0;

  double sum = 0.0, sum_sq = 0.0;
  for (std::size_t i = 0; i < cohort.patients.size(); ++i) {
    const auto& p = cohort.patients[i];
    const int s = z[i];
    const double ps = (counts[s][1]) / (counts[s][0] + counts[s][1]);
    const double if1 = (p.t == 1 ? (p.y - rate[s][1]) / ps : 0.0) + rate[s][1] - est.ey1;
    const double if0 = (p.t == 0 ? (p.y - rate[s][0]) / (1.0 - ps) : 0.0) + rate[s][0] - est.ey0;
    const double ic = if1 / est.ey1 - if0 / est.ey0;
    sum += ic;
    sum_sq += ic * ic;
  }
  const double var = (sum_sq - sum * sum / n) / (n - 1.0);
  est.se = est.rr * std::sqrt(var / n);
  return est;
}

Cohort generate_cohort(const SynthConfig& cfg) {
  Cohort c = gen_histories(cfg);
  c = attach_lambda(std::move(c), cfg.confounder);
  return sample_outcomes(std::move(c), cfg);
}

}  // namespace cel::synth
