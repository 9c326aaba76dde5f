#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cel/cohort.hpp"

namespace cel::synth {

enum class ConfounderKind { persistent, transient };

/// Which variable plays Z. Persistent confounders name a static attribute
/// ("sex" or "smoking"); transient ones name a vocabulary code group, and Z is
/// the occurrence of at least one code of that group.
struct ConfounderSpec {
  ConfounderKind kind = ConfounderKind::persistent;
  std::string definition = "sex";

  bool operator==(const ConfounderSpec&) const = default;
};

inline constexpr const char* kCardiometabolicGroup = "cardiometabolic";
inline constexpr const char* kCardiometabolicMedGroup = "cardiometabolic_medication";
inline constexpr const char* kSexLinkedFemaleGroup = "sex_linked_female";
inline constexpr const char* kSexLinkedMaleGroup = "sex_linked_male";

/// Vocabulary sizes. Disease groups 0..2 are reserved for the
/// cardiometabolic and the two sex-linked groups; medication group 0 is the
/// cardiometabolic medication group.
struct VocabSpec {
  int n_disease_groups = 8;
  int codes_per_disease_group = 4;
  int n_medication_groups = 4;
  int codes_per_medication_group = 3;
  int n_regions = 10;

  bool operator==(const VocabSpec&) const = default;
};

struct OutcomeCoeffs {
  double a = 1.0;
  double m = 1.0;
  double c = -0.5;

  bool operator==(const OutcomeCoeffs&) const = default;
};

struct SynthConfig {
  int n_patients = 1000;
  VocabSpec vocab;
  ConfounderSpec confounder;
  double beta = 1.0;
  OutcomeCoeffs coeffs;
  /// P(T=1 | Z=1) and P(T=1 | Z=0).
  double p1 = 0.7;
  double p0 = 0.3;
  int history_min = 4;
  int history_max = 12;
  std::uint64_t seed = 42;

  void validate() const;
  bool operator==(const SynthConfig&) const = default;
};

nlohmann::json to_json(const SynthConfig& cfg);
SynthConfig synth_config_from_json(const nlohmann::json& j);
std::string config_hash(const SynthConfig& cfg);

struct GroundTruth {
  double rr = 1.0;
  double ey1 = 0.0;
  double ey0 = 0.0;
  /// Means of the sampled counterfactuals, for reference only.
  std::optional<double> sampled_ey1;
  std::optional<double> sampled_ey0;
  std::optional<double> sampled_rr;
};

nlohmann::json to_json(const GroundTruth& g);
GroundTruth ground_truth_from_json(const nlohmann::json& j);

double sigmoid(double x);

/// Vocabulary implied by a VocabSpec (specials, grouped diagnosis and
/// medication codes, BP buckets, protected exposure/outcome codes).
Vocabulary build_vocabulary(const VocabSpec& spec);

/// Histories, statics, and exposures. Outcomes are left at zero and no
/// potential outcomes are attached.
Cohort gen_histories(const SynthConfig& cfg);

/// Value of Z for one patient.
bool confounder_value(const PatientRecord& p, const Vocabulary& vocab, const ConfounderSpec& spec);

/// Empirical P(T=1 | Z) per patient, in cohort order.
std::vector<double> compute_lambda(const Cohort& cohort, const ConfounderSpec& spec);
Cohort attach_lambda(Cohort cohort, const ConfounderSpec& spec);

/// Outcome logit a*t + m*beta*(lambda + c).
double outcome_logit(const SynthConfig& cfg, int t, double lambda);

/// Draws (y0, y1) per patient and sets the factual y. The uniforms behind the
/// draws depend only on (seed, patient index), so changing beta reuses them.
Cohort sample_outcomes(Cohort cohort, const SynthConfig& cfg);

/// Expectation-form ground truth over the cohort's lambdas.
GroundTruth ground_truth_rr(const Cohort& cohort, const SynthConfig& cfg);

/// Ratio of factual outcome rates between exposure arms.
double empirical_rr(const Cohort& cohort);

struct StandardizedEstimate {
  double rr = 1.0;
  double ey1 = 0.0;
  double ey0 = 0.0;
  /// Standard error of rr from the influence function of log RR.
  double se = 0.0;
};

/// Z-stratified outcome rates standardized over the Z marginal.
StandardizedEstimate standardized_rr(const Cohort& cohort, const ConfounderSpec& spec);

/// gen_histories -> attach_lambda -> sample_outcomes.
Cohort generate_cohort(const SynthConfig& cfg);

}  // namespace cel::synth
