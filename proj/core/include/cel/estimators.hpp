#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace cel::estimators {

/// Out-of-fold model output for one patient.
struct PredictionTriple {
  std::string patient_id;
  int fold = 0;
  double q0 = 0.5;
  double q1 = 0.5;
  double g = 0.5;
  int t = 0;
  int y = 0;

  bool operator==(const PredictionTriple&) const = default;
};

struct FluctuationEps {
  double eps0 = 0.0;
  double eps1 = 0.0;

  bool operator==(const FluctuationEps&) const = default;
};

struct Interval {
  double low = 0.0;
  double high = 0.0;
  std::string kind;

  bool operator==(const Interval&) const = default;
};

struct EstimateReport {
  std::string method;
  double rr = 1.0;
  double ci_low = 1.0;
  double ci_high = 1.0;
  /// "fold-spread", "influence-curve", or "log-rr-delta".
  std::string interval_kind;
  /// Standard error of rr consistent with the primary interval.
  double se = 0.0;
  std::vector<double> per_fold;
  std::optional<FluctuationEps> eps;
  std::size_t n_trimmed = 0;
  /// Secondary interval (fold-spread for pooled CV-TMLE).
  std::optional<Interval> alt_ci;

  bool operator==(const EstimateReport&) const = default;
};

nlohmann::json to_json(const EstimateReport& r);
EstimateReport estimate_report_from_json(const nlohmann::json& j);

inline constexpr double kTrimLow = 0.03;
inline constexpr double kTrimHigh = 0.97;

struct TrimResult {
  std::vector<PredictionTriple> kept;
  std::size_t n_trimmed = 0;
};

/// Keeps patients with kTrimLow <= g <= kTrimHigh, preserving order. Throws
/// EstimationError when nothing survives.
TrimResult trim(std::span<const PredictionTriple> preds);

struct FoldCi {
  double mean = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  /// sd / sqrt(k)
  double se = 0.0;
};

/// mean +/- 1.96 * sd / sqrt(k) with the k-1 sample standard deviation.
FoldCi fold_ci(std::span<const double> per_fold);

/// mean(q1) / mean(q0).
double ratio_of_means(std::span<const PredictionTriple> preds);

/// Per-fold plug-in RR averaged over folds; fold-spread interval.
EstimateReport naive_rr(std::span<const PredictionTriple> preds);

struct TmleOptions {
  int max_iterations = 100;
  double score_tolerance = 1e-10;
};

struct TmleResult {
  std::vector<double> q0_star;
  std::vector<double> q1_star;
  FluctuationEps eps;
  int iterations = 0;
  /// Score equations at the solution: control, treated.
  double score0 = 0.0;
  double score1 = 0.0;
};

/// Fits logit q*(t) = logit q(t) + eps1 * t/g + eps0 * (1-t)/(1-g) by
/// maximum likelihood (no intercept) and returns both updated arms.
TmleResult tmle_fluctuate(std::span<const PredictionTriple> preds, const TmleOptions& options = {});

/// Binomial log-likelihood of the fluctuation submodel at (eps0, eps1).
double fluctuation_loglik(std::span<const PredictionTriple> preds, double eps0, double eps1);

/// Pooled CV-TMLE: trim, one fluctuation over every patient, ratio of
/// targeted means. Primary interval from the influence curve of log RR;
/// the per-fold targeted ratios give the fold-spread alternative.
EstimateReport cv_tmle_rr(std::span<const PredictionTriple> preds, const TmleOptions& options = {});

/// Fold-wise TMLE: trim, then fluctuate and take the targeted ratio inside
/// each fold separately; fold-spread interval.
EstimateReport foldwise_tmle_rr(std::span<const PredictionTriple> preds, const TmleOptions& options = {});

/// Sum of absolute errors.
double sae(std::span<const double> estimates, std::span<const double> truths);
/// Root sum of squares of per-cell standard errors.
double sae_se(std::span<const double> cell_ses);

/// Logistic helpers shared with the baselines.
double logit(double p);
double expit(double x);

}  // namespace cel::estimators
