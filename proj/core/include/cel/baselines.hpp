#pragma once

#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "cel/cohort.hpp"
#include "cel/estimators.hpp"
#include "cel/logreg.hpp"

namespace cel::baselines {

/// Variables kept out of the covariate set.
struct FeatureOptions {
  bool withhold_sex = false;
  bool withhold_smoking = false;
  std::set<std::string> withhold_groups;
};

/// Covariate matrix plus the column manifest. Region is dummy coded against
/// level 0 so the design is not collinear with the intercept.
struct TabularFeatures {
  Eigen::MatrixXd x;
  std::vector<std::string> columns;
  double age_min = 0.0;
  double age_max = 0.0;
};

/// Baseline age is the age at the last recorded encounter (0 with no history),
/// min-max scaled over the cohort; a constant age column is all zeros.
TabularFeatures build_features(const Cohort& cohort, const FeatureOptions& options = {});

nlohmann::json feature_manifest(const TabularFeatures& f);

/// Appends the exposure column used by the outcome model.
Eigen::MatrixXd with_exposure(const Eigen::MatrixXd& x, std::span<const int> t);

/// Cross-fitted outcome (covariates + t) and propensity (covariates) logistic
/// regressions. Every triple comes from models fit on the other folds.
std::vector<estimators::PredictionTriple> lr_cross_fit(const Cohort& cohort, std::span<const int> folds,
                                                       Penalty penalty, const FeatureOptions& options = {});

/// Plug-in RR from cross-fitted LR: method "lr", "lr-l1" or "lr-l2".
estimators::EstimateReport lr_plugin(const Cohort& cohort, std::span<const int> folds, Penalty penalty,
                                     const FeatureOptions& options = {});

/// LR outcome and propensity models, fold-wise TMLE, fold-spread interval.
estimators::EstimateReport lr_tmle(const Cohort& cohort, std::span<const int> folds,
                                   const FeatureOptions& options = {});
estimators::EstimateReport lr_tmle(const Cohort& cohort, int k_folds = 5, std::uint64_t seed = 0,
                                   const FeatureOptions& options = {});

/// Clip used for every probability handed to the estimators.
inline constexpr double kProbClip = 1e-6;

}  // namespace cel::baselines
