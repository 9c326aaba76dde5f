#include "cel/baselines.hpp"

#include <algorithm>
#include <map>

#include "cel/errors.hpp"
#include "cel/folds.hpp"

namespace cel::baselines {

using Eigen::MatrixXd;
using estimators::PredictionTriple;

namespace {

double clip(double p) { return std::clamp(p, kProbClip, 1.0 - kProbClip); }

std::string method_name(Penalty penalty) {
  switch (penalty.kind) {
    case PenaltyKind::none:
      return "lr";
    case PenaltyKind::l1:
      return "lr-l1";
    case PenaltyKind::l2:
      return "lr-l2";
  }
  return "lr";
}

MatrixXd select_rows(const MatrixXd& x, const std::vector<Eigen::Index>& rows) {
  MatrixXd out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = x.row(rows[r]);
  return out;
}

}  // namespace

TabularFeatures build_features(const Cohort& cohort, const FeatureOptions& options) {
  const auto& patients = cohort.patients;
  if (patients.empty()) throw ValidationError("build_features: empty cohort");
  const auto& vocab = cohort.vocabulary;
  if (vocab.groups().empty()) throw ValidationError("build_features: vocabulary has no groups");

  int n_regions = 1;
  for (const auto& p : patients) n_regions = std::max(n_regions, p.statics.region + 1);

  TabularFeatures f;
  f.columns.push_back("age");
  if (!options.withhold_sex) f.columns.push_back("sex");
  for (int r = 1; r < n_regions; ++r) f.columns.push_back("region_" + std::to_string(r));
  if (!options.withhold_smoking) f.columns.push_back("smoking");
  std::vector<int> group_column(vocab.groups().size(), -1);
  int gid = 0;
  for (const auto& name : vocab.group_names()) {
    if (!options.withhold_groups.count(name)) {
      group_column[static_cast<std::size_t>(gid)] = static_cast<int>(f.columns.size());
      f.columns.push_back("group:" + name);
    }
    ++gid;
  }

  std::vector<double> ages(patients.size());
  for (std::size_t i = 0; i < patients.size(); ++i) {
    ages[i] = patients[i].encounters.empty() ? 0.0 : patients[i].encounters.back().age;
  }
  f.age_min = *std::min_element(ages.begin(), ages.end());
  f.age_max = *std::max_element(ages.begin(), ages.end());
  const double span = f.age_max - f.age_min;

  // Token -> column lookup for group indicators.
  std::vector<int> token_column(vocab.size(), -1);
  for (std::size_t tok = 0; tok < vocab.size(); ++tok) {
    const int g = vocab.group_of(static_cast<int>(tok));
    if (g >= 0) token_column[tok] = group_column[static_cast<std::size_t>(g)];
  }

  f.x = MatrixXd::Zero(static_cast<Eigen::Index>(patients.size()), static_cast<Eigen::Index>(f.columns.size()));
  for (std::size_t i = 0; i < patients.size(); ++i) {
    const auto& p = patients[i];
    const auto row = static_cast<Eigen::Index>(i);
    Eigen::Index col = 0;
    f.x(row, col++) = span > 0 ? (ages[i] - f.age_min) / span : 0.0;
    if (!options.withhold_sex) f.x(row, col++) = p.statics.sex;
    for (int r = 1; r < n_regions; ++r) f.x(row, col++) = p.statics.region == r ? 1.0 : 0.0;
    if (!options.withhold_smoking) f.x(row, col++) = p.statics.smoking;
    for (const auto& e : p.encounters) {
      if (!vocab.contains(e.code)) continue;
      const int c = token_column[static_cast<std::size_t>(e.code)];
      if (c >= 0) f.x(row, c) = 1.0;
    }
  }
  return f;
}

nlohmann::json feature_manifest(const TabularFeatures& f) {
  return {{"columns", f.columns}, {"age_scaling", {{"min", f.age_min}, {"max", f.age_max}}}};
}

MatrixXd with_exposure(const MatrixXd& x, std::span<const int> t) {
  if (static_cast<std::size_t>(x.rows()) != t.size()) throw ValidationError("with_exposure: row mismatch");
  MatrixXd out(x.rows(), x.cols() + 1);
  out.leftCols(x.cols()) = x;
  for (Eigen::Index i = 0; i < x.rows(); ++i) out(i, x.cols()) = t[static_cast<std::size_t>(i)];
  return out;
}

std::vector<PredictionTriple> lr_cross_fit(const Cohort& cohort, std::span<const int> folds, Penalty penalty,
                                           const FeatureOptions& options) {
  const auto& patients = cohort.patients;
  if (folds.size() != patients.size()) throw ValidationError("lr_cross_fit: one fold label per patient required");
  const TabularFeatures feats = build_features(cohort, options);
  std::vector<int> t(patients.size()), y(patients.size());
  for (std::size_t i = 0; i < patients.size(); ++i) {
    t[i] = patients[i].t;
    y[i] = patients[i].y;
  }
  std::map<int, std::vector<Eigen::Index>> members;
  for (std::size_t i = 0; i < folds.size(); ++i) members[folds[i]].push_back(static_cast<Eigen::Index>(i));

  std::vector<PredictionTriple> out(patients.size());
  for (const auto& [fold, test_rows] : members) {
    std::vector<Eigen::Index> train_rows;
    for (std::size_t i = 0; i < folds.size(); ++i) {
      if (folds[i] != fold) train_rows.push_back(static_cast<Eigen::Index>(i));
    }
    const MatrixXd x_train = select_rows(feats.x, train_rows);
    std::vector<int> t_train, y_train;
    for (auto r : train_rows) {
      t_train.push_back(t[static_cast<std::size_t>(r)]);
      y_train.push_back(y[static_cast<std::size_t>(r)]);
    }
    const LogRegModel outcome = fit_logreg(with_exposure(x_train, t_train), y_train, penalty);
    const LogRegModel propensity = fit_logreg(x_train, t_train, penalty);

    const MatrixXd x_test = select_rows(feats.x, test_rows);
    const std::vector<int> ones(test_rows.size(), 1), zeros(test_rows.size(), 0);
    const Eigen::VectorXd q1 = predict_proba(outcome, with_exposure(x_test, ones));
    const Eigen::VectorXd q0 = predict_proba(outcome, with_exposure(x_test, zeros));
    const Eigen::VectorXd g = predict_proba(propensity, x_test);
    for (std::size_t r = 0; r < test_rows.size(); ++r) {
      const auto i = static_cast<std::size_t>(test_rows[r]);
      const auto ri = static_cast<Eigen::Index>(r);
      out[i] = PredictionTriple{patients[i].id, fold, clip(q0[ri]), clip(q1[ri]), clip(g[ri]), t[i], y[i]};
    }
  }
  return out;
}

estimators::EstimateReport lr_plugin(const Cohort& cohort, std::span<const int> folds, Penalty penalty,
                                     const FeatureOptions& options) {
  auto report = estimators::naive_rr(lr_cross_fit(cohort, folds, penalty, options));
  report.method = method_name(penalty);
  return report;
}

estimators::EstimateReport lr_tmle(const Cohort& cohort, std::span<const int> folds, const FeatureOptions& options) {
  auto report = estimators::foldwise_tmle_rr(lr_cross_fit(cohort, folds, Penalty{}, options));
  report.method = "lr-tmle";
  return report;
}

estimators::EstimateReport lr_tmle(const Cohort& cohort, int k_folds, std::uint64_t seed,
                                   const FeatureOptions& options) {
  std::vector<int> t(cohort.patients.size());
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = cohort.patients[i].t;
  const auto folds = kfold_split(t, k_folds, seed);
  return lr_tmle(cohort, folds, options);
}

}  // namespace cel::baselines
