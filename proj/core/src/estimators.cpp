#include "cel/estimators.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "cel/errors.hpp"

namespace cel::estimators {

using nlohmann::json;

namespace {

constexpr double kZ95 = 1.96;
constexpr double kMinDenominator = 1e-12;

std::map<int, std::vector<PredictionTriple>> by_fold(std::span<const PredictionTriple> preds) {
  std::map<int, std::vector<PredictionTriple>> folds;
  for (const auto& p : preds) folds[p.fold].push_back(p);
  return folds;
}

void check_probabilities(std::span<const PredictionTriple> preds) {
  for (const auto& p : preds) {
    if (!(p.q0 > 0 && p.q0 < 1 && p.q1 > 0 && p.q1 < 1 && p.g > 0 && p.g < 1)) {
      throw EstimationError("prediction for '" + p.patient_id + "' has a probability outside (0,1)");
    }
    if ((p.t != 0 && p.t != 1) || (p.y != 0 && p.y != 1)) {
      throw EstimationError("prediction for '" + p.patient_id + "' has non-binary t or y");
    }
  }
}

// Submodel pieces for one patient: offset and clever covariate of its factual arm.
struct ArmTerm {
  double offset;
  double covariate;
  int y;
};

// Score, information and log-likelihood of one arm's 1-D fluctuation.
struct ArmEval {
  double loglik = 0.0;
  double score = 0.0;
  double info = 0.0;
};

double log_expit(double x) { return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); }

ArmEval eval_arm(const std::vector<ArmTerm>& terms, double eps) {
  ArmEval e;
  for (const auto& a : terms) {
    const double eta = a.offset + eps * a.covariate;
    const double p = expit(eta);
    e.loglik += a.y ? log_expit(eta) : log_expit(-eta);
    e.score += a.covariate * (a.y - p);
    e.info += a.covariate * a.covariate * p * (1.0 - p);
  }
  return e;
}

double golden_section_max(const std::vector<ArmTerm>& terms, double lo, double hi) {
  const double ratio = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = lo, b = hi;
  double c = b - ratio * (b - a), d = a + ratio * (b - a);
  double fc = eval_arm(terms, c).loglik, fd = eval_arm(terms, d).loglik;
  for (int i = 0; i < 200 && b - a > 1e-12; ++i) {
    if (fc > fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - ratio * (b - a);
      fc = eval_arm(terms, c).loglik;
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + ratio * (b - a);
      fd = eval_arm(terms, d).loglik;
    }
  }
  return 0.5 * (a + b);
}

}  // namespace

double logit(double p) { return std::log(p) - std::log1p(-p); }

double expit(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

json to_json(const EstimateReport& r) {
  json j = {{"method", r.method},     {"rr", r.rr}, {"ci_low", r.ci_low},       {"ci_high", r.ci_high},
            {"interval_kind", r.interval_kind}, {"se", r.se}, {"per_fold", r.per_fold}, {"n_trimmed", r.n_trimmed}};
  if (r.eps) j["eps"] = {{"eps0", r.eps->eps0}, {"eps1", r.eps->eps1}};
  if (r.alt_ci) j["alt_ci"] = {{"low", r.alt_ci->low}, {"high", r.alt_ci->high}, {"kind", r.alt_ci->kind}};
  return j;
}

EstimateReport estimate_report_from_json(const json& j) {
  EstimateReport r;
  r.method = j.at("method").get<std::string>();
  r.rr = j.at("rr").get<double>();
  r.ci_low = j.at("ci_low").get<double>();
  r.ci_high = j.at("ci_high").get<double>();
  r.interval_kind = j.at("interval_kind").get<std::string>();
  r.se = j.at("se").get<double>();
  r.per_fold = j.at("per_fold").get<std::vector<double>>();
  r.n_trimmed = j.at("n_trimmed").get<std::size_t>();
  if (j.contains("eps")) r.eps = FluctuationEps{j["eps"].at("eps0").get<double>(), j["eps"].at("eps1").get<double>()};
  if (j.contains("alt_ci")) {
    r.alt_ci = Interval{j["alt_ci"].at("low").get<double>(), j["alt_ci"].at("high").get<double>(),
                        j["alt_ci"].at("kind").get<std::string>()};
  }
  return r;
}

TrimResult trim(std::span<const PredictionTriple> preds) {
  TrimResult out;
  out.kept.reserve(preds.size());
  for (const auto& p : preds) {
    if (p.g >= kTrimLow && p.g <= kTrimHigh) {
      out.kept.push_back(p);
    } else {
      ++out.n_trimmed;
    }
  }
  if (out.kept.empty()) throw EstimationError("propensity trimming removed every patient");
  return out;
}

FoldCi fold_ci(std::span<const double> per_fold) {
  const std::size_t k = per_fold.size();
  if (k < 2) throw EstimationError("fold_ci needs at least two folds");
  double mean = 0.0;
  for (double v : per_fold) mean += v;
  mean /= static_cast<double>(k);
  double ss = 0.0;
  for (double v : per_fold) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / static_cast<double>(k - 1));
  const double se = sd / std::sqrt(static_cast<double>(k));
  return {mean, mean - kZ95 * se, mean + kZ95 * se, se};
}

double ratio_of_means(std::span<const PredictionTriple> preds) {
  if (preds.empty()) throw EstimationError("ratio of means over an empty set");
  double s1 = 0.0, s0 = 0.0;
  for (const auto& p : preds) {
    s1 += p.q1;
    s0 += p.q0;
  }
  const double n = static_cast<double>(preds.size());
  if (s0 / n < kMinDenominator) throw EstimationError("mean control risk is numerically zero");
  return (s1 / n) / (s0 / n);
}

EstimateReport naive_rr(std::span<const PredictionTriple> preds) {
  if (preds.empty()) throw EstimationError("naive_rr needs predictions");
  EstimateReport r;
  r.method = "naive";
  for (const auto& [fold, members] : by_fold(preds)) r.per_fold.push_back(ratio_of_means(members));
  if (r.per_fold.size() >= 2) {
    const FoldCi ci = fold_ci(r.per_fold);
    r.rr = ci.mean;
    r.ci_low = ci.ci_low;
    r.ci_high = ci.ci_high;
    r.se = ci.se;
    r.interval_kind = "fold-spread";
  } else {
    r.rr = r.per_fold.front();
    r.ci_low = r.ci_high = r.rr;
    r.se = 0.0;
    r.interval_kind = "single-fold";
  }
  return r;
}

double fluctuation_loglik(std::span<const PredictionTriple> preds, double eps0, double eps1) {
  double ll = 0.0;
  for (const auto& p : preds) {
    const double eta = p.t == 1 ? logit(p.q1) + eps1 / p.g : logit(p.q0) + eps0 / (1.0 - p.g);
    ll += p.y ? log_expit(eta) : log_expit(-eta);
  }
  return ll;
}

TmleResult tmle_fluctuate(std::span<const PredictionTriple> preds, const TmleOptions& options) {
  check_probabilities(preds);
  // The clever covariates have disjoint support (treated vs control), so the
  // likelihood separates and the Hessian of the 2-D problem is diagonal.
  std::vector<ArmTerm> arm[2];
  for (const auto& p : preds) {
    if (p.t == 1) {
      arm[1].push_back({logit(p.q1), 1.0 / p.g, p.y});
    } else {
      arm[0].push_back({logit(p.q0), 1.0 / (1.0 - p.g), p.y});
    }
  }

  double eps[2] = {0.0, 0.0};
  TmleResult res;
  ArmEval cur[2] = {eval_arm(arm[0], 0.0), eval_arm(arm[1], 0.0)};
  bool converged = false;
  int it = 0;
  for (; it < options.max_iterations; ++it) {
    if (std::abs(cur[0].score) < options.score_tolerance && std::abs(cur[1].score) < options.score_tolerance) {
      converged = true;
      break;
    }
    const double hi = std::max(cur[0].info, cur[1].info);
    const double lo = std::min(cur[0].info, cur[1].info);
    const bool ill_conditioned = !arm[0].empty() && !arm[1].empty() && (lo <= 0.0 || hi / lo > 1e8);
    bool progressed = false;
    for (int a = 0; a < 2; ++a) {
      if (arm[a].empty() || std::abs(cur[a].score) < options.score_tolerance) continue;
      double next;
      if (ill_conditioned || cur[a].info <= 0.0) {
        const double span = 4.0 * (1.0 + std::abs(eps[a]));
        next = golden_section_max(arm[a], eps[a] - span, eps[a] + span);
      } else {
        double step = cur[a].score / cur[a].info;
        next = eps[a] + step;
        // Backtrack until the likelihood does not decrease.
        for (int b = 0; b < 60 && eval_arm(arm[a], next).loglik < cur[a].loglik; ++b) {
          step *= 0.5;
          next = eps[a] + step;
        }
      }
      if (next != eps[a]) progressed = true;
      eps[a] = next;
      cur[a] = eval_arm(arm[a], eps[a]);
    }
    if (!progressed) {
      // Newton step below floating-point resolution: at the optimum up to roundoff.
      converged = true;
      break;
    }
  }
  if (!converged) {
    const double gnorm = std::hypot(cur[0].score, cur[1].score);
    throw NumericError("TMLE fluctuation did not converge in " + std::to_string(options.max_iterations) +
                       " iterations (score norm " + std::to_string(gnorm) + ")");
  }

  res.eps = {eps[0], eps[1]};
  res.iterations = it;
  res.score0 = cur[0].score;
  res.score1 = cur[1].score;
  res.q0_star.reserve(preds.size());
  res.q1_star.reserve(preds.size());
  for (const auto& p : preds) {
    res.q0_star.push_back(expit(logit(p.q0) + eps[0] / (1.0 - p.g)));
    res.q1_star.push_back(expit(logit(p.q1) + eps[1] / p.g));
  }
  return res;
}

EstimateReport cv_tmle_rr(std::span<const PredictionTriple> preds, const TmleOptions& options) {
  if (preds.empty()) throw EstimationError("cv_tmle_rr needs predictions");
  const TrimResult trimmed = trim(preds);
  const auto& kept = trimmed.kept;
  const TmleResult fl = tmle_fluctuate(kept, options);

  std::vector<PredictionTriple> targeted = kept;
  for (std::size_t i = 0; i < kept.size(); ++i) {
    targeted[i].q0 = fl.q0_star[i];
    targeted[i].q1 = fl.q1_star[i];
  }

  EstimateReport r;
  r.method = "cv-tmle";
  r.n_trimmed = trimmed.n_trimmed;
  r.eps = fl.eps;
  r.rr = ratio_of_means(targeted);

  const double n = static_cast<double>(kept.size());
  double psi1 = 0.0, psi0 = 0.0;
  for (const auto& p : targeted) {
    psi1 += p.q1;
    psi0 += p.q0;
  }
  psi1 /= n;
  psi0 /= n;
  double sum = 0.0, sum_sq = 0.0;
  for (const auto& p : targeted) {
    const double ic1 = (p.t == 1 ? (p.y - p.q1) / p.g : 0.0) + p.q1 - psi1;
    const double ic0 = (p.t == 0 ? (p.y - p.q0) / (1.0 - p.g) : 0.0) + p.q0 - psi0;
    const double ic = ic1 / psi1 - ic0 / psi0;
    sum += ic;
    sum_sq += ic * ic;
  }
  const double var = n > 1 ? std::max(0.0, (sum_sq - sum * sum / n) / (n - 1.0)) : 0.0;
  const double se_log = std::sqrt(var / n);
  r.ci_low = std::exp(std::log(r.rr) - kZ95 * se_log);
  r.ci_high = std::exp(std::log(r.rr) + kZ95 * se_log);
  r.se = r.rr * se_log;
  r.interval_kind = "influence-curve";

  for (const auto& [fold, members] : by_fold(targeted)) r.per_fold.push_back(ratio_of_means(members));
  if (r.per_fold.size() >= 2) {
    const FoldCi ci = fold_ci(r.per_fold);
    r.alt_ci = Interval{ci.ci_low, ci.ci_high, "fold-spread"};
  }
  return r;
}

EstimateReport foldwise_tmle_rr(std::span<const PredictionTriple> preds, const TmleOptions& options) {
  if (preds.empty()) throw EstimationError("foldwise_tmle_rr needs predictions");
  EstimateReport r;
  r.method = "tmle";
  for (const auto& [fold, members] : by_fold(preds)) {
    const TrimResult trimmed = trim(members);
    r.n_trimmed += trimmed.n_trimmed;
    const TmleResult fl = tmle_fluctuate(trimmed.kept, options);
    std::vector<PredictionTriple> targeted = trimmed.kept;
    for (std::size_t i = 0; i < targeted.size(); ++i) {
      targeted[i].q0 = fl.q0_star[i];
      targeted[i].q1 = fl.q1_star[i];
    }
    r.per_fold.push_back(ratio_of_means(targeted));
  }
  if (r.per_fold.size() >= 2) {
    const FoldCi ci = fold_ci(r.per_fold);
    r.rr = ci.mean;
    r.ci_low = ci.ci_low;
    r.ci_high = ci.ci_high;
    r.se = ci.se;
    r.interval_kind = "fold-spread";
  } else {
    r.rr = r.ci_low = r.ci_high = r.per_fold.front();
    r.interval_kind = "single-fold";
  }
  return r;
}

double sae(std::span<const double> estimates, std::span<const double> truths) {
  if (estimates.size() != truths.size()) throw ValidationError("sae: estimates and truths differ in length");
  double s = 0.0;
  for (std::size_t i = 0; i < estimates.size(); ++i) s += std::abs(estimates[i] - truths[i]);
  return s;
}

double sae_se(std::span<const double> cell_ses) {
  double s = 0.0;
  for (double v : cell_ses) s += v * v;
  return std::sqrt(s);
}

}  // namespace cel::estimators
