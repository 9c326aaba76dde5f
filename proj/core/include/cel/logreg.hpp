#pragma once

#include <span>
#include <string>

#include <Eigen/Dense>

namespace cel::baselines {

enum class PenaltyKind { none, l1, l2 };

struct Penalty {
  PenaltyKind kind = PenaltyKind::none;
  double lambda = 1.0;
};

std::string to_string(PenaltyKind k);

struct LogRegModel {
  Eigen::VectorXd weights;
  double intercept = 0.0;
  Penalty penalty;
  int iterations = 0;
};

struct LogRegOptions {
  int max_iterations = 200;
  /// Convergence threshold on the infinity norm of the per-row gradient
  /// (for L1: the per-row KKT violation).
  double tolerance = 1e-8;
};

/// Minimizes  -sum_i loglik_i + pen(w)  with pen = lambda*|w|_1 (L1) or
/// lambda/2*|w|^2 (L2). The intercept is never penalized. Plain and L2 fits
/// use damped Newton; L1 uses coordinate descent on the IRLS quadratic.
/// Unpenalized fits on separable data throw NumericError.
LogRegModel fit_logreg(const Eigen::MatrixXd& x, std::span<const int> labels, Penalty penalty,
                       const LogRegOptions& options = {});

Eigen::VectorXd predict_proba(const LogRegModel& model, const Eigen::MatrixXd& x);

/// The minimized objective at (intercept, weights).
double penalized_objective(double intercept, const Eigen::VectorXd& weights, const Eigen::MatrixXd& x,
                           std::span<const int> labels, Penalty penalty);

}  // namespace cel::baselines
