#include "cel/logreg.hpp"

#include <cmath>

#include "cel/errors.hpp"
#include "cel/estimators.hpp"

namespace cel::baselines {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using estimators::expit;

namespace {

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double penalty_value(const VectorXd& w, Penalty penalty) {
  switch (penalty.kind) {
    case PenaltyKind::none:
      return 0.0;
    case PenaltyKind::l1:
      return penalty.lambda * w.lpNorm<1>();
    case PenaltyKind::l2:
      return 0.5 * penalty.lambda * w.squaredNorm();
  }
  return 0.0;
}

VectorXd to_vector(std::span<const int> labels) {
  VectorXd y(static_cast<Eigen::Index>(labels.size()));
  for (std::size_t i = 0; i < labels.size(); ++i) y[static_cast<Eigen::Index>(i)] = labels[i];
  return y;
}

double soft_threshold(double z, double gamma) {
  if (z > gamma) return z - gamma;
  if (z < -gamma) return z + gamma;
  return 0.0;
}

// Per-row KKT violation of the L1 problem; the gradient itself otherwise.
double optimality_gap(const VectorXd& grad_w, double grad_b, const VectorXd& w, Penalty penalty, double n) {
  double gap = std::abs(grad_b);
  for (Eigen::Index j = 0; j < w.size(); ++j) {
    double v;
    if (penalty.kind == PenaltyKind::l1) {
      if (w[j] > 0) {
        v = std::abs(grad_w[j] + penalty.lambda);
      } else if (w[j] < 0) {
        v = std::abs(grad_w[j] - penalty.lambda);
      } else {
        v = std::max(0.0, std::abs(grad_w[j]) - penalty.lambda);
      }
    } else {
      v = std::abs(grad_w[j] + (penalty.kind == PenaltyKind::l2 ? penalty.lambda * w[j] : 0.0));
    }
    gap = std::max(gap, v);
  }
  return gap / n;
}

}  // namespace

std::string to_string(PenaltyKind k) {
  switch (k) {
    case PenaltyKind::none:
      return "none";
    case PenaltyKind::l1:
      return "l1";
    case PenaltyKind::l2:
      return "l2";
  }
  return "none";
}

double penalized_objective(double intercept, const VectorXd& weights, const MatrixXd& x, std::span<const int> labels,
                           Penalty penalty) {
  double nll = 0.0;
  const VectorXd eta = (x * weights).array() + intercept;
  for (Eigen::Index i = 0; i < eta.size(); ++i) {
    nll += labels[static_cast<std::size_t>(i)] ? softplus(-eta[i]) : softplus(eta[i]);
  }
  return nll + penalty_value(weights, penalty);
}

VectorXd predict_proba(const LogRegModel& model, const MatrixXd& x) {
  VectorXd eta = (x * model.weights).array() + model.intercept;
  return eta.unaryExpr([](double v) { return expit(v); });
}

LogRegModel fit_logreg(const MatrixXd& x, std::span<const int> labels, Penalty penalty, const LogRegOptions& options) {
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  if (n == 0 || static_cast<std::size_t>(n) != labels.size()) throw ValidationError("fit_logreg: shape mismatch");
  if (!x.allFinite()) throw ValidationError("fit_logreg: non-finite covariates");
  if (penalty.lambda < 0 || !std::isfinite(penalty.lambda)) throw ValidationError("fit_logreg: lambda must be >= 0");
  for (int l : labels) {
    if (l != 0 && l != 1) throw ValidationError("fit_logreg: labels must be binary");
  }
  const VectorXd y = to_vector(labels);
  const double nd = static_cast<double>(n);

  LogRegModel model;
  model.penalty = penalty;
  model.weights = VectorXd::Zero(d);
  const double ybar = y.mean();
  if (ybar <= 0.0 || ybar >= 1.0) {
    throw NumericError("fit_logreg: labels are constant; the intercept diverges");
  }
  model.intercept = std::log(ybar) - std::log1p(-ybar);

  auto objective = [&](double b, const VectorXd& w) { return penalized_objective(b, w, x, labels, penalty); };

  double f = objective(model.intercept, model.weights);
  for (int it = 0; it < options.max_iterations; ++it) {
    model.iterations = it;
    const VectorXd eta = (x * model.weights).array() + model.intercept;
    const VectorXd p = eta.unaryExpr([](double v) { return expit(v); });
    const VectorXd resid = p - y;
    const VectorXd grad_w = x.transpose() * resid;
    const double grad_b = resid.sum();
    if (optimality_gap(grad_w, grad_b, model.weights, penalty, nd) < options.tolerance) {
      if (penalty.kind == PenaltyKind::none && (p - y).cwiseAbs().maxCoeff() < 1e-4) {
        throw NumericError("fit_logreg: data are separable; unpenalized weights diverge (use an L1 or L2 penalty)");
      }
      return model;
    }
    const VectorXd wts = p.array() * (1.0 - p.array());

    double new_b;
    VectorXd new_w;
    if (penalty.kind != PenaltyKind::l1) {
      MatrixXd xa(n, d + 1);
      xa.col(0).setOnes();
      xa.rightCols(d) = x;
      MatrixXd h = xa.transpose() * wts.asDiagonal() * xa;
      VectorXd g(d + 1);
      g[0] = grad_b;
      g.tail(d) = grad_w;
      if (penalty.kind == PenaltyKind::l2) {
        h.diagonal().tail(d).array() += penalty.lambda;
        g.tail(d) += penalty.lambda * model.weights;
      }
      // Minimum-norm step handles collinear columns (e.g. indicator sets
      // summing to the intercept).
      const VectorXd step = h.completeOrthogonalDecomposition().solve(g);
      new_b = model.intercept - step[0];
      new_w = model.weights - step.tail(d);
    } else {
      // One pass set of coordinate descent on the weighted least-squares
      // approximation around the current iterate.
      const VectorXd z = eta.array() + (y - p).array() / wts.array().max(1e-12);
      new_b = model.intercept;
      new_w = model.weights;
      VectorXd r = z - ((x * new_w).array() + new_b).matrix();
      const VectorXd col_scale = (x.array().square().colwise() * wts.array()).colwise().sum().transpose();
      for (int sweep = 0; sweep < 1000; ++sweep) {
        double max_change = 0.0;
        const double db = r.dot(wts) / wts.sum();
        new_b += db;
        r.array() -= db;
        max_change = std::max(max_change, std::abs(db));
        for (Eigen::Index j = 0; j < d; ++j) {
          if (col_scale[j] <= 0.0) continue;
          const double old = new_w[j];
          const double rho = (x.col(j).array() * wts.array() * r.array()).sum() + col_scale[j] * old;
          const double next = soft_threshold(rho, penalty.lambda) / col_scale[j];
          if (next != old) {
            r -= (next - old) * x.col(j);
            new_w[j] = next;
            max_change = std::max(max_change, std::abs(next - old));
          }
        }
        if (max_change < 1e-14) break;
      }
    }

    // Backtracking on the exact objective keeps every iterate a descent step.
    double s = 1.0;
    double b_try = new_b;
    VectorXd w_try = new_w;
    double f_try = objective(b_try, w_try);
    for (int bt = 0; bt < 50 && !(f_try <= f); ++bt) {
      s *= 0.5;
      b_try = model.intercept + s * (new_b - model.intercept);
      w_try = model.weights + s * (new_w - model.weights);
      f_try = objective(b_try, w_try);
    }
    if (!std::isfinite(f_try)) throw NumericError("fit_logreg: objective became non-finite");
    const bool stalled = (b_try == model.intercept) && (w_try == model.weights);
    model.intercept = b_try;
    model.weights = w_try;
    f = f_try;
    if (stalled) break;
  }

  const VectorXd eta = (x * model.weights).array() + model.intercept;
  const VectorXd p = eta.unaryExpr([](double v) { return expit(v); });
  const VectorXd resid = p - y;
  const double gap = optimality_gap(x.transpose() * resid, resid.sum(), model.weights, penalty, nd);
  if (gap < options.tolerance * 10.0) return model;
  std::string advice = penalty.kind == PenaltyKind::none ? " (data may be separable; use an L1 or L2 penalty)" : "";
  throw NumericError("fit_logreg: no convergence after " + std::to_string(options.max_iterations) +
                     " iterations, gradient gap " + std::to_string(gap) + advice);
}

}  // namespace cel::baselines
