#include "cel/tbehrt/losses.hpp"

#include <cmath>

#include "cel/errors.hpp"

namespace cel::tbehrt {

namespace {

double bce(double p, int label) { return label == 1 ? -std::log(p) : -std::log(1.0 - p); }

// d BCE / d logit, zero where the probability was clipped.
double bce_logit_grad(double logit, int label) {
  const double raw = 1.0 / (1.0 + std::exp(-logit));
  if (raw < kProbFloor || raw > kProbCeil) return 0.0;
  return raw - label;
}

Vector log_softmax(const Vector& logits) {
  const double mx = logits.maxCoeff();
  const double lse = mx + std::log((logits.array() - mx).exp().sum());
  return logits.array() - lse;
}

void check_label(int label, Eigen::Index classes, const char* what) {
  if (label < 0 || label >= classes) {
    throw ValidationError(std::string(what) + " label " + std::to_string(label) + " out of range");
  }
}

double mem_temp_impl(const Matrix& logits, std::span<const int> labels, Matrix* dlogits, double scale) {
  if (static_cast<std::size_t>(logits.rows()) != labels.size()) {
    throw ValidationError("loss_mem_temp: one label per logit row required");
  }
  if (labels.empty()) return 0.0;
  const double inv = 1.0 / static_cast<double>(labels.size());
  if (dlogits) dlogits->setZero(logits.rows(), logits.cols());
  double loss = 0.0;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    const auto row = static_cast<Eigen::Index>(r);
    check_label(labels[r], logits.cols(), "MEM");
    const Vector lp = log_softmax(logits.row(row));
    loss -= lp[labels[r]];
    if (dlogits) {
      dlogits->row(row) = lp.array().exp() * (scale * inv);
      (*dlogits)(row, labels[r]) -= scale * inv;
    }
  }
  return loss * inv;
}

double mem_static_impl(const VaeOutput& vae, const std::array<int, kNumStatics>& static_labels, OutputGrads* g,
                       double scale) {
  int n_masked = 0;
  for (int l : static_labels) n_masked += l != kNoLabel;
  double rec = 0.0;
  for (std::size_t v = 0; v < kNumStatics; ++v) {
    if (g) g->recon_logits[v] = Vector::Zero(vae.recon_logits[v].size());
    const int label = static_labels[v];
    if (label == kNoLabel) continue;
    check_label(label, vae.recon_logits[v].size(), "static");
    const Vector lp = log_softmax(vae.recon_logits[v]);
    rec -= lp[label] / n_masked;
    if (g) {
      g->recon_logits[v] = lp.array().exp() * (scale / n_masked);
      g->recon_logits[v][label] -= scale / n_masked;
    }
  }
  if (g) {
    g->vae_mean = vae.mean * scale;
    g->vae_logvar = 0.5 * scale * (vae.logvar.array().exp() - 1.0);
  }
  return rec + kl_divergence(vae.mean, vae.logvar);
}

}  // namespace

double loss_supervised(const ForwardOutput& out, int t, int y, bool propensity) {
  double loss = bce(t == 1 ? out.q1 : out.q0, y);
  if (propensity) loss += bce(out.g, t);
  return loss;
}

double loss_mem_temp(const Matrix& mem_logits, std::span<const int> labels) {
  return mem_temp_impl(mem_logits, labels, nullptr, 1.0);
}

double kl_divergence(const Vector& mean, const Vector& logvar) {
  return 0.5 * (mean.array().square() + logvar.array().exp() - 1.0 - logvar.array()).sum();
}

double loss_mem_static(const VaeOutput& vae, const std::array<int, kNumStatics>& static_labels) {
  return mem_static_impl(vae, static_labels, nullptr, 1.0);
}

double loss_total(double supervised, double mem_temp, double mem_static, double delta) {
  return supervised + delta * (mem_temp + mem_static);
}

LossParts patient_loss(const ForwardOutput& out, const PatientTargets& targets, const LossWeights& weights,
                       OutputGrads* grads, double scale) {
  LossParts parts;
  parts.supervised = loss_supervised(out, targets.t, targets.y, weights.propensity);
  if (grads) {
    *grads = OutputGrads{};
    const double dq = scale * bce_logit_grad(targets.t == 1 ? out.q1_logit : out.q0_logit, targets.y);
    (targets.t == 1 ? grads->q1_logit : grads->q0_logit) = dq;
    if (weights.propensity) grads->g_logit = scale * bce_logit_grad(out.g_logit, targets.t);
  }
  if (weights.mem_active()) {
    const double s = scale * weights.delta;
    parts.mem_temp = mem_temp_impl(out.mem_logits, targets.mem_labels, grads ? &grads->mem_logits : nullptr, s);
    if (out.vae) parts.mem_static = mem_static_impl(*out.vae, targets.static_labels, grads, s);
    parts.total = loss_total(parts.supervised, parts.mem_temp, parts.mem_static, weights.delta);
  } else {
    parts.total = parts.supervised;
  }
  return parts;
}

LossParts pretrain_loss(const ForwardOutput& out, const PatientTargets& targets, OutputGrads* grads, double scale) {
  LossParts parts;
  if (grads) *grads = OutputGrads{};
  parts.mem_temp = mem_temp_impl(out.mem_logits, targets.mem_labels, grads ? &grads->mem_logits : nullptr, scale);
  if (out.vae) parts.mem_static = mem_static_impl(*out.vae, targets.static_labels, grads, scale);
  parts.total = parts.mem_temp + parts.mem_static;
  return parts;
}

}  // namespace cel::tbehrt
