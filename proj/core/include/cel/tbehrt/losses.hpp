#pragma once

#include <array>
#include <span>

#include "cel/tbehrt/config.hpp"
#include "cel/tbehrt/network.hpp"

namespace cel::tbehrt {

/// Factual outcome cross-entropy, plus the propensity cross-entropy when
/// `propensity` is set.
double loss_supervised(const ForwardOutput& out, int t, int y, bool propensity = true);

/// Mean categorical cross-entropy over rows of `mem_logits`; `labels[r]` is
/// the true code of row r. Zero for no rows.
double loss_mem_temp(const Matrix& mem_logits, std::span<const int> labels);

/// KL(N(mean, exp(logvar)) || N(0, I)).
double kl_divergence(const Vector& mean, const Vector& logvar);

/// Mean reconstruction cross-entropy over masked statics plus the KL term.
double loss_mem_static(const VaeOutput& vae, const std::array<int, kNumStatics>& static_labels);

/// supervised + delta * (mem_temp + mem_static).
double loss_total(double supervised, double mem_temp, double mem_static, double delta);

struct LossParts {
  double supervised = 0.0;
  double mem_temp = 0.0;
  double mem_static = 0.0;
  double total = 0.0;
};

struct PatientTargets {
  int t = 0;
  int y = 0;
  /// Labels aligned with ForwardOutput::mem_slots.
  std::vector<int> mem_labels;
  std::array<int, kNumStatics> static_labels{kNoLabel, kNoLabel, kNoLabel};
};

/// Loss of one patient under `weights`. When `grads` is given it receives
/// `scale` times the gradient with respect to the forward outputs.
LossParts patient_loss(const ForwardOutput& out, const PatientTargets& targets, const LossWeights& weights,
                       OutputGrads* grads = nullptr, double scale = 1.0);

/// MEM-only objective used for pretraining: mem_temp + mem_static.
LossParts pretrain_loss(const ForwardOutput& out, const PatientTargets& targets, OutputGrads* grads = nullptr,
                        double scale = 1.0);

}  // namespace cel::tbehrt
