#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cel/cohort.hpp"
#include "cel/estimators.hpp"
#include "cel/tbehrt/config.hpp"
#include "cel/tbehrt/losses.hpp"
#include "cel/tbehrt/masking.hpp"
#include "cel/tbehrt/network.hpp"
#include "cel/tbehrt/params.hpp"

namespace cel::tbehrt {

/// Adam with bias correction; the learning rate is supplied per step.
class Adam {
 public:
  Adam(const ModelParams& like, const ModelConfig& cfg);
  void step(ModelParams& params, const ModelParams& grads, double learning_rate);
  int steps() const { return t_; }

 private:
  ModelParams m_, v_;
  double beta1_, beta2_, eps_;
  int t_ = 0;
};

/// Counts of withheld information reaching the network. Both hit counts must
/// stay zero when withholding is configured.
struct InputAudit {
  std::size_t sequences = 0;
  std::size_t withheld_code_hits = 0;
  std::size_t withheld_static_hits = 0;

  bool clean() const { return withheld_code_hits == 0 && withheld_static_hits == 0; }
};

void audit_input(const EncodedSequence& seq, const EncodeOptions& withheld, InputAudit& audit);

struct TrainingExample {
  const EncodedSequence* seq = nullptr;
  int t = 0;
  int y = 0;
};

/// Batch-mean loss with dropout on. MEM masking and VAE sampling happen only
/// when the MEM terms are active (or when `pretrain` is set, which replaces
/// the objective by the MEM terms alone), so the random stream consumed by
/// modes without MEM is the same. Gradients are added to `grads` if given.
LossParts batch_loss(const ModelParams& params, const ModelConfig& cfg, std::span<const TrainingExample> batch,
                     const LossWeights& weights, const ReplacementPools& pools, Rng& rng, ModelParams* grads = nullptr,
                     bool pretrain = false, const EncodeOptions* withheld = nullptr, InputAudit* audit = nullptr);

struct EpochLog {
  /// -1 for the pretraining phase.
  int fold = -1;
  int epoch = 0;
  LossParts mean;
};

struct FitOptions {
  FitMode mode = FitMode::t_behrt;
  int k_folds = 5;
  std::uint64_t fold_seed = 0;
  /// Withholding applied when encoding every patient.
  EncodeOptions encode;
  /// Preassigned folds (one per patient); drawn with kfold_split when empty.
  std::vector<int> folds;
  std::optional<std::chrono::steady_clock::time_point> deadline;
  std::function<void(const EpochLog&)> on_epoch;
};

struct FitResult {
  std::vector<ModelParams> fold_params;
  /// Held-out predictions in cohort order.
  std::vector<estimators::PredictionTriple> predictions;
  std::vector<int> folds;
  std::vector<EpochLog> log;
  /// True when every prediction came from parameters never trained on it.
  bool out_of_fold_ok = false;
  InputAudit input_audit;
  EncodeDiagnostics encode_diagnostics;
};

/// Epoch count and per-epoch learning-rate decay for one training phase of
/// `base_epochs` nominal epochs over `n_examples`. Raised to cfg.min_steps
/// optimizer steps when the cohort is small; 0 nominal epochs stays 0.
struct EpochSchedule {
  int epochs = 0;
  double decay = 1.0;
};
EpochSchedule epoch_schedule(int base_epochs, std::size_t n_examples, const ModelConfig& cfg);

/// MEM pretraining on the whole cohort (modes with MEM), then k-fold joint
/// training; each patient is predicted by the model of the fold that held it
/// out, with dropout off and an unmasked sequence. Deterministic in
/// cfg.seed and options. Throws NumericError on a non-finite loss and
/// TimeoutError past the deadline.
FitResult fit(const Cohort& cohort, const ModelConfig& cfg, const FitOptions& options);

/// Clean-sequence predictions for a set of patients.
std::vector<estimators::PredictionTriple> predict(const ModelParams& params, const ModelConfig& cfg,
                                                  const Cohort& cohort, std::span<const std::size_t> indices,
                                                  int fold, const EncodeOptions& encode = {});

/// Encode options that withhold a confounder: drops a code group or blanks a
/// static variable ("sex", "smoking", "region").
EncodeOptions withhold_confounder(const Vocabulary& vocab, bool transient, const std::string& definition);

}  // namespace cel::tbehrt
