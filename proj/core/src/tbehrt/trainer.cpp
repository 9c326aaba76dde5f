#include "cel/tbehrt/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "cel/errors.hpp"
#include "cel/folds.hpp"

namespace cel::tbehrt {

namespace {

std::vector<Matrix*> tensors(ModelParams& p) {
  std::vector<Matrix*> out;
  p.visit([&](const std::string&, Matrix& m) { out.push_back(&m); });
  return out;
}

std::vector<const Matrix*> tensors(const ModelParams& p) {
  std::vector<const Matrix*> out;
  p.visit([&](const std::string&, const Matrix& m) { out.push_back(&m); });
  return out;
}

void check_deadline(const FitOptions& o) {
  if (o.deadline && std::chrono::steady_clock::now() > *o.deadline) throw TimeoutError("fit exceeded its time budget");
}

void check_finite(const LossParts& p, int fold, int epoch, std::size_t batch) {
  if (std::isfinite(p.total)) return;
  std::ostringstream msg;
  msg << "non-finite loss at fold " << fold << " epoch " << epoch << " batch " << batch
      << " (supervised=" << p.supervised << ", mem_temp=" << p.mem_temp << ", mem_static=" << p.mem_static << ")";
  throw NumericError(msg.str());
}

void accumulate(LossParts& sum, const LossParts& add, double w) {
  sum.supervised += w * add.supervised;
  sum.mem_temp += w * add.mem_temp;
  sum.mem_static += w * add.mem_static;
  sum.total += w * add.total;
}

// One pass over `order` in minibatches; returns the sample-weighted mean loss.
LossParts run_epoch(ModelParams& params, Adam& adam, const ModelConfig& cfg, const std::vector<TrainingExample>& data,
                    std::vector<std::size_t> order, const LossWeights& weights, const ReplacementPools& pools,
                    bool pretrain, double lr, Rng& rng, const FitOptions& options, InputAudit& audit, int fold,
                    int epoch) {
  rng.shuffle(order);
  ModelParams grads = ModelParams::zeros_like(params);
  LossParts sum;
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  std::vector<TrainingExample> batch;
  for (std::size_t start = 0, b = 0; start < order.size(); start += bs, ++b) {
    check_deadline(options);
    batch.clear();
    for (std::size_t i = start; i < std::min(order.size(), start + bs); ++i) batch.push_back(data[order[i]]);
    grads.set_zero();
    const LossParts parts =
        batch_loss(params, cfg, batch, weights, pools, rng, &grads, pretrain, &options.encode, &audit);
    check_finite(parts, fold, epoch, b);
    adam.step(params, grads, lr);
    accumulate(sum, parts, static_cast<double>(batch.size()) / static_cast<double>(order.size()));
  }
  if (!params.all_finite()) {
    throw NumericError("non-finite parameters after fold " + std::to_string(fold) + " epoch " + std::to_string(epoch));
  }
  return sum;
}

}  // namespace

EpochSchedule epoch_schedule(int base_epochs, std::size_t n_examples, const ModelConfig& cfg) {
  EpochSchedule s{base_epochs, cfg.decay_rate};
  if (base_epochs <= 0 || n_examples == 0 || cfg.min_steps <= 0) return s;
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  const auto per_epoch = static_cast<int>((n_examples + bs - 1) / bs);
  const int needed = (cfg.min_steps + per_epoch - 1) / per_epoch;
  if (needed > base_epochs) {
    s.epochs = needed;
    // Same total decay as the nominal schedule, spread over more epochs.
    s.decay = std::pow(cfg.decay_rate, static_cast<double>(base_epochs) / needed);
  }
  return s;
}

Adam::Adam(const ModelParams& like, const ModelConfig& cfg)
    : m_(ModelParams::zeros_like(like)),
      v_(ModelParams::zeros_like(like)),
      beta1_(cfg.adam_beta1),
      beta2_(cfg.adam_beta2),
      eps_(cfg.adam_eps) {}

void Adam::step(ModelParams& params, const ModelParams& grads, double learning_rate) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, t_);
  const double c2 = 1.0 - std::pow(beta2_, t_);
  auto p = tensors(params);
  auto g = tensors(grads);
  auto m = tensors(m_);
  auto v = tensors(v_);
  for (std::size_t i = 0; i < p.size(); ++i) {
    *m[i] = beta1_ * *m[i] + (1.0 - beta1_) * *g[i];
    *v[i] = beta2_ * *v[i] + (1.0 - beta2_) * g[i]->cwiseAbs2();
    p[i]->array() -= learning_rate * (m[i]->array() / c1) / ((v[i]->array() / c2).sqrt() + eps_);
  }
}

void audit_input(const EncodedSequence& seq, const EncodeOptions& withheld, InputAudit& audit) {
  ++audit.sequences;
  for (int code : seq.codes) {
    const auto c = static_cast<std::size_t>(code);
    if (code >= 0 && c < withheld.drop_codes.size() && withheld.drop_codes[c]) ++audit.withheld_code_hits;
  }
  for (std::size_t v = 0; v < kNumStatics; ++v) {
    if (withheld.withhold_statics[v] && seq.statics[v] != kMaskedStatic) ++audit.withheld_static_hits;
  }
}

LossParts batch_loss(const ModelParams& params, const ModelConfig& cfg, std::span<const TrainingExample> batch,
                     const LossWeights& weights, const ReplacementPools& pools, Rng& rng, ModelParams* grads,
                     bool pretrain, const EncodeOptions* withheld, InputAudit* audit) {
  LossParts sum;
  if (batch.empty()) return sum;
  const double scale = 1.0 / static_cast<double>(batch.size());
  const bool mem = pretrain || weights.mem_active();

  std::vector<MaskedSequence> masked(mem ? batch.size() : 0);
  std::vector<const EncodedSequence*> inputs(batch.size());
  std::vector<PatientTargets> targets(batch.size());
  BatchOptions bo;
  bo.dropout = true;
  bo.rng = &rng;
  bo.vae = mem;
  if (mem) bo.mem_slots.resize(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    targets[i].t = batch[i].t;
    targets[i].y = batch[i].y;
    inputs[i] = batch[i].seq;
    if (mem) {
      masked[i] = mask_encounters(*batch[i].seq, pools, cfg, rng);
      inputs[i] = &masked[i].seq;
      bo.mem_slots[i] = masked[i].labeled_slots();
      for (int s : bo.mem_slots[i]) targets[i].mem_labels.push_back(masked[i].labels[static_cast<std::size_t>(s)]);
      targets[i].static_labels = masked[i].static_labels;
    }
    if (audit && withheld) audit_input(*inputs[i], *withheld, *audit);
  }

  BatchCache cache;
  const std::vector<ForwardOutput> outs = forward_batch(inputs, params, cfg, bo, grads ? &cache : nullptr);
  std::vector<OutputGrads> douts(grads ? batch.size() : 0);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    OutputGrads* d = grads ? &douts[i] : nullptr;
    const LossParts parts =
        pretrain ? pretrain_loss(outs[i], targets[i], d, scale) : patient_loss(outs[i], targets[i], weights, d, scale);
    accumulate(sum, parts, scale);
  }
  if (grads) backward(cache, params, cfg, douts, *grads);
  return sum;
}

std::vector<estimators::PredictionTriple> predict(const ModelParams& params, const ModelConfig& cfg,
                                                  const Cohort& cohort, std::span<const std::size_t> indices,
                                                  int fold, const EncodeOptions& encode) {
  std::vector<estimators::PredictionTriple> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) {
    const PatientRecord& p = cohort.patients.at(i);
    const EncodedSequence seq =
        encode_patient(p, cohort.vocabulary, static_cast<std::size_t>(cfg.max_seq_len), nullptr, encode);
    const ForwardOutput f = forward(seq, params, cfg);
    out.push_back({p.id, fold, f.q0, f.q1, f.g, p.t, p.y});
  }
  return out;
}

EncodeOptions withhold_confounder(const Vocabulary& vocab, bool transient, const std::string& definition) {
  EncodeOptions o;
  if (transient) {
    o.drop_codes.assign(vocab.size(), false);
    for (int code : vocab.group_members(definition)) o.drop_codes[static_cast<std::size_t>(code)] = true;
  } else if (definition == "sex") {
    o.withhold_statics[static_cast<std::size_t>(StaticVar::sex)] = true;
  } else if (definition == "region") {
    o.withhold_statics[static_cast<std::size_t>(StaticVar::region)] = true;
  } else if (definition == "smoking") {
    o.withhold_statics[static_cast<std::size_t>(StaticVar::smoking)] = true;
  } else {
    throw ValidationError("cannot withhold unknown static '" + definition + "'");
  }
  return o;
}

FitResult fit(const Cohort& cohort, const ModelConfig& cfg, const FitOptions& options) {
  cfg.validate();
  const auto& patients = cohort.patients;
  const std::size_t n = patients.size();
  if (n == 0) throw ValidationError("fit: empty cohort");

  FitResult result;
  std::vector<EncodedSequence> seqs;
  seqs.reserve(n);
  std::vector<int> exposures(n);
  for (std::size_t i = 0; i < n; ++i) {
    seqs.push_back(encode_patient(patients[i], cohort.vocabulary, static_cast<std::size_t>(cfg.max_seq_len),
                                  &result.encode_diagnostics, options.encode));
    exposures[i] = patients[i].t;
  }
  std::vector<TrainingExample> data(n);
  for (std::size_t i = 0; i < n; ++i) data[i] = {&seqs[i], patients[i].t, patients[i].y};

  result.folds = options.folds.empty() ? kfold_split(exposures, options.k_folds, options.fold_seed) : options.folds;
  if (result.folds.size() != n) throw ValidationError("fit: one fold label per patient required");
  const int k = *std::max_element(result.folds.begin(), result.folds.end()) + 1;

  const ReplacementPools pools(cohort.vocabulary, options.encode.drop_codes);
  const LossWeights weights = loss_weights(options.mode, cfg.delta);
  auto log_epoch = [&](int fold, int epoch, const LossParts& parts) {
    result.log.push_back({fold, epoch, parts});
    if (options.on_epoch) options.on_epoch(result.log.back());
  };

  Rng init_rng(derive_seed(cfg.seed, {1}));
  ModelParams start = ModelParams::init(cfg, cohort.vocabulary.size(), init_rng);

  if (weights.mem_active() && cfg.epochs_pretrain > 0) {
    Adam adam(start, cfg);
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), std::size_t{0});
    const EpochSchedule sched = epoch_schedule(cfg.epochs_pretrain, n, cfg);
    for (int e = 0; e < sched.epochs; ++e) {
      Rng rng(derive_seed(cfg.seed, {2, static_cast<std::uint64_t>(e)}));
      const double lr = cfg.learning_rate * std::pow(sched.decay, e);
      log_epoch(-1, e,
                run_epoch(start, adam, cfg, data, all, weights, pools, true, lr, rng, options, result.input_audit, -1, e));
    }
  }

  std::vector<std::vector<bool>> trained_on(static_cast<std::size_t>(k), std::vector<bool>(n, false));
  result.predictions.resize(n);
  std::vector<int> predicted_by(n, -1);
  for (int f = 0; f < k; ++f) {
    std::vector<std::size_t> train, test;
    for (std::size_t i = 0; i < n; ++i) (result.folds[i] == f ? test : train).push_back(i);
    if (train.empty() || test.empty()) throw ValidationError("fit: fold " + std::to_string(f) + " is empty");
    for (std::size_t i : train) trained_on[static_cast<std::size_t>(f)][i] = true;

    ModelParams params = start;
    Adam adam(params, cfg);
    const EpochSchedule sched = epoch_schedule(cfg.epochs_joint, train.size(), cfg);
    for (int e = 0; e < sched.epochs; ++e) {
      Rng rng(derive_seed(cfg.seed, {3, static_cast<std::uint64_t>(f), static_cast<std::uint64_t>(e)}));
      const double lr = cfg.learning_rate * std::pow(sched.decay, e);
      log_epoch(f, e,
                run_epoch(params, adam, cfg, data, train, weights, pools, false, lr, rng, options, result.input_audit, f, e));
    }
    for (std::size_t i : test) {
      audit_input(seqs[i], options.encode, result.input_audit);
      const ForwardOutput out = forward(seqs[i], params, cfg);
      result.predictions[i] = {patients[i].id, f, out.q0, out.q1, out.g, patients[i].t, patients[i].y};
      predicted_by[i] = f;
    }
    result.fold_params.push_back(std::move(params));
  }

  result.out_of_fold_ok = true;
  for (std::size_t i = 0; i < n; ++i) {
    const int f = predicted_by[i];
    if (f < 0 || trained_on[static_cast<std::size_t>(f)][i] || result.predictions[i].fold != result.folds[i]) {
      result.out_of_fold_ok = false;
    }
  }
  return result;
}

}  // namespace cel::tbehrt
