#include <benchmark/benchmark.h>

#include <vector>

#include "cel/baselines.hpp"
#include "cel/estimators.hpp"
#include "cel/logreg.hpp"
#include "cel/rng.hpp"
#include "cel/synth.hpp"
#include "cel/tbehrt/trainer.hpp"

using namespace cel;

namespace {

const Cohort& cohort() {
  static const Cohort c = [] {
    synth::SynthConfig sc;
    sc.n_patients = 5000;
    sc.beta = 5;
    return synth::generate_cohort(sc);
  }();
  return c;
}

struct Net {
  tbehrt::ModelConfig cfg = tbehrt::ModelConfig::desk();
  std::vector<EncodedSequence> seqs;
  std::vector<tbehrt::TrainingExample> batch;
  tbehrt::ModelParams params;

  explicit Net(int batch_size) {
    const auto& c = cohort();
    for (int i = 0; i < batch_size; ++i) {
      seqs.push_back(encode_patient(c.patients[static_cast<std::size_t>(i)], c.vocabulary, cfg.max_seq_len));
    }
    for (int i = 0; i < batch_size; ++i) {
      const auto& p = c.patients[static_cast<std::size_t>(i)];
      batch.push_back({&seqs[static_cast<std::size_t>(i)], p.t, p.y});
    }
    Rng rng(1);
    params = tbehrt::ModelParams::init(cfg, c.vocabulary.size(), rng);
  }
};

void BM_ForwardBatch(benchmark::State& state) {
  Net net(static_cast<int>(state.range(0)));
  std::vector<const EncodedSequence*> ptrs;
  for (const auto& s : net.seqs) ptrs.push_back(&s);
  for (auto _ : state) {
    benchmark::DoNotOptimize(tbehrt::forward_batch(ptrs, net.params, net.cfg));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ForwardBatch)->Arg(1)->Arg(32);

// Forward, MEM masking, losses and backward for one t-behrt minibatch.
void BM_TrainStep(benchmark::State& state) {
  Net net(static_cast<int>(state.range(0)));
  const tbehrt::ReplacementPools pools(cohort().vocabulary);
  const auto weights = tbehrt::loss_weights(tbehrt::FitMode::t_behrt, net.cfg.delta);
  auto grads = tbehrt::ModelParams::zeros_like(net.params);
  Rng rng(2);
  for (auto _ : state) {
    benchmark::DoNotOptimize(tbehrt::batch_loss(net.params, net.cfg, net.batch, weights, pools, rng, &grads));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_TrainStep)->Arg(32);

std::vector<estimators::PredictionTriple> triples(int n) {
  Rng rng(3);
  std::vector<estimators::PredictionTriple> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    auto& p = out[static_cast<std::size_t>(i)];
    p.fold = i % 5;
    p.g = 0.1 + 0.8 * rng.uniform();
    p.t = rng.bernoulli(p.g) ? 1 : 0;
    p.q0 = 0.2 + 0.4 * rng.uniform();
    p.q1 = std::min(0.95, p.q0 * 1.4);
    p.y = rng.bernoulli(p.t ? p.q1 : p.q0) ? 1 : 0;
  }
  return out;
}

void BM_CvTmle(benchmark::State& state) {
  const auto preds = triples(static_cast<int>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(estimators::cv_tmle_rr(preds));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_CvTmle)->Arg(5000)->Arg(20000);

void BM_LogReg(benchmark::State& state) {
  const auto f = baselines::build_features(cohort());
  std::vector<int> t;
  for (const auto& p : cohort().patients) t.push_back(p.t);
  baselines::Penalty pen;
  pen.kind = static_cast<baselines::PenaltyKind>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(baselines::fit_logreg(f.x, t, pen));
}
BENCHMARK(BM_LogReg)->Arg(0)->Arg(1)->Arg(2);

}  // namespace
BENCHMARK_MAIN();
