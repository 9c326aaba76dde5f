#include <doctest.h>

#include <cmath>

#include "cel/errors.hpp"
#include "cel/rng.hpp"
#include "cel/synth.hpp"
#include "cel/tbehrt/trainer.hpp"

using namespace cel;
using namespace cel::tbehrt;

namespace {

ModelConfig small_model() {
  auto cfg = ModelConfig::desk();
  cfg.hidden = 8;
  cfg.intermediate = 12;
  cfg.heads = 2;
  cfg.head_hidden = 6;
  cfg.vae_latent_dim = 4;
  cfg.epochs_pretrain = 1;
  cfg.epochs_joint = 2;
  cfg.batch_size = 16;
  cfg.min_steps = 0;
  return cfg;
}

Cohort small_cohort(int n = 120, std::uint64_t seed = 1, double beta = 5) {
  synth::SynthConfig sc;
  sc.n_patients = n;
  sc.seed = seed;
  sc.beta = beta;
  return synth::generate_cohort(sc);
}

struct Batch {
  Cohort cohort = small_cohort(40);
  std::vector<EncodedSequence> seqs;
  std::vector<TrainingExample> examples;
  Batch() {
    for (const auto& p : cohort.patients) seqs.push_back(encode_patient(p, cohort.vocabulary, 64));
    for (std::size_t i = 0; i < seqs.size(); ++i) examples.push_back({&seqs[i], cohort.patients[i].t, cohort.patients[i].y});
  }
};

bool same_params(const ModelParams& a, const ModelParams& b) {
  std::vector<const Matrix*> x, y;
  a.visit([&](const std::string&, const Matrix& m) { x.push_back(&m); });
  b.visit([&](const std::string&, const Matrix& m) { y.push_back(&m); });
  if (x.size() != y.size()) return false;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i]->rows() != y[i]->rows() || x[i]->cols() != y[i]->cols()) return false;
    if (!(x[i]->array() == y[i]->array()).all()) return false;
  }
  return true;
}

bool same_predictions(const FitResult& a, const FitResult& b) {
  if (a.predictions.size() != b.predictions.size()) return false;
  for (std::size_t i = 0; i < a.predictions.size(); ++i) {
    const auto &p = a.predictions[i], &q = b.predictions[i];
    if (p.q0 != q.q0 || p.q1 != q.q1 || p.g != q.g || p.fold != q.fold || p.patient_id != q.patient_id) return false;
  }
  return true;
}

}  // namespace

TEST_SUITE("trainer") {
  TEST_CASE("Adam first step moves each weight by about the learning rate") {
    auto cfg = small_model();
    Rng rng(1);
    auto p = ModelParams::init(cfg, 30, rng);
    const auto before = p;
    auto g = ModelParams::zeros_like(p);
    g.pooler.w.setConstant(2.0);
    Adam adam(p, cfg);
    adam.step(p, g, 0.01);
    CHECK(adam.steps() == 1);
    CHECK((p.pooler.w - before.pooler.w).array().abs().maxCoeff() == doctest::Approx(0.01).epsilon(1e-6));
    CHECK(same_params(ModelParams::zeros_like(p), ModelParams::zeros_like(before)));
    CHECK((p.code_emb.array() == before.code_emb.array()).all());
  }

  TEST_CASE("mode lattice: tarnet and dragonnet are delta-zero reductions") {
    Batch b;
    auto cfg = small_model();
    Rng init(4);
    const auto params = ModelParams::init(cfg, b.cohort.vocabulary.size(), init);
    const ReplacementPools pools(b.cohort.vocabulary);
    struct Pair {
      LossWeights mode, reduced;
    };
    const Pair pairs[] = {{loss_weights(FitMode::tarnet, 0.1), LossWeights{false, true, 0.0}},
                          {loss_weights(FitMode::dragonnet, 0.1), LossWeights{true, true, 0.0}},
                          {loss_weights(FitMode::tarnet_mem, 0.0), loss_weights(FitMode::tarnet, 0.1)}};
    for (const auto& pr : pairs) {
      auto ga = ModelParams::zeros_like(params), gb = ModelParams::zeros_like(params);
      Rng ra(9), rb(9);
      const auto la = batch_loss(params, cfg, b.examples, pr.mode, pools, ra, &ga);
      const auto lb = batch_loss(params, cfg, b.examples, pr.reduced, pools, rb, &gb);
      CHECK(la.total == lb.total);
      CHECK(la.supervised == lb.supervised);
      CHECK(same_params(ga, gb));
      CHECK(ra.next() == rb.next());
    }
  }

  TEST_CASE("mode lattice holds for whole fits") {
    const auto c = small_cohort();
    auto cfg = small_model();
    auto zero = cfg;
    zero.delta = 0.0;
    FitOptions fo;
    fo.mode = FitMode::dragonnet;
    const auto dragon = fit(c, cfg, fo);
    fo.mode = FitMode::t_behrt;
    CHECK(same_predictions(dragon, fit(c, zero, fo)));
    fo.mode = FitMode::tarnet;
    const auto tarnet = fit(c, cfg, fo);
    fo.mode = FitMode::tarnet_mem;
    CHECK(same_predictions(tarnet, fit(c, zero, fo)));
    fo.mode = FitMode::t_behrt;
    CHECK_FALSE(same_predictions(dragon, fit(c, cfg, fo)));
  }

  TEST_CASE("out-of-fold discipline and determinism") {
    const auto c = small_cohort();
    auto cfg = small_model();
    FitOptions fo;
    fo.mode = FitMode::t_behrt;
    const auto a = fit(c, cfg, fo);
    CHECK(a.out_of_fold_ok);
    REQUIRE(a.predictions.size() == c.patients.size());
    REQUIRE(a.fold_params.size() == 5);
    for (std::size_t i = 0; i < c.patients.size(); ++i) {
      CHECK(a.predictions[i].patient_id == c.patients[i].id);
      CHECK(a.predictions[i].fold == a.folds[i]);
      CHECK(a.predictions[i].t == c.patients[i].t);
    }
    // re-predicting with the holding-out fold's parameters reproduces the output
    std::vector<std::size_t> held;
    for (std::size_t i = 0; i < c.patients.size(); ++i) {
      if (a.folds[i] == 2) held.push_back(i);
    }
    const auto again = predict(a.fold_params[2], cfg, c, held, 2);
    for (std::size_t j = 0; j < held.size(); ++j) CHECK(again[j].q1 == a.predictions[held[j]].q1);
    CHECK(same_predictions(a, fit(c, cfg, fo)));
    auto other = cfg;
    other.seed += 1;
    CHECK_FALSE(same_predictions(a, fit(c, other, fo)));
  }

  TEST_CASE("withheld confounder never reaches the network") {
    synth::SynthConfig sc;
    sc.n_patients = 100;
    sc.confounder = {synth::ConfounderKind::transient, "cardiometabolic"};
    const auto c = synth::generate_cohort(sc);
    auto cfg = small_model();
    FitOptions fo;
    fo.encode = withhold_confounder(c.vocabulary, true, "cardiometabolic");
    const auto r = fit(c, cfg, fo);
    CHECK(r.input_audit.clean());
    CHECK(r.input_audit.sequences > 0);
    CHECK(r.encode_diagnostics.dropped_codes > 0);

    InputAudit audit;
    for (const auto& p : c.patients) audit_input(encode_patient(p, c.vocabulary, 64), fo.encode, audit);
    CHECK_FALSE(audit.clean());

    const auto sex = withhold_confounder(c.vocabulary, false, "sex");
    InputAudit sa;
    audit_input(encode_patient(c.patients[0], c.vocabulary, 64, nullptr, sex), sex, sa);
    CHECK(sa.clean());
    CHECK_THROWS_AS(withhold_confounder(c.vocabulary, false, "height"), ValidationError);
  }

  TEST_CASE("pretraining alone leaves the heads at initialization") {
    const auto c = small_cohort(60);
    auto cfg = small_model();
    cfg.epochs_joint = 0;
    FitOptions fo;
    const auto r = fit(c, cfg, fo);
    Rng init(derive_seed(cfg.seed, {1}));
    const auto p0 = ModelParams::init(cfg, c.vocabulary.size(), init);
    for (const auto& p : r.fold_params) {
      CHECK((p.propensity_out.w.array() == p0.propensity_out.w.array()).all());
      CHECK((p.outcome1.out.w.array() == p0.outcome1.out.w.array()).all());
      CHECK_FALSE((p.layers[0].query.w.array() == p0.layers[0].query.w.array()).all());
    }
  }

  TEST_CASE("constant outcome drives q towards the floor") {
    auto c = small_cohort(100);
    for (auto& p : c.patients) {
      p.y = 0;
      p.potential_outcomes.reset();
    }
    auto cfg = small_model();
    cfg.epochs_pretrain = 0;
    cfg.epochs_joint = 15;
    cfg.learning_rate = 1e-2;
    FitOptions fo;
    fo.mode = FitMode::tarnet;
    double first = 0, last = 0;
    fo.on_epoch = [&](const EpochLog& e) {
      if (e.fold != 0) return;
      if (e.epoch == 0) first = e.mean.supervised;
      last = e.mean.supervised;
    };
    const auto r = fit(c, cfg, fo);
    CHECK(last < 0.05 * first);
    for (const auto& p : r.predictions) {
      CHECK(p.q0 < 0.02);
      CHECK(p.q0 >= kProbFloor);
    }
  }

  TEST_CASE("training loss decreases on a learnable cohort") {
    const auto c = small_cohort(500, 3, 10.0);
    auto cfg = small_model();
    cfg.epochs_pretrain = 0;
    cfg.epochs_joint = 5;
    FitOptions fo;
    fo.mode = FitMode::dragonnet;
    std::vector<double> losses;
    fo.on_epoch = [&](const EpochLog& e) {
      if (e.fold == 0) losses.push_back(e.mean.total);
    };
    fit(c, cfg, fo);
    REQUIRE(losses.size() == 5);
    int rises = 0;
    for (std::size_t i = 1; i < losses.size(); ++i) rises += losses[i] > losses[i - 1];
    CHECK(rises <= 1);
    CHECK(losses.back() < losses.front());
  }

  TEST_CASE("deadline and non-finite guards") {
    const auto c = small_cohort(60);
    auto cfg = small_model();
    FitOptions fo;
    fo.deadline = std::chrono::steady_clock::now() - std::chrono::seconds(1);
    CHECK_THROWS_AS(fit(c, cfg, fo), TimeoutError);

    auto wild = cfg;
    wild.learning_rate = 1e300;
    wild.epochs_pretrain = 0;
    wild.epochs_joint = 3;
    try {
      fit(c, wild, FitOptions{});
      FAIL("expected NumericError");
    } catch (const NumericError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("epoch") != std::string::npos);
      CHECK(msg.find("supervised=") != std::string::npos);
    }
  }

  TEST_CASE("step floor stretches short schedules and keeps total decay") {
    auto cfg = small_model();
    cfg.batch_size = 32;
    cfg.decay_rate = 0.9;
    cfg.min_steps = 750;
    // 500 examples -> 16 batches per epoch -> 47 epochs to reach 750 steps
    const auto s = epoch_schedule(10, 500, cfg);
    CHECK(s.epochs == 47);
    CHECK(std::pow(s.decay, 47) == doctest::Approx(std::pow(0.9, 10)).epsilon(1e-12));
    const auto big = epoch_schedule(10, 4000, cfg);
    CHECK(big.epochs == 10);
    CHECK(big.decay == 0.9);
    CHECK(epoch_schedule(0, 500, cfg).epochs == 0);
    cfg.min_steps = 0;
    CHECK(epoch_schedule(3, 500, cfg).epochs == 3);
    cfg.min_steps = -1;
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
  }

  TEST_CASE("preassigned folds are honored") {
    const auto c = small_cohort(60);
    auto cfg = small_model();
    cfg.epochs_pretrain = 0;
    cfg.epochs_joint = 1;
    FitOptions fo;
    fo.k_folds = 3;
    for (std::size_t i = 0; i < c.patients.size(); ++i) fo.folds.push_back(static_cast<int>(i % 3));
    const auto r = fit(c, cfg, fo);
    CHECK(r.folds == fo.folds);
    CHECK(r.fold_params.size() == 3);
  }
}
