#include <doctest.h>

#include <cmath>

#include "cel/errors.hpp"
#include "cel/synth.hpp"
#include "cel/tbehrt/network.hpp"
#include "fixtures.hpp"

using namespace cel;
using namespace cel::tbehrt;

namespace {

ModelConfig tiny() {
  ModelConfig cfg = ModelConfig::desk();
  cfg.hidden = 8;
  cfg.intermediate = 12;
  cfg.heads = 2;
  cfg.head_hidden = 6;
  cfg.vae_latent_dim = 4;
  cfg.n_regions = 3;
  return cfg;
}

struct Setup {
  ModelConfig cfg = tiny();
  Vocabulary vocab = fixtures::small_vocab();
  ModelParams params;
  Setup() {
    Rng rng(2);
    params = ModelParams::init(cfg, vocab.size(), rng);
    // move away from the symmetric init so every path carries signal
    params.visit([&](const std::string&, Matrix& m) {
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] += 0.2 * rng.normal();
    });
  }
  EncodedSequence seq(std::initializer_list<int> codes) const {
    return encode_patient(fixtures::patient("s", codes), vocab, static_cast<std::size_t>(cfg.max_seq_len));
  }
};

}  // namespace

TEST_SUITE("network") {
  TEST_CASE("zero tables embed to zero") {
    Setup s;
    auto p = s.params;
    for (Matrix* m : {&p.code_emb, &p.age_emb, &p.year_emb, &p.position_emb, &p.sex_emb, &p.region_emb, &p.smoking_emb})
      m->setZero();
    CHECK(embed_sequence(s.seq({5, 6, 7}), p, s.cfg).cwiseAbs().maxCoeff() == 0.0);
  }

  TEST_CASE("embedding shape under the paper preset") {
    const auto cfg = ModelConfig::paper();
    Rng rng(1);
    const auto vocab = fixtures::small_vocab();
    const auto p = ModelParams::init(cfg, vocab.size(), rng);
    const auto seq = encode_patient(fixtures::patient("s", {5, 6}), vocab, 200);
    const auto e = embed_sequence(seq, p, cfg);
    CHECK(e.rows() == static_cast<Eigen::Index>(seq.length()));
    CHECK(e.cols() == 150);
  }

  TEST_CASE("one-hot tables sum per slot") {
    Setup s;
    auto p = s.params;
    for (Matrix* m : {&p.code_emb, &p.age_emb, &p.year_emb, &p.position_emb, &p.sex_emb, &p.region_emb, &p.smoking_emb})
      m->setZero();
    p.code_emb(5, 0) = 1.0;
    p.code_emb(special_tokens::kCls, 1) = 1.0;
    p.age_emb(40, 2) = 1.0;
    p.year_emb(2000 - s.cfg.year_base, 3) = 1.0;
    p.position_emb(1, 4) = 1.0;
    p.sex_emb(1, 5) = 1.0;
    p.region_emb(2, 6) = 1.0;
    p.smoking_emb(0, 7) = 1.0;
    const auto seq = s.seq({5});
    REQUIRE(seq.length() == 5);
    const auto e = embed_sequence(seq, p, s.cfg);
    Matrix expect = Matrix::Zero(5, 8);
    expect(0, 1) = 1;  // CLS
    expect(1, 0) = expect(1, 2) = expect(1, 3) = expect(1, 4) = 1;
    // static slots read only their own tables
    expect(2, 5) = 1;
    expect(3, 6) = 1;
    expect(4, 7) = 1;
    if (seq.ages[0] == 40) expect(0, 2) = 1;
    if (seq.years[0] == 2000) expect(0, 3) = 1;
    CHECK((e - expect).cwiseAbs().maxCoeff() == 0.0);
  }

  TEST_CASE("out-of-range inputs throw") {
    Setup s;
    auto seq = s.seq({5});
    seq.codes[1] = 999;
    CHECK_THROWS_AS(embed_sequence(seq, s.params, s.cfg), ValidationError);
    seq = s.seq({5});
    seq.statics[1] = 7;
    CHECK_THROWS_AS(embed_sequence(seq, s.params, s.cfg), ValidationError);
  }

  TEST_CASE("encoder is deterministic with dropout off and attention rows sum to one") {
    Setup s;
    const auto e = embed_sequence(s.seq({5, 6, 7, 8}), s.params, s.cfg);
    EncoderCache cache;
    const Matrix a = encode(e, s.params, s.cfg, false, nullptr, &cache);
    const Matrix b = encode(e, s.params, s.cfg, false);
    CHECK((a.array() == b.array()).all());
    for (const auto& layer : cache.layers) {
      for (const auto& probs : layer.attn_probs) {
        for (Eigen::Index r = 0; r < probs.rows(); ++r) CHECK(std::abs(probs.row(r).sum() - 1.0) < 1e-6);
      }
    }
  }

  TEST_CASE("joint permutation of encounters and positions leaves CLS unchanged") {
    Setup s;
    auto seq = s.seq({5, 6, 7, 8});
    auto perm = seq;
    std::swap(perm.codes[1], perm.codes[3]);
    std::swap(perm.ages[1], perm.ages[3]);
    std::swap(perm.years[1], perm.years[3]);
    std::swap(perm.positions[1], perm.positions[3]);
    const Matrix a = encode(embed_sequence(seq, s.params, s.cfg), s.params, s.cfg, false);
    const Matrix b = encode(embed_sequence(perm, s.params, s.cfg), s.params, s.cfg, false);
    CHECK((a.row(0) - b.row(0)).cwiseAbs().maxCoeff() < 1e-12);
  }

  TEST_CASE("zero head weights give one half") {
    Setup s;
    auto p = s.params;
    for (Linear* l : {&p.propensity_out, &p.outcome0.out, &p.outcome1.out}) {
      l->w.setZero();
      l->b.setZero();
    }
    const auto out = forward(s.seq({5, 6}), p, s.cfg);
    CHECK(out.g == 0.5);
    CHECK(out.q0 == 0.5);
    CHECK(out.q1 == 0.5);
  }

  TEST_CASE("hand-set propensity network") {
    Setup s;
    auto p = s.params;
    p.pooler.w.setZero();
    p.pooler.b.setZero();
    p.pooler.b(0, 0) = 0.7;
    p.propensity_hidden.w.setZero();
    p.propensity_hidden.b.setZero();
    p.propensity_hidden.w(0, 0) = -2.0;
    p.propensity_out.w.setZero();
    p.propensity_out.w(0, 0) = 1.5;
    p.propensity_out.b(0, 0) = 0.25;
    const double h = -2.0 * std::tanh(0.7);
    const double elu = std::exp(h) - 1.0;
    const double g = 1.0 / (1.0 + std::exp(-(1.5 * elu + 0.25)));
    CHECK(forward(s.seq({5}), p, s.cfg).g == doctest::Approx(g).epsilon(1e-14));
  }

  TEST_CASE("outcome branches are isolated") {
    Setup s;
    const auto seq = s.seq({5, 6, 8});
    const auto base = forward(seq, s.params, s.cfg);
    auto p = s.params;
    p.outcome1.hidden1.w.array() += 0.5;
    p.outcome1.out.b.array() -= 1.0;
    const auto moved = forward(seq, p, s.cfg);
    CHECK(moved.q0 == base.q0);
    CHECK(moved.g == base.g);
    CHECK(moved.q1 != base.q1);
    auto p0 = s.params;
    p0.outcome0.hidden2.b.array() += 0.3;
    const auto moved0 = forward(seq, p0, s.cfg);
    CHECK(moved0.q1 == base.q1);
    CHECK(moved0.q0 != base.q0);
  }

  TEST_CASE("probabilities are clipped") {
    Setup s;
    auto p = s.params;
    p.propensity_out.b(0, 0) = 100.0;
    p.outcome0.out.b(0, 0) = -100.0;
    const auto out = forward(s.seq({5}), p, s.cfg);
    CHECK(out.g == kProbCeil);
    CHECK(out.q0 == kProbFloor);
  }

  TEST_CASE("batched outputs equal single-sequence outputs with dropout off") {
    Setup s;
    std::vector<EncodedSequence> seqs = {s.seq({5}), s.seq({5, 6, 7, 8, 6}), s.seq({}), s.seq({8, 7})};
    std::vector<const EncodedSequence*> ptrs;
    for (const auto& q : seqs) ptrs.push_back(&q);
    BatchOptions bo;
    bo.vae = true;
    bo.mem_slots = {{1}, {1, 3}, {}, {2}};
    const auto batch = forward_batch(ptrs, s.params, s.cfg, bo);
    for (std::size_t i = 0; i < seqs.size(); ++i) {
      ForwardOptions fo;
      fo.vae = true;
      fo.mem_slots = bo.mem_slots[i];
      const auto one = forward(seqs[i], s.params, s.cfg, fo);
      CHECK(batch[i].g == one.g);
      CHECK(batch[i].q0 == one.q0);
      CHECK(batch[i].q1 == one.q1);
      CHECK((batch[i].vae->mean.array() == one.vae->mean.array()).all());
      if (one.mem_logits.size() > 0) CHECK((batch[i].mem_logits.array() == one.mem_logits.array()).all());
    }
  }

  TEST_CASE("VAE uses the mean when not sampling") {
    Setup s;
    ForwardOptions fo;
    fo.vae = true;
    const auto out = forward(s.seq({5, 6}), s.params, s.cfg, fo);
    REQUIRE(out.vae);
    CHECK((out.vae->z.array() == out.vae->mean.array()).all());
    CHECK(out.vae->recon_logits[0].size() == 2);
    CHECK(out.vae->recon_logits[1].size() == s.cfg.n_regions);
    CHECK(out.vae->recon_logits[2].size() == 2);
  }

  TEST_CASE("parameter file round-trips") {
    Setup s;
    const auto path = std::filesystem::temp_directory_path() / "cel_params_roundtrip.bin";
    save_params(path, s.cfg, {{"fold0", s.params}, {"fold1", ModelParams::zeros_like(s.params)}});
    const auto back = load_params(path, s.vocab.size());
    REQUIRE(back.sets.size() == 2);
    CHECK(back.sets[0].first == "fold0");
    CHECK(to_json(back.config) == to_json(s.cfg));
    std::vector<const Matrix*> a, b;
    s.params.visit([&](const std::string&, const Matrix& m) { a.push_back(&m); });
    back.sets[0].second.visit([&](const std::string&, const Matrix& m) { b.push_back(&m); });
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK((a[i]->array() == b[i]->array()).all());
    CHECK_THROWS(load_params(path, s.vocab.size() + 1));
    std::filesystem::remove(path);
  }
}
