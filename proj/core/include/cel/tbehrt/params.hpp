#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "cel/rng.hpp"
#include "cel/tbehrt/config.hpp"

namespace cel::tbehrt {

using Matrix = Eigen::MatrixXd;

/// y = x * w + b, with w: in x out and b: 1 x out.
struct Linear {
  Matrix w;
  Matrix b;
};

struct LayerNorm {
  Matrix gamma;
  Matrix beta;
};

struct EncoderLayer {
  LayerNorm norm_attn;
  Linear query, key, value, attn_out;
  LayerNorm norm_ff;
  Linear ff_in, ff_out;
};

struct OutcomeBranch {
  Linear hidden1, hidden2, out;
};

/// Every learnable tensor of the model. Static embedding tables carry one
/// extra trailing row used for masked or withheld values.
struct ModelParams {
  Matrix code_emb, age_emb, year_emb, position_emb;
  Matrix sex_emb, region_emb, smoking_emb;
  std::vector<EncoderLayer> layers;
  LayerNorm final_norm;
  Linear pooler;
  Linear propensity_hidden, propensity_out;
  OutcomeBranch outcome0, outcome1;
  Linear mem_transform, mem_decoder;
  Linear vae_mean, vae_logvar;
  Linear decode_sex, decode_region, decode_smoking;

  /// Random init: N(0, init_range) weights and embeddings, zero biases, unit
  /// layer-norm gains.
  static ModelParams init(const ModelConfig& cfg, std::size_t vocab_size, Rng& rng);
  /// Same shapes, all zeros.
  static ModelParams zeros_like(const ModelParams& other);

  /// Calls f(name, tensor) for every tensor in a fixed order. Names are
  /// "<group>.<tensor>" where group identifies the module.
  template <class F>
  void visit(F&& f);
  template <class F>
  void visit(F&& f) const;

  std::size_t parameter_count() const;
  bool all_finite() const;
  void set_zero();
  /// this += scale * other (shapes must match).
  void add_scaled(const ModelParams& other, double scale);
};

namespace detail {

template <class P, class F>
void visit_params(P& p, F&& f) {
  auto lin = [&](const std::string& n, auto& l) {
    f(n + ".w", l.w);
    f(n + ".b", l.b);
  };
  auto norm = [&](const std::string& n, auto& l) {
    f(n + ".gamma", l.gamma);
    f(n + ".beta", l.beta);
  };
  f(std::string("embedding.code"), p.code_emb);
  f(std::string("embedding.age"), p.age_emb);
  f(std::string("embedding.year"), p.year_emb);
  f(std::string("embedding.position"), p.position_emb);
  f(std::string("embedding.sex"), p.sex_emb);
  f(std::string("embedding.region"), p.region_emb);
  f(std::string("embedding.smoking"), p.smoking_emb);
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    const std::string pre = "encoder" + std::to_string(i) + ".";
    auto& l = p.layers[i];
    norm(pre + "norm_attn", l.norm_attn);
    lin(pre + "query", l.query);
    lin(pre + "key", l.key);
    lin(pre + "value", l.value);
    lin(pre + "attn_out", l.attn_out);
    norm(pre + "norm_ff", l.norm_ff);
    lin(pre + "ff_in", l.ff_in);
    lin(pre + "ff_out", l.ff_out);
  }
  norm("final_norm", p.final_norm);
  lin("pooler", p.pooler);
  lin("propensity.hidden", p.propensity_hidden);
  lin("propensity.out", p.propensity_out);
  lin("outcome0.hidden1", p.outcome0.hidden1);
  lin("outcome0.hidden2", p.outcome0.hidden2);
  lin("outcome0.out", p.outcome0.out);
  lin("outcome1.hidden1", p.outcome1.hidden1);
  lin("outcome1.hidden2", p.outcome1.hidden2);
  lin("outcome1.out", p.outcome1.out);
  lin("mem.transform", p.mem_transform);
  lin("mem.decoder", p.mem_decoder);
  lin("vae.mean", p.vae_mean);
  lin("vae.logvar", p.vae_logvar);
  lin("vae.decode_sex", p.decode_sex);
  lin("vae.decode_region", p.decode_region);
  lin("vae.decode_smoking", p.decode_smoking);
}

}  // namespace detail

template <class F>
void ModelParams::visit(F&& f) {
  detail::visit_params(*this, std::forward<F>(f));
}

template <class F>
void ModelParams::visit(F&& f) const {
  detail::visit_params(*this, std::forward<F>(f));
}

/// Binary parameter file: magic "CELPARAM", u32 version, u32 config-JSON
/// length + bytes, u32 tensor count, then per tensor (u32 name length, name,
/// u32 rows, u32 cols); after the manifest, all values as little-endian f64
/// in manifest order, each tensor row-major.
struct ParamsFile {
  ModelConfig config;
  std::vector<std::pair<std::string, ModelParams>> sets;
};

inline constexpr std::uint32_t kParamsFormatVersion = 1;

void save_params(const std::filesystem::path& path, const ModelConfig& cfg,
                 const std::vector<std::pair<std::string, ModelParams>>& sets);
ParamsFile load_params(const std::filesystem::path& path, std::size_t vocab_size);

}  // namespace cel::tbehrt
