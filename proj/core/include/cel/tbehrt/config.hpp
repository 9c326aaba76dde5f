#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

namespace cel::tbehrt {

/// Which losses are active. tarnet: outcome heads only; tarnet-mem: + MEM;
/// dragonnet: outcome + propensity; t-behrt: everything.
enum class FitMode { tarnet, tarnet_mem, dragonnet, t_behrt };

std::string_view to_string(FitMode m);
FitMode parse_fit_mode(std::string_view s);

struct LossWeights {
  bool propensity = true;
  /// MEM terms are active iff mem && delta > 0.
  bool mem = true;
  double delta = 0.1;

  bool mem_active() const { return mem && delta > 0.0; }
};

LossWeights loss_weights(FitMode mode, double delta);
bool uses_mem(FitMode mode);

struct ModelConfig {
  std::string preset = "desk";
  int hidden = 32;
  int intermediate = 108;
  int n_layers = 2;
  int heads = 4;
  double hidden_dropout = 0.3;
  double attention_dropout = 0.4;
  std::string activation = "gelu";
  double init_range = 0.02;
  /// Maximum encoded length, CLS and static slots included.
  int max_seq_len = 64;
  double delta = 0.1;
  /// Absolute per-slot probabilities; their sum is the perturbation budget.
  double mem_mask_fraction = 0.12;
  double mem_replace_fraction = 0.015;
  double mem_keep_fraction = 0.015;
  double static_mask_prob = 0.15;
  int vae_latent_dim = 32;
  /// Width of the propensity and outcome MLP hidden layers.
  int head_hidden = 32;
  double learning_rate = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int epochs_pretrain = 5;
  int epochs_joint = 10;
  /// Floor on optimizer steps per training phase. Small cohorts run extra
  /// epochs, with the decay stretched so the total decay is unchanged.
  /// 0 disables it.
  int min_steps = 750;
  double decay_rate = 0.95;
  int batch_size = 32;
  int max_age = 120;
  int year_base = 1950;
  int n_years = 100;
  int n_regions = 10;
  std::uint64_t seed = 7;

  double mask_budget() const { return mem_mask_fraction + mem_replace_fraction + mem_keep_fraction; }
  void validate() const;

  /// Small CPU-friendly network used by tests and the benchmark suites.
  static ModelConfig desk();
  /// Published sizes: hidden 150, intermediate 108, 4 layers, length 200.
  static ModelConfig paper();
  static ModelConfig from_preset(std::string_view name);
};

nlohmann::json to_json(const ModelConfig& cfg);
/// Starts from `base` and overrides every field present in `j`.
ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = ModelConfig::desk());

}  // namespace cel::tbehrt
