#include "cel/tbehrt/config.hpp"

#include "cel/errors.hpp"

namespace cel::tbehrt {

std::string_view to_string(FitMode m) {
  switch (m) {
    case FitMode::tarnet:
      return "tarnet";
    case FitMode::tarnet_mem:
      return "tarnet-mem";
    case FitMode::dragonnet:
      return "dragonnet";
    case FitMode::t_behrt:
      return "t-behrt";
  }
  return "t-behrt";
}

FitMode parse_fit_mode(std::string_view s) {
  if (s == "tarnet") return FitMode::tarnet;
  if (s == "tarnet-mem") return FitMode::tarnet_mem;
  if (s == "dragonnet") return FitMode::dragonnet;
  if (s == "t-behrt") return FitMode::t_behrt;
  throw ValidationError("unknown fit mode '" + std::string(s) + "'");
}

bool uses_mem(FitMode mode) { return mode == FitMode::tarnet_mem || mode == FitMode::t_behrt; }

LossWeights loss_weights(FitMode mode, double delta) {
  LossWeights w;
  w.propensity = mode == FitMode::dragonnet || mode == FitMode::t_behrt;
  w.mem = uses_mem(mode);
  w.delta = delta;
  return w;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ValidationError("model config: " + m); };
  if (hidden <= 0 || intermediate <= 0 || n_layers < 0 || heads <= 0) fail("sizes must be positive");
  if (hidden % heads != 0) fail("hidden must be divisible by heads");
  if (!(hidden_dropout >= 0 && hidden_dropout < 1 && attention_dropout >= 0 && attention_dropout < 1)) {
    fail("dropout probabilities must lie in [0,1)");
  }
  if (activation != "gelu") fail("only the gelu activation is supported");
  if (mem_mask_fraction < 0 || mem_replace_fraction < 0 || mem_keep_fraction < 0 || mask_budget() > 1.0) {
    fail("mask/replace/keep fractions must be non-negative and sum to at most 1");
  }
  if (!(static_mask_prob >= 0 && static_mask_prob <= 1)) fail("static_mask_prob must lie in [0,1]");
  if (max_seq_len < 5) fail("max_seq_len must be at least 5");
  if (vae_latent_dim <= 0 || head_hidden <= 0) fail("latent and head sizes must be positive");
  if (delta < 0) fail("delta must be non-negative");
  if (learning_rate <= 0 || decay_rate <= 0 || batch_size <= 0) fail("optimizer settings must be positive");
  if (epochs_pretrain < 0 || epochs_joint < 0 || min_steps < 0) fail("epoch and step counts must be non-negative");
  if (max_age < 0 || n_years <= 0 || n_regions <= 0) fail("embedding table sizes must be positive");
}

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::paper() {
  ModelConfig c;
  c.preset = "paper";
  c.hidden = 150;
  c.intermediate = 108;
  c.n_layers = 4;
  c.heads = 6;
  c.hidden_dropout = 0.3;
  c.attention_dropout = 0.4;
  c.max_seq_len = 200;
  c.head_hidden = 150;
  c.vae_latent_dim = 32;
  return c;
}

ModelConfig ModelConfig::from_preset(std::string_view name) {
  if (name == "desk") return desk();
  if (name == "paper") return paper();
  throw ValidationError("unknown model preset '" + std::string(name) + "'");
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"preset", c.preset},
          {"hidden", c.hidden},
          {"intermediate", c.intermediate},
          {"n_layers", c.n_layers},
          {"heads", c.heads},
          {"hidden_dropout", c.hidden_dropout},
          {"attention_dropout", c.attention_dropout},
          {"activation", c.activation},
          {"init_range", c.init_range},
          {"max_seq_len", c.max_seq_len},
          {"delta", c.delta},
          {"mem_mask_fraction", c.mem_mask_fraction},
          {"mem_replace_fraction", c.mem_replace_fraction},
          {"mem_keep_fraction", c.mem_keep_fraction},
          {"static_mask_prob", c.static_mask_prob},
          {"vae_latent_dim", c.vae_latent_dim},
          {"head_hidden", c.head_hidden},
          {"learning_rate", c.learning_rate},
          {"adam_beta1", c.adam_beta1},
          {"adam_beta2", c.adam_beta2},
          {"adam_eps", c.adam_eps},
          {"epochs_pretrain", c.epochs_pretrain},
          {"epochs_joint", c.epochs_joint},
          {"min_steps", c.min_steps},
          {"decay_rate", c.decay_rate},
          {"batch_size", c.batch_size},
          {"max_age", c.max_age},
          {"year_base", c.year_base},
          {"n_years", c.n_years},
          {"n_regions", c.n_regions},
          {"seed", c.seed}};
}

ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig c) {
  if (j.contains("preset")) c = ModelConfig::from_preset(j.at("preset").get<std::string>());
#define CEL_READ(field) c.field = j.value(#field, c.field)
  CEL_READ(hidden);
  CEL_READ(intermediate);
  CEL_READ(n_layers);
  CEL_READ(heads);
  CEL_READ(hidden_dropout);
  CEL_READ(attention_dropout);
  CEL_READ(activation);
  CEL_READ(init_range);
  CEL_READ(max_seq_len);
  CEL_READ(delta);
  CEL_READ(mem_mask_fraction);
  CEL_READ(mem_replace_fraction);
  CEL_READ(mem_keep_fraction);
  CEL_READ(static_mask_prob);
  CEL_READ(vae_latent_dim);
  CEL_READ(head_hidden);
  CEL_READ(learning_rate);
  CEL_READ(adam_beta1);
  CEL_READ(adam_beta2);
  CEL_READ(adam_eps);
  CEL_READ(epochs_pretrain);
  CEL_READ(epochs_joint);
  CEL_READ(min_steps);
  CEL_READ(decay_rate);
  CEL_READ(batch_size);
  CEL_READ(max_age);
  CEL_READ(year_base);
  CEL_READ(n_years);
  CEL_READ(n_regions);
  CEL_READ(seed);
#undef CEL_READ
  c.validate();
  return c;
}

}  // namespace cel::tbehrt
