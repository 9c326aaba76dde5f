#pragma once

#include <array>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "cel/cohort.hpp"
#include "cel/rng.hpp"
#include "cel/tbehrt/config.hpp"
#include "cel/tbehrt/params.hpp"

namespace cel::tbehrt {

using Vector = Eigen::RowVectorXd;

/// Probability clip applied to g, q0 and q1.
inline constexpr double kProbFloor = 1e-6;
inline constexpr double kProbCeil = 1.0 - 1e-6;

double gelu(double x);
double gelu_grad(double x);
double elu(double x);
double elu_grad(double x);

/// L x hidden input to the encoder. Temporal slots (CLS included) sum code,
/// age, year and position rows; static slots use their own tables, with
/// kMaskedStatic mapped to the trailing row. Ages and years are clamped into
/// their tables; an out-of-range code, position or static throws.
Matrix embed_sequence(const EncodedSequence& seq, const ModelParams& params, const ModelConfig& cfg);

/// Row range of one sequence inside a stacked batch.
struct Segment {
  Eigen::Index start = 0;
  Eigen::Index length = 0;
};

struct LayerNormCache {
  Matrix xhat;
  Eigen::VectorXd rstd;
};

struct EncoderLayerCache {
  LayerNormCache norm_attn;
  Matrix normed_attn;
  Matrix q, k, v;
  /// Softmax output per (segment, head), index segment * heads + head. Rows
  /// sum to one; attention dropout is applied afterwards.
  std::vector<Matrix> attn_probs;
  std::vector<Matrix> attn_drop;
  Matrix context;
  Matrix attn_out_drop;
  LayerNormCache norm_ff;
  Matrix normed_ff;
  Matrix ff_pre;
  Matrix ff_act;
  Matrix ff_out_drop;
};

struct EncoderCache {
  std::vector<Segment> segments;
  Matrix embed_drop;
  std::vector<EncoderLayerCache> layers;
  LayerNormCache final_norm;
};

/// Pre-LN transformer stack plus a final layer norm over stacked sequences;
/// attention never crosses segment boundaries. Dropout draws come from `rng`
/// and only happen when `dropout_on` is set.
Matrix encode(const Matrix& embedded, std::span<const Segment> segments, const ModelParams& params,
              const ModelConfig& cfg, bool dropout_on, Rng* rng, EncoderCache* cache = nullptr);
/// Single-sequence form.
Matrix encode(const Matrix& embedded, const ModelParams& params, const ModelConfig& cfg, bool dropout_on,
              Rng* rng = nullptr, EncoderCache* cache = nullptr);

struct VaeOutput {
  Vector mean;
  Vector logvar;
  Vector z;
  Vector noise;
  /// Reconstruction logits for sex (2), region (R) and smoking (2).
  std::array<Vector, kNumStatics> recon_logits;
};

struct ForwardOutput {
  double g = 0.5;
  double q0 = 0.5;
  double q1 = 0.5;
  double g_logit = 0.0;
  double q0_logit = 0.0;
  double q1_logit = 0.0;
  /// Slots whose MEM distributions were computed; rows of mem_logits.
  std::vector<int> mem_slots;
  Matrix mem_logits;
  std::optional<VaeOutput> vae;
};

struct ForwardOptions {
  bool dropout = false;
  /// Needed when dropout is on or the VAE samples its noise.
  Rng* rng = nullptr;
  /// Slots to decode with the MEM head.
  std::vector<int> mem_slots;
  bool vae = false;
  /// Fixed reparameterization noise. Without it the VAE draws from rng when
  /// dropout is on and uses z = mean otherwise.
  std::optional<Vector> vae_noise;
};

struct BatchOptions {
  bool dropout = false;
  Rng* rng = nullptr;
  /// Per-sequence MEM slots; empty or one entry per sequence.
  std::vector<std::vector<int>> mem_slots;
  bool vae = false;
  /// batch x latent noise, same semantics as ForwardOptions::vae_noise.
  std::optional<Matrix> vae_noise;
};

struct HeadCache {
  Matrix cls;
  Matrix pooled;
  Matrix g_hidden_pre;
  std::array<Matrix, 2> h1_pre, h2_pre;
  std::vector<Eigen::Index> mem_rows;
  Matrix mem_in;
  Matrix mem_pre;
  Matrix last;
  Matrix vae_logvar;
  Matrix vae_noise;
  Matrix vae_z;
};

struct BatchCache {
  std::vector<EncodedSequence> seqs;
  EncoderCache encoder;
  Matrix latents;
  HeadCache heads;
  bool vae = false;
};

/// Propensity and outcome heads on the pooled CLS latent of each segment,
/// plus the optional MEM and VAE heads.
std::vector<ForwardOutput> heads(const Matrix& latents, std::span<const Segment> segments,
                                 const ModelParams& params, const BatchOptions& options, HeadCache* cache = nullptr);
/// Single-sequence form.
ForwardOutput heads(const Matrix& latents, const ModelParams& params, const ForwardOptions& options);

/// Batched forward pass. With dropout off each sequence's output does not
/// depend on the rest of the batch.
std::vector<ForwardOutput> forward_batch(std::span<const EncodedSequence* const> seqs, const ModelParams& params,
                                         const ModelConfig& cfg, const BatchOptions& options = {},
                                         BatchCache* cache = nullptr);

using ForwardCache = BatchCache;

ForwardOutput forward(const EncodedSequence& seq, const ModelParams& params, const ModelConfig& cfg,
                      const ForwardOptions& options = {}, ForwardCache* cache = nullptr);

/// Loss gradients with respect to the forward outputs of one sequence.
/// Probabilities are reached through their logits; empty members mean zero.
struct OutputGrads {
  double g_logit = 0.0;
  double q0_logit = 0.0;
  double q1_logit = 0.0;
  Matrix mem_logits;
  Vector vae_mean;
  Vector vae_logvar;
  std::array<Vector, kNumStatics> recon_logits;
};

/// Accumulates parameter gradients into `grads` (shaped like `params`); one
/// OutputGrads per cached sequence.
void backward(const BatchCache& cache, const ModelParams& params, const ModelConfig& cfg,
              std::span<const OutputGrads> dout, ModelParams& grads);
void backward(const BatchCache& cache, const ModelParams& params, const ModelConfig& cfg, const OutputGrads& dout,
              ModelParams& grads);

}  // namespace cel::tbehrt
