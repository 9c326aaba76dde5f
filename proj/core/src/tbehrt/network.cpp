#include "cel/tbehrt/network.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "cel/errors.hpp"

namespace cel::tbehrt {

namespace {

constexpr double kLayerNormEps = 1e-6;

// Eigen picks GEMV, lazy or blocked GEMM by shape, and those round
// differently. A fixed per-row accumulation order keeps each patient's outputs
// independent of who else is in the batch.
Matrix linear_fwd(const Matrix& x, const Linear& l) {
  const Eigen::Index m = x.rows(), k = x.cols(), n = l.w.cols();
  Matrix y(m, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    double* yj = y.col(j).data();
    const double bj = l.b(0, j);
    for (Eigen::Index i = 0; i < m; ++i) yj[i] = bj;
    for (Eigen::Index p = 0; p < k; ++p) {
      const double w = l.w(p, j);
      const double* xp = x.col(p).data();
      for (Eigen::Index i = 0; i < m; ++i) yj[i] = std::fma(xp[i], w, yj[i]);
    }
  }
  return y;
}

// Accumulates weight gradients; returns dL/dx.
Matrix linear_bwd(const Matrix& x, const Matrix& dy, const Linear& l, Linear& g) {
  g.w.noalias() += x.transpose() * dy;
  g.b += dy.colwise().sum();
  return dy * l.w.transpose();
}

Matrix layer_norm_fwd(const Matrix& x, const LayerNorm& ln, LayerNormCache& cache) {
  const auto n = x.rows();
  cache.xhat.resize(n, x.cols());
  cache.rstd.resize(n);
  Matrix out(n, x.cols());
  for (Eigen::Index r = 0; r < n; ++r) {
    const double mu = x.row(r).mean();
    const Eigen::RowVectorXd d = x.row(r).array() - mu;
    const double var = d.squaredNorm() / static_cast<double>(x.cols());
    const double rs = 1.0 / std::sqrt(var + kLayerNormEps);
    cache.rstd[r] = rs;
    cache.xhat.row(r) = d * rs;
    out.row(r) = cache.xhat.row(r).cwiseProduct(ln.gamma.row(0)) + ln.beta.row(0);
  }
  return out;
}

Matrix layer_norm_bwd(const Matrix& dy, const LayerNormCache& cache, const LayerNorm& ln, LayerNorm& g) {
  g.gamma += dy.cwiseProduct(cache.xhat).colwise().sum();
  g.beta += dy.colwise().sum();
  const Matrix dxhat = dy.array().rowwise() * ln.gamma.row(0).array();
  const double inv_h = 1.0 / static_cast<double>(dy.cols());
  Matrix dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const double mean_d = dxhat.row(r).sum() * inv_h;
    const double mean_dx = dxhat.row(r).dot(cache.xhat.row(r)) * inv_h;
    dx.row(r) = cache.rstd[r] * (dxhat.row(r).array() - mean_d - cache.xhat.row(r).array() * mean_dx).matrix();
  }
  return dx;
}

// Inverted dropout mask; empty when dropout is inactive.
Matrix dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, bool on, Rng* rng) {
  if (!on || p <= 0.0) return {};
  const double keep = 1.0 / (1.0 - p);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = rng->uniform() < p ? 0.0 : keep;
  }
  return m;
}

Matrix apply_mask(const Matrix& x, const Matrix& mask) { return mask.size() == 0 ? x : x.cwiseProduct(mask); }

Matrix map_gelu(const Matrix& x) { return x.unaryExpr([](double v) { return gelu(v); }); }
Matrix map_elu(const Matrix& x) { return x.unaryExpr([](double v) { return elu(v); }); }

double sigmoid_clipped(double logit, double& p_raw) {
  p_raw = 1.0 / (1.0 + std::exp(-logit));
  return std::clamp(p_raw, kProbFloor, kProbCeil);
}

void softmax_rows(Matrix& s) {
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    const double mx = s.row(r).maxCoeff();
    s.row(r) = (s.row(r).array() - mx).exp();
    s.row(r) /= s.row(r).sum();
  }
}

struct SlotIndex {
  int code = 0, age = 0, year = 0, position = 0;
};

int static_row(int value, const Matrix& table, const char* name) {
  if (value == kMaskedStatic) return static_cast<int>(table.rows()) - 1;
  if (value < 0 || value >= table.rows() - 1) {
    throw ValidationError(std::string("embedding: ") + name + " value " + std::to_string(value) + " out of range");
  }
  return value;
}

SlotIndex temporal_index(const EncodedSequence& seq, std::size_t i, const ModelParams& p, const ModelConfig& cfg) {
  SlotIndex s;
  s.code = seq.codes[i];
  if (s.code < 0 || s.code >= p.code_emb.rows()) {
    throw ValidationError("embedding: code " + std::to_string(s.code) + " outside vocabulary of size " +
                          std::to_string(p.code_emb.rows()));
  }
  s.position = seq.positions[i];
  if (s.position < 0 || s.position >= p.position_emb.rows()) {
    throw ValidationError("embedding: position " + std::to_string(s.position) + " exceeds max_seq_len");
  }
  s.age = std::clamp(seq.ages[i], 0, static_cast<int>(p.age_emb.rows()) - 1);
  s.year = std::clamp(seq.years[i] - cfg.year_base, 0, static_cast<int>(p.year_emb.rows()) - 1);
  return s;
}

const Matrix& static_table(const ModelParams& p, std::size_t v) {
  return v == 0 ? p.sex_emb : (v == 1 ? p.region_emb : p.smoking_emb);
}

Matrix& static_table(ModelParams& p, std::size_t v) {
  return v == 0 ? p.sex_emb : (v == 1 ? p.region_emb : p.smoking_emb);
}

constexpr const char* kStaticNames[kNumStatics] = {"sex", "region", "smoking"};

void check_sequence(const EncodedSequence& seq) {
  const std::size_t n = seq.codes.size();
  if (n < 1 + kNumStatics || seq.ages.size() != n || seq.years.size() != n || seq.positions.size() != n) {
    throw ValidationError("embedding: malformed encoded sequence");
  }
}

}  // namespace

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_grad(double x) {
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2)) + x * pdf;
}

double elu(double x) { return x > 0.0 ? x : std::expm1(x); }
double elu_grad(double x) { return x > 0.0 ? 1.0 : std::exp(x); }

Matrix embed_sequence(const EncodedSequence& seq, const ModelParams& params, const ModelConfig& cfg) {
  check_sequence(seq);
  const std::size_t n = seq.length();
  const std::size_t off = seq.static_offset();
  Matrix out(static_cast<Eigen::Index>(n), params.code_emb.cols());
  for (std::size_t i = 0; i < off; ++i) {
    const SlotIndex s = temporal_index(seq, i, params, cfg);
    out.row(static_cast<Eigen::Index>(i)) = params.code_emb.row(s.code) + params.age_emb.row(s.age) +
                                            params.year_emb.row(s.year) + params.position_emb.row(s.position);
  }
  for (std::size_t v = 0; v < kNumStatics; ++v) {
    const Matrix& table = static_table(params, v);
    out.row(static_cast<Eigen::Index>(off + v)) = table.row(static_row(seq.statics[v], table, kStaticNames[v]));
  }
  return out;
}


Matrix encode(const Matrix& embedded, std::span<const Segment> segments, const ModelParams& params,
              const ModelConfig& cfg, bool dropout_on, Rng* rng, EncoderCache* cache) {
  if (dropout_on && rng == nullptr) throw ValidationError("encode: dropout requires an rng");
  if (!embedded.allFinite()) throw NumericError("encode: non-finite embedding");
  const auto rows = embedded.rows();
  const int h = cfg.hidden;
  const int dh = h / cfg.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  EncoderCache local;
  EncoderCache& c = cache ? *cache : local;
  c.segments.assign(segments.begin(), segments.end());
  c.layers.clear();
  c.embed_drop = dropout_mask(rows, h, cfg.hidden_dropout, dropout_on, rng);
  Matrix x = apply_mask(embedded, c.embed_drop);

  for (const EncoderLayer& layer : params.layers) {
    EncoderLayerCache lc;
    lc.normed_attn = layer_norm_fwd(x, layer.norm_attn, lc.norm_attn);
    lc.q = linear_fwd(lc.normed_attn, layer.query);
    lc.k = linear_fwd(lc.normed_attn, layer.key);
    lc.v = linear_fwd(lc.normed_attn, layer.value);
    lc.context.resize(rows, h);
    for (const Segment& seg : segments) {
      for (int head = 0; head < cfg.heads; ++head) {
        const auto block = [&](const Matrix& m) { return m.block(seg.start, head * dh, seg.length, dh); };
        Matrix s = block(lc.q).lazyProduct(block(lc.k).transpose()) * scale;
        softmax_rows(s);
        Matrix drop = dropout_mask(seg.length, seg.length, cfg.attention_dropout, dropout_on, rng);
        lc.context.block(seg.start, head * dh, seg.length, dh) = apply_mask(s, drop).lazyProduct(block(lc.v));
        lc.attn_probs.push_back(std::move(s));
        lc.attn_drop.push_back(std::move(drop));
      }
    }
    lc.attn_out_drop = dropout_mask(rows, h, cfg.hidden_dropout, dropout_on, rng);
    x += apply_mask(linear_fwd(lc.context, layer.attn_out), lc.attn_out_drop);
    lc.normed_ff = layer_norm_fwd(x, layer.norm_ff, lc.norm_ff);
    lc.ff_pre = linear_fwd(lc.normed_ff, layer.ff_in);
    lc.ff_act = map_gelu(lc.ff_pre);
    lc.ff_out_drop = dropout_mask(rows, h, cfg.hidden_dropout, dropout_on, rng);
    x += apply_mask(linear_fwd(lc.ff_act, layer.ff_out), lc.ff_out_drop);
    if (cache) c.layers.push_back(std::move(lc));
  }
  return layer_norm_fwd(x, params.final_norm, c.final_norm);
}

Matrix encode(const Matrix& embedded, const ModelParams& params, const ModelConfig& cfg, bool dropout_on, Rng* rng,
              EncoderCache* cache) {
  const Segment seg{0, embedded.rows()};
  return encode(embedded, std::span<const Segment>(&seg, 1), params, cfg, dropout_on, rng, cache);
}

std::vector<ForwardOutput> heads(const Matrix& latents, std::span<const Segment> segments,
                                 const ModelParams& params, const BatchOptions& options, HeadCache* cache) {
  HeadCache local;
  HeadCache& c = cache ? *cache : local;
  const auto b = static_cast<Eigen::Index>(segments.size());
  std::vector<ForwardOutput> outs(segments.size());

  c.cls.resize(b, latents.cols());
  for (Eigen::Index i = 0; i < b; ++i) c.cls.row(i) = latents.row(segments[i].start);
  c.pooled = linear_fwd(c.cls, params.pooler).array().tanh();

  c.g_hidden_pre = linear_fwd(c.pooled, params.propensity_hidden);
  const Matrix g_logit = linear_fwd(map_elu(c.g_hidden_pre), params.propensity_out);
  const OutcomeBranch* branches[2] = {&params.outcome0, &params.outcome1};
  Matrix q_logit[2];
  for (int k = 0; k < 2; ++k) {
    c.h1_pre[k] = linear_fwd(c.pooled, branches[k]->hidden1);
    c.h2_pre[k] = linear_fwd(map_elu(c.h1_pre[k]), branches[k]->hidden2);
    q_logit[k] = linear_fwd(map_elu(c.h2_pre[k]), branches[k]->out);
  }
  double raw = 0.0;
  for (Eigen::Index i = 0; i < b; ++i) {
    ForwardOutput& o = outs[static_cast<std::size_t>(i)];
    o.g_logit = g_logit(i, 0);
    o.q0_logit = q_logit[0](i, 0);
    o.q1_logit = q_logit[1](i, 0);
    o.g = sigmoid_clipped(o.g_logit, raw);
    o.q0 = sigmoid_clipped(o.q0_logit, raw);
    o.q1 = sigmoid_clipped(o.q1_logit, raw);
  }

  c.mem_rows.clear();
  if (!options.mem_slots.empty()) {
    if (options.mem_slots.size() != segments.size()) throw ValidationError("heads: one MEM slot list per sequence");
    for (std::size_t i = 0; i < segments.size(); ++i) {
      for (int s : options.mem_slots[i]) {
        if (s < 0 || s >= segments[i].length) throw ValidationError("heads: MEM slot out of range");
        c.mem_rows.push_back(segments[i].start + s);
      }
      outs[i].mem_slots = options.mem_slots[i];
    }
  }
  if (!c.mem_rows.empty()) {
    c.mem_in.resize(static_cast<Eigen::Index>(c.mem_rows.size()), latents.cols());
    for (std::size_t r = 0; r < c.mem_rows.size(); ++r) c.mem_in.row(static_cast<Eigen::Index>(r)) = latents.row(c.mem_rows[r]);
    c.mem_pre = linear_fwd(c.mem_in, params.mem_transform);
    const Matrix logits = linear_fwd(map_gelu(c.mem_pre), params.mem_decoder);
    Eigen::Index row = 0;
    for (auto& o : outs) {
      const auto n = static_cast<Eigen::Index>(o.mem_slots.size());
      o.mem_logits = logits.middleRows(row, n);
      row += n;
    }
  }

  if (options.vae) {
    c.last.resize(b, latents.cols());
    for (Eigen::Index i = 0; i < b; ++i) c.last.row(i) = latents.row(segments[i].start + segments[i].length - 1);
    const Matrix mean = linear_fwd(c.last, params.vae_mean);
    c.vae_logvar = linear_fwd(c.last, params.vae_logvar);
    const auto d = mean.cols();
    if (options.vae_noise) {
      if (options.vae_noise->rows() != b || options.vae_noise->cols() != d) {
        throw ValidationError("heads: VAE noise has the wrong shape");
      }
      c.vae_noise = *options.vae_noise;
    } else if (options.dropout) {
      if (options.rng == nullptr) throw ValidationError("heads: VAE sampling requires an rng");
      c.vae_noise.resize(b, d);
      for (Eigen::Index i = 0; i < b; ++i) {
        for (Eigen::Index j = 0; j < d; ++j) c.vae_noise(i, j) = options.rng->normal();
      }
    } else {
      c.vae_noise = Matrix::Zero(b, d);
    }
    c.vae_z = mean + (0.5 * c.vae_logvar.array()).exp().matrix().cwiseProduct(c.vae_noise);
    const Matrix recon[kNumStatics] = {linear_fwd(c.vae_z, params.decode_sex),
                                       linear_fwd(c.vae_z, params.decode_region),
                                       linear_fwd(c.vae_z, params.decode_smoking)};
    for (Eigen::Index i = 0; i < b; ++i) {
      VaeOutput v;
      v.mean = mean.row(i);
      v.logvar = c.vae_logvar.row(i);
      v.z = c.vae_z.row(i);
      v.noise = c.vae_noise.row(i);
      for (std::size_t k = 0; k < kNumStatics; ++k) v.recon_logits[k] = recon[k].row(i);
      outs[static_cast<std::size_t>(i)].vae = std::move(v);
    }
  }
  return outs;
}

ForwardOutput heads(const Matrix& latents, const ModelParams& params, const ForwardOptions& options) {
  const Segment seg{0, latents.rows()};
  BatchOptions bo;
  bo.dropout = options.dropout;
  bo.rng = options.rng;
  if (!options.mem_slots.empty()) bo.mem_slots = {options.mem_slots};
  bo.vae = options.vae;
  if (options.vae_noise) bo.vae_noise = Matrix(*options.vae_noise);
  return std::move(heads(latents, std::span<const Segment>(&seg, 1), params, bo, nullptr).front());
}

std::vector<ForwardOutput> forward_batch(std::span<const EncodedSequence* const> seqs, const ModelParams& params,
                                         const ModelConfig& cfg, const BatchOptions& options, BatchCache* cache) {
  std::vector<Segment> segments;
  segments.reserve(seqs.size());
  Eigen::Index rows = 0;
  for (const EncodedSequence* s : seqs) {
    segments.push_back({rows, static_cast<Eigen::Index>(s->length())});
    rows += static_cast<Eigen::Index>(s->length());
  }
  Matrix embedded(rows, cfg.hidden);
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    embedded.middleRows(segments[i].start, segments[i].length) = embed_sequence(*seqs[i], params, cfg);
  }
  if (cache == nullptr) {
    const Matrix latents = encode(embedded, segments, params, cfg, options.dropout, options.rng, nullptr);
    return heads(latents, segments, params, options, nullptr);
  }
  cache->seqs.clear();
  for (const EncodedSequence* s : seqs) cache->seqs.push_back(*s);
  cache->vae = options.vae;
  cache->latents = encode(embedded, segments, params, cfg, options.dropout, options.rng, &cache->encoder);
  return heads(cache->latents, segments, params, options, &cache->heads);
}

ForwardOutput forward(const EncodedSequence& seq, const ModelParams& params, const ModelConfig& cfg,
                      const ForwardOptions& options, ForwardCache* cache) {
  BatchOptions bo;
  bo.dropout = options.dropout;
  bo.rng = options.rng;
  if (!options.mem_slots.empty()) bo.mem_slots = {options.mem_slots};
  bo.vae = options.vae;
  if (options.vae_noise) bo.vae_noise = Matrix(*options.vae_noise);
  const EncodedSequence* ptr = &seq;
  return std::move(forward_batch(std::span<const EncodedSequence* const>(&ptr, 1), params, cfg, bo, cache).front());
}

void backward(const BatchCache& cache, const ModelParams& params, const ModelConfig& cfg,
              std::span<const OutputGrads> dout, ModelParams& grads) {
  const HeadCache& hc = cache.heads;
  const EncoderCache& ec = cache.encoder;
  const auto& segments = ec.segments;
  if (dout.size() != segments.size()) throw ValidationError("backward: one gradient set per sequence required");
  const auto b = static_cast<Eigen::Index>(segments.size());
  const int h = cfg.hidden;
  Matrix dlat = Matrix::Zero(cache.latents.rows(), h);

  Matrix dg(b, 1), dq[2] = {Matrix(b, 1), Matrix(b, 1)};
  for (Eigen::Index i = 0; i < b; ++i) {
    const OutputGrads& d = dout[static_cast<std::size_t>(i)];
    dg(i, 0) = d.g_logit;
    dq[0](i, 0) = d.q0_logit;
    dq[1](i, 0) = d.q1_logit;
  }

  // Supervised heads share the pooled CLS vector.
  Matrix dpooled = Matrix::Zero(b, h);
  {
    Matrix d = linear_bwd(map_elu(hc.g_hidden_pre), dg, params.propensity_out, grads.propensity_out);
    d = d.cwiseProduct(hc.g_hidden_pre.unaryExpr([](double v) { return elu_grad(v); }));
    dpooled += linear_bwd(hc.pooled, d, params.propensity_hidden, grads.propensity_hidden);
  }
  const OutcomeBranch* branches[2] = {&params.outcome0, &params.outcome1};
  OutcomeBranch* gbranches[2] = {&grads.outcome0, &grads.outcome1};
  for (int k = 0; k < 2; ++k) {
    Matrix d = linear_bwd(map_elu(hc.h2_pre[k]), dq[k], branches[k]->out, gbranches[k]->out);
    d = d.cwiseProduct(hc.h2_pre[k].unaryExpr([](double v) { return elu_grad(v); }));
    d = linear_bwd(map_elu(hc.h1_pre[k]), d, branches[k]->hidden2, gbranches[k]->hidden2);
    d = d.cwiseProduct(hc.h1_pre[k].unaryExpr([](double v) { return elu_grad(v); }));
    dpooled += linear_bwd(hc.pooled, d, branches[k]->hidden1, gbranches[k]->hidden1);
  }
  {
    const Matrix dpre = dpooled.array() * (1.0 - hc.pooled.array().square());
    const Matrix dcls = linear_bwd(hc.cls, dpre, params.pooler, grads.pooler);
    for (Eigen::Index i = 0; i < b; ++i) dlat.row(segments[i].start) += dcls.row(i);
  }

  if (!hc.mem_rows.empty()) {
    Matrix dlogits = Matrix::Zero(static_cast<Eigen::Index>(hc.mem_rows.size()), params.mem_decoder.w.cols());
    Eigen::Index row = 0;
    for (std::size_t i = 0; i < segments.size(); ++i) {
      // Row count per sequence is recovered from the cached MEM rows.
      Eigen::Index n = 0;
      const Eigen::Index lo = segments[i].start, hi = lo + segments[i].length;
      for (std::size_t r = static_cast<std::size_t>(row); r < hc.mem_rows.size() && hc.mem_rows[r] >= lo && hc.mem_rows[r] < hi; ++r) ++n;
      const Matrix& d = dout[i].mem_logits;
      if (d.size() > 0) {
        if (d.rows() != n || d.cols() != dlogits.cols()) throw ValidationError("backward: MEM gradient shape mismatch");
        dlogits.middleRows(row, n) = d;
      }
      row += n;
    }
    Matrix d = linear_bwd(map_gelu(hc.mem_pre), dlogits, params.mem_decoder, grads.mem_decoder);
    d = d.cwiseProduct(hc.mem_pre.unaryExpr([](double v) { return gelu_grad(v); }));
    const Matrix din = linear_bwd(hc.mem_in, d, params.mem_transform, grads.mem_transform);
    for (std::size_t r = 0; r < hc.mem_rows.size(); ++r) dlat.row(hc.mem_rows[r]) += din.row(static_cast<Eigen::Index>(r));
  }

  if (cache.vae) {
    const Linear* decoders[kNumStatics] = {&params.decode_sex, &params.decode_region, &params.decode_smoking};
    Linear* gdecoders[kNumStatics] = {&grads.decode_sex, &grads.decode_region, &grads.decode_smoking};
    const auto d = hc.vae_z.cols();
    Matrix dz = Matrix::Zero(b, d);
    for (std::size_t v = 0; v < kNumStatics; ++v) {
      Matrix dr = Matrix::Zero(b, decoders[v]->w.cols());
      for (Eigen::Index i = 0; i < b; ++i) {
        const Vector& g = dout[static_cast<std::size_t>(i)].recon_logits[v];
        if (g.size() > 0) dr.row(i) = g;
      }
      dz += linear_bwd(hc.vae_z, dr, *decoders[v], *gdecoders[v]);
    }
    Matrix dmean = dz;
    Matrix dlogvar = 0.5 * dz.cwiseProduct(hc.vae_noise).cwiseProduct((0.5 * hc.vae_logvar.array()).exp().matrix());
    for (Eigen::Index i = 0; i < b; ++i) {
      const OutputGrads& g = dout[static_cast<std::size_t>(i)];
      if (g.vae_mean.size() > 0) dmean.row(i) += g.vae_mean;
      if (g.vae_logvar.size() > 0) dlogvar.row(i) += g.vae_logvar;
    }
    Matrix dlast = linear_bwd(hc.last, dmean, params.vae_mean, grads.vae_mean);
    dlast += linear_bwd(hc.last, dlogvar, params.vae_logvar, grads.vae_logvar);
    for (Eigen::Index i = 0; i < b; ++i) dlat.row(segments[i].start + segments[i].length - 1) += dlast.row(i);
  }

  Matrix dx = layer_norm_bwd(dlat, ec.final_norm, params.final_norm, grads.final_norm);
  const int dh = h / cfg.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t li = params.layers.size(); li-- > 0;) {
    const EncoderLayer& layer = params.layers[li];
    EncoderLayer& gl = grads.layers[li];
    const EncoderLayerCache& lc = ec.layers[li];

    // Feed-forward block.
    Matrix d = apply_mask(dx, lc.ff_out_drop);
    d = linear_bwd(lc.ff_act, d, layer.ff_out, gl.ff_out);
    d = d.cwiseProduct(lc.ff_pre.unaryExpr([](double v) { return gelu_grad(v); }));
    d = linear_bwd(lc.normed_ff, d, layer.ff_in, gl.ff_in);
    dx += layer_norm_bwd(d, lc.norm_ff, layer.norm_ff, gl.norm_ff);

    // Attention block.
    const Matrix dctx = linear_bwd(lc.context, apply_mask(dx, lc.attn_out_drop), layer.attn_out, gl.attn_out);
    Matrix dq_all(dx.rows(), h), dk_all(dx.rows(), h), dv_all(dx.rows(), h);
    std::size_t idx = 0;
    for (const Segment& seg : segments) {
      for (int head = 0; head < cfg.heads; ++head, ++idx) {
        const auto block = [&](const Matrix& m) { return m.block(seg.start, head * dh, seg.length, dh); };
        const Matrix& p = lc.attn_probs[idx];
        const Matrix& drop = lc.attn_drop[idx];
        const Matrix dctx_h = block(dctx);
        dv_all.block(seg.start, head * dh, seg.length, dh) = apply_mask(p, drop).transpose().lazyProduct(dctx_h);
        const Matrix dp = apply_mask(dctx_h.lazyProduct(block(lc.v).transpose()), drop);
        const Eigen::VectorXd rowdot = dp.cwiseProduct(p).rowwise().sum();
        const Matrix ds = (p.array() * (dp.colwise() - rowdot).array()).matrix() * scale;
        dq_all.block(seg.start, head * dh, seg.length, dh) = ds.lazyProduct(block(lc.k));
        dk_all.block(seg.start, head * dh, seg.length, dh) = ds.transpose().lazyProduct(block(lc.q));
      }
    }
    Matrix dnorm = linear_bwd(lc.normed_attn, dq_all, layer.query, gl.query);
    dnorm += linear_bwd(lc.normed_attn, dk_all, layer.key, gl.key);
    dnorm += linear_bwd(lc.normed_attn, dv_all, layer.value, gl.value);
    dx += layer_norm_bwd(dnorm, lc.norm_attn, layer.norm_attn, gl.norm_attn);
  }

  const Matrix demb = apply_mask(dx, ec.embed_drop);
  for (std::size_t si = 0; si < segments.size(); ++si) {
    const EncodedSequence& seq = cache.seqs[si];
    const Eigen::Index base = segments[si].start;
    const std::size_t off = seq.static_offset();
    for (std::size_t i = 0; i < off; ++i) {
      const SlotIndex s = temporal_index(seq, i, params, cfg);
      const auto row = demb.row(base + static_cast<Eigen::Index>(i));
      grads.code_emb.row(s.code) += row;
      grads.age_emb.row(s.age) += row;
      grads.year_emb.row(s.year) += row;
      grads.position_emb.row(s.position) += row;
    }
    for (std::size_t v = 0; v < kNumStatics; ++v) {
      const int r = static_row(seq.statics[v], static_table(params, v), kStaticNames[v]);
      static_table(grads, v).row(r) += demb.row(base + static_cast<Eigen::Index>(off + v));
    }
  }
}

void backward(const BatchCache& cache, const ModelParams& params, const ModelConfig& cfg, const OutputGrads& dout,
              ModelParams& grads) {
  backward(cache, params, cfg, std::span<const OutputGrads>(&dout, 1), grads);
}

}  // namespace cel::tbehrt
