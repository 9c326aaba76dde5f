#include "cel/tbehrt/params.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "cel/errors.hpp"

namespace cel::tbehrt {

namespace {

Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols, double sd, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = sd * rng.normal();
  }
  return m;
}

Linear make_linear(int in, int out, double sd, Rng& rng) {
  return Linear{normal_matrix(in, out, sd, rng), Matrix::Zero(1, out)};
}

LayerNorm make_norm(int dim) { return LayerNorm{Matrix::Ones(1, dim), Matrix::Zero(1, dim)}; }

static_assert(std::endian::native == std::endian::little, "params.bin I/O assumes a little-endian host");

void put_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); }

std::uint32_t get_u32(std::istream& in) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw ParseError("truncated params file", 0);
  return v;
}

std::string get_bytes(std::istream& in, std::uint32_t n) {
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) throw ParseError("truncated params file", 0);
  return s;
}

}  // namespace

ModelParams ModelParams::init(const ModelConfig& cfg, std::size_t vocab_size, Rng& rng) {
  cfg.validate();
  const double sd = cfg.init_range;
  const int h = cfg.hidden;
  ModelParams p;
  p.code_emb = normal_matrix(static_cast<Eigen::Index>(vocab_size), h, sd, rng);
  p.age_emb = normal_matrix(cfg.max_age + 1, h, sd, rng);
  p.year_emb = normal_matrix(cfg.n_years, h, sd, rng);
  p.position_emb = normal_matrix(cfg.max_seq_len, h, sd, rng);
  p.sex_emb = normal_matrix(3, h, sd, rng);
  p.region_emb = normal_matrix(cfg.n_regions + 1, h, sd, rng);
  p.smoking_emb = normal_matrix(3, h, sd, rng);
  for (int l = 0; l < cfg.n_layers; ++l) {
    EncoderLayer layer;
    layer.norm_attn = make_norm(h);
    layer.query = make_linear(h, h, sd, rng);
    layer.key = make_linear(h, h, sd, rng);
    layer.value = make_linear(h, h, sd, rng);
    layer.attn_out = make_linear(h, h, sd, rng);
    layer.norm_ff = make_norm(h);
    layer.ff_in = make_linear(h, cfg.intermediate, sd, rng);
    layer.ff_out = make_linear(cfg.intermediate, h, sd, rng);
    p.layers.push_back(std::move(layer));
  }
  p.final_norm = make_norm(h);
  // Heads are small MLPs on a tanh-pooled vector; a wider init keeps their
  // gradients from vanishing at the start of training.
  const double head_sd = 0.1;
  p.pooler = make_linear(h, h, head_sd, rng);
  p.propensity_hidden = make_linear(h, cfg.head_hidden, head_sd, rng);
  p.propensity_out = make_linear(cfg.head_hidden, 1, head_sd, rng);
  for (OutcomeBranch* br : {&p.outcome0, &p.outcome1}) {
    br->hidden1 = make_linear(h, cfg.head_hidden, head_sd, rng);
    br->hidden2 = make_linear(cfg.head_hidden, cfg.head_hidden, head_sd, rng);
    br->out = make_linear(cfg.head_hidden, 1, head_sd, rng);
  }
  p.mem_transform = make_linear(h, h, sd, rng);
  p.mem_decoder = make_linear(h, static_cast<int>(vocab_size), sd, rng);
  p.vae_mean = make_linear(h, cfg.vae_latent_dim, sd, rng);
  p.vae_logvar = make_linear(h, cfg.vae_latent_dim, sd, rng);
  p.decode_sex = make_linear(cfg.vae_latent_dim, 2, sd, rng);
  p.decode_region = make_linear(cfg.vae_latent_dim, cfg.n_regions, sd, rng);
  p.decode_smoking = make_linear(cfg.vae_latent_dim, 2, sd, rng);
  return p;
}

ModelParams ModelParams::zeros_like(const ModelParams& other) {
  ModelParams z = other;
  z.set_zero();
  return z;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  visit([&](const std::string&, const Matrix& m) { n += static_cast<std::size_t>(m.size()); });
  return n;
}

bool ModelParams::all_finite() const {
  bool ok = true;
  visit([&](const std::string&, const Matrix& m) { ok = ok && m.allFinite(); });
  return ok;
}

void ModelParams::set_zero() {
  visit([](const std::string&, Matrix& m) { m.setZero(); });
}

void ModelParams::add_scaled(const ModelParams& other, double scale) {
  std::vector<const Matrix*> src;
  other.visit([&](const std::string&, const Matrix& m) { src.push_back(&m); });
  std::size_t i = 0;
  visit([&](const std::string&, Matrix& m) { m += scale * *src[i++]; });
}

void save_params(const std::filesystem::path& path, const ModelConfig& cfg,
                 const std::vector<std::pair<std::string, ModelParams>>& sets) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write("CELPARAM", 8);
  put_u32(out, kParamsFormatVersion);
  const std::string cfg_json = to_json(cfg).dump();
  put_u32(out, static_cast<std::uint32_t>(cfg_json.size()));
  out.write(cfg_json.data(), static_cast<std::streamsize>(cfg_json.size()));

  std::vector<std::pair<std::string, const Matrix*>> manifest;
  for (const auto& [prefix, params] : sets) {
    params.visit([&](const std::string& name, const Matrix& m) { manifest.emplace_back(prefix + "/" + name, &m); });
  }
  put_u32(out, static_cast<std::uint32_t>(manifest.size()));
  for (const auto& [name, m] : manifest) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(out, static_cast<std::uint32_t>(m->rows()));
    put_u32(out, static_cast<std::uint32_t>(m->cols()));
  }
  for (const auto& [name, m] : manifest) {
    for (Eigen::Index r = 0; r < m->rows(); ++r) {
      for (Eigen::Index c = 0; c < m->cols(); ++c) {
        const double v = (*m)(r, c);
        out.write(reinterpret_cast<const char*>(&v), sizeof v);
      }
    }
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

ParamsFile load_params(const std::filesystem::path& path, std::size_t vocab_size) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  if (get_bytes(in, 8) != "CELPARAM") throw ParseError("not a params file", 0);
  const std::uint32_t version = get_u32(in);
  if (version != kParamsFormatVersion) throw ParseError("unsupported params version " + std::to_string(version), 0);
  ParamsFile file;
  file.config = model_config_from_json(nlohmann::json::parse(get_bytes(in, get_u32(in))));

  struct Entry {
    std::string name;
    std::uint32_t rows, cols;
  };
  std::vector<Entry> manifest(get_u32(in));
  for (auto& e : manifest) {
    e.name = get_bytes(in, get_u32(in));
    e.rows = get_u32(in);
    e.cols = get_u32(in);
  }

  Rng dummy(0);
  std::size_t cursor = 0;
  while (cursor < manifest.size()) {
    const std::string prefix = manifest[cursor].name.substr(0, manifest[cursor].name.find('/'));
    ModelParams p = ModelParams::init(file.config, vocab_size, dummy);
    p.visit([&](const std::string& name, Matrix& m) {
      if (cursor >= manifest.size()) throw ParseError("params manifest ends early", 0);
      const Entry& e = manifest[cursor++];
      if (e.name != prefix + "/" + name || e.rows != m.rows() || e.cols != m.cols()) {
        throw ParseError("params manifest mismatch at '" + e.name + "'", 0);
      }
    });
    file.sets.emplace_back(prefix, std::move(p));
  }
  for (auto& [prefix, p] : file.sets) {
    p.visit([&](const std::string&, Matrix& m) {
      for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
          double v;
          in.read(reinterpret_cast<char*>(&v), sizeof v);
          if (!in) throw ParseError("truncated params data", 0);
          m(r, c) = v;
        }
      }
    });
  }
  return file;
}

}  // namespace cel::tbehrt
