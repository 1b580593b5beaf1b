#ifndef STRUCEMB_MODEL_HPP
#define STRUCEMB_MODEL_HPP

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "strucemb/container.hpp"
#include "strucemb/error.hpp"
#include "strucemb/rng.hpp"
#include "strucemb/tensor.hpp"

namespace strucemb {

using TokenId = std::uint32_t;
inline constexpr TokenId kEosToken = 256;

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_model = 64;
  std::size_t vocab = 257;
  double rope_base = 10000.0;
  std::size_t max_pos = 8192;
  std::uint64_t seed = 0;

  std::size_t d_head() const { return n_heads == 0 ? 0 : d_model / n_heads; }
  std::size_t d_ff() const { return 4 * d_model; }

  void validate() const {
    if (n_layers == 0) fail(ErrorCode::invalid_argument, "n_layers must be positive");
    if (n_heads == 0 || d_model == 0 || d_model % n_heads != 0)
      fail(ErrorCode::invalid_argument, "d_model must be a positive multiple of n_heads");
    if (d_head() % 2 != 0) fail(ErrorCode::invalid_argument, "d_head must be even for rotary positions");
    if (vocab < 257) fail(ErrorCode::invalid_argument, "vocab must cover 256 bytes plus EOS");
    if (max_pos < 2) fail(ErrorCode::invalid_argument, "max_pos must be at least 2");
    if (!(rope_base > 1.0) || !std::isfinite(rope_base))
      fail(ErrorCode::invalid_argument, "rope_base must be a finite value > 1");
  }

  bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"n_layers", c.n_layers}, {"n_heads", c.n_heads}, {"d_model", c.d_model},
       {"vocab", c.vocab},       {"rope_base", c.rope_base}, {"max_pos", c.max_pos},
       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("n_layers").get_to(c.n_layers);
  j.at("n_heads").get_to(c.n_heads);
  j.at("d_model").get_to(c.d_model);
  j.at("vocab").get_to(c.vocab);
  j.at("rope_base").get_to(c.rope_base);
  j.at("max_pos").get_to(c.max_pos);
  j.at("seed").get_to(c.seed);
}

struct LayerWeights {
  Matrix wq, wk, wv, wo;         // [d_model x d_model], applied as x * W
  std::vector<float> attn_norm;  // [d_model]
  std::vector<float> mlp_norm;   // [d_model]
  Matrix mlp_up;                 // [d_model x 4 d_model]
  Matrix mlp_down;               // [4 d_model x d_model]

  bool operator==(const LayerWeights&) const = default;
};

struct Weights {
  ModelConfig config;
  Matrix token_embedding;  // [vocab x d_model]
  std::vector<LayerWeights> layers;
  std::vector<float> final_norm;

  bool operator==(const Weights&) const = default;
};

/// Per-layer keys and values of a block of already-encoded tokens. Keys are
/// stored after the rotary rotation, so positions are baked in.
struct LayerKV {
  std::vector<Matrix> keys;    // per layer [tokens x d_model]
  std::vector<Matrix> values;  // per layer [tokens x d_model]
  std::vector<std::size_t> positions;

  std::size_t token_count() const { return positions.size(); }

  bool operator==(const LayerKV&) const = default;
};

/// Unordered collection of past blocks every new token may attend to.
using PastBag = std::vector<const LayerKV*>;

struct Embedding {
  std::vector<float> values;
  std::string strategy;
  std::optional<double> alpha;

  std::size_t dim() const { return values.size(); }
};

struct ForwardResult {
  Matrix hidden;  // final-norm hidden states [tokens x d_model]
  LayerKV kv;
};

/// UTF-8 bytes followed by the EOS id.
inline std::vector<TokenId> tokenize(std::string_view text) {
  std::vector<TokenId> ids;
  ids.reserve(text.size() + 1);
  for (char c : text) ids.push_back(static_cast<unsigned char>(c));
  ids.push_back(kEosToken);
  return ids;
}

namespace detail {

inline Matrix random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
  Matrix m(rows, cols);
  for (auto& v : m.data) v = static_cast<float>(rng.normal(0.0, stddev));
  return m;
}

}  // namespace detail

inline Weights init_weights(const ModelConfig& config) {
  config.validate();
  constexpr double kInitStd = 0.02;
  Rng rng(config.seed);
  const std::size_t d = config.d_model;
  Weights w;
  w.config = config;
  w.token_embedding = detail::random_matrix(rng, config.vocab, d, kInitStd);
  w.layers.resize(config.n_layers);
  for (auto& layer : w.layers) {
    layer.wq = detail::random_matrix(rng, d, d, kInitStd);
    layer.wk = detail::random_matrix(rng, d, d, kInitStd);
    layer.wv = detail::random_matrix(rng, d, d, kInitStd);
    layer.wo = detail::random_matrix(rng, d, d, kInitStd);
    layer.mlp_up = detail::random_matrix(rng, d, config.d_ff(), kInitStd);
    layer.mlp_down = detail::random_matrix(rng, config.d_ff(), d, kInitStd);
    layer.attn_norm.assign(d, 1.0f);
    layer.mlp_norm.assign(d, 1.0f);
  }
  w.final_norm.assign(d, 1.0f);
  return w;
}

namespace kernels {

/// Dot product with eight interleaved partial sums combined in a fixed order,
/// so the result does not depend on how the caller partitions work.
inline float dot(const float* __restrict a, const float* __restrict b, std::size_t n) {
  float lane[8] = {};
  const std::size_t whole = n - n % 8;
  for (std::size_t i = 0; i < whole; i += 8)
    for (std::size_t j = 0; j < 8; ++j) lane[j] += a[i + j] * b[i + j];
  float tail = 0.0f;
  for (std::size_t i = whole; i < n; ++i) tail += a[i] * b[i];
  return (((lane[0] + lane[4]) + (lane[1] + lane[5])) + ((lane[2] + lane[6]) + (lane[3] + lane[7]))) + tail;
}

/// Keys and values of one head for a run of visible tokens, stored
/// dimension-major so scores and weighted sums stream across tokens.
struct HeadPanel {
  std::size_t dh = 0;
  std::size_t capacity = 0;
  std::size_t count = 0;
  std::vector<float> keys;    // [dh x capacity]
  std::vector<float> values;  // [dh x capacity]

  void reset(std::size_t head_dim, std::size_t tokens) {
    dh = head_dim;
    capacity = tokens;
    count = 0;
    keys.resize(dh * capacity);
    values.resize(dh * capacity);
  }

  void push(const float* k, const float* v) {
    for (std::size_t i = 0; i < dh; ++i) {
      keys[i * capacity + count] = k[i];
      values[i * capacity + count] = v[i];
    }
    ++count;
  }
};

/// Max-subtracted softmax attention of one query head over the first
/// `visible` tokens of a panel. Writes the weighted value sum into `out`.
inline void attend(std::span<const float> query, const HeadPanel& panel, std::size_t visible, float scale,
                   std::vector<float>& scores, std::span<float> out) {
  const std::size_t dh = query.size();
  scores.assign(visible, 0.0f);
  float* __restrict sc = scores.data();
  for (std::size_t i = 0; i < dh; ++i) {
    const float qi = query[i];
    const float* __restrict row = panel.keys.data() + i * panel.capacity;
    for (std::size_t s = 0; s < visible; ++s) sc[s] += qi * row[s];
  }
  float max_score = -INFINITY;
  for (std::size_t s = 0; s < visible; ++s) {
    sc[s] *= scale;
    if (sc[s] > max_score) max_score = sc[s];
  }
  float denom = 0.0f;
  for (std::size_t s = 0; s < visible; ++s) {
    sc[s] = std::exp(sc[s] - max_score);
    denom += sc[s];
  }
  const float inv = 1.0f / denom;
  for (std::size_t i = 0; i < dh; ++i) out[i] = dot(panel.values.data() + i * panel.capacity, sc, visible) * inv;
}

/// Everything in a block except attention: residual update with the attention
/// output, then the pre-norm GELU MLP.
inline void finish_block(const LayerWeights& layer, const Matrix& attn, Matrix& x) {
  const Matrix projected = matmul(attn, layer.wo);
  for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] += projected.data[i];
  Matrix h = matmul(rms_norm_rows(x, layer.mlp_norm), layer.mlp_up);
  for (auto& v : h.data) v = gelu(v);
  const Matrix down = matmul(h, layer.mlp_down);
  for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] += down.data[i];
}

}  // namespace kernels

inline Matrix embed_tokens(const Weights& w, std::span<const TokenId> tokens) {
  Matrix x(tokens.size(), w.config.d_model);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    if (tokens[t] >= w.config.vocab)
      fail(ErrorCode::invalid_argument, "token id " + std::to_string(tokens[t]) + " outside vocabulary");
    const auto src = w.token_embedding.row(tokens[t]);
    std::copy(src.begin(), src.end(), x.row(t).begin());
  }
  return x;
}

/// Forward pass over already-embedded inputs. New tokens attend causally
/// among themselves and to every token of every past block.
inline ForwardResult forward_embedded(const Weights& w, Matrix x,
                                      std::span<const std::size_t> positions,
                                      const PastBag& past = {}) {
  const auto& cfg = w.config;
  const std::size_t n_tok = x.rows;
  const std::size_t d = cfg.d_model;
  const std::size_t n_heads = cfg.n_heads;
  const std::size_t dh = cfg.d_head();
  if (positions.size() != n_tok)
    fail(ErrorCode::invalid_argument, "position id count does not match token count");
  if (x.cols != d) fail(ErrorCode::shape_mismatch, "input width does not match d_model");
  for (auto p : positions)
    if (p >= cfg.max_pos)
      fail(ErrorCode::position_overflow,
           "position id " + std::to_string(p) + " >= max_pos " + std::to_string(cfg.max_pos));
  std::size_t n_past = 0;
  for (const LayerKV* kv : past) {
    if (kv->keys.size() != cfg.n_layers || kv->values.size() != cfg.n_layers)
      fail(ErrorCode::layer_mismatch, "past KV layer count does not match the model");
    for (std::size_t l = 0; l < cfg.n_layers; ++l)
      if (kv->keys[l].cols != d || kv->values[l].cols != d ||
          kv->keys[l].rows != kv->token_count() || kv->values[l].rows != kv->token_count())
        fail(ErrorCode::shape_mismatch, "past KV width does not match the model");
    n_past += kv->token_count();
  }

  ForwardResult result;
  result.kv.positions.assign(positions.begin(), positions.end());
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  kernels::HeadPanel panel;
  std::vector<float> scores;

  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto& layer = w.layers[l];
    const Matrix xn = kernels::rms_norm_rows(x, layer.attn_norm);
    Matrix q = kernels::matmul(xn, layer.wq);
    Matrix k = kernels::matmul(xn, layer.wk);
    Matrix v = kernels::matmul(xn, layer.wv);
    for (std::size_t t = 0; t < n_tok; ++t) {
      kernels::apply_rope(q.row(t), n_heads, dh, positions[t], cfg.rope_base);
      kernels::apply_rope(k.row(t), n_heads, dh, positions[t], cfg.rope_base);
    }

    Matrix attn(n_tok, d);
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t off = h * dh;
      panel.reset(dh, n_past + n_tok);
      for (const LayerKV* kv : past) {
        const Matrix& pk = kv->keys[l];
        const Matrix& pv = kv->values[l];
        for (std::size_t s = 0; s < pk.rows; ++s) panel.push(pk.data.data() + s * d + off, pv.data.data() + s * d + off);
      }
      for (std::size_t t = 0; t < n_tok; ++t) panel.push(k.data.data() + t * d + off, v.data.data() + t * d + off);
      // Token t sees the whole bag plus new tokens 0..t.
      for (std::size_t t = 0; t < n_tok; ++t)
        kernels::attend(q.row(t).subspan(off, dh), panel, n_past + t + 1, scale, scores, attn.row(t).subspan(off, dh));
    }
    kernels::finish_block(layer, attn, x);
    result.kv.keys.push_back(std::move(k));
    result.kv.values.push_back(std::move(v));
  }
  result.hidden = kernels::rms_norm_rows(x, w.final_norm);
  return result;
}

inline ForwardResult forward(const Weights& w, std::span<const TokenId> tokens,
                             std::span<const std::size_t> positions, const PastBag& past = {}) {
  if (positions.size() != tokens.size())
    fail(ErrorCode::invalid_argument, "position id count does not match token count");
  return forward_embedded(w, embed_tokens(w, tokens), positions, past);
}

inline std::vector<std::size_t> position_range(std::size_t start, std::size_t count) {
  std::vector<std::size_t> p(count);
  for (std::size_t i = 0; i < count; ++i) p[i] = start + i;
  return p;
}

/// Scales `v` to unit length; throws `degenerate` on a zero or non-finite norm.
inline std::vector<float> normalized(std::span<const float> v, std::string_view what) {
  const double n = l2_norm(v);
  if (!(n > 0.0) || !std::isfinite(n))
    fail(ErrorCode::degenerate, std::string(what) + ": vector has zero or non-finite norm");
  std::vector<float> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i)
    out[i] = static_cast<float>(static_cast<double>(v[i]) / n);
  return out;
}

/// Last-token pooling.
inline Embedding pool_last(const Matrix& hidden) {
  if (hidden.rows == 0) fail(ErrorCode::invalid_argument, "pool_last needs at least one token");
  return Embedding{normalized(hidden.row(hidden.rows - 1), "pool_last"), {}, {}};
}

/// FNV-1a over the config and every parameter's bit pattern, as 16 hex digits.
inline std::string fingerprint(const Weights& w) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix_bytes = [&h](const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ull;
    }
  };
  auto mix = [&](const std::vector<float>& v) { mix_bytes(v.data(), v.size() * sizeof(float)); };
  const std::string cfg = nlohmann::json(w.config).dump();
  mix_bytes(cfg.data(), cfg.size());
  mix(w.token_embedding.data);
  for (const auto& l : w.layers) {
    for (const auto* m : {&l.wq, &l.wk, &l.wv, &l.wo, &l.mlp_up, &l.mlp_down}) mix(m->data);
    mix(l.attn_norm);
    mix(l.mlp_norm);
  }
  mix(w.final_norm);
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline TensorFile weights_to_container(const Weights& w) {
  TensorFile file;
  file.meta = {{"kind", "weights"}, {"config", w.config}};
  auto add = [&file](std::string name, const Matrix& m) {
    file.tensors.push_back({std::move(name), {m.rows, m.cols}, m.data});
  };
  auto add_vec = [&file](std::string name, const std::vector<float>& v) {
    file.tensors.push_back({std::move(name), {v.size()}, v});
  };
  add("token_embedding", w.token_embedding);
  for (std::size_t i = 0; i < w.layers.size(); ++i) {
    const auto& l = w.layers[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    add(p + "wq", l.wq);
    add(p + "wk", l.wk);
    add(p + "wv", l.wv);
    add(p + "wo", l.wo);
    add_vec(p + "attn_norm", l.attn_norm);
    add_vec(p + "mlp_norm", l.mlp_norm);
    add(p + "mlp_up", l.mlp_up);
    add(p + "mlp_down", l.mlp_down);
  }
  add_vec("final_norm", w.final_norm);
  return file;
}

inline Weights weights_from_container(const TensorFile& file) {
  Weights w;
  try {
    if (file.meta.at("kind") != "weights")
      fail(ErrorCode::shape_mismatch, "container does not hold model weights");
    w.config = file.meta.at("config").get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::malformed_record, std::string("weights header: ") + e.what());
  }
  w.config.validate();
  const auto& cfg = w.config;
  auto take = [&file](const std::string& name, std::vector<std::size_t> shape) -> const NamedTensor& {
    const NamedTensor* t = file.find(name);
    if (t == nullptr) fail(ErrorCode::shape_mismatch, "missing tensor '" + name + "'");
    if (t->shape != shape) fail(ErrorCode::shape_mismatch, "tensor '" + name + "' shape disagrees with config");
    return *t;
  };
  auto matrix = [&](const std::string& name, std::size_t r, std::size_t c) {
    Matrix m(r, c);
    m.data = take(name, {r, c}).data;
    return m;
  };
  auto vec = [&](const std::string& name, std::size_t n) { return take(name, {n}).data; };

  const std::size_t d = cfg.d_model;
  w.token_embedding = matrix("token_embedding", cfg.vocab, d);
  w.layers.resize(cfg.n_layers);
  for (std::size_t i = 0; i < cfg.n_layers; ++i) {
    auto& l = w.layers[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    l.wq = matrix(p + "wq", d, d);
    l.wk = matrix(p + "wk", d, d);
    l.wv = matrix(p + "wv", d, d);
    l.wo = matrix(p + "wo", d, d);
    l.attn_norm = vec(p + "attn_norm", d);
    l.mlp_norm = vec(p + "mlp_norm", d);
    l.mlp_up = matrix(p + "mlp_up", d, cfg.d_ff());
    l.mlp_down = matrix(p + "mlp_down", cfg.d_ff(), d);
  }
  w.final_norm = vec("final_norm", d);
  return w;
}

inline void save_weights(const Weights& w, const std::filesystem::path& path) {
  write_container(path, weights_to_container(w));
}

inline Weights load_weights(const std::filesystem::path& path) {
  return weights_from_container(read_container(path));
}

}  // namespace strucemb

#endif  // STRUCEMB_MODEL_HPP
