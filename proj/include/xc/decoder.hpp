#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "xc/digest.hpp"
#include "xc/error.hpp"
#include "xc/tensor.hpp"

namespace xc {

inline constexpr float kNormEps = 1e-5f;

// Pre-norm decoder geometry: RMSNorm -> causal self-attention with rotary
// positions -> residual -> RMSNorm -> gated-SiLU MLP -> residual, repeated
// n_layers times, then a final RMSNorm and a tied-shape LM head.  The MLP
// hidden width is fixed at 4*d_model.
struct DecoderConfig {
  int64_t n_layers = 0;
  int64_t d_model = 0;
  int64_t n_heads = 0;
  int64_t head_dim = 0;
  int64_t vocab_size = 0;
  int64_t max_seq = 0;
  float rope_theta = 10000.f;

  void validate() const {
    if (n_layers <= 0 || d_model <= 0 || n_heads <= 0 || head_dim <= 0 ||
        vocab_size <= 0)
      throw ConfigError("decoder config fields must be positive");
    if (n_heads * head_dim != d_model)
      throw ConfigError("n_heads*head_dim = " +
                        std::to_string(n_heads * head_dim) +
                        " must equal d_model = " + std::to_string(d_model));
    if (head_dim % 2 != 0)
      throw ConfigError("head_dim must be even for rotary positions, got " +
                        std::to_string(head_dim));
    if (max_seq < 2)
      throw ConfigError("max_seq must be at least 2, got " +
                        std::to_string(max_seq));
    if (!(rope_theta > 0.f))
      throw ConfigError("rope_theta must be positive");
  }

  int64_t mlp_hidden() const { return 4 * d_model; }

  int64_t param_count() const {
    int64_t per_layer = 2 * d_model                  // two norms
                        + 4 * d_model * d_model      // q,k,v,o
                        + 3 * d_model * mlp_hidden();  // gate,up,down
    return vocab_size * d_model + n_layers * per_layer + d_model +
           vocab_size * d_model;
  }

  std::string canonical() const {
    uint32_t theta_bits;
    static_assert(sizeof(theta_bits) == sizeof(rope_theta));
    __builtin_memcpy(&theta_bits, &rope_theta, 4);
    return "decoder|" + std::to_string(n_layers) + "|" +
           std::to_string(d_model) + "|" + std::to_string(n_heads) + "|" +
           std::to_string(head_dim) + "|" + std::to_string(vocab_size) + "|" +
           std::to_string(max_seq) + "|" + std::to_string(theta_bits);
  }

  uint64_t digest() const { return fnv1a64(canonical()); }

  bool operator==(const DecoderConfig&) const = default;
};

struct LayerWeights {
  Tensor attn_norm, wq, wk, wv, wo;
  Tensor mlp_norm, w_gate, w_up, w_down;
};

struct DecoderWeights {
  DecoderConfig config;
  Tensor tok_embed;  // [V, d]
  std::vector<LayerWeights> layers;
  Tensor final_norm;  // [d]
  Tensor lm_head;     // [V, d]
  bool frozen = true;

  static DecoderWeights random_init(const DecoderConfig& cfg, uint64_t seed,
                                    bool trainable = false) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    DecoderWeights w;
    w.config = cfg;
    w.frozen = !trainable;
    int64_t d = cfg.d_model, ff = cfg.mlp_hidden();
    float ps = (float)(1.0 / std::sqrt((double)d));
    w.tok_embed = Tensor::randn({cfg.vocab_size, d}, rng, 1.f, trainable);
    for (int64_t l = 0; l < cfg.n_layers; ++l) {
      LayerWeights lw;
      lw.attn_norm = Tensor::full({d}, 1.f, trainable);
      lw.wq = Tensor::randn({d, d}, rng, ps, trainable);
      lw.wk = Tensor::randn({d, d}, rng, ps, trainable);
      lw.wv = Tensor::randn({d, d}, rng, ps, trainable);
      lw.wo = Tensor::randn({d, d}, rng, ps, trainable);
      lw.mlp_norm = Tensor::full({d}, 1.f, trainable);
      lw.w_gate = Tensor::randn({d, ff}, rng, ps, trainable);
      lw.w_up = Tensor::randn({d, ff}, rng, ps, trainable);
      lw.w_down = Tensor::randn({ff, d}, rng,
                                (float)(1.0 / std::sqrt((double)ff)),
                                trainable);
      w.layers.push_back(std::move(lw));
    }
    w.final_norm = Tensor::full({d}, 1.f, trainable);
    w.lm_head = Tensor::randn({cfg.vocab_size, d}, rng, ps, trainable);
    return w;
  }

  std::vector<std::pair<std::string, Tensor>> named_tensors() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("tok_embed", tok_embed);
    for (size_t l = 0; l < layers.size(); ++l) {
      std::string p = "layer" + std::to_string(l) + ".";
      const auto& lw = layers[l];
      out.emplace_back(p + "attn_norm", lw.attn_norm);
      out.emplace_back(p + "wq", lw.wq);
      out.emplace_back(p + "wk", lw.wk);
      out.emplace_back(p + "wv", lw.wv);
      out.emplace_back(p + "wo", lw.wo);
      out.emplace_back(p + "mlp_norm", lw.mlp_norm);
      out.emplace_back(p + "w_gate", lw.w_gate);
      out.emplace_back(p + "w_up", lw.w_up);
      out.emplace_back(p + "w_down", lw.w_down);
    }
    out.emplace_back("final_norm", final_norm);
    out.emplace_back("lm_head", lm_head);
    return out;
  }

  int64_t param_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : named_tensors()) n += t.numel();
    return n;
  }
};

// Per-layer key/value tensors accumulated during incremental decoding.
// Keys are stored post-rotation, so entries are position-bound.
struct KvPair {
  int64_t n_layers = 0, n_heads = 0, head_dim = 0;
  int64_t size = 0;                      // tokens held
  std::vector<std::vector<float>> k, v;  // [L][size * n_heads*head_dim]

  static KvPair for_config(const DecoderConfig& cfg) {
    KvPair p;
    p.n_layers = cfg.n_layers;
    p.n_heads = cfg.n_heads;
    p.head_dim = cfg.head_dim;
    p.k.resize((size_t)cfg.n_layers);
    p.v.resize((size_t)cfg.n_layers);
    return p;
  }

  void check_geometry(const DecoderConfig& cfg) const {
    if (n_layers != cfg.n_layers || n_heads != cfg.n_heads ||
        head_dim != cfg.head_dim)
      throw CacheError("kv geometry [" + std::to_string(n_layers) + "," +
                       std::to_string(n_heads) + "," +
                       std::to_string(head_dim) +
                       "] does not match decoder config");
  }

  void append_layer(int64_t layer, const float* krow, const float* vrow) {
    int64_t c = n_heads * head_dim;
    k[(size_t)layer].insert(k[(size_t)layer].end(), krow, krow + c);
    v[(size_t)layer].insert(v[(size_t)layer].end(), vrow, vrow + c);
  }
};

struct ForwardResult {
  Tensor logits;                    // [T, V]
  Tensor last_hidden;               // [T, d] after the final norm
  std::vector<Tensor> layer_inputs;  // residual stream entering each layer
};

namespace detail {

inline Tensor multi_head_attend(const Tensor& q, const Tensor& k,
                                const Tensor& v, int64_t n_heads,
                                int64_t head_dim, const AttendOpts& opts) {
  std::vector<Tensor> heads;
  heads.reserve((size_t)n_heads);
  for (int64_t h = 0; h < n_heads; ++h) {
    int64_t c0 = h * head_dim, c1 = (h + 1) * head_dim;
    heads.push_back(attend(slice_cols(q, c0, c1), slice_cols(k, c0, c1),
                           slice_cols(v, c0, c1), opts));
  }
  return n_heads == 1 ? heads[0] : concat_cols(heads);
}

inline Tensor mlp_block(const Tensor& x, const LayerWeights& lw) {
  Tensor xn = rms_norm(x, lw.mlp_norm, kNormEps);
  Tensor gated = mul(silu(matmul(xn, lw.w_gate)), matmul(xn, lw.w_up));
  return add(x, matmul(gated, lw.w_down));
}

}  // namespace detail

inline void check_token_ids(const std::vector<int64_t>& tokens,
                            const DecoderConfig& cfg) {
  for (auto t : tokens)
    if (t < 0 || t >= cfg.vocab_size)
      throw ShapeError("token id " + std::to_string(t) +
                       " outside vocab of size " +
                       std::to_string(cfg.vocab_size));
}

// Full parallel pass over a token sequence.  Retains per-layer residual
// stream inputs (h_0 .. h_{L-1}); optionally captures post-rotation K/V
// per layer into `capture_kv`.
inline ForwardResult forward_full(const DecoderWeights& w,
                                  const std::vector<int64_t>& tokens,
                                  KvPair* capture_kv = nullptr) {
  const DecoderConfig& cfg = w.config;
  int64_t T = (int64_t)tokens.size();
  if (T < 1) throw ContractError("forward over an empty sequence");
  if (T > cfg.max_seq)
    throw LengthError("sequence length " + std::to_string(T) +
                      " exceeds max_seq " + std::to_string(cfg.max_seq));
  check_token_ids(tokens, cfg);
  if (capture_kv) {
    *capture_kv = KvPair::for_config(cfg);
    capture_kv->size = T;
  }
  ForwardResult res;
  Tensor h = gather_rows(w.tok_embed, tokens);
  for (int64_t l = 0; l < cfg.n_layers; ++l) {
    res.layer_inputs.push_back(h);
    const LayerWeights& lw = w.layers[(size_t)l];
    Tensor xn = rms_norm(h, lw.attn_norm, kNormEps);
    Tensor q = rope(matmul(xn, lw.wq), cfg.n_heads, 0, cfg.rope_theta);
    Tensor k = rope(matmul(xn, lw.wk), cfg.n_heads, 0, cfg.rope_theta);
    Tensor v = matmul(xn, lw.wv);
    if (capture_kv) {
      capture_kv->k[(size_t)l] = k.data();
      capture_kv->v[(size_t)l] = v.data();
    }
    AttendOpts opt;  // causal, offset 0
    Tensor attn =
        detail::multi_head_attend(q, k, v, cfg.n_heads, cfg.head_dim, opt);
    h = add(h, matmul(attn, lw.wo));
    h = detail::mlp_block(h, lw);
  }
  res.last_hidden = rms_norm(h, w.final_norm, kNormEps);
  res.logits = matmul_nt(res.last_hidden, w.lm_head);
  return res;
}

// One incremental step: appends the token's K/V to the cache and returns
// logits [1, V].  Row-wise math is identical to forward_full, so a stepwise
// pass reproduces the parallel pass exactly.
inline Tensor decode_step(const DecoderWeights& w, int64_t token,
                          KvPair& cache) {
  const DecoderConfig& cfg = w.config;
  cache.check_geometry(cfg);
  int64_t pos = cache.size;
  if (pos + 1 > cfg.max_seq)
    throw LengthError("decode position " + std::to_string(pos) +
                      " exceeds max_seq " + std::to_string(cfg.max_seq));
  check_token_ids({token}, cfg);
  int64_t C = cfg.n_heads * cfg.head_dim;
  Tensor h = gather_rows(w.tok_embed, {token});
  int64_t S = pos + 1;
  for (int64_t l = 0; l < cfg.n_layers; ++l) {
    const LayerWeights& lw = w.layers[(size_t)l];
    Tensor xn = rms_norm(h, lw.attn_norm, kNormEps);
    Tensor q = rope(matmul(xn, lw.wq), cfg.n_heads, pos, cfg.rope_theta);
    Tensor k = rope(matmul(xn, lw.wk), cfg.n_heads, pos, cfg.rope_theta);
    Tensor v = matmul(xn, lw.wv);
    cache.append_layer(l, k.data().data(), v.data().data());
    Tensor ks({S, C}, cache.k[(size_t)l]);
    Tensor vs({S, C}, cache.v[(size_t)l]);
    AttendOpts opt;
    opt.causal_offset = S - 1;
    Tensor attn =
        detail::multi_head_attend(q, ks, vs, cfg.n_heads, cfg.head_dim, opt);
    h = add(h, matmul(attn, lw.wo));
    h = detail::mlp_block(h, lw);
  }
  cache.size = S;
  Tensor last = rms_norm(h, w.final_norm, kNormEps);
  return matmul_nt(last, w.lm_head);
}

// Greedy decoding: feeds the prompt, then repeatedly emits the argmax
// (first index on ties) until `stop_id` appears or max_new tokens are out.
// The returned continuation excludes the prompt and the stop token.
inline std::vector<int64_t> greedy_generate(const DecoderWeights& w,
                                            const std::vector<int64_t>& prompt,
                                            int64_t max_new, int64_t stop_id,
                                            KvPair* cache_in = nullptr) {
  if (prompt.empty()) throw ContractError("greedy_generate: empty prompt");
  KvPair local = KvPair::for_config(w.config);
  KvPair& cache = cache_in ? *cache_in : local;
  Tensor logits;
  for (auto t : prompt) logits = decode_step(w, t, cache);
  std::vector<int64_t> out;
  for (int64_t i = 0; i < max_new; ++i) {
    int64_t next = argmax_first(logits.data().data(), w.config.vocab_size);
    if (next == stop_id) break;
    out.push_back(next);
    if ((int64_t)out.size() == max_new) break;
    if (cache.size + 1 > w.config.max_seq) break;
    logits = decode_step(w, next, cache);
  }
  return out;
}

}  // namespace xc
