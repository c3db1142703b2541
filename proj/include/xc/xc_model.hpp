#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "xc/decoder.hpp"
#include "xc/encoder.hpp"
#include "xc/error.hpp"
#include "xc/tensor.hpp"

namespace xc {

// Indices of decoder layers that receive a cross-attention module in front:
// ascending {i : i mod (skip+1) == 0}, truncated to `count`.
inline std::vector<int64_t> placement_indices(int64_t n_layers, int64_t skip,
                                              int64_t count) {
  if (n_layers <= 0 || skip < 0 || count <= 0)
    throw ConfigError("placement needs positive layer/count and skip >= 0");
  std::vector<int64_t> idx;
  for (int64_t i = 0; i < n_layers && (int64_t)idx.size() < count;
       i += skip + 1)
    idx.push_back(i);
  if ((int64_t)idx.size() != count)
    throw ConfigError("placement of " + std::to_string(count) +
                      " cross layers with skip " + std::to_string(skip) +
                      " does not fit into " + std::to_string(n_layers) +
                      " layers");
  return idx;
}

struct XCConfig {
  int64_t n_cross_layers = 0;
  int64_t skip = 0;
  bool final_layer = true;  // extra cross module after the last block
  int64_t cross_hidden = 0;
  int64_t cross_n_heads = 0;
  int64_t cross_n_kv_heads = 0;  // must equal cross_n_heads
  bool use_bias = false;
  float dropout_p = 0.f;
  EncoderKind encoder_kind = EncoderKind::DecoderAsEncoder;

  void validate(const DecoderConfig& host) const {
    if (n_cross_layers <= 0 || cross_hidden <= 0 || cross_n_heads <= 0)
      throw ConfigError("cross config fields must be positive");
    if (cross_hidden % cross_n_heads != 0)
      throw ConfigError("cross_hidden = " + std::to_string(cross_hidden) +
                        " not divisible by cross_n_heads = " +
                        std::to_string(cross_n_heads));
    if (cross_n_kv_heads != cross_n_heads)
      throw ConfigError("grouped kv heads unsupported: cross_n_kv_heads must "
                        "equal cross_n_heads");
    if (dropout_p < 0.f || dropout_p >= 1.f)
      throw ConfigError("dropout_p must lie in [0,1)");
    placement_indices(host.n_layers, skip, n_cross_layers);  // must fit
  }

  int64_t cross_head_dim() const { return cross_hidden / cross_n_heads; }

  std::string canonical() const {
    return "xc|" + std::to_string(n_cross_layers) + "|" +
           std::to_string(skip) + "|" + std::to_string((int)final_layer) +
           "|" + std::to_string(cross_hidden) + "|" +
           std::to_string(cross_n_heads) + "|" +
           std::to_string((int)use_bias) + "|" +
           std::to_string((int)encoder_kind);
  }
};

// Parameters of all cross modules (placed + optional final) in closed form.
inline int64_t cross_param_count(int64_t d_model, int64_t d_enc,
                                 const XCConfig& xc) {
  int64_t ch = xc.cross_hidden;
  int64_t per = d_model                      // norm
                + d_model * ch               // wq
                + 2 * d_enc * ch             // wk, wv
                + ch * d_model               // wo
                + 1;                         // gate
  if (xc.use_bias) per += 3 * ch + d_model;
  int64_t modules = xc.n_cross_layers + (xc.final_layer ? 1 : 0);
  return per * modules;
}

// One gated cross-attention module: RMSNorm on the residual stream, query
// projection from the decoder side, key/value projections from the cached
// encoding, output projection, then a residual add scaled by a scalar gate
// that starts at zero.
struct CrossLayerWeights {
  Tensor norm;            // [d_model]
  Tensor wq;              // [d_model, cross_hidden]
  Tensor wk, wv;          // [d_enc, cross_hidden]
  Tensor wo;              // [cross_hidden, d_model]
  Tensor bq, bk, bv, bo;  // defined only when use_bias
  Tensor gate;            // [1], zero-initialized

  static CrossLayerWeights random_init(int64_t d_model, int64_t d_enc,
                                       const XCConfig& xc,
                                       std::mt19937_64& rng) {
    CrossLayerWeights w;
    int64_t ch = xc.cross_hidden;
    float sd = (float)(1.0 / std::sqrt((double)d_model));
    float se = (float)(1.0 / std::sqrt((double)d_enc));
    float sc = (float)(1.0 / std::sqrt((double)ch));
    w.norm = Tensor::full({d_model}, 1.f, true);
    w.wq = Tensor::randn({d_model, ch}, rng, sd, true);
    w.wk = Tensor::randn({d_enc, ch}, rng, se, true);
    w.wv = Tensor::randn({d_enc, ch}, rng, se, true);
    w.wo = Tensor::randn({ch, d_model}, rng, sc, true);
    if (xc.use_bias) {
      w.bq = Tensor::zeros({ch}, true);
      w.bk = Tensor::zeros({ch}, true);
      w.bv = Tensor::zeros({ch}, true);
      w.bo = Tensor::zeros({d_model}, true);
    }
    w.gate = Tensor::zeros({1}, true);
    return w;
  }

  void collect(const std::string& prefix,
               std::vector<std::pair<std::string, Tensor>>& out) const {
    out.emplace_back(prefix + "norm", norm);
    out.emplace_back(prefix + "wq", wq);
    out.emplace_back(prefix + "wk", wk);
    out.emplace_back(prefix + "wv", wv);
    out.emplace_back(prefix + "wo", wo);
    if (bq.defined()) {
      out.emplace_back(prefix + "bq", bq);
      out.emplace_back(prefix + "bk", bk);
      out.emplace_back(prefix + "bv", bv);
      out.emplace_back(prefix + "bo", bo);
    }
    out.emplace_back(prefix + "gate", gate);
  }
};

// Frozen decoder host plus trained cross-attention modules and, for the
// bidirectional variant, a trainable encoder.
struct XCModel {
  DecoderWeights decoder;
  XCConfig xc;
  std::vector<int64_t> placement;        // ascending layer indices
  std::vector<CrossLayerWeights> cross;  // aligned with placement
  CrossLayerWeights final_cross;         // when xc.final_layer
  BidirEncoderWeights bidir;             // when SmallBidirectional

  static XCModel build(DecoderWeights base, const XCConfig& xc,
                       uint64_t seed,
                       const BidirEncoderConfig* bidir_cfg = nullptr) {
    base.config.validate();
    xc.validate(base.config);
    XCModel m;
    m.decoder = std::move(base);
    m.xc = xc;
    m.placement =
        placement_indices(m.decoder.config.n_layers, xc.skip,
                          xc.n_cross_layers);
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
    if (xc.encoder_kind == EncoderKind::SmallBidirectional) {
      if (!bidir_cfg)
        throw ConfigError("bidirectional encoder requested without a config");
      if (bidir_cfg->vocab_size != m.decoder.config.vocab_size)
        throw ConfigError("encoder and decoder must share the vocab");
      m.bidir = BidirEncoderWeights::random_init(*bidir_cfg, seed, true);
    }
    int64_t d_model = m.decoder.config.d_model;
    int64_t de = xc.encoder_kind == EncoderKind::DecoderAsEncoder
                     ? d_model
                     : bidir_cfg->d_enc;
    for (int64_t i = 0; i < xc.n_cross_layers; ++i)
      m.cross.push_back(CrossLayerWeights::random_init(d_model, de, xc, rng));
    if (xc.final_layer)
      m.final_cross = CrossLayerWeights::random_init(d_model, de, xc, rng);
    return m;
  }

  int64_t d_enc() const {
    return xc.encoder_kind == EncoderKind::DecoderAsEncoder
               ? decoder.config.d_model
               : bidir.config.d_enc;
  }

  Tensor encode(const std::vector<int64_t>& context) const {
    return xc.encoder_kind == EncoderKind::DecoderAsEncoder
               ? encode_with_decoder(decoder, context)
               : encode_bidirectional(bidir, context);
  }

  std::vector<std::pair<std::string, Tensor>> trainable_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (size_t i = 0; i < cross.size(); ++i)
      cross[i].collect("cross" + std::to_string(i) + ".", out);
    if (xc.final_layer) final_cross.collect("final_cross.", out);
    if (xc.encoder_kind == EncoderKind::SmallBidirectional)
      for (auto& [n, t] : bidir.named_tensors())
        out.emplace_back("encoder." + n, t);
    return out;
  }

  int64_t trainable_param_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : trainable_parameters()) n += t.numel();
    return n;
  }
};

// Removing the cross-attention modules returns exactly the frozen host.
inline const DecoderWeights& strip_cross_layers(const XCModel& m) {
  return m.decoder;
}

struct XcRunOpts {
  bool training = false;
  std::mt19937_64* rng = nullptr;  // dropout source in training mode
};

namespace detail {

inline Tensor cross_apply(const Tensor& h, const CrossLayerWeights& cl,
                          const Tensor& encoding, const XCConfig& xc,
                          const XcRunOpts& opts) {
  if (encoding.dim(0) == 0) return h;  // no-context mode: identity
  float gv = cl.gate.data()[0];
  // Inference with a still-closed gate skips the block entirely, keeping
  // the residual stream bit-identical to the plain decoder.
  if (!opts.training && gv == 0.f) return h;
  Tensor xn = rms_norm(h, cl.norm, kNormEps);
  Tensor q = matmul(xn, cl.wq);
  Tensor k = matmul(encoding, cl.wk);
  Tensor v = matmul(encoding, cl.wv);
  if (cl.bq.defined()) {
    q = add_bias(q, cl.bq);
    k = add_bias(k, cl.bk);
    v = add_bias(v, cl.bv);
  }
  AttendOpts aopt;
  aopt.causal = false;
  if (opts.training && xc.dropout_p > 0.f) {
    aopt.dropout_p = xc.dropout_p;
    aopt.rng = opts.rng;
  }
  Tensor attn = multi_head_attend(q, k, v, xc.cross_n_heads,
                                  xc.cross_head_dim(), aopt);
  Tensor out = matmul(attn, cl.wo);
  if (cl.bo.defined()) out = add_bias(out, cl.bo);
  return add(h, gate_scale(out, cl.gate));
}

// Precomputed cross-side K/V for one cross module.
inline void cross_kv(const CrossLayerWeights& cl, const Tensor& encoding,
                     Tensor& k, Tensor& v) {
  k = matmul(encoding, cl.wk);
  v = matmul(encoding, cl.wv);
  if (cl.bk.defined()) {
    k = add_bias(k, cl.bk);
    v = add_bias(v, cl.bv);
  }
}

inline Tensor cross_apply_cached(const Tensor& h, const CrossLayerWeights& cl,
                                 const Tensor& k, const Tensor& v,
                                 const XCConfig& xc) {
  if (k.dim(0) == 0) return h;
  if (cl.gate.data()[0] == 0.f) return h;
  Tensor xn = rms_norm(h, cl.norm, kNormEps);
  Tensor q = matmul(xn, cl.wq);
  if (cl.bq.defined()) q = add_bias(q, cl.bq);
  AttendOpts aopt;
  aopt.causal = false;
  Tensor attn = multi_head_attend(q, k, v, xc.cross_n_heads,
                                  xc.cross_head_dim(), aopt);
  Tensor out = matmul(attn, cl.wo);
  if (cl.bo.defined()) out = add_bias(out, cl.bo);
  return add(h, gate_scale(out, cl.gate));
}

}  // namespace detail

// Full pass with interleaved cross-attention.  `encoding` is the cached
// context representation ([Tc, d_enc]; zero rows = no-context mode).
inline ForwardResult xc_forward(const XCModel& m,
                                const std::vector<int64_t>& tokens,
                                const Tensor& encoding,
                                const XcRunOpts& opts = {}) {
  const DecoderConfig& cfg = m.decoder.config;
  int64_t T = (int64_t)tokens.size();
  if (T < 1) throw ContractError("forward over an empty sequence");
  if (T > cfg.max_seq)
    throw LengthError("sequence length " + std::to_string(T) +
                      " exceeds max_seq " + std::to_string(cfg.max_seq));
  check_token_ids(tokens, cfg);
  if (encoding.dim(0) > 0 && encoding.dim(1) != m.d_enc())
    throw ShapeError("encoding width " + std::to_string(encoding.dim(1)) +
                     " does not match d_enc " + std::to_string(m.d_enc()));
  ForwardResult res;
  Tensor h = gather_rows(m.decoder.tok_embed, tokens);
  size_t ci = 0;
  for (int64_t l = 0; l < cfg.n_layers; ++l) {
    if (ci < m.placement.size() && m.placement[ci] == l) {
      h = detail::cross_apply(h, m.cross[ci], encoding, m.xc, opts);
      ++ci;
    }
    res.layer_inputs.push_back(h);
    const LayerWeights& lw = m.decoder.layers[(size_t)l];
    Tensor xn = rms_norm(h, lw.attn_norm, kNormEps);
    Tensor q = rope(matmul(xn, lw.wq), cfg.n_heads, 0, cfg.rope_theta);
    Tensor k = rope(matmul(xn, lw.wk), cfg.n_heads, 0, cfg.rope_theta);
    Tensor v = matmul(xn, lw.wv);
    AttendOpts opt;
    Tensor attn =
        detail::multi_head_attend(q, k, v, cfg.n_heads, cfg.head_dim, opt);
    h = add(h, matmul(attn, lw.wo));
    h = detail::mlp_block(h, lw);
  }
  if (m.xc.final_layer)
    h = detail::cross_apply(h, m.final_cross, encoding, m.xc, opts);
  res.last_hidden = rms_norm(h, m.decoder.final_norm, kNormEps);
  res.logits = matmul_nt(res.last_hidden, m.decoder.lm_head);
  return res;
}

// Incremental decoding state: self-attention KV plus per-module cross K/V
// computed once from the encoding.
struct XcDecodeState {
  KvPair self_cache;
  int64_t context_rows = 0;
  std::vector<Tensor> cross_k, cross_v;  // placement order; final module last
};

inline XcDecodeState make_decode_state(const XCModel& m,
                                       const Tensor& encoding) {
  if (encoding.dim(0) > 0 && encoding.dim(1) != m.d_enc())
    throw ShapeError("encoding width " + std::to_string(encoding.dim(1)) +
                     " does not match d_enc " + std::to_string(m.d_enc()));
  XcDecodeState st;
  st.self_cache = KvPair::for_config(m.decoder.config);
  st.context_rows = encoding.dim(0);
  size_t modules = m.cross.size() + (m.xc.final_layer ? 1u : 0u);
  st.cross_k.resize(modules);
  st.cross_v.resize(modules);
  if (encoding.dim(0) > 0) {
    for (size_t i = 0; i < m.cross.size(); ++i)
      detail::cross_kv(m.cross[i], encoding, st.cross_k[i], st.cross_v[i]);
    if (m.xc.final_layer)
      detail::cross_kv(m.final_cross, encoding, st.cross_k.back(),
                       st.cross_v.back());
  } else {
    for (size_t i = 0; i < modules; ++i) {
      st.cross_k[i] = Tensor({0, m.xc.cross_hidden}, {});
      st.cross_v[i] = Tensor({0, m.xc.cross_hidden}, {});
    }
  }
  return st;
}

inline Tensor xc_decode_step(const XCModel& m, int64_t token,
                             XcDecodeState& st) {
  const DecoderConfig& cfg = m.decoder.config;
  st.self_cache.check_geometry(cfg);
  int64_t pos = st.self_cache.size;
  if (pos + 1 > cfg.max_seq)
    throw LengthError("decode position " + std::to_string(pos) +
                      " exceeds max_seq " + std::to_string(cfg.max_seq));
  check_token_ids({token}, cfg);
  int64_t C = cfg.n_heads * cfg.head_dim;
  Tensor h = gather_rows(m.decoder.tok_embed, {token});
  int64_t S = pos + 1;
  size_t ci = 0;
  for (int64_t l = 0; l < cfg.n_layers; ++l) {
    if (ci < m.placement.size() && m.placement[ci] == l) {
      h = detail::cross_apply_cached(h, m.cross[ci], st.cross_k[ci],
                                     st.cross_v[ci], m.xc);
      ++ci;
    }
    const LayerWeights& lw = m.decoder.layers[(size_t)l];
    Tensor xn = rms_norm(h, lw.attn_norm, kNormEps);
    Tensor q = rope(matmul(xn, lw.wq), cfg.n_heads, pos, cfg.rope_theta);
    Tensor k = rope(matmul(xn, lw.wk), cfg.n_heads, pos, cfg.rope_theta);
    Tensor v = matmul(xn, lw.wv);
    st.self_cache.append_layer(l, k.data().data(), v.data().data());
    Tensor ks({S, C}, st.self_cache.k[(size_t)l]);
    Tensor vs({S, C}, st.self_cache.v[(size_t)l]);
    AttendOpts opt;
    opt.causal_offset = S - 1;
    Tensor attn =
        detail::multi_head_attend(q, ks, vs, cfg.n_heads, cfg.head_dim, opt);
    h = add(h, matmul(attn, lw.wo));
    h = detail::mlp_block(h, lw);
  }
  st.self_cache.size = S;
  if (m.xc.final_layer)
    h = detail::cross_apply_cached(h, m.final_cross, st.cross_k.back(),
                                   st.cross_v.back(), m.xc);
  Tensor last = rms_norm(h, m.decoder.final_norm, kNormEps);
  return matmul_nt(last, m.decoder.lm_head);
}

inline std::vector<int64_t> xc_greedy_generate(const XCModel& m,
                                               const Tensor& encoding,
                                               const std::vector<int64_t>& prompt,
                                               int64_t max_new,
                                               int64_t stop_id) {
  if (prompt.empty()) throw ContractError("xc_greedy_generate: empty prompt");
  XcDecodeState st = make_decode_state(m, encoding);
  Tensor logits;
  for (auto t : prompt) logits = xc_decode_step(m, t, st);
  std::vector<int64_t> out;
  for (int64_t i = 0; i < max_new; ++i) {
    int64_t next =
        argmax_first(logits.data().data(), m.decoder.config.vocab_size);
    if (next == stop_id) break;
    out.push_back(next);
    if ((int64_t)out.size() == max_new) break;
    if (st.self_cache.size + 1 > m.decoder.config.max_seq) break;
    logits = xc_decode_step(m, next, st);
  }
  return out;
}

}  // namespace xc
