#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "xc/decoder.hpp"
#include "xc/error.hpp"
#include "xc/xc_model.hpp"

namespace xc {

enum class CacheStrategy : uint8_t {
  KV = 0,     // per-layer post-rotation keys and values
  JITKV = 1,  // per-layer residual-stream layer inputs; K/V recomputed on load
  XC = 2,     // encoder output consumed by cross-attention
};

inline const char* strategy_name(CacheStrategy s) {
  switch (s) {
    case CacheStrategy::KV: return "kv";
    case CacheStrategy::JITKV: return "jitkv";
    case CacheStrategy::XC: return "xc";
  }
  return "?";
}

inline CacheStrategy strategy_from_name(const std::string& s) {
  if (s == "kv") return CacheStrategy::KV;
  if (s == "jitkv") return CacheStrategy::JITKV;
  if (s == "xc") return CacheStrategy::XC;
  throw UsageError("unknown cache strategy '" + s + "' (kv, jitkv, xc)");
}

struct CacheGeometry {
  int64_t n_layers = 0, n_heads = 0, head_dim = 0, d_model = 0, d_enc = 0;

  static CacheGeometry from(const DecoderConfig& cfg, int64_t d_enc) {
    return {cfg.n_layers, cfg.n_heads, cfg.head_dim, cfg.d_model, d_enc};
  }
};

// Exact per-token cache cost in bytes.  KV scales with layers and heads,
// JIT-KV with layers and width, XC only with the encoder width.
inline int64_t bytes_per_token(const CacheGeometry& g, CacheStrategy s,
                               int64_t bytes_per_scalar) {
  if (bytes_per_scalar <= 0)
    throw ConfigError("bytes_per_scalar must be positive");
  switch (s) {
    case CacheStrategy::KV:
      return g.n_layers * 2 * g.n_heads * g.head_dim * bytes_per_scalar;
    case CacheStrategy::JITKV:
      return g.n_layers * g.d_model * bytes_per_scalar;
    case CacheStrategy::XC:
      return g.d_enc * bytes_per_scalar;
  }
  throw ConfigError("bad strategy");
}

inline int64_t floats_per_token(const CacheGeometry& g, CacheStrategy s) {
  return bytes_per_token(g, s, 1);
}

// Digest binding a blob to the model that can consume it.
inline uint64_t model_digest(const XCModel& m) {
  std::string c = m.decoder.config.canonical() + "#" + m.xc.canonical();
  if (m.xc.encoder_kind == EncoderKind::SmallBidirectional)
    c += "#" + m.bidir.config.canonical();
  return fnv1a64(c);
}

// In-memory cache payload for one context.
// Layouts: KV [L][2][T][H*dh] (k slab then v slab per layer),
//          JITKV [L][T][d_model], XC [T][d_enc].
struct CacheBlob {
  CacheStrategy strategy = CacheStrategy::KV;
  uint64_t config_digest = 0;
  int64_t tokens = 0;
  EncoderKind encoder_kind = EncoderKind::DecoderAsEncoder;  // XC only
  CacheGeometry geom;
  std::vector<float> data;

  int64_t payload_floats() const {
    return tokens * floats_per_token(geom, strategy);
  }
};

inline CacheBlob build_cache(const XCModel& m,
                             const std::vector<int64_t>& context,
                             CacheStrategy strategy) {
  if (context.empty())
    throw ContractError("cannot build a cache for an empty context");
  const DecoderConfig& cfg = m.decoder.config;
  CacheBlob blob;
  blob.strategy = strategy;
  blob.tokens = (int64_t)context.size();
  blob.geom = CacheGeometry::from(cfg, m.d_enc());
  int64_t T = blob.tokens;
  if (strategy == CacheStrategy::KV) {
    blob.config_digest = cfg.digest();
    KvPair kp;
    forward_full(m.decoder, context, &kp);
    int64_t C = cfg.n_heads * cfg.head_dim;
    blob.data.reserve((size_t)(cfg.n_layers * 2 * T * C));
    for (int64_t l = 0; l < cfg.n_layers; ++l) {
      blob.data.insert(blob.data.end(), kp.k[(size_t)l].begin(),
                       kp.k[(size_t)l].end());
      blob.data.insert(blob.data.end(), kp.v[(size_t)l].begin(),
                       kp.v[(size_t)l].end());
    }
  } else if (strategy == CacheStrategy::JITKV) {
    blob.config_digest = cfg.digest();
    auto res = forward_full(m.decoder, context);
    blob.data.reserve((size_t)(cfg.n_layers * T * cfg.d_model));
    for (int64_t l = 0; l < cfg.n_layers; ++l) {
      const auto& h = res.layer_inputs[(size_t)l].data();
      blob.data.insert(blob.data.end(), h.begin(), h.end());
    }
  } else {
    blob.config_digest = model_digest(m);
    blob.encoder_kind = m.xc.encoder_kind;
    Tensor enc = m.encode(context);
    blob.data = enc.data();
  }
  return blob;
}

inline KvPair kv_pair_from_blob(const CacheBlob& blob,
                                const DecoderConfig& cfg) {
  if (blob.strategy != CacheStrategy::KV)
    throw CacheError("blob strategy is not kv");
  if (blob.config_digest != cfg.digest())
    throw CacheError("kv blob was built for a different model config");
  int64_t T = blob.tokens, C = cfg.n_heads * cfg.head_dim;
  KvPair kp = KvPair::for_config(cfg);
  kp.size = T;
  for (int64_t l = 0; l < cfg.n_layers; ++l) {
    auto base = blob.data.begin() + (ptrdiff_t)(l * 2 * T * C);
    kp.k[(size_t)l].assign(base, base + (ptrdiff_t)(T * C));
    kp.v[(size_t)l].assign(base + (ptrdiff_t)(T * C),
                           base + (ptrdiff_t)(2 * T * C));
  }
  return kp;
}

// Recompute per-layer K/V from stored layer inputs: the same norm,
// projection, and rotation the full pass applies, at the stored absolute
// positions (contexts start at position 0).
inline KvPair jit_materialize(const CacheBlob& blob,
                              const DecoderWeights& w) {
  if (blob.strategy != CacheStrategy::JITKV)
    throw CacheError("blob strategy is not jitkv");
  const DecoderConfig& cfg = w.config;
  if (blob.config_digest != cfg.digest())
    throw CacheError("jitkv blob was built for a different model config");
  int64_t T = blob.tokens, d = cfg.d_model;
  KvPair kp = KvPair::for_config(cfg);
  kp.size = T;
  for (int64_t l = 0; l < cfg.n_layers; ++l) {
    auto base = blob.data.begin() + (ptrdiff_t)(l * T * d);
    Tensor h({T, d}, std::vector<float>(base, base + (ptrdiff_t)(T * d)));
    const LayerWeights& lw = w.layers[(size_t)l];
    Tensor xn = rms_norm(h, lw.attn_norm, kNormEps);
    Tensor k = rope(matmul(xn, lw.wk), cfg.n_heads, 0, cfg.rope_theta);
    Tensor v = matmul(xn, lw.wv);
    kp.k[(size_t)l] = k.data();
    kp.v[(size_t)l] = v.data();
  }
  return kp;
}

// Greedy continuation of `query` against a prebuilt cache.  KV and JIT-KV
// route through the plain decoder (context occupies self-attention
// positions); XC routes through cross-attention.
inline std::vector<int64_t> generate_with_cache(const XCModel& m,
                                                const CacheBlob& blob,
                                                const std::vector<int64_t>& query,
                                                int64_t max_new,
                                                int64_t stop_id) {
  if (query.empty()) throw ContractError("generate_with_cache: empty query");
  switch (blob.strategy) {
    case CacheStrategy::KV: {
      KvPair kp = kv_pair_from_blob(blob, m.decoder.config);
      return greedy_generate(m.decoder, query, max_new, stop_id, &kp);
    }
    case CacheStrategy::JITKV: {
      KvPair kp = jit_materialize(blob, m.decoder);
      return greedy_generate(m.decoder, query, max_new, stop_id, &kp);
    }
    case CacheStrategy::XC: {
      if (blob.config_digest != model_digest(m))
        throw CacheError("xc blob was built for a different model");
      Tensor enc({blob.tokens, blob.geom.d_enc}, blob.data);
      return xc_greedy_generate(m, enc, query, max_new, stop_id);
    }
  }
  throw CacheError("bad strategy");
}

// ---- attention MAC accounting ----
//
// One attended position costs head_dim MACs for the score and head_dim for
// the value mix, per head per layer.  Emitting an answer of A tokens takes
// A-1 incremental extensions (the final token's logits need no further
// attention), which matches what the instrumented decode loop executes.

struct MacGeometry {
  int64_t n_layers = 0, n_heads = 0, head_dim = 0;
  static MacGeometry from(const DecoderConfig& cfg) {
    return {cfg.n_layers, cfg.n_heads, cfg.head_dim};
  }
  uint64_t unit() const {
    return (uint64_t)n_layers * (uint64_t)n_heads * 2u * (uint64_t)head_dim;
  }
};

// Stepwise prefill of S tokens: rows attend 1..S positions.
inline uint64_t macs_prefill(const MacGeometry& g, int64_t S) {
  return g.unit() * (uint64_t)(S * (S + 1) / 2);
}

// Emitting `emitted` tokens on top of S0 processed ones.
inline uint64_t macs_generate_extension(const MacGeometry& g, int64_t S0,
                                        int64_t emitted) {
  uint64_t sum = 0;
  for (int64_t j = 1; j < emitted; ++j) sum += (uint64_t)(S0 + j);
  return g.unit() * sum;
}

// No cache: the context+query prefix is processed from scratch.
inline uint64_t macs_uncached_answer(const MacGeometry& g, int64_t t_ctx,
                                     int64_t t_query, int64_t t_answer) {
  int64_t s0 = t_ctx + t_query;
  return macs_prefill(g, s0) + macs_generate_extension(g, s0, t_answer);
}

// KV cache loaded: only the query is processed, attending the cached
// context, then the answer extends as usual.
inline uint64_t macs_cached_answer(const MacGeometry& g, int64_t t_ctx,
                                   int64_t t_query, int64_t t_answer) {
  uint64_t q = 0;
  for (int64_t i = 1; i <= t_query; ++i) q += (uint64_t)(t_ctx + i);
  return g.unit() * q +
         macs_generate_extension(g, t_ctx + t_query, t_answer);
}

// Ordinary least squares slope of log(y) against log(x).
inline double loglog_slope(const std::vector<double>& xs,
                           const std::vector<double>& ys) {
  if (xs.size() != ys.size() || xs.size() < 2)
    throw ContractError("slope needs at least two points");
  double n = (double)xs.size(), sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (size_t i = 0; i < xs.size(); ++i) {
    double lx = std::log(xs[i]), ly = std::log(ys[i]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

}  // namespace xc
