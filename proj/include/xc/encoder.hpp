#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "xc/decoder.hpp"
#include "xc/error.hpp"
#include "xc/tensor.hpp"

namespace xc {

enum class EncoderKind : uint8_t {
  DecoderAsEncoder = 0,    // frozen host decoder, last hidden states
  SmallBidirectional = 1,  // compact trainable bidirectional stack
};

inline const char* encoder_kind_name(EncoderKind k) {
  return k == EncoderKind::DecoderAsEncoder ? "decoder_as_encoder"
                                            : "small_bidirectional";
}

// Context encoding with the frozen decoder itself: the final-norm hidden
// states of a plain causal pass.  Pure; an empty context yields an empty
// [0, d_model] encoding.
inline Tensor encode_with_decoder(const DecoderWeights& w,
                                  const std::vector<int64_t>& context) {
  if (context.empty()) return Tensor({0, w.config.d_model}, {});
  return forward_full(w, context).last_hidden;
}

// Bidirectional encoder: learned absolute positions, unmasked attention,
// otherwise the same pre-norm block structure as the decoder.  Hidden width
// d_enc may differ from the host decoder's d_model.
struct BidirEncoderConfig {
  int64_t n_layers = 0;
  int64_t d_enc = 0;
  int64_t n_heads = 0;
  int64_t vocab_size = 0;         // shared id space with the decoder
  int64_t base_max_positions = 0;  // native position-table length

  void validate() const {
    if (n_layers <= 0 || d_enc <= 0 || n_heads <= 0 || vocab_size <= 0 ||
        base_max_positions <= 0)
      throw ConfigError("bidirectional encoder config fields must be positive");
    if (d_enc % n_heads != 0)
      throw ConfigError("d_enc = " + std::to_string(d_enc) +
                        " not divisible by n_heads = " +
                        std::to_string(n_heads));
  }

  int64_t head_dim() const { return d_enc / n_heads; }
  int64_t mlp_hidden() const { return 4 * d_enc; }

  // Position-table repetition supports inputs up to twice the native
  // length; beyond that the encoder refuses.
  int64_t extended_capacity() const { return 2 * base_max_positions; }

  int64_t param_count() const {
    int64_t per_layer = 2 * d_enc + 4 * d_enc * d_enc +
                        3 * d_enc * mlp_hidden();
    return vocab_size * d_enc + base_max_positions * d_enc +
           n_layers * per_layer + d_enc;
  }

  std::string canonical() const {
    return "bidir|" + std::to_string(n_layers) + "|" + std::to_string(d_enc) +
           "|" + std::to_string(n_heads) + "|" + std::to_string(vocab_size) +
           "|" + std::to_string(base_max_positions);
  }
  uint64_t digest() const { return fnv1a64(canonical()); }

  bool operator==(const BidirEncoderConfig&) const = default;
};

// Row indices of the position table extended to `needed` rows: the final P
// rows are the native table; the (needed-P) rows before them repeat the
// table's head, cycling from index 0.  Identity when needed <= P.
inline std::vector<int64_t> extended_position_indices(int64_t table_rows,
                                                      int64_t needed) {
  if (table_rows <= 0 || needed < 0)
    throw ContractError("bad position extension request");
  std::vector<int64_t> idx;
  idx.reserve((size_t)needed);
  if (needed <= table_rows) {
    for (int64_t i = 0; i < needed; ++i) idx.push_back(i);
    return idx;
  }
  int64_t head = needed - table_rows;
  for (int64_t i = 0; i < head; ++i) idx.push_back(i % table_rows);
  for (int64_t i = 0; i < table_rows; ++i) idx.push_back(i);
  return idx;
}

// The extended table itself, as a differentiable gather (grads flow back
// into the repeated native rows).
inline Tensor extend_positions(const Tensor& table, int64_t needed) {
  return gather_rows(table, extended_position_indices(table.dim(0), needed));
}

struct BidirEncoderWeights {
  BidirEncoderConfig config;
  Tensor tok_embed;  // [V, d_enc]
  Tensor pos_embed;  // [P, d_enc]
  std::vector<LayerWeights> layers;
  Tensor final_norm;

  static BidirEncoderWeights random_init(const BidirEncoderConfig& cfg,
                                         uint64_t seed,
                                         bool trainable = true) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    BidirEncoderWeights w;
    w.config = cfg;
    int64_t d = cfg.d_enc, ff = cfg.mlp_hidden();
    float ps = (float)(1.0 / std::sqrt((double)d));
    w.tok_embed = Tensor::randn({cfg.vocab_size, d}, rng, 1.f, trainable);
    w.pos_embed = Tensor::randn({cfg.base_max_positions, d}, rng, 0.1f,
                                trainable);
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
    return w;
  }

  std::vector<std::pair<std::string, Tensor>> named_tensors() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("tok_embed", tok_embed);
    out.emplace_back("pos_embed", pos_embed);
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
    return out;
  }

  int64_t param_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : named_tensors()) n += t.numel();
    return n;
  }
};

inline Tensor encode_bidirectional(const BidirEncoderWeights& w,
                                   const std::vector<int64_t>& context) {
  const auto& cfg = w.config;
  if (context.empty()) return Tensor({0, cfg.d_enc}, {});
  int64_t T = (int64_t)context.size();
  if (T > cfg.extended_capacity())
    throw LengthError("context length " + std::to_string(T) +
                      " exceeds extended position capacity " +
                      std::to_string(cfg.extended_capacity()));
  for (auto t : context)
    if (t < 0 || t >= cfg.vocab_size)
      throw ShapeError("token id " + std::to_string(t) +
                       " outside vocab of size " +
                       std::to_string(cfg.vocab_size));
  auto pos_idx = extended_position_indices(cfg.base_max_positions, T);
  Tensor h = add(gather_rows(w.tok_embed, context),
                 gather_rows(w.pos_embed, pos_idx));
  AttendOpts opt;
  opt.causal = false;
  for (const auto& lw : w.layers) {
    Tensor xn = rms_norm(h, lw.attn_norm, kNormEps);
    Tensor q = matmul(xn, lw.wq);
    Tensor k = matmul(xn, lw.wk);
    Tensor v = matmul(xn, lw.wv);
    Tensor attn = detail::multi_head_attend(q, k, v, cfg.n_heads,
                                            cfg.head_dim(), opt);
    h = add(h, matmul(attn, lw.wo));
    h = detail::mlp_block(h, lw);
  }
  return rms_norm(h, w.final_norm, kNormEps);
}

}  // namespace xc
