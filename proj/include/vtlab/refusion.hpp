#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "vtlab/layout.hpp"
#include "vtlab/nn.hpp"
#include "vtlab/ops.hpp"
#include "vtlab/rng.hpp"
#include "vtlab/tensor.hpp"

namespace vtlab {

enum class Interaction { local, global };

inline const char* to_string(Interaction i) {
  return i == Interaction::local ? "local" : "global";
}

inline Interaction interaction_from_string(const std::string& s) {
  if (s == "local") return Interaction::local;
  if (s == "global") return Interaction::global;
  throw std::invalid_argument("unknown interaction: " + s);
}

enum class SublayerOrder { bidir_first, cross_first };

inline const char* to_string(SublayerOrder o) {
  return o == SublayerOrder::bidir_first ? "bidir_first" : "cross_first";
}

inline SublayerOrder order_from_string(const std::string& s) {
  if (s == "bidir_first") return SublayerOrder::bidir_first;
  if (s == "cross_first") return SublayerOrder::cross_first;
  throw std::invalid_argument("unknown sublayer order: " + s);
}

// Configuration of the re-fusion block that re-injects encoder features into
// the compressed vision tokens between decoder layers.
struct RefusionConfig {
  std::vector<int> insertion_layers = {1, 4};  // 1-based, applied after layer i
  std::vector<int> feature_levels = {1, 2, 3};  // 1-based encoder layer indices
  Interaction interaction = Interaction::local;
  SublayerOrder order = SublayerOrder::bidir_first;
  int s = 3;
  int d_model = 64;
  int d_vision = 16;
  int heads = 4;

  int num_levels() const { return static_cast<int>(feature_levels.size()); }
  int fused_dim() const { return num_levels() * d_vision; }
};

// Channel-concatenates per-level feature maps [B,W,H,Dv] in the given order
// into [B,W,H,L*Dv].
inline Tensor fuse_multilevel(const std::vector<Tensor>& levels) {
  if (levels.empty()) throw std::invalid_argument("fuse_multilevel: no levels");
  for (const Tensor& t : levels) {
    if (t.ndim() != 4) throw std::invalid_argument("fuse_multilevel: expected [B,W,H,Dv]");
    for (int d = 0; d < 3; ++d)
      if (t.shape()[d] != levels[0].shape()[d])
        throw std::invalid_argument("fuse_multilevel: mismatched spatial extents");
  }
  if (levels.size() == 1) return levels[0];
  return concat(levels, 3);
}

// Elementwise max over the sequence axis of [B, Nt, D] -> [B, 1, D]
// (adaptive max pooling to length one).
inline Tensor text_guided_token(const Tensor& text) {
  if (text.ndim() != 3) throw std::invalid_argument("text_guided_token: expected [B,Nt,D]");
  if (text.dim(1) < 1) throw std::invalid_argument("text_guided_token: empty text span");
  return max_along_axis(text, 1);
}

// The re-fusion block: a bidirectional self-attention sublayer over vision
// tokens plus a text-guided token, and a token-feature cross-attention
// sublayer that resamples the fused encoder features. Both sublayers are
// pre-norm with zero-initialized output projections, so a fresh block is the
// identity map on the hidden state.
struct RefusionBlock {
  RefusionConfig cfg;

  LayerNorm ln_bidir;
  MultiHeadAttention bidir;  // Dt -> Dt, full attention over n^2+1 rows

  LayerNorm ln_cross;
  Mlp2 expand;               // Dt -> C -> C, C = L*Dv
  MultiHeadAttention cross;  // attention in C, output projected back to Dt

  RefusionBlock() = default;

  RefusionBlock(const RefusionConfig& c, Rng& rng) : cfg(c) {
    int C = cfg.fused_dim();
    if (C % cfg.heads != 0 || cfg.d_model % cfg.heads != 0)
      throw std::invalid_argument("refusion: channels must divide by heads");
    ln_bidir = LayerNorm(cfg.d_model);
    bidir = MultiHeadAttention(cfg.d_model, cfg.d_model, cfg.d_model, cfg.d_model,
                               cfg.heads, rng, /*zero_init_out=*/true);
    ln_cross = LayerNorm(cfg.d_model);
    expand = Mlp2(cfg.d_model, C, C, rng);
    cross = MultiHeadAttention(C, C, C, cfg.d_model, cfg.heads, rng,
                               /*zero_init_out=*/true);
  }

  // Full self-attention over [vision | guide]; returns updated vision rows.
  // The guide row's output is discarded and the text stream is never
  // written back.
  Tensor bidir_sublayer(const Tensor& vision, const Tensor& text) const {
    Tensor guide = text_guided_token(text);
    Tensor u = concat({vision, guide}, 1);
    Tensor normed = ln_bidir(u);
    Tensor updated = add(u, bidir(normed, normed));
    return slice(updated, 1, 0, vision.dim(1));
  }

  // Pre-residual cross-attention update for each token. Local interaction
  // restricts token w to the s x s feature window that pooled into it;
  // global attends over all W*H rows. extra_mask (additive, broadcastable
  // over [B, heads, n^2, W*H]) applies to the global path only.
  Tensor cross_attention_delta(const Tensor& vision, const Tensor& fused,
                               Interaction interaction,
                               const Tensor* extra_mask = nullptr) const {
    int B = vision.dim(0), n_tok = vision.dim(1);
    int W = fused.dim(1), H = fused.dim(2), C = fused.dim(3);
    if (C != cfg.fused_dim())
      throw std::invalid_argument("refusion: fused channel extent != L*Dv");
    if (n_tok != (W / cfg.s) * (H / cfg.s))
      throw std::invalid_argument("refusion: token count does not match window grid");
    Tensor queries = expand(ln_cross(vision));  // [B, n^2, C]
    if (interaction == Interaction::local) {
      Tensor qw = reshape(queries, {B * n_tok, 1, C});
      Tensor kv = window_partition(fused, cfg.s);  // [B*n^2, s^2, C]
      Tensor attn = cross(qw, kv);                 // [B*n^2, 1, Dt]
      return reshape(attn, {B, n_tok, cfg.d_model});
    }
    Tensor flat = reshape(fused, {B, W * H, C});
    return cross(queries, flat, extra_mask);
  }

  Tensor cross_sublayer(const Tensor& vision, const Tensor& fused,
                        const Tensor* extra_mask = nullptr) const {
    return add(vision, cross_attention_delta(vision, fused, cfg.interaction, extra_mask));
  }

  // Applies the block to the vision span of a full hidden sequence; text and
  // response rows pass through bit-identically.
  Tensor apply(const Tensor& hidden, const SequenceLayout& layout,
               const Tensor& fused) const {
    layout.validate();
    if (hidden.dim(1) != layout.total())
      throw std::invalid_argument("refusion: hidden length does not match layout");
    Tensor vision = slice(hidden, 1, layout.vision_begin, layout.vision_end);
    Tensor text = slice(hidden, 1, layout.text_begin, layout.text_end);
    Tensor rest = slice(hidden, 1, layout.vision_end, layout.total());
    if (cfg.order == SublayerOrder::bidir_first) {
      vision = bidir_sublayer(vision, text);
      vision = cross_sublayer(vision, fused);
    } else {
      vision = cross_sublayer(vision, fused);
      vision = bidir_sublayer(vision, text);
    }
    return concat({vision, rest}, 1);
  }

  void register_params(ParamRegistry& reg, const std::string& prefix) {
    ln_bidir.register_params(reg, prefix + ".ln_bidir");
    bidir.register_params(reg, prefix + ".bidir");
    ln_cross.register_params(reg, prefix + ".ln_cross");
    expand.register_params(reg, prefix + ".expand");
    cross.register_params(reg, prefix + ".cross");
  }
};

// Block-diagonal additive mask for the masked-global oracle: token w may
// only see rows of window w. Shape [n_tok, W*H], broadcastable over batch
// and heads.
inline Tensor window_block_mask(int W, int H, int s) {
  int nw = W / s, nh = H / s, n_tok = nw * nh;
  Tensor m = Tensor::full({n_tok, W * H}, kMaskNeg);
  for (int wi = 0; wi < nw; ++wi)
    for (int wj = 0; wj < nh; ++wj) {
      int w = wi * nh + wj;
      for (int u = 0; u < s; ++u)
        for (int v = 0; v < s; ++v) m.at({w, (wi * s + u) * H + (wj * s + v)}) = 0.0;
    }
  return m;
}

}  // namespace vtlab
