#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "vtlab/nn.hpp"
#include "vtlab/ops.hpp"
#include "vtlab/rng.hpp"
#include "vtlab/tensor.hpp"

namespace vtlab {

struct EncoderConfig {
  int depth = 3;
  int d_vision = 16;
  int patch = 4;     // pixels per patch side
  int channels = 1;  // image channels
  int heads = 4;
  int d_ff = 0;       // 0 -> 4 * d_vision
  int max_grid = 32;  // largest supported W or H in patches

  int ff() const { return d_ff > 0 ? d_ff : 4 * d_vision; }
};

// Stand-in vision encoder: patchify, learned 2D positions, a small stack of
// bidirectional transformer layers. Exposes the feature map after every
// layer so multi-level feature selection is meaningful.
struct ToyEncoder {
  EncoderConfig cfg;
  Linear patch_embed;        // p^2*C -> Dv
  Tensor row_emb, col_emb;   // [max_grid, Dv] each

  struct Layer {
    LayerNorm ln1;
    MultiHeadAttention attn;
    LayerNorm ln2;
    Mlp2 mlp;
  };
  std::vector<Layer> layers;

  ToyEncoder() = default;

  ToyEncoder(const EncoderConfig& c, Rng& rng) : cfg(c) {
    int d = cfg.d_vision;
    patch_embed = Linear(cfg.patch * cfg.patch * cfg.channels, d, rng);
    row_emb = Tensor::randn({cfg.max_grid, d}, rng, 0.02);
    col_emb = Tensor::randn({cfg.max_grid, d}, rng, 0.02);
    layers.resize(cfg.depth);
    for (auto& l : layers) {
      l.ln1 = LayerNorm(d);
      l.attn = MultiHeadAttention(d, d, d, d, cfg.heads, rng);
      l.ln2 = LayerNorm(d);
      l.mlp = Mlp2(d, cfg.ff(), d, rng);
    }
  }

  // image [B, W*p, H*p, C] -> per-layer maps [B, W, H, Dv], one per layer.
  std::vector<Tensor> forward_levels(const Tensor& image) const {
    if (image.ndim() != 4) throw std::invalid_argument("encoder: expected [B,Wp,Hp,C]");
    if (image.dim(3) != cfg.channels)
      throw std::invalid_argument("encoder: channel count mismatch");
    if (image.dim(1) % cfg.patch != 0 || image.dim(2) % cfg.patch != 0)
      throw std::invalid_argument("encoder: image extents not divisible by patch size");
    int B = image.dim(0), W = image.dim(1) / cfg.patch, H = image.dim(2) / cfg.patch;
    if (W > cfg.max_grid || H > cfg.max_grid)
      throw std::invalid_argument("encoder: grid exceeds max_grid");

    Tensor patches = space_to_depth(image, cfg.patch);  // [B, W, H, p^2*C]
    Tensor tokens = patch_embed(
        reshape(patches, {B, W * H, cfg.patch * cfg.patch * cfg.channels}));
    // pos[i,j] = row_emb[i] + col_emb[j]
    Tensor pos = add(reshape(slice(row_emb, 0, 0, W), {W, 1, cfg.d_vision}),
                     slice(col_emb, 0, 0, H));
    Tensor h = add(tokens, reshape(pos, {W * H, cfg.d_vision}));

    std::vector<Tensor> levels;
    levels.reserve(layers.size());
    for (const Layer& l : layers) {
      Tensor n1 = l.ln1(h);
      h = add(h, l.attn(n1, n1));
      h = add(h, l.mlp(l.ln2(h)));
      levels.push_back(reshape(h, {B, W, H, cfg.d_vision}));
    }
    return levels;
  }

  void register_params(ParamRegistry& reg, const std::string& prefix) {
    patch_embed.register_params(reg, prefix + ".patch_embed");
    reg.add(prefix + ".row_emb", row_emb);
    reg.add(prefix + ".col_emb", col_emb);
    for (size_t i = 0; i < layers.size(); ++i) {
      std::string p = prefix + ".layer" + std::to_string(i);
      layers[i].ln1.register_params(reg, p + ".ln1");
      layers[i].attn.register_params(reg, p + ".attn");
      layers[i].ln2.register_params(reg, p + ".ln2");
      layers[i].mlp.register_params(reg, p + ".mlp");
    }
  }
};

}  // namespace vtlab
