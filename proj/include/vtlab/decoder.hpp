#pragma once

#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "vtlab/layout.hpp"
#include "vtlab/nn.hpp"
#include "vtlab/ops.hpp"
#include "vtlab/rng.hpp"
#include "vtlab/tensor.hpp"

namespace vtlab {

struct DecoderConfig {
  int num_layers = 6;
  int d_model = 64;
  int heads = 4;
  int d_ff = 0;  // 0 -> 4 * d_model
  int vocab_size = 64;
  int max_seq_len = 1024;

  int ff() const { return d_ff > 0 ? d_ff : 4 * d_model; }
};

// Append-only per-layer key/value store for incremental decoding.
struct KVCache {
  struct LayerKV {
    Tensor k, v;  // [B, heads, T, dh]
  };
  std::vector<LayerKV> layers;
  int length = 0;

  explicit KVCache(int num_layers = 0) : layers(num_layers) {}
};

struct ForwardHooks {
  // Called after decoder layer i (1-based); may return a rewritten hidden
  // state (re-fusion insertion point).
  std::function<Tensor(int layer, Tensor hidden)> post_layer;
  // Per-layer softmax attention weights [B, heads, S, S], appended in layer
  // order (forces the naive attention path; used by pruning baselines).
  std::vector<Tensor>* capture_attention = nullptr;
  // Called with the hidden state after each layer (and after post_layer).
  std::function<void(int layer, const Tensor& hidden)> on_layer_hidden;
};

// Pre-norm causal transformer layer: masked self-attention + GELU MLP.
struct DecoderLayer {
  LayerNorm ln1;
  MultiHeadAttention attn;
  LayerNorm ln2;
  Mlp2 mlp;

  DecoderLayer() = default;
  DecoderLayer(int d, int heads, int ff, Rng& rng)
      : ln1(d), attn(d, d, d, d, heads, rng), ln2(d), mlp(d, ff, d, rng) {}

  // Full-sequence forward. When cache is given the projected keys/values are
  // stored for later incremental steps.
  Tensor forward_full(const Tensor& h, const Tensor& mask, KVCache::LayerKV* cache,
                      Tensor* capture) const {
    Tensor n1 = ln1(h);
    Tensor qh = attn.split_heads(attn.wq(n1));
    Tensor kh = attn.split_heads(attn.wk(n1));
    Tensor vh = attn.split_heads(attn.wv(n1));
    if (cache) {
      cache->k = kh.detach().clone();
      cache->v = vh.detach().clone();
    }
    Tensor out = add(h, attn.attend(qh, kh, vh, &mask, capture));
    return add(out, mlp(ln2(out)));
  }

  // One incremental token with cached keys/values. The new position attends
  // over everything stored plus itself, which is exactly the causal set.
  Tensor forward_step(const Tensor& h, KVCache::LayerKV& cache) const {
    Tensor n1 = ln1(h);
    Tensor qh = attn.split_heads(attn.wq(n1));
    Tensor kh = attn.split_heads(attn.wk(n1));
    Tensor vh = attn.split_heads(attn.wv(n1));
    cache.k = cache.k.defined() ? concat({cache.k, kh}, 2) : kh;
    cache.v = cache.v.defined() ? concat({cache.v, vh}, 2) : vh;
    Tensor out = add(h, attn.attend(qh, cache.k, cache.v));
    return add(out, mlp(ln2(out)));
  }

  void register_params(ParamRegistry& reg, const std::string& prefix) {
    ln1.register_params(reg, prefix + ".ln1");
    attn.register_params(reg, prefix + ".attn");
    ln2.register_params(reg, prefix + ".ln2");
    mlp.register_params(reg, prefix + ".mlp");
  }
};

// Toy causal decoder over concatenated vision/text/response embeddings.
struct Decoder {
  DecoderConfig cfg;
  Tensor tok_emb;  // [V, Dt]
  Tensor pos_emb;  // [max_seq_len, Dt]
  std::vector<DecoderLayer> layers;
  LayerNorm ln_final;
  Linear lm_head;  // Dt -> V

  Decoder() = default;

  Decoder(const DecoderConfig& c, Rng& rng) : cfg(c) {
    if (cfg.d_model % cfg.heads != 0)
      throw std::invalid_argument("decoder: d_model must divide by heads");
    tok_emb = Tensor::randn({cfg.vocab_size, cfg.d_model}, rng, 0.02);
    pos_emb = Tensor::randn({cfg.max_seq_len, cfg.d_model}, rng, 0.02);
    layers.reserve(cfg.num_layers);
    for (int i = 0; i < cfg.num_layers; ++i)
      layers.emplace_back(cfg.d_model, cfg.heads, cfg.ff(), rng);
    ln_final = LayerNorm(cfg.d_model);
    lm_head = Linear(cfg.d_model, cfg.vocab_size, rng);
  }

  // Builds the input sequence: projected vision tokens pass through, text
  // and response ids are looked up, learned positions run 0..S-1 across all
  // spans.
  std::pair<Tensor, SequenceLayout> embed(const Tensor& vision_tokens,
                                          const std::vector<std::vector<int>>& text_ids,
                                          const std::vector<std::vector<int>>& response_ids =
                                              {}) const {
    if (vision_tokens.ndim() != 3)
      throw std::invalid_argument("decoder.embed: vision tokens must be [B,Nv,Dt]");
    int B = vision_tokens.dim(0), Nv = vision_tokens.dim(1);
    if (static_cast<int>(text_ids.size()) != B)
      throw std::invalid_argument("decoder.embed: text batch size mismatch");
    int Nt = text_ids.empty() ? 0 : static_cast<int>(text_ids[0].size());
    int Nr = response_ids.empty() ? 0 : static_cast<int>(response_ids[0].size());
    SequenceLayout layout = SequenceLayout::make(Nv, Nt, Nr);
    int S = layout.total();
    if (S > cfg.max_seq_len)
      throw std::invalid_argument("decoder.embed: sequence exceeds max_seq_len");

    std::vector<int> flat;
    flat.reserve(static_cast<size_t>(B) * (Nt + Nr));
    for (int b = 0; b < B; ++b) {
      if (static_cast<int>(text_ids[b].size()) != Nt)
        throw std::invalid_argument("decoder.embed: ragged text batch");
      flat.insert(flat.end(), text_ids[b].begin(), text_ids[b].end());
      if (Nr > 0) {
        if (static_cast<int>(response_ids[b].size()) != Nr)
          throw std::invalid_argument("decoder.embed: ragged response batch");
        flat.insert(flat.end(), response_ids[b].begin(), response_ids[b].end());
      }
    }
    Tensor id_emb = embedding_lookup(tok_emb, flat, {B, Nt + Nr});
    Tensor seq = concat({vision_tokens, id_emb}, 1);
    seq = add(seq, slice(pos_emb, 0, 0, S));
    return {seq, layout};
  }

  // Runs the layer stack (optionally with hooks); excludes the head so the
  // cost model's per-layer accounting can be measured in isolation.
  Tensor run_layers(Tensor h, const Tensor& mask, const ForwardHooks* hooks = nullptr,
                    KVCache* cache = nullptr) const {
    for (size_t i = 0; i < layers.size(); ++i) {
      Tensor cap;
      bool want_cap = hooks && hooks->capture_attention;
      h = layers[i].forward_full(h, mask, cache ? &cache->layers[i] : nullptr,
                                 want_cap ? &cap : nullptr);
      if (want_cap) hooks->capture_attention->push_back(cap);
      int layer_1b = static_cast<int>(i) + 1;
      if (hooks && hooks->post_layer) h = hooks->post_layer(layer_1b, h);
      if (hooks && hooks->on_layer_hidden) hooks->on_layer_hidden(layer_1b, h);
    }
    if (cache) cache->length = h.dim(1);
    return h;
  }

  Tensor logits(const Tensor& h) const { return lm_head(ln_final(h)); }

  // Full forward to next-token logits at every position.
  Tensor forward(const Tensor& seq, const ForwardHooks* hooks = nullptr,
                 KVCache* cache = nullptr) const {
    Tensor mask = causal_mask(seq.dim(1));
    return logits(run_layers(seq, mask, hooks, cache));
  }

  // One cached decode step for token id at absolute position `pos`.
  Tensor decode_step(int token_id, int pos, KVCache& cache) const {
    if (pos >= cfg.max_seq_len)
      throw std::invalid_argument("decoder.decode_step: exceeds max_seq_len");
    Tensor h = add(embedding_lookup(tok_emb, {token_id}, {1, 1}),
                   slice(pos_emb, 0, pos, pos + 1));
    for (size_t i = 0; i < layers.size(); ++i) h = layers[i].forward_step(h, cache.layers[i]);
    cache.length += 1;
    return logits(h);  // [1, 1, V]
  }

  void register_params(ParamRegistry& reg, const std::string& prefix) {
    reg.add(prefix + ".tok_emb", tok_emb);
    reg.add(prefix + ".pos_emb", pos_emb);
    for (size_t i = 0; i < layers.size(); ++i)
      layers[i].register_params(reg, prefix + ".layer" + std::to_string(i));
    ln_final.register_params(reg, prefix + ".ln_final");
    lm_head.register_params(reg, prefix + ".lm_head");
  }
};

}  // namespace vtlab
