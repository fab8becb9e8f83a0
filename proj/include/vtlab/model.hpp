#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "vtlab/decoder.hpp"
#include "vtlab/encoder.hpp"
#include "vtlab/nn.hpp"
#include "vtlab/ops.hpp"
#include "vtlab/projectors.hpp"
#include "vtlab/refusion.hpp"
#include "vtlab/rng.hpp"
#include "vtlab/tensor.hpp"

namespace vtlab {

struct VlmConfig {
  EncoderConfig encoder;
  ProjectorConfig projector;
  bool use_refusion = false;
  RefusionConfig refusion;
  DecoderConfig decoder;
  uint64_t seed = 1;
};

// Encoder -> projector -> causal decoder with optional re-fusion blocks
// spliced between decoder layers. The projector consumes the final encoder
// level; the re-fusion blocks resample the fused multi-level features.
struct VlmModel {
  VlmConfig cfg;
  ToyEncoder encoder;
  Projector projector;
  std::vector<std::pair<int, RefusionBlock>> blocks;  // (1-based layer, block)
  Decoder decoder;

  explicit VlmModel(const VlmConfig& c) : cfg(c) {
    Rng root(cfg.seed);
    Rng enc_rng = root.split(101);
    Rng proj_rng = root.split(102);
    Rng dec_rng = root.split(103);
    encoder = ToyEncoder(cfg.encoder, enc_rng);
    projector = Projector(cfg.projector, proj_rng);
    decoder = Decoder(cfg.decoder, dec_rng);
    if (cfg.use_refusion) {
      for (int layer : cfg.refusion.insertion_layers) {
        if (layer < 1 || layer > cfg.decoder.num_layers)
          throw std::invalid_argument("refusion insertion layer " + std::to_string(layer) +
                                      " outside [1," + std::to_string(cfg.decoder.num_layers) +
                                      "]");
        Rng block_rng = root.split(200 + static_cast<uint64_t>(layer));
        blocks.emplace_back(layer, RefusionBlock(cfg.refusion, block_rng));
      }
      for (int lvl : cfg.refusion.feature_levels)
        if (lvl < 1 || lvl > cfg.encoder.depth)
          throw std::invalid_argument("feature level " + std::to_string(lvl) +
                                      " outside encoder depth");
    }
  }

  std::vector<Tensor> select_levels(const std::vector<Tensor>& all_levels) const {
    std::vector<Tensor> out;
    for (int lvl : cfg.refusion.feature_levels) out.push_back(all_levels[lvl - 1]);
    return out;
  }

  struct Forward {
    Tensor logits;  // [B, S, V]
    SequenceLayout layout;
  };

  Forward forward_from_levels(const std::vector<Tensor>& levels,
                              const std::vector<std::vector<int>>& text_ids,
                              const std::vector<std::vector<int>>& response_ids = {},
                              const ForwardHooks* user_hooks = nullptr,
                              KVCache* cache = nullptr) const {
    Tensor vision_tokens = projector.apply(levels.back());
    auto [seq, layout] = decoder.embed(vision_tokens, text_ids, response_ids);

    Tensor fused;
    if (!blocks.empty()) fused = fuse_multilevel(select_levels(levels));

    ForwardHooks hooks = user_hooks ? *user_hooks : ForwardHooks{};
    auto user_post = hooks.post_layer;
    SequenceLayout lay = layout;
    hooks.post_layer = [this, &fused, lay, user_post](int layer, Tensor h) {
      for (const auto& [at, block] : blocks)
        if (at == layer) h = block.apply(h, lay, fused);
      if (user_post) h = user_post(layer, h);
      return h;
    };

    Tensor mask = causal_mask(seq.dim(1));
    Tensor h = decoder.run_layers(seq, mask, &hooks, cache);
    return {decoder.logits(h), layout};
  }

  Forward forward(const Tensor& images, const std::vector<std::vector<int>>& text_ids,
                  const std::vector<std::vector<int>>& response_ids = {},
                  const ForwardHooks* user_hooks = nullptr, KVCache* cache = nullptr) const {
    return forward_from_levels(encoder.forward_levels(images), text_ids, response_ids,
                               user_hooks, cache);
  }

  // Greedy argmax decoding with a KV cache. Re-fusion runs during prefill
  // only; decoded tokens reuse the cached vision keys/values and never
  // re-trigger the blocks.
  std::vector<int> greedy_decode_from_levels(const std::vector<Tensor>& levels,
                                             const std::vector<int>& text_ids,
                                             int max_new) const {
    NoGradGuard ng;
    if (max_new <= 0) return {};
    KVCache cache(decoder.cfg.num_layers);
    Forward pre = forward_from_levels(levels, {text_ids}, {}, nullptr, &cache);
    int S = pre.layout.total();
    Tensor logits = slice(pre.logits, 1, S - 1, S);

    std::vector<int> out;
    int pos = S;
    while (true) {
      int best = 0;
      for (int v = 1; v < decoder.cfg.vocab_size; ++v)
        if (logits[v] > logits[best]) best = v;
      out.push_back(best);
      if (static_cast<int>(out.size()) >= max_new) break;
      logits = decoder.decode_step(best, pos, cache);
      ++pos;
    }
    return out;
  }

  std::vector<int> greedy_decode(const Tensor& image, const std::vector<int>& text_ids,
                                 int max_new) const {
    NoGradGuard ng;
    return greedy_decode_from_levels(encoder.forward_levels(image), text_ids, max_new);
  }

  // Cross-entropy over the response span only: response token at absolute
  // position p is predicted from the logits at p-1.
  Tensor response_loss(const Forward& fwd, const std::vector<std::vector<int>>& response_ids)
      const {
    const SequenceLayout& l = fwd.layout;
    if (l.response_len() <= 0)
      throw std::invalid_argument("response_loss: layout has empty response span");
    int B = fwd.logits.dim(0), Nr = l.response_len(), V = decoder.cfg.vocab_size;
    Tensor pred = slice(fwd.logits, 1, l.response_begin - 1, l.response_end - 1);
    std::vector<int> targets;
    targets.reserve(static_cast<size_t>(B) * Nr);
    for (int b = 0; b < B; ++b)
      for (int r = 0; r < Nr; ++r) targets.push_back(response_ids[b][r]);
    Tensor loss = softmax_cross_entropy(reshape(pred, {B * Nr, V}), targets);
    if (!loss.all_finite()) throw std::runtime_error("response_loss: non-finite loss");
    return loss;
  }

  ParamRegistry params() {
    ParamRegistry reg;
    encoder.register_params(reg, "enc");
    projector.register_params(reg, "proj");
    for (auto& [layer, block] : blocks)
      block.register_params(reg, "vr.l" + std::to_string(layer));
    decoder.register_params(reg, "dec");
    return reg;
  }

  // Everything except the encoder (the stand-in for a frozen pretrained
  // vision tower).
  ParamRegistry trainable_params(bool freeze_encoder) {
    ParamRegistry reg;
    if (!freeze_encoder) encoder.register_params(reg, "enc");
    projector.register_params(reg, "proj");
    for (auto& [layer, block] : blocks)
      block.register_params(reg, "vr.l" + std::to_string(layer));
    decoder.register_params(reg, "dec");
    return reg;
  }
};

// ---- optimizer ----

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct AdamState {
  int64_t step = 0;
  std::vector<std::vector<double>> m, v;
};

// Bias-corrected Adam with decoupled weight decay. lr = 0 leaves parameters
// bit-identical (moments still advance).
inline void adam_step(ParamRegistry& params, AdamState& st, const AdamConfig& cfg) {
  auto& items = params.items();
  if (st.m.empty()) {
    st.m.resize(items.size());
    st.v.resize(items.size());
    for (size_t i = 0; i < items.size(); ++i) {
      st.m[i].assign(static_cast<size_t>(items[i].second.numel()), 0.0);
      st.v[i].assign(static_cast<size_t>(items[i].second.numel()), 0.0);
    }
  }
  if (st.m.size() != items.size())
    throw std::invalid_argument("adam_step: state does not match registry");
  st.step += 1;
  double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
  for (size_t i = 0; i < items.size(); ++i) {
    Tensor& p = items[i].second;
    const std::vector<double>& g = p.grad();
    double* pd = p.data();
    for (int64_t j = 0; j < p.numel(); ++j) {
      double gj = g[j];
      st.m[i][j] = cfg.beta1 * st.m[i][j] + (1.0 - cfg.beta1) * gj;
      st.v[i][j] = cfg.beta2 * st.v[i][j] + (1.0 - cfg.beta2) * gj * gj;
      double mhat = st.m[i][j] / bc1;
      double vhat = st.v[i][j] / bc2;
      pd[j] -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * pd[j]);
    }
  }
}

}  // namespace vtlab
