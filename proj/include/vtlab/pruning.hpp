#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "vtlab/layout.hpp"
#include "vtlab/model.hpp"
#include "vtlab/ops.hpp"
#include "vtlab/tensor.hpp"

namespace vtlab {

enum class PruneKind { none, fastv, pyramid_drop, encoder_prune };

inline const char* to_string(PruneKind k) {
  switch (k) {
    case PruneKind::none: return "none";
    case PruneKind::fastv: return "fastv";
    case PruneKind::pyramid_drop: return "pyramid_drop";
    case PruneKind::encoder_prune: return "encoder_prune";
  }
  return "?";
}

inline PruneKind prune_kind_from_string(const std::string& s) {
  if (s == "none") return PruneKind::none;
  if (s == "fastv") return PruneKind::fastv;
  if (s == "pyramid_drop") return PruneKind::pyramid_drop;
  if (s == "encoder_prune") return PruneKind::encoder_prune;
  throw std::invalid_argument("unknown prune kind: " + s);
}

// Training-free token-pruning comparators. These run on a trained
// uncompressed model; the attention-ranked kinds force the naive attention
// path that materializes weights.
struct PruneSchedule {
  PruneKind kind = PruneKind::none;
  int fastv_layer = 2;                // K: rank with the weights of this layer
  int fastv_keep = 0;                 // explicit keep count; 0 -> use ratio
  double fastv_keep_ratio = 1.0 / 9;  // of the vision tokens
  std::vector<int> stage_ends;        // pyramid: 1-based last layer per stage
  std::vector<double> stage_ratios;   // per-stage keep ratio in (0,1]
  int encoder_keep = 0;

  void validate(int num_layers) const {
    if (kind == PruneKind::fastv) {
      if (fastv_layer < 1 || fastv_layer > num_layers)
        throw std::invalid_argument("prune.fastv_layer outside decoder depth");
      if (fastv_keep == 0 && (fastv_keep_ratio <= 0.0 || fastv_keep_ratio > 1.0))
        throw std::invalid_argument("prune.fastv_keep_ratio must be in (0,1]");
    }
    if (kind == PruneKind::pyramid_drop) {
      if (stage_ends.empty() || stage_ends.size() != stage_ratios.size())
        throw std::invalid_argument("prune: stage_ends/stage_ratios must align");
      int prev = 0;
      for (int e : stage_ends) {
        if (e <= prev || e > num_layers)
          throw std::invalid_argument("prune.stage_ends must be increasing within depth");
        prev = e;
      }
      for (double r : stage_ratios)
        if (r <= 0.0 || r > 1.0)
          throw std::invalid_argument("prune.stage_ratios must be in (0,1]");
    }
    if (kind == PruneKind::encoder_prune && encoder_keep < 1)
      throw std::invalid_argument("prune.encoder_keep must be >= 1");
  }
};

// Mean attention received by each vision token from non-vision query
// positions, averaged over batch and heads. attn is [B, heads, S, S].
inline std::vector<double> vision_attention_scores(const Tensor& attn,
                                                   const SequenceLayout& layout) {
  int B = attn.dim(0), h = attn.dim(1), S = attn.dim(2);
  if (attn.dim(3) != S || S != layout.total())
    throw std::invalid_argument("vision_attention_scores: attention/layout mismatch");
  int nv = layout.vision_len();
  std::vector<double> scores(nv, 0.0);
  int64_t queries = 0;
  for (int b = 0; b < B; ++b)
    for (int head = 0; head < h; ++head)
      for (int q = layout.text_begin; q < S; ++q) {
        const double* row =
            attn.data() + (((static_cast<int64_t>(b) * h + head) * S) + q) * S;
        for (int v = 0; v < nv; ++v) scores[v] += row[layout.vision_begin + v];
        ++queries;
      }
  for (double& s : scores) s /= static_cast<double>(queries);
  return scores;
}

// Top keep_k vision tokens by score; ties keep the lower index. The result
// is sorted ascending, preserving the original token order.
inline std::vector<int> top_k_keep(const std::vector<double>& scores, int keep_k) {
  int n = static_cast<int>(scores.size());
  if (keep_k < 1 || keep_k > n)
    throw std::invalid_argument("top_k_keep: keep_k outside [1, token count]");
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  std::vector<int> keep(order.begin(), order.begin() + keep_k);
  std::sort(keep.begin(), keep.end());
  return keep;
}

namespace detail {
// Copies the selected sequence positions (per batch item lists of absolute
// positions, all the same length). Selection only; values are untouched.
inline Tensor gather_positions(const Tensor& hidden,
                               const std::vector<std::vector<int>>& positions) {
  int B = hidden.dim(0), D = hidden.dim(2);
  int S2 = static_cast<int>(positions[0].size());
  Tensor out({B, S2, D});
  for (int b = 0; b < B; ++b)
    for (int t = 0; t < S2; ++t)
      std::copy_n(hidden.data() + (static_cast<int64_t>(b) * hidden.dim(1) +
                                   positions[b][t]) *
                                      D,
                  D, out.data() + (static_cast<int64_t>(b) * S2 + t) * D);
  return out;
}
}  // namespace detail

struct Pruned {
  Tensor hidden;
  SequenceLayout layout;
  std::vector<std::vector<int>> kept_vision;  // per batch item, original indices
};

// Drops vision rows ranked lowest by the supplied attention weights; text
// and response rows and all surviving values pass through untouched.
inline Pruned fastv_prune(const Tensor& hidden, const SequenceLayout& layout,
                          const Tensor& attn_at_k, int keep_k) {
  int B = hidden.dim(0);
  int nv = layout.vision_len();
  if (keep_k > nv) throw std::invalid_argument("fastv_prune: keep_k > vision token count");
  Pruned out;
  out.layout = SequenceLayout::make(keep_k, layout.text_len(), layout.response_len());
  std::vector<std::vector<int>> positions(B);
  out.kept_vision.resize(B);
  for (int b = 0; b < B; ++b) {
    Tensor item = slice(attn_at_k, 0, b, b + 1);
    std::vector<int> keep = top_k_keep(vision_attention_scores(item, layout), keep_k);
    out.kept_vision[b] = keep;
    for (int v : keep) positions[b].push_back(layout.vision_begin + v);
    for (int t = layout.text_begin; t < layout.total(); ++t) positions[b].push_back(t);
  }
  out.hidden = detail::gather_positions(hidden, positions);
  return out;
}

// Ranks encoder tokens by feature-vector norm and keeps the top keep_k rows
// per batch item (original order preserved).
inline std::pair<Tensor, std::vector<std::vector<int>>> encoder_prune(const Tensor& tokens,
                                                                      int keep_k) {
  if (tokens.ndim() != 3) throw std::invalid_argument("encoder_prune: expected [B,N,D]");
  int B = tokens.dim(0), N = tokens.dim(1), D = tokens.dim(2);
  if (keep_k > N) throw std::invalid_argument("encoder_prune: keep_k > token count");
  std::vector<std::vector<int>> kept(B);
  std::vector<std::vector<int>> positions(B);
  for (int b = 0; b < B; ++b) {
    std::vector<double> norms(N, 0.0);
    for (int t = 0; t < N; ++t) {
      const double* row = tokens.data() + (static_cast<int64_t>(b) * N + t) * D;
      double acc = 0.0;
      for (int d = 0; d < D; ++d) acc += row[d] * row[d];
      norms[t] = std::sqrt(acc);
    }
    kept[b] = top_k_keep(norms, keep_k);
    positions[b] = kept[b];
  }
  return {detail::gather_positions(tokens, positions), kept};
}

struct PruneTrace {
  std::vector<int> tokens_per_layer;  // sequence length seen by each layer
  std::vector<std::pair<int, std::vector<int>>> keep_sets;  // (layer, kept indices), item 0
};

// Forward pass of the model with a pruning schedule applied between decoder
// layers (fastv: once after layer K; pyramid_drop: after the last layer of
// each stage). Attention weights are materialized as required by the
// ranking criteria.
inline std::pair<VlmModel::Forward, PruneTrace> pruned_forward(
    const VlmModel& model, const std::vector<Tensor>& levels,
    const std::vector<std::vector<int>>& text_ids,
    const std::vector<std::vector<int>>& response_ids, const PruneSchedule& schedule) {
  schedule.validate(model.decoder.cfg.num_layers);
  if (model.cfg.use_refusion)
    throw std::invalid_argument("pruned_forward: schedules apply to the plain baseline");

  PruneTrace trace;
  Tensor vision_tokens;
  if (schedule.kind == PruneKind::encoder_prune) {
    if (model.projector.cfg.kind != ProjectorKind::mlp_identity)
      throw std::invalid_argument("encoder_prune requires the mlp_identity projector");
    const Tensor& last = levels.back();
    Tensor flat = reshape(last, {last.dim(0), last.dim(1) * last.dim(2), last.dim(3)});
    auto [kept_tokens, kept] = encoder_prune(flat, schedule.encoder_keep);
    trace.keep_sets.emplace_back(0, kept[0]);
    vision_tokens = model.projector.mlp(kept_tokens);
  } else {
    vision_tokens = model.projector.apply(levels.back());
  }

  auto [seq, layout] = model.decoder.embed(vision_tokens, text_ids, response_ids);

  // per-layer prune plan: keep count to apply after each 1-based layer
  int nv = layout.vision_len();
  std::vector<int> keep_after(model.decoder.cfg.num_layers + 1, -1);
  if (schedule.kind == PruneKind::fastv) {
    int keep = schedule.fastv_keep > 0
                   ? schedule.fastv_keep
                   : static_cast<int>(std::ceil(nv * schedule.fastv_keep_ratio));
    keep_after[schedule.fastv_layer] = std::min(keep, nv);
  } else if (schedule.kind == PruneKind::pyramid_drop) {
    double running = 1.0;
    for (size_t st = 0; st < schedule.stage_ends.size(); ++st) {
      running *= schedule.stage_ratios[st];
      keep_after[schedule.stage_ends[st]] =
          std::max(1, static_cast<int>(std::ceil(nv * running)));
    }
  }

  Tensor h = seq;
  SequenceLayout lay = layout;
  std::vector<std::vector<int>> original_idx(h.dim(0));
  for (auto& v : original_idx) {
    v.resize(nv);
    std::iota(v.begin(), v.end(), 0);
  }
  for (int layer = 1; layer <= model.decoder.cfg.num_layers; ++layer) {
    trace.tokens_per_layer.push_back(h.dim(1));
    Tensor mask = causal_mask(h.dim(1));
    bool want_attn = keep_after[layer] > 0;
    Tensor cap;
    h = model.decoder.layers[layer - 1].forward_full(h, mask, nullptr,
                                                     want_attn ? &cap : nullptr);
    if (want_attn && keep_after[layer] < lay.vision_len()) {
      Pruned p = fastv_prune(h, lay, cap, keep_after[layer]);
      // map back to original token ids for the trace
      std::vector<int> original;
      for (int v : p.kept_vision[0]) original.push_back(original_idx[0][v]);
      for (int b = 0; b < h.dim(0); ++b) {
        std::vector<int> mapped;
        for (int v : p.kept_vision[b]) mapped.push_back(original_idx[b][v]);
        original_idx[b] = mapped;
      }
      trace.keep_sets.emplace_back(layer, original);
      h = p.hidden;
      lay = p.layout;
    }
  }

  VlmModel::Forward out;
  out.logits = model.decoder.logits(h);
  out.layout = lay;
  return {out, trace};
}

}  // namespace vtlab
