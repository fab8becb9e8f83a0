#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "vtlab/decoder.hpp"
#include "vtlab/model.hpp"
#include "vtlab/refusion.hpp"
#include "vtlab/rng.hpp"
#include "vtlab/tensor.hpp"

namespace vtlab {

// Analytic inference-cost accounting. All closed forms below count scalar
// multiply-adds (MACs) and mirror the instrumented op counter exactly;
// FLOPs = 2 * MACs. Norms, softmax exponentials, biases and activations are
// not counted. kv_cache_bytes = num_layers * 2 * seq_len * d_model * 8.
namespace cost {

constexpr int kFlopsPerMac = 2;
constexpr int kBytesPerElement = 8;  // 64-bit reals

// One pre-norm causal layer on S tokens:
// QKVO projections 4*S*Dt^2, scores+mix 2*S^2*Dt, MLP 2*S*Dt*d_ff.
inline uint64_t layer_prefill_macs(const DecoderConfig& cfg, int64_t S) {
  uint64_t dt = static_cast<uint64_t>(cfg.d_model);
  uint64_t s = static_cast<uint64_t>(S);
  return 4 * s * dt * dt + 2 * s * s * dt + 2 * s * dt * static_cast<uint64_t>(cfg.ff());
}

inline uint64_t layer_score_mix_macs(const DecoderConfig& cfg, int64_t S) {
  return 2 * static_cast<uint64_t>(S) * S * static_cast<uint64_t>(cfg.d_model);
}

inline uint64_t prefill_macs(const DecoderConfig& cfg, int64_t n_vision, int64_t n_text) {
  return static_cast<uint64_t>(cfg.num_layers) * layer_prefill_macs(cfg, n_vision + n_text);
}

// Per-layer sequence lengths may differ under a pruning schedule.
inline uint64_t prefill_macs_per_layer_counts(const DecoderConfig& cfg,
                                              const std::vector<int>& tokens_per_layer) {
  if (static_cast<int>(tokens_per_layer.size()) != cfg.num_layers)
    throw std::invalid_argument("prefill_macs_per_layer_counts: length != num_layers");
  uint64_t total = 0;
  for (int s : tokens_per_layer) total += layer_prefill_macs(cfg, s);
  return total;
}

inline uint64_t lm_head_macs(const DecoderConfig& cfg, int64_t S) {
  return static_cast<uint64_t>(S) * cfg.d_model * cfg.vocab_size;
}

// One cached decode step attending over `attended_len` keys (cache plus the
// new token); includes the LM head. Linear in attended_len.
inline uint64_t decode_step_macs(const DecoderConfig& cfg, int64_t attended_len) {
  uint64_t dt = static_cast<uint64_t>(cfg.d_model);
  uint64_t per_layer =
      4 * dt * dt + 2 * static_cast<uint64_t>(attended_len) * dt +
      2 * dt * static_cast<uint64_t>(cfg.ff());
  return static_cast<uint64_t>(cfg.num_layers) * per_layer + lm_head_macs(cfg, 1);
}

inline uint64_t kv_cache_bytes(const DecoderConfig& cfg, int64_t seq_len) {
  return static_cast<uint64_t>(cfg.num_layers) * 2 * static_cast<uint64_t>(seq_len) *
         cfg.d_model * kBytesPerElement;
}

// Re-fusion block cost per insertion on a W x H feature map. R = n^2 + 1
// rows enter the bidirectional sublayer; C = L*Dv channels carry the
// cross-attention. The local/global choice changes only score_mix.
struct VrBreakdown {
  uint64_t bidir = 0;      // 4*R*Dt^2 + 2*R^2*Dt
  uint64_t expand = 0;     // n^2 * C * (Dt + C)
  uint64_t q_proj = 0;     // n^2 * C^2
  uint64_t kv_proj = 0;    // 2 * W*H * C^2
  uint64_t score_mix = 0;  // 2 * n^2 * k * C, k = s^2 (local) or W*H (global)
  uint64_t out_proj = 0;   // n^2 * C * Dt

  uint64_t per_insertion() const {
    return bidir + expand + q_proj + kv_proj + score_mix + out_proj;
  }
  // cross-attention sublayer only (the part that scales with the feature map)
  uint64_t cross_attention() const { return expand + q_proj + kv_proj + score_mix + out_proj; }
};

inline VrBreakdown vr_breakdown(const RefusionConfig& cfg, int W, int H) {
  if (W % cfg.s != 0 || H % cfg.s != 0)
    throw std::invalid_argument("vr_breakdown: map not divisible by s");
  uint64_t n2 = static_cast<uint64_t>(W / cfg.s) * (H / cfg.s);
  uint64_t C = static_cast<uint64_t>(cfg.fused_dim());
  uint64_t dt = static_cast<uint64_t>(cfg.d_model);
  uint64_t R = n2 + 1;
  uint64_t wh = static_cast<uint64_t>(W) * H;
  uint64_t k = cfg.interaction == Interaction::local ? static_cast<uint64_t>(cfg.s) * cfg.s
                                                     : wh;
  VrBreakdown b;
  b.bidir = 4 * R * dt * dt + 2 * R * R * dt;
  b.expand = n2 * C * (dt + C);
  b.q_proj = n2 * C * C;
  b.kv_proj = 2 * wh * C * C;
  b.score_mix = 2 * n2 * k * C;
  b.out_proj = n2 * C * dt;
  return b;
}

inline uint64_t vr_overhead_macs(const RefusionConfig& cfg, int W, int H) {
  return vr_breakdown(cfg, W, H).per_insertion() *
         static_cast<uint64_t>(cfg.insertion_layers.size());
}

}  // namespace cost

// ---- robust sample statistics ----

namespace stats {

inline double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median: empty sample");
  std::sort(v.begin(), v.end());
  size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Median absolute deviation from the median.
inline double mad(const std::vector<double>& v) {
  double m = median(v);
  std::vector<double> dev;
  dev.reserve(v.size());
  for (double x : v) dev.push_back(std::fabs(x - m));
  return median(dev);
}

inline double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double sample_sd(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

inline double pooled_sd(const std::vector<double>& a, const std::vector<double>& b) {
  double sa = sample_sd(a), sb = sample_sd(b);
  return std::sqrt(0.5 * (sa * sa + sb * sb));
}

}  // namespace stats

// ---- wall-clock microbenchmarks ----

struct WallClock {
  std::vector<double> ttft_ms;  // prefill latency samples
  std::vector<double> tps;      // decode tokens-per-second samples

  double ttft_median() const { return stats::median(ttft_ms); }
  double ttft_mad() const { return stats::mad(ttft_ms); }
  double tps_median() const { return stats::median(tps); }
  double tps_mad() const { return stats::mad(tps); }
};

// Measures full-pipeline prefill latency (encoder + projector + re-fusion +
// decoder layers + first logits) and steady-state decode throughput on one
// random scenario. Single-threaded by construction; warmup runs discarded.
inline WallClock bench_wall_clock(const VlmModel& model, int grid, int n_text,
                                  int decode_tokens, int repeats, int warmup,
                                  uint64_t seed) {
  if (repeats < 5) throw std::invalid_argument("bench: repeats must be >= 5");
  if (warmup < 2) throw std::invalid_argument("bench: warmup must be >= 2");
  NoGradGuard ng;
  Rng rng(seed);
  int side = grid * model.cfg.encoder.patch;
  Tensor image = Tensor::rand_uniform({1, side, side, model.cfg.encoder.channels}, rng);
  std::vector<int> text(n_text);
  for (int& id : text)
    id = static_cast<int>(rng.below(model.decoder.cfg.vocab_size));

  using clock = std::chrono::steady_clock;
  WallClock wc;
  for (int rep = 0; rep < warmup + repeats; ++rep) {
    KVCache cache(model.decoder.cfg.num_layers);
    auto t0 = clock::now();
    auto levels = model.encoder.forward_levels(image);
    auto fwd = model.forward_from_levels(levels, {text}, {}, nullptr, &cache);
    int S = fwd.layout.total();
    volatile double sink = fwd.logits[(S - 1) * model.decoder.cfg.vocab_size];
    auto t1 = clock::now();
    (void)sink;

    int token = 1;
    auto t2 = clock::now();
    for (int i = 0; i < decode_tokens; ++i) {
      Tensor logits = model.decoder.decode_step(token, S + i, cache);
      token = 0;
      for (int v = 1; v < model.decoder.cfg.vocab_size; ++v)
        if (logits[v] > logits[token]) token = v;
    }
    auto t3 = clock::now();

    if (rep < warmup) continue;
    double ttft = std::chrono::duration<double, std::milli>(t1 - t0).count();
    double decode_s = std::chrono::duration<double>(t3 - t2).count();
    wc.ttft_ms.push_back(ttft);
    wc.tps.push_back(decode_tokens / decode_s);
  }
  if (wc.ttft_median() < 0.05)
    throw std::runtime_error(
        "bench: prefill below timer resolution; enlarge the scenario (bigger grid or "
        "decoder)");
  return wc;
}

}  // namespace vtlab
