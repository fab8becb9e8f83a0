#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "vtlab/cost.hpp"
#include "vtlab/pruning.hpp"

using namespace vtlab;
using Catch::Approx;

namespace {

DecoderConfig dec_cfg(int layers, int dt, int heads, int ff, int vocab) {
  DecoderConfig c;
  c.num_layers = layers;
  c.d_model = dt;
  c.heads = heads;
  c.d_ff = ff;
  c.vocab_size = vocab;
  c.max_seq_len = 2048;
  return c;
}

}  // namespace

TEST_CASE("analytic prefill count matches the instrumented counter exactly") {
  struct Case {
    int layers, dt, heads, ff, S;
  };
  for (Case c : {Case{2, 16, 2, 32, 12}, Case{3, 24, 4, 96, 33}, Case{1, 8, 1, 64, 7}}) {
    Rng rng(40 + c.layers);
    DecoderConfig cfg = dec_cfg(c.layers, c.dt, c.heads, c.ff, 11);
    Decoder dec(cfg, rng);
    NoGradGuard ng;
    Tensor seq = Tensor::randn({1, c.S, c.dt}, rng);
    Tensor mask = causal_mask(c.S);
    reset_mac_count();
    (void)dec.run_layers(seq, mask);
    INFO("layers=" << c.layers << " dt=" << c.dt << " S=" << c.S);
    REQUIRE(mac_count() == static_cast<uint64_t>(c.layers) *
                               cost::layer_prefill_macs(cfg, c.S));
    REQUIRE(mac_count() == cost::prefill_macs(cfg, c.S, 0));
  }
}

TEST_CASE("analytic decode-step count matches the instrumented counter exactly") {
  Rng rng(50);
  DecoderConfig cfg = dec_cfg(3, 16, 2, 48, 13);
  Decoder dec(cfg, rng);
  NoGradGuard ng;
  Tensor seq = Tensor::randn({1, 9, 16}, rng);
  Tensor mask = causal_mask(9);
  KVCache cache(cfg.num_layers);
  (void)dec.run_layers(seq, mask, nullptr, &cache);

  for (int step = 0; step < 3; ++step) {
    reset_mac_count();
    (void)dec.decode_step(1 + step, 9 + step, cache);
    // attends over cache (9 + step) plus the new token
    REQUIRE(mac_count() == cost::decode_step_macs(cfg, 9 + step + 1));
  }
}

TEST_CASE("re-fusion overhead matches the instrumented counter exactly") {
  for (Interaction inter : {Interaction::local, Interaction::global}) {
    RefusionConfig cfg;
    cfg.s = 2;
    cfg.d_vision = 4;
    cfg.feature_levels = {1, 2};
    cfg.d_model = 16;
    cfg.heads = 4;
    cfg.interaction = inter;
    Rng rng(60);
    RefusionBlock block(cfg, rng);
    SequenceLayout layout = SequenceLayout::make(4, 3, 0);
    NoGradGuard ng;
    Tensor hidden = Tensor::randn({1, layout.total(), 16}, rng);
    Tensor fused = Tensor::randn({1, 4, 4, cfg.fused_dim()}, rng);
    reset_mac_count();
    (void)block.apply(hidden, layout, fused);
    INFO(to_string(inter));
    REQUIRE(mac_count() == cost::vr_breakdown(cfg, 4, 4).per_insertion());
  }
}

TEST_CASE("paper-scale ratios: local/global 1/64 and (608/96)^2 prefill scores") {
  RefusionConfig local;
  local.s = 3;
  local.d_vision = 32;
  local.feature_levels = {1, 2, 3};
  local.d_model = 192;
  local.interaction = Interaction::local;
  RefusionConfig global = local;
  global.interaction = Interaction::global;

  auto bl = cost::vr_breakdown(local, 24, 24);
  auto bg = cost::vr_breakdown(global, 24, 24);
  double ratio = static_cast<double>(bl.score_mix) / static_cast<double>(bg.score_mix);
  REQUIRE(ratio == Approx(1.0 / 64).margin(1e-15));
  // n^2 * s^2 = 576 vs n^2 * W*H = 36864
  REQUIRE(bl.score_mix / (2ull * local.fused_dim()) == 576);
  REQUIRE(bg.score_mix / (2ull * local.fused_dim()) == 36864);

  DecoderConfig cfg = dec_cfg(12, 192, 4, 768, 64);
  double uncompressed = static_cast<double>(cost::layer_score_mix_macs(cfg, 576 + 32));
  double compressed = static_cast<double>(cost::layer_score_mix_macs(cfg, 64 + 32));
  double want = (608.0 / 96.0) * (608.0 / 96.0);
  REQUIRE(uncompressed / compressed == Approx(want).epsilon(1e-12));
}

TEST_CASE("formula structure: pure text, quarter law, linearity") {
  DecoderConfig cfg = dec_cfg(4, 32, 4, 128, 16);
  REQUIRE(cost::prefill_macs(cfg, 0, 40) == cost::prefill_macs(cfg, 40, 0));
  // halving S quarters the score term
  REQUIRE(cost::layer_score_mix_macs(cfg, 64) == 4 * cost::layer_score_mix_macs(cfg, 32));

  // kv cache: zero length, layer doubling, 9x vision-attributable shrink
  REQUIRE(cost::kv_cache_bytes(cfg, 0) == 0);
  DecoderConfig cfg2 = cfg;
  cfg2.num_layers *= 2;
  REQUIRE(cost::kv_cache_bytes(cfg2, 100) == 2 * cost::kv_cache_bytes(cfg, 100));
  uint64_t vis576 = cost::kv_cache_bytes(cfg, 576 + 32) - cost::kv_cache_bytes(cfg, 32);
  uint64_t vis64 = cost::kv_cache_bytes(cfg, 64 + 32) - cost::kv_cache_bytes(cfg, 32);
  REQUIRE(vis576 == 9 * vis64);

  // decode cost is affine in the attended length
  uint64_t d0 = cost::decode_step_macs(cfg, 10);
  uint64_t d1 = cost::decode_step_macs(cfg, 20);
  uint64_t d2 = cost::decode_step_macs(cfg, 30);
  REQUIRE(d2 - d1 == d1 - d0);
}

TEST_CASE("re-fusion cost asymptotics: local linear, global quadratic in W*H") {
  RefusionConfig cfg;
  cfg.s = 3;
  cfg.d_vision = 8;
  cfg.feature_levels = {1, 2, 3};
  cfg.d_model = 32;
  cfg.interaction = Interaction::local;

  auto small = cost::vr_breakdown(cfg, 12, 12);
  auto large = cost::vr_breakdown(cfg, 24, 24);  // 4x the feature count
  REQUIRE(large.cross_attention() == 4 * small.cross_attention());

  cfg.interaction = Interaction::global;
  auto gsmall = cost::vr_breakdown(cfg, 12, 12);
  auto glarge = cost::vr_breakdown(cfg, 24, 24);
  REQUIRE(glarge.score_mix == 16 * gsmall.score_mix);

  // L=1 vs L=3 scales the channel-linear attention terms by 3
  RefusionConfig l1 = cfg;
  l1.feature_levels = {1};
  REQUIRE(cost::vr_breakdown(cfg, 12, 12).score_mix ==
          3 * cost::vr_breakdown(l1, 12, 12).score_mix);

  // zero insertion layers, zero overhead
  RefusionConfig none = cfg;
  none.insertion_layers.clear();
  REQUIRE(cost::vr_overhead_macs(none, 24, 24) == 0);
}

TEST_CASE("instrumented asymptotics: counted local attention scales with the map") {
  RefusionConfig cfg;
  cfg.s = 2;
  cfg.d_vision = 4;
  cfg.feature_levels = {1};
  cfg.d_model = 8;
  cfg.heads = 2;
  Rng rng(70);
  RefusionBlock block(cfg, rng);
  NoGradGuard ng;

  auto measure = [&](int WH) {
    int n_tok = (WH / cfg.s) * (WH / cfg.s);
    SequenceLayout layout = SequenceLayout::make(n_tok, 2, 0);
    Tensor hidden = Tensor::randn({1, layout.total(), cfg.d_model}, rng);
    Tensor fused = Tensor::randn({1, WH, WH, cfg.fused_dim()}, rng);
    reset_mac_count();
    (void)block.cross_attention_delta(slice(hidden, 1, 0, n_tok), fused, Interaction::local);
    return mac_count();
  };
  uint64_t at4 = measure(4), at8 = measure(8);
  REQUIRE(at8 == 4 * at4);  // linear in feature count
}

TEST_CASE("pruned per-layer token accounting feeds the analytic model") {
  DecoderConfig cfg = dec_cfg(6, 16, 2, 32, 11);
  std::vector<int> counts = {67, 67, 35, 35, 19, 19};
  uint64_t pruned = cost::prefill_macs_per_layer_counts(cfg, counts);
  uint64_t unpruned = cost::prefill_macs(cfg, 64, 3);
  REQUIRE(pruned < unpruned);
  uint64_t expect = 0;
  for (int s : counts) expect += cost::layer_prefill_macs(cfg, s);
  REQUIRE(pruned == expect);
}

TEST_CASE("wall clock bench: sample counts, stability, argument checks") {
  VlmConfig cfg;
  cfg.seed = 3;
  cfg.encoder.depth = 2;
  cfg.encoder.d_vision = 16;
  cfg.encoder.patch = 4;
  cfg.encoder.heads = 2;
  cfg.encoder.max_grid = 6;
  cfg.projector.kind = ProjectorKind::avg_pool;
  cfg.projector.s = 3;
  cfg.projector.d_vision = 16;
  cfg.projector.d_model = 64;
  cfg.decoder.num_layers = 6;
  cfg.decoder.d_model = 64;
  cfg.decoder.heads = 4;
  cfg.decoder.vocab_size = 32;
  cfg.decoder.max_seq_len = 256;
  VlmModel model(cfg);

  WallClock a = bench_wall_clock(model, 6, 8, 16, 5, 2, 1);
  REQUIRE(a.ttft_ms.size() == 5);
  REQUIRE(a.tps.size() == 5);
  REQUIRE(a.ttft_median() > 0.0);
  REQUIRE(a.tps_median() > 0.0);

  WallClock b = bench_wall_clock(model, 6, 8, 16, 5, 2, 1);
  double tol = std::max(3.0 * (a.ttft_mad() + b.ttft_mad()),
                        0.35 * std::max(a.ttft_median(), b.ttft_median()));
  REQUIRE(std::fabs(a.ttft_median() - b.ttft_median()) <= tol);

  REQUIRE_THROWS_AS(bench_wall_clock(model, 6, 8, 16, 4, 2, 1), std::invalid_argument);
  REQUIRE_THROWS_AS(bench_wall_clock(model, 6, 8, 16, 5, 1, 1), std::invalid_argument);
}
