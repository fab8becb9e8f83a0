#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "vtlab/gradcheck.hpp"
#include "vtlab/oracles.hpp"
#include "vtlab/refusion.hpp"

using namespace vtlab;
using Catch::Approx;

namespace {

RefusionConfig small_cfg(int s, int dv, int levels, int dt, Interaction inter) {
  RefusionConfig cfg;
  cfg.s = s;
  cfg.d_vision = dv;
  cfg.feature_levels.assign(levels, 0);
  for (int i = 0; i < levels; ++i) cfg.feature_levels[i] = i + 1;
  cfg.d_model = dt;
  cfg.interaction = inter;
  cfg.heads = 4;
  return cfg;
}

// The output projections ship zero-initialized (identity block); give them
// real values so equivalence and locality tests exercise the full path.
void randomize_out_projections(RefusionBlock& block, Rng& rng) {
  block.cross.wo.weight = Tensor::randn(block.cross.wo.weight.shape(), rng, 0.1);
  block.cross.wo.bias = Tensor::randn(block.cross.wo.bias.shape(), rng, 0.1);
  block.bidir.wo.weight = Tensor::randn(block.bidir.wo.weight.shape(), rng, 0.1);
  block.bidir.wo.bias = Tensor::randn(block.bidir.wo.bias.shape(), rng, 0.1);
}

}  // namespace

TEST_CASE("fuse_multilevel: order, slicing, channel arithmetic") {
  Rng rng(1);
  Tensor a = Tensor::randn({1, 2, 2, 3}, rng);
  Tensor b = Tensor::randn({1, 2, 2, 3}, rng);

  REQUIRE(fuse_multilevel({a}).vec() == a.vec());

  Tensor ab = fuse_multilevel({a, b});
  REQUIRE(ab.shape() == std::vector<int>{1, 2, 2, 6});
  REQUIRE(slice(ab, 3, 0, 3).vec() == a.vec());
  REQUIRE(slice(ab, 3, 3, 6).vec() == b.vec());

  Tensor c = Tensor::randn({1, 2, 2, 16}, rng);
  Tensor d = Tensor::randn({1, 2, 2, 16}, rng);
  Tensor e = Tensor::randn({1, 2, 2, 16}, rng);
  REQUIRE(fuse_multilevel({c, d, e}).dim(3) == 48);

  REQUIRE_THROWS_AS(fuse_multilevel({a, Tensor::zeros({1, 3, 2, 3})}),
                    std::invalid_argument);
}

TEST_CASE("expand query: zero weights map every token to the bias") {
  Rng rng(2);
  Mlp2 expand(8, 12, 12, rng);
  std::fill(expand.fc1.weight.vec().begin(), expand.fc1.weight.vec().end(), 0.0);
  std::fill(expand.fc1.bias.vec().begin(), expand.fc1.bias.vec().end(), 0.0);
  std::fill(expand.fc2.weight.vec().begin(), expand.fc2.weight.vec().end(), 0.0);
  Tensor bias_value = Tensor::randn({12}, rng);
  expand.fc2.bias = bias_value;

  Tensor tokens = Tensor::randn({2, 5, 8}, rng);
  Tensor out = expand(tokens);
  REQUIRE(out.shape() == std::vector<int>{2, 5, 12});
  for (int b = 0; b < 2; ++b)
    for (int t = 0; t < 5; ++t)
      for (int c = 0; c < 12; ++c) REQUIRE(out.at({b, t, c}) == bias_value[c]);

  // shape contract: Dt=32, L=3, Dv=16 -> 48 channels
  Mlp2 expand2(32, 48, 48, rng);
  REQUIRE(expand2(Tensor::randn({1, 4, 32}, rng)).dim(2) == 48);
}

TEST_CASE("window partition: bookkeeping oracle, degenerate window, bijection") {
  Rng rng(3);
  Tensor x = Tensor::randn({1, 6, 6, 2}, rng);
  Tensor w = window_partition(x, 3);
  REQUIRE(w.shape() == std::vector<int>{4, 9, 2});
  for (int win = 0; win < 4; ++win)
    for (int t = 0; t < 9; ++t)
      for (int c = 0; c < 2; ++c)
        REQUIRE(w.at({win, t, c}) == x[oracle::window_source_index(win, t, c, 6, 6, 2, 3)]);

  // s = W = H: a single window equal to the flattened map
  Tensor one = window_partition(x, 6);
  REQUIRE(one.shape() == std::vector<int>{1, 36, 2});
  REQUIRE(one.vec() == x.vec());

  REQUIRE(window_unpartition(window_partition(x, 2), 2, 1, 6, 6).vec() == x.vec());
}

TEST_CASE("local cross-attention equals masked-global attention") {
  int cases = 0;
  for (int B : {1, 2})
    for (int WH : {4, 6})
      for (int s : {2, 3}) {
        if (WH % s != 0) continue;
        for (int Dv : {4, 8})
          for (int L : {1, 3}) {
            Rng rng(1000 + cases * 17);
            RefusionConfig cfg = small_cfg(s, Dv, L, 16, Interaction::local);
            RefusionBlock block(cfg, rng);
            randomize_out_projections(block, rng);

            int n_tok = (WH / s) * (WH / s);
            Tensor vision = Tensor::randn({B, n_tok, cfg.d_model}, rng);
            Tensor fused = Tensor::randn({B, WH, WH, cfg.fused_dim()}, rng);

            Tensor local = block.cross_attention_delta(vision, fused, Interaction::local);
            Tensor mask = window_block_mask(WH, WH, s);
            Tensor global =
                block.cross_attention_delta(vision, fused, Interaction::global, &mask);

            double max_diff = 0.0;
            for (int64_t i = 0; i < local.numel(); ++i)
              max_diff = std::max(max_diff, std::fabs(local[i] - global[i]));
            INFO("B=" << B << " WH=" << WH << " s=" << s << " Dv=" << Dv << " L=" << L);
            REQUIRE(max_diff <= 1e-10);
            ++cases;
          }
      }
  REQUIRE(cases >= 12);
}

TEST_CASE("local and unmasked global coincide on a single-window map") {
  Rng rng(4);
  RefusionConfig cfg = small_cfg(2, 4, 1, 8, Interaction::local);
  RefusionBlock block(cfg, rng);
  randomize_out_projections(block, rng);
  Tensor vision = Tensor::randn({1, 1, 8}, rng);
  Tensor fused = Tensor::randn({1, 2, 2, 4}, rng);
  Tensor local = block.cross_attention_delta(vision, fused, Interaction::local);
  Tensor global = block.cross_attention_delta(vision, fused, Interaction::global);
  for (int64_t i = 0; i < local.numel(); ++i)
    REQUIRE(local[i] == Approx(global[i]).margin(1e-12));
}

TEST_CASE("constant feature map: identical resample for every token") {
  Rng rng(5);
  RefusionConfig cfg = small_cfg(2, 4, 2, 8, Interaction::local);
  RefusionBlock block(cfg, rng);
  randomize_out_projections(block, rng);
  Tensor vision = Tensor::randn({1, 4, 8}, rng);
  Tensor fused = Tensor::full({1, 4, 4, 8}, 0.37);
  Tensor delta = block.cross_attention_delta(vision, fused, Interaction::local);
  for (int t = 1; t < 4; ++t)
    for (int d = 0; d < 8; ++d)
      REQUIRE(delta.at({0, t, d}) == Approx(delta.at({0, 0, d})).margin(1e-12));
}

TEST_CASE("locality: feature perturbations stay inside their window") {
  Rng rng(6);
  RefusionConfig cfg = small_cfg(3, 4, 1, 8, Interaction::local);
  RefusionBlock block(cfg, rng);
  randomize_out_projections(block, rng);
  Tensor vision = Tensor::randn({1, 4, 8}, rng);
  Tensor fused = Tensor::randn({1, 6, 6, 4}, rng);
  Tensor base = block.cross_attention_delta(vision, fused, Interaction::local);

  Tensor bumped = fused.clone();
  bumped.at({0, 1, 1, 2}) += 5.0;  // inside window 0
  Tensor out = block.cross_attention_delta(vision, bumped, Interaction::local);
  for (int t = 1; t < 4; ++t)
    for (int d = 0; d < 8; ++d) REQUIRE(out.at({0, t, d}) == base.at({0, t, d}));
  bool moved = false;
  for (int d = 0; d < 8; ++d) moved = moved || out.at({0, 0, d}) != base.at({0, 0, d});
  REQUIRE(moved);
}

TEST_CASE("text guided token: identity, elementwise max, permutation symmetry") {
  Tensor single = Tensor::from_vec({1, 1, 3}, {1, 2, 3});
  REQUIRE(text_guided_token(single).vec() == std::vector<double>{1, 2, 3});

  Tensor rows = Tensor::from_vec({1, 2, 2}, {1, 5, 3, 2});
  Tensor g = text_guided_token(rows);
  REQUIRE(g.vec() == std::vector<double>{3, 5});
  REQUIRE(g.vec() == oracle::rowwise_max({{1, 5}, {3, 2}}));

  Tensor swapped = Tensor::from_vec({1, 2, 2}, {3, 2, 1, 5});
  REQUIRE(text_guided_token(swapped).vec() == g.vec());
}

TEST_CASE("bidirectional self-attention: reachability witnesses") {
  Rng rng(7);
  RefusionConfig cfg = small_cfg(2, 4, 1, 8, Interaction::local);
  RefusionBlock block(cfg, rng);
  randomize_out_projections(block, rng);

  Tensor vision = Tensor::randn({1, 4, 8}, rng);
  Tensor text = Tensor::randn({1, 3, 8}, rng);
  Tensor base = block.bidir_sublayer(vision, text);

  // guide perturbation reaches every vision row
  Tensor text2 = text.clone();
  for (int d = 0; d < 8; ++d) text2.at({0, 1, d}) += 2.0;
  Tensor out2 = block.bidir_sublayer(vision, text2);
  for (int t = 0; t < 4; ++t) {
    double delta = 0.0;
    for (int d = 0; d < 8; ++d) delta += std::fabs(out2.at({0, t, d}) - base.at({0, t, d}));
    REQUIRE(delta > 0.0);
  }

  // a later vision row perturbs an earlier row's output (single component;
  // layer norm absorbs whole-row constant shifts)
  Tensor vision2 = vision.clone();
  vision2.at({0, 3, 2}) += 2.0;
  Tensor out3 = block.bidir_sublayer(vision2, text);
  double delta = 0.0;
  for (int d = 0; d < 8; ++d) delta += std::fabs(out3.at({0, 0, d}) - base.at({0, 0, d}));
  REQUIRE(delta > 0.0);
}

TEST_CASE("bidirectional sublayer matches a naive loop oracle") {
  Rng rng(8);
  RefusionConfig cfg = small_cfg(2, 4, 1, 8, Interaction::local);
  cfg.heads = 1;  // single head so the oracle is plain attention
  RefusionBlock block(cfg, rng);
  randomize_out_projections(block, rng);

  Tensor vision = Tensor::randn({1, 4, 8}, rng);
  Tensor text = Tensor::randn({1, 3, 8}, rng);
  Tensor got = block.bidir_sublayer(vision, text);

  // oracle route: guide = rowwise max, u = [vision|guide], pre-norm
  // single-head attention with the block's own projections, residual add.
  std::vector<std::vector<double>> text_rows(3, std::vector<double>(8));
  for (int t = 0; t < 3; ++t)
    for (int d = 0; d < 8; ++d) text_rows[t][d] = text.at({0, t, d});
  std::vector<double> guide = oracle::rowwise_max(text_rows);

  const int R = 5, D = 8;
  std::vector<double> u(R * D);
  for (int t = 0; t < 4; ++t)
    for (int d = 0; d < D; ++d) u[t * D + d] = vision.at({0, t, d});
  for (int d = 0; d < D; ++d) u[4 * D + d] = guide[d];

  std::vector<double> normed(R * D);
  std::vector<double> gamma(block.ln_bidir.gamma.vec()), beta(block.ln_bidir.beta.vec());
  for (int r = 0; r < R; ++r) {
    std::vector<double> row(u.begin() + r * D, u.begin() + (r + 1) * D);
    auto ln = oracle::layer_norm_row(row, gamma, beta);
    std::copy(ln.begin(), ln.end(), normed.begin() + r * D);
  }
  auto project = [&](const Linear& lin) {
    auto out = oracle::matmul(normed, lin.weight.vec(), R, D, D);
    for (int r = 0; r < R; ++r)
      for (int d = 0; d < D; ++d) out[r * D + d] += lin.bias[d];
    return out;
  };
  auto q = project(block.bidir.wq), k = project(block.bidir.wk), v = project(block.bidir.wv);
  auto mix = oracle::attention(q, k, v, R, R, D, D);
  auto attn = oracle::matmul(mix, block.bidir.wo.weight.vec(), R, D, D);
  for (int r = 0; r < R; ++r)
    for (int d = 0; d < D; ++d) attn[r * D + d] += block.bidir.wo.bias[d];

  for (int t = 0; t < 4; ++t)
    for (int d = 0; d < D; ++d)
      REQUIRE(got.at({0, t, d}) == Approx(u[t * D + d] + attn[t * D + d]).margin(1e-12));
}

TEST_CASE("block: pass-through spans, interaction modes differ, identity at init") {
  Rng rng(9);
  RefusionConfig cfg = small_cfg(2, 4, 2, 8, Interaction::local);
  SequenceLayout layout = SequenceLayout::make(4, 3, 2);
  Tensor hidden = Tensor::randn({2, layout.total(), 8}, rng);
  Tensor fused = Tensor::randn({2, 4, 4, 8}, rng);

  RefusionBlock fresh(cfg, rng);
  Tensor untouched = fresh.apply(hidden, layout, fused);
  REQUIRE(untouched.vec() == hidden.vec());  // zero-init output projections

  RefusionBlock block(cfg, rng);
  randomize_out_projections(block, rng);
  Tensor out = block.apply(hidden, layout, fused);
  for (int b = 0; b < 2; ++b)
    for (int t = layout.text_begin; t < layout.response_end; ++t)
      for (int d = 0; d < 8; ++d) REQUIRE(out.at({b, t, d}) == hidden.at({b, t, d}));

  RefusionBlock global_block = block;
  global_block.cfg.interaction = Interaction::global;
  Tensor gout = global_block.apply(hidden, layout, fused);
  REQUIRE(gout.vec() != out.vec());

  // guide symmetry: permuting text rows leaves the block output unchanged
  Tensor permuted = hidden.clone();
  for (int b = 0; b < 2; ++b)
    for (int d = 0; d < 8; ++d) {
      std::swap(permuted.at({b, 4, d}), permuted.at({b, 6, d}));
    }
  Tensor pout = block.apply(permuted, layout, fused);
  for (int b = 0; b < 2; ++b)
    for (int t = 0; t < 4; ++t)
      for (int d = 0; d < 8; ++d) REQUIRE(pout.at({b, t, d}) == out.at({b, t, d}));

  SequenceLayout bad;
  bad.vision_begin = bad.vision_end = 0;
  bad.text_begin = 0;
  bad.text_end = 3;
  bad.response_begin = bad.response_end = 3;
  REQUIRE_THROWS_AS(block.apply(hidden, bad, fused), std::invalid_argument);
}

TEST_CASE("gradients flow through the whole block") {
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(500 + seed);
    RefusionConfig cfg = small_cfg(2, 4, 1, 8, seed % 2 == 0 ? Interaction::local
                                                             : Interaction::global);
    RefusionBlock block(cfg, rng);
    randomize_out_projections(block, rng);
    SequenceLayout layout = SequenceLayout::make(4, 2, 1);
    std::vector<Tensor> in = {Tensor::randn({1, layout.total(), 8}, rng),
                              Tensor::randn({1, 4, 4, 4}, rng)};
    double err = check_gradient(
        [&block, layout](std::vector<Tensor>& in) {
          return block.apply(in[0], layout, in[1]);
        },
        in, rng);
    REQUIRE(err <= 1e-4);
  }
}
