#pragma once

#include <string>
#include <utility>
#include <vector>

#include "vtlab/ops.hpp"
#include "vtlab/rng.hpp"
#include "vtlab/tensor.hpp"

namespace vtlab {

// Ordered collection of named parameter handles. Handles share storage with
// the owning modules, so optimizer updates and checkpoint loads write
// through.
class ParamRegistry {
 public:
  void add(const std::string& name, Tensor& t) {
    t.set_requires_grad(true);
    items_.emplace_back(name, t);
  }

  std::vector<std::pair<std::string, Tensor>>& items() { return items_; }
  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }

  Tensor* find(const std::string& name) {
    for (auto& [n, t] : items_)
      if (n == name) return &t;
    return nullptr;
  }

  int64_t total_elements() const {
    int64_t n = 0;
    for (const auto& [name, t] : items_) n += t.numel();
    return n;
  }

  void zero_grad() {
    for (auto& [name, t] : items_) t.zero_grad();
  }

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
};

struct Linear {
  Tensor weight;  // [in, out]; applied as x @ weight + bias
  Tensor bias;    // [out]

  Linear() = default;
  Linear(int in, int out, Rng& rng, double sigma = 0.02, bool zero_init = false) {
    weight = zero_init ? Tensor::zeros({in, out}) : Tensor::randn({in, out}, rng, sigma);
    bias = Tensor::zeros({out});
  }

  Tensor operator()(const Tensor& x) const { return add(matmul(x, weight), bias); }

  void register_params(ParamRegistry& reg, const std::string& prefix) {
    reg.add(prefix + ".weight", weight);
    reg.add(prefix + ".bias", bias);
  }
};

// Two-layer MLP with GELU, the stock transformer feed-forward.
struct Mlp2 {
  Linear fc1, fc2;

  Mlp2() = default;
  Mlp2(int in, int hidden, int out, Rng& rng, double sigma = 0.02)
      : fc1(in, hidden, rng, sigma), fc2(hidden, out, rng, sigma) {}

  Tensor operator()(const Tensor& x) const { return fc2(gelu(fc1(x))); }

  void register_params(ParamRegistry& reg, const std::string& prefix) {
    fc1.register_params(reg, prefix + ".fc1");
    fc2.register_params(reg, prefix + ".fc2");
  }
};

struct LayerNorm {
  Tensor gamma, beta;

  LayerNorm() = default;
  explicit LayerNorm(int d) : gamma(Tensor::full({d}, 1.0)), beta(Tensor::zeros({d})) {}

  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }

  void register_params(ParamRegistry& reg, const std::string& prefix) {
    reg.add(prefix + ".gamma", gamma);
    reg.add(prefix + ".beta", beta);
  }
};

// Multi-head attention over [B, L, C] sequences. Query and key/value inputs
// may carry different channel counts; the output projection may change the
// channel count again (used by the cross-attention blocks).
struct MultiHeadAttention {
  Linear wq, wk, wv, wo;
  int heads = 1;
  int d_attn = 0;

  MultiHeadAttention() = default;
  MultiHeadAttention(int d_q_in, int d_kv_in, int d_attn_, int d_out, int heads_, Rng& rng,
                     bool zero_init_out = false)
      : wq(d_q_in, d_attn_, rng),
        wk(d_kv_in, d_attn_, rng),
        wv(d_kv_in, d_attn_, rng),
        wo(d_attn_, d_out, rng, 0.02, zero_init_out),
        heads(heads_),
        d_attn(d_attn_) {
    if (d_attn_ % heads_ != 0)
      throw std::invalid_argument("MultiHeadAttention: d_attn must divide by heads");
  }

  int head_dim() const { return d_attn / heads; }

  // [B, L, C] -> [B, heads, L, dh]
  Tensor split_heads(const Tensor& x) const {
    int B = x.dim(0), L = x.dim(1);
    return permute(reshape(x, {B, L, heads, head_dim()}), {0, 2, 1, 3});
  }

  // [B, heads, L, dh] -> [B, L, C]
  Tensor merge_heads(const Tensor& x) const {
    int B = x.dim(0), L = x.dim(2);
    return reshape(permute(x, {0, 2, 1, 3}), {B, L, d_attn});
  }

  // Core attention on already-projected heads. mask (additive, entries in
  // {0, kMaskNeg}) broadcasts against [B, heads, Lq, Lk]. When capture is
  // given, the softmax weights are copied out.
  Tensor attend(const Tensor& qh, const Tensor& kh, const Tensor& vh,
                const Tensor* mask = nullptr, Tensor* capture = nullptr) const {
    double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim()));
    Tensor scores = scale(matmul(qh, transpose_last_two(kh)), inv_sqrt);
    if (mask) scores = add(scores, *mask);
    Tensor probs = softmax(scores, -1);
    if (capture) *capture = probs.detach().clone();
    return wo(merge_heads(matmul(probs, vh)));
  }

  Tensor operator()(const Tensor& q_in, const Tensor& kv_in, const Tensor* mask = nullptr,
                    Tensor* capture = nullptr) const {
    Tensor qh = split_heads(wq(q_in));
    Tensor kh = split_heads(wk(kv_in));
    Tensor vh = split_heads(wv(kv_in));
    return attend(qh, kh, vh, mask, capture);
  }

  void register_params(ParamRegistry& reg, const std::string& prefix) {
    wq.register_params(reg, prefix + ".wq");
    wk.register_params(reg, prefix + ".wk");
    wv.register_params(reg, prefix + ".wv");
    wo.register_params(reg, prefix + ".wo");
  }
};

// Additive causal mask [S, S]: position i attends to j <= i.
inline Tensor causal_mask(int S) {
  Tensor m({S, S});
  for (int i = 0; i < S; ++i)
    for (int j = 0; j < S; ++j) m.at({i, j}) = j <= i ? 0.0 : kMaskNeg;
  return m;
}

}  // namespace vtlab
