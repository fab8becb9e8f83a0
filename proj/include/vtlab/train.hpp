#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "vtlab/model.hpp"
#include "vtlab/ops.hpp"
#include "vtlab/rng.hpp"
#include "vtlab/synthetic.hpp"
#include "vtlab/tensor.hpp"

namespace vtlab {

struct TrainConfig {
  int steps = 1200;
  int batch_size = 16;
  double lr = 1e-3;
  bool cosine_lr = true;     // decay to lr_floor_frac * lr over `steps`
  double lr_floor_frac = 0.1;
  int warmup_steps = 50;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  // The encoder stands in for a pretrained vision tower and stays frozen by
  // default; only projector, re-fusion blocks and decoder train.
  bool freeze_encoder = true;
  int train_examples = 2048;
  int eval_examples = 512;
  int log_every = 100;
};

namespace detail {
// Gather rows along axis 0 (no tape edge; used for constant feature banks).
inline Tensor take_rows0(const Tensor& t, const std::vector<int>& idx) {
  std::vector<int> shape = t.shape();
  shape[0] = static_cast<int>(idx.size());
  Tensor out(shape);
  int64_t row = t.numel() / t.dim(0);
  for (size_t i = 0; i < idx.size(); ++i)
    std::copy_n(t.data() + static_cast<int64_t>(idx[i]) * row, row, out.data() + i * row);
  return out;
}
}  // namespace detail

// Single-phase trainer on the glyph-grid task. With a frozen encoder the
// per-example features are computed once and reused every step.
class Trainer {
 public:
  Trainer(VlmModel& model, const Dataset& train_data, const TrainConfig& cfg)
      : model_(model),
        data_(train_data),
        cfg_(cfg),
        params_(model.trainable_params(cfg.freeze_encoder)),
        rng_(Rng(model.cfg.seed).split(0x7ea1)) {
    adam_.lr = cfg.lr;
    adam_.beta1 = cfg.beta1;
    adam_.beta2 = cfg.beta2;
    adam_.eps = cfg.eps;
    adam_.weight_decay = cfg.weight_decay;
    if (cfg_.freeze_encoder) precompute_features();
  }

  ParamRegistry& params() { return params_; }

  // Linear warmup then cosine decay over the configured step budget.
  double lr_at(int step) const {
    if (cfg_.warmup_steps > 0 && step < cfg_.warmup_steps)
      return cfg_.lr * (step + 1) / cfg_.warmup_steps;
    if (!cfg_.cosine_lr) return cfg_.lr;
    double t = cfg_.steps <= cfg_.warmup_steps
                   ? 1.0
                   : static_cast<double>(step - cfg_.warmup_steps) /
                         (cfg_.steps - cfg_.warmup_steps);
    t = std::min(1.0, std::max(0.0, t));
    double floor = cfg_.lr * cfg_.lr_floor_frac;
    return floor + 0.5 * (cfg_.lr - floor) * (1.0 + std::cos(3.14159265358979323846 * t));
  }

  // One optimization step; returns the batch loss.
  double step() {
    std::vector<int> idx(cfg_.batch_size);
    for (int& i : idx) i = static_cast<int>(rng_.below(data_.examples.size()));
    std::vector<Tensor> levels = batch_levels(data_, idx, feature_bank_);
    auto texts = data_.texts(idx);
    auto targets = data_.targets(idx);
    VlmModel::Forward fwd = model_.forward_from_levels(levels, texts, targets);
    Tensor loss = model_.response_loss(fwd, targets);
    params_.zero_grad();
    loss.backward();
    adam_.lr = lr_at(steps_done_++);
    adam_step(params_, state_, adam_);
    return loss[0];
  }

  std::vector<double> run(int steps) {
    std::vector<double> losses;
    losses.reserve(steps);
    for (int i = 0; i < steps; ++i) losses.push_back(step());
    return losses;
  }

  // Greedy next-token accuracy on a held-out set (batched argmax at the last
  // prompt position, which equals one-step greedy decoding).
  double evaluate(const Dataset& eval_data) const {
    NoGradGuard ng;
    int n = static_cast<int>(eval_data.examples.size());
    int correct = 0;
    const int chunk = 64;
    for (int at = 0; at < n; at += chunk) {
      int m = std::min(chunk, n - at);
      std::vector<int> idx(m);
      for (int i = 0; i < m; ++i) idx[i] = at + i;
      std::vector<Tensor> levels =
          model_.encoder.forward_levels(eval_data.images(idx));
      VlmModel::Forward fwd =
          model_.forward_from_levels(levels, eval_data.texts(idx));
      int S = fwd.layout.total(), V = model_.decoder.cfg.vocab_size;
      Tensor last = slice(fwd.logits, 1, S - 1, S);
      for (int b = 0; b < m; ++b) {
        const double* row = last.data() + static_cast<int64_t>(b) * V;
        int best = 0;
        for (int v = 1; v < V; ++v)
          if (row[v] > row[best]) best = v;
        if (best == eval_data.task.glyph_token(eval_data.examples[idx[b]].label)) ++correct;
      }
    }
    return static_cast<double>(correct) / n;
  }

 private:
  void precompute_features() {
    NoGradGuard ng;
    int n = static_cast<int>(data_.examples.size());
    const int chunk = 64;
    for (int at = 0; at < n; at += chunk) {
      int m = std::min(chunk, n - at);
      std::vector<int> idx(m);
      for (int i = 0; i < m; ++i) idx[i] = at + i;
      std::vector<Tensor> levels = model_.encoder.forward_levels(data_.images(idx));
      if (feature_bank_.empty()) {
        for (const Tensor& lv : levels) {
          std::vector<int> shape = lv.shape();
          shape[0] = n;
          feature_bank_.emplace_back(shape);
        }
      }
      for (size_t l = 0; l < levels.size(); ++l) {
        int64_t row = levels[l].numel() / m;
        std::copy_n(levels[l].data(), levels[l].numel(),
                    feature_bank_[l].data() + static_cast<int64_t>(at) * row);
      }
    }
  }

  std::vector<Tensor> batch_levels(const Dataset& ds, const std::vector<int>& idx,
                                   const std::vector<Tensor>& bank) const {
    if (!bank.empty()) {
      std::vector<Tensor> levels;
      levels.reserve(bank.size());
      for (const Tensor& lv : bank) levels.push_back(detail::take_rows0(lv, idx));
      return levels;
    }
    return model_.encoder.forward_levels(ds.images(idx));
  }

  VlmModel& model_;
  const Dataset& data_;
  TrainConfig cfg_;
  ParamRegistry params_;
  AdamConfig adam_;
  AdamState state_;
  Rng rng_;
  int steps_done_ = 0;
  std::vector<Tensor> feature_bank_;
};

}  // namespace vtlab
