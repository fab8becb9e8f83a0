#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "vtlab/model.hpp"
#include "vtlab/nn.hpp"
#include "vtlab/ops.hpp"
#include "vtlab/rng.hpp"
#include "vtlab/synthetic.hpp"
#include "vtlab/train.hpp"
#include "vtlab/tensor.hpp"

namespace vtlab {

// Where to tap the frozen pipeline. decoder_layer taps the vision span of
// the hidden state after that (1-based) layer, including any re-fusion
// rewrite.
struct ProbePoint {
  enum class Stage { encoder_features, post_projector, decoder_layer };
  Stage stage = Stage::encoder_features;
  int layer = 0;

  static ProbePoint encoder() { return {Stage::encoder_features, 0}; }
  static ProbePoint projector() { return {Stage::post_projector, 0}; }
  static ProbePoint decoder(int layer) { return {Stage::decoder_layer, layer}; }

  std::string name() const {
    switch (stage) {
      case Stage::encoder_features: return "encoder_features";
      case Stage::post_projector: return "post_projector";
      case Stage::decoder_layer: return "decoder_layer_" + std::to_string(layer);
    }
    return "?";
  }
};

// Extracts per-example representation rows [N, R, D] at a probe point.
// Read-only: the pipeline state is never mutated.
inline Tensor extract_representations(const VlmModel& model, const Dataset& ds,
                                      const ProbePoint& point) {
  NoGradGuard ng;
  int n = static_cast<int>(ds.examples.size());
  Tensor out;
  const int chunk = 64;
  for (int at = 0; at < n; at += chunk) {
    int m = std::min(chunk, n - at);
    std::vector<int> idx(m);
    for (int i = 0; i < m; ++i) idx[i] = at + i;
    std::vector<Tensor> levels = model.encoder.forward_levels(ds.images(idx));

    Tensor reps;
    switch (point.stage) {
      case ProbePoint::Stage::encoder_features: {
        const Tensor& last = levels.back();
        reps = reshape(last, {m, last.dim(1) * last.dim(2), last.dim(3)});
        break;
      }
      case ProbePoint::Stage::post_projector:
        reps = model.projector.apply(levels.back());
        break;
      case ProbePoint::Stage::decoder_layer: {
        if (point.layer < 1 || point.layer > model.decoder.cfg.num_layers)
          throw std::invalid_argument("probe: decoder layer outside depth");
        ForwardHooks hooks;
        Tensor grabbed;
        hooks.on_layer_hidden = [&](int layer, const Tensor& hidden) {
          if (layer == point.layer) grabbed = hidden.detach().clone();
        };
        auto fwd = model.forward_from_levels(levels, ds.texts(idx), {}, &hooks);
        reps = slice(grabbed, 1, fwd.layout.vision_begin, fwd.layout.vision_end);
        break;
      }
    }
    if (!out.defined()) {
      std::vector<int> shape = reps.shape();
      shape[0] = n;
      out = Tensor(shape);
    }
    std::copy_n(reps.data(), reps.numel(),
                out.data() + static_cast<int64_t>(at) * (reps.numel() / m));
  }
  return out;
}

struct ProbeConfig {
  int d_probe = 32;
  int batch = 64;
  double lr = 3e-3;
  int max_steps = 2000;
  double plateau_eps = 1e-4;  // stop when 50 steps improve the best loss less
  int plateau_window = 50;
};

// Lightweight classification head: one learned query cross-attending over
// the representation rows, then a linear classifier. Capacity is fixed by
// ProbeConfig regardless of the probed stage.
struct Probe {
  Tensor query;  // [1, d_probe]
  Linear wk, wv;
  Linear head;

  Probe() = default;
  Probe(int d_in, int d_probe, int classes, Rng& rng)
      : query(Tensor::randn({1, d_probe}, rng, 0.02)),
        wk(d_in, d_probe, rng),
        wv(d_in, d_probe, rng),
        head(d_probe, classes, rng) {}

  Tensor logits(const Tensor& reps) const {  // [B, R, D] -> [B, classes]
    int B = reps.dim(0);
    Tensor k = wk(reps), v = wv(reps);
    Tensor q = add(Tensor::zeros({B, 1, query.dim(1)}), query);
    Tensor attended = scaled_dot_product_attention(q, k, v);
    return head(reshape(attended, {B, query.dim(1)}));
  }

  void register_params(ParamRegistry& reg) {
    reg.add("probe.query", query);
    wk.register_params(reg, "probe.wk");
    wv.register_params(reg, "probe.wv");
    head.register_params(reg, "probe.head");
  }
};

struct ProbeResult {
  double accuracy = 0.0;
  double final_loss = 0.0;
  int steps = 0;
};

// Trains a probe on frozen representations to the plateau criterion and
// reports held-out accuracy.
inline ProbeResult train_probe(const Tensor& train_reps, const std::vector<int>& train_labels,
                               const Tensor& eval_reps, const std::vector<int>& eval_labels,
                               int classes, const ProbeConfig& cfg, uint64_t seed) {
  if (train_reps.ndim() != 3) throw std::invalid_argument("train_probe: reps must be [N,R,D]");
  int n = train_reps.dim(0), d_in = train_reps.dim(2);
  if (static_cast<int>(train_labels.size()) != n)
    throw std::invalid_argument("train_probe: label count mismatch");

  Rng rng = Rng(seed).split(0x9b0e);
  Probe probe(d_in, cfg.d_probe, classes, rng);
  ParamRegistry params;
  probe.register_params(params);
  AdamConfig adam;
  adam.lr = cfg.lr;
  AdamState state;

  double best = 1e300;
  double best_before_window = 1e300;
  std::vector<double> recent;
  ProbeResult res;
  for (int step = 0; step < cfg.max_steps; ++step) {
    std::vector<int> idx(std::min(cfg.batch, n));
    for (int& i : idx) i = static_cast<int>(rng.below(n));
    Tensor batch = detail::take_rows0(train_reps, idx);
    std::vector<int> labels;
    labels.reserve(idx.size());
    for (int i : idx) labels.push_back(train_labels[i]);

    Tensor loss = softmax_cross_entropy(probe.logits(batch), labels);
    if (!loss.all_finite()) throw std::runtime_error("train_probe: non-finite loss");
    params.zero_grad();
    loss.backward();
    adam_step(params, state, adam);

    double l = loss[0];
    res.final_loss = l;
    res.steps = step + 1;
    best = std::min(best, l);
    recent.push_back(best);
    if (static_cast<int>(recent.size()) > cfg.plateau_window) {
      best_before_window = recent[recent.size() - 1 - cfg.plateau_window];
      if (best_before_window - best < cfg.plateau_eps) break;
    }
  }

  // held-out accuracy
  NoGradGuard ng;
  int m = eval_reps.dim(0), correct = 0;
  const int chunk = 128;
  for (int at = 0; at < m; at += chunk) {
    int c = std::min(chunk, m - at);
    std::vector<int> idx(c);
    for (int i = 0; i < c; ++i) idx[i] = at + i;
    Tensor logits = probe.logits(detail::take_rows0(eval_reps, idx));
    for (int b = 0; b < c; ++b) {
      const double* row = logits.data() + static_cast<int64_t>(b) * classes;
      int bestc = 0;
      for (int v = 1; v < classes; ++v)
        if (row[v] > row[bestc]) bestc = v;
      if (bestc == eval_labels[at + b]) ++correct;
    }
  }
  res.accuracy = static_cast<double>(correct) / m;
  return res;
}

// Accuracy of one probe point of a frozen model on the glyph-at-fixed-cell
// task (labels must be query-independent since only vision rows are probed).
inline ProbeResult probe_stage_accuracy(const VlmModel& model, const Dataset& train_ds,
                                        const Dataset& eval_ds, const ProbePoint& point,
                                        const ProbeConfig& cfg, uint64_t seed) {
  Tensor train_reps = extract_representations(model, train_ds, point);
  Tensor eval_reps = extract_representations(model, eval_ds, point);
  std::vector<int> train_labels, eval_labels;
  for (const auto& ex : train_ds.examples) train_labels.push_back(ex.label);
  for (const auto& ex : eval_ds.examples) eval_labels.push_back(ex.label);
  return train_probe(train_reps, train_labels, eval_reps, eval_labels,
                     train_ds.task.alphabet, cfg, seed);
}

}  // namespace vtlab
