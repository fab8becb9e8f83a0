#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "vtlab/ops.hpp"
#include "vtlab/rng.hpp"
#include "vtlab/tensor.hpp"

namespace vtlab {

// Compares the tape's hand-written adjoints against central finite
// differences on a random scalar projection of the output. Returns the
// largest per-element relative error, with the denominator floored at 1 so
// near-zero gradients are compared absolutely.
inline double check_gradient(const std::function<Tensor(std::vector<Tensor>&)>& op,
                             const std::vector<Tensor>& inputs, Rng& rng,
                             double h = 1e-5) {
  std::vector<Tensor> work;
  work.reserve(inputs.size());
  for (const Tensor& t : inputs) {
    Tensor c = t.clone();
    c.set_requires_grad(true);
    work.push_back(c);
  }

  Tensor out = op(work);
  Tensor weights = Tensor::randn(out.shape(), rng);
  Tensor loss = sum_all(mul(out, weights));
  loss.backward();

  std::vector<std::vector<double>> analytic;
  for (Tensor& t : work) analytic.push_back(t.grad());

  auto eval = [&]() {
    NoGradGuard ng;
    Tensor o = op(work);
    double acc = 0.0;
    for (int64_t i = 0; i < o.numel(); ++i) acc += o[i] * weights[i];
    return acc;
  };

  double max_rel = 0.0;
  for (size_t t = 0; t < work.size(); ++t) {
    double* p = work[t].data();
    for (int64_t i = 0; i < work[t].numel(); ++i) {
      double saved = p[i];
      p[i] = saved + h;
      double up = eval();
      p[i] = saved - h;
      double down = eval();
      p[i] = saved;
      double numeric = (up - down) / (2.0 * h);
      double a = analytic[t][i];
      double denom = std::max({1.0, std::fabs(a), std::fabs(numeric)});
      max_rel = std::max(max_rel, std::fabs(a - numeric) / denom);
    }
  }
  return max_rel;
}

}  // namespace vtlab
