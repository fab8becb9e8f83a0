#pragma once

// Naive reference implementations used by the verification suites and the
// test oracles. Everything here is written with plain loops over flat
// vectors, independent of the tensor-op code paths it checks.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace vtlab::oracle {

// C[M,N] = A[M,K] * B[K,N], direct triple loop.
inline std::vector<double> matmul(const std::vector<double>& a, const std::vector<double>& b,
                                  int M, int K, int N) {
  std::vector<double> c(static_cast<size_t>(M) * N, 0.0);
  for (int i = 0; i < M; ++i)
    for (int j = 0; j < N; ++j) {
      double acc = 0.0;
      for (int k = 0; k < K; ++k)
        acc += a[static_cast<size_t>(i) * K + k] * b[static_cast<size_t>(k) * N + j];
      c[static_cast<size_t>(i) * N + j] = acc;
    }
  return c;
}

// Direct exp-normalize of one row (no max-shift; callers use small inputs).
inline std::vector<double> softmax_row(const std::vector<double>& x) {
  std::vector<double> y(x.size());
  double sum = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    y[i] = std::exp(x[i]);
    sum += y[i];
  }
  for (double& v : y) v /= sum;
  return y;
}

// Single-head attention, explicit loops: out[Lq,Dv].
// mask (optional, additive) has shape [Lq,Lk].
inline std::vector<double> attention(const std::vector<double>& q,
                                     const std::vector<double>& k,
                                     const std::vector<double>& v, int Lq, int Lk, int D,
                                     int Dv, const std::vector<double>* mask = nullptr) {
  std::vector<double> out(static_cast<size_t>(Lq) * Dv, 0.0);
  double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(D));
  for (int i = 0; i < Lq; ++i) {
    std::vector<double> scores(Lk);
    for (int j = 0; j < Lk; ++j) {
      double acc = 0.0;
      for (int d = 0; d < D; ++d)
        acc += q[static_cast<size_t>(i) * D + d] * k[static_cast<size_t>(j) * D + d];
      scores[j] = acc * inv_sqrt_d;
      if (mask) scores[j] += (*mask)[static_cast<size_t>(i) * Lk + j];
    }
    double mx = scores[0];
    for (int j = 1; j < Lk; ++j) mx = std::max(mx, scores[j]);
    double sum = 0.0;
    for (int j = 0; j < Lk; ++j) {
      scores[j] = std::exp(scores[j] - mx);
      sum += scores[j];
    }
    for (int j = 0; j < Lk; ++j) {
      double w = scores[j] / sum;
      for (int d = 0; d < Dv; ++d)
        out[static_cast<size_t>(i) * Dv + d] += w * v[static_cast<size_t>(j) * Dv + d];
    }
  }
  return out;
}

// Closed-form layer norm of one row.
inline std::vector<double> layer_norm_row(const std::vector<double>& x,
                                          const std::vector<double>& gamma,
                                          const std::vector<double>& beta,
                                          double eps = 1e-5) {
  size_t d = x.size();
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(d);
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(d);
  double inv = 1.0 / std::sqrt(var + eps);
  std::vector<double> y(d);
  for (size_t i = 0; i < d; ++i) y[i] = (x[i] - mean) * inv * gamma[i] + beta[i];
  return y;
}

// Block mean of an s x s tile of a [W,H,C] map (single batch element).
inline std::vector<double> block_mean_pool(const std::vector<double>& x, int W, int H, int C,
                                           int s) {
  if (W % s != 0 || H % s != 0) throw std::invalid_argument("block_mean_pool: divisibility");
  int Wo = W / s, Ho = H / s;
  std::vector<double> out(static_cast<size_t>(Wo) * Ho * C, 0.0);
  for (int i = 0; i < Wo; ++i)
    for (int j = 0; j < Ho; ++j)
      for (int c = 0; c < C; ++c) {
        double acc = 0.0;
        for (int u = 0; u < s; ++u)
          for (int v = 0; v < s; ++v)
            acc += x[(static_cast<size_t>(i * s + u) * H + (j * s + v)) * C + c];
        out[(static_cast<size_t>(i) * Ho + j) * C + c] = acc / (s * s);
      }
  return out;
}

// Index map of the space-to-depth rearrangement on a [W,H,C] map: entry t of
// the result is the flat source index feeding flat destination index t.
inline std::vector<int64_t> space_to_depth_index_map(int W, int H, int C, int s) {
  if (W % s != 0 || H % s != 0)
    throw std::invalid_argument("space_to_depth_index_map: divisibility");
  int Wo = W / s, Ho = H / s;
  std::vector<int64_t> map(static_cast<size_t>(W) * H * C);
  size_t t = 0;
  for (int i = 0; i < Wo; ++i)
    for (int j = 0; j < Ho; ++j)
      for (int u = 0; u < s; ++u)
        for (int v = 0; v < s; ++v)
          for (int c = 0; c < C; ++c)
            map[t++] = (static_cast<int64_t>(i * s + u) * H + (j * s + v)) * C + c;
  return map;
}

// Flat source index of window-partition destination (w, t, c) on a [W,H,C]
// map with window grid (W/s) x (H/s).
inline int64_t window_source_index(int w, int t, int c, int W, int H, int C, int s) {
  int nh = H / s;
  int wi = w / nh, wj = w % nh;
  int u = t / s, v = t % s;
  return (static_cast<int64_t>(wi * s + u) * H + (wj * s + v)) * C + c;
}

// Elementwise max over rows.
inline std::vector<double> rowwise_max(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) throw std::invalid_argument("rowwise_max: no rows");
  std::vector<double> out = rows[0];
  for (size_t r = 1; r < rows.size(); ++r)
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::max(out[i], rows[r][i]);
  return out;
}

}  // namespace vtlab::oracle
