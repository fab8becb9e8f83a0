#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "vtlab/tensor.hpp"

namespace vtlab {

// Additive attention-mask constant. Large-negative instead of -inf so that
// masked positions underflow to exactly zero after softmax without producing
// NaN in the adjoints.
constexpr double kMaskNeg = -1e9;

// ---- gradient mode ----

namespace detail {
inline thread_local int g_no_grad_depth = 0;
inline thread_local uint64_t g_mac_count = 0;
}  // namespace detail

inline bool grad_enabled() { return detail::g_no_grad_depth == 0; }

struct NoGradGuard {
  NoGradGuard() { ++detail::g_no_grad_depth; }
  ~NoGradGuard() { --detail::g_no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// ---- multiply-add instrumentation ----
// Counts one unit per scalar multiply-accumulate inside contractions
// (matmul, attention, convolution). Elementwise ops, normalization and
// softmax are not counted; the analytic cost model mirrors this convention.

inline uint64_t mac_count() { return detail::g_mac_count; }
inline void reset_mac_count() { detail::g_mac_count = 0; }

namespace detail {

inline bool track(const Tensor& t) { return grad_enabled() && t.tracked(); }

using Buf = std::shared_ptr<std::vector<double>>;

// Registers a tape node for `out`. The adjoint closure receives the output
// gradient buffer; everything else it needs must be captured by value
// (shared data/grad buffers of the parents).
inline void attach(Tensor& out, std::vector<const Tensor*> parents,
                   std::function<void(const std::vector<double>&)> fn) {
  out.make_tracked();
  auto node = std::make_shared<GradNode>();
  node->parents.reserve(parents.size());
  for (const Tensor* p : parents) node->parents.push_back(p->node_ptr());
  Buf og = out.grad_ptr();
  node->run = [og, f = std::move(fn)]() { f(*og); };
  out.set_node(std::move(node));
}

// Right-aligned numpy-style broadcast of two shapes.
struct Broadcast {
  std::vector<int> shape;
  std::vector<int64_t> stride_a;
  std::vector<int64_t> stride_b;
};

inline std::vector<int64_t> row_major_strides(const std::vector<int>& shape) {
  std::vector<int64_t> s(shape.size());
  int64_t acc = 1;
  for (int i = static_cast<int>(shape.size()) - 1; i >= 0; --i) {
    s[i] = acc;
    acc *= shape[i];
  }
  return s;
}

inline Broadcast make_broadcast(const std::vector<int>& a, const std::vector<int>& b,
                                const char* opname) {
  int nd = static_cast<int>(std::max(a.size(), b.size()));
  Broadcast bc;
  bc.shape.resize(nd);
  bc.stride_a.assign(nd, 0);
  bc.stride_b.assign(nd, 0);
  auto sa = row_major_strides(a);
  auto sb = row_major_strides(b);
  for (int i = 0; i < nd; ++i) {
    int ia = static_cast<int>(a.size()) - nd + i;
    int ib = static_cast<int>(b.size()) - nd + i;
    int da = ia >= 0 ? a[ia] : 1;
    int db = ib >= 0 ? b[ib] : 1;
    if (da != db && da != 1 && db != 1)
      throw std::invalid_argument(std::string(opname) + ": shapes not broadcastable");
    bc.shape[i] = std::max(da, db);
    bc.stride_a[i] = (ia >= 0 && da != 1) ? sa[ia] : 0;
    bc.stride_b[i] = (ib >= 0 && db != 1) ? sb[ib] : 0;
  }
  return bc;
}

// Walks the broadcast iteration space calling f(out_index, a_offset, b_offset).
template <typename F>
inline void for_each_broadcast(const Broadcast& bc, F&& f) {
  int nd = static_cast<int>(bc.shape.size());
  int64_t n = 1;
  for (int d : bc.shape) n *= d;
  std::vector<int> idx(nd, 0);
  int64_t oa = 0, ob = 0;
  for (int64_t i = 0; i < n; ++i) {
    f(i, oa, ob);
    for (int ax = nd - 1; ax >= 0; --ax) {
      oa += bc.stride_a[ax];
      ob += bc.stride_b[ax];
      if (++idx[ax] < bc.shape[ax]) break;
      oa -= bc.stride_a[ax] * bc.shape[ax];
      ob -= bc.stride_b[ax] * bc.shape[ax];
      idx[ax] = 0;
    }
  }
}

// ---- raw matmul kernels (row-major, accumulate into C) ----

inline void mm_nn(double* __restrict__ c, const double* __restrict__ a,
                  const double* __restrict__ b, int M, int K, int N) {
  g_mac_count += static_cast<uint64_t>(M) * K * N;
  for (int i = 0; i < M; ++i) {
    double* crow = c + static_cast<int64_t>(i) * N;
    const double* arow = a + static_cast<int64_t>(i) * K;
    for (int k = 0; k < K; ++k) {
      double av = arow[k];
      const double* brow = b + static_cast<int64_t>(k) * N;
      for (int j = 0; j < N; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[M,K] += A[M,N] * B[K,N]^T. Runs as transpose + mm_nn; the reduction
// order over N is unchanged, so results stay bit-identical to the naive
// dot-product loop.
inline thread_local std::vector<double> g_transpose_scratch;

inline void mm_nt(double* __restrict__ c, const double* __restrict__ a,
                  const double* __restrict__ b, int M, int N, int K) {
  std::vector<double>& bt = g_transpose_scratch;
  bt.resize(static_cast<size_t>(N) * K);
  for (int k = 0; k < K; ++k)
    for (int j = 0; j < N; ++j) bt[static_cast<size_t>(j) * K + k] = b[static_cast<size_t>(k) * N + j];
  mm_nn(c, a, bt.data(), M, N, K);
}

// C[K,N] += A[M,K]^T * B[M,N]
inline void mm_tn(double* __restrict__ c, const double* __restrict__ a,
                  const double* __restrict__ b, int M, int K, int N) {
  g_mac_count += static_cast<uint64_t>(M) * K * N;
  for (int i = 0; i < M; ++i) {
    const double* arow = a + static_cast<int64_t>(i) * K;
    const double* brow = b + static_cast<int64_t>(i) * N;
    for (int k = 0; k < K; ++k) {
      double av = arow[k];
      double* crow = c + static_cast<int64_t>(k) * N;
      for (int j = 0; j < N; ++j) crow[j] += av * brow[j];
    }
  }
}

struct BatchMap {
  std::vector<int> out_batch;
  std::vector<int64_t> off_a;  // per flat out-batch index, in matrix units
  std::vector<int64_t> off_b;
};

inline BatchMap make_batch_map(const std::vector<int>& batch_a,
                               const std::vector<int>& batch_b, const char* opname) {
  BatchMap m;
  Broadcast bc = make_broadcast(batch_a, batch_b, opname);
  m.out_batch = bc.shape;
  int64_t n = 1;
  for (int d : bc.shape) n *= d;
  m.off_a.resize(n);
  m.off_b.resize(n);
  for_each_broadcast(bc, [&](int64_t i, int64_t oa, int64_t ob) {
    m.off_a[i] = oa;
    m.off_b[i] = ob;
  });
  return m;
}

// Broadcast layout classes with dedicated loops: identical shapes and
// trailing-suffix operands (bias rows) cover nearly every call site; the
// odometer walk handles the rest.
enum class BcKind { same, suffix, general };

inline BcKind classify_broadcast(const std::vector<int>& a, const std::vector<int>& b) {
  if (a == b) return BcKind::same;
  if (b.size() <= a.size()) {
    bool suffix = true;
    for (size_t i = 0; i < b.size(); ++i)
      suffix = suffix && b[b.size() - 1 - i] == a[a.size() - 1 - i];
    if (suffix) return BcKind::suffix;
  }
  return BcKind::general;
}

template <typename FwdF, typename BwdF>
inline Tensor binary_broadcast(const Tensor& a, const Tensor& b, const char* name,
                               FwdF fwd, BwdF bwd) {
  BcKind kind = classify_broadcast(a.shape(), b.shape());
  Broadcast bc = make_broadcast(a.shape(), b.shape(), name);
  Tensor out(bc.shape);
  {
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    if (kind == BcKind::same) {
      int64_t n = out.numel();
      for (int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i]);
    } else if (kind == BcKind::suffix) {
      int64_t stride = b.numel(), rows = out.numel() / stride;
      for (int64_t r = 0; r < rows; ++r) {
        const double* pr = pa + r * stride;
        double* por = po + r * stride;
        for (int64_t i = 0; i < stride; ++i) por[i] = fwd(pr[i], pb[i]);
      }
    } else {
      for_each_broadcast(bc, [&](int64_t i, int64_t oa, int64_t ob) {
        po[i] = fwd(pa[oa], pb[ob]);
      });
    }
  }
  if (track(a) || track(b)) {
    Buf ga = a.grad_ptr(), gb = b.grad_ptr(), da = a.data_ptr(), db = b.data_ptr();
    attach(out, {&a, &b},
           [kind, bc, ga, gb, da, db, bwd, bn = b.numel()](const std::vector<double>& og) {
             if (kind == BcKind::same) {
               int64_t n = static_cast<int64_t>(og.size());
               for (int64_t i = 0; i < n; ++i)
                 bwd(og[i], ga ? &(*ga)[i] : nullptr, gb ? &(*gb)[i] : nullptr, (*da)[i],
                     (*db)[i]);
             } else if (kind == BcKind::suffix) {
               int64_t rows = static_cast<int64_t>(og.size()) / bn;
               for (int64_t r = 0; r < rows; ++r) {
                 const double* ogr = og.data() + r * bn;
                 for (int64_t i = 0; i < bn; ++i)
                   bwd(ogr[i], ga ? &(*ga)[r * bn + i] : nullptr, gb ? &(*gb)[i] : nullptr,
                       (*da)[r * bn + i], (*db)[i]);
               }
             } else {
               for_each_broadcast(bc, [&](int64_t i, int64_t oa, int64_t ob) {
                 bwd(og[i], ga ? &(*ga)[oa] : nullptr, gb ? &(*gb)[ob] : nullptr, (*da)[oa],
                     (*db)[ob]);
               });
             }
           });
  }
  return out;
}

}  // namespace detail

// ---- elementwise ----

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_broadcast(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double g, double* gx, double* gy, double, double) {
        if (gx) *gx += g;
        if (gy) *gy += g;
      });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_broadcast(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double g, double* gx, double* gy, double, double) {
        if (gx) *gx += g;
        if (gy) *gy -= g;
      });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_broadcast(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double g, double* gx, double* gy, double x, double y) {
        if (gx) *gx += g * y;
        if (gy) *gy += g * x;
      });
}

inline Tensor scale(const Tensor& a, double s) {
  Tensor out(a.shape());
  const double* pa = a.data();
  double* po = out.data();
  int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * s;
  if (detail::track(a)) {
    detail::Buf ga = a.grad_ptr();
    detail::attach(out, {&a}, [ga, s, n](const std::vector<double>& og) {
      if (ga)
        for (int64_t i = 0; i < n; ++i) (*ga)[i] += s * og[i];
    });
  }
  return out;
}

inline Tensor add_scalar(const Tensor& a, double s) {
  Tensor out(a.shape());
  int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = a[i] + s;
  if (detail::track(a)) {
    detail::Buf ga = a.grad_ptr();
    detail::attach(out, {&a}, [ga, n](const std::vector<double>& og) {
      if (ga)
        for (int64_t i = 0; i < n; ++i) (*ga)[i] += og[i];
    });
  }
  return out;
}

inline Tensor gelu(const Tensor& x) {
  constexpr double kInvSqrt2 = 0.7071067811865475244;
  constexpr double kInvSqrt2Pi = 0.3989422804014326779;
  Tensor out(x.shape());
  int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) {
    double v = x[i];
    out[i] = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
  }
  if (detail::track(x)) {
    detail::Buf gx = x.grad_ptr(), dx = x.data_ptr();
    detail::attach(out, {&x}, [gx, dx, n](const std::vector<double>& og) {
      if (!gx) return;
      for (int64_t i = 0; i < n; ++i) {
        double v = (*dx)[i];
        double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        (*gx)[i] += og[i] * (cdf + v * pdf);
      }
    });
  }
  return out;
}

inline Tensor sum_all(const Tensor& x) {
  Tensor out({1});
  double acc = 0.0;
  int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) acc += x[i];
  out[0] = acc;
  if (detail::track(x)) {
    detail::Buf gx = x.grad_ptr();
    detail::attach(out, {&x}, [gx, n](const std::vector<double>& og) {
      if (!gx) return;
      for (int64_t i = 0; i < n; ++i) (*gx)[i] += og[0];
    });
  }
  return out;
}

inline Tensor mean_all(const Tensor& x) {
  return scale(sum_all(x), 1.0 / static_cast<double>(x.numel()));
}

// ---- shape ops ----

inline Tensor reshape(const Tensor& x, std::vector<int> shape) {
  int64_t n = 1;
  int infer = -1;
  for (size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw std::invalid_argument("reshape: multiple -1 extents");
      infer = static_cast<int>(i);
    } else {
      n *= shape[i];
    }
  }
  if (infer >= 0) {
    if (n == 0 || x.numel() % n != 0)
      throw std::invalid_argument("reshape: cannot infer extent");
    shape[infer] = static_cast<int>(x.numel() / n);
    n *= shape[infer];
  }
  if (n != x.numel())
    throw std::invalid_argument("reshape: element count mismatch for " + x.shape_str());
  Tensor out = Tensor::from_vec(shape, x.vec());
  if (detail::track(x)) {
    detail::Buf gx = x.grad_ptr();
    detail::attach(out, {&x}, [gx](const std::vector<double>& og) {
      if (!gx) return;
      for (size_t i = 0; i < og.size(); ++i) (*gx)[i] += og[i];
    });
  }
  return out;
}

inline Tensor permute(const Tensor& x, std::vector<int> axes) {
  int nd = x.ndim();
  if (static_cast<int>(axes.size()) != nd)
    throw std::invalid_argument("permute: axes rank mismatch");
  std::vector<bool> used(nd, false);
  std::vector<int> out_shape(nd);
  for (int i = 0; i < nd; ++i) {
    int a = axes[i];
    if (a < 0) a += nd;
    if (a < 0 || a >= nd || used[a]) throw std::invalid_argument("permute: invalid axes");
    used[a] = true;
    axes[i] = a;
    out_shape[i] = x.shape()[a];
  }
  auto in_strides = detail::row_major_strides(x.shape());
  std::vector<int64_t> strides(nd);
  for (int i = 0; i < nd; ++i) strides[i] = in_strides[axes[i]];
  int64_t n = x.numel();

  auto walk = [nd, n, out_shape, strides](auto&& f) {
    std::vector<int> idx(nd, 0);
    int64_t src = 0;
    for (int64_t i = 0; i < n; ++i) {
      f(i, src);
      for (int ax = nd - 1; ax >= 0; --ax) {
        src += strides[ax];
        if (++idx[ax] < out_shape[ax]) break;
        src -= strides[ax] * out_shape[ax];
        idx[ax] = 0;
      }
    }
  };

  Tensor out(out_shape);
  {
    const double* px = x.data();
    double* po = out.data();
    walk([&](int64_t i, int64_t src) { po[i] = px[src]; });
  }
  if (detail::track(x)) {
    detail::Buf gx = x.grad_ptr();
    detail::attach(out, {&x}, [gx, walk](const std::vector<double>& og) {
      if (!gx) return;
      walk([&](int64_t i, int64_t src) { (*gx)[src] += og[i]; });
    });
  }
  return out;
}

inline Tensor transpose_last_two(const Tensor& x) {
  std::vector<int> axes(x.ndim());
  for (int i = 0; i < x.ndim(); ++i) axes[i] = i;
  std::swap(axes[x.ndim() - 1], axes[x.ndim() - 2]);
  return permute(x, axes);
}

inline Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) throw std::invalid_argument("concat: empty input list");
  int nd = xs[0].ndim();
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd) throw std::invalid_argument("concat: axis out of range");
  std::vector<int> out_shape = xs[0].shape();
  int total = 0;
  for (const Tensor& t : xs) {
    if (t.ndim() != nd) throw std::invalid_argument("concat: rank mismatch");
    for (int i = 0; i < nd; ++i)
      if (i != axis && t.shape()[i] != out_shape[i])
        throw std::invalid_argument("concat: non-axis extents differ");
    total += t.shape()[axis];
  }
  out_shape[axis] = total;
  Tensor out(out_shape);

  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= out_shape[i];
  for (int i = axis + 1; i < nd; ++i) inner *= out_shape[i];

  int64_t off = 0;
  for (const Tensor& t : xs) {
    int64_t len = static_cast<int64_t>(t.shape()[axis]) * inner;
    for (int64_t o = 0; o < outer; ++o)
      std::copy_n(t.data() + o * len, len, out.data() + o * total * inner + off);
    off += len;
  }

  bool any = false;
  for (const Tensor& t : xs) any = any || detail::track(t);
  if (any) {
    std::vector<const Tensor*> parents;
    std::vector<detail::Buf> grads;
    std::vector<int64_t> lens;
    for (const Tensor& t : xs) {
      parents.push_back(&t);
      grads.push_back(t.grad_ptr());
      lens.push_back(static_cast<int64_t>(t.shape()[axis]) * inner);
    }
    detail::attach(out, parents,
                   [grads, lens, outer, inner, total](const std::vector<double>& og) {
                     int64_t off2 = 0;
                     for (size_t p = 0; p < grads.size(); ++p) {
                       if (grads[p]) {
                         for (int64_t o = 0; o < outer; ++o) {
                           const double* src = og.data() + o * total * inner + off2;
                           double* dst = grads[p]->data() + o * lens[p];
                           for (int64_t i = 0; i < lens[p]; ++i) dst[i] += src[i];
                         }
                       }
                       off2 += lens[p];
                     }
                   });
  }
  return out;
}

inline Tensor slice(const Tensor& x, int axis, int start, int end) {
  int nd = x.ndim();
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd) throw std::invalid_argument("slice: axis out of range");
  int extent = x.shape()[axis];
  if (start < 0 || end > extent || start >= end)
    throw std::invalid_argument("slice: invalid range [" + std::to_string(start) + "," +
                                std::to_string(end) + ") on extent " + std::to_string(extent));
  std::vector<int> out_shape = x.shape();
  out_shape[axis] = end - start;
  Tensor out(out_shape);
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.shape()[i];
  for (int i = axis + 1; i < nd; ++i) inner *= x.shape()[i];
  int64_t in_step = static_cast<int64_t>(extent) * inner;
  int64_t out_step = static_cast<int64_t>(end - start) * inner;
  for (int64_t o = 0; o < outer; ++o)
    std::copy_n(x.data() + o * in_step + start * inner, out_step, out.data() + o * out_step);
  if (detail::track(x)) {
    detail::Buf gx = x.grad_ptr();
    detail::attach(out, {&x},
                   [gx, outer, inner, in_step, out_step, start](const std::vector<double>& og) {
                     if (!gx) return;
                     for (int64_t o = 0; o < outer; ++o) {
                       const double* src = og.data() + o * out_step;
                       double* dst = gx->data() + o * in_step + start * inner;
                       for (int64_t i = 0; i < out_step; ++i) dst[i] += src[i];
                     }
                   });
  }
  return out;
}

// ---- contractions ----

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() < 2 || b.ndim() < 2)
    throw std::invalid_argument("matmul: operands must have rank >= 2");
  int M = a.dim(-2), K = a.dim(-1);
  int Kb = b.dim(-2), N = b.dim(-1);
  if (K != Kb)
    throw std::invalid_argument("matmul: inner extents differ, " + a.shape_str() + " x " +
                                b.shape_str());

  // Unbatched right operand (a weight matrix): fold a's leading dims into M
  // and run one large kernel. Row order is unchanged, so results and
  // gradient accumulation order are bit-identical to the per-slice path.
  if (b.ndim() == 2 && a.ndim() > 2) {
    int64_t rows = a.numel() / K;
    std::vector<int> out_shape(a.shape().begin(), a.shape().end() - 1);
    out_shape.push_back(N);
    Tensor out(out_shape);
    detail::mm_nn(out.data(), a.data(), b.data(), static_cast<int>(rows), K, N);
    if (detail::track(a) || detail::track(b)) {
      detail::Buf ga = a.grad_ptr(), gb = b.grad_ptr(), da = a.data_ptr(),
                  db = b.data_ptr();
      detail::attach(out, {&a, &b},
                     [ga, gb, da, db, rows, K, N](const std::vector<double>& og) {
                       if (ga)
                         detail::mm_nt(ga->data(), og.data(), db->data(),
                                       static_cast<int>(rows), N, K);
                       if (gb)
                         detail::mm_tn(gb->data(), da->data(), og.data(),
                                       static_cast<int>(rows), K, N);
                     });
    }
    return out;
  }

  std::vector<int> batch_a(a.shape().begin(), a.shape().end() - 2);
  std::vector<int> batch_b(b.shape().begin(), b.shape().end() - 2);
  detail::BatchMap bm = detail::make_batch_map(batch_a, batch_b, "matmul");
  std::vector<int> out_shape = bm.out_batch;
  out_shape.push_back(M);
  out_shape.push_back(N);
  Tensor out(out_shape);

  int64_t nb = static_cast<int64_t>(bm.off_a.size());
  int64_t a_mat = static_cast<int64_t>(M) * K, b_mat = static_cast<int64_t>(K) * N,
          o_mat = static_cast<int64_t>(M) * N;
  for (int64_t i = 0; i < nb; ++i)
    detail::mm_nn(out.data() + i * o_mat, a.data() + bm.off_a[i] * a_mat,
                  b.data() + bm.off_b[i] * b_mat, M, K, N);

  if (detail::track(a) || detail::track(b)) {
    detail::Buf ga = a.grad_ptr(), gb = b.grad_ptr(), da = a.data_ptr(), db = b.data_ptr();
    detail::attach(out, {&a, &b},
                   [ga, gb, da, db, bm, nb, a_mat, b_mat, o_mat, M, K,
                    N](const std::vector<double>& og) {
                     for (int64_t i = 0; i < nb; ++i) {
                       const double* dc = og.data() + i * o_mat;
                       if (ga)
                         detail::mm_nt(ga->data() + bm.off_a[i] * a_mat, dc,
                                       db->data() + bm.off_b[i] * b_mat, M, N, K);
                       if (gb)
                         detail::mm_tn(gb->data() + bm.off_b[i] * b_mat,
                                       da->data() + bm.off_a[i] * a_mat, dc, M, K, N);
                     }
                   });
  }
  return out;
}

// ---- normalization / activation over rows ----

inline Tensor softmax(const Tensor& x, int axis) {
  int nd = x.ndim();
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd) throw std::invalid_argument("softmax: axis out of range");
  int n = x.shape()[axis];
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.shape()[i];
  for (int i = axis + 1; i < nd; ++i) inner *= x.shape()[i];

  Tensor out(x.shape());
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      const double* px = x.data() + o * n * inner + in;
      double* po = out.data() + o * n * inner + in;
      double mx = px[0];
      for (int i = 1; i < n; ++i) mx = std::max(mx, px[static_cast<int64_t>(i) * inner]);
      double sum = 0.0;
      for (int i = 0; i < n; ++i) {
        double e = std::exp(px[static_cast<int64_t>(i) * inner] - mx);
        po[static_cast<int64_t>(i) * inner] = e;
        sum += e;
      }
      double inv = 1.0 / sum;
      for (int i = 0; i < n; ++i) po[static_cast<int64_t>(i) * inner] *= inv;
    }
  }
  if (detail::track(x)) {
    detail::Buf gx = x.grad_ptr(), dy = out.data_ptr();
    detail::attach(out, {&x}, [gx, dy, outer, inner, n](const std::vector<double>& og) {
      if (!gx) return;
      const double* py = dy->data();
      for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
          int64_t base = o * n * inner + in;
          double dot = 0.0;
          for (int i = 0; i < n; ++i) {
            int64_t k = base + static_cast<int64_t>(i) * inner;
            dot += og[k] * py[k];
          }
          for (int i = 0; i < n; ++i) {
            int64_t k = base + static_cast<int64_t>(i) * inner;
            (*gx)[k] += py[k] * (og[k] - dot);
          }
        }
      }
    });
  }
  return out;
}

inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
  int D = x.dim(-1);
  if (gamma.numel() != D || beta.numel() != D)
    throw std::invalid_argument("layer_norm: gamma/beta must match last extent");
  int64_t rows = x.numel() / D;
  Tensor out(x.shape());
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_sigma = std::make_shared<std::vector<double>>(rows);
  for (int64_t r = 0; r < rows; ++r) {
    const double* px = x.data() + r * D;
    double* po = out.data() + r * D;
    double mean = 0.0;
    for (int i = 0; i < D; ++i) mean += px[i];
    mean /= D;
    double var = 0.0;
    for (int i = 0; i < D; ++i) {
      double d = px[i] - mean;
      var += d * d;
    }
    var /= D;
    double is = 1.0 / std::sqrt(var + eps);
    (*inv_sigma)[r] = is;
    for (int i = 0; i < D; ++i) {
      double h = (px[i] - mean) * is;
      (*xhat)[r * D + i] = h;
      po[i] = h * gamma[i] + beta[i];
    }
  }
  if (detail::track(x) || detail::track(gamma) || detail::track(beta)) {
    detail::Buf gx = x.grad_ptr(), gg = gamma.grad_ptr(), gb = beta.grad_ptr();
    detail::Buf dgamma = gamma.data_ptr();
    detail::attach(out, {&x, &gamma, &beta},
                   [gx, gg, gb, dgamma, xhat, inv_sigma, rows, D](const std::vector<double>& og) {
                     for (int64_t r = 0; r < rows; ++r) {
                       const double* h = xhat->data() + r * D;
                       const double* dy = og.data() + r * D;
                       if (gg || gb) {
                         for (int i = 0; i < D; ++i) {
                           if (gg) (*gg)[i] += dy[i] * h[i];
                           if (gb) (*gb)[i] += dy[i];
                         }
                       }
                       if (gx) {
                         double m1 = 0.0, m2 = 0.0;
                         for (int i = 0; i < D; ++i) {
                           double dxh = dy[i] * (*dgamma)[i];
                           m1 += dxh;
                           m2 += dxh * h[i];
                         }
                         m1 /= D;
                         m2 /= D;
                         double is = (*inv_sigma)[r];
                         double* gxr = gx->data() + r * D;
                         for (int i = 0; i < D; ++i) {
                           double dxh = dy[i] * (*dgamma)[i];
                           gxr[i] += (dxh - m1 - h[i] * m2) * is;
                         }
                       }
                     }
                   });
  }
  return out;
}

// ---- lookups / reductions ----

inline Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids,
                               std::vector<int> ids_shape) {
  if (table.ndim() != 2) throw std::invalid_argument("embedding_lookup: table must be 2-d");
  int V = table.dim(0), D = table.dim(1);
  int64_t n = 1;
  for (int d : ids_shape) n *= d;
  if (n != static_cast<int64_t>(ids.size()))
    throw std::invalid_argument("embedding_lookup: ids length does not match shape");
  for (int id : ids)
    if (id < 0 || id >= V)
      throw std::out_of_range("embedding_lookup: id " + std::to_string(id) +
                              " outside vocabulary of " + std::to_string(V));
  std::vector<int> out_shape = ids_shape;
  out_shape.push_back(D);
  Tensor out(out_shape);
  for (int64_t i = 0; i < n; ++i)
    std::copy_n(table.data() + static_cast<int64_t>(ids[i]) * D, D, out.data() + i * D);
  if (detail::track(table)) {
    detail::Buf gt = table.grad_ptr();
    detail::attach(out, {&table}, [gt, ids, n, D](const std::vector<double>& og) {
      if (!gt) return;
      for (int64_t i = 0; i < n; ++i) {
        double* dst = gt->data() + static_cast<int64_t>(ids[i]) * D;
        const double* src = og.data() + i * D;
        for (int d = 0; d < D; ++d) dst[d] += src[d];
      }
    });
  }
  return out;
}

// Max over one axis, keeping the axis with extent 1. Ties resolve to the
// first maximal element, which keeps the adjoint deterministic.
inline Tensor max_along_axis(const Tensor& x, int axis) {
  int nd = x.ndim();
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd) throw std::invalid_argument("max_along_axis: axis out of range");
  int n = x.shape()[axis];
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.shape()[i];
  for (int i = axis + 1; i < nd; ++i) inner *= x.shape()[i];
  std::vector<int> out_shape = x.shape();
  out_shape[axis] = 1;
  Tensor out(out_shape);
  auto argmax = std::make_shared<std::vector<int>>(outer * inner);
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      const double* px = x.data() + o * n * inner + in;
      double best = px[0];
      int bi = 0;
      for (int i = 1; i < n; ++i) {
        double v = px[static_cast<int64_t>(i) * inner];
        if (v > best) {
          best = v;
          bi = i;
        }
      }
      out.data()[o * inner + in] = best;
      (*argmax)[o * inner + in] = bi;
    }
  }
  if (detail::track(x)) {
    detail::Buf gx = x.grad_ptr();
    detail::attach(out, {&x}, [gx, argmax, outer, inner, n](const std::vector<double>& og) {
      if (!gx) return;
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t in = 0; in < inner; ++in) {
          int bi = (*argmax)[o * inner + in];
          (*gx)[o * n * inner + static_cast<int64_t>(bi) * inner + in] += og[o * inner + in];
        }
    });
  }
  return out;
}

// Mean cross-entropy of row-wise softmax against integer targets.
inline Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
  if (logits.ndim() != 2)
    throw std::invalid_argument("softmax_cross_entropy: logits must be 2-d");
  int N = logits.dim(0), V = logits.dim(1);
  if (static_cast<int>(targets.size()) != N)
    throw std::invalid_argument("softmax_cross_entropy: target count mismatch");
  for (int t : targets)
    if (t < 0 || t >= V) throw std::out_of_range("softmax_cross_entropy: target outside vocab");
  Tensor out({1});
  auto probs = std::make_shared<std::vector<double>>(logits.numel());
  double loss = 0.0;
  for (int r = 0; r < N; ++r) {
    const double* px = logits.data() + static_cast<int64_t>(r) * V;
    double* pp = probs->data() + static_cast<int64_t>(r) * V;
    double mx = px[0];
    for (int i = 1; i < V; ++i) mx = std::max(mx, px[i]);
    double sum = 0.0;
    for (int i = 0; i < V; ++i) {
      double e = std::exp(px[i] - mx);
      pp[i] = e;
      sum += e;
    }
    double inv = 1.0 / sum;
    for (int i = 0; i < V; ++i) pp[i] *= inv;
    loss += std::log(sum) + mx - px[targets[r]];
  }
  out[0] = loss / N;
  if (detail::track(logits)) {
    detail::Buf gl = logits.grad_ptr();
    detail::attach(out, {&logits}, [gl, probs, targets, N, V](const std::vector<double>& og) {
      if (!gl) return;
      double g = og[0] / N;
      for (int r = 0; r < N; ++r) {
        const double* pp = probs->data() + static_cast<int64_t>(r) * V;
        double* pg = gl->data() + static_cast<int64_t>(r) * V;
        for (int i = 0; i < V; ++i) pg[i] += g * (pp[i] - (i == targets[r] ? 1.0 : 0.0));
      }
    });
  }
  return out;
}

// ---- spatial ops on [B, W, H, C] maps ----

namespace detail {
inline void expect_map(const Tensor& x, const char* name) {
  if (x.ndim() != 4) throw std::invalid_argument(std::string(name) + ": expected [B,W,H,C]");
}
inline void expect_divisible(const Tensor& x, int s, const char* name) {
  expect_map(x, name);
  if (s <= 0 || x.dim(1) % s != 0 || x.dim(2) % s != 0)
    throw std::invalid_argument(std::string(name) + ": spatial extents " + x.shape_str() +
                                " not divisible by s=" + std::to_string(s));
}
}  // namespace detail

// Block mean over non-overlapping s x s regions.
inline Tensor avg_pool_blocks(const Tensor& x, int s) {
  detail::expect_divisible(x, s, "avg_pool_blocks");
  int B = x.dim(0), W = x.dim(1), H = x.dim(2), C = x.dim(3);
  int Wo = W / s, Ho = H / s;
  Tensor out({B, Wo, Ho, C});
  double block = static_cast<double>(s) * s;
  for (int b = 0; b < B; ++b)
    for (int i = 0; i < Wo; ++i)
      for (int j = 0; j < Ho; ++j) {
        double* po = out.data() + ((static_cast<int64_t>(b) * Wo + i) * Ho + j) * C;
        for (int u = 0; u < s; ++u)
          for (int v = 0; v < s; ++v) {
            const double* px =
                x.data() +
                ((static_cast<int64_t>(b) * W + i * s + u) * H + (j * s + v)) * C;
            for (int c = 0; c < C; ++c) po[c] += px[c];
          }
        for (int c = 0; c < C; ++c) po[c] /= block;
      }
  if (detail::track(x)) {
    detail::Buf gx = x.grad_ptr();
    detail::attach(out, {&x},
                   [gx, B, W, H, C, Wo, Ho, s, block](const std::vector<double>& og) {
                     if (!gx) return;
                     for (int b = 0; b < B; ++b)
                       for (int i = 0; i < Wo; ++i)
                         for (int j = 0; j < Ho; ++j) {
                           const double* po =
                               og.data() + ((static_cast<int64_t>(b) * Wo + i) * Ho + j) * C;
                           for (int u = 0; u < s; ++u)
                             for (int v = 0; v < s; ++v) {
                               double* px =
                                   gx->data() + ((static_cast<int64_t>(b) * W + i * s + u) * H +
                                                 (j * s + v)) *
                                                    C;
                               for (int c = 0; c < C; ++c) px[c] += po[c] / block;
                             }
                         }
                   });
  }
  return out;
}

// Space-to-depth: [B,W,H,C] -> [B,W/s,H/s,s*s*C]. Channel order within each
// output cell is row-major over the s x s block, input channels fastest.
inline Tensor space_to_depth(const Tensor& x, int s) {
  detail::expect_divisible(x, s, "space_to_depth");
  int B = x.dim(0), W = x.dim(1), H = x.dim(2), C = x.dim(3);
  int Wo = W / s, Ho = H / s, Co = s * s * C;
  Tensor out({B, Wo, Ho, Co});
  for (int b = 0; b < B; ++b)
    for (int i = 0; i < Wo; ++i)
      for (int j = 0; j < Ho; ++j) {
        double* po = out.data() + ((static_cast<int64_t>(b) * Wo + i) * Ho + j) * Co;
        for (int u = 0; u < s; ++u)
          for (int v = 0; v < s; ++v) {
            const double* px =
                x.data() +
                ((static_cast<int64_t>(b) * W + i * s + u) * H + (j * s + v)) * C;
            std::copy_n(px, C, po + (u * s + v) * C);
          }
      }
  if (detail::track(x)) {
    detail::Buf gx = x.grad_ptr();
    detail::attach(out, {&x}, [gx, B, W, H, C, Wo, Ho, Co, s](const std::vector<double>& og) {
      if (!gx) return;
      for (int b = 0; b < B; ++b)
        for (int i = 0; i < Wo; ++i)
          for (int j = 0; j < Ho; ++j) {
            const double* po = og.data() + ((static_cast<int64_t>(b) * Wo + i) * Ho + j) * Co;
            for (int u = 0; u < s; ++u)
              for (int v = 0; v < s; ++v) {
                double* px =
                    gx->data() +
                    ((static_cast<int64_t>(b) * W + i * s + u) * H + (j * s + v)) * C;
                const double* src = po + (u * s + v) * C;
                for (int c = 0; c < C; ++c) px[c] += src[c];
              }
          }
    });
  }
  return out;
}

// Exact inverse of space_to_depth.
inline Tensor depth_to_space(const Tensor& x, int s) {
  detail::expect_map(x, "depth_to_space");
  int B = x.dim(0), Wo = x.dim(1), Ho = x.dim(2), Co = x.dim(3);
  if (s <= 0 || Co % (s * s) != 0)
    throw std::invalid_argument("depth_to_space: channels not divisible by s^2");
  int C = Co / (s * s), W = Wo * s, H = Ho * s;
  Tensor out({B, W, H, C});
  for (int b = 0; b < B; ++b)
    for (int i = 0; i < Wo; ++i)
      for (int j = 0; j < Ho; ++j) {
        const double* px = x.data() + ((static_cast<int64_t>(b) * Wo + i) * Ho + j) * Co;
        for (int u = 0; u < s; ++u)
          for (int v = 0; v < s; ++v) {
            double* po = out.data() +
                         ((static_cast<int64_t>(b) * W + i * s + u) * H + (j * s + v)) * C;
            std::copy_n(px + (u * s + v) * C, C, po);
          }
      }
  if (detail::track(x)) {
    detail::Buf gx = x.grad_ptr();
    detail::attach(out, {&x}, [gx, B, W, H, C, Wo, Ho, Co, s](const std::vector<double>& og) {
      if (!gx) return;
      for (int b = 0; b < B; ++b)
        for (int i = 0; i < Wo; ++i)
          for (int j = 0; j < Ho; ++j) {
            double* px = gx->data() + ((static_cast<int64_t>(b) * Wo + i) * Ho + j) * Co;
            for (int u = 0; u < s; ++u)
              for (int v = 0; v < s; ++v) {
                const double* po =
                    og.data() +
                    ((static_cast<int64_t>(b) * W + i * s + u) * H + (j * s + v)) * C;
                for (int c = 0; c < C; ++c) px[(u * s + v) * C + c] += po[c];
              }
          }
    });
  }
  return out;
}

// Tiles [B,W,H,C] into non-overlapping s x s windows: [B*nw*nh, s*s, C].
// Window w = wi*nh + wj holds exactly the block that pools into token w;
// rows within a window are in row-major block order.
inline Tensor window_partition(const Tensor& x, int s) {
  detail::expect_divisible(x, s, "window_partition");
  int B = x.dim(0), W = x.dim(1), H = x.dim(2), C = x.dim(3);
  int nw = W / s, nh = H / s;
  Tensor out({B * nw * nh, s * s, C});
  for (int b = 0; b < B; ++b)
    for (int wi = 0; wi < nw; ++wi)
      for (int wj = 0; wj < nh; ++wj) {
        int64_t wbase = ((static_cast<int64_t>(b) * nw + wi) * nh + wj) * (s * s) * C;
        for (int u = 0; u < s; ++u)
          for (int v = 0; v < s; ++v) {
            const double* px =
                x.data() +
                ((static_cast<int64_t>(b) * W + wi * s + u) * H + (wj * s + v)) * C;
            std::copy_n(px, C, out.data() + wbase + (u * s + v) * C);
          }
      }
  if (detail::track(x)) {
    detail::Buf gx = x.grad_ptr();
    detail::attach(out, {&x}, [gx, B, W, H, C, s](const std::vector<double>& og) {
      if (!gx) return;
      int nw = W / s, nh = H / s;
      for (int b = 0; b < B; ++b)
        for (int wi = 0; wi < nw; ++wi)
          for (int wj = 0; wj < nh; ++wj) {
            int64_t wbase = ((static_cast<int64_t>(b) * nw + wi) * nh + wj) * (s * s) * C;
            for (int u = 0; u < s; ++u)
              for (int v = 0; v < s; ++v) {
                double* px =
                    gx->data() +
                    ((static_cast<int64_t>(b) * W + wi * s + u) * H + (wj * s + v)) * C;
                const double* src = og.data() + wbase + (u * s + v) * C;
                for (int c = 0; c < C; ++c) px[c] += src[c];
              }
          }
    });
  }
  return out;
}

// Exact inverse of window_partition.
inline Tensor window_unpartition(const Tensor& x, int s, int B, int W, int H) {
  if (x.ndim() != 3)
    throw std::invalid_argument("window_unpartition: expected [B*n^2, s^2, C]");
  if (s <= 0 || W % s != 0 || H % s != 0)
    throw std::invalid_argument("window_unpartition: spatial extents not divisible by s");
  int nw = W / s, nh = H / s, C = x.dim(2);
  if (x.dim(0) != B * nw * nh || x.dim(1) != s * s)
    throw std::invalid_argument("window_unpartition: shape inconsistent with target map");
  Tensor out({B, W, H, C});
  for (int b = 0; b < B; ++b)
    for (int wi = 0; wi < nw; ++wi)
      for (int wj = 0; wj < nh; ++wj) {
        int64_t wbase = ((static_cast<int64_t>(b) * nw + wi) * nh + wj) * (s * s) * C;
        for (int u = 0; u < s; ++u)
          for (int v = 0; v < s; ++v) {
            double* po = out.data() +
                         ((static_cast<int64_t>(b) * W + wi * s + u) * H + (wj * s + v)) * C;
            std::copy_n(x.data() + wbase + (u * s + v) * C, C, po);
          }
      }
  if (detail::track(x)) {
    detail::Buf gx = x.grad_ptr();
    detail::attach(out, {&x}, [gx, B, W, H, C, s](const std::vector<double>& og) {
      if (!gx) return;
      int nw = W / s, nh = H / s;
      for (int b = 0; b < B; ++b)
        for (int wi = 0; wi < nw; ++wi)
          for (int wj = 0; wj < nh; ++wj) {
            int64_t wbase = ((static_cast<int64_t>(b) * nw + wi) * nh + wj) * (s * s) * C;
            for (int u = 0; u < s; ++u)
              for (int v = 0; v < s; ++v) {
                const double* po =
                    og.data() +
                    ((static_cast<int64_t>(b) * W + wi * s + u) * H + (wj * s + v)) * C;
                double* dst = gx->data() + wbase + (u * s + v) * C;
                for (int c = 0; c < C; ++c) dst[c] += po[c];
              }
          }
    });
  }
  return out;
}

// Depthwise s x s convolution with stride s (each output token sees exactly
// one block). kernel is [s,s,C], bias is [C].
inline Tensor depthwise_conv_stride(const Tensor& x, const Tensor& kernel,
                                    const Tensor& bias, int s) {
  detail::expect_divisible(x, s, "depthwise_conv_stride");
  int B = x.dim(0), W = x.dim(1), H = x.dim(2), C = x.dim(3);
  if (kernel.ndim() != 3 || kernel.dim(0) != s || kernel.dim(1) != s || kernel.dim(2) != C)
    throw std::invalid_argument("depthwise_conv_stride: kernel must be [s,s,C]");
  if (bias.numel() != C)
    throw std::invalid_argument("depthwise_conv_stride: bias must be [C]");
  int Wo = W / s, Ho = H / s;
  Tensor out({B, Wo, Ho, C});
  detail::g_mac_count += static_cast<uint64_t>(B) * Wo * Ho * s * s * C;
  for (int b = 0; b < B; ++b)
    for (int i = 0; i < Wo; ++i)
      for (int j = 0; j < Ho; ++j) {
        double* po = out.data() + ((static_cast<int64_t>(b) * Wo + i) * Ho + j) * C;
        for (int c = 0; c < C; ++c) po[c] = bias[c];
        for (int u = 0; u < s; ++u)
          for (int v = 0; v < s; ++v) {
            const double* px =
                x.data() +
                ((static_cast<int64_t>(b) * W + i * s + u) * H + (j * s + v)) * C;
            const double* pk = kernel.data() + (static_cast<int64_t>(u) * s + v) * C;
            for (int c = 0; c < C; ++c) po[c] += pk[c] * px[c];
          }
      }
  if (detail::track(x) || detail::track(kernel) || detail::track(bias)) {
    detail::Buf gx = x.grad_ptr(), gk = kernel.grad_ptr(), gb = bias.grad_ptr();
    detail::Buf dx = x.data_ptr(), dk = kernel.data_ptr();
    detail::attach(out, {&x, &kernel, &bias},
                   [gx, gk, gb, dx, dk, B, W, H, C, Wo, Ho, s](const std::vector<double>& og) {
                     for (int b = 0; b < B; ++b)
                       for (int i = 0; i < Wo; ++i)
                         for (int j = 0; j < Ho; ++j) {
                           const double* po =
                               og.data() + ((static_cast<int64_t>(b) * Wo + i) * Ho + j) * C;
                           if (gb)
                             for (int c = 0; c < C; ++c) (*gb)[c] += po[c];
                           for (int u = 0; u < s; ++u)
                             for (int v = 0; v < s; ++v) {
                               int64_t xoff =
                                   ((static_cast<int64_t>(b) * W + i * s + u) * H +
                                    (j * s + v)) *
                                   C;
                               int64_t koff = (static_cast<int64_t>(u) * s + v) * C;
                               for (int c = 0; c < C; ++c) {
                                 if (gx) (*gx)[xoff + c] += (*dk)[koff + c] * po[c];
                                 if (gk) (*gk)[koff + c] += (*dx)[xoff + c] * po[c];
                               }
                             }
                         }
                   });
  }
  return out;
}

// ---- attention ----

// softmax(q k^T / sqrt(D) + mask) v, composed from tape'd primitives.
// mask, when given, is additive with entries in {0, kMaskNeg} and must be
// broadcastable against the score shape [.., Lq, Lk].
inline Tensor scaled_dot_product_attention(const Tensor& q, const Tensor& k,
                                           const Tensor& v, const Tensor* mask = nullptr) {
  if (q.dim(-1) != k.dim(-1))
    throw std::invalid_argument("scaled_dot_product_attention: q/k depth mismatch");
  if (k.dim(-2) != v.dim(-2))
    throw std::invalid_argument("scaled_dot_product_attention: k/v length mismatch");
  double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(q.dim(-1)));
  Tensor scores = scale(matmul(q, transpose_last_two(k)), inv_sqrt_d);
  if (mask) scores = add(scores, *mask);
  Tensor probs = softmax(scores, -1);
  return matmul(probs, v);
}

}  // namespace vtlab
