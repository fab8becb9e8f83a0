#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "vtlab/rng.hpp"
#include "vtlab/tensor.hpp"

namespace vtlab {

// Glyph-grid task: every image is a g x g grid of cells, one glyph per cell,
// each cell rendered as a p x p bitmap. The query names a cell, the answer
// is its glyph. Exact ground truth, and the compression ratio s controls how
// many cells collapse into one vision token.
struct SyntheticTask {
  int grid = 6;         // cells per side
  int alphabet = 8;     // glyph count
  int patch = 4;        // pixels per cell side
  double noise = 0.05;  // additive pixel noise sigma
  bool fixed_query = false;  // probe mode: always ask cell (0,0)

  // Token id scheme: [BOS][g row ids][g col ids][A glyph ids].
  int bos_id() const { return 0; }
  int row_id(int i) const { return 1 + i; }
  int col_id(int j) const { return 1 + grid + j; }
  int glyph_token(int g) const { return 1 + 2 * grid + g; }
  int vocab_size() const { return 1 + 2 * grid + alphabet; }
  int text_len() const { return 3; }

  void validate() const {
    if (grid < 1 || alphabet < 2 || patch < 2)
      throw std::invalid_argument("task: grid >= 1, alphabet >= 2, patch >= 2 required");
    if (patch > 8) throw std::invalid_argument("task: patch side must be <= 8");
    if (noise < 0.0) throw std::invalid_argument("task: noise must be nonnegative");
  }
};

struct Example {
  std::vector<double> pixels;  // (g*p)^2 values, row-major, single channel
  std::vector<int> text;       // [BOS, ROW_i, COL_j]
  int label = 0;               // glyph index in [0, alphabet)
  int qi = 0, qj = 0;
};

struct Dataset {
  SyntheticTask task;
  std::vector<Example> examples;

  int image_side() const { return task.grid * task.patch; }

  // [count, side, side, 1] image batch for examples [begin, begin+count).
  Tensor images(const std::vector<int>& indices) const {
    int side = image_side();
    Tensor out({static_cast<int>(indices.size()), side, side, 1});
    int64_t per = static_cast<int64_t>(side) * side;
    for (size_t b = 0; b < indices.size(); ++b)
      std::copy_n(examples[indices[b]].pixels.data(), per, out.data() + b * per);
    return out;
  }

  std::vector<std::vector<int>> texts(const std::vector<int>& indices) const {
    std::vector<std::vector<int>> out;
    out.reserve(indices.size());
    for (int i : indices) out.push_back(examples[i].text);
    return out;
  }

  std::vector<std::vector<int>> targets(const std::vector<int>& indices) const {
    std::vector<std::vector<int>> out;
    out.reserve(indices.size());
    for (int i : indices) out.push_back({task.glyph_token(examples[i].label)});
    return out;
  }
};

namespace detail {

// Deterministic p x p bitmap for a glyph id; re-salts on the (unlikely)
// all-zero or duplicate pattern draw so the alphabet is always distinct.
inline uint64_t glyph_bits(int glyph, int p, uint64_t salt) {
  uint64_t h = Rng::mix64(0x67e55044u + static_cast<uint64_t>(glyph) * 0x100000001b3ULL +
                          salt * 0x9e3779b97f4a7c15ULL);
  uint64_t mask = (p * p >= 64) ? ~0ULL : ((1ULL << (p * p)) - 1);
  return h & mask;
}

inline std::vector<uint64_t> glyph_alphabet(int alphabet, int p) {
  std::vector<uint64_t> bits;
  uint64_t salt = 0;
  while (static_cast<int>(bits.size()) < alphabet) {
    uint64_t b = glyph_bits(static_cast<int>(bits.size()), p, salt);
    bool dup = b == 0;
    for (uint64_t prev : bits) dup = dup || prev == b;
    if (dup) {
      ++salt;
      continue;
    }
    bits.push_back(b);
    salt = 0;
  }
  return bits;
}

}  // namespace detail

// Deterministic under seed; labels balanced within +-1 per class.
inline Dataset generate_dataset(const SyntheticTask& task, int n, uint64_t seed) {
  task.validate();
  if (n < 1) throw std::invalid_argument("generate_dataset: n >= 1 required");
  Rng rng = Rng(seed).split(0xda7a);
  std::vector<uint64_t> glyphs = detail::glyph_alphabet(task.alphabet, task.patch);

  // Balanced label sequence, order shuffled.
  std::vector<int> labels(n);
  for (int i = 0; i < n; ++i) labels[i] = i % task.alphabet;
  for (int i = n - 1; i > 0; --i) {
    int j = static_cast<int>(rng.below(static_cast<uint64_t>(i) + 1));
    std::swap(labels[i], labels[j]);
  }

  int g = task.grid, p = task.patch, side = g * p;
  Dataset ds;
  ds.task = task;
  ds.examples.reserve(n);
  for (int e = 0; e < n; ++e) {
    Example ex;
    ex.label = labels[e];
    ex.qi = task.fixed_query ? 0 : static_cast<int>(rng.below(g));
    ex.qj = task.fixed_query ? 0 : static_cast<int>(rng.below(g));
    ex.text = {task.bos_id(), task.row_id(ex.qi), task.col_id(ex.qj)};

    std::vector<int> cells(static_cast<size_t>(g) * g);
    for (int c = 0; c < g * g; ++c) cells[c] = static_cast<int>(rng.below(task.alphabet));
    cells[static_cast<size_t>(ex.qi) * g + ex.qj] = ex.label;

    ex.pixels.assign(static_cast<size_t>(side) * side, 0.0);
    for (int r = 0; r < g; ++r)
      for (int c = 0; c < g; ++c) {
        uint64_t bits = glyphs[cells[static_cast<size_t>(r) * g + c]];
        for (int u = 0; u < p; ++u)
          for (int v = 0; v < p; ++v) {
            double val = (bits >> (u * p + v)) & 1 ? 1.0 : 0.0;
            if (task.noise > 0.0) val += task.noise * rng.normal();
            ex.pixels[static_cast<size_t>(r * p + u) * side + (c * p + v)] = val;
          }
      }
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

}  // namespace vtlab
