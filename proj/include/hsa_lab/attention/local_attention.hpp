#pragma once

// Dense multi-head attention restricted by a mask: causal sliding window
// (the SWA path) or block-diagonal bidirectional segments (the chunk
// encoder). Queries and keys are rows of [n, heads*head_dim] matrices.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "hsa_lab/attention/rope.hpp"
#include "hsa_lab/numerics/kernels.hpp"
#include "hsa_lab/numerics/tensor.hpp"

namespace hsa_lab {

struct HeadLayout {
  std::size_t heads = 1;
  std::size_t kv_heads = 1;
  std::size_t head_dim = 1;

  std::size_t q_width() const { return heads * head_dim; }
  std::size_t kv_width() const { return kv_heads * head_dim; }
  std::size_t group() const { return heads / kv_heads; }
};

struct AttentionMask {
  bool causal = true;
  std::size_t window = 0;    // causal only; 0 = unbounded
  std::size_t segment = 0;   // non-causal only; 0 = one segment
  std::size_t q_offset = 0;  // absolute position of query row 0
};

namespace detail {

struct KeyRange {
  std::size_t lo, hi;  // inclusive
};

inline KeyRange key_range(std::size_t tq, std::size_t nk, const AttentionMask& m) {
  if (m.causal) {
    const std::size_t lo = (m.window && tq + 1 > m.window) ? tq + 1 - m.window : 0;
    return {lo, tq};
  }
  if (m.segment) {
    const std::size_t lo = (tq / m.segment) * m.segment;
    return {lo, std::min(lo + m.segment, nk) - 1};
  }
  return {0, nk - 1};
}

struct AttentionTile {
  std::size_t q0, q1, k0, k1;  // query rows [q0, q1), keys [k0, k1)
  std::size_t offset;          // start of this tile's probabilities; heads are contiguous
  std::size_t size() const { return (q1 - q0) * (k1 - k0); }
};

inline std::vector<AttentionTile> attention_tiles(std::size_t nq, std::size_t nk, std::size_t heads,
                                                  const AttentionMask& m) {
  const std::size_t rows = (!m.causal && m.segment) ? m.segment : 64;
  std::vector<AttentionTile> tiles;
  std::size_t offset = 0;
  for (std::size_t q0 = 0; q0 < nq;) {
    // Segmented tiles stop at segment boundaries so each sees one segment.
    std::size_t q1 = std::min(q0 + rows, nq);
    if (!m.causal && m.segment) q1 = std::min(q1, ((m.q_offset + q0) / m.segment + 1) * m.segment - m.q_offset);
    const std::size_t k0 = key_range(m.q_offset + q0, nk, m).lo, k1 = key_range(m.q_offset + q1 - 1, nk, m).hi + 1;
    tiles.push_back({q0, q1, k0, k1, offset});
    offset += tiles.back().size() * heads;
    q0 = q1;
  }
  return tiles;
}

}  // namespace detail

template <std::floating_point T>
Tensor<T> local_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                          const HeadLayout& layout, const AttentionMask& mask,
                          const RopeTable<T>* rope = nullptr) {
  const std::size_t nq = q.dim(0), nk = k.dim(0);
  const std::size_t h = layout.heads, dh = layout.head_dim, grp = layout.group();
  const std::size_t qw = layout.q_width(), kw = layout.kv_width();
  if (q.ndim() != 2 || q.dim(1) != qw || k.ndim() != 2 || k.dim(1) != kw || v.shape() != k.shape()) {
    throw ShapeError("local_attention: q " + shape_str(q.shape()) + " k " + shape_str(k.shape()) +
                     " v " + shape_str(v.shape()) + " for heads " + std::to_string(h) + "x" +
                     std::to_string(dh));
  }
  if (layout.kv_heads == 0 || h % layout.kv_heads != 0) {
    throw ShapeError("local_attention: heads must be a multiple of kv_heads");
  }
  if (mask.causal && nq && mask.q_offset + nq > nk) {
    throw ShapeError("local_attention: causal queries extend past the last key");
  }
  if (rope && rope->head_dim() != dh) throw ShapeError("local_attention: rope head_dim mismatch");

  std::vector<T> qr(q.data().begin(), q.data().end());
  std::vector<T> kr(k.data().begin(), k.data().end());
  if (rope) {
    for (std::size_t i = 0; i < nq; ++i) {
      for (std::size_t hh = 0; hh < h; ++hh) rope->rotate(std::span(qr).subspan(i * qw + hh * dh, dh), mask.q_offset + i);
    }
    for (std::size_t j = 0; j < nk; ++j) {
      for (std::size_t g = 0; g < layout.kv_heads; ++g) rope->rotate(std::span(kr).subspan(j * kw + g * dh, dh), j);
    }
  }

  // Queries are processed in tiles; each tile sees the union of its rows' key
  // ranges and entries outside a row's own range get probability 0.
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  const auto tiles = detail::attention_tiles(nq, nk, h, mask);
  std::vector<T> probs(tiles.empty() ? 0 : tiles.back().offset + tiles.back().size() * h);
  std::vector<T> out(nq * qw, T(0));
  const T* vd = v.data().data();
  for (const auto& tl : tiles) {
    const std::size_t m = tl.q1 - tl.q0, len = tl.k1 - tl.k0;
    for (std::size_t hh = 0; hh < h; ++hh) {
      const std::size_t g = hh / grp;
      T* p = probs.data() + tl.offset + hh * m * len;
      detail::gemm(false, true, m, len, dh, scale, qr.data() + tl.q0 * qw + hh * dh, qw,
                   kr.data() + tl.k0 * kw + g * dh, kw, T(0), p, len);
      for (std::size_t r = 0; r < m; ++r) {
        const auto [lo, hi] = detail::key_range(mask.q_offset + tl.q0 + r, nk, mask);
        T* row = p + r * len;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = lo; j <= hi; ++j) mx = std::max(mx, row[j - tl.k0]);
        T z = T(0);
        for (std::size_t c = 0; c < len; ++c) {
          const std::size_t j = tl.k0 + c;
          row[c] = (j < lo || j > hi) ? T(0) : std::exp(row[c] - mx);
          z += row[c];
        }
        for (std::size_t c = 0; c < len; ++c) row[c] /= z;
      }
      detail::gemm(false, false, m, dh, len, T(1), p, len, vd + tl.k0 * kw + g * dh, kw, T(0),
                   out.data() + tl.q0 * qw + hh * dh, qw);
    }
  }

  return make_result<T>(
      {nq, qw}, std::move(out), {q, k, v}, "local_attention",
      [=, qr = std::move(qr), kr = std::move(kr), probs = std::move(probs)](Node<T>& self) {
        Node<T>& pq = *self.parents[0];
        Node<T>& pk = *self.parents[1];
        Node<T>& pv = *self.parents[2];
        T* gq = grad_of(pq);
        T* gk = grad_of(pk);
        T* gv = grad_of(pv);
        // Gradients w.r.t. the rotated q/k are collected first, then rotated back.
        std::vector<T> dqr(gq ? nq * qw : 0, T(0));
        std::vector<T> dkr(gk ? nk * kw : 0, T(0));
        std::vector<T> ds;
        const T* dout = self.grad.data();
        const T* vv = pv.value.data();
        for (const auto& tl : tiles) {
          const std::size_t m = tl.q1 - tl.q0, len = tl.k1 - tl.k0;
          ds.resize(m * len);
          for (std::size_t hh = 0; hh < h; ++hh) {
            const std::size_t g = hh / grp;
            const T* p = probs.data() + tl.offset + hh * m * len;
            const T* dO = dout + tl.q0 * qw + hh * dh;
            if (gv) detail::gemm(true, false, len, dh, m, T(1), p, len, dO, qw, T(1), gv + tl.k0 * kw + g * dh, kw);
            if (!gq && !gk) continue;
            detail::gemm(false, true, m, len, dh, T(1), dO, qw, vv + tl.k0 * kw + g * dh, kw, T(0), ds.data(), len);
            for (std::size_t r = 0; r < m; ++r) {
              const T* pr = p + r * len;
              T* dr = ds.data() + r * len;
              const T dot = detail::dot(pr, dr, len);
              for (std::size_t c = 0; c < len; ++c) dr[c] = pr[c] * (dr[c] - dot) * scale;
            }
            if (gq) {
              detail::gemm(false, false, m, dh, len, T(1), ds.data(), len, kr.data() + tl.k0 * kw + g * dh, kw, T(1),
                           dqr.data() + tl.q0 * qw + hh * dh, qw);
            }
            if (gk) {
              detail::gemm(true, false, len, dh, m, T(1), ds.data(), len, qr.data() + tl.q0 * qw + hh * dh, qw, T(1),
                           dkr.data() + tl.k0 * kw + g * dh, kw);
            }
          }
        }
        if (gq) {
          for (std::size_t i = 0; i < nq; ++i) {
            for (std::size_t hh = 0; hh < h; ++hh) {
              auto seg = std::span(dqr).subspan(i * qw + hh * dh, dh);
              if (rope) rope->rotate(seg, mask.q_offset + i, true);
            }
          }
          for (std::size_t x = 0; x < dqr.size(); ++x) gq[x] += dqr[x];
        }
        if (gk) {
          for (std::size_t j = 0; j < nk; ++j) {
            for (std::size_t g = 0; g < layout.kv_heads; ++g) {
              auto seg = std::span(dkr).subspan(j * kw + g * dh, dh);
              if (rope) rope->rotate(seg, j, true);
            }
          }
          for (std::size_t x = 0; x < dkr.size(); ++x) gk[x] += dkr[x];
        }
      });
}

}  // namespace hsa_lab
