#pragma once

// Hierarchical sparse attention. Each token scores the landmarks of earlier
// complete chunks, keeps the top K, attends inside every kept chunk on its
// own, and mixes the per-chunk results with softmax weights taken over the
// kept scores. No positional encoding enters this path.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "hsa_lab/attention/local_attention.hpp"
#include "hsa_lab/attention/selection.hpp"
#include "hsa_lab/numerics/ops.hpp"
#include "hsa_lab/numerics/kernels.hpp"
#include "hsa_lab/numerics/tensor.hpp"

namespace hsa_lab {

/// Context memory shared by every HSA layer of one forward pass.
/// keys/values: [num_chunks*chunk_size, kv_width] (keys already QK-normed);
/// landmarks: [num_chunks, retrieval_dim].
template <std::floating_point T>
struct ChunkStore {
  std::size_t chunk_size = 0;
  std::size_t num_chunks = 0;
  Tensor<T> keys;
  Tensor<T> values;
  Tensor<T> landmarks;

  bool empty() const { return num_chunks == 0; }

  /// FNV-1a over every stored value.
  std::uint64_t content_hash() const {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&](const Tensor<T>& t) {
      if (!t.defined()) return;
      const auto* bytes = reinterpret_cast<const unsigned char*>(t.data().data());
      for (std::size_t i = 0; i < t.size() * sizeof(T); ++i) {
        h ^= bytes[i];
        h *= 1099511628211ull;
      }
    };
    mix(keys);
    mix(values);
    mix(landmarks);
    return h;
  }
};

struct HsaLayout {
  HeadLayout heads;
  std::size_t chunk_size = 64;
  std::size_t top_k = 8;
  std::size_t q_offset = 0;
};

/// Core HSA operator on pre-normalized queries. `selection_out`, when given,
/// receives the retrieval result.
template <std::floating_point T>
Tensor<T> hsa_fused(const Tensor<T>& q_slc, const Tensor<T>& landmarks, const Tensor<T>& q_attn,
                    const Tensor<T>& keys, const Tensor<T>& values, const HsaLayout& lay,
                    RetrievalSelection<T>* selection_out = nullptr) {
  const std::size_t n = q_attn.dim(0);
  const std::size_t h = lay.heads.heads, dh = lay.heads.head_dim, grp = lay.heads.group();
  const std::size_t qw = lay.heads.q_width(), kw = lay.heads.kv_width();
  const std::size_t S = lay.chunk_size;
  const std::size_t C = landmarks.defined() ? landmarks.dim(0) : 0;
  const std::size_t dr = q_slc.dim(1);
  if (q_slc.dim(0) != n || q_attn.dim(1) != qw) {
    throw ShapeError("hsa: q_slc " + shape_str(q_slc.shape()) + " q_attn " + shape_str(q_attn.shape()));
  }
  if (C && (landmarks.dim(1) != dr || keys.dim(0) != C * S || keys.dim(1) != kw || values.shape() != keys.shape())) {
    throw ShapeError("hsa: store shapes keys " + shape_str(keys.shape()) + " landmarks " +
                     shape_str(landmarks.shape()));
  }
  if (S == 0 || lay.top_k == 0) throw std::invalid_argument("hsa: chunk_size and top_k must be >= 1");

  auto sel = C ? select_chunks<T>(q_slc.data(), n, dr, landmarks.data(), S, lay.top_k, lay.q_offset)
               : RetrievalSelection<T>{std::vector<std::size_t>(n + 1, 0), {}, {}, {}};
  const std::size_t entries = sel.indices.size();

  // Dispatch: group (token, slot) entries by chunk, like routing tokens to experts.
  std::vector<std::size_t> by_chunk_off(C + 1, 0);
  std::vector<std::size_t> entry_token(entries);
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t e = sel.offsets[t]; e < sel.offsets[t + 1]; ++e) {
      entry_token[e] = t;
      ++by_chunk_off[static_cast<std::size_t>(sel.indices[e]) + 1];
    }
  }
  for (std::size_t c = 0; c < C; ++c) by_chunk_off[c + 1] += by_chunk_off[c];
  std::vector<std::size_t> by_chunk(entries);
  {
    std::vector<std::size_t> fill(by_chunk_off.begin(), by_chunk_off.end() - 1);
    for (std::size_t e = 0; e < entries; ++e) by_chunk[fill[static_cast<std::size_t>(sel.indices[e])]++] = e;
  }

  // Chunk-major: the queries routed to one chunk are gathered into a block
  // and attend to it with two small gemms per head. probs holds, per chunk,
  // h blocks of [routed, S].
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<T> probs(entries * h * S);
  std::vector<T> partial(entries * h * dh, T(0));  // per-chunk outputs before fusion
  std::vector<T> out(n * qw, T(0));
  const T* qd = q_attn.data().data();
  const T* kd = C ? keys.data().data() : nullptr;
  const T* vd = C ? values.data().data() : nullptr;
  std::vector<T> qbuf, obuf;
  for (std::size_t c = 0; c < C; ++c) {
    const std::size_t m = by_chunk_off[c + 1] - by_chunk_off[c];
    if (m == 0) continue;
    qbuf.resize(m * dh);
    obuf.resize(m * dh);
    for (std::size_t hh = 0; hh < h; ++hh) {
      const std::size_t g = hh / grp;
      for (std::size_t r = 0; r < m; ++r) {
        const T* src = qd + entry_token[by_chunk[by_chunk_off[c] + r]] * qw + hh * dh;
        std::copy(src, src + dh, qbuf.data() + r * dh);
      }
      T* p = probs.data() + (by_chunk_off[c] * h + hh * m) * S;
      detail::gemm(false, true, m, S, dh, scale, qbuf.data(), dh, kd + c * S * kw + g * dh, kw, T(0), p, S);
      for (std::size_t r = 0; r < m; ++r) {
        T* row = p + r * S;
        const T mx = *std::max_element(row, row + S);
        T z = T(0);
        for (std::size_t j = 0; j < S; ++j) {
          row[j] = std::exp(row[j] - mx);
          z += row[j];
        }
        for (std::size_t j = 0; j < S; ++j) row[j] /= z;
      }
      detail::gemm(false, false, m, dh, S, T(1), p, S, vd + c * S * kw + g * dh, kw, T(0), obuf.data(), dh);
      for (std::size_t r = 0; r < m; ++r) {
        const std::size_t e = by_chunk[by_chunk_off[c] + r];
        std::copy(obuf.data() + r * dh, obuf.data() + (r + 1) * dh, partial.data() + (e * h + hh) * dh);
      }
    }
  }
  // Fusion runs token-major so each token's sum has a fixed order.
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t e = sel.offsets[t]; e < sel.offsets[t + 1]; ++e) {
      const T w = sel.weights[e];
      const T* ob = partial.data() + e * h * dh;
      T* o = out.data() + t * qw;
      for (std::size_t x = 0; x < qw; ++x) o[x] += w * ob[x];
    }
  }
  if (selection_out) *selection_out = sel;

  std::vector<Tensor<T>> parents{q_slc, q_attn};
  if (C) {
    parents.push_back(landmarks);
    parents.push_back(keys);
    parents.push_back(values);
  }
  return make_result<T>(
      {n, qw}, std::move(out), parents, "hsa",
      [=, sel = std::move(sel), probs = std::move(probs), partial = std::move(partial),
       by_chunk = std::move(by_chunk), by_chunk_off = std::move(by_chunk_off),
       entry_token = std::move(entry_token)](Node<T>& self) {
        if (C == 0) return;
        Node<T>& pqs = *self.parents[0];
        Node<T>& pqa = *self.parents[1];
        Node<T>& plm = *self.parents[2];
        Node<T>& pk = *self.parents[3];
        Node<T>& pv = *self.parents[4];
        T* gqs = grad_of(pqs);
        T* gqa = grad_of(pqa);
        T* glm = grad_of(plm);
        T* gk = grad_of(pk);
        T* gv = grad_of(pv);
        const T* dout = self.grad.data();

        // Retrieval-score path: dL/dw, then through the restricted softmax.
        const T inv_sqrt_dr = T(1) / std::sqrt(static_cast<T>(dr));
        std::vector<T> dw(sel.indices.size());
        for (std::size_t t = 0; t < n; ++t) {
          T wdot = T(0);
          for (std::size_t e = sel.offsets[t]; e < sel.offsets[t + 1]; ++e) {
            const T* ob = partial.data() + e * h * dh;
            const T* dO = dout + t * qw;
            const T acc = detail::dot(dO, ob, qw);
            dw[e] = acc;
            wdot += sel.weights[e] * acc;
          }
          for (std::size_t e = sel.offsets[t]; e < sel.offsets[t + 1]; ++e) {
            const T ds = sel.weights[e] * (dw[e] - wdot) * inv_sqrt_dr;
            const std::size_t c = static_cast<std::size_t>(sel.indices[e]);
            const T* qs = pqs.value.data() + t * dr;
            const T* lm = plm.value.data() + c * dr;
            if (gqs) {
              for (std::size_t x = 0; x < dr; ++x) gqs[t * dr + x] += ds * lm[x];
            }
            if (glm) {
              for (std::size_t x = 0; x < dr; ++x) glm[c * dr + x] += ds * qs[x];
            }
          }
        }

        // Intra-chunk attention path, chunk-major. The upstream gradient of
        // each routed query is scaled by its fusion weight.
        if (!gqa && !gk && !gv) return;
        std::vector<T> qbuf, gbuf, ds, dq;
        for (std::size_t c = 0; c < C; ++c) {
          const std::size_t m = by_chunk_off[c + 1] - by_chunk_off[c];
          if (m == 0) continue;
          qbuf.resize(m * dh);
          gbuf.resize(m * dh);
          ds.resize(m * S);
          dq.resize(m * dh);
          const T* kc = pk.value.data() + c * S * kw;
          const T* vc = pv.value.data() + c * S * kw;
          for (std::size_t hh = 0; hh < h; ++hh) {
            const std::size_t g = hh / grp;
            for (std::size_t r = 0; r < m; ++r) {
              const std::size_t e = by_chunk[by_chunk_off[c] + r], t = entry_token[e];
              const T w = sel.weights[e];
              const T* src = pqa.value.data() + t * qw + hh * dh;
              std::copy(src, src + dh, qbuf.data() + r * dh);
              for (std::size_t x = 0; x < dh; ++x) gbuf[r * dh + x] = w * dout[t * qw + hh * dh + x];
            }
            const T* p = probs.data() + (by_chunk_off[c] * h + hh * m) * S;
            if (gv) detail::gemm(true, false, S, dh, m, T(1), p, S, gbuf.data(), dh, T(1), gv + c * S * kw + g * dh, kw);
            if (!gqa && !gk) continue;
            detail::gemm(false, true, m, S, dh, T(1), gbuf.data(), dh, vc + g * dh, kw, T(0), ds.data(), S);
            for (std::size_t r = 0; r < m; ++r) {
              const T* pr = p + r * S;
              T* dr_ = ds.data() + r * S;
              const T dot = detail::dot(pr, dr_, S);
              for (std::size_t j = 0; j < S; ++j) dr_[j] = pr[j] * (dr_[j] - dot) * scale;
            }
            if (gqa) {
              detail::gemm(false, false, m, dh, S, T(1), ds.data(), S, kc + g * dh, kw, T(0), dq.data(), dh);
              for (std::size_t r = 0; r < m; ++r) {
                T* dst = gqa + entry_token[by_chunk[by_chunk_off[c] + r]] * qw + hh * dh;
                for (std::size_t x = 0; x < dh; ++x) dst[x] += dq[r * dh + x];
              }
            }
            if (gk) detail::gemm(true, false, S, dh, m, T(1), ds.data(), S, qbuf.data(), dh, T(1), gk + c * S * kw + g * dh, kw);
          }
        }
      });
}

/// Full HSA read of a shared store: QK-norm on the queries (keys in the store
/// are normed when it is built), then retrieval and fusion.
template <std::floating_point T>
Tensor<T> hsa_attend(const Tensor<T>& q_slc, const Tensor<T>& q_attn, const Tensor<T>& q_norm_gain,
                     const ChunkStore<T>& store, const HsaLayout& lay, T eps = T(1e-6),
                     RetrievalSelection<T>* selection_out = nullptr) {
  const std::size_t n = q_attn.dim(0);
  const std::size_t h = lay.heads.heads, dh = lay.heads.head_dim;
  auto qn = reshape(rms_normalize(reshape(q_attn, {n * h, dh}), 1, eps, q_norm_gain), {n, h * dh});
  return hsa_fused(q_slc, store.landmarks, qn, store.keys, store.values, lay, selection_out);
}

/// Token-by-token, chunk-by-chunk evaluation with no batching, dispatch or
/// shared buffers; ground truth for hsa_attend. Selection uses a full sort.
/// All arrays row-major; keys are the normed store keys.
template <class T>
std::vector<T> hsa_reference(std::span<const T> q_slc, std::span<const T> q_attn,
                             std::span<const T> q_norm_gain, std::span<const T> landmarks,
                             std::span<const T> keys, std::span<const T> values, std::size_t n,
                             std::size_t retrieval_dim, const HsaLayout& lay, T eps = T(1e-6)) {
  const std::size_t h = lay.heads.heads, dh = lay.heads.head_dim, kvh = lay.heads.kv_heads;
  const std::size_t qw = h * dh, kw = kvh * dh, S = lay.chunk_size;
  const std::size_t C = landmarks.size() / retrieval_dim;
  std::vector<T> out(n * qw, T(0));
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t t = lay.q_offset + i;
    const std::size_t eligible = std::min(t / S, C);
    if (eligible == 0) continue;
    std::vector<std::pair<T, std::size_t>> ranked;
    for (std::size_t c = 0; c < eligible; ++c) {
      T s = T(0);
      for (std::size_t x = 0; x < retrieval_dim; ++x) s += q_slc[i * retrieval_dim + x] * landmarks[c * retrieval_dim + x];
      ranked.emplace_back(s / std::sqrt(static_cast<T>(retrieval_dim)), c);
    }
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
      return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    ranked.resize(std::min(lay.top_k, ranked.size()));
    T mx = ranked[0].first;
    T z = T(0);
    for (const auto& r : ranked) z += std::exp(r.first - mx);
    for (const auto& [score, c] : ranked) {
      const T w = std::exp(score - mx) / z;
      for (std::size_t hh = 0; hh < h; ++hh) {
        const std::size_t g = hh / (h / kvh);
        std::vector<T> qn(dh);
        T ms = T(0);
        for (std::size_t x = 0; x < dh; ++x) ms += q_attn[i * qw + hh * dh + x] * q_attn[i * qw + hh * dh + x];
        const T r = T(1) / std::sqrt(ms / static_cast<T>(dh) + eps);
        for (std::size_t x = 0; x < dh; ++x) qn[x] = q_attn[i * qw + hh * dh + x] * r * q_norm_gain[x];
        std::vector<T> logits(S);
        for (std::size_t j = 0; j < S; ++j) {
          T acc = T(0);
          for (std::size_t x = 0; x < dh; ++x) acc += qn[x] * keys[(c * S + j) * kw + g * dh + x];
          logits[j] = acc / std::sqrt(static_cast<T>(dh));
        }
        const T lmax = *std::max_element(logits.begin(), logits.end());
        T lz = T(0);
        for (auto& l : logits) {
          l = std::exp(l - lmax);
          lz += l;
        }
        for (std::size_t x = 0; x < dh; ++x) {
          T acc = T(0);
          for (std::size_t j = 0; j < S; ++j) acc += logits[j] / lz * values[(c * S + j) * kw + g * dh + x];
          out[i * qw + hh * dh + x] += w * acc;
        }
      }
    }
  }
  return out;
}

}  // namespace hsa_lab
