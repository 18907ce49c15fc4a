#pragma once

// Chunk retrieval: landmark scoring, top-K selection and fusion weights.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

namespace hsa_lab {

/// Score of an ineligible chunk. Selection runs before any softmax, so the
/// sentinel never reaches an exponential.
template <class T>
constexpr T ineligible_score() {
  return std::numeric_limits<T>::lowest();
}

/// Chunks a token at absolute position t may retrieve: strictly earlier
/// chunks only, capped by what the store holds.
inline std::size_t eligible_chunks(std::size_t t, std::size_t chunk_size, std::size_t stored) {
  return std::min(t / chunk_size, stored);
}

/// s_i = q . landmark_i / sqrt(d) for eligible i, sentinel otherwise.
/// `landmarks` is row-major [num_chunks, d].
template <class T>
std::vector<T> score_chunks(std::span<const T> q_slc, std::span<const T> landmarks, std::size_t t,
                            std::size_t chunk_size) {
  const std::size_t d = q_slc.size();
  const std::size_t stored = d ? landmarks.size() / d : 0;
  std::vector<T> scores(stored, ineligible_score<T>());
  const std::size_t eligible = eligible_chunks(t, chunk_size, stored);
  const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(d));
  for (std::size_t i = 0; i < eligible; ++i) {
    const T* lm = landmarks.data() + i * d;
    T acc = T(0);
    for (std::size_t j = 0; j < d; ++j) acc += q_slc[j] * lm[j];
    scores[i] = acc * inv_sqrt_d;
  }
  return scores;
}

/// Indices of the K highest non-sentinel scores, highest first; equal scores
/// rank the lower chunk index first.
template <class T>
std::vector<std::int32_t> select_topk(std::span<const T> scores, std::size_t k) {
  if (k == 0) throw std::invalid_argument("select_topk: K must be >= 1");
  std::vector<std::int32_t> idx;
  idx.reserve(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (scores[i] != ineligible_score<T>()) idx.push_back(static_cast<std::int32_t>(i));
  }
  const std::size_t take = std::min(k, idx.size());
  auto better = [&](std::int32_t a, std::int32_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  };
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take), idx.end(), better);
  idx.resize(take);
  return idx;
}

/// Softmax of the raw scores restricted to the selected set.
template <class T>
std::vector<T> fusion_weights(std::span<const T> scores, std::span<const std::int32_t> selected) {
  std::vector<T> w(selected.size());
  if (selected.empty()) return w;
  T mx = scores[selected[0]];
  for (auto i : selected) mx = std::max(mx, scores[i]);
  T z = T(0);
  for (std::size_t j = 0; j < selected.size(); ++j) {
    w[j] = std::exp(scores[selected[j]] - mx);
    z += w[j];
  }
  for (auto& x : w) x /= z;
  return w;
}

/// Per-token retrieval result in CSR layout: token t owns entries
/// [offsets[t], offsets[t+1]).
template <class T>
struct RetrievalSelection {
  std::vector<std::size_t> offsets{0};
  std::vector<std::int32_t> indices;
  std::vector<T> raw_scores;
  std::vector<T> weights;

  std::size_t tokens() const { return offsets.size() - 1; }
  std::size_t count(std::size_t t) const { return offsets[t + 1] - offsets[t]; }
  std::span<const std::int32_t> indices_of(std::size_t t) const {
    return std::span(indices).subspan(offsets[t], count(t));
  }
  std::span<const T> scores_of(std::size_t t) const {
    return std::span(raw_scores).subspan(offsets[t], count(t));
  }
  std::span<const T> weights_of(std::size_t t) const {
    return std::span(weights).subspan(offsets[t], count(t));
  }
};

/// Runs score -> top-K -> weights for every query row. Query i sits at
/// absolute position q_offset + i.
template <class T>
RetrievalSelection<T> select_chunks(std::span<const T> q_slc, std::size_t n, std::size_t d,
                                    std::span<const T> landmarks, std::size_t chunk_size,
                                    std::size_t top_k, std::size_t q_offset = 0) {
  RetrievalSelection<T> sel;
  sel.offsets.reserve(n + 1);
  for (std::size_t i = 0; i < n; ++i) {
    auto scores = score_chunks<T>(q_slc.subspan(i * d, d), landmarks, q_offset + i, chunk_size);
    auto chosen = select_topk<T>(scores, top_k);
    std::vector<T> chosen_scores;
    chosen_scores.reserve(chosen.size());
    for (auto c : chosen) chosen_scores.push_back(scores[c]);
    auto w = fusion_weights<T>(scores, chosen);
    sel.indices.insert(sel.indices.end(), chosen.begin(), chosen.end());
    sel.raw_scores.insert(sel.raw_scores.end(), chosen_scores.begin(), chosen_scores.end());
    sel.weights.insert(sel.weights.end(), w.begin(), w.end());
    sel.offsets.push_back(sel.indices.size());
  }
  return sel;
}

}  // namespace hsa_lab
