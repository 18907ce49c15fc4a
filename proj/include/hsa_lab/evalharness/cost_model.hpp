#pragma once

// Closed-form attention cost per context length, in exact integer
// arithmetic. Counts cover the attention score and mixing terms only;
// projections and FFNs are identical across schemes and left out.
//
//   full attention   2 n^2 d            per layer
//   SWA              2 n min(n, W) d    per layer
//   HSA attend       2 n K S d          per HSA layer
//   HSA retrieval    n floor(n/S) d_r   per HSA layer
//
// KV memory counts key and value rows at the given bytes per element.

#include <cstdint>
#include <string>
#include <vector>

#include "hsa_lab/model/config.hpp"

namespace hsa_lab {

using Count = unsigned __int128;

inline std::string count_str(Count v) {
  if (v == 0) return "0";
  std::string s;
  while (v) {
    s.insert(s.begin(), static_cast<char>('0' + static_cast<int>(v % 10)));
    v /= 10;
  }
  return s;
}

struct CostRow {
  std::uint64_t n = 0;
  Count full_attention = 0;  // all layers
  Count swa = 0;             // all layers
  Count hsa_attend = 0;      // all HSA layers
  Count hsa_retrieval = 0;   // all HSA layers
  Count hybrid_total = 0;    // swa + hsa_attend + hsa_retrieval
  Count kv_bytes_full = 0;
  Count kv_bytes_swa = 0;
  Count kv_bytes_hsa = 0;  // shared chunk store + landmarks
};

struct CostReport {
  std::vector<CostRow> rows;
  std::uint64_t crossover = 0;  // smallest n with hybrid_total < full_attention; 0 if none up to the search cap
};

struct CostTerms {
  static Count full(const ModelConfig& c, std::uint64_t n) { return Count(2) * n * n * c.d_model; }
  static Count swa(const ModelConfig& c, std::uint64_t n) {
    return Count(2) * n * std::min<std::uint64_t>(n, c.swa_window) * c.d_model;
  }
  static Count hsa_attend(const ModelConfig& c, std::uint64_t n) {
    return Count(2) * n * c.top_k * c.chunk_size * c.d_model;
  }
  static Count hsa_retrieval(const ModelConfig& c, std::uint64_t n) {
    return Count(n) * (n / c.chunk_size) * c.landmark_dim();
  }
};

inline CostRow cost_row(const ModelConfig& c, std::uint64_t n, std::uint64_t bytes_per_element = 4) {
  const Count L = c.n_layers, H = c.hsa_layers.size(), kv = 2 * c.kv_heads * c.head_dim;
  CostRow r;
  r.n = n;
  r.full_attention = L * CostTerms::full(c, n);
  r.swa = L * CostTerms::swa(c, n);
  r.hsa_attend = H * CostTerms::hsa_attend(c, n);
  r.hsa_retrieval = H * CostTerms::hsa_retrieval(c, n);
  r.hybrid_total = r.swa + r.hsa_attend + r.hsa_retrieval;
  r.kv_bytes_full = L * n * kv * bytes_per_element;
  r.kv_bytes_swa = L * std::min<std::uint64_t>(n, c.swa_window) * kv * bytes_per_element;
  r.kv_bytes_hsa = (Count(n / c.chunk_size) * c.chunk_size * kv + Count(n / c.chunk_size) * c.landmark_dim()) *
                   bytes_per_element;
  return r;
}

/// Smallest n in [1, cap] where the hybrid model's attention FLOPs fall
/// below full attention's; 0 if there is none.
inline std::uint64_t cost_crossover(const ModelConfig& c, std::uint64_t cap = std::uint64_t(1) << 26) {
  for (std::uint64_t n = 1; n <= cap; ++n) {
    const auto r = cost_row(c, n);
    if (r.hybrid_total < r.full_attention) return n;
  }
  return 0;
}

inline CostReport cost_model(const ModelConfig& c, const std::vector<std::uint64_t>& lengths) {
  CostReport rep;
  for (auto n : lengths) {
    if (n == 0) throw std::invalid_argument("cost_model: lengths must be positive");
    rep.rows.push_back(cost_row(c, n));
  }
  rep.crossover = cost_crossover(c);
  return rep;
}

inline std::string cost_csv(const CostReport& r) {
  std::string s =
      "n,full_attention,swa,hsa_attend,hsa_retrieval,hybrid_total,kv_bytes_full,kv_bytes_swa,kv_bytes_hsa\n";
  for (const auto& x : r.rows) {
    s += std::to_string(x.n) + "," + count_str(x.full_attention) + "," + count_str(x.swa) + "," +
         count_str(x.hsa_attend) + "," + count_str(x.hsa_retrieval) + "," + count_str(x.hybrid_total) + "," +
         count_str(x.kv_bytes_full) + "," + count_str(x.kv_bytes_swa) + "," + count_str(x.kv_bytes_hsa) + "\n";
  }
  return s;
}

}  // namespace hsa_lab
