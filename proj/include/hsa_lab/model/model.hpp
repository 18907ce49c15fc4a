#pragma once

// The hybrid decoder: SWA-only lower half, a bidirectional [CLS] chunk
// encoder over the mid-layer hidden states, and an upper half where chosen
// layers add an HSA read of the shared chunk store to their SWA output.

#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hsa_lab/attention/hsa.hpp"
#include "hsa_lab/attention/local_attention.hpp"
#include "hsa_lab/model/config.hpp"
#include "hsa_lab/numerics/ops.hpp"
#include "hsa_lab/numerics/parameter.hpp"

namespace hsa_lab {

inline constexpr double kNormEps = 1e-6;

/// Allocates every parameter of `cfg` (zero-filled) in canonical order.
template <std::floating_point T>
ParameterSet<T> make_parameters(const ModelConfig& cfg) {
  cfg.validate();
  ParameterSet<T> ps;
  const std::size_t d = cfg.d_model, qw = cfg.heads * cfg.head_dim, kw = cfg.kv_heads * cfg.head_dim;
  const std::size_t dr = cfg.landmark_dim(), f = cfg.ffn_width;
  auto ffn = [&](const std::string& p) {
    ps.add(p + "ffn_norm.gain", {d});
    ps.add(p + "ffn.gate_proj", {d, f});
    ps.add(p + "ffn.up_proj", {d, f});
    ps.add(p + "ffn.down_proj", {f, d});
  };
  ps.add("embed.tokens", {cfg.vocab_size, d});
  for (std::size_t l = 1; l <= cfg.n_layers; ++l) {
    const std::string p = "layer." + std::to_string(l) + ".";
    ps.add(p + "attn_norm.gain", {d});
    ps.add(p + "swa.q_proj", {d, qw});
    ps.add(p + "swa.k_proj", {d, kw});
    ps.add(p + "swa.v_proj", {d, kw});
    ps.add(p + "swa.o_proj", {qw, d});
    if (cfg.is_hsa_layer(l)) {
      ps.add(p + "hsa.q_slc_proj", {d, dr});
      ps.add(p + "hsa.q_attn_proj", {d, qw});
      ps.add(p + "hsa.q_norm.gain", {cfg.head_dim});
      ps.add(p + "hsa.o_proj", {qw, d});
    }
    ffn(p);
    if (l == cfg.lower_layers()) {
      ps.add("encoder.cls", {1, d});
      ps.add("encoder.pos", {cfg.chunk_size + 1, d});
      for (std::size_t b = 1; b <= cfg.encoder_depth; ++b) {
        const std::string e = "encoder.block." + std::to_string(b) + ".";
        ps.add(e + "attn_norm.gain", {d});
        ps.add(e + "attn.q_proj", {d, d});
        ps.add(e + "attn.k_proj", {d, d});
        ps.add(e + "attn.v_proj", {d, d});
        ps.add(e + "attn.o_proj", {d, d});
        ffn(e);
      }
      ps.add("encoder.final_norm.gain", {d});
      ps.add("encoder.landmark_proj", {d, dr});
      ps.add("encoder.k_proj", {d, kw});
      ps.add("encoder.v_proj", {d, kw});
      ps.add("encoder.k_norm.gain", {cfg.head_dim});
    }
  }
  ps.add("final_norm.gain", {d});
  ps.add("lm_head", {d, cfg.vocab_size});
  return ps;
}

inline bool is_gain(const std::string& name) { return name.ends_with(".gain"); }
inline bool is_output_projection(const std::string& name) {
  return name.ends_with("o_proj") || name.ends_with("down_proj");
}

/// normal(0, 0.02) everywhere, residual-output projections scaled by
/// 1/sqrt(2L), gains exactly 1. Values are drawn in double so the float and
/// double models of one seed agree to rounding.
template <std::floating_point T>
ParameterSet<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  auto ps = make_parameters<T>(cfg);
  std::mt19937_64 rng(seed);
  const double out_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
  for (auto& p : ps.items()) {
    auto data = p.tensor.mutable_data();
    if (is_gain(p.name)) {
      std::fill(data.begin(), data.end(), T(1));
      continue;
    }
    std::normal_distribution<double> nd(0.0, 0.02 * (is_output_projection(p.name) ? out_scale : 1.0));
    for (auto& x : data) x = static_cast<T>(nd(rng));
  }
  return ps;
}

/// Per-HSA-layer retrieval results and the store fingerprint around the
/// upper decoder.
template <std::floating_point T>
struct ForwardTrace {
  std::vector<std::size_t> hsa_layers;
  std::vector<RetrievalSelection<T>> selections;
  std::uint64_t store_hash_before = 0;
  std::uint64_t store_hash_after = 0;
  std::size_t num_chunks = 0;
};

/// Carried state for block-by-block processing of a long stream.
template <std::floating_point T>
struct DecodeState {
  std::size_t position = 0;
  std::vector<Tensor<T>> k_cache, v_cache;  // per layer, last (window-1) rows
  Tensor<T> pending_mid;                    // mid-layer rows of the incomplete chunk
  ChunkStore<T> store;
};

template <std::floating_point T>
class HsaModel {
 public:
  HsaModel(ModelConfig cfg, ParameterSet<T> params)
      : cfg_(std::move(cfg)), params_(std::move(params)), rope_(cfg_.head_dim, cfg_.rope_base) {
    cfg_.validate();
    auto expect = make_parameters<T>(cfg_);
    for (const auto& p : expect.items()) {
      if (!params_.contains(p.name) || params_.at(p.name).shape() != p.tensor.shape()) {
        throw ConfigError("parameter set does not match config at " + p.name);
      }
    }
    if (expect.size() != params_.size()) throw ConfigError("parameter set has extra tensors");
  }

  static HsaModel initialized(const ModelConfig& cfg, std::uint64_t seed) {
    return HsaModel(cfg, init_params<T>(cfg, seed));
  }

  const ModelConfig& config() const { return cfg_; }
  ParameterSet<T>& params() { return params_; }
  const ParameterSet<T>& params() const { return params_; }

  /// Runtime knobs; weights do not depend on them.
  void set_top_k(std::size_t k) {
    if (k == 0) throw ConfigError("invalid field 'top_k': must be >= 1");
    cfg_.top_k = k;
  }
  void set_swa_window(std::size_t w) {
    if (w == 0) throw ConfigError("invalid field 'swa_window': must be >= 1");
    cfg_.swa_window = w;
  }

  /// Logits [n, vocab] for a whole sequence in one pass.
  Tensor<T> forward(std::span<const std::int32_t> tokens, ForwardTrace<T>* trace = nullptr) const {
    if (tokens.empty()) throw std::invalid_argument("forward: empty token sequence");
    return run(tokens, nullptr, trace);
  }

  /// Logits for the next block of a stream, extending `state`.
  Tensor<T> forward_block(std::span<const std::int32_t> tokens, DecodeState<T>& state) const {
    if (tokens.empty()) throw std::invalid_argument("forward_block: empty block");
    return run(tokens, &state, nullptr);
  }

  /// Mean next-token NLL; mask[i] marks token i as a prediction target.
  Tensor<T> loss(std::span<const std::int32_t> tokens, std::span<const std::uint8_t> mask,
                 ForwardTrace<T>* trace = nullptr) const {
    if (mask.size() != tokens.size()) throw ShapeError("loss: mask and tokens differ in length");
    auto logits = forward(tokens, trace);
    const std::size_t n = tokens.size();
    std::vector<std::int32_t> targets(n, 0);
    std::vector<std::uint8_t> m(n, 0);
    for (std::size_t i = 0; i + 1 < n; ++i) {
      targets[i] = tokens[i + 1];
      m[i] = mask[i + 1];
    }
    return cross_entropy(logits, targets, m);
  }

  /// Bidirectional [CLS] encoding of every complete chunk of `mid`.
  ChunkStore<T> encode_chunks(const Tensor<T>& mid) const {
    const std::size_t S = cfg_.chunk_size;
    const std::size_t C = mid.dim(0) / S;
    ChunkStore<T> store;
    store.chunk_size = S;
    store.num_chunks = C;
    if (C == 0) return store;
    const std::size_t rows = C * (S + 1);
    const auto cls_row = static_cast<std::int32_t>(mid.dim(0));
    std::vector<std::int32_t> src(rows), pos(rows), cls_rows(C), tok_rows(C * S);
    for (std::size_t c = 0; c < C; ++c) {
      src[c * (S + 1)] = cls_row;
      cls_rows[c] = static_cast<std::int32_t>(c * (S + 1));
      for (std::size_t j = 0; j <= S; ++j) pos[c * (S + 1) + j] = static_cast<std::int32_t>(j);
      for (std::size_t j = 0; j < S; ++j) {
        src[c * (S + 1) + 1 + j] = static_cast<std::int32_t>(c * S + j);
        tok_rows[c * S + j] = static_cast<std::int32_t>(c * (S + 1) + 1 + j);
      }
    }
    auto x = gather(concat<T>({mid, p("encoder.cls")}, 0), 0, src);
    x = add(x, gather(p("encoder.pos"), 0, pos));
    const HeadLayout enc_heads{cfg_.heads, cfg_.heads, cfg_.head_dim};
    for (std::size_t b = 1; b <= cfg_.encoder_depth; ++b) {
      const std::string e = "encoder.block." + std::to_string(b) + ".";
      auto h = rms_normalize(x, 1, eps(), p(e + "attn_norm.gain"));
      auto att = local_attention(matmul(h, p(e + "attn.q_proj")), matmul(h, p(e + "attn.k_proj")),
                                 matmul(h, p(e + "attn.v_proj")), enc_heads, AttentionMask{false, 0, S + 1});
      x = add(x, matmul(att, p(e + "attn.o_proj")));
      x = add(x, ffn(x, e));
    }
    x = rms_normalize(x, 1, eps(), p("encoder.final_norm.gain"));
    store.landmarks = matmul(gather(x, 0, cls_rows), p("encoder.landmark_proj"));
    auto tok = gather(x, 0, tok_rows);
    const std::size_t kw = cfg_.kv_heads * cfg_.head_dim;
    auto k = matmul(tok, p("encoder.k_proj"));
    store.keys = reshape(rms_normalize(reshape(k, {C * S * cfg_.kv_heads, cfg_.head_dim}), 1, eps(),
                                       p("encoder.k_norm.gain")),
                         {C * S, kw});
    store.values = matmul(tok, p("encoder.v_proj"));
    return store;
  }

 private:
  const Tensor<T>& p(const std::string& name) const { return params_.at(name); }
  static T eps() { return static_cast<T>(kNormEps); }

  Tensor<T> ffn(const Tensor<T>& x, const std::string& prefix) const {
    auto h = rms_normalize(x, 1, eps(), p(prefix + "ffn_norm.gain"));
    return swiglu_ffn(h, p(prefix + "ffn.gate_proj"), p(prefix + "ffn.up_proj"), p(prefix + "ffn.down_proj"));
  }

  const RopeTable<T>* swa_rope() const { return cfg_.swa_positional == "rope" ? &rope_ : nullptr; }

  Tensor<T> layer(const Tensor<T>& x, std::size_t l, DecodeState<T>* state, const ChunkStore<T>* store,
                  std::size_t pos0, ForwardTrace<T>* trace) const {
    const std::string pre = "layer." + std::to_string(l) + ".";
    const HeadLayout heads{cfg_.heads, cfg_.kv_heads, cfg_.head_dim};
    auto h = rms_normalize(x, 1, eps(), p(pre + "attn_norm.gain"));
    auto q = matmul(h, p(pre + "swa.q_proj"));
    auto k = matmul(h, p(pre + "swa.k_proj"));
    auto v = matmul(h, p(pre + "swa.v_proj"));
    std::size_t offset = 0;
    if (state) {
      auto& kc = state->k_cache[l - 1];
      auto& vc = state->v_cache[l - 1];
      if (kc.defined() && kc.dim(0) > 0) {
        offset = kc.dim(0);
        k = concat<T>({kc, k}, 0);
        v = concat<T>({vc, v}, 0);
      }
      const std::size_t keep = std::min(k.dim(0), cfg_.swa_window - 1);
      std::vector<std::int32_t> tail(keep);
      std::iota(tail.begin(), tail.end(), static_cast<std::int32_t>(k.dim(0) - keep));
      kc = gather(k, 0, tail);
      vc = gather(v, 0, tail);
    }
    auto att = local_attention(q, k, v, heads, AttentionMask{true, cfg_.swa_window, 0, offset}, swa_rope());
    auto mix = matmul(att, p(pre + "swa.o_proj"));
    if (cfg_.is_hsa_layer(l)) {
      RetrievalSelection<T> sel;
      if (store && !store->empty()) {
        auto q_slc = matmul(h, p(pre + "hsa.q_slc_proj"));
        auto q_attn = matmul(h, p(pre + "hsa.q_attn_proj"));
        HsaLayout lay{heads, cfg_.chunk_size, cfg_.top_k, pos0};
        auto o = hsa_attend(q_slc, q_attn, p(pre + "hsa.q_norm.gain"), *store, lay, eps(), trace ? &sel : nullptr);
        mix = add(mix, matmul(o, p(pre + "hsa.o_proj")));
      } else {
        sel.offsets.assign(x.dim(0) + 1, 0);
      }
      if (trace) {
        trace->hsa_layers.push_back(l);
        trace->selections.push_back(std::move(sel));
      }
    }
    auto y = add(x, mix);
    return add(y, ffn(y, pre));
  }

  Tensor<T> run(std::span<const std::int32_t> tokens, DecodeState<T>* state, ForwardTrace<T>* trace) const {
    for (auto t : tokens) {
      if (t < 0 || static_cast<std::size_t>(t) >= cfg_.vocab_size) {
        throw std::out_of_range("token id " + std::to_string(t) + " outside vocabulary of " +
                                std::to_string(cfg_.vocab_size));
      }
    }
    const std::size_t pos0 = state ? state->position : 0;
    if (state && state->k_cache.empty()) {
      state->k_cache.resize(cfg_.n_layers);
      state->v_cache.resize(cfg_.n_layers);
      state->store.chunk_size = cfg_.chunk_size;
    }
    auto x = embedding(p("embed.tokens"), tokens);
    for (std::size_t l = 1; l <= cfg_.lower_layers(); ++l) x = layer(x, l, state, nullptr, pos0, trace);

    ChunkStore<T> local_store;
    const ChunkStore<T>* store = &local_store;
    if (!state) {
      local_store = encode_chunks(x);
    } else {
      auto mid = state->pending_mid.defined() ? concat<T>({state->pending_mid, x}, 0) : x;
      const std::size_t S = cfg_.chunk_size;
      const std::size_t complete = mid.dim(0) / S;
      if (complete) {
        std::vector<std::int32_t> head(complete * S);
        std::iota(head.begin(), head.end(), 0);
        auto fresh = encode_chunks(gather(mid, 0, head));
        auto& st = state->store;
        if (st.empty()) {
          st = std::move(fresh);
        } else {
          st.keys = concat<T>({st.keys, fresh.keys}, 0);
          st.values = concat<T>({st.values, fresh.values}, 0);
          st.landmarks = concat<T>({st.landmarks, fresh.landmarks}, 0);
          st.num_chunks += fresh.num_chunks;
        }
      }
      std::vector<std::int32_t> rest(mid.dim(0) - complete * S);
      std::iota(rest.begin(), rest.end(), static_cast<std::int32_t>(complete * S));
      state->pending_mid = gather(mid, 0, rest);
      store = &state->store;
    }
    if (trace) {
      trace->num_chunks = store->num_chunks;
      trace->store_hash_before = store->content_hash();
    }
    for (std::size_t l = cfg_.lower_layers() + 1; l <= cfg_.n_layers; ++l) x = layer(x, l, state, store, pos0, trace);
    if (trace) trace->store_hash_after = store->content_hash();
    if (state) state->position += tokens.size();
    return matmul(rms_normalize(x, 1, eps(), p("final_norm.gain")), p("lm_head"));
  }

  ModelConfig cfg_;
  ParameterSet<T> params_;
  RopeTable<T> rope_;
};

}  // namespace hsa_lab
