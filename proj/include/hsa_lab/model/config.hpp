#pragma once

#include <string>
#include <vector>

#include "hsa_lab/util/json_schema.hpp"

namespace hsa_lab {

/// Architecture of the hybrid decoder. Layers are numbered 1..n_layers;
/// layers 1..n_layers/2 form the SWA-only lower decoder whose output feeds
/// the chunk encoder, and every HSA layer sits in the upper half.
/// swa_window and top_k are runtime knobs: changing them never changes the
/// parameter set.
struct ModelConfig {
  std::size_t vocab_size = 264;
  std::size_t d_model = 64;
  std::size_t n_layers = 4;
  std::size_t heads = 4;
  std::size_t kv_heads = 4;
  std::size_t head_dim = 16;
  std::size_t chunk_size = 16;
  std::size_t top_k = 4;
  std::size_t swa_window = 64;
  std::vector<std::size_t> hsa_layers{3};
  std::size_t encoder_depth = 2;
  std::size_t ffn_width = 128;
  double rope_base = 10000.0;
  std::size_t retrieval_dim = 0;  // 0 = d_model
  std::string swa_positional = "rope";
  std::string hsa_positional = "none";

  std::size_t lower_layers() const { return n_layers / 2; }
  std::size_t landmark_dim() const { return retrieval_dim ? retrieval_dim : d_model; }
  bool is_hsa_layer(std::size_t layer) const {
    for (auto l : hsa_layers) {
      if (l == layer) return true;
    }
    return false;
  }

  void validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
      throw ConfigError("invalid field '" + field + "': " + why);
    };
    if (vocab_size < 2) fail("vocab_size", "must be >= 2");
    if (n_layers < 2 || n_layers % 2) fail("n_layers", "must be even and >= 2");
    if (heads == 0 || kv_heads == 0 || heads % kv_heads) fail("kv_heads", "must divide heads");
    if (head_dim == 0 || head_dim % 2) fail("head_dim", "must be even and >= 2");
    if (heads * head_dim != d_model) fail("head_dim", "heads * head_dim must equal d_model");
    if (chunk_size == 0) fail("chunk_size", "must be >= 1");
    if (top_k == 0) fail("top_k", "must be >= 1");
    if (swa_window == 0) fail("swa_window", "must be >= 1");
    if (encoder_depth == 0) fail("encoder_depth", "must be >= 1");
    if (ffn_width == 0) fail("ffn_width", "must be >= 1");
    for (auto l : hsa_layers) {
      if (l <= n_layers / 2 || l > n_layers) {
        fail("hsa_layers", "layer " + std::to_string(l) + " is not in the upper decoder (" +
                               std::to_string(n_layers / 2 + 1) + ".." + std::to_string(n_layers) + ")");
      }
    }
    if (swa_positional != "rope" && swa_positional != "none") fail("swa_positional", "expected rope or none");
    if (hsa_positional != "none") fail("hsa_positional", "the retrieval path carries no positions");
  }

  /// Default HSA layers for a depth: first upper layer and L-1.
  static std::vector<std::size_t> default_hsa_layers(std::size_t n_layers) {
    std::vector<std::size_t> out{n_layers / 2 + 1};
    if (n_layers - 1 > n_layers / 2 + 1) out.push_back(n_layers - 1);
    return out;
  }
};

inline json to_json(const ModelConfig& c) {
  return json{{"vocab_size", c.vocab_size},       {"d_model", c.d_model},
              {"n_layers", c.n_layers},           {"heads", c.heads},
              {"kv_heads", c.kv_heads},           {"head_dim", c.head_dim},
              {"chunk_size", c.chunk_size},       {"top_k", c.top_k},
              {"swa_window", c.swa_window},       {"hsa_layers", c.hsa_layers},
              {"encoder_depth", c.encoder_depth}, {"ffn_width", c.ffn_width},
              {"rope_base", c.rope_base},         {"retrieval_dim", c.retrieval_dim},
              {"swa_positional", c.swa_positional}, {"hsa_positional", c.hsa_positional}};
}

inline ModelConfig model_config_from_json(const json& j, const std::string& path = "model") {
  JsonReader r(j, path);
  ModelConfig c;
  c.vocab_size = r.required<std::size_t>("vocab_size");
  c.d_model = r.required<std::size_t>("d_model");
  c.n_layers = r.required<std::size_t>("n_layers");
  c.heads = r.required<std::size_t>("heads");
  c.kv_heads = r.optional<std::size_t>("kv_heads", c.heads);
  c.head_dim = r.required<std::size_t>("head_dim");
  c.chunk_size = r.required<std::size_t>("chunk_size");
  c.top_k = r.required<std::size_t>("top_k");
  c.swa_window = r.required<std::size_t>("swa_window");
  c.hsa_layers = r.optional<std::vector<std::size_t>>("hsa_layers", ModelConfig::default_hsa_layers(c.n_layers));
  c.encoder_depth = r.optional<std::size_t>("encoder_depth", 2);
  c.ffn_width = r.required<std::size_t>("ffn_width");
  c.rope_base = r.optional<double>("rope_base", 10000.0);
  c.retrieval_dim = r.optional<std::size_t>("retrieval_dim", 0);
  c.swa_positional = r.optional<std::string>("swa_positional", "rope");
  c.hsa_positional = r.optional<std::string>("hsa_positional", "none");
  r.reject_unknown();
  c.validate();
  return c;
}

/// Hash of the weight-shaping part of a config (runtime knobs excluded), so
/// a checkpoint can be matched against a config file.
inline std::string architecture_hash(const ModelConfig& c) {
  json j = to_json(c);
  j.erase("top_k");
  j.erase("swa_window");
  return hex64(fnv1a64(j.dump()));
}

}  // namespace hsa_lab
