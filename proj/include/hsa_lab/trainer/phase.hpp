#pragma once

// Training configuration: a model, optimizer settings and an ordered list
// of phases. Configs are canonical JSON; unknown fields are rejected and
// missing ones are reported by dotted path.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hsa_lab/datagen/generators.hpp"
#include "hsa_lab/model/config.hpp"
#include "hsa_lab/trainer/optimizer.hpp"

namespace hsa_lab {

inline constexpr const char* kTrainSchema = "hsa_lab.train/1";

struct CompletionSpec {
  double threshold = 0.95;
  std::size_t probe_length = 0;
  std::size_t samples = 32;
  std::vector<double> depths{0.0, 0.25, 0.5, 0.75, 1.0};
};

struct PhaseSpec {
  std::string name;
  std::string kind = "pretrain";  // warmup, pretrain or midtrain
  std::size_t context_length = 0;
  std::size_t swa_window = 0;
  std::size_t top_k = 0;  // 0 = enough chunks to cover the whole context
  std::map<std::string, double> mixture{{"lm", 1.0}};
  double probe_injection = 0.01;
  std::size_t effective_span = 0;  // lm documents plant facts this far apart
  std::size_t steps = 0;
  std::size_t batch_size = 1;
  LrSchedule lr;
  std::size_t eval_every = 0;  // 0 = no probe evaluation
  std::size_t log_every = 10;
  std::size_t checkpoint_every = 0;
  std::optional<CompletionSpec> completion;

  std::size_t resolved_top_k(std::size_t chunk_size) const {
    return top_k ? top_k : std::max<std::size_t>(1, (context_length + chunk_size - 1) / chunk_size);
  }
};

struct TrainConfig {
  std::uint64_t seed = 0;
  int precision = 32;
  ModelConfig model;
  std::string warmup_strategy = "short-swa-full-hsa";  // or "self-copy"
  AdamWConfig optimizer;
  std::vector<PhaseSpec> phases;

  /// Longest context any phase trains on.
  std::size_t train_context() const {
    std::size_t n = 0;
    for (const auto& p : phases) n = std::max(n, p.context_length);
    return n;
  }

  /// Warm-up phases under the self-copy strategy train on self-copy data only.
  std::map<std::string, double> mixture_for(const PhaseSpec& p) const {
    if (p.kind == "warmup" && warmup_strategy == "self-copy") return {{"selfcopy", 1.0}};
    return p.mixture;
  }
};

inline json to_json(const PhaseSpec& p) {
  json j{{"name", p.name},
         {"kind", p.kind},
         {"context_length", p.context_length},
         {"swa_window", p.swa_window},
         {"top_k", p.top_k ? json(p.top_k) : json("full")},
         {"mixture", p.mixture},
         {"probe_injection", p.probe_injection},
         {"effective_span", p.effective_span},
         {"steps", p.steps},
         {"batch_size", p.batch_size},
         {"lr",
          {{"peak", p.lr.peak},
           {"warmup_steps", p.lr.warmup_steps},
           {"schedule", p.lr.kind},
           {"min_ratio", p.lr.min_ratio}}},
         {"eval_every", p.eval_every},
         {"log_every", p.log_every},
         {"checkpoint_every", p.checkpoint_every}};
  if (p.completion) {
    j["completion"] = {{"threshold", p.completion->threshold},
                       {"probe_length", p.completion->probe_length},
                       {"samples", p.completion->samples},
                       {"depths", p.completion->depths}};
  }
  return j;
}

inline json to_json(const TrainConfig& c) {
  json phases = json::array();
  for (const auto& p : c.phases) phases.push_back(to_json(p));
  return json{{"schema", kTrainSchema},
              {"seed", c.seed},
              {"precision", c.precision},
              {"model", to_json(c.model)},
              {"warmup_strategy", c.warmup_strategy},
              {"optimizer",
               {{"beta1", c.optimizer.beta1},
                {"beta2", c.optimizer.beta2},
                {"weight_decay", c.optimizer.weight_decay},
                {"eps", c.optimizer.eps},
                {"clip_norm", c.optimizer.clip_norm}}},
              {"phases", phases}};
}

inline PhaseSpec phase_from_json(const json& j, const std::string& path, const ModelConfig& model) {
  JsonReader r(j, path);
  PhaseSpec p;
  auto fail = [&](const std::string& key, const std::string& why) {
    throw ConfigError("invalid field '" + r.field(key) + "': " + why);
  };
  p.name = r.required<std::string>("name");
  p.kind = r.optional<std::string>("kind", "pretrain");
  if (p.kind != "warmup" && p.kind != "pretrain" && p.kind != "midtrain") fail("kind", "expected warmup, pretrain or midtrain");
  p.context_length = r.required<std::size_t>("context_length");
  p.swa_window = r.required<std::size_t>("swa_window");
  const json& k = r.raw("top_k");
  if (k.is_string() && k.get<std::string>() == "full") {
    p.top_k = 0;
  } else if (k.is_number_unsigned() && k.get<std::size_t>() > 0) {
    p.top_k = k.get<std::size_t>();
  } else {
    fail("top_k", "expected a positive integer or \"full\"");
  }
  p.mixture = r.optional<std::map<std::string, double>>("mixture", {{"lm", 1.0}});
  double total = 0.0;
  for (const auto& [task, w] : p.mixture) {
    data::parse_task(task);
    if (w < 0) fail("mixture", "weights must be >= 0");
    total += w;
  }
  if (total <= 0) fail("mixture", "needs a positive total weight");
  p.probe_injection = r.optional<double>("probe_injection", 0.01);
  if (p.probe_injection < 0 || p.probe_injection > 1) fail("probe_injection", "must be in [0, 1]");
  p.effective_span = r.optional<std::size_t>("effective_span", 0);
  p.steps = r.required<std::size_t>("steps");
  p.batch_size = r.optional<std::size_t>("batch_size", 1);
  if (p.batch_size == 0) fail("batch_size", "must be >= 1");
  {
    JsonReader lr(r.raw("lr"), r.field("lr"));
    p.lr.peak = lr.required<double>("peak");
    p.lr.warmup_steps = lr.optional<std::size_t>("warmup_steps", 0);
    p.lr.kind = lr.optional<std::string>("schedule", "constant");
    p.lr.min_ratio = lr.optional<double>("min_ratio", 0.1);
    lr.reject_unknown();
    if (p.lr.kind != "constant" && p.lr.kind != "cosine") {
      throw ConfigError("invalid field '" + lr.field("schedule") + "': expected constant or cosine");
    }
    p.lr.total_steps = p.steps;
  }
  p.eval_every = r.optional<std::size_t>("eval_every", 0);
  p.log_every = r.optional<std::size_t>("log_every", 10);
  p.checkpoint_every = r.optional<std::size_t>("checkpoint_every", 0);
  if (r.has("completion")) {
    JsonReader c(r.raw("completion"), r.field("completion"));
    CompletionSpec cs;
    cs.threshold = c.optional<double>("threshold", 0.95);
    cs.probe_length = c.required<std::size_t>("probe_length");
    cs.samples = c.optional<std::size_t>("samples", 32);
    cs.depths = c.optional<std::vector<double>>("depths", cs.depths);
    c.reject_unknown();
    if (cs.probe_length < 4 * p.swa_window) {
      throw ConfigError("invalid field '" + c.field("probe_length") + "': probes must be at least 4x the SWA window (" +
                        std::to_string(4 * p.swa_window) + ")");
    }
    if (cs.probe_length < data::min_length(data::Task::sniah)) {
      throw ConfigError("invalid field '" + c.field("probe_length") + "': shorter than one S-NIAH probe");
    }
    if (p.eval_every == 0) fail("eval_every", "a completion criterion needs eval_every >= 1");
    p.completion = cs;
  }
  r.reject_unknown();
  if (p.context_length < 3) fail("context_length", "must be >= 3");
  if (p.swa_window == 0) fail("swa_window", "must be >= 1");
  for (const auto& [task, w] : p.mixture) {
    const auto t = data::parse_task(task);
    if (w > 0 && p.context_length < data::min_length(t)) {
      fail("context_length", "too short for task " + task + " (needs " + std::to_string(data::min_length(t)) + ")");
    }
  }
  (void)model;
  return p;
}

inline TrainConfig train_config_from_json(const json& j) {
  JsonReader r(j, "");
  const auto schema = r.required<std::string>("schema");
  if (schema != kTrainSchema) {
    throw ConfigError("invalid field 'schema': expected \"" + std::string(kTrainSchema) + "\", got \"" + schema + "\"");
  }
  TrainConfig c;
  c.seed = r.required<std::uint64_t>("seed");
  c.precision = r.optional<int>("precision", 32);
  if (c.precision != 32 && c.precision != 64) throw ConfigError("invalid field 'precision': expected 32 or 64");
  c.model = model_config_from_json(r.raw("model"), "model");
  c.warmup_strategy = r.optional<std::string>("warmup_strategy", "short-swa-full-hsa");
  if (c.warmup_strategy != "short-swa-full-hsa" && c.warmup_strategy != "self-copy") {
    throw ConfigError("invalid field 'warmup_strategy': expected short-swa-full-hsa or self-copy");
  }
  if (r.has("optimizer")) {
    JsonReader o(r.raw("optimizer"), "optimizer");
    c.optimizer.beta1 = o.optional<double>("beta1", 0.9);
    c.optimizer.beta2 = o.optional<double>("beta2", 0.95);
    c.optimizer.weight_decay = o.optional<double>("weight_decay", 0.01);
    c.optimizer.eps = o.optional<double>("eps", 1e-8);
    c.optimizer.clip_norm = o.optional<double>("clip_norm", 1.0);
    o.reject_unknown();
  }
  const json& ph = r.raw("phases");
  if (!ph.is_array() || ph.empty()) throw ConfigError("invalid field 'phases': expected a nonempty array");
  for (std::size_t i = 0; i < ph.size(); ++i) {
    c.phases.push_back(phase_from_json(ph[i], "phases[" + std::to_string(i) + "]", c.model));
  }
  r.reject_unknown();
  return c;
}

inline std::string train_config_hash(const TrainConfig& c) { return hex64(fnv1a64(to_json(c).dump())); }

/// Named starting points. The desk ladder trains at 2048 tokens: a short
/// 128-token window with every chunk retrieved, then a 512-token window with
/// top-8 retrieval over 32-token chunks.
inline TrainConfig preset(const std::string& name) {
  TrainConfig c;
  c.seed = 1;
  auto phase = [](std::string pname, std::string kind, std::size_t ctx, std::size_t window, std::size_t k,
                  std::size_t steps, double lr) {
    PhaseSpec p;
    p.name = std::move(pname);
    p.kind = std::move(kind);
    p.context_length = ctx;
    p.swa_window = window;
    p.top_k = k;
    p.steps = steps;
    p.lr.peak = lr;
    p.lr.total_steps = steps;
    return p;
  };
  const std::map<std::string, double> mix{{"lm", 0.2}, {"sniah", 0.4}, {"mqniah", 0.25}, {"vartrack", 0.15}};
  if (name == "micro") {
    c.model = ModelConfig{};
    c.model.d_model = 32;
    c.model.heads = 2;
    c.model.kv_heads = 2;
    c.model.head_dim = 16;
    c.model.chunk_size = 16;
    c.model.top_k = 2;
    c.model.swa_window = 32;
    c.model.hsa_layers = {3};
    c.model.encoder_depth = 1;
    c.model.ffn_width = 64;
    auto w = phase("warmup", "warmup", 256, 32, 0, 12, 3e-3);
    w.mixture = {{"lm", 0.5}, {"sniah", 0.5}};
    w.eval_every = 6;
    w.log_every = 2;
    w.completion = CompletionSpec{0.95, 256, 4, {0.0, 0.5, 1.0}};
    auto p = phase("pretrain", "pretrain", 256, 64, 2, 8, 3e-3);
    p.mixture = w.mixture;
    p.log_every = 2;
    c.phases = {w, p};
    return c;
  }
  c.model = ModelConfig{};
  c.model.d_model = 256;
  c.model.n_layers = 6;
  c.model.heads = 8;
  c.model.kv_heads = 8;
  c.model.head_dim = 32;
  c.model.chunk_size = 32;
  c.model.top_k = 8;
  c.model.swa_window = 512;
  c.model.hsa_layers = ModelConfig::default_hsa_layers(6);
  c.model.encoder_depth = 2;
  c.model.ffn_width = 512;
  auto warm = phase("warmup", "warmup", 2048, 128, 0, 1500, 1e-3);
  warm.mixture = mix;
  warm.lr.warmup_steps = 100;
  warm.eval_every = 100;
  warm.completion = CompletionSpec{0.95, 1024, 32, {0.0, 0.25, 0.5, 0.75, 1.0}};
  warm.checkpoint_every = 100;
  auto pre = phase("pretrain", "pretrain", 2048, 512, 8, 1500, 1e-3);
  pre.mixture = mix;
  pre.checkpoint_every = 100;
  pre.eval_every = 250;
  if (name == "desk-ladder") {
    c.phases = {warm, pre};
  } else if (name == "desk-no-warmup") {
    pre.steps += warm.steps;
    pre.lr.total_steps = pre.steps;
    pre.lr.warmup_steps = 100;
    c.phases = {pre};
  } else if (name == "desk-midtrain") {
    auto mid = phase("midtrain", "midtrain", 4096, 512, 0, 500, 5e-4);
    mid.mixture = mix;
    mid.checkpoint_every = 100;
    c.phases = {warm, pre, mid};
  } else {
    throw ConfigError("unknown preset '" + name + "' (expected micro, desk-ladder, desk-no-warmup or desk-midtrain)");
  }
  return c;
}

}  // namespace hsa_lab
