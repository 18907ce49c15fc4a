#pragma once

// Phase-by-phase training with probe-based warm-up completion, periodic
// checkpoints and bitwise-reproducible resume. Every sample is derived from
// (seed, phase, step, slot), so a resumed run sees exactly the batches an
// uninterrupted one would.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "hsa_lab/evalharness/niah.hpp"
#include "hsa_lab/model/checkpoint.hpp"
#include "hsa_lab/trainer/optimizer.hpp"
#include "hsa_lab/trainer/phase.hpp"

namespace hsa_lab {

struct StepResult {
  double loss = 0.0;
  double grad_norm = 0.0;  // before clipping
  double clipped_norm = 0.0;
  double lr = 0.0;
};

inline std::string batch_description(const std::vector<data::Sample>& batch) {
  json j = json::array();
  for (const auto& s : batch) {
    j.push_back({{"task", s.meta.task}, {"length", s.size()}, {"probe", s.meta.probe}, {"keys", s.meta.keys}});
  }
  return j.dump();
}

/// One optimizer step on a batch of equal-length samples. The batch loss is
/// the mean of per-sample losses.
template <std::floating_point T>
StepResult train_step(HsaModel<T>& model, const std::vector<data::Sample>& batch, AdamW<T>& opt, double lr) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  for (const auto& s : batch) {
    if (s.size() != batch.front().size()) throw ShapeError("train_step: samples in a batch must share one length");
  }
  auto& ps = model.params();
  ps.zero_grad();
  StepResult r;
  r.lr = lr;
  const T inv = T(1) / static_cast<T>(batch.size());
  for (const auto& s : batch) {
    auto loss = model.loss(s.tokens, s.loss_mask);
    const double v = static_cast<double>(loss.item());
    if (!std::isfinite(v)) throw NumericError("non-finite loss " + std::to_string(v) + " on batch " + batch_description(batch));
    r.loss += v / static_cast<double>(batch.size());
    scale(loss, inv).backward();
  }
  const auto clip = clip_grad_norm(ps, opt.config().clip_norm);
  if (!std::isfinite(clip.pre_norm)) {
    throw NumericError("non-finite gradient norm on batch " + batch_description(batch));
  }
  r.grad_norm = clip.pre_norm;
  r.clipped_norm = clip.post_norm;
  opt.step(ps, lr);
  return r;
}

/// Warm-up is complete once the two most recent probe accuracies both reach
/// the threshold.
inline bool detect_warmup_done(const std::vector<double>& accuracies, double threshold = 0.95) {
  const std::size_t n = accuracies.size();
  return n >= 2 && accuracies[n - 1] >= threshold && accuracies[n - 2] >= threshold;
}

/// Thresholds whose stopping step is logged next to the configured one.
inline const std::vector<double> kThresholdSweep{0.8, 0.9, 0.95, 0.99};

struct PhaseOutcome {
  std::string name;
  std::size_t steps_run = 0;
  std::optional<std::size_t> completed_at;  // step at which the completion criterion fired
  bool warning = false;                     // a completion criterion existed but never fired
};

struct TrainSummary {
  std::vector<PhaseOutcome> phases;
  bool finished = false;
  double last_loss = NAN;
};

/// Mixture sampling for one batch slot.
inline data::Sample draw_sample(const TrainConfig& cfg, const PhaseSpec& p, std::uint64_t seed) {
  data::Rng rng(seed);
  const auto mix = cfg.mixture_for(p);
  std::vector<std::string> names;
  std::vector<double> weights;
  for (const auto& [k, w] : mix) {
    names.push_back(k);
    weights.push_back(w);
  }
  std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
  const auto task = data::parse_task(names[pick(rng)]);
  data::Sample s = task == data::Task::lm
                       ? data::gen_lm(p.context_length, rng, data::LmOptions{p.effective_span})
                       : task == data::Task::selfcopy ? data::gen_selfcopy(p.context_length, rng)
                                                      : data::generate(task, p.context_length, rng);
  return data::maybe_probe(std::move(s), p.probe_injection, rng);
}

template <std::floating_point T>
class Trainer {
 public:
  using Log = std::function<void(const std::string&)>;

  Trainer(TrainConfig cfg, std::filesystem::path out_dir, Log log = {})
      : cfg_(std::move(cfg)),
        out_(std::move(out_dir)),
        log_(std::move(log)),
        model_(HsaModel<T>::initialized(cfg_.model, cfg_.seed)),
        opt_(model_.params(), cfg_.optimizer) {
    if ((sizeof(T) == 8) != (cfg_.precision == 64)) throw ConfigError("invalid field 'precision': trainer type differs");
    history_.resize(cfg_.phases.size());
    outcomes_.resize(cfg_.phases.size());
    for (std::size_t i = 0; i < cfg_.phases.size(); ++i) outcomes_[i].name = cfg_.phases[i].name;
  }

  const HsaModel<T>& model() const { return model_; }
  HsaModel<T>& model() { return model_; }
  const TrainConfig& config() const { return cfg_; }
  std::size_t phase_index() const { return phase_; }
  std::size_t phase_step() const { return step_; }
  std::filesystem::path latest_path() const { return out_ / "checkpoints" / "latest.ckpt"; }
  std::filesystem::path phase_checkpoint(std::size_t i) const {
    return out_ / "checkpoints" / (cfg_.phases[i].name + ".ckpt");
  }

  /// Restores model, optimizer and schedule position from latest.ckpt.
  void resume() {
    const auto path = latest_path();
    if (!std::filesystem::exists(path)) throw IoError("no checkpoint found at " + path.string());
    const auto ck = load_checkpoint(path);
    if (architecture_hash(ck.config) != architecture_hash(cfg_.model)) {
      throw ConfigError("checkpoint architecture " + architecture_hash(ck.config) + " does not match config " +
                        architecture_hash(cfg_.model));
    }
    const json& m = ck.meta;
    if (m.at("train_config_hash").get<std::string>() != train_config_hash(cfg_)) {
      throw ConfigError("checkpoint was written by a different training config");
    }
    restore_parameters(model_.params(), ck);
    opt_.restore(model_.params(), ck, m.at("optimizer_step").get<std::size_t>());
    phase_ = m.at("phase_index").get<std::size_t>();
    step_ = m.at("phase_step").get<std::size_t>();
    history_ = m.at("probe_history").get<std::vector<std::vector<double>>>();
    for (std::size_t i = 0; i < outcomes_.size(); ++i) {
      const json& o = m.at("outcomes").at(i);
      outcomes_[i].steps_run = o.at("steps_run").get<std::size_t>();
      outcomes_[i].warning = o.at("warning").get<bool>();
      if (!o.at("completed_at").is_null()) outcomes_[i].completed_at = o.at("completed_at").get<std::size_t>();
    }
    say("resumed at phase " + cfg_.phases[std::min(phase_, cfg_.phases.size() - 1)].name + " step " +
        std::to_string(step_));
  }

  /// Trains until every phase is done, or until `max_steps` more steps have
  /// run (0 = no limit). latest.ckpt is written on every exit.
  TrainSummary run(std::size_t max_steps = 0) {
    std::filesystem::create_directories(out_ / "checkpoints");
    std::ofstream metrics(out_ / "metrics.jsonl", std::ios::app);
    if (!metrics) throw IoError("cannot write " + (out_ / "metrics.jsonl").string());
    TrainSummary sum;
    std::size_t ran = 0;
    const auto t0 = std::chrono::steady_clock::now();
    while (phase_ < cfg_.phases.size()) {
      const PhaseSpec& p = cfg_.phases[phase_];
      apply_knobs(p);
      if (step_ >= p.steps || outcomes_[phase_].completed_at) {
        finish_phase(metrics);
        continue;
      }
      if (max_steps && ran >= max_steps) break;

      std::vector<data::Sample> batch;
      for (std::size_t b = 0; b < p.batch_size; ++b) {
        batch.push_back(draw_sample(cfg_, p, data::derive_seed(cfg_.seed, phase_ + 1, step_ * p.batch_size + b)));
      }
      const auto r = train_step(model_, batch, opt_, p.lr.at(step_));
      sum.last_loss = r.loss;
      ++step_;
      ++ran;
      outcomes_[phase_].steps_run = step_;
      if (p.log_every && (step_ % p.log_every == 0 || step_ == 1)) {
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        json row{{"event", "step"}, {"phase", p.name},           {"step", step_},
                 {"loss", r.loss},  {"grad_norm", r.grad_norm},  {"clipped_norm", r.clipped_norm},
                 {"lr", r.lr},      {"tokens", p.batch_size * p.context_length}, {"seconds", secs}};
        metrics << row.dump() << "\n" << std::flush;
        say(p.name + " step " + std::to_string(step_) + "/" + std::to_string(p.steps) + " loss " +
            std::to_string(r.loss) + " |g| " + std::to_string(r.grad_norm));
      }
      if (p.eval_every && step_ % p.eval_every == 0) probe(p, metrics);
      if (p.checkpoint_every && step_ % p.checkpoint_every == 0) save(latest_path());
    }
    sum.finished = phase_ >= cfg_.phases.size();
    sum.phases = outcomes_;
    save(latest_path());
    return sum;
  }

  /// Exact-match S-NIAH accuracy on the phase's fixed probe set.
  double probe_accuracy(const PhaseSpec& p) const {
    const auto& c = *p.completion;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < c.samples; ++i) {
      data::Rng rng(data::derive_seed(cfg_.seed ^ 0x9e3779b97f4a7c15ull, phase_ + 1, i));
      const auto s = data::gen_sniah(c.probe_length, c.depths[i % c.depths.size()], rng);
      correct += score_sample(model_, s).correct;
    }
    return static_cast<double>(correct) / static_cast<double>(c.samples);
  }

 private:
  void say(const std::string& s) const {
    if (log_) log_(s);
  }

  void apply_knobs(const PhaseSpec& p) {
    model_.set_swa_window(p.swa_window);
    model_.set_top_k(p.resolved_top_k(cfg_.model.chunk_size));
  }

  void probe(const PhaseSpec& p, std::ofstream& metrics) {
    if (!p.completion) return;
    const double acc = probe_accuracy(p);
    auto& h = history_[phase_];
    h.push_back(acc);
    json would_stop = json::object();
    for (double thr : kThresholdSweep) would_stop[std::to_string(thr).substr(0, 4)] = detect_warmup_done(h, thr);
    metrics << json{{"event", "probe"},         {"phase", p.name}, {"step", step_}, {"accuracy", acc},
                    {"probe_length", p.completion->probe_length}, {"would_stop", would_stop}}
                   .dump()
            << "\n"
            << std::flush;
    say(p.name + " probe accuracy " + std::to_string(acc) + " at step " + std::to_string(step_));
    if (detect_warmup_done(h, p.completion->threshold)) outcomes_[phase_].completed_at = step_;
  }

  void finish_phase(std::ofstream& metrics) {
    const PhaseSpec& p = cfg_.phases[phase_];
    auto& o = outcomes_[phase_];
    o.warning = p.completion.has_value() && !o.completed_at;
    json row{{"event", "phase_end"}, {"phase", p.name}, {"steps_run", o.steps_run},
             {"completed_at", o.completed_at ? json(*o.completed_at) : json(nullptr)}, {"warning", o.warning}};
    metrics << row.dump() << "\n" << std::flush;
    if (o.warning) {
      say("warning: phase " + p.name + " never met its completion criterion; ran the full " +
          std::to_string(p.steps) + " steps");
    }
    save(phase_checkpoint(phase_));
    ++phase_;
    step_ = 0;
  }

  void save(const std::filesystem::path& path) const {
    Checkpoint ck;
    ck.config = model_.config();
    json outcomes = json::array();
    for (const auto& o : outcomes_) {
      outcomes.push_back({{"name", o.name},
                          {"steps_run", o.steps_run},
                          {"completed_at", o.completed_at ? json(*o.completed_at) : json(nullptr)},
                          {"warning", o.warning}});
    }
    ck.meta = {{"phase_index", phase_},
               {"phase_step", step_},
               {"optimizer_step", opt_.steps()},
               {"probe_history", history_},
               {"outcomes", outcomes},
               {"train_config", to_json(cfg_)},
               {"train_config_hash", train_config_hash(cfg_)},
               {"architecture_hash", architecture_hash(cfg_.model)},
               {"train_context", cfg_.train_context()}};
    ck.blobs = blobs_from(model_.params());
    for (auto& b : opt_.blobs(model_.params())) ck.blobs.push_back(std::move(b));
    save_checkpoint(path, ck);
  }

  TrainConfig cfg_;
  std::filesystem::path out_;
  Log log_;
  HsaModel<T> model_;
  AdamW<T> opt_;
  std::size_t phase_ = 0;
  std::size_t step_ = 0;
  std::vector<std::vector<double>> history_;
  std::vector<PhaseOutcome> outcomes_;
};

/// Model weights from any checkpoint, with the stored window and top-k.
template <std::floating_point T>
HsaModel<T> load_model(const std::filesystem::path& path) {
  const auto ck = load_checkpoint(path);
  auto ps = make_parameters<T>(ck.config);
  restore_parameters(ps, ck);
  return HsaModel<T>(ck.config, std::move(ps));
}

}  // namespace hsa_lab
