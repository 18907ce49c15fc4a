#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "hsa_lab/trainer/trainer.hpp"

using namespace hsa_lab;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("hsa_lab_trainer_" + name);
  std::filesystem::remove_all(p);
  return p;
}

TrainConfig small_config(int precision = 32) {
  auto c = preset("micro");
  c.precision = precision;
  c.phases[0].steps = 6;
  c.phases[0].eval_every = 3;
  c.phases[0].checkpoint_every = 2;
  c.phases[0].completion->samples = 2;
  c.phases[1].steps = 4;
  return train_config_from_json(to_json(c));  // re-derives schedule lengths
}

template <class T>
std::vector<T> flat_params(const HsaModel<T>& m) {
  std::vector<T> out;
  for (const auto& p : m.params().items()) out.insert(out.end(), p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

std::string error_of(const json& j) {
  try {
    train_config_from_json(j);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(TrainStep, ZeroLearningRateLeavesParametersUnchanged) {
  auto model = HsaModel<float>::initialized(preset("micro").model, 3);
  AdamW<float> opt(model.params());
  data::Rng rng(5);
  std::vector<data::Sample> batch{data::gen_lm(96, rng), data::gen_lm(96, rng)};
  const auto before = flat_params(model);
  const auto r = train_step(model, batch, opt, 0.0);
  EXPECT_GT(r.grad_norm, 0.0);
  EXPECT_EQ(flat_params(model), before);
}

TEST(TrainStep, RejectsMixedLengths) {
  auto model = HsaModel<float>::initialized(preset("micro").model, 3);
  AdamW<float> opt(model.params());
  data::Rng rng(5);
  std::vector<data::Sample> batch{data::gen_lm(64, rng), data::gen_lm(65, rng)};
  EXPECT_THROW(train_step(model, batch, opt, 1e-3), ShapeError);
}

TEST(TrainStep, NonFiniteLossAbortsWithBatchDescription) {
  auto model = HsaModel<float>::initialized(preset("micro").model, 3);
  model.params().at("final_norm.gain").mutable_data()[0] = NAN;
  AdamW<float> opt(model.params());
  data::Rng rng(5);
  std::vector<data::Sample> batch{data::gen_sniah(200, 0.5, rng)};
  try {
    train_step(model, batch, opt, 1e-3);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("\"task\":\"sniah\""), std::string::npos) << e.what();
  }
}

TEST(Clip, RescalesOnlyAboveThreshold) {
  ParameterSet<double> ps;
  ps.add("a", {2});
  ps.add("b", {1});
  auto set = [&](double x, double y, double z) {
    ps.at("a").mutable_grad()[0] = x;
    ps.at("a").mutable_grad()[1] = y;
    ps.at("b").mutable_grad()[0] = z;
  };
  set(3, 4, 12);  // norm 13
  auto r = clip_grad_norm(ps, 1.0);
  EXPECT_DOUBLE_EQ(r.pre_norm, 13.0);
  EXPECT_NEAR(r.post_norm, 1.0, 1e-12);
  EXPECT_NEAR(ps.at("b").grad()[0], 12.0 / 13.0, 1e-15);
  set(0.3, 0.4, 0.0);
  r = clip_grad_norm(ps, 1.0);
  EXPECT_DOUBLE_EQ(r.pre_norm, 0.5);
  EXPECT_DOUBLE_EQ(r.post_norm, 0.5);
  EXPECT_DOUBLE_EQ(ps.at("a").grad()[0], 0.3);
}

TEST(AdamW, MatchesClosedFormOnScalar) {
  ParameterSet<double> ps;
  ps.add("w", {1}).mutable_data()[0] = 0.7;
  AdamWConfig cfg;
  AdamW<double> opt(ps, cfg);
  const std::vector<double> grads{0.5, -1.5, 2.0, 0.01, -0.3};
  const double lr = 0.05;
  long double w = 0.7L, m = 0, v = 0;
  for (std::size_t t = 1; t <= grads.size(); ++t) {
    const long double g = grads[t - 1];
    ps.at("w").mutable_grad()[0] = grads[t - 1];
    opt.step(ps, lr);
    m = 0.9L * m + 0.1L * g;
    v = 0.95L * v + 0.05L * g * g;
    const long double mhat = m / (1 - std::pow(0.9L, t)), vhat = v / (1 - std::pow(0.95L, t));
    w -= lr * (mhat / (std::sqrt(vhat) + 1e-8L) + 0.01L * w);
    EXPECT_NEAR(ps.at("w").data()[0], static_cast<double>(w), 1e-12) << "step " << t;
  }
}

TEST(AdamW, MissingGradientActsAsZero) {
  ParameterSet<double> ps;
  ps.add("w", {1}).mutable_data()[0] = 2.0;
  AdamW<double> opt(ps);
  opt.step(ps, 0.1);
  EXPECT_DOUBLE_EQ(ps.at("w").data()[0], 2.0 - 0.1 * 0.01 * 2.0);
}

TEST(LrSchedule, WarmupThenCosine) {
  LrSchedule s{1.0, 10, "cosine", 110, 0.1};
  EXPECT_DOUBLE_EQ(s.at(0), 0.1);
  EXPECT_DOUBLE_EQ(s.at(9), 1.0);
  EXPECT_DOUBLE_EQ(s.at(10), 1.0);
  EXPECT_NEAR(s.at(60), 0.55, 1e-12);
  EXPECT_NEAR(s.at(110), 0.1, 1e-12);
  EXPECT_NEAR(s.at(500), 0.1, 1e-12);
  LrSchedule c{2e-3};
  EXPECT_DOUBLE_EQ(c.at(1000), 2e-3);
}

TEST(DetectWarmupDone, NeedsTwoConsecutiveEvaluations) {
  EXPECT_FALSE(detect_warmup_done({}, 0.95));
  EXPECT_FALSE(detect_warmup_done({0.99}, 0.95));
  EXPECT_TRUE(detect_warmup_done({0.96, 0.97}, 0.95));
  EXPECT_FALSE(detect_warmup_done({0.96, 0.90, 0.97}, 0.95));
  EXPECT_TRUE(detect_warmup_done({0.2, 0.95, 0.95}, 0.95));
  EXPECT_FALSE(detect_warmup_done({0.97, 0.94}, 0.95));
}

TEST(Knobs, WindowAndTopKNeverChangeParameters) {
  auto cfg = preset("desk-ladder").model;
  const auto base = make_parameters<float>(cfg);
  for (std::size_t w : {64, 128, 512, 4096}) {
    for (std::size_t k : {1, 8, 64}) {
      auto c = cfg;
      c.swa_window = w;
      c.top_k = k;
      const auto ps = make_parameters<float>(c);
      ASSERT_EQ(ps.size(), base.size());
      for (std::size_t i = 0; i < ps.size(); ++i) {
        EXPECT_EQ(ps.items()[i].name, base.items()[i].name);
        EXPECT_EQ(ps.items()[i].tensor.shape(), base.items()[i].tensor.shape());
      }
      EXPECT_EQ(architecture_hash(c), architecture_hash(cfg));
    }
  }
}

TEST(SelfCopy, TinyModelOverfitsAndCopiesGreedily) {
  ModelConfig c = preset("micro").model;
  auto model = HsaModel<float>::initialized(c, 11);
  AdamW<float> opt(model.params(), AdamWConfig{0.9, 0.95, 0.0, 1e-8, 1.0});
  data::Rng rng(2);
  const auto s = data::gen_selfcopy(41, rng);
  double loss = 0;
  for (int step = 0; step < 200; ++step) loss = train_step(model, {s}, opt, 1e-2).loss;
  EXPECT_LT(loss, 0.1);
  const auto copy = greedy_decode(model, std::span<const std::int32_t>(s.tokens.data(), s.meta.answer_start),
                                  s.meta.answer_length);
  EXPECT_EQ(copy, s.answer_tokens());
}

template <class T>
void check_resume_bitwise(int precision) {
  const auto cfg = small_config(precision);
  const auto a = scratch("full" + std::to_string(precision));
  const auto b = scratch("split" + std::to_string(precision));
  Trainer<T> full(cfg, a);
  const auto sa = full.run();
  ASSERT_TRUE(sa.finished);
  {
    Trainer<T> first(cfg, b);
    const auto s1 = first.run(5);
    EXPECT_FALSE(s1.finished);
  }
  Trainer<T> second(cfg, b);
  second.resume();
  EXPECT_EQ(second.phase_index(), 0u);
  EXPECT_EQ(second.phase_step(), 5u);
  const auto sb = second.run();
  ASSERT_TRUE(sb.finished);
  EXPECT_EQ(flat_params(full.model()), flat_params(second.model()));
  EXPECT_EQ(sa.last_loss, sb.last_loss);
  ASSERT_EQ(sa.phases.size(), sb.phases.size());
  for (std::size_t i = 0; i < sa.phases.size(); ++i) {
    EXPECT_EQ(sa.phases[i].steps_run, sb.phases[i].steps_run);
    EXPECT_EQ(sa.phases[i].completed_at, sb.phases[i].completed_at);
  }
  EXPECT_TRUE(std::filesystem::exists(b / "checkpoints" / "warmup.ckpt"));
  EXPECT_TRUE(std::filesystem::exists(b / "checkpoints" / "pretrain.ckpt"));
}

TEST(Trainer, ResumeIsBitwiseIdenticalFloat) { check_resume_bitwise<float>(32); }
TEST(Trainer, ResumeIsBitwiseIdenticalDouble) { check_resume_bitwise<double>(64); }

TEST(Trainer, CompletionCriterionEndsWarmupEarly) {
  auto cfg = small_config();
  cfg.phases[0].steps = 20;
  cfg.phases[0].eval_every = 2;
  cfg.phases[0].completion->threshold = 0.0;  // any accuracy counts
  Trainer<float> t(cfg, scratch("early"));
  const auto s = t.run();
  ASSERT_TRUE(s.finished);
  ASSERT_TRUE(s.phases[0].completed_at.has_value());
  EXPECT_EQ(*s.phases[0].completed_at, 4u);
  EXPECT_EQ(s.phases[0].steps_run, 4u);
  EXPECT_FALSE(s.phases[0].warning);
}

TEST(Trainer, UnmetCompletionRaisesWarning) {
  auto cfg = small_config();
  cfg.phases[0].completion->threshold = 1.5;
  const auto dir = scratch("warn");
  Trainer<float> t(cfg, dir);
  const auto s = t.run();
  EXPECT_TRUE(s.phases[0].warning);
  EXPECT_EQ(s.phases[0].steps_run, 6u);
  EXPECT_FALSE(s.phases[1].warning);  // no criterion configured
  std::ifstream in(dir / "metrics.jsonl");
  std::string line;
  bool saw_sweep = false, saw_warning = false;
  while (std::getline(in, line)) {
    const auto j = json::parse(line);
    if (j["event"] == "probe") saw_sweep = j["would_stop"].size() == kThresholdSweep.size();
    if (j["event"] == "phase_end" && j["phase"] == "warmup") saw_warning = j["warning"].get<bool>();
  }
  EXPECT_TRUE(saw_sweep);
  EXPECT_TRUE(saw_warning);
}

TEST(Trainer, ResumeWithoutCheckpointFails) {
  Trainer<float> t(small_config(), scratch("none"));
  try {
    t.resume();
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("no checkpoint found"), std::string::npos);
  }
}

TEST(Trainer, ResumeRefusesDifferentArchitecture) {
  const auto dir = scratch("arch");
  {
    Trainer<float> t(small_config(), dir);
    t.run(1);
  }
  auto other = small_config();
  other.model.ffn_width = 48;
  Trainer<float> t(other, dir);
  EXPECT_THROW(t.resume(), ConfigError);
}

TEST(Trainer, PhaseCheckpointCarriesPhaseKnobs) {
  const auto dir = scratch("knobs");
  const auto cfg = small_config();
  Trainer<float> t(cfg, dir);
  t.run();
  const auto warm = load_checkpoint(dir / "checkpoints" / "warmup.ckpt");
  EXPECT_EQ(warm.config.swa_window, 32u);
  EXPECT_EQ(warm.config.top_k, 16u);  // 256 / 16: every chunk
  const auto pre = load_model<float>(dir / "checkpoints" / "pretrain.ckpt");
  EXPECT_EQ(pre.config().swa_window, 64u);
  EXPECT_EQ(pre.config().top_k, 2u);
  EXPECT_EQ(flat_params(pre), flat_params(t.model()));
}

TEST(Mixture, SelfCopyStrategyOnlyReplacesWarmupData) {
  auto cfg = small_config();
  cfg.warmup_strategy = "self-copy";
  EXPECT_EQ(cfg.mixture_for(cfg.phases[0]), (std::map<std::string, double>{{"selfcopy", 1.0}}));
  EXPECT_EQ(cfg.mixture_for(cfg.phases[1]), cfg.phases[1].mixture);
  const auto s = draw_sample(cfg, cfg.phases[0], 42);
  EXPECT_EQ(s.size(), cfg.phases[0].context_length);
  EXPECT_TRUE(s.meta.task == "selfcopy" || s.meta.probe);
}

TEST(Mixture, SamplesHaveContextLengthAndAreDeterministic) {
  const auto cfg = preset("desk-ladder");
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto a = draw_sample(cfg, cfg.phases[0], seed);
    const auto b = draw_sample(cfg, cfg.phases[0], seed);
    EXPECT_EQ(a.size(), 2048u);
    EXPECT_EQ(a.tokens, b.tokens);
    EXPECT_TRUE(data::validate(a).empty()) << a.meta.task;
  }
}

TEST(TrainConfig, PresetsRoundTrip) {
  for (const char* name : {"micro", "desk-ladder", "desk-no-warmup", "desk-midtrain"}) {
    const auto j = to_json(preset(name));
    EXPECT_EQ(to_json(train_config_from_json(j)), j) << name;
  }
  EXPECT_THROW(preset("nope"), ConfigError);
}

TEST(TrainConfig, ErrorsNameTheOffendingField) {
  const json base = to_json(preset("micro"));
  auto j = base;
  j["phases"][1]["swa_window"] = "wide";
  EXPECT_NE(error_of(j).find("phases[1].swa_window"), std::string::npos) << error_of(j);
  j = base;
  j["phases"][0]["bogus"] = 1;
  EXPECT_NE(error_of(j).find("phases[0].bogus"), std::string::npos);
  j = base;
  j.erase("seed");
  EXPECT_NE(error_of(j).find("'seed'"), std::string::npos);
  j = base;
  j["phases"][0]["completion"]["probe_length"] = 100;
  EXPECT_NE(error_of(j).find("phases[0].completion.probe_length"), std::string::npos);
  j = base;
  j["phases"][0]["top_k"] = "most";
  EXPECT_NE(error_of(j).find("phases[0].top_k"), std::string::npos);
  j = base;
  j["model"]["heads"] = 3;
  EXPECT_NE(error_of(j).find("kv_heads"), std::string::npos);
  j = base;
  j["phases"][0]["lr"]["schedule"] = "step";
  EXPECT_NE(error_of(j).find("phases[0].lr.schedule"), std::string::npos);
  j = base;
  j["schema"] = "other/1";
  EXPECT_NE(error_of(j).find("schema"), std::string::npos);
}
