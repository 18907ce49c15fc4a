#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "hsa_lab/model/checkpoint.hpp"
#include "hsa_lab/model/model.hpp"
#include "hsa_lab/numerics/gradcheck.hpp"
#include "test_util.hpp"

using namespace hsa_lab;

namespace {

ModelConfig micro_config() {
  ModelConfig c;
  c.vocab_size = 17;
  c.d_model = 16;
  c.n_layers = 4;
  c.heads = 2;
  c.kv_heads = 2;
  c.head_dim = 8;
  c.chunk_size = 16;
  c.top_k = 2;
  c.swa_window = 8;
  c.hsa_layers = {3, 4};
  c.encoder_depth = 2;
  c.ffn_width = 24;
  return c;
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.vocab_size = 17;
  c.d_model = 32;
  c.n_layers = 4;
  c.heads = 4;
  c.kv_heads = 2;
  c.head_dim = 8;
  c.chunk_size = 32;
  c.top_k = 2;
  c.swa_window = 16;
  c.hsa_layers = {3};
  c.ffn_width = 64;
  return c;
}

std::vector<std::int32_t> random_tokens(std::mt19937_64& rng, std::size_t n, std::size_t vocab) {
  std::uniform_int_distribution<int> u(0, static_cast<int>(vocab) - 1);
  std::vector<std::int32_t> t(n);
  for (auto& x : t) x = u(rng);
  return t;
}

// Makes all HSA-related weights larger so retrieval visibly matters.
template <class T>
void amplify_hsa(HsaModel<T>& m, double factor, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, factor);
  for (auto& p : m.params().items()) {
    if (p.name.find("hsa.") == std::string::npos && p.name.find("encoder.") == std::string::npos) continue;
    if (is_gain(p.name)) continue;
    for (auto& x : p.tensor.mutable_data()) x = static_cast<T>(nd(rng));
  }
}

// Replaces every weight with O(1)-scale noise (gains in [0.5, 1.5]) so no
// gradient is so small that finite-difference rounding dominates it.
template <class T>
void randomize_all(HsaModel<T>& m, double sd, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, sd);
  std::uniform_real_distribution<double> ug(0.5, 1.5);
  for (auto& p : m.params().items()) {
    for (auto& x : p.tensor.mutable_data()) x = static_cast<T>(is_gain(p.name) ? ug(rng) : nd(rng));
  }
}

}  // namespace

TEST(ModelConfig, ValidationNamesTheField) {
  auto c = micro_config();
  c.n_layers = 5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = micro_config();
  c.hsa_layers = {2};
  try {
    c.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("hsa_layers"), std::string::npos);
  }
  c = micro_config();
  c.head_dim = 6;
  EXPECT_THROW(c.validate(), ConfigError);

  json j = to_json(micro_config());
  EXPECT_EQ(model_config_from_json(j).d_model, 16u);
  j.erase("chunk_size");
  try {
    model_config_from_json(j);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("model.chunk_size"), std::string::npos);
  }
  json k = to_json(micro_config());
  k["chunk_sz"] = 3;
  EXPECT_THROW(model_config_from_json(k), ConfigError);
}

TEST(InitParams, DeterministicAndGainsAreOne) {
  auto cfg = micro_config();
  auto a = init_params<float>(cfg, 42);
  auto b = init_params<float>(cfg, 42);
  auto c = init_params<float>(cfg, 43);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto& pa = a.items()[i].tensor;
    const auto& pb = b.items()[i].tensor;
    EXPECT_EQ(std::memcmp(pa.data().data(), pb.data().data(), pa.size() * sizeof(float)), 0);
    if (is_gain(a.items()[i].name)) {
      for (float g : pa.data()) EXPECT_EQ(g, 1.0f);
    } else {
      any_diff = any_diff || std::memcmp(pa.data().data(), c.items()[i].tensor.data().data(), pa.size() * 4) != 0;
    }
  }
  EXPECT_TRUE(any_diff);
}

TEST(InitParams, ProjectionStandardDeviation) {
  ModelConfig cfg = micro_config();
  cfg.d_model = 1000;
  cfg.heads = 10;
  cfg.kv_heads = 10;
  cfg.head_dim = 100;
  cfg.ffn_width = 1000;
  cfg.encoder_depth = 1;
  cfg.chunk_size = 4;
  auto ps = init_params<float>(cfg, 7);
  const auto& w = ps.at("layer.1.ffn.gate_proj");
  ASSERT_EQ(w.size(), 1000000u);
  double s = 0, ss = 0;
  for (float x : w.data()) {
    s += x;
    ss += double(x) * x;
  }
  const double mean = s / 1e6, sd = std::sqrt(ss / 1e6 - mean * mean);
  EXPECT_NEAR(sd, 0.02, 0.02 * 0.05);
  const auto& o = ps.at("layer.1.ffn.down_proj");
  double oss = 0;
  for (float x : o.data()) oss += double(x) * x;
  EXPECT_NEAR(std::sqrt(oss / o.size()), 0.02 / std::sqrt(8.0), 0.02 / std::sqrt(8.0) * 0.05);
}

TEST(EncodeChunks, OnlyCompleteChunksAreStored) {
  auto m = HsaModel<double>::initialized(micro_config(), 1);
  std::mt19937_64 rng(2);
  auto short_mid = hsa_lab::testing::random_tensor<double>(rng, {15, 16}, false);
  EXPECT_EQ(m.encode_chunks(short_mid).num_chunks, 0u);
  auto mid = hsa_lab::testing::random_tensor<double>(rng, {3 * 16 + 5, 16}, false);
  auto st = m.encode_chunks(mid);
  EXPECT_EQ(st.num_chunks, 3u);
  EXPECT_EQ(st.landmarks.dim(0), 3u);
  EXPECT_EQ(st.keys.dim(0), 48u);
  EXPECT_EQ(st.values.dim(0), 48u);
}

TEST(EncodeChunks, IdenticalChunksGiveIdenticalEntries) {
  auto m = HsaModel<double>::initialized(micro_config(), 3);
  std::mt19937_64 rng(4);
  auto chunk = hsa_lab::testing::random_tensor<double>(rng, {16, 16}, false);
  auto other = hsa_lab::testing::random_tensor<double>(rng, {16, 16}, false);
  auto mid = concat<double>({chunk, other, chunk}, 0);
  auto st = m.encode_chunks(mid);
  // BLAS may round rows at different offsets differently in the last ulp.
  for (std::size_t x = 0; x < 16; ++x) EXPECT_NEAR(st.landmarks.data()[x], st.landmarks.data()[2 * 16 + x], 1e-12);
  for (std::size_t x = 0; x < 16 * 16; ++x) {
    EXPECT_NEAR(st.keys.data()[x], st.keys.data()[32 * 16 + x], 1e-12);
    EXPECT_NEAR(st.values.data()[x], st.values.data()[32 * 16 + x], 1e-12);
  }
  EXPECT_NE(st.landmarks.data()[0], st.landmarks.data()[16]);
}

TEST(Forward, ShortSequenceIsPureSwa) {
  auto cfg = micro_config();
  auto m = HsaModel<double>::initialized(cfg, 5);
  std::mt19937_64 rng(6);
  auto toks = random_tokens(rng, 8, cfg.vocab_size);  // n <= S and n <= W
  auto base = m.forward(toks);
  amplify_hsa(m, 1.0, 9);
  auto after = m.forward(toks);
  for (std::size_t i = 0; i < base.size(); ++i) EXPECT_EQ(base.data()[i], after.data()[i]);
  EXPECT_THROW(m.forward(std::vector<std::int32_t>{}), std::invalid_argument);
  EXPECT_THROW(m.forward(std::vector<std::int32_t>{17}), std::out_of_range);
}

TEST(Forward, TopKBeyondEligibleIsSaturated) {
  auto cfg = tiny_config();
  auto m = HsaModel<double>::initialized(cfg, 7);
  amplify_hsa(m, 0.3, 8);
  std::mt19937_64 rng(9);
  auto toks = random_tokens(rng, 130, cfg.vocab_size);  // 4 chunks, at most 3 eligible
  m.set_top_k(4);
  auto a = m.forward(toks);
  m.set_top_k(8);
  auto b = m.forward(toks);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 1e-6);
  m.set_top_k(1);
  auto c = m.forward(toks);
  double diff = 0;
  for (std::size_t i = 0; i < a.size(); ++i) diff = std::max(diff, std::abs(a.data()[i] - c.data()[i]));
  EXPECT_GT(diff, 0.0);
}

TEST(Forward, EveryParameterGroupReceivesGradient) {
  auto cfg = tiny_config();
  auto m = HsaModel<float>::initialized(cfg, 11);
  std::mt19937_64 rng(12);
  auto toks = random_tokens(rng, 130, cfg.vocab_size);
  std::vector<std::uint8_t> mask(130, 1);
  mask[0] = 0;
  auto logits = m.forward(toks);
  for (float v : logits.data()) ASSERT_TRUE(std::isfinite(v));
  m.loss(toks, mask).backward();
  for (const auto& p : m.params().items()) {
    double norm = 0;
    for (float g : p.tensor.grad()) norm += double(g) * g;
    EXPECT_GT(norm, 0.0) << p.name;
  }
}

TEST(Forward, CausalAtDoublePrecision) {
  auto cfg = tiny_config();
  auto m = HsaModel<double>::initialized(cfg, 13);
  amplify_hsa(m, 0.2, 14);
  std::mt19937_64 rng(15);
  for (int trial = 0; trial < 3; ++trial) {
    auto toks = random_tokens(rng, 130, cfg.vocab_size);
    auto base = m.forward(toks);
    const std::size_t t = 40 + 30 * static_cast<std::size_t>(trial);
    auto changed = toks;
    for (std::size_t i = t + 1; i < changed.size(); ++i) changed[i] = (changed[i] + 5) % 17;
    auto out = m.forward(changed);
    for (std::size_t i = 0; i < (t + 1) * cfg.vocab_size; ++i) ASSERT_EQ(base.data()[i], out.data()[i]);
  }
}

TEST(Forward, StoreIsUnchangedAcrossUpperDecoder) {
  auto cfg = micro_config();
  auto m = HsaModel<double>::initialized(cfg, 16);
  std::mt19937_64 rng(17);
  auto toks = random_tokens(rng, 96, cfg.vocab_size);
  ForwardTrace<double> trace;
  m.forward(toks, &trace);
  EXPECT_EQ(trace.num_chunks, 6u);
  EXPECT_EQ(trace.store_hash_before, trace.store_hash_after);
  EXPECT_EQ(trace.selections.size(), 2u);
  EXPECT_EQ(trace.selections[0].tokens(), 96u);
}

TEST(Forward, EndToEndGradientMatchesFiniteDifferences) {
  auto cfg = micro_config();
  auto m = HsaModel<double>::initialized(cfg, 18);
  randomize_all(m, 0.3, 19);
  std::mt19937_64 rng(20);
  auto toks = random_tokens(rng, 96, cfg.vocab_size);
  std::vector<std::uint8_t> mask(96, 1);
  mask[0] = 0;
  std::vector<std::pair<std::string, Tensor<double>>> inputs;
  for (auto& p : m.params().items()) inputs.emplace_back(p.name, p.tensor);
  GradCheckOptions opt;
  opt.max_elements_per_input = 12;
  opt.seed = 21;
  auto report = gradcheck([&] { return m.loss(toks, mask); }, inputs, opt);
  for (const auto& e : report.entries) {
    EXPECT_LE(e.max_rel_err, 1e-4) << e.name << " analytic " << e.worst_analytic << " numeric " << e.worst_numeric;
  }
}

TEST(Forward, StreamingBlocksMatchSinglePass) {
  auto cfg = tiny_config();
  cfg.swa_window = 24;
  auto m = HsaModel<double>::initialized(cfg, 22);
  amplify_hsa(m, 0.2, 23);
  std::mt19937_64 rng(24);
  auto toks = random_tokens(rng, 200, cfg.vocab_size);
  auto full = m.forward(toks);
  for (std::size_t block : {7u, 32u, 50u}) {
    DecodeState<double> st;
    std::vector<double> got;
    NoGradGuard ng;
    for (std::size_t p = 0; p < toks.size(); p += block) {
      const std::size_t e = std::min(toks.size(), p + block);
      auto lg = m.forward_block(std::span(toks).subspan(p, e - p), st);
      got.insert(got.end(), lg.data().begin(), lg.data().end());
    }
    ASSERT_EQ(got.size(), full.size());
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], full.data()[i], 1e-9) << "block " << block;
    EXPECT_EQ(st.store.num_chunks, 6u);
  }
}

TEST(Checkpoint, RoundTripAndCorruptionDetection) {
  auto cfg = micro_config();
  auto ps = init_params<float>(cfg, 25);
  Checkpoint ck{cfg, json{{"step", 12}}, blobs_from(ps)};
  const auto path = std::filesystem::temp_directory_path() / "hsa_lab_ckpt_test.bin";
  save_checkpoint(path, ck);
  auto back = load_checkpoint(path);
  EXPECT_EQ(to_json(back.config), to_json(cfg));
  EXPECT_EQ(back.meta.at("step"), 12);
  auto restored = make_parameters<float>(cfg);
  restore_parameters(restored, back);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    EXPECT_EQ(std::memcmp(ps.items()[i].tensor.data().data(), restored.items()[i].tensor.data().data(),
                          ps.items()[i].tensor.size() * 4),
              0);
  }
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(200);
    f.put('\x7f');
  }
  EXPECT_THROW(load_checkpoint(path), IoError);
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint(path), IoError);
}
