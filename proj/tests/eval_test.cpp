#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "hsa_lab/evalharness/cost_model.hpp"
#include "hsa_lab/evalharness/niah.hpp"
#include "hsa_lab/evalharness/perplexity.hpp"
#include "hsa_lab/evalharness/svg.hpp"
#include "hsa_lab/trainer/trainer.hpp"

using namespace hsa_lab;

namespace {

ModelConfig micro() { return preset("micro").model; }

std::size_t count_of(const std::string& hay, const std::string& needle) {
  std::size_t n = 0;
  for (auto p = hay.find(needle); p != std::string::npos; p = hay.find(needle, p + 1)) ++n;
  return n;
}

}  // namespace

TEST(Niah, UntrainedModelScoresAtChance) {
  const auto model = HsaModel<float>::initialized(micro(), 4);
  NiahOptions opt;
  opt.samples_per_cell = 4;
  const auto g = eval_niah(model, data::Task::sniah, {256}, {0.0, 0.5, 1.0}, opt);
  EXPECT_LE(g.mean_at(0), 0.05);
}

TEST(Niah, MemorisedProbeIsScoredCorrect) {
  auto model = HsaModel<float>::initialized(micro(), 8);
  AdamW<float> opt(model.params(), AdamWConfig{0.9, 0.95, 0.0, 1e-8, 1.0});
  data::Rng rng(3);
  const auto s = data::gen_sniah(160, 0.3, rng);
  for (int i = 0; i < 300; ++i) train_step(model, {s}, opt, 1e-2);
  const auto r = score_sample(model, s);
  EXPECT_TRUE(r.correct) << r.predicted << " vs " << r.expected;
  EXPECT_EQ(r.expected, s.meta.answer);
}

TEST(Niah, GridCoversEveryCellAndMarksSkips) {
  const auto model = HsaModel<float>::initialized(micro(), 4);
  NiahOptions opt;
  opt.samples_per_cell = 2;
  opt.max_length = 250;
  opt.in_domain_boundary = 128;
  std::size_t records = 0;
  opt.on_record = [&](const NiahRecord&) { ++records; };
  const std::vector<std::size_t> lengths{64, 200, 300};
  const std::vector<double> depths{0.0, 0.5, 1.0};
  const auto g = eval_niah(model, data::Task::sniah, lengths, depths, opt);
  EXPECT_EQ(records, 2u * depths.size());  // only the 200-token row runs
  for (std::size_t di = 0; di < depths.size(); ++di) {
    EXPECT_TRUE(g.skipped[0][di]);  // shorter than one probe
    EXPECT_FALSE(g.skipped[1][di]);
    EXPECT_TRUE(g.skipped[2][di]);  // above max_length
    EXPECT_EQ(g.n_samples[1][di], 2u);
  }
  EXPECT_TRUE(std::isnan(g.mean_at(0)));
  EXPECT_TRUE(g.out_of_domain(1));
  const auto csv = grid_csv(g);
  EXPECT_EQ(count_of(csv, "\n"), 1 + lengths.size() * depths.size());
  EXPECT_EQ(count_of(csv, "skipped,0"), 6u);
  EXPECT_NE(grid_summary(g).find("OOD"), std::string::npos);
}

TEST(Niah, RecordsAreDeterministic) {
  const auto model = HsaModel<float>::initialized(micro(), 4);
  auto collect = [&] {
    std::vector<std::string> out;
    NiahOptions opt;
    opt.samples_per_cell = 2;
    opt.seed = 77;
    opt.on_record = [&](const NiahRecord& r) { out.push_back(to_json(r).dump()); };
    eval_niah(model, data::Task::mqniah, {400}, {0.2, 0.8}, opt);
    return out;
  };
  const auto a = collect();
  EXPECT_EQ(a.size(), 4u);
  EXPECT_EQ(a, collect());
}

TEST(Niah, ArbitraryOutputBytesStayPrintable) {
  EXPECT_EQ(printable(std::string("a\x2f\xff\n1", 5)), "a/\\xff\\x0a1");
}

TEST(Niah, VariableTrackingCells) {
  const auto model = HsaModel<float>::initialized(micro(), 4);
  NiahOptions opt;
  opt.samples_per_cell = 2;
  const auto g = eval_niah(model, data::Task::vartrack, {320}, {0.0}, opt);
  EXPECT_FALSE(g.skipped[0][0]);
  EXPECT_EQ(g.task, "vartrack");
}

TEST(Perplexity, StreamingMatchesOnePass) {
  const auto model = HsaModel<double>::initialized(micro(), 6);
  data::Rng rng(1);
  const auto s = data::gen_lm(300, rng);
  const double one = eval_ppl(model, s.tokens, 120);
  for (std::size_t block : {1, 37, 64, 299}) {
    const double streamed = eval_ppl(model, s.tokens, 120, block);
    EXPECT_LE(std::abs(streamed - one) / one, 1e-4) << "block " << block;
  }
  const auto fmodel = HsaModel<float>::initialized(micro(), 6);
  EXPECT_LE(std::abs(eval_ppl(fmodel, s.tokens, 120, 50) - eval_ppl(fmodel, s.tokens, 120)) /
                eval_ppl(fmodel, s.tokens, 120),
            1e-4);
}

TEST(Perplexity, UniformModelGivesVocabularySize) {
  auto model = HsaModel<double>::initialized(micro(), 6);
  for (auto& w : model.params().at("lm_head").mutable_data()) w = 0.0;
  data::Rng rng(2);
  const auto s = data::gen_lm(100, rng);
  EXPECT_NEAR(eval_ppl(model, s.tokens, 50), 264.0, 1e-9);
  EXPECT_THROW(eval_ppl(model, s.tokens, 100), std::invalid_argument);
}

TEST(Cost, ExactCountsAgainstDirectFormulas) {
  const auto c = preset("desk-ladder").model;  // d 256, L 6, two HSA layers, W 512, K 8, S 32
  const std::uint64_t n = 5000;
  const auto r = cost_row(c, n);
  EXPECT_EQ(r.full_attention, Count(6) * 2 * 5000 * 5000 * 256);
  EXPECT_EQ(r.swa, Count(6) * 2 * 5000 * 512 * 256);
  EXPECT_EQ(r.hsa_attend, Count(2) * 2 * 5000 * 8 * 32 * 256);
  EXPECT_EQ(r.hsa_retrieval, Count(2) * 5000 * (5000 / 32) * 256);
  EXPECT_EQ(r.hybrid_total, r.swa + r.hsa_attend + r.hsa_retrieval);
  EXPECT_EQ(count_str(Count(1) << 100), "1267650600228229401496703205376");
}

TEST(Cost, ScalingBeyondTheWindow) {
  const auto c = preset("desk-ladder").model;
  for (std::uint64_t n : {1024u, 4096u, 65536u}) {
    const auto a = cost_row(c, n), b = cost_row(c, 2 * n), q = cost_row(c, 4 * n);
    EXPECT_EQ(b.full_attention, 4 * a.full_attention);
    EXPECT_EQ(q.full_attention, 16 * a.full_attention);
    EXPECT_EQ(b.swa, 2 * a.swa);
    EXPECT_EQ(q.swa, 4 * a.swa);
    EXPECT_EQ(b.hsa_attend, 2 * a.hsa_attend);
    EXPECT_EQ(b.hsa_retrieval, 4 * a.hsa_retrieval);  // n multiple of S
    EXPECT_EQ(b.kv_bytes_swa, a.kv_bytes_swa);
  }
}

TEST(Cost, WindowBoundary) {
  const auto c = preset("desk-ladder").model;
  const std::uint64_t W = c.swa_window;
  EXPECT_EQ(cost_row(c, W).swa, cost_row(c, W).full_attention);
  EXPECT_LT(cost_row(c, W + 1).swa, cost_row(c, W + 1).full_attention);
  EXPECT_EQ(cost_row(c, W + 1).swa - cost_row(c, W).swa, Count(6) * 2 * W * 256);
}

TEST(Cost, CrossoverIsTheFirstCheaperLength) {
  const auto c = preset("desk-ladder").model;
  const auto x = cost_crossover(c);
  ASSERT_GT(x, 1u);
  EXPECT_LT(cost_row(c, x).hybrid_total, cost_row(c, x).full_attention);
  EXPECT_GE(cost_row(c, x - 1).hybrid_total, cost_row(c, x - 1).full_attention);
  EXPECT_EQ(cost_crossover(c), x);
  // Full attention: 12 n^2 d. Hybrid: 12 n W d + 4 n K S d + 2 n floor(n/32) d.
  // Solving 12 n = 12 W + 4 K S + 2 floor(n/32) near n = 700 gives the first n.
  std::uint64_t brute = 0;
  for (std::uint64_t n = 1; n < 100000 && !brute; ++n) {
    const long double full = 12.0L * n * n, hyb = 12.0L * n * std::min<std::uint64_t>(n, 512) + 4.0L * n * 8 * 32 +
                                                 2.0L * n * static_cast<long double>(n / 32);
    if (hyb < full) brute = n;
  }
  EXPECT_EQ(x, brute);
  EXPECT_EQ(cost_model(c, {1024, 2048}).crossover, x);
  EXPECT_THROW(cost_model(c, {0}), std::invalid_argument);
}

TEST(Svg, LinesAndHeatmap) {
  LineSeries a{"ladder", {1024, 2048, 4096}, {1.0, 0.5, NAN}};
  LineSeries b{"baseline", {1024, 2048, 4096}, {0.9, 0.2, 0.1}};
  const auto svg = svg_lines("acc", {a, b}, 2048);
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  EXPECT_EQ(count_of(svg, "<circle"), 5u);
  EXPECT_EQ(count_of(svg, "stroke-dasharray"), 1u);
  EXPECT_NE(svg.find("baseline"), std::string::npos);

  AccuracyGrid g;
  g.task = "sniah";
  g.lengths = {1024, 2048, 4096};
  g.depths = {0.0, 1.0};
  g.accuracy = {{1, 1}, {0.5, 0.25}, {0, 0}};
  g.n_samples = {{2, 2}, {2, 2}, {0, 0}};
  g.skipped = {{false, false}, {false, false}, {true, true}};
  g.in_domain_boundary = 2048;
  const auto hm = svg_heatmap(g, "grid");
  EXPECT_EQ(count_of(hm, "<rect x="), 6u);
  EXPECT_EQ(count_of(hm, ">skip<"), 2u);
  EXPECT_EQ(count_of(hm, "stroke-dasharray"), 1u);
}
