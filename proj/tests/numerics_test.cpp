#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "hsa_lab/numerics/gradcheck.hpp"
#include "hsa_lab/numerics/ops.hpp"
#include "hsa_lab/numerics/parameter.hpp"
#include "test_util.hpp"

using namespace hsa_lab;
using hsa_lab::testing::probe_loss;
using hsa_lab::testing::random_tensor;
using TD = Tensor<double>;

namespace {

constexpr double kGradTol = 1e-4;

void expect_gradcheck(const std::function<TD()>& loss, std::vector<std::pair<std::string, TD>> inputs,
                      double tol = kGradTol) {
  auto report = gradcheck(loss, std::move(inputs));
  for (const auto& e : report.entries) {
    EXPECT_LE(e.max_rel_err, tol) << e.name << " worst index " << e.worst_index << " analytic "
                                  << e.worst_analytic << " numeric " << e.worst_numeric;
    EXPECT_GT(e.checked, 0u);
  }
}

}  // namespace

TEST(Matmul, IdentityLeavesOperandUnchanged) {
  auto eye = TD::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto m = TD::from({3, 2}, {1, 2, 3, 4, 5, 6});
  auto r = matmul(eye, m);
  EXPECT_EQ(r.shape(), (Shape{3, 2}));
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(r.data()[i], m.data()[i]);

  auto a = Tensor<float>::from({2, 2}, {1, 2, 3, 4});
  auto b = Tensor<float>::from({2, 2}, {1, 0, 0, 1});
  auto ab = matmul(a, b);
  EXPECT_EQ(std::vector<float>(ab.data().begin(), ab.data().end()), (std::vector<float>{1, 2, 3, 4}));
}

TEST(Matmul, ShapeMismatchReportsBothShapes) {
  auto a = TD::zeros({2, 3});
  auto b = TD::zeros({4, 5});
  try {
    matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3]"), std::string::npos);
    EXPECT_NE(msg.find("[4,5]"), std::string::npos);
  }
}

TEST(Matmul, GradientOfSumIsColumnSumsBroadcast) {
  std::mt19937_64 rng(11);
  auto a = random_tensor<double>(rng, {4, 5});
  auto b = random_tensor<double>(rng, {5, 3});
  sum(matmul(a, b)).backward();
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t p = 0; p < 5; ++p) {
      double row_sum = 0;
      for (std::size_t j = 0; j < 3; ++j) row_sum += b.data()[p * 3 + j];
      EXPECT_NEAR(a.grad()[i * 5 + p], row_sum, 1e-12);
    }
  }
  auto report = gradcheck([&] { return sum(matmul(a, b)); }, {{"a", a}, {"b", b}});
  EXPECT_LE(report.max_rel_err(), 1e-6);
}

TEST(Softmax, ClosedFormValues) {
  auto s = softmax(TD::from({2}, {0.0, 0.0}), 0);
  EXPECT_DOUBLE_EQ(s.data()[0], 0.5);
  EXPECT_DOUBLE_EQ(s.data()[1], 0.5);
  auto t = softmax(TD::from({2}, {std::log(2.0), 0.0}), 0);
  EXPECT_NEAR(t.data()[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(t.data()[1], 1.0 / 3.0, 1e-15);
}

TEST(Softmax, RejectsNaN) {
  EXPECT_THROW(softmax(TD::from({2}, {0.0, std::nan("")}), 0), NumericError);
}

TEST(Softmax, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  auto x = random_tensor<double>(rng, {16});
  auto w = random_tensor<double>(rng, {16}, false);
  auto report = gradcheck([&] { return probe_loss(softmax(x, 0), w); }, {{"x", x}});
  EXPECT_LE(report.max_rel_err(), 1e-6);

  auto x2 = random_tensor<double>(rng, {3, 4, 5});
  auto w2 = random_tensor<double>(rng, {3, 4, 5}, false);
  for (std::size_t axis = 0; axis < 3; ++axis) {
    expect_gradcheck([&] { return probe_loss(softmax(x2, axis), w2); }, {{"x", x2}});
  }
}

TEST(Softmax, NormalizesAlongEveryAxis) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    auto x = random_tensor<double>(rng, {3, 7}, false, 1.0 + 20.0 * (trial % 5));
    for (std::size_t axis = 0; axis < 2; ++axis) {
      auto y = softmax(x, axis);
      const std::size_t outer = axis == 0 ? 7 : 3, len = axis == 0 ? 3 : 7;
      for (std::size_t o = 0; o < outer; ++o) {
        double z = 0;
        for (std::size_t j = 0; j < len; ++j) {
          const double v = axis == 0 ? y.data()[j * 7 + o] : y.data()[o * 7 + j];
          EXPECT_GE(v, 0.0);
          z += v;
        }
        EXPECT_NEAR(z, 1.0, 1e-6);
      }
    }
  }
}

TEST(RmsNormalize, ZerosStayZero) {
  auto g = TD::from({4}, {1, 1, 1, 1});
  auto y = rms_normalize(TD::zeros({4}), 0, 1e-6, g);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(RmsNormalize, ThreeFour) {
  auto g = TD::from({2}, {1, 1});
  auto y = rms_normalize(TD::from({2}, {3, 4}), 0, 0.0, g);
  EXPECT_NEAR(y.data()[0], 3.0 / std::sqrt(12.5), 1e-12);
  EXPECT_NEAR(y.data()[1], 4.0 / std::sqrt(12.5), 1e-12);
  EXPECT_NEAR(y.data()[0], 0.8485, 1e-4);
  EXPECT_NEAR(y.data()[1], 1.1314, 1e-4);
}

TEST(RmsNormalize, OutputRmsEqualsGainRms) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_tensor<double>(rng, {64}, false);
    const double c = 0.5 + 0.1 * trial;
    auto g = TD::from({64}, std::vector<double>(64, c));
    auto y = rms_normalize(x, 0, 1e-6, g);
    double ms = 0;
    for (double v : y.data()) ms += v * v;
    EXPECT_NEAR(std::sqrt(ms / 64), c, 1e-5 * c);
  }
}

TEST(RmsNormalize, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(13);
  auto x = random_tensor<double>(rng, {5, 8});
  auto g = random_tensor<double>(rng, {8});
  auto w = random_tensor<double>(rng, {5, 8}, false);
  expect_gradcheck([&] { return probe_loss(rms_normalize(x, 1, 1e-6, g), w); }, {{"x", x}, {"gain", g}});
  auto g0 = random_tensor<double>(rng, {5});
  expect_gradcheck([&] { return probe_loss(rms_normalize(x, 0, 1e-6, g0), w); }, {{"x", x}, {"gain", g0}});
}

TEST(CrossEntropy, UniformLogitsGiveLogV) {
  auto logits = TD::zeros({3, 4});
  std::vector<std::int32_t> tgt{0, 1, 3};
  std::vector<std::uint8_t> mask{1, 1, 1};
  EXPECT_NEAR(cross_entropy(logits, tgt, mask).item(), std::log(4.0), 1e-15);
}

TEST(CrossEntropy, LossVanishesWithMargin) {
  std::vector<std::int32_t> tgt{2};
  std::vector<std::uint8_t> mask{1};
  double prev = 1e9;
  for (double margin : {1.0, 5.0, 20.0, 50.0}) {
    auto logits = TD::from({1, 4}, {0, 0, margin, 0});
    const double loss = cross_entropy(logits, tgt, mask).item();
    EXPECT_LT(loss, prev);
    prev = loss;
  }
  EXPECT_LT(prev, 1e-20);
}

TEST(CrossEntropy, MatchesDirectLogSumExp) {
  std::mt19937_64 rng(21);
  auto logits = random_tensor<double>(rng, {7, 11}, true, 3.0);
  std::vector<std::int32_t> tgt{0, 5, 10, 3, 3, 7, 1};
  std::vector<std::uint8_t> mask{1, 0, 1, 1, 0, 1, 1};
  double total = 0;
  int count = 0;
  for (std::size_t i = 0; i < 7; ++i) {
    if (!mask[i]) continue;
    double z = 0;
    for (std::size_t j = 0; j < 11; ++j) z += std::exp(logits.data()[i * 11 + j]);
    total += std::log(z) - logits.data()[i * 11 + tgt[i]];
    ++count;
  }
  const double got = cross_entropy(logits, tgt, mask).item();
  EXPECT_LE(std::abs(got - total / count) / (total / count), 1e-6);
  expect_gradcheck([&] { return cross_entropy(logits, tgt, mask); }, {{"logits", logits}});
}

TEST(CrossEntropy, RejectsEmptyMaskAndBadTargets) {
  auto logits = TD::zeros({2, 3});
  std::vector<std::int32_t> tgt{0, 1};
  std::vector<std::uint8_t> none{0, 0};
  EXPECT_THROW(cross_entropy(logits, tgt, none), std::invalid_argument);
  std::vector<std::int32_t> bad{0, 3};
  std::vector<std::uint8_t> all{1, 1};
  EXPECT_THROW(cross_entropy(logits, bad, all), std::out_of_range);
}

TEST(Primitives, ElementwiseGradients) {
  std::mt19937_64 rng(31);
  auto a = random_tensor<double>(rng, {4, 6});
  auto b = random_tensor<double>(rng, {4, 6});
  auto w = random_tensor<double>(rng, {4, 6}, false);
  expect_gradcheck([&] { return probe_loss(add(a, b), w); }, {{"a", a}, {"b", b}});
  expect_gradcheck([&] { return probe_loss(mul(a, b), w); }, {{"a", a}, {"b", b}});
  expect_gradcheck([&] { return probe_loss(scale(a, -1.7), w); }, {{"a", a}});
  expect_gradcheck([&] { return probe_loss(silu(a), w); }, {{"a", a}});
  expect_gradcheck([&] { return probe_loss(reshape(mul(a, a), {6, 4}), reshape(w, {6, 4})); }, {{"a", a}});
  EXPECT_THROW(add(a, TD::zeros({6, 4})), ShapeError);
}

TEST(Primitives, GatherEmbeddingConcatGradients) {
  std::mt19937_64 rng(37);
  auto table = random_tensor<double>(rng, {9, 5});
  std::vector<std::int32_t> ids{3, 0, 3, 8, 1};
  auto w = random_tensor<double>(rng, {5, 5}, false);
  expect_gradcheck([&] { return probe_loss(embedding(table, ids), w); }, {{"table", table}});

  std::vector<std::int32_t> cols{4, 4, 0};
  auto wc = random_tensor<double>(rng, {9, 3}, false);
  expect_gradcheck([&] { return probe_loss(gather(table, 1, cols), wc); }, {{"table", table}});
  EXPECT_THROW(gather(table, 0, std::vector<std::int32_t>{9}), std::out_of_range);

  auto x = random_tensor<double>(rng, {2, 5});
  auto y = random_tensor<double>(rng, {3, 5});
  auto wr = random_tensor<double>(rng, {5, 5}, false);
  expect_gradcheck([&] { return probe_loss(concat<double>({x, y}, 0), wr); }, {{"x", x}, {"y", y}});
  auto z = random_tensor<double>(rng, {2, 2});
  auto wcol = random_tensor<double>(rng, {2, 7}, false);
  expect_gradcheck([&] { return probe_loss(concat<double>({x, z}, 1), wcol); }, {{"x", x}, {"z", z}});
  EXPECT_THROW(concat<double>({x, z}, 0), ShapeError);
}

TEST(Primitives, LinearAndGatedFeedForwardGradients) {
  std::mt19937_64 rng(41);
  auto x = random_tensor<double>(rng, {3, 6});
  auto wt = random_tensor<double>(rng, {6, 4});
  auto bias = random_tensor<double>(rng, {4});
  auto w = random_tensor<double>(rng, {3, 4}, false);
  expect_gradcheck([&] { return probe_loss(linear(x, wt, bias), w); }, {{"x", x}, {"w", wt}, {"b", bias}});

  auto wg = random_tensor<double>(rng, {6, 10});
  auto wu = random_tensor<double>(rng, {6, 10});
  auto wd = random_tensor<double>(rng, {10, 6});
  auto wo = random_tensor<double>(rng, {3, 6}, false);
  expect_gradcheck([&] { return probe_loss(swiglu_ffn(x, wg, wu, wd), wo); },
                   {{"x", x}, {"gate", wg}, {"up", wu}, {"down", wd}});
}

TEST(Backward, AccumulatesAcrossIndependentGraphs) {
  std::mt19937_64 rng(43);
  auto p = random_tensor<double>(rng, {3, 3});
  auto x1 = random_tensor<double>(rng, {2, 3}, false);
  auto x2 = random_tensor<double>(rng, {4, 3}, false);
  auto f1 = [&] { return sum(silu(matmul(x1, p))); };
  auto f2 = [&] { return sum(mul(matmul(x2, p), matmul(x2, p))); };

  f1().backward();
  std::vector<double> g1(p.grad().begin(), p.grad().end());
  p.zero_grad();
  f2().backward();
  std::vector<double> g2(p.grad().begin(), p.grad().end());
  p.zero_grad();

  f1().backward();
  f2().backward();
  for (std::size_t i = 0; i < g1.size(); ++i) EXPECT_NEAR(p.grad()[i], g1[i] + g2[i], 1e-12);
}

TEST(Backward, NoGradModeRecordsNothing) {
  auto p = TD::from({2}, {1.0, 2.0}, true);
  NoGradGuard guard;
  auto y = sum(mul(p, p));
  EXPECT_FALSE(y.requires_grad());
}

TEST(Tensor, DataLengthMustMatchShape) {
  EXPECT_THROW(TD::from({2, 3}, std::vector<double>(5)), ShapeError);
  EXPECT_EQ(TD::zeros({2, 3}).size(), 6u);
}

TEST(ParameterSet, RejectsDuplicateNames) {
  ParameterSet<float> ps;
  ps.add("layer.1.swa.q_proj", {2, 2});
  EXPECT_THROW(ps.add("layer.1.swa.q_proj", {2, 2}), std::invalid_argument);
  EXPECT_EQ(ps.element_count(), 4u);
  auto pd = ps.convert<double>();
  EXPECT_TRUE(pd.contains("layer.1.swa.q_proj"));
}
