#include <gtest/gtest.h>

#include "q4fg/ops.hpp"
#include "q4fg/quant.hpp"
#include "quant_properties.hpp"
#include "test_util.hpp"

using namespace q4fg;

TEST(QuantProperties, RangeContainment) {
  const auto r = props::range_containment(1000, 1);
  EXPECT_TRUE(r.ok()) << r.first_failure;
}

TEST(QuantProperties, RoundtripWithinHalfScale) {
  const auto r = props::roundtrip_bound(1000, 2);
  EXPECT_TRUE(r.ok()) << r.first_failure;
}

TEST(QuantProperties, Monotone) {
  const auto r = props::monotonicity(1000, 3);
  EXPECT_TRUE(r.ok()) << r.first_failure;
}

TEST(QuantProperties, FinerGroupsNotWorseOnNestedTensors) {
  const auto r = props::granularity_refinement(1000, 4);
  EXPECT_TRUE(r.ok()) << r.first_failure;
}

TEST(QuantProperties, AsymmetricNotWorseOnPositiveTensors) {
  const auto r = props::asymmetric_not_worse_on_positive(500, 5);
  EXPECT_TRUE(r.ok()) << r.first_failure;
}

TEST(Quant, CodeRanges) {
  EXPECT_EQ(QuantScheme::symmetric(4).code_min(), -8);
  EXPECT_EQ(QuantScheme::symmetric(4).code_max(), 7);
  EXPECT_EQ(QuantScheme::asymmetric(4).code_max(), 15);
  EXPECT_EQ(QuantScheme::symmetric(8).code_min(), -128);
  EXPECT_EQ(QuantScheme::asymmetric(8).code_max(), 255);
}

TEST(Quant, SymmetricParamsOracle) {
  // max|x| = 3.5 at 4 bits: scale = 3.5 / 7 = 0.5
  const Tensor x({4}, {-3.5f, 0.26f, 0.74f, 1.25f});
  const auto q = quantize(x, QuantScheme::symmetric(4));
  EXPECT_FLOAT_EQ(q.params.scales[0], 0.5f);
  EXPECT_EQ(q.params.zero_points[0], 0.0f);
  EXPECT_EQ(q.code(0), -7);
  EXPECT_EQ(q.code(1), 1);
  EXPECT_EQ(q.code(2), 1);
  EXPECT_EQ(q.code(3), 2);  // 2.5 rounds half to even
}

TEST(Quant, AsymmetricParamsOracle) {
  // [-1, 2] at 4 bits: scale = 3 / 15 = 0.2, zero = -1
  const Tensor x({3}, {-1.0f, 2.0f, 0.5f});
  const auto q = quantize(x, QuantScheme::asymmetric(4));
  EXPECT_FLOAT_EQ(q.params.scales[0], 0.2f);
  EXPECT_FLOAT_EQ(q.params.zero_points[0], -1.0f);
  EXPECT_EQ(q.code(0), 0);
  EXPECT_EQ(q.code(1), 15);
  const auto d = dequantize(q);
  EXPECT_FLOAT_EQ(d.data()[0], -1.0f);
  EXPECT_FLOAT_EQ(d.data()[1], 2.0f);
}

TEST(Quant, DegenerateGroupGetsUnitScale) {
  const Tensor zeros({2, 3}, std::vector<float>(6, 0.0f));
  const auto q = quantize(zeros, QuantScheme::symmetric(4, Granularity::per_channel), QuantRole::weight);
  for (float s : q.params.scales) EXPECT_EQ(s, 1.0f);
  const Tensor constant({3}, {2.0f, 2.0f, 2.0f});
  const auto qa = quantize(constant, QuantScheme::asymmetric(8));
  EXPECT_EQ(qa.params.scales[0], 1.0f);
  const auto back = dequantize(qa);
  for (float v : back.data()) EXPECT_EQ(v, 2.0f);
}

TEST(Quant, GroupLayouts) {
  const Shape s{4, 6};
  EXPECT_EQ(group_layout(s, QuantScheme::symmetric(4)).count, 1u);
  const auto row = group_layout(s, QuantScheme::symmetric(4, Granularity::per_channel));
  EXPECT_EQ(row.count, 4u);
  EXPECT_EQ(row.size, 6u);
  const auto tok = group_layout(s, QuantScheme::symmetric(4, Granularity::per_token));
  EXPECT_EQ(tok.count, 4u);
  // 24 elements in 5 groups: runs of 5, last run 4
  const auto g = group_layout(s, QuantScheme::symmetric(4, Granularity::per_group, 5));
  EXPECT_EQ(g.count, 5u);
  EXPECT_EQ(g.size, 5u);
  EXPECT_EQ(g.end(4, 24), 24u);
  EXPECT_EQ(g.end(4, 24) - g.begin(4), 4u);
  // Row-wise equals per_group with groups = rows on a weight.
  std::mt19937_64 rng(1);
  const auto w = testutil::random_tensor({4, 6}, rng);
  const auto a = quantize(w, QuantScheme::symmetric(4, Granularity::per_channel), QuantRole::weight);
  const auto b = quantize(w, QuantScheme::symmetric(4, Granularity::per_group, 4), QuantRole::weight);
  EXPECT_EQ(a.lanes, b.lanes);
  EXPECT_EQ(a.params, b.params);
}

TEST(Quant, RoleRules) {
  auto clipped = QuantScheme::symmetric(8);
  clipped.clip = ClipRange{-1.0f, 1.0f};
  EXPECT_THROW(check_scheme(clipped, QuantRole::weight), SchemeError);
  EXPECT_NO_THROW(check_scheme(clipped, QuantRole::activation));
  EXPECT_THROW(check_scheme(QuantScheme::symmetric(4, Granularity::per_token), QuantRole::weight), SchemeError);
  EXPECT_THROW(check_scheme(QuantScheme::symmetric(4, Granularity::per_channel), QuantRole::activation),
               SchemeError);
  QuantScheme bad;
  bad.bits = 5;
  EXPECT_THROW(bad.validate(), SchemeError);
  auto inverted = QuantScheme::symmetric(8);
  inverted.clip = ClipRange{1.0f, -1.0f};
  EXPECT_THROW(inverted.validate(), SchemeError);
}

TEST(Quant, PassthroughIsIdentity) {
  std::mt19937_64 rng(2);
  const auto x = testutil::random_tensor({3, 5}, rng);
  const auto d = dequantize(quantize(x, QuantScheme::passthrough_scheme()));
  EXPECT_TRUE(std::equal(x.data().begin(), x.data().end(), d.data().begin()));
}

TEST(Quant, ClipAppliedBeforeQuantization) {
  auto s = QuantScheme::symmetric(8);
  s.clip = ClipRange{-1.0f, 1.0f};
  const Tensor x({3}, {-5.0f, 0.5f, 5.0f});
  const auto d = dequantize(quantize(x, s));
  EXPECT_FLOAT_EQ(d.data()[0], -1.0f);
  EXPECT_FLOAT_EQ(d.data()[2], 1.0f);
}

TEST(Quant, PerTokenMatchesRowByRow) {
  std::mt19937_64 rng(3);
  const auto x = testutil::random_tensor({5, 7}, rng);
  const auto s = QuantScheme::asymmetric(4, Granularity::per_token);
  const auto q = quantize(x, s);
  const auto params = tokenwise_activation_params(x, s);
  EXPECT_EQ(q.params, params);
  for (std::size_t r = 0; r < 5; ++r) {
    const Tensor row({7}, std::vector<float>(x.data().begin() + r * 7, x.data().begin() + r * 7 + 7));
    const auto qr = quantize(row, QuantScheme::asymmetric(4));
    EXPECT_EQ(qr.params.scales[0], q.params.scales[r]);
    for (std::size_t c = 0; c < 7; ++c) EXPECT_EQ(qr.code(c), q.code(r * 7 + c));
  }
}

TEST(Quant, FakeQuantMatchesQuantizeDequantize) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const auto c = props::random_case(rng);
    const auto fq = fake_quantize_values<float>(c.x.data(), c.x.shape(), c.scheme, c.role);
    const auto d = dequantize(quantize(c.x, c.scheme, c.role));
    ASSERT_TRUE(std::equal(fq.values.begin(), fq.values.end(), d.data().begin())) << c.scheme.describe();
  }
}

TEST(Quant, SteGradientIsClippedPassThrough) {
  auto s = QuantScheme::symmetric(4);
  s.clip = ClipRange{-1.0f, 1.0f};
  Tensor64 x({4}, {-2.0, -0.5, 0.3, 1.5}, true);
  Tape64 tape;
  {
    TapeScope<double> scope(tape);
    auto y = sum(fake_quantize_ste(x, s));
    tape.backward(y);
  }
  EXPECT_EQ(x.grad()[0], 0.0);
  EXPECT_EQ(x.grad()[1], 1.0);
  EXPECT_EQ(x.grad()[2], 1.0);
  EXPECT_EQ(x.grad()[3], 0.0);
}

TEST(Quant, SurrogateReplayMakesFiniteDifferencesMatchSte) {
  std::mt19937_64 rng(5);
  auto w = testutil::random_tensor<double>({3, 4}, rng);
  auto x = testutil::random_tensor<double>({2, 4}, rng);
  const auto ws = QuantScheme::symmetric(4, Granularity::per_channel);
  auto as = QuantScheme::symmetric(8, Granularity::per_token);
  as.clip = ClipRange{-1.0f, 1.0f};
  SteSurrogate<double> surrogate;
  auto f = [&](std::vector<Tensor64>& in) {
    surrogate.set_mode(SteSurrogate<double>::Mode::replay);
    auto y = matmul_nt(fake_quantize_ste(in[1], as), fake_quantize_ste(in[0], ws, QuantRole::weight));
    std::mt19937_64 r(9);
    return sum(mul(y, testutil::random_tensor<double>(y.shape(), r)));
  };
  surrogate.set_mode(SteSurrogate<double>::Mode::record);
  (void)matmul_nt(fake_quantize_ste(x, as), fake_quantize_ste(w, ws, QuantRole::weight));
  EXPECT_LE(testutil::gradient_check({w, x}, f), 1e-3);
}

TEST(Quant, DescribeIsCsvSafe) {
  auto s = QuantScheme::asymmetric(8, Granularity::per_token);
  s.clip = ClipRange{-2.0f, 3.0f};
  EXPECT_EQ(s.describe(), "8:asym:token:clip[-2..3]");
  EXPECT_EQ(QuantScheme::symmetric(4, Granularity::per_group, 8).describe(), "4:sym:g8");
  EXPECT_EQ(QuantScheme::passthrough_scheme().describe(), "fp32");
}
