#include <gtest/gtest.h>

#include <sstream>

#include "gemm_oracle.hpp"
#include "q4fg/ops.hpp"
#include "q4fg/pack_gemm.hpp"
#include "test_util.hpp"

using namespace q4fg;

TEST(Pack, RoundTripBothEncodings) {
  std::mt19937_64 rng(1);
  for (std::size_t cols : {1u, 2u, 5u, 8u, 13u}) {
    std::vector<std::int8_t> s(3 * cols), u(3 * cols);
    for (auto& v : s) v = static_cast<std::int8_t>(static_cast<int>(rng() % 16) - 8);
    for (auto& v : u) v = static_cast<std::int8_t>(rng() % 16);
    const auto ps = pack_int4(3, cols, s);
    EXPECT_EQ(ps.bytes().size(), 3 * ((cols + 1) / 2));
    EXPECT_EQ(unpack_int4(ps), s);
    const auto pu = pack_int4(3, cols, u, NibbleEncoding::unsigned_int);
    EXPECT_EQ(unpack_int4(pu), u);
  }
}

TEST(Pack, NibbleOrderAndPadding) {
  const std::vector<std::int8_t> v{1, -1, 7};
  const auto p = pack_int4(1, 3, v);
  ASSERT_EQ(p.bytes().size(), 2u);
  EXPECT_EQ(p.bytes()[0], 0xF1);  // low nibble = column 0
  EXPECT_EQ(p.bytes()[1], 0x07);  // odd width: zero high nibble
}

TEST(Pack, OutOfRangeValuesRejected) {
  const std::vector<std::int8_t> big{8};
  EXPECT_THROW(pack_int4(1, 1, big), RangeError);
  const std::vector<std::int8_t> neg{-1};
  EXPECT_THROW(pack_int4(1, 1, neg, NibbleEncoding::unsigned_int), RangeError);
}

TEST(Gemm, Int4MatchesOracle) {
  const auto r = props::gemm_oracle_sweep(60, 24, 4, 11);
  EXPECT_EQ(r.mismatches, 0u) << r.first_failure;
}

TEST(Gemm, Int8MatchesOracle) {
  const auto r = props::gemm_oracle_sweep(60, 24, 8, 12);
  EXPECT_EQ(r.mismatches, 0u) << r.first_failure;
}

TEST(Gemm, WorkerCountDoesNotChangeResult) {
  std::mt19937_64 rng(3);
  const auto a = props::random_operand(17, 33, 4, true, rng);
  const auto w = props::random_operand(9, 33, 4, true, rng);
  EXPECT_EQ(gemm_int_nt(a.packed, w.packed, 1), gemm_int_nt(a.packed, w.packed, 3));
}

TEST(Gemm, ShapeMismatchThrows) {
  std::mt19937_64 rng(4);
  const auto a = props::random_operand(2, 3, 8, true, rng);
  const auto w = props::random_operand(2, 4, 8, true, rng);
  EXPECT_THROW(gemm_int_nt(a.plain, w.plain), DimensionError);
}

namespace {

// Dequantize both operands and multiply in double.
std::vector<double> dequant_reference(const QTensor& x, const QTensor& w, std::span<const float> bias, bool gelu_act,
                                      const std::vector<std::uint8_t>& keep = {}) {
  const auto dx = dequantize(x), dw = dequantize(w);
  const std::size_t m = x.shape[0], k = x.shape[1], n = w.shape[0];
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) {
        const double wv = keep.empty() || keep[j * k + p] ? dw.data()[j * k + p] : 0.0;
        acc += static_cast<double>(dx.data()[i * k + p]) * wv;
      }
      acc += bias.empty() ? 0.0 : bias[j];
      out[i * n + j] = gelu_act ? gelu_scalar(acc) : acc;
    }
  return out;
}

double inf_norm_ratio(const Tensor& got, const std::vector<double>& ref) {
  double diff = 0.0, mag = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    diff = std::max(diff, std::fabs(static_cast<double>(got.data()[i]) - ref[i]));
    mag = std::max(mag, std::fabs(ref[i]));
  }
  return diff / std::max(mag, 1e-12);
}

}  // namespace

TEST(FusedGemm, MatchesDequantizedReferenceAllSchemeCombinations) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t m = 1 + rng() % 7, n = 1 + rng() % 9, k = 2 + rng() % 20;
    const auto x = testutil::random_tensor({m, k}, rng);
    const auto w = testutil::random_tensor({n, k}, rng);
    const int bits = trial % 2 ? 4 : 8;
    const auto wm = (trial / 2) % 2 ? Mapping::symmetric : Mapping::asymmetric;
    const auto xm = (trial / 4) % 2 ? Mapping::symmetric : Mapping::asymmetric;
    QuantScheme ws{bits, wm, Granularity::per_group, 1 + rng() % (n * k)};
    if (trial % 3 == 0) ws = QuantScheme{bits, wm, Granularity::per_channel};
    QuantScheme xs{bits, xm, trial % 5 == 0 ? Granularity::per_tensor : Granularity::per_token};
    const auto qx = quantize(x, xs);
    const auto qw = quantize(w, ws, QuantRole::weight);
    std::vector<float> bias(n);
    for (auto& b : bias) b = static_cast<float>(rng() % 7) - 3.0f;
    const bool g = trial % 2;
    const auto got = gemm_fused(qx, prepare_weight(qw, bits == 4), bias, g ? Activation::gelu : Activation::none);
    const auto ref = dequant_reference(qx, qw, bias, g);
    EXPECT_LE(inf_norm_ratio(got, ref), 1e-5) << xs.describe() << " x " << ws.describe();
  }
}

TEST(FusedGemm, PackedAndUnpackedWeightsBitIdentical) {
  std::mt19937_64 rng(6);
  const auto x = testutil::random_tensor({5, 12}, rng);
  const auto w = testutil::random_tensor({7, 12}, rng);
  const auto qx = quantize(x, QuantScheme::symmetric(4, Granularity::per_token));
  const auto qw = quantize(w, QuantScheme::asymmetric(4, Granularity::per_channel), QuantRole::weight);
  const auto a = gemm_fused(qx, prepare_weight(qw, true), {}, Activation::none);
  const auto b = gemm_fused(qx, prepare_weight(qw, false), {}, Activation::none);
  EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}

TEST(FusedGemm, KeepMaskZeroesPrunedWeights) {
  std::mt19937_64 rng(7);
  const auto x = testutil::random_tensor({3, 8}, rng);
  const auto w = testutil::random_tensor({4, 8}, rng);
  const auto qx = quantize(x, QuantScheme::asymmetric(8, Granularity::per_token));
  const auto qw = quantize(w, QuantScheme::asymmetric(4, Granularity::per_channel), QuantRole::weight);
  std::vector<std::uint8_t> keep(32);
  for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = (i % 4) < 2;
  const auto got = gemm_fused(qx, prepare_weight(qw, true, keep), {}, Activation::none);
  EXPECT_LE(inf_norm_ratio(got, dequant_reference(qx, qw, {}, false, keep)), 1e-5);
}

TEST(Bench, BytesMovedArithmetic) {
  EXPECT_EQ(weight_bytes_moved(64, 64, 4), 2048u);
  EXPECT_EQ(weight_bytes_moved(64, 64, 8), 4096u);
  EXPECT_EQ(weight_bytes_moved(64, 64, 32), 16384u);
  EXPECT_EQ(weight_bytes_moved(3, 3, 4), 5u);
}

TEST(Bench, ShapeCasesAndCsv) {
  const auto s = GemmShapeCase::make(GemmCase::mlp_intermediate, 32, 16);
  EXPECT_EQ(s.m, 32u);
  EXPECT_EQ(s.n, 64u);
  EXPECT_EQ(s.k, 16u);
  const auto o = GemmShapeCase::make(GemmCase::mlp_out, 8, 16);
  EXPECT_EQ(o.n, 16u);
  EXPECT_EQ(o.k, 64u);
  std::vector<BenchRecord> rows{bench_gemm(s, 4, 3), bench_gemm(s, 8, 3)};
  std::ostringstream os;
  write_bench_csv(os, rows);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, kBenchCsvHeader);
  std::size_t n = 0;
  while (std::getline(is, line)) ++n;
  EXPECT_EQ(n, 2u);
}
