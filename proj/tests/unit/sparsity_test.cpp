#include <gtest/gtest.h>

#include <algorithm>

#include "q4fg/sparsity.hpp"
#include "test_util.hpp"

using namespace q4fg;

namespace {

// Independent scan: every aligned run of m along the last dim has exactly n zeros.
bool nm_scan(const SparsityMask& mask, std::size_t n, std::size_t m) {
  const std::size_t cols = mask.shape.back();
  for (std::size_t r = 0; r < mask.keep.size() / cols; ++r)
    for (std::size_t c0 = 0; c0 + m <= cols; c0 += m) {
      std::size_t zeros = 0;
      for (std::size_t c = c0; c < c0 + m; ++c) zeros += mask.keep[r * cols + c] == 0;
      if (zeros != n) return false;
    }
  return true;
}

}  // namespace

TEST(Sparsity, PairNmPrunesSmallestInEveryRun) {
  const Tensor w({2, 8}, {0.1f, -4, 3, 0.2f, 5, -0.5f, 0.4f, 6, 1, 1, 1, 1, -2, 0, 3, 0});
  const auto mask = l1_mask(w, 0.5, MaskStructure::pair_nm, NmPattern{2, 4});
  EXPECT_TRUE(mask.satisfies_structure());
  EXPECT_TRUE(nm_scan(mask, 2, 4));
  const std::vector<std::uint8_t> expect{0, 1, 1, 0, 1, 0, 0, 1, 0, 0, 1, 1, 1, 0, 1, 0};
  EXPECT_EQ(mask.keep, expect);  // ties prune the lower index first
}

TEST(Sparsity, PairNmOnRandomWeights) {
  std::mt19937_64 rng(1);
  for (auto [n, m] : {std::pair<std::size_t, std::size_t>{2, 4}, {1, 4}, {4, 8}}) {
    const auto w = testutil::random_tensor({6, 16}, rng);
    const auto mask = l1_mask(w, double(n) / double(m), MaskStructure::pair_nm, NmPattern{n, m});
    EXPECT_TRUE(nm_scan(mask, n, m));
    EXPECT_DOUBLE_EQ(mask.sparsity(), double(n) / double(m));
    // Every kept magnitude in a run is >= every pruned magnitude in it.
    for (std::size_t r = 0; r < 6; ++r)
      for (std::size_t c0 = 0; c0 < 16; c0 += m) {
        float kept_min = 1e30f, pruned_max = 0;
        for (std::size_t c = c0; c < c0 + m; ++c) {
          const float a = std::fabs(w.data()[r * 16 + c]);
          if (mask.keep[r * 16 + c]) kept_min = std::min(kept_min, a);
          else pruned_max = std::max(pruned_max, a);
        }
        EXPECT_GE(kept_min, pruned_max);
      }
  }
}

TEST(Sparsity, PairNmRequiresMatchingRatioAndWidth) {
  std::mt19937_64 rng(2);
  const auto w = testutil::random_tensor({2, 8}, rng);
  EXPECT_ANY_THROW(l1_mask(w, 0.3, MaskStructure::pair_nm, NmPattern{2, 4}));
  const auto odd = testutil::random_tensor({2, 6}, rng);
  EXPECT_ANY_THROW(l1_mask(odd, 0.5, MaskStructure::pair_nm, NmPattern{2, 4}));
}

TEST(Sparsity, UnstructuredCount) {
  std::mt19937_64 rng(3);
  const auto w = testutil::random_tensor({5, 7}, rng);
  const auto mask = l1_mask(w, 0.4, MaskStructure::unstructured);
  EXPECT_EQ(mask.pruned_count(), 14u);  // round(0.4 * 35)
  EXPECT_TRUE(mask.satisfies_structure());
}

TEST(Sparsity, BitPackingRoundTrip) {
  SparsityMask m;
  m.shape = {3, 5};
  m.keep = {1, 0, 1, 1, 0, 0, 0, 1, 1, 1, 0, 1, 0, 1, 1};
  const auto bits = m.to_bits();
  ASSERT_EQ(bits.size(), 2u);
  EXPECT_EQ(bits[0], 0b10001101);  // LSB first
  EXPECT_EQ(SparsityMask::keep_from_bits(bits, 15), m.keep);
}

TEST(Sparsity, StringRoundTrips) {
  EXPECT_EQ(parse_nm("2:4"), (NmPattern{2, 4}));
  EXPECT_ANY_THROW(parse_nm("4:2"));
  EXPECT_ANY_THROW(parse_nm("x"));
  for (auto o : {CompositionOrder::prune_then_quant, CompositionOrder::quant_then_prune})
    EXPECT_EQ(composition_order_from_string(to_string(o)), o);
  for (auto s : {MaskStructure::unstructured, MaskStructure::pair_nm})
    EXPECT_EQ(mask_structure_from_string(to_string(s)), s);
}

TEST(Movement, ScoreUpdateOracle) {
  const std::vector<float> s{0.0f, 1.0f}, w{2.0f, -1.0f}, g{0.5f, 3.0f};
  const auto out = movement_scores_update(s, w, g, 0.1);
  EXPECT_FLOAT_EQ(out[0], -0.1f);
  EXPECT_FLOAT_EQ(out[1], 1.3f);
}

TEST(Movement, KeepsWeightsMovingAwayFromZero) {
  // Weight 0 grows (w*g < 0), weight 1 shrinks: after a refresh, 1 is pruned.
  SparsityMask init = all_ones_mask({1, 2});
  MovementPruner p(init, 0.5, 1.0, 2);
  const std::vector<float> w{1.0f, 1.0f}, g{-1.0f, 1.0f};
  p.update(w, g);
  EXPECT_EQ(p.mask().keep, (std::vector<std::uint8_t>{1, 1}));  // not refreshed yet
  p.update(w, g);
  EXPECT_EQ(p.mask().keep, (std::vector<std::uint8_t>{1, 0}));
  EXPECT_EQ(p.mask().origin, MaskOrigin::movement);
  EXPECT_FALSE(p.mask().frozen());
}

TEST(Composition, QuantThenPruneExactZeroPruneThenQuantWithinHalfScale) {
  std::mt19937_64 rng(4);
  const auto w = testutil::random_tensor({4, 8}, rng);
  const auto mask = l1_mask(w, 0.5, MaskStructure::pair_nm, NmPattern{2, 4});
  for (auto scheme : {QuantScheme::symmetric(4, Granularity::per_channel),
                      QuantScheme::asymmetric(4, Granularity::per_channel)}) {
    const auto qp = masked_quantized_weight(w, mask, scheme, CompositionOrder::quant_then_prune);
    const auto pq = masked_quantized_weight(w, mask, scheme, CompositionOrder::prune_then_quant);
    const Tensor pruned = [&] {
      std::vector<float> v(w.data().begin(), w.data().end());
      for (std::size_t i = 0; i < v.size(); ++i) v[i] *= mask.keep[i];
      return Tensor(w.shape(), v);
    }();
    const auto q = quantize(pruned, scheme, QuantRole::weight);
    for (std::size_t i = 0; i < mask.keep.size(); ++i) {
      if (mask.keep[i]) continue;
      EXPECT_EQ(qp.data()[i], 0.0f);
      EXPECT_LE(std::fabs(pq.data()[i]), q.params.scales[i / 8] / 2 + 1e-7f);
    }
  }
}
