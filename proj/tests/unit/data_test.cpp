#include <gtest/gtest.h>

#include <map>

#include "q4fg/data.hpp"

using namespace q4fg;

TEST(Majority, LabelIsStrictMajoritySymbol) {
  const auto d = majority_classification(300, 9, 4, 1);
  ASSERT_EQ(d.size(), 300u);
  EXPECT_EQ(d.num_classes, 4u);
  for (std::size_t e = 0; e < d.size(); ++e) {
    EXPECT_EQ(d.tokens[e * 9], kClsToken);
    std::map<int, int> counts;
    for (std::size_t t = 1; t < 9; ++t) {
      const int s = d.tokens[e * 9 + t];
      ASSERT_GE(s, 1);
      ASSERT_LE(s, 4);
      ++counts[s];
    }
    int best = 0, best_count = -1, ties = 0;
    for (auto [s, c] : counts) {
      if (c > best_count) {
        best = s;
        best_count = c;
        ties = 0;
      } else if (c == best_count) {
        ++ties;
      }
    }
    EXPECT_EQ(ties, 0);
    EXPECT_EQ(d.labels[e], best - 1);
  }
}

TEST(Majority, DeterministicAndBatching) {
  const auto a = majority_classification(20, 5, 3, 7);
  const auto b = majority_classification(20, 5, 3, 7);
  EXPECT_EQ(a.tokens, b.tokens);
  EXPECT_EQ(a.labels, b.labels);
  const std::vector<std::size_t> idx{3, 0};
  const auto in = a.batch(idx);
  EXPECT_EQ(in.batch, 2u);
  EXPECT_EQ(in.seq, 5u);
  EXPECT_TRUE(std::equal(in.tokens.begin(), in.tokens.begin() + 5, a.tokens.begin() + 15));
}

TEST(Markov, RowsAreDistributionsAndStationaryIsFixedPoint) {
  const auto c = random_markov_chain(6, 2.0, 3);
  for (std::size_t i = 0; i < 6; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < 6; ++j) s += c.p(i, j);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  const auto pi = c.stationary();
  for (std::size_t j = 0; j < 6; ++j) {
    double v = 0;
    for (std::size_t i = 0; i < 6; ++i) v += pi[i] * c.p(i, j);
    EXPECT_NEAR(v, pi[j], 1e-10);
  }
}

TEST(Markov, TwoStateEntropyRateClosedForm) {
  // P = [[1-a, a], [b, 1-b]]: pi = (b, a) / (a + b)
  const double a = 0.3, b = 0.1;
  MarkovChain c{2, {1 - a, a, b, 1 - b}};
  auto h2 = [](double p) { return -p * std::log(p) - (1 - p) * std::log(1 - p); };
  const double expect = (b * h2(a) + a * h2(b)) / (a + b);
  EXPECT_NEAR(c.entropy_rate(), expect, 1e-10);
  EXPECT_NEAR(c.optimal_perplexity(), std::exp(expect), 1e-9);
}

TEST(Markov, StreamFollowsTransitions) {
  MarkovChain c{3, {0, 1, 0, 0, 0, 1, 1, 0, 0}};  // deterministic cycle 0->1->2->0
  const auto s = markov_lm(c, 50, 4);
  ASSERT_EQ(s.size(), 50u);
  for (std::size_t i = 1; i < s.size(); ++i) EXPECT_EQ(s[i], (s[i - 1] + 1) % 3);
}

TEST(Markov, EmpiricalTransitionsConverge) {
  const auto c = random_markov_chain(4, 1.0, 5);
  const auto s = markov_lm(c, 200000, 6);
  std::vector<double> counts(16, 0.0), rows(4, 0.0);
  for (std::size_t i = 1; i < s.size(); ++i) {
    counts[s[i - 1] * 4 + s[i]] += 1;
    rows[s[i - 1]] += 1;
  }
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(counts[i * 4 + j] / rows[i], c.p(i, j), 0.01);
}

TEST(Copy, LayoutAndTargets) {
  const auto d = copy_lm(10, 4, 8, 2);
  EXPECT_EQ(d.seq, 9u);
  EXPECT_EQ(d.size(), 10u);
  for (std::size_t e = 0; e < 10; ++e) {
    EXPECT_EQ(d.tokens[e * 9 + 4], 0);
    for (std::size_t t = 0; t < 4; ++t) {
      EXPECT_GE(d.tokens[e * 9 + t], 1);
      EXPECT_EQ(d.tokens[e * 9 + t], d.tokens[e * 9 + 5 + t]);
    }
  }
  const std::vector<std::uint8_t> expect{0, 0, 0, 0, 1, 1, 1, 1, 0};
  EXPECT_EQ(d.copy_targets, expect);
}
