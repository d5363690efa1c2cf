#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "q4fg/model.hpp"

namespace q4fg {

/// Fixed-length sequences with one label each.
struct ClassificationData {
  std::size_t seq = 0;
  std::size_t num_classes = 0;
  std::vector<std::int32_t> tokens;  ///< size() * seq
  std::vector<std::int32_t> labels;

  std::size_t size() const noexcept { return labels.size(); }
  /// The listed examples as one [indices.size(), seq] batch.
  ModelInput batch(std::span<const std::size_t> indices) const;
};

inline constexpr std::int32_t kClsToken = 0;

/// Majority-token classification. Every sequence is [CLS, s_1 .. s_{seq-1}]
/// with symbols drawn uniformly from 1..num_symbols; the label is (majority
/// symbol - 1). Draws with a tied majority are redrawn, so the label is a
/// function of the input and the Bayes-optimal accuracy is exactly 1.
/// Vocabulary size is num_symbols + 1.
ClassificationData majority_classification(std::size_t examples, std::size_t seq, std::size_t num_symbols,
                                           std::uint64_t seed);

/// First-order Markov chain over `states` tokens; row-major transition matrix.
struct MarkovChain {
  std::size_t states = 0;
  std::vector<double> transition;

  double p(std::size_t from, std::size_t to) const { return transition[from * states + to]; }
  /// Stationary distribution (power iteration to convergence).
  std::vector<double> stationary() const;
  /// H = -sum_i pi_i sum_j P_ij log P_ij, in nats.
  double entropy_rate() const;
  /// exp(entropy_rate()): the perplexity of the true conditional distribution.
  double optimal_perplexity() const;
};

/// Rows are softmax(sharpness * N(0, 1)) draws.
MarkovChain random_markov_chain(std::size_t states, double sharpness, std::uint64_t seed);

/// Token stream whose first state is drawn from the stationary distribution.
std::vector<std::int32_t> markov_lm(const MarkovChain& chain, std::size_t length, std::uint64_t seed);

/// Copy task: [x_1 .. x_L, SEP, x_1 .. x_L] with SEP = 0 and symbols in
/// 1..vocab-1. `copy_targets[t]` marks positions whose next token lies in the
/// copied half (fully determined by the prefix).
struct CopyData {
  std::size_t prefix = 0;
  std::size_t seq = 0;  ///< 2 * prefix + 1
  std::vector<std::int32_t> tokens;
  std::vector<std::uint8_t> copy_targets;  ///< seq entries, shared by every example

  std::size_t size() const noexcept { return seq == 0 ? 0 : tokens.size() / seq; }
};

CopyData copy_lm(std::size_t examples, std::size_t prefix, std::size_t vocab, std::uint64_t seed);

}  // namespace q4fg
