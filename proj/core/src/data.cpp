#include "q4fg/data.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace q4fg {

ModelInput ClassificationData::batch(std::span<const std::size_t> indices) const {
  ModelInput in;
  in.batch = indices.size();
  in.seq = seq;
  in.tokens.reserve(indices.size() * seq);
  for (auto i : indices) {
    if (i >= size()) throw std::out_of_range("example index " + std::to_string(i) + " out of range");
    in.tokens.insert(in.tokens.end(), tokens.begin() + static_cast<std::ptrdiff_t>(i * seq),
                     tokens.begin() + static_cast<std::ptrdiff_t>((i + 1) * seq));
  }
  return in;
}

ClassificationData majority_classification(std::size_t examples, std::size_t seq, std::size_t num_symbols,
                                           std::uint64_t seed) {
  if (seq < 2) throw std::invalid_argument("majority task needs seq >= 2");
  if (num_symbols < 2) throw std::invalid_argument("majority task needs at least 2 symbols");
  ClassificationData d;
  d.seq = seq;
  d.num_classes = num_symbols;
  d.tokens.reserve(examples * seq);
  d.labels.reserve(examples);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::int32_t> sym(1, static_cast<std::int32_t>(num_symbols));
  std::vector<std::int32_t> row(seq);
  std::vector<std::size_t> counts(num_symbols + 1);
  for (std::size_t e = 0; e < examples; ++e) {
    for (;;) {
      row[0] = kClsToken;
      std::fill(counts.begin(), counts.end(), 0);
      for (std::size_t t = 1; t < seq; ++t) {
        row[t] = sym(rng);
        ++counts[static_cast<std::size_t>(row[t])];
      }
      const auto best = std::max_element(counts.begin() + 1, counts.end());
      if (std::count(counts.begin() + 1, counts.end(), *best) != 1) continue;
      d.labels.push_back(static_cast<std::int32_t>(best - counts.begin()) - 1);
      break;
    }
    d.tokens.insert(d.tokens.end(), row.begin(), row.end());
  }
  return d;
}

std::vector<double> MarkovChain::stationary() const {
  if (states == 0 || transition.size() != states * states) throw std::invalid_argument("malformed Markov chain");
  std::vector<double> pi(states, 1.0 / static_cast<double>(states)), next(states);
  for (int iter = 0; iter < 100000; ++iter) {
    std::fill(next.begin(), next.end(), 0.0);
    for (std::size_t i = 0; i < states; ++i)
      for (std::size_t j = 0; j < states; ++j) next[j] += pi[i] * p(i, j);
    double diff = 0.0;
    for (std::size_t j = 0; j < states; ++j) diff = std::max(diff, std::fabs(next[j] - pi[j]));
    pi.swap(next);
    if (diff < 1e-15) break;
  }
  return pi;
}

double MarkovChain::entropy_rate() const {
  const auto pi = stationary();
  double h = 0.0;
  for (std::size_t i = 0; i < states; ++i)
    for (std::size_t j = 0; j < states; ++j) {
      const double pij = p(i, j);
      if (pij > 0.0) h -= pi[i] * pij * std::log(pij);
    }
  return h;
}

double MarkovChain::optimal_perplexity() const { return std::exp(entropy_rate()); }

MarkovChain random_markov_chain(std::size_t states, double sharpness, std::uint64_t seed) {
  if (states < 2) throw std::invalid_argument("Markov chain needs at least 2 states");
  MarkovChain c;
  c.states = states;
  c.transition.resize(states * states);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t i = 0; i < states; ++i) {
    double total = 0.0;
    for (std::size_t j = 0; j < states; ++j) {
      const double w = std::exp(sharpness * normal(rng));
      c.transition[i * states + j] = w;
      total += w;
    }
    for (std::size_t j = 0; j < states; ++j) c.transition[i * states + j] /= total;
  }
  return c;
}

std::vector<std::int32_t> markov_lm(const MarkovChain& chain, std::size_t length, std::uint64_t seed) {
  std::vector<std::int32_t> out;
  if (length == 0) return out;
  out.reserve(length);
  std::mt19937_64 rng(seed);
  const auto pi = chain.stationary();
  std::discrete_distribution<std::size_t> start(pi.begin(), pi.end());
  std::vector<std::discrete_distribution<std::size_t>> rows;
  for (std::size_t i = 0; i < chain.states; ++i)
    rows.emplace_back(chain.transition.begin() + static_cast<std::ptrdiff_t>(i * chain.states),
                      chain.transition.begin() + static_cast<std::ptrdiff_t>((i + 1) * chain.states));
  std::size_t s = start(rng);
  out.push_back(static_cast<std::int32_t>(s));
  while (out.size() < length) {
    s = rows[s](rng);
    out.push_back(static_cast<std::int32_t>(s));
  }
  return out;
}

CopyData copy_lm(std::size_t examples, std::size_t prefix, std::size_t vocab, std::uint64_t seed) {
  if (prefix == 0) throw std::invalid_argument("copy task needs a nonempty prefix");
  if (vocab < 2) throw std::invalid_argument("copy task needs a vocabulary of at least 2");
  CopyData d;
  d.prefix = prefix;
  d.seq = 2 * prefix + 1;
  d.copy_targets.assign(d.seq, 0);
  for (std::size_t t = prefix; t + 1 < d.seq; ++t) d.copy_targets[t] = 1;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::int32_t> sym(1, static_cast<std::int32_t>(vocab) - 1);
  d.tokens.reserve(examples * d.seq);
  std::vector<std::int32_t> x(prefix);
  for (std::size_t e = 0; e < examples; ++e) {
    for (auto& v : x) v = sym(rng);
    d.tokens.insert(d.tokens.end(), x.begin(), x.end());
    d.tokens.push_back(0);
    d.tokens.insert(d.tokens.end(), x.begin(), x.end());
  }
  return d;
}

}  // namespace q4fg
