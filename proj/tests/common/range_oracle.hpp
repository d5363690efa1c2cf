#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "q4fg/analysis.hpp"

namespace q4fg::props {

// Brute force: per batch and position, the average over sequences of max - min.
inline PositionalStats range_brute_force(const std::vector<Tensor>& acts, std::size_t seq) {
  std::vector<std::vector<double>> per_batch;
  for (const auto& a : acts) {
    const std::size_t f = a.dim(1), b = a.dim(0) / seq;
    std::vector<double> v(seq, 0.0);
    for (std::size_t s = 0; s < b; ++s)
      for (std::size_t p = 0; p < seq; ++p) {
        double lo = 1e300, hi = -1e300;
        for (std::size_t k = 0; k < f; ++k) {
          const double x = a.data()[(s * seq + p) * f + k];
          lo = std::min(lo, x);
          hi = std::max(hi, x);
        }
        v[p] += (hi - lo) / static_cast<double>(b);
      }
    per_batch.push_back(v);
  }
  PositionalStats out;
  for (std::size_t p = 0; p < seq; ++p) {
    double m = 0;
    for (auto& v : per_batch) m += v[p];
    m /= static_cast<double>(per_batch.size());
    double var = 0;
    for (auto& v : per_batch) var += (v[p] - m) * (v[p] - m);
    out.mean.push_back(m);
    out.std.push_back(std::sqrt(var / static_cast<double>(per_batch.size())));
  }
  return out;
}

}  // namespace q4fg::props
