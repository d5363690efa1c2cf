#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "q4fg/model.hpp"
#include "q4fg/serialize.hpp"

namespace q4fg {

struct TuneShape {
  std::size_t batch = 1;
  std::size_t seq = 1;
  std::size_t m() const { return batch * seq; }
  friend bool operator==(const TuneShape&, const TuneShape&) = default;
};

/// Parses "bs,seq;bs,seq;...". Throws std::invalid_argument on malformed input.
std::vector<TuneShape> parse_shapes(const std::string& text);

struct StrategyTiming {
  unsigned mask = 0;
  double total_ns = 0.0;              ///< median end-to-end forward time
  std::array<double, 4> part_ns{};    ///< per-part linear time of the median run
  friend bool operator==(const StrategyTiming&, const StrategyTiming&) = default;
};

struct TuneBucket {
  TuneShape shape;
  unsigned chosen = 0;  ///< strategy mask, see QuantStrategy::bits
  std::vector<StrategyTiming> grid;
  friend bool operator==(const TuneBucket&, const TuneBucket&) = default;
};

struct StrategyTuneResult {
  QuantScheme weight;
  QuantScheme activation;
  int workers = 1;
  std::vector<TuneBucket> buckets;  ///< ascending M

  QuantStrategy strategy(const TuneBucket& b) const { return QuantStrategy::from_bits(b.chosen, weight, activation); }
  /// Smallest bucket with M >= m, otherwise the largest.
  const TuneBucket& bucket_for(std::size_t m) const;
  QuantStrategy pick(std::size_t m) const { return strategy(bucket_for(m)); }
  friend bool operator==(const StrategyTuneResult&, const StrategyTuneResult&) = default;
};

struct TuneOptions {
  QuantScheme weight = QuantScheme::symmetric(4, Granularity::per_channel);
  QuantScheme activation = QuantScheme::symmetric(4, Granularity::per_token);
  std::vector<unsigned> masks;  ///< empty: all 16 combinations
  int repeats = 5;
  int warmup = 1;
  int workers = 1;
  std::uint64_t seed = 0;
};

/// Times eval-mode forwards of every candidate strategy on random tokens of
/// each shape and keeps the fastest (ties go to the lower mask).
StrategyTuneResult tune_strategy(const Transformer<float>& model, const std::vector<TuneShape>& shapes,
                                 const TuneOptions& options = {});

/// Index of the fastest entry; ties go to the lower mask.
std::size_t argmin_timing(const std::vector<StrategyTiming>& grid);

Json to_json(const StrategyTuneResult& r);
StrategyTuneResult tune_result_from_json(const Json& j);

}  // namespace q4fg
