#include "q4fg/strategy_tuner.hpp"

#include <algorithm>
#include <chrono>
#include <random>
#include <sstream>
#include <stdexcept>

namespace q4fg {

std::vector<TuneShape> parse_shapes(const std::string& text) {
  std::vector<TuneShape> shapes;
  std::stringstream all(text);
  std::string item;
  while (std::getline(all, item, ';')) {
    if (item.empty()) continue;
    const auto comma = item.find(',');
    if (comma == std::string::npos) throw std::invalid_argument("shape '" + item + "' is not 'bs,seq'");
    TuneShape s;
    try {
      std::size_t used = 0;
      s.batch = std::stoul(item.substr(0, comma), &used);
      if (used != comma) throw std::invalid_argument(item);
      const auto rest = item.substr(comma + 1);
      s.seq = std::stoul(rest, &used);
      if (used != rest.size()) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      throw std::invalid_argument("shape '" + item + "' is not 'bs,seq'");
    }
    if (s.batch == 0 || s.seq == 0) throw std::invalid_argument("shape '" + item + "' has a zero dimension");
    shapes.push_back(s);
  }
  if (shapes.empty()) throw std::invalid_argument("at least one shape is required");
  return shapes;
}

const TuneBucket& StrategyTuneResult::bucket_for(std::size_t m) const {
  if (buckets.empty()) throw std::logic_error("tune result has no buckets");
  for (const auto& b : buckets)
    if (b.shape.m() >= m) return b;
  return buckets.back();
}

std::size_t argmin_timing(const std::vector<StrategyTiming>& grid) {
  if (grid.empty()) throw std::invalid_argument("empty timing grid");
  std::size_t best = 0;
  for (std::size_t i = 1; i < grid.size(); ++i) {
    const auto& a = grid[i];
    const auto& b = grid[best];
    if (a.total_ns < b.total_ns || (a.total_ns == b.total_ns && a.mask < b.mask)) best = i;
  }
  return best;
}

StrategyTuneResult tune_strategy(const Transformer<float>& model, const std::vector<TuneShape>& shapes,
                                 const TuneOptions& options) {
  if (shapes.empty()) throw std::invalid_argument("at least one shape is required");
  if (options.repeats < 1) throw std::invalid_argument("repeats must be >= 1");
  std::vector<unsigned> masks = options.masks;
  if (masks.empty())
    for (unsigned m = 0; m < 16; ++m) masks.push_back(m);
  for (auto m : masks)
    if (m > 15) throw std::invalid_argument("strategy mask " + std::to_string(m) + " out of range");

  StrategyTuneResult result;
  result.weight = options.weight;
  result.activation = options.activation;
  result.workers = options.workers;
  QuantStrategy::from_bits(0xF, options.weight, options.activation).validate();

  std::vector<TuneShape> sorted = shapes;
  std::stable_sort(sorted.begin(), sorted.end(), [](auto& a, auto& b) { return a.m() < b.m(); });

  std::mt19937_64 rng(options.seed);
  const auto& cfg = model.config;
  for (const auto& shape : sorted) {
    if (shape.seq > cfg.max_seq) {
      throw std::invalid_argument("shape seq " + std::to_string(shape.seq) + " exceeds max_seq " +
                                  std::to_string(cfg.max_seq));
    }
    ModelInput in;
    in.batch = shape.batch;
    in.seq = shape.seq;
    std::uniform_int_distribution<std::int32_t> tok(0, static_cast<std::int32_t>(cfg.vocab_size) - 1);
    in.tokens.resize(shape.m());
    for (auto& t : in.tokens) t = tok(rng);
    if (cfg.arch == Arch::encoder_decoder) {
      in.source_seq = shape.seq;
      in.source.resize(shape.m());
      for (auto& t : in.source) t = tok(rng);
    }

    TuneBucket bucket;
    bucket.shape = shape;
    for (auto mask : masks) {
      ForwardOptions opt;
      opt.strategy = QuantStrategy::from_bits(mask, options.weight, options.activation);
      opt.mode = Mode::eval;
      opt.workers = options.workers;
      for (int i = 0; i < options.warmup; ++i) (void)forward(model, in, opt);
      std::vector<std::pair<double, ForwardProfile>> runs;
      for (int i = 0; i < options.repeats; ++i) {
        ForwardProfile prof;
        opt.profile = &prof;
        const auto t0 = std::chrono::steady_clock::now();
        (void)forward(model, in, opt);
        const auto t1 = std::chrono::steady_clock::now();
        runs.emplace_back(std::chrono::duration<double, std::nano>(t1 - t0).count(), prof);
      }
      std::sort(runs.begin(), runs.end(), [](auto& a, auto& b) { return a.first < b.first; });
      const auto& median = runs[runs.size() / 2];
      bucket.grid.push_back(StrategyTiming{mask, median.first, median.second.part_ns});
    }
    bucket.chosen = bucket.grid[argmin_timing(bucket.grid)].mask;
    result.buckets.push_back(std::move(bucket));
  }
  return result;
}

Json to_json(const StrategyTuneResult& r) {
  Json buckets = Json::array();
  for (const auto& b : r.buckets) {
    Json grid = Json::array();
    for (const auto& t : b.grid) {
      grid.push_back(Json{{"mask", t.mask},
                          {"label", QuantStrategy::from_bits(t.mask, r.weight, r.activation).label()},
                          {"total_ns", t.total_ns},
                          {"part_ns", t.part_ns}});
    }
    buckets.push_back(Json{{"batch", b.shape.batch},
                           {"seq", b.shape.seq},
                           {"m", b.shape.m()},
                           {"chosen", b.chosen},
                           {"strategy", to_json(r.strategy(b))},
                           {"grid", grid}});
  }
  return Json{{"weight", to_json(r.weight)},
              {"activation", to_json(r.activation)},
              {"workers", r.workers},
              {"buckets", buckets}};
}

StrategyTuneResult tune_result_from_json(const Json& j) {
  StrategyTuneResult r;
  try {
    r.weight = scheme_from_json(j.at("weight"));
    r.activation = scheme_from_json(j.at("activation"));
    r.workers = j.at("workers").get<int>();
    for (const auto& b : j.at("buckets")) {
      TuneBucket bucket;
      bucket.shape = {b.at("batch").get<std::size_t>(), b.at("seq").get<std::size_t>()};
      bucket.chosen = b.at("chosen").get<unsigned>();
      for (const auto& t : b.at("grid")) {
        bucket.grid.push_back(
            StrategyTiming{t.at("mask").get<unsigned>(), t.at("total_ns").get<double>(),
                           t.at("part_ns").get<std::array<double, 4>>()});
      }
      r.buckets.push_back(std::move(bucket));
    }
  } catch (const Json::exception& e) {
    throw std::invalid_argument(std::string("malformed tune result: ") + e.what());
  }
  if (r.buckets.empty()) throw std::invalid_argument("tune result has no buckets");
  return r;
}

}  // namespace q4fg
