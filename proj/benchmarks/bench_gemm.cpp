#include <benchmark/benchmark.h>

#include <random>

#include "q4fg/ops.hpp"
#include "q4fg/pack_gemm.hpp"
#include "q4fg/quant.hpp"

namespace {

using namespace q4fg;

constexpr std::size_t kHidden = 256;

Tensor random_tensor(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, 1.0f);
  std::vector<float> v(shape_numel(shape));
  for (auto& x : v) x = n(rng);
  return Tensor(std::move(shape), std::move(v));
}

// Args: case index, tokens (M).
GemmShapeCase shape_of(const benchmark::State& state) {
  return GemmShapeCase::make(static_cast<GemmCase>(state.range(0)), static_cast<std::size_t>(state.range(1)), kHidden);
}

void set_counters(benchmark::State& state, const GemmShapeCase& s, int bits) {
  state.SetLabel(to_string(s.name));
  state.counters["weight_bytes"] = static_cast<double>(weight_bytes_moved(s.n, s.k, bits));
  state.counters["ops"] = benchmark::Counter(2.0 * static_cast<double>(s.m * s.n * s.k),
                                             benchmark::Counter::kIsIterationInvariantRate);
}

void fused(benchmark::State& state, int bits) {
  const auto s = shape_of(state);
  const auto x = random_tensor({s.m, s.k}, 1);
  const auto w = random_tensor({s.n, s.k}, 2);
  const auto qw = prepare_weight(quantize(w, QuantScheme::symmetric(bits, Granularity::per_channel), QuantRole::weight),
                                 bits == 4);
  const auto xs = QuantScheme::symmetric(bits, Granularity::per_token);
  std::vector<float> bias(s.n, 0.0f);
  for (auto _ : state) {
    const auto qx = quantize(x, xs, QuantRole::activation);
    benchmark::DoNotOptimize(gemm_fused(qx, qw, bias, Activation::none));
  }
  set_counters(state, s, bits);
}

void BM_Int4(benchmark::State& state) { fused(state, 4); }
void BM_Int8(benchmark::State& state) { fused(state, 8); }

void BM_Fp32(benchmark::State& state) {
  const auto s = shape_of(state);
  const auto x = random_tensor({s.m, s.k}, 1);
  const auto wt = random_tensor({s.k, s.n}, 2);
  std::vector<float> out(s.m * s.n);
  for (auto _ : state) {
    gemm_nn<float>(x.data(), wt.data(), out, s.m, s.n, s.k);
    benchmark::DoNotOptimize(out.data());
  }
  set_counters(state, s, 32);
}

void shapes(benchmark::internal::Benchmark* b) {
  for (int c = 0; c < 4; ++c)
    for (int m : {32, 128, 256}) b->Args({c, m});
}

}  // namespace

BENCHMARK(BM_Int4)->Apply(shapes)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_Int8)->Apply(shapes)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_Fp32)->Apply(shapes)->Unit(benchmark::kMicrosecond);

BENCHMARK_MAIN();
