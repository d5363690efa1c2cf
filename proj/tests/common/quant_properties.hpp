#pragma once

// Randomized quantizer contract checks shared by the unit and acceptance suites.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <string>

#include "q4fg/quant.hpp"

namespace q4fg::props {

struct PropertyResult {
  std::size_t trials = 0;
  std::size_t violations = 0;
  std::string first_failure;

  bool ok() const { return violations == 0; }
  void fail(const std::string& why) {
    if (violations++ == 0) first_failure = why;
  }
};

struct Case {
  Tensor x;
  QuantScheme scheme;
  QuantRole role = QuantRole::activation;
};

inline Tensor gaussian(Shape shape, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> n(0.0, stddev);
  std::vector<float> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<float>(n(rng));
  return Tensor(std::move(shape), std::move(v));
}

/// Random 2-D tensor with a random scheme valid for a random role.
inline Case random_case(std::mt19937_64& rng) {
  Case c;
  const std::size_t rows = 1 + rng() % 12, cols = 1 + rng() % 24;
  const double stddev = std::pow(10.0, std::uniform_real_distribution<double>(-3, 2)(rng));
  c.x = gaussian({rows, cols}, rng, stddev);
  c.role = rng() % 2 ? QuantRole::weight : QuantRole::activation;
  c.scheme.bits = rng() % 2 ? 4 : 8;
  c.scheme.mapping = rng() % 2 ? Mapping::symmetric : Mapping::asymmetric;
  switch (rng() % 3) {
    case 0: c.scheme.granularity = Granularity::per_tensor; break;
    case 1:
      c.scheme.granularity = Granularity::per_group;
      c.scheme.groups = 1 + rng() % (rows * cols);
      break;
    default:
      c.scheme.granularity = c.role == QuantRole::weight ? Granularity::per_channel : Granularity::per_token;
  }
  if (c.role == QuantRole::activation && rng() % 3 == 0) {
    const double a = std::uniform_real_distribution<double>(-2, 0.5)(rng) * stddev;
    const double b = a + std::uniform_real_distribution<double>(0.1, 3)(rng) * stddev;
    c.scheme.clip = ClipRange{static_cast<float>(a), static_cast<float>(b)};
  }
  return c;
}

inline std::string where(const Case& c, std::size_t i) {
  std::ostringstream os;
  os << c.scheme.describe() << " shape " << shape_str(c.x.shape()) << " element " << i;
  return os.str();
}

inline PropertyResult range_containment(std::size_t trials, std::uint64_t seed) {
  PropertyResult r;
  std::mt19937_64 rng(seed);
  for (r.trials = 0; r.trials < trials; ++r.trials) {
    const auto c = random_case(rng);
    const auto q = quantize(c.x, c.scheme, c.role);
    for (std::size_t i = 0; i < q.numel(); ++i) {
      if (q.code(i) < c.scheme.code_min() || q.code(i) > c.scheme.code_max()) {
        r.fail(where(c, i) + ": code " + std::to_string(q.code(i)) + " out of range");
        break;
      }
    }
  }
  return r;
}

/// |clip(x) - dequantize(quantize(x))| <= scale/2 for every element, up to
/// float evaluation slack.
inline PropertyResult roundtrip_bound(std::size_t trials, std::uint64_t seed) {
  PropertyResult r;
  std::mt19937_64 rng(seed);
  for (r.trials = 0; r.trials < trials; ++r.trials) {
    const auto c = random_case(rng);
    const auto q = quantize(c.x, c.scheme, c.role);
    const auto d = dequantize(q);
    const auto layout = q.layout();
    for (std::size_t i = 0; i < q.numel(); ++i) {
      const double x = apply_clip(c.x.data()[i], c.scheme.clip);
      const double s = q.params.scales[layout.slot(i)];
      const double err = std::fabs(x - static_cast<double>(d.data()[i]));
      const double slack = 1e-6 * (std::fabs(x) + s);
      if (err > s / 2 + slack) {
        std::ostringstream os;
        os << where(c, i) << ": error " << err << " > scale/2 = " << s / 2;
        r.fail(os.str());
        break;
      }
    }
  }
  return r;
}

/// Within one slot, x_i <= x_j implies q(x_i) <= q(x_j).
inline PropertyResult monotonicity(std::size_t trials, std::uint64_t seed) {
  PropertyResult r;
  std::mt19937_64 rng(seed);
  for (r.trials = 0; r.trials < trials; ++r.trials) {
    const auto c = random_case(rng);
    const auto q = quantize(c.x, c.scheme, c.role);
    const auto layout = q.layout();
    for (std::size_t s = 0; s < layout.count; ++s) {
      std::vector<std::size_t> idx(layout.end(s, q.numel()) - layout.begin(s));
      std::iota(idx.begin(), idx.end(), layout.begin(s));
      std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return c.x.data()[a] < c.x.data()[b]; });
      for (std::size_t k = 1; k < idx.size(); ++k) {
        if (q.code(idx[k - 1]) > q.code(idx[k])) {
          r.fail(where(c, idx[k]) + ": codes decrease with increasing input");
          break;
        }
      }
    }
  }
  return r;
}

inline double rms_error(const Tensor& x, const QuantScheme& s, QuantRole role) {
  const auto d = dequantize(quantize(x, s, role));
  double se = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double e = static_cast<double>(x.data()[i]) - static_cast<double>(d.data()[i]);
    se += e * e;
  }
  return std::sqrt(se / static_cast<double>(x.numel()));
}

/// Symmetric per-tensor vs per-group on nested tensors: every fine group's
/// max |x| is the tensor max divided by a power of two, so each fine grid
/// contains every coarse grid point inside that group's range and the finer
/// scheme can never be worse.
inline PropertyResult granularity_refinement(std::size_t trials, std::uint64_t seed) {
  PropertyResult r;
  std::mt19937_64 rng(seed);
  for (r.trials = 0; r.trials < trials; ++r.trials) {
    const std::size_t groups = 2 + rng() % 6, size = 1 + rng() % 16;
    const int bits = rng() % 2 ? 4 : 8;
    const float top = std::ldexp(1.0f, static_cast<int>(rng() % 9) - 4);
    const std::size_t anchor = rng() % groups;
    std::vector<float> v(groups * size);
    std::uniform_real_distribution<float> u(-1.0f, 1.0f);
    for (std::size_t g = 0; g < groups; ++g) {
      float peak = 0.0f;
      for (std::size_t k = 0; k < size; ++k) {
        v[g * size + k] = u(rng);
        peak = std::max(peak, std::fabs(v[g * size + k]));
      }
      const float target = g == anchor ? top : std::ldexp(top, -static_cast<int>(rng() % 4));
      for (std::size_t k = 0; k < size; ++k) v[g * size + k] = v[g * size + k] / peak * target;
      // Pin the group maximum to exactly `target`.
      v[g * size + rng() % size] = rng() % 2 ? target : -target;
    }
    const Tensor x({groups * size}, v);
    const double coarse = rms_error(x, QuantScheme::symmetric(bits), QuantRole::weight);
    const double fine =
        rms_error(x, QuantScheme::symmetric(bits, Granularity::per_group, groups), QuantRole::weight);
    if (fine > coarse * (1 + 1e-6) + 1e-12) {
      std::ostringstream os;
      os << groups << "x" << size << " " << bits << "-bit: per-group RMS " << fine << " > per-tensor " << coarse;
      r.fail(os.str());
    }
  }
  return r;
}

/// Asymmetric vs symmetric per-tensor RMS on all-positive tensors of at least
/// 64 elements.
inline PropertyResult asymmetric_not_worse_on_positive(std::size_t trials, std::uint64_t seed) {
  PropertyResult r;
  std::mt19937_64 rng(seed);
  for (r.trials = 0; r.trials < trials; ++r.trials) {
    const std::size_t n = 64 + rng() % 449;
    const int bits = rng() % 2 ? 4 : 8;
    const double lo = std::uniform_real_distribution<double>(0.0, 5.0)(rng);
    const double hi = lo + std::uniform_real_distribution<double>(0.01, 10.0)(rng);
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<float> v(n);
    for (auto& e : v) e = static_cast<float>(u(rng));
    const Tensor x({n}, v);
    const double sym = rms_error(x, QuantScheme::symmetric(bits), QuantRole::weight);
    const double asym = rms_error(x, QuantScheme::asymmetric(bits), QuantRole::weight);
    if (asym > sym * (1 + 1e-6)) {
      std::ostringstream os;
      os << "n=" << n << " " << bits << "-bit on [" << lo << ", " << hi << "]: asym " << asym << " > sym " << sym;
      r.fail(os.str());
    }
  }
  return r;
}

}  // namespace q4fg::props
