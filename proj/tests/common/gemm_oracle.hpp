#pragma once

// Integer GEMM against a 64-bit triple-loop oracle, shared by the unit and
// acceptance suites.

#include <random>
#include <sstream>
#include <string>

#include "q4fg/pack_gemm.hpp"

namespace q4fg::props {

inline std::vector<std::int64_t> oracle_nt(const std::vector<std::int32_t>& a, const std::vector<std::int32_t>& w,
                                           std::size_t m, std::size_t n, std::size_t k) {
  std::vector<std::int64_t> c(m * n, 0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p)
        c[i * n + j] += static_cast<std::int64_t>(a[i * k + p]) * static_cast<std::int64_t>(w[j * k + p]);
  return c;
}

/// Values and the matching operands in int8 / uint8 / packed storage.
struct Operand {
  std::vector<std::int32_t> values;
  IntMatrix plain;
  IntMatrix packed;  ///< 4-bit operands only
};

inline Operand random_operand(std::size_t rows, std::size_t cols, int bits, bool is_signed, std::mt19937_64& rng) {
  const int lo = is_signed ? -(1 << (bits - 1)) : 0;
  const int hi = is_signed ? (1 << (bits - 1)) - 1 : (1 << bits) - 1;
  std::uniform_int_distribution<int> d(lo, hi);
  Operand o;
  o.values.resize(rows * cols);
  for (auto& v : o.values) v = d(rng);
  if (is_signed) {
    std::vector<std::int8_t> s(o.values.begin(), o.values.end());
    o.plain = IntMatrix::from_int8(rows, cols, s);
    if (bits == 4) o.packed = IntMatrix::from_packed(pack_int4(rows, cols, s, NibbleEncoding::twos_complement));
  } else {
    std::vector<std::uint8_t> u(o.values.begin(), o.values.end());
    o.plain = IntMatrix::from_uint8(rows, cols, u);
    if (bits == 4) {
      std::vector<std::int8_t> s(o.values.begin(), o.values.end());
      o.packed = IntMatrix::from_packed(pack_int4(rows, cols, s, NibbleEncoding::unsigned_int));
    }
  }
  return o;
}

struct GemmCheck {
  std::size_t shapes = 0;
  std::size_t mismatches = 0;
  std::string first_failure;
};

/// `shapes` random (M, N, K) <= max_dim per bit width; every storage
/// combination is compared with the oracle, and packed with unpacked.
inline GemmCheck gemm_oracle_sweep(std::size_t shapes, std::size_t max_dim, int bits, std::uint64_t seed) {
  GemmCheck r;
  std::mt19937_64 rng(seed);
  auto fail = [&](const std::string& what, std::size_t m, std::size_t n, std::size_t k) {
    if (r.mismatches++ == 0) {
      std::ostringstream os;
      os << bits << "-bit " << what << " at M=" << m << " N=" << n << " K=" << k;
      r.first_failure = os.str();
    }
  };
  for (r.shapes = 0; r.shapes < shapes; ++r.shapes) {
    const std::size_t m = 1 + rng() % max_dim, n = 1 + rng() % max_dim, k = 1 + rng() % max_dim;
    const bool a_signed = rng() % 2, w_signed = rng() % 2;
    const auto a = random_operand(m, k, bits, a_signed, rng);
    const auto w = random_operand(n, k, bits, w_signed, rng);
    const auto ref = oracle_nt(a.values, w.values, m, n, k);
    auto equal = [&](const std::vector<std::int32_t>& got) {
      if (got.size() != ref.size()) return false;
      for (std::size_t i = 0; i < ref.size(); ++i)
        if (static_cast<std::int64_t>(got[i]) != ref[i]) return false;
      return true;
    };
    const auto plain = gemm_int_nt(a.plain, w.plain);
    if (!equal(plain)) fail("unpacked gemm_int_nt differs from oracle", m, n, k);
    if (bits == 4) {
      const auto packed = gemm_int_nt(a.packed, w.packed);
      if (packed != plain) fail("packed differs from unpacked", m, n, k);
      const auto mixed = gemm_int_nt(a.plain, w.packed);
      if (mixed != plain) fail("mixed storage differs from unpacked", m, n, k);
    }
    // [M,K] x [K,N] entry point with the transposed weight.
    std::vector<std::int32_t> wt(k * n);
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) wt[p * n + j] = w.values[j * k + p];
    std::vector<std::int8_t> wt8(wt.begin(), wt.end());
    std::vector<std::uint8_t> wtu(wt.begin(), wt.end());
    const auto b = w_signed ? IntMatrix::from_int8(k, n, wt8) : IntMatrix::from_uint8(k, n, wtu);
    if (gemm_int(a.plain, b) != plain) fail("gemm_int differs from gemm_int_nt", m, n, k);
  }
  return r;
}

}  // namespace q4fg::props
