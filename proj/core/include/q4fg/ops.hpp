#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "q4fg/tensor.hpp"

namespace q4fg {

/// Which key positions a query may attend to.
enum class MaskMode {
  full,    ///< every key visible
  causal,  ///< key index <= query index; requires equal lengths
  cross,   ///< decoder queries over encoder keys; every key visible
};

inline bool attention_allowed(MaskMode mode, std::size_t query, std::size_t key) noexcept {
  return mode != MaskMode::causal || key <= query;
}

/// tanh-approximation GELU. Shared by the autograd op and the GEMM epilogue so
/// both produce identical bits for identical inputs.
template <typename T>
inline T gelu_scalar(T x) noexcept {
  constexpr double kSqrt2OverPi = 0.7978845608028654;
  constexpr double kCubic = 0.044715;
  const double v = static_cast<double>(x);
  return static_cast<T>(0.5 * v * (1.0 + std::tanh(kSqrt2OverPi * (v + kCubic * v * v * v))));
}

template <typename T>
inline double gelu_derivative(T x) noexcept {
  constexpr double kSqrt2OverPi = 0.7978845608028654;
  constexpr double kCubic = 0.044715;
  const double v = static_cast<double>(x);
  const double t = std::tanh(kSqrt2OverPi * (v + kCubic * v * v * v));
  return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kSqrt2OverPi * (1.0 + 3.0 * kCubic * v * v);
}

// Raw kernels. Every output element is accumulated in 64 bits in ascending k
// order starting from 0, then rounded once to T.

/// c[M,N] = a[M,K] * b[K,N]
template <typename T>
void gemm_nn(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m,
             std::size_t n, std::size_t k);

template <typename T>
std::vector<T> transpose(std::span<const T> src, std::size_t rows, std::size_t cols);

// Elementwise.
template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor);
/// x[..., N] + bias[N]
template <typename T>
BasicTensor<T> add_bias(const BasicTensor<T>& x, const BasicTensor<T>& bias);
template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape);

// Linear algebra.
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);
/// a[M,K] * w[N,K]^T, the layout of a linear layer's weight.
template <typename T>
BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& w);
/// x * w^T + bias; `bias` may be undefined.
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& bias);

// Normalization and activations.
template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, double eps = 1e-5);
template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x);
/// Inverted dropout. Identity (same handle) when `rate` is 0.
template <typename T>
BasicTensor<T> dropout(const BasicTensor<T>& x, double rate, std::mt19937_64& rng);

// Indexing.
template <typename T>
BasicTensor<T> gather_rows(const BasicTensor<T>& table, std::span<const std::int32_t> rows);
/// Columns [begin, end) of a 2-D tensor.
template <typename T>
BasicTensor<T> slice_cols(const BasicTensor<T>& x, std::size_t begin, std::size_t end);

// Attention. Head tensors are [B, H, T, Dh].
template <typename T>
BasicTensor<T> split_heads(const BasicTensor<T>& x, std::size_t batch, std::size_t heads);
template <typename T>
BasicTensor<T> merge_heads(const BasicTensor<T>& x);
/// q k^T / sqrt(Dh). Disallowed positions hold 0 (they never reach softmax).
template <typename T>
BasicTensor<T> attention_scores(const BasicTensor<T>& q, const BasicTensor<T>& k, MaskMode mode);
/// Row softmax over allowed positions; disallowed positions get probability 0.
template <typename T>
BasicTensor<T> masked_softmax(const BasicTensor<T>& scores, MaskMode mode);
template <typename T>
BasicTensor<T> attention_apply(const BasicTensor<T>& probs, const BasicTensor<T>& v);

template <typename T>
struct AttentionOutput {
  BasicTensor<T> out;     ///< [B, H, Tq, Dh]
  BasicTensor<T> scores;  ///< pre-softmax, [B, H, Tq, Tk]
  BasicTensor<T> probs;   ///< [B, H, Tq, Tk]
};

template <typename T>
AttentionOutput<T> softmax_attention(const BasicTensor<T>& q, const BasicTensor<T>& k,
                                     const BasicTensor<T>& v, MaskMode mode);

// Reductions and losses. All return shape [1].
template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x);

inline constexpr std::int32_t kIgnoreTarget = -1;

/// Mean next-class NLL over rows of logits[..., C]; rows whose target is
/// kIgnoreTarget are skipped.
template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, std::span<const std::int32_t> targets);
/// T^2 * mean_rows KL(softmax(teacher/T) || softmax(student/T)); teacher is a constant.
template <typename T>
BasicTensor<T> soft_target_kl(const BasicTensor<T>& student, const BasicTensor<T>& teacher,
                              double temperature);
/// Mean squared error over elements where `include` is nonzero (all when empty).
template <typename T>
BasicTensor<T> mse(const BasicTensor<T>& a, const BasicTensor<T>& b,
                   std::span<const std::uint8_t> include = {});

}  // namespace q4fg
