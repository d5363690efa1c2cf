#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "q4fg/tensor.hpp"

namespace q4fg {

enum class Mapping { symmetric, asymmetric };
/// per_channel is one group per row of a weight ("row-wise"); per_token is
/// one group per row of an activation.
enum class Granularity { per_tensor, per_group, per_channel, per_token };
enum class Rounding { half_to_even };

/// What a tensor is used as; weights and activations follow different rules
/// (weights are never clipped and never quantized per token).
enum class QuantRole { weight, activation };

struct ClipRange {
  float lo = 0.0f;
  float hi = 0.0f;
  friend bool operator==(const ClipRange&, const ClipRange&) = default;
};

class SchemeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Single source of truth for every quantizer call.
///
/// `bits == 32` is the passthrough scheme: values are carried unchanged.
/// For `per_group`, `groups` is the number of contiguous runs the row-major
/// tensor is cut into. The run length is ceil(numel / groups), so a
/// non-dividing count produces a shorter tail run.
struct QuantScheme {
  int bits = 8;
  Mapping mapping = Mapping::symmetric;
  Granularity granularity = Granularity::per_tensor;
  std::size_t groups = 1;
  std::optional<ClipRange> clip;
  Rounding rounding = Rounding::half_to_even;

  bool passthrough() const noexcept { return bits == 32; }
  std::int32_t code_min() const noexcept;
  std::int32_t code_max() const noexcept;
  void validate() const;
  std::string describe() const;

  static QuantScheme passthrough_scheme();
  static QuantScheme symmetric(int bits, Granularity g = Granularity::per_tensor, std::size_t groups = 1);
  static QuantScheme asymmetric(int bits, Granularity g = Granularity::per_tensor, std::size_t groups = 1);

  friend bool operator==(const QuantScheme&, const QuantScheme&) = default;
};

/// Element-to-parameter mapping of a tensor under a scheme: `count` slots of
/// `size` consecutive row-major elements (the last slot may be shorter).
struct GroupLayout {
  std::size_t count = 1;
  std::size_t size = 0;
  std::size_t slot(std::size_t flat) const noexcept { return flat / size; }
  std::size_t begin(std::size_t s) const noexcept { return s * size; }
  std::size_t end(std::size_t s, std::size_t numel) const noexcept {
    return (s + 1) * size < numel ? (s + 1) * size : numel;
  }
};

GroupLayout group_layout(const Shape& shape, const QuantScheme& scheme);

/// Throws SchemeError if `scheme` is invalid or not usable for `role`.
void check_scheme(const QuantScheme& scheme, QuantRole role);

/// One (scale, zero_point) per slot. zero_points are all 0 under symmetric mapping.
struct QuantParams {
  std::vector<float> scales;
  std::vector<float> zero_points;
  friend bool operator==(const QuantParams&, const QuantParams&) = default;
};

/// scale/zero of one slot plus the reciprocal used on the quantize side.
/// `inv_scale` is formed as code_range / value_range, not 1 / scale, so that
/// values on the representable grid map to integers exactly.
template <typename T>
struct AffineParams {
  T scale = 1;
  T zero = 0;
  T inv_scale = 1;
};

/// scale = max|x| / (2^(b-1) - 1), zero = 0; an all-zero group gets scale 1.
template <typename T>
AffineParams<T> compute_params_symmetric(std::span<const T> x, int bits);
/// scale = (max - min) / (2^b - 1), zero = min; a constant group gets scale 1.
template <typename T>
AffineParams<T> compute_params_asymmetric(std::span<const T> x, int bits);

template <typename T>
inline T apply_clip(T x, const std::optional<ClipRange>& clip) noexcept {
  if (!clip) return x;
  const T lo = static_cast<T>(clip->lo);
  const T hi = static_cast<T>(clip->hi);
  return x < lo ? lo : (x > hi ? hi : x);
}

/// Integer payload with 8-bit lanes. Symmetric codes are stored as the
/// two's-complement byte of an int8; asymmetric codes as uint8.
struct QTensor {
  Shape shape;
  QuantScheme scheme;
  QuantParams params;
  std::vector<std::uint8_t> lanes;
  std::vector<float> passthrough;  ///< values when scheme.bits == 32

  std::size_t numel() const { return shape_numel(shape); }
  std::int32_t code(std::size_t flat) const noexcept {
    return scheme.mapping == Mapping::symmetric ? static_cast<std::int32_t>(static_cast<std::int8_t>(lanes[flat]))
                                                : static_cast<std::int32_t>(lanes[flat]);
  }
  GroupLayout layout() const { return group_layout(shape, scheme); }
};

QTensor quantize(const Tensor& x, const QuantScheme& scheme, QuantRole role = QuantRole::activation);
Tensor dequantize(const QTensor& q);

/// Dynamic per-token parameters: one (scale, zero) per row of a
/// [tokens, features] view, from that row's clipped range.
QuantParams tokenwise_activation_params(const Tensor& x, const QuantScheme& scheme);

/// dequantize(quantize(x)) evaluated in T, together with the clipped-STE pass
/// mask (1 where clip(x) == x).
template <typename T>
struct FakeQuantResult {
  std::vector<T> values;
  std::vector<std::uint8_t> pass;
};

template <typename T>
FakeQuantResult<T> fake_quantize_values(std::span<const T> x, const Shape& shape, const QuantScheme& scheme,
                                        QuantRole role);

/// Differentiable fake quantization: forward is quantize-then-dequantize,
/// backward passes the gradient where the input was inside the clip range and
/// blocks it where it was clipped.
template <typename T>
BasicTensor<T> fake_quantize_ste(const BasicTensor<T>& x, const QuantScheme& scheme,
                                 QuantRole role = QuantRole::activation);

/// Test hook for gradient checks. While active in `record` mode every fake
/// quantizer stores its residual q(x) - clip(x); in `replay` mode it returns
/// clip(x) + stored residual instead of re-quantizing. The replayed function
/// is smooth in x and its exact derivative is the clipped STE, which makes
/// central finite differences a valid oracle for STE gradients.
template <typename T>
class SteSurrogate {
 public:
  enum class Mode { record, replay };

  SteSurrogate();
  ~SteSurrogate();
  SteSurrogate(const SteSurrogate&) = delete;
  SteSurrogate& operator=(const SteSurrogate&) = delete;

  void set_mode(Mode mode) noexcept {
    mode_ = mode;
    cursor_ = 0;
  }
  Mode mode() const noexcept { return mode_; }

  /// Applied by quantizers: returns the forward values for clipped input `clipped`
  /// whose true quantized values are `quantized`.
  void apply(std::span<const T> clipped, std::vector<T>& quantized);

  static SteSurrogate* active() noexcept;

 private:
  Mode mode_ = Mode::record;
  std::size_t cursor_ = 0;
  std::vector<std::vector<T>> residuals_;
  SteSurrogate* previous_;
};

}  // namespace q4fg
