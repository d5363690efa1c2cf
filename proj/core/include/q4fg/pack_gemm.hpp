#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "q4fg/quant.hpp"
#include "q4fg/tensor.hpp"

namespace q4fg {

/// Raised when a value does not fit the target integer encoding.
class RangeError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

enum class NibbleEncoding {
  twos_complement,  ///< values in [-8, 7]
  unsigned_int,     ///< values in [0, 15]
};

/// Row-major nibble-packed 4-bit matrix. Two values per byte; the element at
/// the even column sits in the low nibble. Odd-width rows end with a zero
/// high nibble, so every row starts on a byte boundary.
class PackedInt4Matrix {
 public:
  PackedInt4Matrix() = default;
  PackedInt4Matrix(std::size_t rows, std::size_t cols, std::vector<std::uint8_t> bytes,
                   NibbleEncoding encoding = NibbleEncoding::twos_complement);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t row_bytes() const noexcept { return (cols_ + 1) / 2; }
  NibbleEncoding encoding() const noexcept { return encoding_; }
  std::span<const std::uint8_t> bytes() const noexcept { return bytes_; }

  std::int32_t at(std::size_t r, std::size_t c) const;
  void unpack_row(std::size_t r, std::span<std::int16_t> out) const;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  NibbleEncoding encoding_ = NibbleEncoding::twos_complement;
  std::vector<std::uint8_t> bytes_;
};

PackedInt4Matrix pack_int4(std::size_t rows, std::size_t cols, std::span<const std::int8_t> values,
                           NibbleEncoding encoding = NibbleEncoding::twos_complement);
std::vector<std::int8_t> unpack_int4(const PackedInt4Matrix& m);

enum class OperandStorage { int8, uint8, packed4 };

/// Integer GEMM operand: a row-major matrix stored as int8, uint8, or packed nibbles.
class IntMatrix {
 public:
  IntMatrix() = default;

  static IntMatrix from_int8(std::size_t rows, std::size_t cols, std::vector<std::int8_t> values);
  static IntMatrix from_uint8(std::size_t rows, std::size_t cols, std::vector<std::uint8_t> values);
  static IntMatrix from_packed(PackedInt4Matrix packed);
  /// 2-D view of a quantized tensor's codes; 4-bit codes are nibble-packed when `pack` is set.
  static IntMatrix from_codes(const QTensor& q, bool pack);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  OperandStorage storage() const noexcept { return storage_; }
  std::size_t payload_bytes() const noexcept;

  std::int32_t at(std::size_t r, std::size_t c) const;
  void unpack_row(std::size_t r, std::span<std::int16_t> out) const;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  OperandStorage storage_ = OperandStorage::int8;
  std::vector<std::uint8_t> bytes_;
  PackedInt4Matrix packed_;
};

/// Exact 32-bit accumulation of a[M,K] * b[K,N], row-major output.
std::vector<std::int32_t> gemm_int(const IntMatrix& a, const IntMatrix& b, int workers = 1);
/// Exact 32-bit accumulation of a[M,K] * w[N,K]^T (weight layout).
std::vector<std::int32_t> gemm_int_nt(const IntMatrix& a, const IntMatrix& w, int workers = 1);

enum class Activation { none, gelu };

/// Post-GEMM work fused into the integer kernel. Output element (i, j) is
///
///   act( sum over the weight groups g covering row j of
///          s_i*w_g*acc + s_i*z_g*A + a_i*w_g*W + a_i*z_g*C   + bias_j )
///
/// where s/a are the token scale/zero, w/z the weight group scale/zero,
/// acc the integer dot product over the segment, A and W the segment sums of
/// activation and weight codes and C the number of kept weights. Zero-point
/// terms are skipped when the corresponding zero vector is empty, so the
/// symmetric single-group case reduces to act(s_i * w_j * acc + bias_j).
struct GemmEpilogue {
  std::vector<float> token_scales;
  std::vector<float> token_zeros;
  std::vector<float> weight_scales;
  std::vector<float> weight_zeros;
  std::size_t weight_group_size = 0;  ///< elements per group in the row-major N x K weight
  std::vector<float> bias;
  Activation activation = Activation::none;
};

/// Fused integer GEMM: x[M,K] codes times w[N,K]^T codes with the epilogue
/// applied in float. `weight_keep`, when nonempty, marks pruned weight
/// positions (0) whose effective value is exactly zero.
Tensor gemm_fused(const IntMatrix& x, const IntMatrix& w, const GemmEpilogue& epilogue,
                  std::span<const std::uint8_t> weight_keep = {}, int workers = 1);

/// Weight operand ready for the fused kernel.
struct QuantizedWeight {
  IntMatrix codes;
  QuantScheme scheme;
  QuantParams params;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> keep;  ///< empty unless pruned after quantization
};

QuantizedWeight prepare_weight(const QTensor& w, bool pack, std::vector<std::uint8_t> keep = {});

/// Quantized activations (per token or per tensor) times a prepared weight.
Tensor gemm_fused(const QTensor& x, const QuantizedWeight& w, std::span<const float> bias,
                  Activation activation, int workers = 1);

// ---------------------------------------------------------------------------
// Shape study

/// The four linear layers of a transformer block.
enum class GemmCase { qkv_proj, attn_out, mlp_intermediate, mlp_out };

std::string to_string(GemmCase c);
GemmCase gemm_case_from_string(const std::string& s);

/// M = bs*seq; (N, K) = (3h, h), (h, h), (4h, h), (h, 4h).
struct GemmShapeCase {
  GemmCase name = GemmCase::qkv_proj;
  std::size_t m = 0;
  std::size_t n = 0;
  std::size_t k = 0;

  static GemmShapeCase make(GemmCase name, std::size_t tokens, std::size_t hidden);
};

struct BenchRecord {
  GemmShapeCase shape;
  int bits = 32;
  double median_ns = 0.0;
  std::size_t bytes_moved = 0;
  double gops = 0.0;
};

/// Weight bytes read per GEMM: ceil(N*K/2) for 4-bit, N*K for 8-bit, 4*N*K for fp32.
std::size_t weight_bytes_moved(std::size_t n, std::size_t k, int bits);

/// Median wall time of `repeats` runs of the fused kernel (bits 4 or 8) or the
/// float reference GEMM (bits 32) on seeded random operands.
BenchRecord bench_gemm(const GemmShapeCase& shape, int bits, std::size_t repeats, int workers = 1,
                       std::uint64_t seed = 0);

inline constexpr const char* kBenchCsvHeader = "case,bits,M,N,K,median_ns,bytes_moved,gops";
void write_bench_csv(std::ostream& os, std::span<const BenchRecord> records);

}  // namespace q4fg
