#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "q4fg/quant.hpp"
#include "q4fg/tensor.hpp"

namespace q4fg {

enum class MaskStructure { unstructured, pair_nm };
enum class MaskOrigin { teacher_magnitude, movement };

/// Order in which pruning and quantization compose on a weight.
enum class CompositionOrder {
  prune_then_quant,  ///< fake_quantize(w * mask)
  quant_then_prune,  ///< fake_quantize(w) * mask
};

std::string to_string(MaskStructure s);
std::string to_string(MaskOrigin o);
std::string to_string(CompositionOrder o);
MaskStructure mask_structure_from_string(const std::string& s);
MaskOrigin mask_origin_from_string(const std::string& s);
CompositionOrder composition_order_from_string(const std::string& s);

/// Pair-(N:M): N zeros in every aligned run of M weights along the last
/// (reduction) dimension.
struct NmPattern {
  std::size_t n = 2;
  std::size_t m = 4;
  friend bool operator==(const NmPattern&, const NmPattern&) = default;
};

/// Parses "N:M".
NmPattern parse_nm(const std::string& text);

struct SparsityMask {
  Shape shape;
  std::vector<std::uint8_t> keep;  ///< 1 = kept, 0 = pruned
  MaskStructure structure = MaskStructure::unstructured;
  NmPattern pattern;  ///< meaningful for pair_nm only
  MaskOrigin origin = MaskOrigin::teacher_magnitude;

  /// Static magnitude masks stay fixed for the whole run.
  bool frozen() const noexcept { return origin == MaskOrigin::teacher_magnitude; }
  std::size_t pruned_count() const;
  double sparsity() const;
  /// Exhaustive check of the declared structure.
  bool satisfies_structure() const;

  /// LSB-first bit packing of `keep`.
  std::vector<std::uint8_t> to_bits() const;
  static std::vector<std::uint8_t> keep_from_bits(std::span<const std::uint8_t> bits, std::size_t count);
};

SparsityMask all_ones_mask(const Shape& shape);

/// Magnitude pruning. Unstructured: the round(sparsity * numel) smallest |w|
/// of the tensor are pruned. Pair-(N:M): the N smallest |w| of every M-run
/// along the last dimension are pruned, and `sparsity` must equal N/M.
/// Equal magnitudes prune the lower flat index first.
SparsityMask l1_mask(const Tensor& w, double sparsity, MaskStructure structure = MaskStructure::unstructured,
                     std::optional<NmPattern> pattern = std::nullopt);

/// Same selection rule applied to arbitrary scores: the lowest scores are
/// pruned (no absolute value).
SparsityMask mask_from_scores(std::span<const float> scores, const Shape& shape, double sparsity,
                              MaskStructure structure, std::optional<NmPattern> pattern, MaskOrigin origin);

/// scores - lr * (w * grad), elementwise.
std::vector<float> movement_scores_update(std::span<const float> scores, std::span<const float> w,
                                          std::span<const float> grad, double lr);

/// Iterative movement pruning for one weight. Scores accumulate -w*grad every
/// step; the mask is recomputed from the scores every `refresh_every` steps.
class MovementPruner {
 public:
  MovementPruner(SparsityMask initial, double sparsity, double score_lr, std::size_t refresh_every = 1);

  void update(std::span<const float> w, std::span<const float> grad);
  const SparsityMask& mask() const noexcept { return mask_; }
  std::span<const float> scores() const noexcept { return scores_; }
  std::size_t steps() const noexcept { return steps_; }

 private:
  SparsityMask mask_;
  std::vector<float> scores_;
  double sparsity_;
  double score_lr_;
  std::size_t refresh_every_;
  std::size_t steps_ = 0;
};

/// Differentiable effective weight under pruning and quantization:
/// prune_then_quant gives fake_quantize(w * mask) (group statistics see the
/// zeros), quant_then_prune gives fake_quantize(w) * mask.
template <typename T>
BasicTensor<T> masked_quantized_weight(const BasicTensor<T>& w, const SparsityMask& mask, const QuantScheme& scheme,
                                       CompositionOrder order);

}  // namespace q4fg
