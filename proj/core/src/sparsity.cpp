#include "q4fg/sparsity.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "q4fg/ops.hpp"

namespace q4fg {

std::string to_string(MaskStructure s) { return s == MaskStructure::pair_nm ? "pair_nm" : "unstructured"; }
std::string to_string(MaskOrigin o) { return o == MaskOrigin::movement ? "movement" : "teacher_magnitude"; }
std::string to_string(CompositionOrder o) {
  return o == CompositionOrder::prune_then_quant ? "prune_then_quant" : "quant_then_prune";
}

MaskStructure mask_structure_from_string(const std::string& s) {
  if (s == "pair_nm") return MaskStructure::pair_nm;
  if (s == "unstructured") return MaskStructure::unstructured;
  throw std::invalid_argument("unknown mask structure '" + s + "'");
}

MaskOrigin mask_origin_from_string(const std::string& s) {
  if (s == "movement") return MaskOrigin::movement;
  if (s == "teacher_magnitude") return MaskOrigin::teacher_magnitude;
  throw std::invalid_argument("unknown mask origin '" + s + "'");
}

CompositionOrder composition_order_from_string(const std::string& s) {
  if (s == "prune_then_quant" || s == "P=>Q" || s == "pq") return CompositionOrder::prune_then_quant;
  if (s == "quant_then_prune" || s == "Q=>P" || s == "qp") return CompositionOrder::quant_then_prune;
  throw std::invalid_argument("unknown composition order '" + s + "'");
}

NmPattern parse_nm(const std::string& text) {
  const auto colon = text.find(':');
  if (colon == std::string::npos) throw std::invalid_argument("N:M pattern must look like 2:4, got '" + text + "'");
  NmPattern p;
  try {
    p.n = std::stoul(text.substr(0, colon));
    p.m = std::stoul(text.substr(colon + 1));
  } catch (const std::exception&) {
    throw std::invalid_argument("N:M pattern must look like 2:4, got '" + text + "'");
  }
  if (p.m == 0 || p.n >= p.m) throw std::invalid_argument("N:M pattern needs 0 <= N < M, got '" + text + "'");
  return p;
}

std::size_t SparsityMask::pruned_count() const {
  return static_cast<std::size_t>(std::count(keep.begin(), keep.end(), std::uint8_t{0}));
}

double SparsityMask::sparsity() const {
  return keep.empty() ? 0.0 : static_cast<double>(pruned_count()) / static_cast<double>(keep.size());
}

bool SparsityMask::satisfies_structure() const {
  if (keep.size() != shape_numel(shape)) return false;
  if (structure == MaskStructure::unstructured) return true;
  if (shape.empty() || pattern.m == 0 || shape.back() % pattern.m != 0) return false;
  for (std::size_t start = 0; start < keep.size(); start += pattern.m) {
    std::size_t zeros = 0;
    for (std::size_t i = start; i < start + pattern.m; ++i) zeros += keep[i] == 0;
    if (zeros != pattern.n) return false;
  }
  return true;
}

std::vector<std::uint8_t> SparsityMask::to_bits() const {
  std::vector<std::uint8_t> bits((keep.size() + 7) / 8, 0);
  for (std::size_t i = 0; i < keep.size(); ++i)
    if (keep[i]) bits[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
  return bits;
}

std::vector<std::uint8_t> SparsityMask::keep_from_bits(std::span<const std::uint8_t> bits, std::size_t count) {
  if (bits.size() < (count + 7) / 8) throw DimensionError("bit-packed mask is shorter than its element count");
  std::vector<std::uint8_t> keep(count);
  for (std::size_t i = 0; i < count; ++i) keep[i] = (bits[i / 8] >> (i % 8)) & 1u;
  return keep;
}

SparsityMask all_ones_mask(const Shape& shape) {
  SparsityMask m;
  m.shape = shape;
  m.keep.assign(shape_numel(shape), 1);
  return m;
}

namespace {

/// Prunes the `count` lowest keys among `idx`, ties to the lower index.
void prune_lowest(std::span<const float> keys, std::vector<std::size_t>& idx, std::size_t count,
                  std::vector<std::uint8_t>& keep) {
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return keys[a] < keys[b] || (keys[a] == keys[b] && a < b);
  });
  for (std::size_t i = 0; i < count; ++i) keep[idx[i]] = 0;
}

SparsityMask select_mask(std::span<const float> keys, const Shape& shape, double sparsity, MaskStructure structure,
                         std::optional<NmPattern> pattern, MaskOrigin origin) {
  if (!(sparsity >= 0.0 && sparsity < 1.0)) {
    throw std::invalid_argument("sparsity must lie in [0, 1), got " + std::to_string(sparsity));
  }
  SparsityMask mask;
  mask.shape = shape;
  mask.structure = structure;
  mask.origin = origin;
  mask.keep.assign(keys.size(), 1);
  if (structure == MaskStructure::unstructured) {
    const auto count = static_cast<std::size_t>(std::llround(sparsity * static_cast<double>(keys.size())));
    std::vector<std::size_t> idx(keys.size());
    std::iota(idx.begin(), idx.end(), 0);
    prune_lowest(keys, idx, count, mask.keep);
    return mask;
  }
  if (!pattern) throw std::invalid_argument("Pair-(N:M) pruning needs an N:M pattern");
  mask.pattern = *pattern;
  const double expected = static_cast<double>(pattern->n) / static_cast<double>(pattern->m);
  if (std::fabs(expected - sparsity) > 1e-9) {
    throw std::invalid_argument("Pair-(" + std::to_string(pattern->n) + ":" + std::to_string(pattern->m) +
                                ") implies sparsity " + std::to_string(expected) + ", got " + std::to_string(sparsity));
  }
  if (shape.empty() || shape.back() % pattern->m != 0) {
    throw DimensionError("Pair-(N:M) pruning needs the last dimension of " + shape_str(shape) +
                         " to be divisible by M=" + std::to_string(pattern->m));
  }
  std::vector<std::size_t> idx(pattern->m);
  for (std::size_t start = 0; start < keys.size(); start += pattern->m) {
    std::iota(idx.begin(), idx.end(), start);
    prune_lowest(keys, idx, pattern->n, mask.keep);
  }
  return mask;
}

}  // namespace

SparsityMask l1_mask(const Tensor& w, double sparsity, MaskStructure structure, std::optional<NmPattern> pattern) {
  std::vector<float> mag(w.numel());
  auto wd = w.data();
  for (std::size_t i = 0; i < mag.size(); ++i) mag[i] = std::fabs(wd[i]);
  return select_mask(mag, w.shape(), sparsity, structure, pattern, MaskOrigin::teacher_magnitude);
}

SparsityMask mask_from_scores(std::span<const float> scores, const Shape& shape, double sparsity,
                              MaskStructure structure, std::optional<NmPattern> pattern, MaskOrigin origin) {
  if (scores.size() != shape_numel(shape)) throw DimensionError("scores do not match mask shape " + shape_str(shape));
  return select_mask(scores, shape, sparsity, structure, pattern, origin);
}

std::vector<float> movement_scores_update(std::span<const float> scores, std::span<const float> w,
                                          std::span<const float> grad, double lr) {
  if (scores.size() != w.size() || w.size() != grad.size()) {
    throw DimensionError("movement_scores_update: scores, weights and gradients differ in size");
  }
  std::vector<float> out(scores.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<float>(static_cast<double>(scores[i]) -
                                lr * static_cast<double>(w[i]) * static_cast<double>(grad[i]));
  return out;
}

MovementPruner::MovementPruner(SparsityMask initial, double sparsity, double score_lr, std::size_t refresh_every)
    : mask_(std::move(initial)),
      scores_(mask_.keep.size(), 0.0f),
      sparsity_(sparsity),
      score_lr_(score_lr),
      refresh_every_(refresh_every == 0 ? 1 : refresh_every) {
  mask_.origin = MaskOrigin::movement;
}

void MovementPruner::update(std::span<const float> w, std::span<const float> grad) {
  scores_ = movement_scores_update(scores_, w, grad, score_lr_);
  ++steps_;
  if (steps_ % refresh_every_ == 0) {
    std::optional<NmPattern> pattern;
    if (mask_.structure == MaskStructure::pair_nm) pattern = mask_.pattern;
    mask_ = mask_from_scores(scores_, mask_.shape, sparsity_, mask_.structure, pattern, MaskOrigin::movement);
  }
}

template <typename T>
BasicTensor<T> masked_quantized_weight(const BasicTensor<T>& w, const SparsityMask& mask, const QuantScheme& scheme,
                                       CompositionOrder order) {
  if (mask.shape != w.shape()) {
    throw DimensionError("mask " + shape_str(mask.shape) + " does not match weight " + shape_str(w.shape()));
  }
  BasicTensor<T> m(w.shape(), std::vector<T>(mask.keep.begin(), mask.keep.end()));
  if (order == CompositionOrder::prune_then_quant) {
    return fake_quantize_ste(mul(w, m), scheme, QuantRole::weight);
  }
  return mul(fake_quantize_ste(w, scheme, QuantRole::weight), m);
}

template BasicTensor<float> masked_quantized_weight<float>(const BasicTensor<float>&, const SparsityMask&,
                                                           const QuantScheme&, CompositionOrder);
template BasicTensor<double> masked_quantized_weight<double>(const BasicTensor<double>&, const SparsityMask&,
                                                             const QuantScheme&, CompositionOrder);

}  // namespace q4fg
