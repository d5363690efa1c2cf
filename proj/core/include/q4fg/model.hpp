#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "q4fg/adam.hpp"
#include "q4fg/ops.hpp"
#include "q4fg/pack_gemm.hpp"
#include "q4fg/quant.hpp"
#include "q4fg/sparsity.hpp"
#include "q4fg/tensor.hpp"

namespace q4fg {

enum class Arch { encoder_only, encoder_decoder, decoder_only };
enum class LnPlacement { pre, post };

std::string to_string(Arch a);
std::string to_string(LnPlacement p);
Arch arch_from_string(const std::string& s);
LnPlacement ln_placement_from_string(const std::string& s);

struct ModelConfig {
  Arch arch = Arch::encoder_only;
  std::size_t encoder_layers = 2;
  std::size_t decoder_layers = 0;
  std::size_t hidden = 32;
  std::size_t heads = 2;
  std::size_t ffn_mult = 4;
  LnPlacement ln = LnPlacement::post;
  std::size_t vocab_size = 64;
  std::size_t max_seq = 32;
  std::size_t num_classes = 0;  ///< > 0 adds a classification head on position 0
  double dropout = 0.0;

  std::size_t ffn_hidden() const noexcept { return hidden * ffn_mult; }
  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// The four quantizable linear layers of a block.
enum class LinearPart { qkv_proj, attn_out, mlp_intermediate, mlp_out };
inline constexpr std::array<LinearPart, 4> kLinearParts = {LinearPart::qkv_proj, LinearPart::attn_out,
                                                           LinearPart::mlp_intermediate, LinearPart::mlp_out};

/// CLI spelling: qkv, attn_out, mlp_int, mlp_out.
std::string to_string(LinearPart p);
LinearPart linear_part_from_string(const std::string& s);

/// Which linear parts run quantized, and with which schemes. A disabled part
/// runs in plain float with no quantizer inserted.
struct QuantStrategy {
  std::array<bool, 4> enabled{};  ///< indexed by LinearPart
  QuantScheme weight_scheme = QuantScheme::passthrough_scheme();
  QuantScheme activation_scheme = QuantScheme::passthrough_scheme();

  bool on(LinearPart p) const noexcept { return enabled[static_cast<std::size_t>(p)]; }
  void set(LinearPart p, bool value) noexcept { enabled[static_cast<std::size_t>(p)] = value; }
  bool any() const noexcept;

  /// Bit i set <=> part i enabled; the 16 combinations are masks 0..15.
  unsigned bits() const noexcept;
  static QuantStrategy from_bits(unsigned mask, const QuantScheme& weight, const QuantScheme& activation);
  static QuantStrategy none() { return {}; }
  static QuantStrategy all(const QuantScheme& weight, const QuantScheme& activation) {
    return from_bits(0xF, weight, activation);
  }

  /// "none", "all", or "+"-joined part names.
  std::string label() const;
  void validate() const;
  friend bool operator==(const QuantStrategy&, const QuantStrategy&) = default;
};

/// W{wbits}A{abits} with symmetric row-wise weights and symmetric per-token activations.
QuantStrategy wa_strategy(int weight_bits, int activation_bits, unsigned parts = 0xF);

template <typename T>
struct Linear {
  std::string name;  ///< parameter prefix, e.g. "enc.0.self.qkv"
  LinearPart part = LinearPart::qkv_proj;
  bool quantizable = true;  ///< heads are never quantized
  BasicTensor<T> weight;    ///< [out, in]
  BasicTensor<T> bias;      ///< [out]
  /// Stored integer weight when loaded from a quantized container.
  std::optional<QTensor> frozen;

  std::string weight_name() const { return name + ".weight"; }
};

template <typename T>
struct LayerNormParams {
  std::string name;
  BasicTensor<T> gamma;
  BasicTensor<T> beta;
};

template <typename T>
struct AttentionBlock {
  bool cross = false;
  Linear<T> qkv;  ///< self attention: [3h, h]
  Linear<T> q;    ///< cross attention: [h, h] on the decoder stream
  Linear<T> kv;   ///< cross attention: [2h, h] on the encoder output
  Linear<T> out;
  LayerNormParams<T> ln;
};

template <typename T>
struct FeedForward {
  Linear<T> intermediate;
  Linear<T> out;
  LayerNormParams<T> ln;
};

template <typename T>
struct TransformerLayer {
  AttentionBlock<T> self_attn;
  std::optional<AttentionBlock<T>> cross_attn;
  FeedForward<T> ffn;
};

/// Miniature transformer. Parameter tensors are handles; `clone()` makes an
/// independent copy.
template <typename T>
struct Transformer {
  ModelConfig config;
  BasicTensor<T> token_embedding;     ///< [vocab, h]
  BasicTensor<T> position_embedding;  ///< [max_seq, h]
  std::vector<TransformerLayer<T>> encoder;
  std::vector<TransformerLayer<T>> decoder;
  std::optional<LayerNormParams<T>> encoder_final_ln;  ///< pre-LN only
  std::optional<LayerNormParams<T>> decoder_final_ln;
  Linear<T> lm_head;
  std::optional<Linear<T>> cls_head;

  /// Sparsity masks keyed by weight name.
  std::map<std::string, SparsityMask> masks;
  CompositionOrder order = CompositionOrder::prune_then_quant;

  /// Every parameter in a fixed order with its canonical name.
  std::vector<NamedParameter<T>> parameters() const;
  BasicTensor<T> parameter(const std::string& name) const;
  /// Every linear layer (heads included) in parameter order.
  std::vector<Linear<T>*> linears();
  std::vector<const Linear<T>*> linears() const;
  Linear<T>& linear(const std::string& weight_name);

  Transformer clone() const;
  void set_requires_grad(bool value) const;
  void zero_grad() const;
};

template <typename T>
Transformer<T> build_model(const ModelConfig& cfg, std::uint64_t seed);

/// Same structure and values converted to another scalar type.
template <typename To, typename From>
Transformer<To> cast_model(const Transformer<From>& src);

std::size_t parameter_count(const ModelConfig& cfg);
/// Parameters of the encoder and decoder layer stacks only.
std::size_t layer_stack_parameter_count(const ModelConfig& cfg);

enum class Mode { train, eval };

/// Copy of the input activation of one linear part, for analysis.
struct ActivationProbe {
  std::size_t layer = 0;  ///< index over encoder layers followed by decoder layers
  LinearPart part = LinearPart::mlp_out;
  Tensor captured;        ///< [B*T, features]
};

/// Accumulated wall time of the linear layers, per part.
struct ForwardProfile {
  std::array<double, 4> part_ns{};
  double total_ns = 0.0;
};

struct ForwardOptions {
  QuantStrategy strategy;
  Mode mode = Mode::eval;
  std::mt19937_64* rng = nullptr;  ///< dropout source in train mode
  ActivationProbe* probe = nullptr;
  ForwardProfile* profile = nullptr;
  int workers = 1;
};

/// Token ids. `tokens` is [batch, seq]; encoder-decoder models also take the
/// encoder input `source` of shape [batch, source_seq].
struct ModelInput {
  std::vector<std::int32_t> tokens;
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::int32_t> source;
  std::size_t source_seq = 0;
};

template <typename T>
struct LayerTrace {
  bool decoder = false;
  BasicTensor<T> hidden;  ///< layer output, [B*T, h]
  BasicTensor<T> scores;  ///< self-attention pre-softmax scores, [B, H, T, T]
  BasicTensor<T> probs;
  MaskMode mask = MaskMode::full;
};

template <typename T>
struct ForwardResult {
  BasicTensor<T> logits;        ///< [B, T, vocab]
  BasicTensor<T> class_logits;  ///< [B, classes] when the model has a classification head
  std::vector<LayerTrace<T>> layers;
};

template <typename T>
ForwardResult<T> forward(const Transformer<T>& model, const ModelInput& input, const ForwardOptions& options = {});

/// Effective weight of a quantized linear as integer codes for the fused
/// kernel: the mask is applied before (P=>Q) or after (Q=>P) quantization.
struct QuantizedLinearWeight {
  QTensor codes;
  std::vector<std::uint8_t> keep;  ///< Q=>P only
};
QuantizedLinearWeight quantize_linear_weight(const Tensor& w, const SparsityMask* mask, CompositionOrder order,
                                             const QuantScheme& scheme);

// ---------------------------------------------------------------------------
// Layer reduction

/// Student layer i is initialized from teacher layer mapping[i].
struct LayerMapping {
  std::vector<std::size_t> encoder;
  std::vector<std::size_t> decoder;
  friend bool operator==(const LayerMapping&, const LayerMapping&) = default;
};

enum class CopyPolicy {
  first_k_even_spacing,  ///< first k encoder layers; decoder layer i <- floor(i * Y / y)
  even_spacing,          ///< both stacks evenly spaced
};

struct ReducedConfig {
  ModelConfig config;
  LayerMapping mapping;
};

ReducedConfig layer_reduce(const ModelConfig& teacher, std::size_t target_x, std::size_t target_y,
                           CopyPolicy policy = CopyPolicy::first_k_even_spacing);

/// Student built from `teacher` per `reduced`; embeddings and heads are copied.
template <typename T>
Transformer<T> reduce_model(const Transformer<T>& teacher, const ReducedConfig& reduced);

// ---------------------------------------------------------------------------
// Language-model evaluation

/// NLL of every next-token prediction over non-overlapping windows of
/// `window` predictions (window + 1 tokens; consecutive windows share one
/// boundary token). Row w of the result holds window w. A trailing partial
/// window is dropped; a stream shorter than one window becomes a single window.
struct WindowNll {
  std::size_t windows = 0;
  std::size_t window = 0;
  std::vector<double> nll;  ///< windows * window
};

WindowNll window_nll(const Transformer<float>& model, std::span<const std::int32_t> stream,
                     const QuantStrategy& strategy, std::size_t window = 0);

/// exp(mean next-token NLL). Decoder-only models.
double perplexity(const Transformer<float>& model, std::span<const std::int32_t> stream,
                  const QuantStrategy& strategy, std::size_t window = 0);

}  // namespace q4fg
