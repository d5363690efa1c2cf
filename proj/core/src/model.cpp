#include "q4fg/model.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>
#include <type_traits>

namespace q4fg {

std::string to_string(Arch a) {
  switch (a) {
    case Arch::encoder_only: return "encoder_only";
    case Arch::encoder_decoder: return "encoder_decoder";
    case Arch::decoder_only: return "decoder_only";
  }
  return "?";
}

std::string to_string(LnPlacement p) { return p == LnPlacement::pre ? "pre" : "post"; }

Arch arch_from_string(const std::string& s) {
  if (s == "encoder_only") return Arch::encoder_only;
  if (s == "encoder_decoder") return Arch::encoder_decoder;
  if (s == "decoder_only") return Arch::decoder_only;
  throw std::invalid_argument("unknown architecture '" + s + "'");
}

LnPlacement ln_placement_from_string(const std::string& s) {
  if (s == "pre") return LnPlacement::pre;
  if (s == "post") return LnPlacement::post;
  throw std::invalid_argument("unknown LN placement '" + s + "' (expected pre or post)");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("model config: " + msg); };
  if (hidden == 0) fail("hidden must be positive");
  if (heads == 0 || hidden % heads != 0) {
    fail("hidden " + std::to_string(hidden) + " is not divisible by heads " + std::to_string(heads));
  }
  if (ffn_mult == 0) fail("ffn_mult must be positive");
  if (vocab_size == 0) fail("vocab_size must be positive");
  if (max_seq == 0) fail("max_seq must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0, 1)");
  switch (arch) {
    case Arch::encoder_only:
      if (encoder_layers == 0) fail("encoder_only needs at least one encoder layer");
      if (decoder_layers != 0) fail("encoder_only requires decoder_layers = 0");
      break;
    case Arch::decoder_only:
      if (decoder_layers == 0) fail("decoder_only needs at least one decoder layer");
      if (encoder_layers != 0) fail("decoder_only requires encoder_layers = 0");
      break;
    case Arch::encoder_decoder:
      if (encoder_layers == 0 || decoder_layers == 0) fail("encoder_decoder needs encoder and decoder layers");
      break;
  }
}

std::string to_string(LinearPart p) {
  switch (p) {
    case LinearPart::qkv_proj: return "qkv";
    case LinearPart::attn_out: return "attn_out";
    case LinearPart::mlp_intermediate: return "mlp_int";
    case LinearPart::mlp_out: return "mlp_out";
  }
  return "?";
}

LinearPart linear_part_from_string(const std::string& s) {
  if (s == "qkv" || s == "qkv_proj") return LinearPart::qkv_proj;
  if (s == "attn_out") return LinearPart::attn_out;
  if (s == "mlp_int" || s == "mlp_intermediate") return LinearPart::mlp_intermediate;
  if (s == "mlp_out") return LinearPart::mlp_out;
  throw std::invalid_argument("unknown linear part '" + s + "' (expected qkv, attn_out, mlp_int or mlp_out)");
}

bool QuantStrategy::any() const noexcept {
  return std::any_of(enabled.begin(), enabled.end(), [](bool b) { return b; });
}

unsigned QuantStrategy::bits() const noexcept {
  unsigned m = 0;
  for (std::size_t i = 0; i < enabled.size(); ++i)
    if (enabled[i]) m |= 1u << i;
  return m;
}

QuantStrategy QuantStrategy::from_bits(unsigned mask, const QuantScheme& weight, const QuantScheme& activation) {
  QuantStrategy s;
  for (std::size_t i = 0; i < s.enabled.size(); ++i) s.enabled[i] = (mask >> i) & 1u;
  s.weight_scheme = weight;
  s.activation_scheme = activation;
  return s;
}

std::string QuantStrategy::label() const {
  const unsigned m = bits();
  if (m == 0) return "none";
  if (m == 0xF) return "all";
  std::string out;
  for (auto p : kLinearParts) {
    if (!on(p)) continue;
    if (!out.empty()) out += '+';
    out += to_string(p);
  }
  return out;
}

void QuantStrategy::validate() const {
  check_scheme(weight_scheme, QuantRole::weight);
  check_scheme(activation_scheme, QuantRole::activation);
  if (activation_scheme.granularity == Granularity::per_group && !activation_scheme.passthrough()) {
    throw SchemeError("activations are quantized per token or per tensor, not in groups");
  }
}

QuantStrategy wa_strategy(int weight_bits, int activation_bits, unsigned parts) {
  const auto w = weight_bits == 32 ? QuantScheme::passthrough_scheme()
                                   : QuantScheme::symmetric(weight_bits, Granularity::per_channel);
  const auto a = activation_bits == 32 ? QuantScheme::passthrough_scheme()
                                       : QuantScheme::symmetric(activation_bits, Granularity::per_token);
  return QuantStrategy::from_bits(parts, w, a);
}

// ---------------------------------------------------------------------------
// Structure

namespace {

enum class InitKind { token_embedding, position_embedding, weight, bias, gamma, beta };

template <typename T>
Linear<T> make_linear(std::string name, LinearPart part, std::size_t out, std::size_t in, bool quantizable = true) {
  Linear<T> l;
  l.name = std::move(name);
  l.part = part;
  l.quantizable = quantizable;
  l.weight = BasicTensor<T>::zeros({out, in});
  l.bias = BasicTensor<T>::zeros({out});
  return l;
}

template <typename T>
LayerNormParams<T> make_ln(std::string name, std::size_t h) {
  return {std::move(name), BasicTensor<T>::full({h}, T{1}), BasicTensor<T>::zeros({h})};
}

template <typename T>
TransformerLayer<T> make_layer(const ModelConfig& cfg, const std::string& prefix, bool with_cross) {
  const std::size_t h = cfg.hidden, f = cfg.ffn_hidden();
  TransformerLayer<T> layer;
  layer.self_attn.qkv = make_linear<T>(prefix + ".self.qkv", LinearPart::qkv_proj, 3 * h, h);
  layer.self_attn.out = make_linear<T>(prefix + ".self.out", LinearPart::attn_out, h, h);
  layer.self_attn.ln = make_ln<T>(prefix + ".self.ln", h);
  if (with_cross) {
    AttentionBlock<T> c;
    c.cross = true;
    c.q = make_linear<T>(prefix + ".cross.q", LinearPart::qkv_proj, h, h);
    c.kv = make_linear<T>(prefix + ".cross.kv", LinearPart::qkv_proj, 2 * h, h);
    c.out = make_linear<T>(prefix + ".cross.out", LinearPart::attn_out, h, h);
    c.ln = make_ln<T>(prefix + ".cross.ln", h);
    layer.cross_attn = std::move(c);
  }
  layer.ffn.intermediate = make_linear<T>(prefix + ".ffn.int", LinearPart::mlp_intermediate, f, h);
  layer.ffn.out = make_linear<T>(prefix + ".ffn.out", LinearPart::mlp_out, h, f);
  layer.ffn.ln = make_ln<T>(prefix + ".ffn.ln", h);
  return layer;
}

template <typename T>
Transformer<T> make_structure(const ModelConfig& cfg) {
  cfg.validate();
  Transformer<T> m;
  m.config = cfg;
  const std::size_t h = cfg.hidden;
  m.token_embedding = BasicTensor<T>::zeros({cfg.vocab_size, h});
  m.position_embedding = BasicTensor<T>::zeros({cfg.max_seq, h});
  for (std::size_t i = 0; i < cfg.encoder_layers; ++i)
    m.encoder.push_back(make_layer<T>(cfg, "enc." + std::to_string(i), false));
  const bool cross = cfg.arch == Arch::encoder_decoder;
  for (std::size_t i = 0; i < cfg.decoder_layers; ++i)
    m.decoder.push_back(make_layer<T>(cfg, "dec." + std::to_string(i), cross));
  if (cfg.ln == LnPlacement::pre) {
    if (cfg.encoder_layers > 0) m.encoder_final_ln = make_ln<T>("enc.final_ln", h);
    if (cfg.decoder_layers > 0) m.decoder_final_ln = make_ln<T>("dec.final_ln", h);
  }
  m.lm_head = make_linear<T>("head.lm", LinearPart::mlp_out, cfg.vocab_size, h, false);
  if (cfg.num_classes > 0) m.cls_head = make_linear<T>("head.cls", LinearPart::mlp_out, cfg.num_classes, h, false);
  return m;
}

/// Visits linears in parameter order. M is Transformer<T> or const Transformer<T>.
template <typename M, typename F>
void visit_linears(M& m, F&& f) {
  auto layer = [&](auto& l) {
    f(l.self_attn.qkv);
    f(l.self_attn.out);
    if (l.cross_attn) {
      f(l.cross_attn->q);
      f(l.cross_attn->kv);
      f(l.cross_attn->out);
    }
    f(l.ffn.intermediate);
    f(l.ffn.out);
  };
  for (auto& l : m.encoder) layer(l);
  for (auto& l : m.decoder) layer(l);
  f(m.lm_head);
  if (m.cls_head) f(*m.cls_head);
}

/// Visits every parameter tensor as f(name, tensor, kind, fan_in) in canonical order.
template <typename M, typename F>
void visit_parameters(M& m, F&& f) {
  f(std::string("embed.token"), m.token_embedding, InitKind::token_embedding, std::size_t{0});
  f(std::string("embed.position"), m.position_embedding, InitKind::position_embedding, std::size_t{0});
  auto lin = [&](auto& l) {
    f(l.name + ".weight", l.weight, InitKind::weight, l.weight.dim(1));
    f(l.name + ".bias", l.bias, InitKind::bias, std::size_t{0});
  };
  auto ln = [&](auto& n) {
    f(n.name + ".gamma", n.gamma, InitKind::gamma, std::size_t{0});
    f(n.name + ".beta", n.beta, InitKind::beta, std::size_t{0});
  };
  auto layer = [&](auto& l) {
    lin(l.self_attn.qkv);
    lin(l.self_attn.out);
    ln(l.self_attn.ln);
    if (l.cross_attn) {
      lin(l.cross_attn->q);
      lin(l.cross_attn->kv);
      lin(l.cross_attn->out);
      ln(l.cross_attn->ln);
    }
    lin(l.ffn.intermediate);
    lin(l.ffn.out);
    ln(l.ffn.ln);
  };
  for (auto& l : m.encoder) layer(l);
  if (m.encoder_final_ln) ln(*m.encoder_final_ln);
  for (auto& l : m.decoder) layer(l);
  if (m.decoder_final_ln) ln(*m.decoder_final_ln);
  lin(m.lm_head);
  if (m.cls_head) lin(*m.cls_head);
}

template <typename T>
void copy_values(const BasicTensor<T>& src, BasicTensor<T> dst) {
  if (src.shape() != dst.shape()) {
    throw DimensionError("cannot copy " + shape_str(src.shape()) + " into " + shape_str(dst.shape()));
  }
  std::copy(src.data().begin(), src.data().end(), dst.mutable_data().begin());
}

}  // namespace

template <typename T>
std::vector<NamedParameter<T>> Transformer<T>::parameters() const {
  std::vector<NamedParameter<T>> out;
  visit_parameters(*this, [&](std::string name, const BasicTensor<T>& t, InitKind, std::size_t) {
    out.push_back({std::move(name), t});
  });
  return out;
}

template <typename T>
BasicTensor<T> Transformer<T>::parameter(const std::string& name) const {
  for (auto& p : parameters())
    if (p.name == name) return p.tensor;
  throw std::out_of_range("model has no parameter named '" + name + "'");
}

template <typename T>
std::vector<Linear<T>*> Transformer<T>::linears() {
  std::vector<Linear<T>*> out;
  visit_linears(*this, [&](Linear<T>& l) { out.push_back(&l); });
  return out;
}

template <typename T>
std::vector<const Linear<T>*> Transformer<T>::linears() const {
  std::vector<const Linear<T>*> out;
  visit_linears(*this, [&](const Linear<T>& l) { out.push_back(&l); });
  return out;
}

template <typename T>
Linear<T>& Transformer<T>::linear(const std::string& weight_name) {
  for (auto* l : linears())
    if (l->weight_name() == weight_name || l->name == weight_name) return *l;
  throw std::out_of_range("model has no linear layer named '" + weight_name + "'");
}

template <typename T>
Transformer<T> Transformer<T>::clone() const {
  Transformer<T> out = *this;
  visit_parameters(out, [](const std::string&, BasicTensor<T>& t, InitKind, std::size_t) {
    const bool rg = t.requires_grad();
    t = t.detach();
    t.set_requires_grad(rg);
  });
  return out;
}

template <typename T>
void Transformer<T>::set_requires_grad(bool value) const {
  for (auto& p : parameters()) p.tensor.set_requires_grad(value);
}

template <typename T>
void Transformer<T>::zero_grad() const {
  for (auto& p : parameters()) p.tensor.zero_grad();
}

template <typename T>
Transformer<T> build_model(const ModelConfig& cfg, std::uint64_t seed) {
  auto m = make_structure<T>(cfg);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  visit_parameters(m, [&](const std::string&, BasicTensor<T>& t, InitKind kind, std::size_t fan_in) {
    double stddev = 0.0;
    switch (kind) {
      case InitKind::token_embedding: stddev = 1.0; break;
      case InitKind::position_embedding: stddev = 0.1; break;
      case InitKind::weight: stddev = 1.0 / std::sqrt(static_cast<double>(fan_in)); break;
      default: return;
    }
    for (auto& v : t.mutable_data()) v = static_cast<T>(stddev * normal(rng));
  });
  return m;
}

template <typename To, typename From>
Transformer<To> cast_model(const Transformer<From>& src) {
  auto dst = make_structure<To>(src.config);
  const auto sp = src.parameters();
  const auto dp = dst.parameters();
  for (std::size_t i = 0; i < sp.size(); ++i) {
    auto d = dp[i].tensor;
    auto s = sp[i].tensor.data();
    std::transform(s.begin(), s.end(), d.mutable_data().begin(), [](From v) { return static_cast<To>(v); });
    d.set_requires_grad(sp[i].tensor.requires_grad());
  }
  const auto sl = src.linears();
  const auto dl = dst.linears();
  for (std::size_t i = 0; i < sl.size(); ++i) dl[i]->frozen = sl[i]->frozen;
  dst.masks = src.masks;
  dst.order = src.order;
  return dst;
}

std::size_t parameter_count(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t h = cfg.hidden, v = cfg.vocab_size;
  std::size_t n = v * h + cfg.max_seq * h + layer_stack_parameter_count(cfg);
  if (cfg.ln == LnPlacement::pre) n += 2 * h * ((cfg.encoder_layers > 0) + (cfg.decoder_layers > 0));
  n += v * h + v;
  if (cfg.num_classes > 0) n += cfg.num_classes * h + cfg.num_classes;
  return n;
}

std::size_t layer_stack_parameter_count(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t h = cfg.hidden, f = cfg.ffn_hidden();
  const std::size_t self_attn = (3 * h * h + 3 * h) + (h * h + h) + 2 * h;
  const std::size_t cross_attn = (h * h + h) + (2 * h * h + 2 * h) + (h * h + h) + 2 * h;
  const std::size_t ffn = (f * h + f) + (h * f + h) + 2 * h;
  const std::size_t enc = self_attn + ffn;
  const std::size_t dec = enc + (cfg.arch == Arch::encoder_decoder ? cross_attn : 0);
  return cfg.encoder_layers * enc + cfg.decoder_layers * dec;
}

// ---------------------------------------------------------------------------
// Forward

QuantizedLinearWeight quantize_linear_weight(const Tensor& w, const SparsityMask* mask, CompositionOrder order,
                                             const QuantScheme& scheme) {
  if (mask == nullptr) return {quantize(w, scheme, QuantRole::weight), {}};
  if (mask->keep.size() != w.numel()) {
    throw DimensionError("mask " + shape_str(mask->shape) + " does not match weight " + shape_str(w.shape()));
  }
  if (order == CompositionOrder::prune_then_quant) {
    std::vector<float> wm(w.data().begin(), w.data().end());
    for (std::size_t i = 0; i < wm.size(); ++i)
      if (!mask->keep[i]) wm[i] = 0.0f;
    return {quantize(Tensor(w.shape(), std::move(wm)), scheme, QuantRole::weight), {}};
  }
  QuantizedLinearWeight out{quantize(w, scheme, QuantRole::weight), mask->keep};
  for (std::size_t i = 0; i < out.keep.size(); ++i)
    if (!out.keep[i]) out.codes.lanes[i] = 0;
  return out;
}

namespace {

template <typename T>
BasicTensor<T> mask_tensor(const SparsityMask& m) {
  return BasicTensor<T>(m.shape, std::vector<T>(m.keep.begin(), m.keep.end()));
}

template <typename T>
struct Ctx {
  const Transformer<T>& model;
  const ForwardOptions& opt;
  std::size_t layer = 0;  // flat layer index for the probe

  bool train() const noexcept { return opt.mode == Mode::train; }

  const SparsityMask* mask_for(const Linear<T>& l) const {
    auto it = model.masks.find(l.weight_name());
    return it == model.masks.end() ? nullptr : &it->second;
  }

  void probe(LinearPart part, const BasicTensor<T>& x) const {
    if (opt.probe == nullptr || opt.probe->layer != layer || opt.probe->part != part) return;
    opt.probe->captured = tensor_cast<float>(x).detach();
  }

  BasicTensor<T> drop(const BasicTensor<T>& x) const {
    const double rate = model.config.dropout;
    if (!train() || rate <= 0.0) return x;
    if (opt.rng == nullptr) throw std::invalid_argument("train-mode forward with dropout needs an RNG");
    return dropout(x, rate, *opt.rng);
  }
};

/// Dequantized effective weight of a quantized linear, evaluated in T through
/// the fake quantizer (so the gradient-check surrogate sees it).
template <typename T>
std::vector<T> fake_weight(const Linear<T>& l, const SparsityMask* mask, CompositionOrder order,
                           const QuantScheme& ws) {
  if (l.frozen) {
    const auto d = dequantize(*l.frozen);
    return std::vector<T>(d.data().begin(), d.data().end());
  }
  std::vector<T> w(l.weight.data().begin(), l.weight.data().end());
  if (mask && order == CompositionOrder::prune_then_quant)
    for (std::size_t i = 0; i < w.size(); ++i)
      if (!mask->keep[i]) w[i] = T{0};
  auto q = fake_quantize_values<T>(w, l.weight.shape(), ws, QuantRole::weight).values;
  if (mask && order == CompositionOrder::quant_then_prune)
    for (std::size_t i = 0; i < q.size(); ++i)
      if (!mask->keep[i]) q[i] = T{0};
  return q;
}

/// Linear with both operands on the integer grid. Float models run the fused
/// integer kernel (packed 4-bit weights in eval, unpacked lanes in train);
/// double models and gradient checks run dequantize-then-matmul. Backward is
/// the clipped STE on both operands.
template <typename T>
BasicTensor<T> quantized_linear(const Ctx<T>& ctx, const Linear<T>& l, const BasicTensor<T>& x, Activation act) {
  const auto& ws = ctx.opt.strategy.weight_scheme;
  const auto& as = ctx.opt.strategy.activation_scheme;
  const SparsityMask* mask = ctx.mask_for(l);
  const std::size_t m = x.dim(0), k = x.dim(1), n = l.weight.dim(0);
  if (l.weight.dim(1) != k) {
    throw DimensionError(l.name + ": input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(l.weight.shape()));
  }
  const bool record = should_record<T>({&x, &l.weight, &l.bias});
  std::vector<T> xhat, what;
  std::vector<std::uint8_t> xpass;
  BasicTensor<T> y;
  bool gelu_done = false;

  bool integer_path = false;
  if constexpr (std::is_same_v<T, float>) integer_path = SteSurrogate<float>::active() == nullptr;

  if constexpr (std::is_same_v<T, float>) {
    if (integer_path) {
      const QTensor xq = quantize(x, as, QuantRole::activation);
      QuantizedLinearWeight qw = l.frozen ? QuantizedLinearWeight{*l.frozen, {}}
                                          : quantize_linear_weight(l.weight, mask, ctx.model.order, ws);
      if (l.frozen && mask && ctx.model.order == CompositionOrder::quant_then_prune) {
        qw.keep = mask->keep;
        for (std::size_t i = 0; i < qw.keep.size(); ++i)
          if (!qw.keep[i]) qw.codes.lanes[i] = 0;
      }
      const bool eval = !ctx.train();
      const auto prepared = prepare_weight(qw.codes, eval, qw.keep);
      const Activation fused = eval ? act : Activation::none;
      y = gemm_fused(xq, prepared, l.bias.data(), fused, ctx.opt.workers);
      gelu_done = eval;
      if (record) {
        const auto xd = dequantize(xq);
        xhat.assign(xd.data().begin(), xd.data().end());
        xpass.resize(x.numel());
        auto xv = x.data();
        for (std::size_t i = 0; i < xpass.size(); ++i) xpass[i] = apply_clip(xv[i], as.clip) == xv[i];
        const auto wd = dequantize(qw.codes);
        what.assign(wd.data().begin(), wd.data().end());
        for (std::size_t i = 0; i < qw.keep.size(); ++i)
          if (!qw.keep[i]) what[i] = 0.0f;
      }
    }
  }
  if (!integer_path) {
    auto fx = fake_quantize_values<T>(x.data(), x.shape(), as, QuantRole::activation);
    xhat = std::move(fx.values);
    xpass = std::move(fx.pass);
    what = fake_weight(l, mask, ctx.model.order, ws);
    std::vector<T> out(m * n);
    const auto wt = transpose<T>(what, n, k);
    gemm_nn<T>(xhat, wt, out, m, n, k);
    auto b = l.bias.data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += b[j];
    y = BasicTensor<T>({m, n}, std::move(out));
  }

  if (record) {
    std::vector<std::uint8_t> wkeep;
    if (mask) wkeep = mask->keep;
    const bool weight_grad = !l.frozen;
    BasicTape<T>::active()->record(
        {x, l.weight, l.bias}, y,
        [x, w = l.weight, b = l.bias, y, xhat = std::move(xhat), what = std::move(what), xpass = std::move(xpass),
         wkeep = std::move(wkeep), weight_grad, m, n, k]() {
          auto gy = y.grad();
          if (x.requires_grad()) {
            auto gx = x.grad_buffer();
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t p = 0; p < k; ++p) {
                if (!xpass[i * k + p]) continue;
                double acc = 0.0;
                for (std::size_t j = 0; j < n; ++j)
                  acc += static_cast<double>(gy[i * n + j]) * static_cast<double>(what[j * k + p]);
                gx[i * k + p] += static_cast<T>(acc);
              }
          }
          if (weight_grad && w.requires_grad()) {
            auto gw = w.grad_buffer();
            for (std::size_t j = 0; j < n; ++j)
              for (std::size_t p = 0; p < k; ++p) {
                if (!wkeep.empty() && !wkeep[j * k + p]) continue;
                double acc = 0.0;
                for (std::size_t i = 0; i < m; ++i)
                  acc += static_cast<double>(gy[i * n + j]) * static_cast<double>(xhat[i * k + p]);
                gw[j * k + p] += static_cast<T>(acc);
              }
          }
          if (b.requires_grad()) {
            auto gb = b.grad_buffer();
            for (std::size_t j = 0; j < n; ++j) {
              double acc = 0.0;
              for (std::size_t i = 0; i < m; ++i) acc += static_cast<double>(gy[i * n + j]);
              gb[j] += static_cast<T>(acc);
            }
          }
        });
  }
  if (act == Activation::gelu && !gelu_done) y = gelu(y);
  return y;
}

template <typename T>
BasicTensor<T> apply_linear(const Ctx<T>& ctx, const Linear<T>& l, const BasicTensor<T>& x,
                            Activation act = Activation::none) {
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  const auto& s = ctx.opt.strategy;
  const bool quant = l.quantizable && s.on(l.part);
  const SparsityMask* mask = ctx.mask_for(l);
  const bool wq = quant && !s.weight_scheme.passthrough();
  const bool aq = quant && !s.activation_scheme.passthrough();

  BasicTensor<T> y;
  if (wq && aq) {
    y = quantized_linear(ctx, l, x, act);
  } else {
    BasicTensor<T> w = l.weight;
    if (wq && l.frozen) {
      const auto d = dequantize(*l.frozen);
      w = BasicTensor<T>(l.weight.shape(), std::vector<T>(d.data().begin(), d.data().end()));
      if (mask) w = mul(w, mask_tensor<T>(*mask));
    } else if (wq) {
      w = mask ? masked_quantized_weight(w, *mask, s.weight_scheme, ctx.model.order)
               : fake_quantize_ste(w, s.weight_scheme, QuantRole::weight);
    } else if (mask) {
      w = mul(w, mask_tensor<T>(*mask));
    }
    const BasicTensor<T> xin = aq ? fake_quantize_ste(x, s.activation_scheme, QuantRole::activation) : x;
    y = linear(xin, w, l.bias);
    if (act == Activation::gelu) y = gelu(y);
  }
  if (ctx.opt.profile != nullptr && l.quantizable) {
    const double ns = std::chrono::duration<double, std::nano>(clock::now() - t0).count();
    ctx.opt.profile->part_ns[static_cast<std::size_t>(l.part)] += ns;
  }
  return y;
}

template <typename T>
BasicTensor<T> ln_apply(const LayerNormParams<T>& p, const BasicTensor<T>& x) {
  return layer_norm(x, p.gamma, p.beta);
}

/// Attention sublayer (without residual/LN). `memory` is the encoder output
/// for cross attention, undefined for self attention.
template <typename T>
BasicTensor<T> attention(Ctx<T>& ctx, const AttentionBlock<T>& blk, const BasicTensor<T>& x,
                         const BasicTensor<T>& memory, std::size_t batch, MaskMode mode, LayerTrace<T>* trace) {
  const std::size_t h = ctx.model.config.hidden, heads = ctx.model.config.heads;
  BasicTensor<T> q, k, v;
  if (!blk.cross) {
    ctx.probe(LinearPart::qkv_proj, x);
    const auto qkv = apply_linear(ctx, blk.qkv, x);
    q = slice_cols(qkv, 0, h);
    k = slice_cols(qkv, h, 2 * h);
    v = slice_cols(qkv, 2 * h, 3 * h);
  } else {
    q = apply_linear(ctx, blk.q, x);
    const auto kv = apply_linear(ctx, blk.kv, memory);
    k = slice_cols(kv, 0, h);
    v = slice_cols(kv, h, 2 * h);
  }
  auto att = softmax_attention(split_heads(q, batch, heads), split_heads(k, batch, heads),
                               split_heads(v, batch, heads), mode);
  if (trace != nullptr) {
    trace->scores = att.scores;
    trace->probs = att.probs;
    trace->mask = mode;
  }
  const auto merged = merge_heads(att.out);
  if (!blk.cross) ctx.probe(LinearPart::attn_out, merged);
  return apply_linear(ctx, blk.out, merged);
}

template <typename T>
BasicTensor<T> feed_forward(Ctx<T>& ctx, const FeedForward<T>& ffn, const BasicTensor<T>& x) {
  ctx.probe(LinearPart::mlp_intermediate, x);
  const auto mid = apply_linear(ctx, ffn.intermediate, x, Activation::gelu);
  ctx.probe(LinearPart::mlp_out, mid);
  return apply_linear(ctx, ffn.out, mid);
}

template <typename T>
BasicTensor<T> run_layer(Ctx<T>& ctx, const TransformerLayer<T>& layer, BasicTensor<T> x, const BasicTensor<T>& memory,
                         std::size_t batch, MaskMode mode, LayerTrace<T>& trace) {
  const bool pre = ctx.model.config.ln == LnPlacement::pre;
  auto sublayer = [&](const LayerNormParams<T>& ln, auto&& body) {
    if (pre) return add(x, ctx.drop(body(ln_apply(ln, x))));
    return ln_apply(ln, add(x, ctx.drop(body(x))));
  };
  x = sublayer(layer.self_attn.ln, [&](const BasicTensor<T>& in) {
    return attention(ctx, layer.self_attn, in, BasicTensor<T>{}, batch, mode, &trace);
  });
  if (layer.cross_attn) {
    x = sublayer(layer.cross_attn->ln, [&](const BasicTensor<T>& in) {
      return attention<T>(ctx, *layer.cross_attn, in, memory, batch, MaskMode::cross, nullptr);
    });
  }
  x = sublayer(layer.ffn.ln, [&](const BasicTensor<T>& in) { return feed_forward(ctx, layer.ffn, in); });
  trace.hidden = x;
  return x;
}

template <typename T>
BasicTensor<T> embed(const Ctx<T>& ctx, std::span<const std::int32_t> tokens, std::size_t batch, std::size_t seq) {
  const auto& cfg = ctx.model.config;
  if (seq == 0 || batch == 0) throw DimensionError("forward needs a nonempty [batch, seq] input");
  if (tokens.size() != batch * seq) {
    throw DimensionError("token buffer of " + std::to_string(tokens.size()) + " ids is not [" + std::to_string(batch) +
                         ", " + std::to_string(seq) + "]");
  }
  if (seq > cfg.max_seq) {
    throw DimensionError("sequence length " + std::to_string(seq) + " exceeds max_seq " + std::to_string(cfg.max_seq));
  }
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= cfg.vocab_size) {
      throw std::invalid_argument("token id " + std::to_string(tokens[i]) + " at index " + std::to_string(i) +
                                  " is outside the vocabulary of " + std::to_string(cfg.vocab_size));
    }
  }
  std::vector<std::int32_t> pos(tokens.size());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<std::int32_t>(i % seq);
  return ctx.drop(add(gather_rows(ctx.model.token_embedding, tokens), gather_rows(ctx.model.position_embedding, pos)));
}

}  // namespace

template <typename T>
ForwardResult<T> forward(const Transformer<T>& model, const ModelInput& input, const ForwardOptions& options) {
  options.strategy.validate();
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  Ctx<T> ctx{model, options};
  const auto& cfg = model.config;
  ForwardResult<T> res;
  const std::size_t batch = input.batch;

  BasicTensor<T> memory;
  BasicTensor<T> stream;
  std::size_t seq = input.seq;
  if (cfg.arch != Arch::decoder_only) {
    const bool encdec = cfg.arch == Arch::encoder_decoder;
    const auto& toks = encdec ? input.source : input.tokens;
    const std::size_t s = encdec ? input.source_seq : input.seq;
    auto x = embed(ctx, toks, batch, s);
    for (std::size_t i = 0; i < model.encoder.size(); ++i) {
      ctx.layer = i;
      LayerTrace<T> tr;
      x = run_layer(ctx, model.encoder[i], x, BasicTensor<T>{}, batch, MaskMode::full, tr);
      res.layers.push_back(std::move(tr));
    }
    if (model.encoder_final_ln) x = ln_apply(*model.encoder_final_ln, x);
    if (encdec) {
      memory = x;
    } else {
      stream = x;
      seq = s;
    }
  }
  if (cfg.arch != Arch::encoder_only) {
    auto x = embed(ctx, input.tokens, batch, input.seq);
    for (std::size_t i = 0; i < model.decoder.size(); ++i) {
      ctx.layer = model.encoder.size() + i;
      LayerTrace<T> tr;
      tr.decoder = true;
      x = run_layer(ctx, model.decoder[i], x, memory, batch, MaskMode::causal, tr);
      res.layers.push_back(std::move(tr));
    }
    if (model.decoder_final_ln) x = ln_apply(*model.decoder_final_ln, x);
    stream = x;
  }

  res.logits = reshape(linear(stream, model.lm_head.weight, model.lm_head.bias), Shape{batch, seq, cfg.vocab_size});
  if (model.cls_head) {
    std::vector<std::int32_t> first(batch);
    for (std::size_t b = 0; b < batch; ++b) first[b] = static_cast<std::int32_t>(b * seq);
    res.class_logits = linear(gather_rows(stream, first), model.cls_head->weight, model.cls_head->bias);
  }
  if (options.profile != nullptr) {
    options.profile->total_ns += std::chrono::duration<double, std::nano>(clock::now() - t0).count();
  }
  return res;
}

// ---------------------------------------------------------------------------
// Layer reduction

ReducedConfig layer_reduce(const ModelConfig& teacher, std::size_t target_x, std::size_t target_y, CopyPolicy policy) {
  teacher.validate();
  if (target_x > teacher.encoder_layers || target_y > teacher.decoder_layers) {
    throw std::invalid_argument("layer_reduce: target " + std::to_string(target_x) + "/" + std::to_string(target_y) +
                                " exceeds teacher depth " + std::to_string(teacher.encoder_layers) + "/" +
                                std::to_string(teacher.decoder_layers));
  }
  ReducedConfig r;
  r.config = teacher;
  r.config.encoder_layers = target_x;
  r.config.decoder_layers = target_y;
  r.config.validate();
  auto spaced = [](std::size_t i, std::size_t from, std::size_t to) { return i * from / to; };
  for (std::size_t i = 0; i < target_x; ++i)
    r.mapping.encoder.push_back(policy == CopyPolicy::first_k_even_spacing ? i
                                                                           : spaced(i, teacher.encoder_layers, target_x));
  for (std::size_t i = 0; i < target_y; ++i) r.mapping.decoder.push_back(spaced(i, teacher.decoder_layers, target_y));
  return r;
}

namespace {

template <typename T>
std::vector<BasicTensor<T>> layer_tensors(const TransformerLayer<T>& l) {
  std::vector<BasicTensor<T>> out;
  auto lin = [&](const Linear<T>& x) {
    out.push_back(x.weight);
    out.push_back(x.bias);
  };
  auto ln = [&](const LayerNormParams<T>& n) {
    out.push_back(n.gamma);
    out.push_back(n.beta);
  };
  lin(l.self_attn.qkv);
  lin(l.self_attn.out);
  ln(l.self_attn.ln);
  if (l.cross_attn) {
    lin(l.cross_attn->q);
    lin(l.cross_attn->kv);
    lin(l.cross_attn->out);
    ln(l.cross_attn->ln);
  }
  lin(l.ffn.intermediate);
  lin(l.ffn.out);
  ln(l.ffn.ln);
  return out;
}

template <typename T>
void copy_layer(const TransformerLayer<T>& src, TransformerLayer<T>& dst) {
  const auto s = layer_tensors(src);
  const auto d = layer_tensors(dst);
  for (std::size_t i = 0; i < s.size(); ++i) copy_values(s[i], d[i]);
}

}  // namespace

template <typename T>
Transformer<T> reduce_model(const Transformer<T>& teacher, const ReducedConfig& reduced) {
  if (reduced.mapping.encoder.size() != reduced.config.encoder_layers ||
      reduced.mapping.decoder.size() != reduced.config.decoder_layers) {
    throw std::invalid_argument("layer mapping does not match the reduced config");
  }
  auto student = make_structure<T>(reduced.config);
  copy_values(teacher.token_embedding, student.token_embedding);
  copy_values(teacher.position_embedding, student.position_embedding);
  for (std::size_t i = 0; i < student.encoder.size(); ++i) {
    const std::size_t t = reduced.mapping.encoder[i];
    if (t >= teacher.encoder.size()) throw std::out_of_range("layer mapping points past the teacher encoder");
    copy_layer(teacher.encoder[t], student.encoder[i]);
  }
  for (std::size_t i = 0; i < student.decoder.size(); ++i) {
    const std::size_t t = reduced.mapping.decoder[i];
    if (t >= teacher.decoder.size()) throw std::out_of_range("layer mapping points past the teacher decoder");
    copy_layer(teacher.decoder[t], student.decoder[i]);
  }
  auto copy_ln = [](const auto& s, auto& d) {
    if (s && d) {
      copy_values(s->gamma, d->gamma);
      copy_values(s->beta, d->beta);
    }
  };
  copy_ln(teacher.encoder_final_ln, student.encoder_final_ln);
  copy_ln(teacher.decoder_final_ln, student.decoder_final_ln);
  copy_values(teacher.lm_head.weight, student.lm_head.weight);
  copy_values(teacher.lm_head.bias, student.lm_head.bias);
  if (teacher.cls_head && student.cls_head) {
    copy_values(teacher.cls_head->weight, student.cls_head->weight);
    copy_values(teacher.cls_head->bias, student.cls_head->bias);
  }
  student.order = teacher.order;
  return student;
}

// ---------------------------------------------------------------------------
// Language-model evaluation

WindowNll window_nll(const Transformer<float>& model, std::span<const std::int32_t> stream,
                     const QuantStrategy& strategy, std::size_t window) {
  if (model.config.arch != Arch::decoder_only) {
    throw std::invalid_argument("perplexity is defined for decoder-only models");
  }
  if (stream.size() < 2) throw std::invalid_argument("perplexity needs a token stream of at least 2 tokens");
  if (window == 0) window = model.config.max_seq;
  window = std::min({window, model.config.max_seq, stream.size() - 1});

  WindowNll out;
  out.window = window;
  out.windows = (stream.size() - 1) / window;
  out.nll.resize(out.windows * window);
  const std::size_t v = model.config.vocab_size;
  constexpr std::size_t kBatch = 16;
  ForwardOptions opt;
  opt.strategy = strategy;
  opt.mode = Mode::eval;
  for (std::size_t w0 = 0; w0 < out.windows; w0 += kBatch) {
    const std::size_t nb = std::min(kBatch, out.windows - w0);
    ModelInput in;
    in.batch = nb;
    in.seq = window;
    in.tokens.resize(nb * window);
    for (std::size_t b = 0; b < nb; ++b)
      std::copy_n(stream.begin() + static_cast<std::ptrdiff_t>((w0 + b) * window), window,
                  in.tokens.begin() + static_cast<std::ptrdiff_t>(b * window));
    const auto res = forward(model, in, opt);
    auto logits = res.logits.data();
    for (std::size_t b = 0; b < nb; ++b)
      for (std::size_t t = 0; t < window; ++t) {
        const std::size_t row = b * window + t;
        const float* z = logits.data() + row * v;
        double mx = z[0];
        for (std::size_t c = 1; c < v; ++c) mx = std::max(mx, static_cast<double>(z[c]));
        double se = 0.0;
        for (std::size_t c = 0; c < v; ++c) se += std::exp(static_cast<double>(z[c]) - mx);
        const auto target = static_cast<std::size_t>(stream[(w0 + b) * window + t + 1]);
        out.nll[(w0 + b) * window + t] = mx + std::log(se) - static_cast<double>(z[target]);
      }
  }
  return out;
}

double perplexity(const Transformer<float>& model, std::span<const std::int32_t> stream,
                  const QuantStrategy& strategy, std::size_t window) {
  const auto w = window_nll(model, stream, strategy, window);
  double total = 0.0;
  for (double x : w.nll) total += x;
  return std::exp(total / static_cast<double>(w.nll.size()));
}

template struct Transformer<float>;
template struct Transformer<double>;
template Transformer<float> build_model<float>(const ModelConfig&, std::uint64_t);
template Transformer<double> build_model<double>(const ModelConfig&, std::uint64_t);
template Transformer<double> cast_model<double, float>(const Transformer<float>&);
template Transformer<float> cast_model<float, double>(const Transformer<double>&);
template ForwardResult<float> forward<float>(const Transformer<float>&, const ModelInput&, const ForwardOptions&);
template ForwardResult<double> forward<double>(const Transformer<double>&, const ModelInput&, const ForwardOptions&);
template Transformer<float> reduce_model<float>(const Transformer<float>&, const ReducedConfig&);
template Transformer<double> reduce_model<double>(const Transformer<double>&, const ReducedConfig&);

}  // namespace q4fg
