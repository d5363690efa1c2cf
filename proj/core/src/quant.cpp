#include "q4fg/quant.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace q4fg {

std::int32_t QuantScheme::code_min() const noexcept {
  if (passthrough()) return 0;
  return mapping == Mapping::symmetric ? -(1 << (bits - 1)) : 0;
}

std::int32_t QuantScheme::code_max() const noexcept {
  if (passthrough()) return 0;
  return mapping == Mapping::symmetric ? (1 << (bits - 1)) - 1 : (1 << bits) - 1;
}

void QuantScheme::validate() const {
  if (bits != 4 && bits != 8 && bits != 32) {
    throw SchemeError("quantization bits must be 4, 8 or 32 (passthrough), got " + std::to_string(bits));
  }
  if (granularity == Granularity::per_group && groups == 0) {
    throw SchemeError("per-group quantization needs at least one group");
  }
  if (clip && !(clip->lo < clip->hi)) {
    throw SchemeError("clip range must satisfy lo < hi");
  }
}

std::string QuantScheme::describe() const {
  if (passthrough()) return "fp32";
  std::ostringstream os;
  os << bits << (mapping == Mapping::symmetric ? ":sym" : ":asym");
  switch (granularity) {
    case Granularity::per_tensor: os << ":tensor"; break;
    case Granularity::per_group: os << ":g" << groups; break;
    case Granularity::per_channel: os << ":row"; break;
    case Granularity::per_token: os << ":token"; break;
  }
  if (clip) os << ":clip[" << clip->lo << ".." << clip->hi << ']';
  return os.str();
}

QuantScheme QuantScheme::passthrough_scheme() {
  QuantScheme s;
  s.bits = 32;
  return s;
}

QuantScheme QuantScheme::symmetric(int bits, Granularity g, std::size_t groups) {
  QuantScheme s;
  s.bits = bits;
  s.mapping = Mapping::symmetric;
  s.granularity = g;
  s.groups = groups;
  return s;
}

QuantScheme QuantScheme::asymmetric(int bits, Granularity g, std::size_t groups) {
  auto s = symmetric(bits, g, groups);
  s.mapping = Mapping::asymmetric;
  return s;
}

GroupLayout group_layout(const Shape& shape, const QuantScheme& scheme) {
  const std::size_t n = shape_numel(shape);
  if (n == 0) throw DimensionError("cannot quantize an empty tensor of shape " + shape_str(shape));
  if (scheme.passthrough()) return {1, n};
  switch (scheme.granularity) {
    case Granularity::per_tensor:
      return {1, n};
    case Granularity::per_group: {
      if (scheme.groups == 0 || scheme.groups > n) {
        throw SchemeError("group count " + std::to_string(scheme.groups) + " outside [1, " + std::to_string(n) +
                          "] for shape " + shape_str(shape));
      }
      const std::size_t size = (n + scheme.groups - 1) / scheme.groups;
      return {(n + size - 1) / size, size};
    }
    case Granularity::per_channel:
    case Granularity::per_token: {
      if (shape.size() < 2) {
        throw SchemeError("per-row quantization needs a 2-D view, got " + shape_str(shape));
      }
      const std::size_t features = shape.back();
      return {n / features, features};
    }
  }
  return {1, n};
}

template <typename T>
AffineParams<T> compute_params_symmetric(std::span<const T> x, int bits) {
  if (x.empty()) throw DimensionError("cannot compute quantization parameters of an empty group");
  T max_abs = 0;
  for (auto v : x) max_abs = std::max(max_abs, static_cast<T>(std::fabs(v)));
  if (max_abs == T{0}) return {T{1}, T{0}, T{1}};
  const T qmax = static_cast<T>((1 << (bits - 1)) - 1);
  return {max_abs / qmax, T{0}, qmax / max_abs};
}

template <typename T>
AffineParams<T> compute_params_asymmetric(std::span<const T> x, int bits) {
  if (x.empty()) throw DimensionError("cannot compute quantization parameters of an empty group");
  const auto [lo_it, hi_it] = std::minmax_element(x.begin(), x.end());
  const T lo = *lo_it;
  const T hi = *hi_it;
  if (hi == lo) return {T{1}, lo, T{1}};
  const T levels = static_cast<T>((1 << bits) - 1);
  const T range = hi - lo;
  return {range / levels, lo, levels / range};
}

void check_scheme(const QuantScheme& scheme, QuantRole role) {
  scheme.validate();
  if (role == QuantRole::activation && scheme.granularity == Granularity::per_channel) {
    throw SchemeError("per-channel granularity applies to weights; use per-token for activations");
  }
  if (role == QuantRole::weight && !scheme.passthrough()) {
    if (scheme.granularity == Granularity::per_token) {
      throw SchemeError("per-token granularity applies to activations, not weights");
    }
    if (scheme.granularity == Granularity::per_group && scheme.groups == 0) {
      throw SchemeError("per-group quantization needs at least one group");
    }
    if (scheme.clip) throw SchemeError("weights are not clipped; remove the clip range from the weight scheme");
  }
}

namespace {

template <typename T>
std::int32_t quantize_one(T clipped, const AffineParams<T>& p, std::int32_t lo, std::int32_t hi) {
  T v = (clipped - p.zero) * p.inv_scale;
  v = std::clamp(v, static_cast<T>(lo), static_cast<T>(hi));
  return static_cast<std::int32_t>(std::nearbyint(v));
}

template <typename T>
T dequantize_one(std::int32_t code, T scale, T zero) {
  return scale * static_cast<T>(code) + zero;
}

/// Shared by quantize() and the fake quantizers so both agree bit for bit.
template <typename T>
void quantize_slots(std::span<const T> clipped, const GroupLayout& layout, const QuantScheme& scheme,
                    std::vector<std::int32_t>& codes, std::vector<AffineParams<T>>& params) {
  const std::size_t n = clipped.size();
  codes.resize(n);
  params.resize(layout.count);
  for (std::size_t s = 0; s < layout.count; ++s) {
    const std::size_t b = layout.begin(s), e = layout.end(s, n);
    auto group = clipped.subspan(b, e - b);
    params[s] = scheme.mapping == Mapping::symmetric ? compute_params_symmetric<T>(group, scheme.bits)
                                                     : compute_params_asymmetric<T>(group, scheme.bits);
    for (std::size_t i = b; i < e; ++i)
      codes[i] = quantize_one(clipped[i], params[s], scheme.code_min(), scheme.code_max());
  }
}

}  // namespace

QTensor quantize(const Tensor& x, const QuantScheme& scheme, QuantRole role) {
  check_scheme(scheme, role);
  QTensor q;
  q.shape = x.shape();
  q.scheme = scheme;
  if (scheme.passthrough()) {
    (void)group_layout(x.shape(), scheme);
    q.passthrough.assign(x.data().begin(), x.data().end());
    return q;
  }
  const auto layout = group_layout(x.shape(), scheme);
  std::vector<float> clipped(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < clipped.size(); ++i) clipped[i] = apply_clip(xd[i], scheme.clip);

  std::vector<std::int32_t> codes;
  std::vector<AffineParams<float>> params;
  quantize_slots<float>(clipped, layout, scheme, codes, params);

  q.lanes.resize(codes.size());
  for (std::size_t i = 0; i < codes.size(); ++i) {
    q.lanes[i] = scheme.mapping == Mapping::symmetric
                     ? static_cast<std::uint8_t>(static_cast<std::int8_t>(codes[i]))
                     : static_cast<std::uint8_t>(codes[i]);
  }
  q.params.scales.reserve(params.size());
  q.params.zero_points.reserve(params.size());
  for (const auto& p : params) {
    q.params.scales.push_back(p.scale);
    q.params.zero_points.push_back(p.zero);
  }
  return q;
}

Tensor dequantize(const QTensor& q) {
  if (q.scheme.passthrough()) return Tensor(q.shape, q.passthrough);
  const auto layout = q.layout();
  if (q.params.scales.size() != layout.count || q.params.zero_points.size() != layout.count) {
    throw SchemeError("quantized tensor carries " + std::to_string(q.params.scales.size()) +
                      " parameter slots, layout needs " + std::to_string(layout.count));
  }
  if (q.lanes.size() != q.numel()) throw DimensionError("quantized payload does not match shape " + shape_str(q.shape));
  std::vector<float> out(q.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::size_t s = layout.slot(i);
    out[i] = dequantize_one(q.code(i), q.params.scales[s], q.params.zero_points[s]);
  }
  return Tensor(q.shape, std::move(out));
}

QuantParams tokenwise_activation_params(const Tensor& x, const QuantScheme& scheme) {
  scheme.validate();
  if (x.rank() < 2) {
    throw SchemeError("token-wise parameters need a [tokens, features] tensor, got " + shape_str(x.shape()));
  }
  QuantParams out;
  if (scheme.passthrough()) return out;
  const std::size_t features = x.shape().back();
  const std::size_t tokens = x.numel() / features;
  std::vector<float> row(features);
  auto xd = x.data();
  for (std::size_t t = 0; t < tokens; ++t) {
    for (std::size_t f = 0; f < features; ++f) row[f] = apply_clip(xd[t * features + f], scheme.clip);
    const auto p = scheme.mapping == Mapping::symmetric ? compute_params_symmetric<float>(row, scheme.bits)
                                                        : compute_params_asymmetric<float>(row, scheme.bits);
    out.scales.push_back(p.scale);
    out.zero_points.push_back(p.zero);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fake quantization

namespace {
template <typename T>
thread_local SteSurrogate<T>* g_active_surrogate = nullptr;
}

template <typename T>
SteSurrogate<T>::SteSurrogate() : previous_(g_active_surrogate<T>) {
  g_active_surrogate<T> = this;
}

template <typename T>
SteSurrogate<T>::~SteSurrogate() {
  g_active_surrogate<T> = previous_;
}

template <typename T>
SteSurrogate<T>* SteSurrogate<T>::active() noexcept {
  return g_active_surrogate<T>;
}

template <typename T>
void SteSurrogate<T>::apply(std::span<const T> clipped, std::vector<T>& quantized) {
  if (mode_ == Mode::record) {
    std::vector<T> r(clipped.size());
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = quantized[i] - clipped[i];
    residuals_.push_back(std::move(r));
    return;
  }
  if (cursor_ >= residuals_.size() || residuals_[cursor_].size() != clipped.size()) {
    throw std::logic_error("STE surrogate replay does not match the recorded forward pass");
  }
  const auto& r = residuals_[cursor_++];
  for (std::size_t i = 0; i < r.size(); ++i) quantized[i] = clipped[i] + r[i];
}

template <typename T>
FakeQuantResult<T> fake_quantize_values(std::span<const T> x, const Shape& shape, const QuantScheme& scheme,
                                        QuantRole role) {
  check_scheme(scheme, role);
  if (shape_numel(shape) != x.size()) {
    throw DimensionError("fake_quantize: " + std::to_string(x.size()) + " values for shape " + shape_str(shape));
  }
  FakeQuantResult<T> out;
  out.pass.assign(x.size(), 1);
  if (scheme.passthrough()) {
    (void)group_layout(shape, scheme);
    out.values.assign(x.begin(), x.end());
    if (auto* s = SteSurrogate<T>::active()) s->apply(x, out.values);
    return out;
  }
  const auto layout = group_layout(shape, scheme);
  std::vector<T> clipped(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    clipped[i] = apply_clip(x[i], scheme.clip);
    out.pass[i] = clipped[i] == x[i] ? 1 : 0;
  }
  std::vector<std::int32_t> codes;
  std::vector<AffineParams<T>> params;
  quantize_slots<T>(clipped, layout, scheme, codes, params);
  out.values.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const auto& p = params[layout.slot(i)];
    out.values[i] = dequantize_one(codes[i], p.scale, p.zero);
  }
  if (auto* s = SteSurrogate<T>::active()) s->apply(clipped, out.values);
  return out;
}

template <typename T>
BasicTensor<T> fake_quantize_ste(const BasicTensor<T>& x, const QuantScheme& scheme, QuantRole role) {
  auto fq = fake_quantize_values<T>(x.data(), x.shape(), scheme, role);
  BasicTensor<T> y(x.shape(), std::move(fq.values));
  if (should_record<T>({&x})) {
    BasicTape<T>::active()->record({x}, y, [x, y, pass = std::move(fq.pass)]() mutable {
      auto g = x.grad_buffer();
      auto gy = y.grad();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (pass[i]) g[i] += gy[i];
    });
  }
  return y;
}

template AffineParams<float> compute_params_symmetric<float>(std::span<const float>, int);
template AffineParams<double> compute_params_symmetric<double>(std::span<const double>, int);
template AffineParams<float> compute_params_asymmetric<float>(std::span<const float>, int);
template AffineParams<double> compute_params_asymmetric<double>(std::span<const double>, int);
template FakeQuantResult<float> fake_quantize_values<float>(std::span<const float>, const Shape&,
                                                            const QuantScheme&, QuantRole);
template FakeQuantResult<double> fake_quantize_values<double>(std::span<const double>, const Shape&,
                                                              const QuantScheme&, QuantRole);
template BasicTensor<float> fake_quantize_ste<float>(const BasicTensor<float>&, const QuantScheme&, QuantRole);
template BasicTensor<double> fake_quantize_ste<double>(const BasicTensor<double>&, const QuantScheme&, QuantRole);
template class SteSurrogate<float>;
template class SteSurrogate<double>;

}  // namespace q4fg
