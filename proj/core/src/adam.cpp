#include "q4fg/adam.hpp"

#include <cmath>

namespace q4fg {

template <typename T>
void adam_step(std::span<NamedParameter<T>> params, AdamState& state, const AdamConfig& cfg) {
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].tensor.numel(), 0.0);
      state.v[i].assign(params[i].tensor.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) {
    throw std::invalid_argument("adam_step: optimizer state tracks " + std::to_string(state.m.size()) +
                                " parameters, got " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != params[i].tensor.numel()) {
      throw DimensionError("adam_step: state for '" + params[i].name + "' does not match shape " +
                           shape_str(params[i].tensor.shape()));
    }
    if (!params[i].tensor.has_grad()) continue;
    for (auto g : params[i].tensor.grad()) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw TrainingError("non-finite gradient in parameter '" + params[i].name + "'");
      }
    }
  }

  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].tensor;
    auto data = p.mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const bool has_grad = p.has_grad();
    auto grad = has_grad ? p.grad() : std::span<const T>{};
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double g = has_grad ? static_cast<double>(grad[j]) : 0.0;
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      data[j] = static_cast<T>(static_cast<double>(data[j]) - cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps));
    }
  }
}

template void adam_step<float>(std::span<NamedParameter<float>>, AdamState&, const AdamConfig&);
template void adam_step<double>(std::span<NamedParameter<double>>, AdamState&, const AdamConfig&);

}  // namespace q4fg
