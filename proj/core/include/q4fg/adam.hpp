#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "q4fg/tensor.hpp"

namespace q4fg {

template <typename T>
struct NamedParameter {
  std::string name;
  BasicTensor<T> tensor;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First and second moment buffers, one pair per parameter, created zeroed on
/// the first step.
struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::int64_t step = 0;
};

/// Raised when a gradient is NaN or infinite; names the offending parameter.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One bias-corrected Adam update using each parameter's accumulated gradient
/// (a parameter without a gradient is treated as having a zero gradient).
template <typename T>
void adam_step(std::span<NamedParameter<T>> params, AdamState& state, const AdamConfig& cfg);

}  // namespace q4fg
