#pragma once

#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "q4fg/model.hpp"
#include "q4fg/quant.hpp"

namespace q4fg {

/// One value per sequence position, averaged over batches (or windows), with
/// the population standard deviation of that average's samples.
struct PositionalStats {
  std::vector<double> mean;
  std::vector<double> std;

  std::size_t positions() const noexcept { return mean.size(); }
  friend bool operator==(const PositionalStats&, const PositionalStats&) = default;
};

/// Per batch and position: the mean over the batch's sequences of
/// (max - min over features). Then mean and std of that value across batches.
/// Every tensor is a [batch * seq, features] activation.
PositionalStats activation_range_stats(std::span<const Tensor> activations, std::size_t seq);

/// Input-activation range of one linear part of layer `layer` (encoder layers
/// first, then decoder layers), over the given batches.
PositionalStats positional_activation_range(const Transformer<float>& model, std::span<const ModelInput> batches,
                                            std::size_t layer, LinearPart module,
                                            const QuantStrategy& strategy = QuantStrategy::none());

/// Per position p: exp(mean over windows of the NLL at p); std is taken over
/// the per-window values exp(NLL).
PositionalStats positional_perplexity(const Transformer<float>& model, std::span<const std::int32_t> stream,
                                      const QuantStrategy& strategy, std::size_t window = 0);
PositionalStats positional_perplexity(const WindowNll& nll);

struct QuantErrorRow {
  QuantScheme scheme;
  double rms_error = 0.0;
  double max_error = 0.0;
  double range_utilization = 0.0;  ///< distinct codes used / 2^bits; 1 for passthrough
  double max_scale = 0.0;          ///< largest group scale (0 for passthrough)
};

/// Roundtrip error of `x` under each scheme. Row-wise schemes treat x as a
/// weight, everything else as an activation.
std::vector<QuantErrorRow> quant_error_report(const Tensor& x, std::span<const QuantScheme> schemes);

inline constexpr const char* kPositionalCsvHeader = "position,mean,std";
inline constexpr const char* kQuantErrorCsvHeader = "scheme,rms_error,max_error,range_utilization";

/// CSV with LF line endings; values printed with 17 significant digits so
/// that parsing the file back reproduces them exactly.
void write_positional_csv(std::ostream& os, const PositionalStats& stats);
PositionalStats read_positional_csv(std::istream& is);
void write_quant_error_csv(std::ostream& os, std::span<const QuantErrorRow> rows);

/// Writes the CSV to `path`; throws std::runtime_error on I/O failure.
void emit_report(const PositionalStats& stats, const std::string& path);
void emit_report(std::span<const QuantErrorRow> rows, const std::string& path);

}  // namespace q4fg
