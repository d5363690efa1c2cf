#include "q4fg/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace q4fg {

namespace {

/// Mean and population std of samples[k][p] over k.
PositionalStats reduce_over_samples(const std::vector<std::vector<double>>& samples, std::size_t positions) {
  PositionalStats s;
  s.mean.assign(positions, 0.0);
  s.std.assign(positions, 0.0);
  if (samples.empty()) return s;
  const double n = static_cast<double>(samples.size());
  for (std::size_t p = 0; p < positions; ++p) {
    double sum = 0.0;
    for (const auto& row : samples) sum += row[p];
    const double mean = sum / n;
    double var = 0.0;
    for (const auto& row : samples) var += (row[p] - mean) * (row[p] - mean);
    s.mean[p] = mean;
    s.std[p] = std::sqrt(var / n);
  }
  return s;
}

}  // namespace

PositionalStats activation_range_stats(std::span<const Tensor> activations, std::size_t seq) {
  if (seq == 0) throw std::invalid_argument("sequence length must be positive");
  if (activations.empty()) throw std::invalid_argument("no activation batches");
  std::vector<std::vector<double>> samples;
  for (const auto& a : activations) {
    if (a.rank() != 2 || a.dim(0) % seq != 0) {
      throw DimensionError("activation " + shape_str(a.shape()) + " is not [batch * " + std::to_string(seq) +
                           ", features]");
    }
    const std::size_t rows = a.dim(0), f = a.dim(1), batch = rows / seq;
    auto d = a.data();
    std::vector<double> gap(seq, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      const auto row = d.subspan(r * f, f);
      const auto [lo, hi] = std::minmax_element(row.begin(), row.end());
      gap[r % seq] += static_cast<double>(*hi) - static_cast<double>(*lo);
    }
    for (auto& g : gap) g /= static_cast<double>(batch);
    samples.push_back(std::move(gap));
  }
  return reduce_over_samples(samples, seq);
}

PositionalStats positional_activation_range(const Transformer<float>& model, std::span<const ModelInput> batches,
                                            std::size_t layer, LinearPart module, const QuantStrategy& strategy) {
  const std::size_t layers = model.encoder.size() + model.decoder.size();
  if (layer >= layers) {
    throw std::out_of_range("layer index " + std::to_string(layer) + " outside a model with " +
                            std::to_string(layers) + " layers");
  }
  if (batches.empty()) throw std::invalid_argument("no input batches");
  std::vector<Tensor> captured;
  std::size_t seq = 0;
  for (const auto& in : batches) {
    ActivationProbe probe;
    probe.layer = layer;
    probe.part = module;
    ForwardOptions opt;
    opt.strategy = strategy;
    opt.mode = Mode::eval;
    opt.probe = &probe;
    (void)forward(model, in, opt);
    const bool decoder_layer = layer >= model.encoder.size();
    const std::size_t s = (model.config.arch == Arch::encoder_decoder && !decoder_layer) ? in.source_seq : in.seq;
    if (seq != 0 && s != seq) throw DimensionError("all batches must share one sequence length");
    seq = s;
    captured.push_back(std::move(probe.captured));
  }
  return activation_range_stats(captured, seq);
}

PositionalStats positional_perplexity(const WindowNll& nll) {
  if (nll.windows == 0 || nll.window == 0) throw std::invalid_argument("no perplexity windows");
  PositionalStats s;
  s.mean.assign(nll.window, 0.0);
  s.std.assign(nll.window, 0.0);
  for (std::size_t p = 0; p < nll.window; ++p) {
    double sum = 0.0;
    for (std::size_t w = 0; w < nll.windows; ++w) sum += nll.nll[w * nll.window + p];
    s.mean[p] = std::exp(sum / static_cast<double>(nll.windows));
    double m = 0.0;
    for (std::size_t w = 0; w < nll.windows; ++w) m += std::exp(nll.nll[w * nll.window + p]);
    m /= static_cast<double>(nll.windows);
    double var = 0.0;
    for (std::size_t w = 0; w < nll.windows; ++w) {
      const double d = std::exp(nll.nll[w * nll.window + p]) - m;
      var += d * d;
    }
    s.std[p] = std::sqrt(var / static_cast<double>(nll.windows));
  }
  return s;
}

PositionalStats positional_perplexity(const Transformer<float>& model, std::span<const std::int32_t> stream,
                                      const QuantStrategy& strategy, std::size_t window) {
  return positional_perplexity(window_nll(model, stream, strategy, window));
}

std::vector<QuantErrorRow> quant_error_report(const Tensor& x, std::span<const QuantScheme> schemes) {
  if (schemes.empty()) throw std::invalid_argument("quant_error_report needs at least one scheme");
  std::vector<QuantErrorRow> rows;
  for (const auto& scheme : schemes) {
    const auto role = scheme.granularity == Granularity::per_channel ? QuantRole::weight : QuantRole::activation;
    const auto q = quantize(x, scheme, role);
    const auto d = dequantize(q);
    QuantErrorRow row;
    row.scheme = scheme;
    auto xv = x.data();
    auto dv = d.data();
    double se = 0.0;
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const double e = std::fabs(static_cast<double>(xv[i]) - static_cast<double>(dv[i]));
      se += e * e;
      row.max_error = std::max(row.max_error, e);
    }
    row.rms_error = std::sqrt(se / static_cast<double>(xv.size()));
    if (scheme.passthrough()) {
      row.range_utilization = 1.0;
    } else {
      std::set<std::int32_t> used;
      for (std::size_t i = 0; i < q.numel(); ++i) used.insert(q.code(i));
      row.range_utilization = static_cast<double>(used.size()) / static_cast<double>(1 << scheme.bits);
      for (float s : q.params.scales) row.max_scale = std::max(row.max_scale, static_cast<double>(s));
    }
    rows.push_back(row);
  }
  return rows;
}

void write_positional_csv(std::ostream& os, const PositionalStats& stats) {
  if (stats.mean.size() != stats.std.size()) throw DimensionError("positional mean and std lengths differ");
  os << kPositionalCsvHeader << '\n' << std::setprecision(17);
  for (std::size_t p = 0; p < stats.mean.size(); ++p) os << p << ',' << stats.mean[p] << ',' << stats.std[p] << '\n';
}

PositionalStats read_positional_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != kPositionalCsvHeader) {
    throw std::runtime_error("positional CSV must start with '" + std::string(kPositionalCsvHeader) + "'");
  }
  PositionalStats s;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string pos, mean, sd;
    if (!std::getline(ls, pos, ',') || !std::getline(ls, mean, ',') || !std::getline(ls, sd)) {
      throw std::runtime_error("malformed positional CSV row '" + line + "'");
    }
    if (std::stoul(pos) != s.mean.size()) throw std::runtime_error("positional CSV rows out of order");
    s.mean.push_back(std::stod(mean));
    s.std.push_back(std::stod(sd));
  }
  return s;
}

void write_quant_error_csv(std::ostream& os, std::span<const QuantErrorRow> rows) {
  os << kQuantErrorCsvHeader << '\n' << std::setprecision(17);
  for (const auto& r : rows)
    os << r.scheme.describe() << ',' << r.rms_error << ',' << r.max_error << ',' << r.range_utilization << '\n';
}

namespace {

template <typename Writer>
void write_file(const std::string& path, Writer&& w) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
  w(f);
  f.flush();
  if (!f) throw std::runtime_error("failed writing '" + path + "'");
}

}  // namespace

void emit_report(const PositionalStats& stats, const std::string& path) {
  write_file(path, [&](std::ostream& os) { write_positional_csv(os, stats); });
}

void emit_report(std::span<const QuantErrorRow> rows, const std::string& path) {
  write_file(path, [&](std::ostream& os) { write_quant_error_csv(os, rows); });
}

}  // namespace q4fg
