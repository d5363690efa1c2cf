#include "q4fg/pack_gemm.hpp"

#include <algorithm>
#include <chrono>
#include <ostream>
#include <random>

#include "q4fg/ops.hpp"
#include "q4fg/threading.hpp"

namespace q4fg {

namespace {

std::int32_t decode_nibble(std::uint8_t nibble, NibbleEncoding enc) {
  if (enc == NibbleEncoding::unsigned_int) return nibble;
  return nibble >= 8 ? static_cast<std::int32_t>(nibble) - 16 : static_cast<std::int32_t>(nibble);
}

}  // namespace

PackedInt4Matrix::PackedInt4Matrix(std::size_t rows, std::size_t cols, std::vector<std::uint8_t> bytes,
                                   NibbleEncoding encoding)
    : rows_(rows), cols_(cols), encoding_(encoding), bytes_(std::move(bytes)) {
  if (bytes_.size() != rows_ * row_bytes()) {
    throw DimensionError("packed payload of " + std::to_string(bytes_.size()) + " bytes does not hold a " +
                         std::to_string(rows_) + "x" + std::to_string(cols_) + " nibble matrix");
  }
}

std::int32_t PackedInt4Matrix::at(std::size_t r, std::size_t c) const {
  if (r >= rows_ || c >= cols_) throw std::out_of_range("packed matrix index out of range");
  const std::uint8_t byte = bytes_[r * row_bytes() + c / 2];
  return decode_nibble((c % 2 == 0) ? (byte & 0x0F) : (byte >> 4), encoding_);
}

void PackedInt4Matrix::unpack_row(std::size_t r, std::span<std::int16_t> out) const {
  const std::uint8_t* row = bytes_.data() + r * row_bytes();
  for (std::size_t c = 0; c < cols_; ++c) {
    const std::uint8_t byte = row[c / 2];
    out[c] = static_cast<std::int16_t>(decode_nibble((c % 2 == 0) ? (byte & 0x0F) : (byte >> 4), encoding_));
  }
}

PackedInt4Matrix pack_int4(std::size_t rows, std::size_t cols, std::span<const std::int8_t> values,
                           NibbleEncoding encoding) {
  if (values.size() != rows * cols) {
    throw DimensionError("pack_int4: " + std::to_string(values.size()) + " values for a " + std::to_string(rows) +
                         "x" + std::to_string(cols) + " matrix");
  }
  const int lo = encoding == NibbleEncoding::twos_complement ? -8 : 0;
  const int hi = encoding == NibbleEncoding::twos_complement ? 7 : 15;
  const std::size_t row_bytes = (cols + 1) / 2;
  std::vector<std::uint8_t> bytes(rows * row_bytes, 0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const int v = values[r * cols + c];
      if (v < lo || v > hi) {
        throw RangeError("pack_int4: value " + std::to_string(v) + " at (" + std::to_string(r) + ", " +
                         std::to_string(c) + ") outside [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
      }
      const auto nibble = static_cast<std::uint8_t>(v & 0x0F);
      bytes[r * row_bytes + c / 2] |= (c % 2 == 0) ? nibble : static_cast<std::uint8_t>(nibble << 4);
    }
  }
  return PackedInt4Matrix(rows, cols, std::move(bytes), encoding);
}

std::vector<std::int8_t> unpack_int4(const PackedInt4Matrix& m) {
  std::vector<std::int8_t> out(m.rows() * m.cols());
  std::vector<std::int16_t> row(m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    m.unpack_row(r, row);
    for (std::size_t c = 0; c < m.cols(); ++c) out[r * m.cols() + c] = static_cast<std::int8_t>(row[c]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// IntMatrix

IntMatrix IntMatrix::from_int8(std::size_t rows, std::size_t cols, std::vector<std::int8_t> values) {
  if (values.size() != rows * cols) throw DimensionError("int8 operand size does not match its shape");
  IntMatrix m;
  m.rows_ = rows;
  m.cols_ = cols;
  m.storage_ = OperandStorage::int8;
  m.bytes_.resize(values.size());
  std::transform(values.begin(), values.end(), m.bytes_.begin(),
                 [](std::int8_t v) { return static_cast<std::uint8_t>(v); });
  return m;
}

IntMatrix IntMatrix::from_uint8(std::size_t rows, std::size_t cols, std::vector<std::uint8_t> values) {
  if (values.size() != rows * cols) throw DimensionError("uint8 operand size does not match its shape");
  IntMatrix m;
  m.rows_ = rows;
  m.cols_ = cols;
  m.storage_ = OperandStorage::uint8;
  m.bytes_ = std::move(values);
  return m;
}

IntMatrix IntMatrix::from_packed(PackedInt4Matrix packed) {
  IntMatrix m;
  m.rows_ = packed.rows();
  m.cols_ = packed.cols();
  m.storage_ = OperandStorage::packed4;
  m.packed_ = std::move(packed);
  return m;
}

IntMatrix IntMatrix::from_codes(const QTensor& q, bool pack) {
  if (q.scheme.passthrough()) throw SchemeError("passthrough tensors have no integer codes");
  if (q.shape.empty()) throw DimensionError("integer operand needs at least one dimension");
  const std::size_t cols = q.shape.back();
  const std::size_t rows = q.numel() / cols;
  const bool sym = q.scheme.mapping == Mapping::symmetric;
  if (pack && q.scheme.bits == 4) {
    std::vector<std::int8_t> codes(q.numel());
    for (std::size_t i = 0; i < codes.size(); ++i) codes[i] = static_cast<std::int8_t>(q.code(i));
    return from_packed(
        pack_int4(rows, cols, codes, sym ? NibbleEncoding::twos_complement : NibbleEncoding::unsigned_int));
  }
  if (sym) {
    std::vector<std::int8_t> codes(q.lanes.size());
    std::transform(q.lanes.begin(), q.lanes.end(), codes.begin(),
                   [](std::uint8_t b) { return static_cast<std::int8_t>(b); });
    return from_int8(rows, cols, std::move(codes));
  }
  return from_uint8(rows, cols, q.lanes);
}

std::size_t IntMatrix::payload_bytes() const noexcept {
  return storage_ == OperandStorage::packed4 ? packed_.bytes().size() : bytes_.size();
}

std::int32_t IntMatrix::at(std::size_t r, std::size_t c) const {
  if (storage_ == OperandStorage::packed4) return packed_.at(r, c);
  if (r >= rows_ || c >= cols_) throw std::out_of_range("operand index out of range");
  const std::uint8_t b = bytes_[r * cols_ + c];
  return storage_ == OperandStorage::int8 ? static_cast<std::int32_t>(static_cast<std::int8_t>(b))
                                          : static_cast<std::int32_t>(b);
}

void IntMatrix::unpack_row(std::size_t r, std::span<std::int16_t> out) const {
  if (storage_ == OperandStorage::packed4) {
    packed_.unpack_row(r, out);
    return;
  }
  const std::uint8_t* row = bytes_.data() + r * cols_;
  if (storage_ == OperandStorage::int8) {
    for (std::size_t c = 0; c < cols_; ++c) out[c] = static_cast<std::int8_t>(row[c]);
  } else {
    for (std::size_t c = 0; c < cols_; ++c) out[c] = row[c];
  }
}

// ---------------------------------------------------------------------------
// Kernels

namespace {

std::vector<std::int16_t> unpack_all(const IntMatrix& m) {
  std::vector<std::int16_t> out(m.rows() * m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r)
    m.unpack_row(r, std::span<std::int16_t>(out).subspan(r * m.cols(), m.cols()));
  return out;
}

inline std::int32_t dot_i16(const std::int16_t* a, const std::int16_t* b, std::size_t n) {
  std::int32_t acc = 0;
  for (std::size_t k = 0; k < n; ++k) acc += static_cast<std::int32_t>(a[k]) * static_cast<std::int32_t>(b[k]);
  return acc;
}

/// a (unpacked, M x K) times w^T where w rows are fetched through `fetch_row`.
template <typename FetchRow>
std::vector<std::int32_t> gemm_rows(const std::vector<std::int16_t>& a, std::size_t m, std::size_t n,
                                    std::size_t k, FetchRow fetch_row, int workers) {
  std::vector<std::int32_t> out(m * n);
  parallel_for(m, workers, [&](std::size_t i0, std::size_t i1) {
    std::vector<std::int16_t> wrow(k);
    for (std::size_t j = 0; j < n; ++j) {
      fetch_row(j, std::span<std::int16_t>(wrow));
      for (std::size_t i = i0; i < i1; ++i) out[i * n + j] = dot_i16(a.data() + i * k, wrow.data(), k);
    }
  });
  return out;
}

}  // namespace

std::vector<std::int32_t> gemm_int(const IntMatrix& a, const IntMatrix& b, int workers) {
  if (a.cols() != b.rows()) {
    throw DimensionError("gemm_int: [" + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) + "] * [" +
                         std::to_string(b.rows()) + "x" + std::to_string(b.cols()) + "] inner dimensions disagree");
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  const auto au = unpack_all(a);
  const auto bu = unpack_all(b);
  std::vector<std::int16_t> bt(n * k);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = bu[p * n + j];
  return gemm_rows(
      au, m, n, k, [&](std::size_t j, std::span<std::int16_t> row) { std::copy_n(bt.data() + j * k, k, row.data()); },
      workers);
}

std::vector<std::int32_t> gemm_int_nt(const IntMatrix& a, const IntMatrix& w, int workers) {
  if (a.cols() != w.cols()) {
    throw DimensionError("gemm_int_nt: [" + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) + "] * [" +
                         std::to_string(w.rows()) + "x" + std::to_string(w.cols()) + "]^T inner dimensions disagree");
  }
  const auto au = unpack_all(a);
  return gemm_rows(
      au, a.rows(), w.rows(), a.cols(), [&](std::size_t j, std::span<std::int16_t> row) { w.unpack_row(j, row); },
      workers);
}

Tensor gemm_fused(const IntMatrix& x, const IntMatrix& w, const GemmEpilogue& ep,
                  std::span<const std::uint8_t> weight_keep, int workers) {
  if (x.cols() != w.cols()) {
    throw DimensionError("gemm_fused: activation width " + std::to_string(x.cols()) + " does not match weight width " +
                         std::to_string(w.cols()));
  }
  const std::size_t m = x.rows(), n = w.rows(), k = x.cols();
  const std::size_t gs = ep.weight_group_size;
  if (ep.token_scales.size() != m) {
    throw SchemeError("gemm_fused: missing per-token scales (" + std::to_string(ep.token_scales.size()) + " for " +
                      std::to_string(m) + " tokens)");
  }
  if (!ep.token_zeros.empty() && ep.token_zeros.size() != m) throw SchemeError("gemm_fused: token zero points do not match M");
  if (gs == 0) throw SchemeError("gemm_fused: missing weight group size");
  const std::size_t n_groups = (n * k + gs - 1) / gs;
  if (ep.weight_scales.size() != n_groups) {
    throw SchemeError("gemm_fused: missing weight group scales (" + std::to_string(ep.weight_scales.size()) + " for " +
                      std::to_string(n_groups) + " groups)");
  }
  if (!ep.weight_zeros.empty() && ep.weight_zeros.size() != n_groups) {
    throw SchemeError("gemm_fused: weight zero points do not match the group count");
  }
  if (!ep.bias.empty() && ep.bias.size() != n) throw SchemeError("gemm_fused: bias length does not match N");
  if (!weight_keep.empty() && weight_keep.size() != n * k) throw DimensionError("gemm_fused: keep mask does not match weight");

  const bool act_zero = !ep.token_zeros.empty();
  const bool w_zero = !ep.weight_zeros.empty();
  const auto xu = unpack_all(x);

  struct Segment {
    std::size_t begin, end, group;
  };

  std::vector<float> out(m * n);
  parallel_for(m, workers, [&](std::size_t i0, std::size_t i1) {
    std::vector<std::int16_t> wrow(k), keep(k, 1);
    std::vector<Segment> segs;
    std::vector<std::int32_t> wsum, kept;
    for (std::size_t j = 0; j < n; ++j) {
      w.unpack_row(j, wrow);
      if (!weight_keep.empty())
        for (std::size_t p = 0; p < k; ++p) {
          keep[p] = weight_keep[j * k + p] ? 1 : 0;
          wrow[p] = static_cast<std::int16_t>(wrow[p] * keep[p]);
        }
      segs.clear();
      for (std::size_t flat = j * k; flat < (j + 1) * k;) {
        const std::size_t g = flat / gs;
        const std::size_t stop = std::min((j + 1) * k, (g + 1) * gs);
        segs.push_back({flat - j * k, stop - j * k, g});
        flat = stop;
      }
      wsum.assign(segs.size(), 0);
      kept.assign(segs.size(), 0);
      for (std::size_t s = 0; s < segs.size(); ++s)
        for (std::size_t p = segs[s].begin; p < segs[s].end; ++p) {
          wsum[s] += wrow[p];
          kept[s] += keep[p];
        }
      for (std::size_t i = i0; i < i1; ++i) {
        const std::int16_t* arow = xu.data() + i * k;
        const float sa = ep.token_scales[i];
        const float za = act_zero ? ep.token_zeros[i] : 0.0f;
        float v = 0.0f;
        for (std::size_t s = 0; s < segs.size(); ++s) {
          const auto& sg = segs[s];
          const float sw = ep.weight_scales[sg.group];
          const std::int32_t acc = dot_i16(arow + sg.begin, wrow.data() + sg.begin, sg.end - sg.begin);
          float term = sa * sw * static_cast<float>(acc);
          if (w_zero) {
            const float zw = ep.weight_zeros[sg.group];
            const std::int32_t asum = dot_i16(arow + sg.begin, keep.data() + sg.begin, sg.end - sg.begin);
            term += sa * zw * static_cast<float>(asum);
            if (act_zero) term += za * zw * static_cast<float>(kept[s]);
          }
          if (act_zero) term += za * sw * static_cast<float>(wsum[s]);
          v = (s == 0) ? term : v + term;
        }
        if (!ep.bias.empty()) v += ep.bias[j];
        if (ep.activation == Activation::gelu) v = gelu_scalar(v);
        out[i * n + j] = v;
      }
    }
  });
  return Tensor(Shape{m, n}, std::move(out));
}

QuantizedWeight prepare_weight(const QTensor& w, bool pack, std::vector<std::uint8_t> keep) {
  if (w.shape.size() != 2) throw DimensionError("weight operand must be 2-D, got " + shape_str(w.shape));
  QuantizedWeight out;
  out.rows = w.shape[0];
  out.cols = w.shape[1];
  out.scheme = w.scheme;
  out.params = w.params;
  if (!keep.empty() && keep.size() != w.numel()) throw DimensionError("keep mask does not match weight shape");
  out.keep = std::move(keep);
  if (!w.scheme.passthrough()) out.codes = IntMatrix::from_codes(w, pack);
  return out;
}

Tensor gemm_fused(const QTensor& x, const QuantizedWeight& w, std::span<const float> bias, Activation activation,
                  int workers) {
  if (x.scheme.passthrough() || w.scheme.passthrough()) {
    throw SchemeError("gemm_fused needs integer operands on both sides");
  }
  if (x.shape.empty()) throw DimensionError("activation operand needs at least one dimension");
  const std::size_t k = x.shape.back();
  const std::size_t m = x.numel() / k;
  GemmEpilogue ep;
  switch (x.scheme.granularity) {
    case Granularity::per_token:
      ep.token_scales = x.params.scales;
      if (x.scheme.mapping == Mapping::asymmetric) ep.token_zeros = x.params.zero_points;
      break;
    case Granularity::per_tensor:
      if (x.params.scales.size() != 1) throw SchemeError("gemm_fused: missing per-tensor activation scale");
      ep.token_scales.assign(m, x.params.scales[0]);
      if (x.scheme.mapping == Mapping::asymmetric) ep.token_zeros.assign(m, x.params.zero_points[0]);
      break;
    case Granularity::per_group:
    case Granularity::per_channel:
      throw SchemeError("gemm_fused: activations must be quantized per token or per tensor");
  }
  ep.weight_scales = w.params.scales;
  if (w.scheme.mapping == Mapping::asymmetric) ep.weight_zeros = w.params.zero_points;
  ep.weight_group_size = group_layout(Shape{w.rows, w.cols}, w.scheme).size;
  ep.bias.assign(bias.begin(), bias.end());
  ep.activation = activation;
  (void)m;
  const auto xm = IntMatrix::from_codes(x, false);
  return gemm_fused(xm, w.codes, ep, w.keep, workers);
}

// ---------------------------------------------------------------------------
// Shape study

std::string to_string(GemmCase c) {
  switch (c) {
    case GemmCase::qkv_proj: return "qkv_proj";
    case GemmCase::attn_out: return "attn_out";
    case GemmCase::mlp_intermediate: return "mlp_intermediate";
    case GemmCase::mlp_out: return "mlp_out";
  }
  return "unknown";
}

GemmCase gemm_case_from_string(const std::string& s) {
  for (auto c : {GemmCase::qkv_proj, GemmCase::attn_out, GemmCase::mlp_intermediate, GemmCase::mlp_out})
    if (to_string(c) == s) return c;
  throw std::invalid_argument("unknown GEMM case '" + s + "'");
}

GemmShapeCase GemmShapeCase::make(GemmCase name, std::size_t tokens, std::size_t hidden) {
  switch (name) {
    case GemmCase::qkv_proj: return {name, tokens, 3 * hidden, hidden};
    case GemmCase::attn_out: return {name, tokens, hidden, hidden};
    case GemmCase::mlp_intermediate: return {name, tokens, 4 * hidden, hidden};
    case GemmCase::mlp_out: return {name, tokens, hidden, 4 * hidden};
  }
  return {name, tokens, hidden, hidden};
}

std::size_t weight_bytes_moved(std::size_t n, std::size_t k, int bits) {
  switch (bits) {
    case 4: return (n * k + 1) / 2;
    case 8: return n * k;
    case 32: return 4 * n * k;
    default: throw std::invalid_argument("benchmark bits must be 4, 8 or 32");
  }
}

BenchRecord bench_gemm(const GemmShapeCase& shape, int bits, std::size_t repeats, int workers, std::uint64_t seed) {
  if (repeats < 3) throw std::invalid_argument("bench_gemm needs at least 3 repeats");
  BenchRecord rec;
  rec.shape = shape;
  rec.bits = bits;
  rec.bytes_moved = weight_bytes_moved(shape.n, shape.k, bits);

  std::mt19937_64 rng(seed);
  std::normal_distribution<float> dist(0.0f, 1.0f);
  std::vector<float> xv(shape.m * shape.k), wv(shape.n * shape.k);
  for (auto& v : xv) v = dist(rng);
  for (auto& v : wv) v = dist(rng);
  const Tensor x(Shape{shape.m, shape.k}, xv);
  const Tensor w(Shape{shape.n, shape.k}, wv);

  std::vector<double> times;
  times.reserve(repeats);
  if (bits == 32) {
    for (std::size_t r = 0; r < repeats; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      auto y = matmul_nt(x, w);
      const auto t1 = std::chrono::steady_clock::now();
      times.push_back(std::chrono::duration<double, std::nano>(t1 - t0).count());
      (void)y;
    }
  } else {
    const auto wq = prepare_weight(quantize(w, QuantScheme::symmetric(bits, Granularity::per_channel),
                                            QuantRole::weight),
                                   bits == 4);
    const auto xs = QuantScheme::symmetric(bits, Granularity::per_token);
    for (std::size_t r = 0; r < repeats; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      auto y = gemm_fused(quantize(x, xs), wq, {}, Activation::none, workers);
      const auto t1 = std::chrono::steady_clock::now();
      times.push_back(std::chrono::duration<double, std::nano>(t1 - t0).count());
      (void)y;
    }
  }
  std::sort(times.begin(), times.end());
  const std::size_t mid = times.size() / 2;
  rec.median_ns = times.size() % 2 ? times[mid] : 0.5 * (times[mid - 1] + times[mid]);
  rec.gops = 2.0 * static_cast<double>(shape.m) * static_cast<double>(shape.n) * static_cast<double>(shape.k) /
             rec.median_ns;
  return rec;
}

void write_bench_csv(std::ostream& os, std::span<const BenchRecord> records) {
  os << kBenchCsvHeader << '\n';
  for (const auto& r : records) {
    os << to_string(r.shape.name) << ',' << r.bits << ',' << r.shape.m << ',' << r.shape.n << ',' << r.shape.k << ','
       << static_cast<std::uint64_t>(r.median_ns) << ',' << r.bytes_moved << ',' << r.gops << '\n';
  }
}

}  // namespace q4fg
