#include "q4fg/ops.hpp"

#include <algorithm>
#include <limits>

namespace q4fg {

namespace {

template <typename T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ");
  }
}

template <typename T>
void require_rank(const BasicTensor<T>& x, std::size_t rank, const char* op) {
  if (x.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + shape_str(x.shape()));
  }
}

template <typename T>
void accumulate(BasicTensor<T> target, std::span<const T> delta) {
  if (!target.requires_grad()) return;
  auto g = target.grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

template <typename T>
void record(std::vector<BasicTensor<T>> inputs, BasicTensor<T> out,
            typename BasicTape<T>::BackwardFn fn) {
  BasicTape<T>::active()->record(std::move(inputs), std::move(out), std::move(fn));
}

std::size_t last_dim(const Shape& s) { return s.empty() ? 0 : s.back(); }

}  // namespace

template <typename T>
void gemm_nn(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m,
             std::size_t n, std::size_t k) {
  std::vector<double> acc(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const T* arow = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = static_cast<double>(arow[p]);
      const T* brow = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) acc[j] += av * static_cast<double>(brow[j]);
    }
    T* crow = c.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) crow[j] = static_cast<T>(acc[j]);
  }
}

template <typename T>
std::vector<T> transpose(std::span<const T> src, std::size_t rows, std::size_t cols) {
  std::vector<T> out(src.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = src[r * cols + c];
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
  BasicTensor<T> y(a.shape(), std::move(out));
  if (should_record<T>({&a, &b})) {
    record<T>({a, b}, y, [a, b, y]() {
      accumulate(a, y.grad());
      accumulate(b, y.grad());
    });
  }
  return y;
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] - bd[i];
  BasicTensor<T> y(a.shape(), std::move(out));
  if (should_record<T>({&a, &b})) {
    record<T>({a, b}, y, [a, b, y]() mutable {
      accumulate(a, y.grad());
      if (b.requires_grad()) {
        auto g = b.grad_buffer();
        auto gy = y.grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= gy[i];
      }
    });
  }
  return y;
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  BasicTensor<T> y(a.shape(), std::move(out));
  if (should_record<T>({&a, &b})) {
    record<T>({a, b}, y, [a, b, y]() mutable {
      auto gy = y.grad();
      if (a.requires_grad()) {
        auto g = a.grad_buffer();
        auto bd = b.data();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * bd[i];
      }
      if (b.requires_grad()) {
        auto g = b.grad_buffer();
        auto ad = a.data();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * ad[i];
      }
    });
  }
  return y;
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor) {
  std::vector<T> out(a.numel());
  auto ad = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * factor;
  BasicTensor<T> y(a.shape(), std::move(out));
  if (should_record<T>({&a})) {
    record<T>({a}, y, [a, y, factor]() mutable {
      auto g = a.grad_buffer();
      auto gy = y.grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * factor;
    });
  }
  return y;
}

template <typename T>
BasicTensor<T> add_bias(const BasicTensor<T>& x, const BasicTensor<T>& bias) {
  const std::size_t n = last_dim(x.shape());
  if (bias.numel() != n) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match input " +
                         shape_str(x.shape()));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  auto bd = bias.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i % n];
  BasicTensor<T> y(x.shape(), std::move(out));
  if (should_record<T>({&x, &bias})) {
    record<T>({x, bias}, y, [x, bias, y, n]() mutable {
      accumulate(x, y.grad());
      if (bias.requires_grad()) {
        auto g = bias.grad_buffer();
        auto gy = y.grad();
        for (std::size_t i = 0; i < gy.size(); ++i) g[i % n] += gy[i];
      }
    });
  }
  return y;
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  BasicTensor<T> y(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  if (should_record<T>({&x})) {
    record<T>({x}, y, [x, y]() { accumulate(x, y.grad()); });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: inner dimensions of " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " disagree");
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n);
  gemm_nn<T>(a.data(), b.data(), out, m, n, k);
  BasicTensor<T> y(Shape{m, n}, std::move(out));
  if (should_record<T>({&a, &b})) {
    record<T>({a, b}, y, [a, b, y, m, n, k]() mutable {
      auto gy = y.grad();
      if (a.requires_grad()) {
        // dA = dC * B^T
        auto bt = transpose<T>(b.data(), k, n);
        std::vector<T> da(m * k);
        gemm_nn<T>(gy, bt, da, m, k, n);
        accumulate<T>(a, da);
      }
      if (b.requires_grad()) {
        // dB = A^T * dC
        auto at = transpose<T>(a.data(), m, k);
        std::vector<T> db(k * n);
        gemm_nn<T>(at, gy, db, k, n, m);
        accumulate<T>(b, db);
      }
    });
  }
  return y;
}

template <typename T>
BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& w) {
  require_rank(a, 2, "matmul_nt");
  require_rank(w, 2, "matmul_nt");
  if (a.dim(1) != w.dim(1)) {
    throw DimensionError("matmul_nt: inner dimensions of " + shape_str(a.shape()) + " and " +
                         shape_str(w.shape()) + "^T disagree");
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = w.dim(0);
  auto wt = transpose<T>(w.data(), n, k);
  std::vector<T> out(m * n);
  gemm_nn<T>(a.data(), wt, out, m, n, k);
  BasicTensor<T> y(Shape{m, n}, std::move(out));
  if (should_record<T>({&a, &w})) {
    record<T>({a, w}, y, [a, w, y, m, n, k]() mutable {
      auto gy = y.grad();
      if (a.requires_grad()) {
        std::vector<T> da(m * k);
        gemm_nn<T>(gy, w.data(), da, m, k, n);
        accumulate<T>(a, da);
      }
      if (w.requires_grad()) {
        auto gyt = transpose<T>(gy, m, n);
        std::vector<T> dw(n * k);
        gemm_nn<T>(gyt, a.data(), dw, n, k, m);
        accumulate<T>(w, dw);
      }
    });
  }
  return y;
}

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& bias) {
  auto y = matmul_nt(x, w);
  return bias.defined() ? add_bias(y, bias) : y;
}

// ---------------------------------------------------------------------------
// Normalization and activations

template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, double eps) {
  const std::size_t h = last_dim(x.shape());
  if (h == 0) throw DimensionError("layer_norm: empty normalized dimension in " + shape_str(x.shape()));
  if (gamma.numel() != h || beta.numel() != h) {
    throw DimensionError("layer_norm: affine parameters " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " do not match input " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / h;
  auto xd = x.data();
  auto gd = gamma.data();
  auto bd = beta.data();
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xd.data() + r * h;
    double mu = 0.0;
    for (std::size_t i = 0; i < h; ++i) mu += row[i];
    mu /= static_cast<double>(h);
    double var = 0.0;
    for (std::size_t i = 0; i < h; ++i) {
      const double d = row[i] - mu;
      var += d * d;
    }
    var /= static_cast<double>(h);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (std::size_t i = 0; i < h; ++i) {
      const double n = (row[i] - mu) * inv;
      xhat[r * h + i] = n;
      out[r * h + i] = static_cast<T>(static_cast<double>(gd[i]) * n + static_cast<double>(bd[i]));
    }
  }
  BasicTensor<T> y(x.shape(), std::move(out));
  if (should_record<T>({&x, &gamma, &beta})) {
    record<T>({x, gamma, beta}, y,
              [x, gamma, beta, y, h, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)]() mutable {
                auto gy = y.grad();
                auto gd = gamma.data();
                if (gamma.requires_grad()) {
                  auto g = gamma.grad_buffer();
                  for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t i = 0; i < h; ++i)
                      g[i] += static_cast<T>(gy[r * h + i] * xhat[r * h + i]);
                }
                if (beta.requires_grad()) {
                  auto g = beta.grad_buffer();
                  for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t i = 0; i < h; ++i) g[i] += gy[r * h + i];
                }
                if (x.requires_grad()) {
                  auto g = x.grad_buffer();
                  std::vector<double> dxhat(h);
                  for (std::size_t r = 0; r < rows; ++r) {
                    double mean_d = 0.0, mean_dx = 0.0;
                    for (std::size_t i = 0; i < h; ++i) {
                      dxhat[i] = static_cast<double>(gy[r * h + i]) * gd[i];
                      mean_d += dxhat[i];
                      mean_dx += dxhat[i] * xhat[r * h + i];
                    }
                    mean_d /= static_cast<double>(h);
                    mean_dx /= static_cast<double>(h);
                    for (std::size_t i = 0; i < h; ++i) {
                      g[r * h + i] += static_cast<T>(
                          inv_std[r] * (dxhat[i] - mean_d - xhat[r * h + i] * mean_dx));
                    }
                  }
                }
              });
  }
  return y;
}

template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
  std::vector<T> out(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = gelu_scalar(xd[i]);
  BasicTensor<T> y(x.shape(), std::move(out));
  if (should_record<T>({&x})) {
    record<T>({x}, y, [x, y]() mutable {
      auto g = x.grad_buffer();
      auto gy = y.grad();
      auto xd = x.data();
      for (std::size_t i = 0; i < g.size(); ++i)
        g[i] += static_cast<T>(gy[i] * gelu_derivative(xd[i]));
    });
  }
  return y;
}

template <typename T>
BasicTensor<T> dropout(const BasicTensor<T>& x, double rate, std::mt19937_64& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw std::invalid_argument("dropout rate must be below 1");
  std::bernoulli_distribution keep(1.0 - rate);
  const T factor = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> m(x.numel());
  for (auto& v : m) v = keep(rng) ? factor : T{0};
  return mul(x, BasicTensor<T>(x.shape(), std::move(m)));
}

// ---------------------------------------------------------------------------
// Indexing

template <typename T>
BasicTensor<T> gather_rows(const BasicTensor<T>& table, std::span<const std::int32_t> rows) {
  require_rank(table, 2, "gather_rows");
  const std::size_t n_rows = table.dim(0), cols = table.dim(1);
  std::vector<T> out(rows.size() * cols);
  auto td = table.data();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] < 0 || static_cast<std::size_t>(rows[r]) >= n_rows) {
      throw std::out_of_range("gather_rows: index " + std::to_string(rows[r]) + " outside [0, " +
                              std::to_string(n_rows) + ")");
    }
    std::copy_n(td.data() + static_cast<std::size_t>(rows[r]) * cols, cols, out.data() + r * cols);
  }
  BasicTensor<T> y(Shape{rows.size(), cols}, std::move(out));
  if (should_record<T>({&table})) {
    std::vector<std::int32_t> idx(rows.begin(), rows.end());
    record<T>({table}, y, [table, y, cols, idx = std::move(idx)]() mutable {
      auto g = table.grad_buffer();
      auto gy = y.grad();
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t c = 0; c < cols; ++c)
          g[static_cast<std::size_t>(idx[r]) * cols + c] += gy[r * cols + c];
    });
  }
  return y;
}

template <typename T>
BasicTensor<T> slice_cols(const BasicTensor<T>& x, std::size_t begin, std::size_t end) {
  require_rank(x, 2, "slice_cols");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (begin > end || end > cols) {
    throw DimensionError("slice_cols: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") outside " + shape_str(x.shape()));
  }
  const std::size_t w = end - begin;
  std::vector<T> out(rows * w);
  auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(xd.data() + r * cols + begin, w, out.data() + r * w);
  BasicTensor<T> y(Shape{rows, w}, std::move(out));
  if (should_record<T>({&x})) {
    record<T>({x}, y, [x, y, rows, cols, begin, w]() mutable {
      auto g = x.grad_buffer();
      auto gy = y.grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < w; ++c) g[r * cols + begin + c] += gy[r * w + c];
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Attention

template <typename T>
BasicTensor<T> split_heads(const BasicTensor<T>& x, std::size_t batch, std::size_t heads) {
  require_rank(x, 2, "split_heads");
  const std::size_t rows = x.dim(0), width = x.dim(1);
  if (batch == 0 || rows % batch != 0 || heads == 0 || width % heads != 0) {
    throw DimensionError("split_heads: cannot split " + shape_str(x.shape()) + " into batch " +
                         std::to_string(batch) + " x heads " + std::to_string(heads));
  }
  const std::size_t t = rows / batch, dh = width / heads;
  std::vector<T> out(x.numel());
  auto xd = x.data();
  // out[b,h,s,d] = x[b*t + s, h*dh + d]
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t s = 0; s < t; ++s)
        std::copy_n(xd.data() + (b * t + s) * width + h * dh, dh,
                    out.data() + ((b * heads + h) * t + s) * dh);
  BasicTensor<T> y(Shape{batch, heads, t, dh}, std::move(out));
  if (should_record<T>({&x})) {
    record<T>({x}, y, [x, y, batch, heads, t, dh, width]() mutable {
      auto g = x.grad_buffer();
      auto gy = y.grad();
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < heads; ++h)
          for (std::size_t s = 0; s < t; ++s)
            for (std::size_t d = 0; d < dh; ++d)
              g[(b * t + s) * width + h * dh + d] += gy[((b * heads + h) * t + s) * dh + d];
    });
  }
  return y;
}

template <typename T>
BasicTensor<T> merge_heads(const BasicTensor<T>& x) {
  require_rank(x, 4, "merge_heads");
  const std::size_t batch = x.dim(0), heads = x.dim(1), t = x.dim(2), dh = x.dim(3);
  const std::size_t width = heads * dh;
  std::vector<T> out(x.numel());
  auto xd = x.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t s = 0; s < t; ++s)
        std::copy_n(xd.data() + ((b * heads + h) * t + s) * dh, dh,
                    out.data() + (b * t + s) * width + h * dh);
  BasicTensor<T> y(Shape{batch * t, width}, std::move(out));
  if (should_record<T>({&x})) {
    record<T>({x}, y, [x, y, batch, heads, t, dh, width]() mutable {
      auto g = x.grad_buffer();
      auto gy = y.grad();
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < heads; ++h)
          for (std::size_t s = 0; s < t; ++s)
            for (std::size_t d = 0; d < dh; ++d)
              g[((b * heads + h) * t + s) * dh + d] += gy[(b * t + s) * width + h * dh + d];
    });
  }
  return y;
}

template <typename T>
BasicTensor<T> attention_scores(const BasicTensor<T>& q, const BasicTensor<T>& k, MaskMode mode) {
  require_rank(q, 4, "attention_scores");
  require_rank(k, 4, "attention_scores");
  const std::size_t batch = q.dim(0), heads = q.dim(1), tq = q.dim(2), dh = q.dim(3);
  const std::size_t tk = k.dim(2);
  if (k.dim(0) != batch || k.dim(1) != heads || k.dim(3) != dh) {
    throw DimensionError("attention_scores: query " + shape_str(q.shape()) + " and key " +
                         shape_str(k.shape()) + " disagree");
  }
  if (mode == MaskMode::causal && tq != tk) {
    throw DimensionError("attention_scores: causal mode needs equal query/key lengths, got " +
                         shape_str(q.shape()) + " and " + shape_str(k.shape()));
  }
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t slabs = batch * heads;
  std::vector<T> out(slabs * tq * tk, T{0});
  auto qd = q.data();
  auto kd = k.data();
  for (std::size_t s = 0; s < slabs; ++s) {
    const T* qs = qd.data() + s * tq * dh;
    const T* ks = kd.data() + s * tk * dh;
    T* os = out.data() + s * tq * tk;
    for (std::size_t i = 0; i < tq; ++i)
      for (std::size_t j = 0; j < tk; ++j) {
        if (!attention_allowed(mode, i, j)) continue;
        double acc = 0.0;
        for (std::size_t d = 0; d < dh; ++d)
          acc += static_cast<double>(qs[i * dh + d]) * static_cast<double>(ks[j * dh + d]);
        os[i * tk + j] = static_cast<T>(acc * inv_sqrt);
      }
  }
  BasicTensor<T> y(Shape{batch, heads, tq, tk}, std::move(out));
  if (should_record<T>({&q, &k})) {
    record<T>({q, k}, y, [q, k, y, slabs, tq, tk, dh, inv_sqrt, mode]() mutable {
      auto gy = y.grad();
      auto qd = q.data();
      auto kd = k.data();
      std::span<T> gq, gk;
      if (q.requires_grad()) gq = q.grad_buffer();
      if (k.requires_grad()) gk = k.grad_buffer();
      for (std::size_t s = 0; s < slabs; ++s) {
        for (std::size_t i = 0; i < tq; ++i)
          for (std::size_t j = 0; j < tk; ++j) {
            if (!attention_allowed(mode, i, j)) continue;
            const double gs = static_cast<double>(gy[(s * tq + i) * tk + j]) * inv_sqrt;
            if (gs == 0.0) continue;
            for (std::size_t d = 0; d < dh; ++d) {
              if (!gq.empty()) gq[(s * tq + i) * dh + d] += static_cast<T>(gs * kd[(s * tk + j) * dh + d]);
              if (!gk.empty()) gk[(s * tk + j) * dh + d] += static_cast<T>(gs * qd[(s * tq + i) * dh + d]);
            }
          }
      }
    });
  }
  return y;
}

template <typename T>
BasicTensor<T> masked_softmax(const BasicTensor<T>& scores, MaskMode mode) {
  require_rank(scores, 4, "masked_softmax");
  const std::size_t tq = scores.dim(2), tk = scores.dim(3);
  const std::size_t rows = scores.numel() / tk;
  std::vector<T> out(scores.numel(), T{0});
  auto sd = scores.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t i = r % tq;
    const T* row = sd.data() + r * tk;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < tk; ++j)
      if (attention_allowed(mode, i, j)) mx = std::max(mx, static_cast<double>(row[j]));
    double total = 0.0;
    std::vector<double> e(tk, 0.0);
    for (std::size_t j = 0; j < tk; ++j) {
      if (!attention_allowed(mode, i, j)) continue;
      e[j] = std::exp(static_cast<double>(row[j]) - mx);
      total += e[j];
    }
    for (std::size_t j = 0; j < tk; ++j) out[r * tk + j] = static_cast<T>(e[j] / total);
  }
  BasicTensor<T> y(scores.shape(), std::move(out));
  if (should_record<T>({&scores})) {
    record<T>({scores}, y, [scores, y, rows, tq, tk, mode]() mutable {
      auto g = scores.grad_buffer();
      auto gy = y.grad();
      auto p = y.data();
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t i = r % tq;
        double dot = 0.0;
        for (std::size_t j = 0; j < tk; ++j)
          dot += static_cast<double>(gy[r * tk + j]) * static_cast<double>(p[r * tk + j]);
        for (std::size_t j = 0; j < tk; ++j) {
          if (!attention_allowed(mode, i, j)) continue;
          g[r * tk + j] += static_cast<T>(static_cast<double>(p[r * tk + j]) *
                                          (static_cast<double>(gy[r * tk + j]) - dot));
        }
      }
    });
  }
  return y;
}

template <typename T>
BasicTensor<T> attention_apply(const BasicTensor<T>& probs, const BasicTensor<T>& v) {
  require_rank(probs, 4, "attention_apply");
  require_rank(v, 4, "attention_apply");
  const std::size_t batch = probs.dim(0), heads = probs.dim(1), tq = probs.dim(2), tk = probs.dim(3);
  const std::size_t dh = v.dim(3);
  if (v.dim(0) != batch || v.dim(1) != heads || v.dim(2) != tk) {
    throw DimensionError("attention_apply: probabilities " + shape_str(probs.shape()) +
                         " and values " + shape_str(v.shape()) + " disagree");
  }
  const std::size_t slabs = batch * heads;
  std::vector<T> out(slabs * tq * dh);
  auto pd = probs.data();
  auto vd = v.data();
  for (std::size_t s = 0; s < slabs; ++s)
    gemm_nn<T>(pd.subspan(s * tq * tk, tq * tk), vd.subspan(s * tk * dh, tk * dh),
               std::span<T>(out).subspan(s * tq * dh, tq * dh), tq, dh, tk);
  BasicTensor<T> y(Shape{batch, heads, tq, dh}, std::move(out));
  if (should_record<T>({&probs, &v})) {
    record<T>({probs, v}, y, [probs, v, y, slabs, tq, tk, dh]() mutable {
      auto gy = y.grad();
      auto pd = probs.data();
      auto vd = v.data();
      std::vector<T> tmp;
      for (std::size_t s = 0; s < slabs; ++s) {
        auto gys = gy.subspan(s * tq * dh, tq * dh);
        if (probs.requires_grad()) {
          // dP = dO * V^T
          auto vt = transpose<T>(vd.subspan(s * tk * dh, tk * dh), tk, dh);
          tmp.assign(tq * tk, T{0});
          gemm_nn<T>(gys, vt, tmp, tq, tk, dh);
          auto g = probs.grad_buffer().subspan(s * tq * tk, tq * tk);
          for (std::size_t i = 0; i < tmp.size(); ++i) g[i] += tmp[i];
        }
        if (v.requires_grad()) {
          // dV = P^T * dO
          auto pt = transpose<T>(pd.subspan(s * tq * tk, tq * tk), tq, tk);
          tmp.assign(tk * dh, T{0});
          gemm_nn<T>(pt, gys, tmp, tk, dh, tq);
          auto g = v.grad_buffer().subspan(s * tk * dh, tk * dh);
          for (std::size_t i = 0; i < tmp.size(); ++i) g[i] += tmp[i];
        }
      }
    });
  }
  return y;
}

template <typename T>
AttentionOutput<T> softmax_attention(const BasicTensor<T>& q, const BasicTensor<T>& k,
                                     const BasicTensor<T>& v, MaskMode mode) {
  auto scores = attention_scores(q, k, mode);
  auto probs = masked_softmax(scores, mode);
  auto out = attention_apply(probs, v);
  return {out, scores, probs};
}

// ---------------------------------------------------------------------------
// Reductions and losses

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  double acc = 0.0;
  for (auto v : x.data()) acc += v;
  BasicTensor<T> y = BasicTensor<T>::scalar(static_cast<T>(acc));
  if (should_record<T>({&x})) {
    record<T>({x}, y, [x, y]() mutable {
      auto g = x.grad_buffer();
      const T gy = y.grad()[0];
      for (auto& v : g) v += gy;
    });
  }
  return y;
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  if (x.numel() == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(x), static_cast<T>(1.0 / static_cast<double>(x.numel())));
}

template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, std::span<const std::int32_t> targets) {
  const std::size_t c = last_dim(logits.shape());
  if (c == 0) throw DimensionError("cross_entropy: empty class dimension");
  const std::size_t rows = logits.numel() / c;
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                         shape_str(logits.shape()));
  }
  auto ld = logits.data();
  std::vector<double> probs(logits.numel());
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = ld.data() + r * c;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) probs[r * c + j] = std::exp(row[j] - lse);
    if (targets[r] == kIgnoreTarget) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= c) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(targets[r]) + " outside [0, " +
                              std::to_string(c) + ")");
    }
    total += lse - row[targets[r]];
    ++count;
  }
  if (count == 0) throw std::invalid_argument("cross_entropy: every target is ignored");
  BasicTensor<T> y = BasicTensor<T>::scalar(static_cast<T>(total / static_cast<double>(count)));
  if (should_record<T>({&logits})) {
    std::vector<std::int32_t> tg(targets.begin(), targets.end());
    record<T>({logits}, y, [logits, y, rows, c, count, tg = std::move(tg), probs = std::move(probs)]() mutable {
      auto g = logits.grad_buffer();
      const double gy = static_cast<double>(y.grad()[0]) / static_cast<double>(count);
      for (std::size_t r = 0; r < rows; ++r) {
        if (tg[r] == kIgnoreTarget) continue;
        for (std::size_t j = 0; j < c; ++j) {
          const double d = probs[r * c + j] - (static_cast<std::int32_t>(j) == tg[r] ? 1.0 : 0.0);
          g[r * c + j] += static_cast<T>(gy * d);
        }
      }
    });
  }
  return y;
}

template <typename T>
BasicTensor<T> soft_target_kl(const BasicTensor<T>& student, const BasicTensor<T>& teacher,
                              double temperature) {
  require_same_shape(student, teacher, "soft_target_kl");
  if (!(temperature > 0.0)) throw std::invalid_argument("soft_target_kl: temperature must be positive");
  const std::size_t c = last_dim(student.shape());
  const std::size_t rows = student.numel() / c;
  auto sd = student.data();
  auto td = teacher.data();
  std::vector<double> ps(student.numel()), pt(student.numel());
  double total = 0.0;
  auto softmax_row = [&](const T* row, double* p, double* logp) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, row[j] / temperature);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] / temperature - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) {
      logp[j] = row[j] / temperature - lse;
      p[j] = std::exp(logp[j]);
    }
  };
  std::vector<double> log_s(c), log_t(c);
  for (std::size_t r = 0; r < rows; ++r) {
    softmax_row(sd.data() + r * c, ps.data() + r * c, log_s.data());
    softmax_row(td.data() + r * c, pt.data() + r * c, log_t.data());
    for (std::size_t j = 0; j < c; ++j) {
      const double p = pt[r * c + j];
      if (p != 0.0) total += p * (log_t[j] - log_s[j]);
    }
  }
  const double t2 = temperature * temperature;
  BasicTensor<T> y = BasicTensor<T>::scalar(static_cast<T>(t2 * total / static_cast<double>(rows)));
  if (should_record<T>({&student})) {
    record<T>({student}, y, [student, y, rows, c, temperature, ps = std::move(ps), pt = std::move(pt)]() mutable {
      auto g = student.grad_buffer();
      const double factor = static_cast<double>(y.grad()[0]) * temperature / static_cast<double>(rows);
      for (std::size_t i = 0; i < rows * c; ++i) g[i] += static_cast<T>(factor * (ps[i] - pt[i]));
    });
  }
  return y;
}

template <typename T>
BasicTensor<T> mse(const BasicTensor<T>& a, const BasicTensor<T>& b, std::span<const std::uint8_t> include) {
  require_same_shape(a, b, "mse");
  if (!include.empty() && include.size() != a.numel()) {
    throw DimensionError("mse: include mask has " + std::to_string(include.size()) +
                         " entries for shape " + shape_str(a.shape()));
  }
  auto ad = a.data();
  auto bd = b.data();
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < ad.size(); ++i) {
    if (!include.empty() && include[i] == 0) continue;
    const double d = static_cast<double>(ad[i]) - static_cast<double>(bd[i]);
    total += d * d;
    ++count;
  }
  if (count == 0) throw std::invalid_argument("mse: no elements selected");
  BasicTensor<T> y = BasicTensor<T>::scalar(static_cast<T>(total / static_cast<double>(count)));
  if (should_record<T>({&a, &b})) {
    std::vector<std::uint8_t> inc(include.begin(), include.end());
    record<T>({a, b}, y, [a, b, y, count, inc = std::move(inc)]() mutable {
      const double factor = 2.0 * static_cast<double>(y.grad()[0]) / static_cast<double>(count);
      auto ad = a.data();
      auto bd = b.data();
      std::span<T> ga, gb;
      if (a.requires_grad()) ga = a.grad_buffer();
      if (b.requires_grad()) gb = b.grad_buffer();
      for (std::size_t i = 0; i < ad.size(); ++i) {
        if (!inc.empty() && inc[i] == 0) continue;
        const double d = factor * (static_cast<double>(ad[i]) - static_cast<double>(bd[i]));
        if (!ga.empty()) ga[i] += static_cast<T>(d);
        if (!gb.empty()) gb[i] -= static_cast<T>(d);
      }
    });
  }
  return y;
}

#define Q4FG_INSTANTIATE_OPS(T)                                                                      \
  template void gemm_nn<T>(std::span<const T>, std::span<const T>, std::span<T>, std::size_t,        \
                           std::size_t, std::size_t);                                                \
  template std::vector<T> transpose<T>(std::span<const T>, std::size_t, std::size_t);                \
  template BasicTensor<T> add<T>(const BasicTensor<T>&, const BasicTensor<T>&);                      \
  template BasicTensor<T> sub<T>(const BasicTensor<T>&, const BasicTensor<T>&);                      \
  template BasicTensor<T> mul<T>(const BasicTensor<T>&, const BasicTensor<T>&);                      \
  template BasicTensor<T> scale<T>(const BasicTensor<T>&, T);                                        \
  template BasicTensor<T> add_bias<T>(const BasicTensor<T>&, const BasicTensor<T>&);                 \
  template BasicTensor<T> reshape<T>(const BasicTensor<T>&, Shape);                                  \
  template BasicTensor<T> matmul<T>(const BasicTensor<T>&, const BasicTensor<T>&);                   \
  template BasicTensor<T> matmul_nt<T>(const BasicTensor<T>&, const BasicTensor<T>&);                \
  template BasicTensor<T> linear<T>(const BasicTensor<T>&, const BasicTensor<T>&,                    \
                                    const BasicTensor<T>&);                                          \
  template BasicTensor<T> layer_norm<T>(const BasicTensor<T>&, const BasicTensor<T>&,                \
                                        const BasicTensor<T>&, double);                              \
  template BasicTensor<T> gelu<T>(const BasicTensor<T>&);                                            \
  template BasicTensor<T> dropout<T>(const BasicTensor<T>&, double, std::mt19937_64&);               \
  template BasicTensor<T> gather_rows<T>(const BasicTensor<T>&, std::span<const std::int32_t>);      \
  template BasicTensor<T> slice_cols<T>(const BasicTensor<T>&, std::size_t, std::size_t);            \
  template BasicTensor<T> split_heads<T>(const BasicTensor<T>&, std::size_t, std::size_t);           \
  template BasicTensor<T> merge_heads<T>(const BasicTensor<T>&);                                     \
  template BasicTensor<T> attention_scores<T>(const BasicTensor<T>&, const BasicTensor<T>&,          \
                                              MaskMode);                                             \
  template BasicTensor<T> masked_softmax<T>(const BasicTensor<T>&, MaskMode);                        \
  template BasicTensor<T> attention_apply<T>(const BasicTensor<T>&, const BasicTensor<T>&);          \
  template AttentionOutput<T> softmax_attention<T>(const BasicTensor<T>&, const BasicTensor<T>&,     \
                                                   const BasicTensor<T>&, MaskMode);                 \
  template BasicTensor<T> sum<T>(const BasicTensor<T>&);                                             \
  template BasicTensor<T> mean<T>(const BasicTensor<T>&);                                            \
  template BasicTensor<T> cross_entropy<T>(const BasicTensor<T>&, std::span<const std::int32_t>);    \
  template BasicTensor<T> soft_target_kl<T>(const BasicTensor<T>&, const BasicTensor<T>&, double);   \
  template BasicTensor<T> mse<T>(const BasicTensor<T>&, const BasicTensor<T>&,                       \
                                 std::span<const std::uint8_t>);

Q4FG_INSTANTIATE_OPS(float)
Q4FG_INSTANTIATE_OPS(double)

#undef Q4FG_INSTANTIATE_OPS

}  // namespace q4fg
