#include "raamil/kernels.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <vector>

namespace raamil::kernels {

namespace {

std::atomic<Backend> g_backend{Backend::kOpenMP};

inline double a_at(const GemmShape& s, std::span<const double> a, std::size_t i, std::size_t p) {
  return s.trans_a ? a[p * s.m + i] : a[i * s.k + p];
}

inline double b_at(const GemmShape& s, std::span<const double> b, std::size_t p, std::size_t j) {
  return s.trans_b ? b[j * s.k + p] : b[p * s.n + j];
}

// One output row of C for the cache-friendly kernels. `buf` holds n doubles.
// Element (i, j) accumulates sum over p in ascending order, exactly as the
// reference triple loop does.
void gemm_row(const GemmShape& s, std::span<const double> a, std::span<const double> b,
              std::span<double> c, bool accumulate, std::size_t i, double* buf) {
  double* crow = c.data() + i * s.n;
  if (s.trans_b) {
    const double* brow_base = b.data();
    for (std::size_t j = 0; j < s.n; ++j) {
      const double* brow = brow_base + j * s.k;
      double acc = 0.0;
      if (s.trans_a) {
        for (std::size_t p = 0; p < s.k; ++p) acc += a[p * s.m + i] * brow[p];
      } else {
        const double* arow = a.data() + i * s.k;
        for (std::size_t p = 0; p < s.k; ++p) acc += arow[p] * brow[p];
      }
      buf[j] = acc;
    }
  } else {
    std::fill(buf, buf + s.n, 0.0);
    for (std::size_t p = 0; p < s.k; ++p) {
      const double av = a_at(s, a, i, p);
      const double* brow = b.data() + p * s.n;
      for (std::size_t j = 0; j < s.n; ++j) buf[j] += av * brow[j];
    }
  }
  if (accumulate) {
    for (std::size_t j = 0; j < s.n; ++j) crow[j] += buf[j];
  } else {
    std::copy(buf, buf + s.n, crow);
  }
}

inline void layer_norm_row(const double* x, std::span<const double> scale,
                           std::span<const double> shift, std::size_t cols, double eps,
                           double* out, double* xhat, double* inv_std) {
  double mean = 0.0;
  for (std::size_t j = 0; j < cols; ++j) mean += x[j];
  mean /= static_cast<double>(cols);
  double var = 0.0;
  for (std::size_t j = 0; j < cols; ++j) {
    const double d = x[j] - mean;
    var += d * d;
  }
  var /= static_cast<double>(cols);
  const double is = 1.0 / std::sqrt(var + eps);
  *inv_std = is;
  for (std::size_t j = 0; j < cols; ++j) {
    xhat[j] = (x[j] - mean) * is;
    out[j] = xhat[j] * scale[j] + shift[j];
  }
}

inline void layer_norm_backward_row(const double* g_out, const double* xhat, double inv_std,
                                    std::span<const double> scale, std::size_t cols,
                                    double* g_x) {
  double mean_g = 0.0;
  double mean_gx = 0.0;
  for (std::size_t j = 0; j < cols; ++j) {
    const double g = g_out[j] * scale[j];
    mean_g += g;
    mean_gx += g * xhat[j];
  }
  mean_g /= static_cast<double>(cols);
  mean_gx /= static_cast<double>(cols);
  for (std::size_t j = 0; j < cols; ++j) {
    const double g = g_out[j] * scale[j];
    g_x[j] += inv_std * (g - mean_g - xhat[j] * mean_gx);
  }
}

inline void softmax_segment(std::span<const double> x, std::size_t lo, std::size_t hi,
                            std::span<double> out) {
  double mx = x[lo];
  for (std::size_t r = lo + 1; r < hi; ++r) mx = std::max(mx, x[r]);
  double sum = 0.0;
  for (std::size_t r = lo; r < hi; ++r) {
    out[r] = std::exp(x[r] - mx);
    sum += out[r];
  }
  for (std::size_t r = lo; r < hi; ++r) out[r] /= sum;
}

inline void softmax_segment_backward(std::span<const double> y, std::span<const double> gy,
                                     std::size_t lo, std::size_t hi, std::span<double> gx) {
  double dot = 0.0;
  for (std::size_t r = lo; r < hi; ++r) dot += y[r] * gy[r];
  for (std::size_t r = lo; r < hi; ++r) gx[r] += y[r] * (gy[r] - dot);
}

inline void segment_sum_one(std::span<const double> src, std::size_t cols, std::size_t lo,
                            std::size_t hi, double* out) {
  std::fill(out, out + cols, 0.0);
  for (std::size_t r = lo; r < hi; ++r) {
    const double* s = src.data() + r * cols;
    for (std::size_t j = 0; j < cols; ++j) out[j] += s[j];
  }
}

}  // namespace

void set_backend(Backend b) noexcept { g_backend.store(b, std::memory_order_relaxed); }
Backend backend() noexcept { return g_backend.load(std::memory_order_relaxed); }

// ---------------------------------------------------------------------------
// serial reference

namespace serial {

void gemm(const GemmShape& s, std::span<const double> a, std::span<const double> b,
          std::span<double> c, bool accumulate) {
  for (std::size_t i = 0; i < s.m; ++i) {
    for (std::size_t j = 0; j < s.n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < s.k; ++p) acc += a_at(s, a, i, p) * b_at(s, b, p, j);
      if (accumulate) {
        c[i * s.n + j] += acc;
      } else {
        c[i * s.n + j] = acc;
      }
    }
  }
}

void layer_norm(std::span<const double> x, std::span<const double> scale,
                std::span<const double> shift, std::size_t rows, std::size_t cols, double eps,
                std::span<double> out, std::span<double> xhat, std::span<double> inv_std) {
  for (std::size_t r = 0; r < rows; ++r) {
    layer_norm_row(x.data() + r * cols, scale, shift, cols, eps, out.data() + r * cols,
                   xhat.data() + r * cols, inv_std.data() + r);
  }
}

void layer_norm_backward(std::span<const double> grad_out, std::span<const double> xhat,
                         std::span<const double> inv_std, std::span<const double> scale,
                         std::size_t rows, std::size_t cols, std::span<double> grad_x) {
  for (std::size_t r = 0; r < rows; ++r) {
    layer_norm_backward_row(grad_out.data() + r * cols, xhat.data() + r * cols, inv_std[r],
                            scale, cols, grad_x.data() + r * cols);
  }
}

void segment_softmax(std::span<const double> x, Offsets offsets, std::span<double> out) {
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    softmax_segment(x, offsets[s], offsets[s + 1], out);
  }
}

void segment_softmax_backward(std::span<const double> y, std::span<const double> grad_y,
                              Offsets offsets, std::span<double> grad_x) {
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    softmax_segment_backward(y, grad_y, offsets[s], offsets[s + 1], grad_x);
  }
}

void gather_rows(std::span<const double> src, std::size_t cols,
                 std::span<const std::size_t> index, std::span<double> out) {
  for (std::size_t r = 0; r < index.size(); ++r) {
    for (std::size_t j = 0; j < cols; ++j) out[r * cols + j] = src[index[r] * cols + j];
  }
}

void segment_sum_rows(std::span<const double> src, std::size_t cols, Offsets offsets,
                      std::span<double> out) {
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    segment_sum_one(src, cols, offsets[s], offsets[s + 1], out.data() + s * cols);
  }
}

}  // namespace serial

// ---------------------------------------------------------------------------
// OpenMP

namespace omp {

void gemm(const GemmShape& s, std::span<const double> a, std::span<const double> b,
          std::span<double> c, bool accumulate) {
  const auto m = static_cast<std::ptrdiff_t>(s.m);
#pragma omp parallel
  {
    std::vector<double> buf(s.n);
#pragma omp for schedule(static)
    for (std::ptrdiff_t i = 0; i < m; ++i) {
      gemm_row(s, a, b, c, accumulate, static_cast<std::size_t>(i), buf.data());
    }
  }
}

void layer_norm(std::span<const double> x, std::span<const double> scale,
                std::span<const double> shift, std::size_t rows, std::size_t cols, double eps,
                std::span<double> out, std::span<double> xhat, std::span<double> inv_std) {
  const auto n = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t r = 0; r < n; ++r) {
    const auto u = static_cast<std::size_t>(r);
    layer_norm_row(x.data() + u * cols, scale, shift, cols, eps, out.data() + u * cols,
                   xhat.data() + u * cols, inv_std.data() + u);
  }
}

void layer_norm_backward(std::span<const double> grad_out, std::span<const double> xhat,
                         std::span<const double> inv_std, std::span<const double> scale,
                         std::size_t rows, std::size_t cols, std::span<double> grad_x) {
  const auto n = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t r = 0; r < n; ++r) {
    const auto u = static_cast<std::size_t>(r);
    layer_norm_backward_row(grad_out.data() + u * cols, xhat.data() + u * cols, inv_std[u],
                            scale, cols, grad_x.data() + u * cols);
  }
}

void segment_softmax(std::span<const double> x, Offsets offsets, std::span<double> out) {
  const auto n = static_cast<std::ptrdiff_t>(offsets.size()) - 1;
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t s = 0; s < n; ++s) {
    const auto u = static_cast<std::size_t>(s);
    softmax_segment(x, offsets[u], offsets[u + 1], out);
  }
}

void segment_softmax_backward(std::span<const double> y, std::span<const double> grad_y,
                              Offsets offsets, std::span<double> grad_x) {
  const auto n = static_cast<std::ptrdiff_t>(offsets.size()) - 1;
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t s = 0; s < n; ++s) {
    const auto u = static_cast<std::size_t>(s);
    softmax_segment_backward(y, grad_y, offsets[u], offsets[u + 1], grad_x);
  }
}

void gather_rows(std::span<const double> src, std::size_t cols,
                 std::span<const std::size_t> index, std::span<double> out) {
  const auto n = static_cast<std::ptrdiff_t>(index.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t r = 0; r < n; ++r) {
    const auto u = static_cast<std::size_t>(r);
    std::copy_n(src.data() + index[u] * cols, cols, out.data() + u * cols);
  }
}

void segment_sum_rows(std::span<const double> src, std::size_t cols, Offsets offsets,
                      std::span<double> out) {
  const auto n = static_cast<std::ptrdiff_t>(offsets.size()) - 1;
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t s = 0; s < n; ++s) {
    const auto u = static_cast<std::size_t>(s);
    segment_sum_one(src, cols, offsets[u], offsets[u + 1], out.data() + u * cols);
  }
}

}  // namespace omp

// ---------------------------------------------------------------------------
// dispatch

#define RAAMIL_DISPATCH(name, ...)                        \
  if (backend() == Backend::kOpenMP) {                    \
    omp::name(__VA_ARGS__);                               \
  } else {                                                \
    serial::name(__VA_ARGS__);                            \
  }

void gemm(const GemmShape& s, std::span<const double> a, std::span<const double> b,
          std::span<double> c, bool accumulate) {
  RAAMIL_DISPATCH(gemm, s, a, b, c, accumulate)
}

void layer_norm(std::span<const double> x, std::span<const double> scale,
                std::span<const double> shift, std::size_t rows, std::size_t cols, double eps,
                std::span<double> out, std::span<double> xhat, std::span<double> inv_std) {
  RAAMIL_DISPATCH(layer_norm, x, scale, shift, rows, cols, eps, out, xhat, inv_std)
}

void layer_norm_backward(std::span<const double> grad_out, std::span<const double> xhat,
                         std::span<const double> inv_std, std::span<const double> scale,
                         std::size_t rows, std::size_t cols, std::span<double> grad_x) {
  RAAMIL_DISPATCH(layer_norm_backward, grad_out, xhat, inv_std, scale, rows, cols, grad_x)
}

void segment_softmax(std::span<const double> x, Offsets offsets, std::span<double> out) {
  RAAMIL_DISPATCH(segment_softmax, x, offsets, out)
}

void segment_softmax_backward(std::span<const double> y, std::span<const double> grad_y,
                              Offsets offsets, std::span<double> grad_x) {
  RAAMIL_DISPATCH(segment_softmax_backward, y, grad_y, offsets, grad_x)
}

void gather_rows(std::span<const double> src, std::size_t cols,
                 std::span<const std::size_t> index, std::span<double> out) {
  RAAMIL_DISPATCH(gather_rows, src, cols, index, out)
}

void segment_sum_rows(std::span<const double> src, std::size_t cols, Offsets offsets,
                      std::span<double> out) {
  RAAMIL_DISPATCH(segment_sum_rows, src, cols, offsets, out)
}

#undef RAAMIL_DISPATCH

void scatter_add_rows(std::span<const double> grad_out, std::size_t cols,
                      std::span<const std::size_t> index, std::span<double> grad_src) {
  for (std::size_t r = 0; r < index.size(); ++r) {
    const double* g = grad_out.data() + r * cols;
    double* dst = grad_src.data() + index[r] * cols;
    for (std::size_t j = 0; j < cols; ++j) dst[j] += g[j];
  }
}

}  // namespace raamil::kernels
