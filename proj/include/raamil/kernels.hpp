#pragma once

// Data-parallel inner loops of the forward/backward pass.
//
// Every kernel exists twice: `serial::` is the plain reference loop nest and
// `omp::` distributes independent output rows over OpenMP threads. Both
// accumulate each output element in the same order, so results are bitwise
// identical regardless of thread count. The unqualified entry points dispatch
// on the process-wide backend.

#include <cstddef>
#include <span>

namespace raamil::kernels {

enum class Backend { kSerial, kOpenMP };

void set_backend(Backend backend) noexcept;
Backend backend() noexcept;

/// Dimensions of C (+)= op(A) * op(B), with op(A) m x k and op(B) k x n.
struct GemmShape {
  std::size_t m = 0;
  std::size_t n = 0;
  std::size_t k = 0;
  bool trans_a = false;  // A stored k x m
  bool trans_b = false;  // B stored n x k
};

/// Row-segment description: rows [offsets[s], offsets[s+1]) form segment s.
using Offsets = std::span<const std::size_t>;

#define RAAMIL_KERNEL_DECLS                                                                \
  void gemm(const GemmShape& s, std::span<const double> a, std::span<const double> b,      \
            std::span<double> c, bool accumulate);                                         \
  void layer_norm(std::span<const double> x, std::span<const double> scale,                \
                  std::span<const double> shift, std::size_t rows, std::size_t cols,       \
                  double eps, std::span<double> out, std::span<double> xhat,               \
                  std::span<double> inv_std);                                              \
  void layer_norm_backward(std::span<const double> grad_out, std::span<const double> xhat, \
                           std::span<const double> inv_std, std::span<const double> scale, \
                           std::size_t rows, std::size_t cols, std::span<double> grad_x);  \
  void segment_softmax(std::span<const double> x, Offsets offsets, std::span<double> out);  \
  void segment_softmax_backward(std::span<const double> y, std::span<const double> grad_y,  \
                                Offsets offsets, std::span<double> grad_x);                \
  void gather_rows(std::span<const double> src, std::size_t cols,                          \
                   std::span<const std::size_t> index, std::span<double> out);             \
  void segment_sum_rows(std::span<const double> src, std::size_t cols, Offsets offsets,    \
                        std::span<double> out);

namespace serial {
RAAMIL_KERNEL_DECLS
}  // namespace serial

namespace omp {
RAAMIL_KERNEL_DECLS
}  // namespace omp

RAAMIL_KERNEL_DECLS

#undef RAAMIL_KERNEL_DECLS

/// Adds rows of `grad_out` into `grad_src` at `index` (adjoint of gather_rows).
/// Kept serial: destinations collide, and a fixed visiting order is what
/// makes the sum deterministic.
void scatter_add_rows(std::span<const double> grad_out, std::size_t cols,
                      std::span<const std::size_t> index, std::span<double> grad_src);

}  // namespace raamil::kernels
