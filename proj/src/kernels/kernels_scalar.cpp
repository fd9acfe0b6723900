// Reference implementations. These define the semantics the AVX2 variants
// are equivalence-tested against.

#include "kernels_internal.hpp"

namespace emem::kernels::detail {
namespace {

double dot_scalar(const double* a, const double* b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

void axpy_scalar(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void scal_scalar(double alpha, double* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) x[i] *= alpha;
}

void gemv_scalar(const double* a, std::size_t rows, std::size_t cols,
                 const double* x, double* y, bool accumulate) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double v = dot_scalar(a + r * cols, x, cols);
    y[r] = accumulate ? y[r] + v : v;
  }
}

void gemv_t_scalar(const double* a, std::size_t rows, std::size_t cols,
                   const double* x, double* y, bool accumulate) {
  if (!accumulate) {
    for (std::size_t c = 0; c < cols; ++c) y[c] = 0.0;
  }
  for (std::size_t r = 0; r < rows; ++r) {
    axpy_scalar(x[r], a + r * cols, y, cols);
  }
}

void ger_scalar(double* a, std::size_t rows, std::size_t cols, double alpha,
                const double* x, const double* y) {
  for (std::size_t r = 0; r < rows; ++r) {
    axpy_scalar(alpha * x[r], y, a + r * cols, cols);
  }
}

}  // namespace

const KernelTable& scalar_table() {
  static const KernelTable table{dot_scalar, axpy_scalar, scal_scalar,
                                 gemv_scalar, gemv_t_scalar, ger_scalar};
  return table;
}

}  // namespace emem::kernels::detail
