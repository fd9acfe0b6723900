// AVX2+FMA variants. Loop structure mirrors the scalar reference; the only
// difference is 4-lane blocking, so reductions stay in a fixed order and
// results are reproducible run to run.

#if defined(EMEM_HAVE_AVX2)

#include <immintrin.h>

#include "kernels_internal.hpp"

namespace emem::kernels::detail {
namespace {

inline double hsum4(__m256d v) {
  const __m128d lo = _mm256_castpd256_pd128(v);
  const __m128d hi = _mm256_extractf128_pd(v, 1);
  const __m128d s = _mm_add_pd(lo, hi);
  return _mm_cvtsd_f64(_mm_add_sd(s, _mm_unpackhi_pd(s, s)));
}

double dot_avx2(const double* a, const double* b, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), acc1);
  }
  for (; i + 4 <= n; i += 4) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
  }
  double acc = hsum4(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

void axpy_avx2(double alpha, const double* x, double* y, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d vy = _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i));
    _mm256_storeu_pd(y + i, vy);
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void scal_avx2(double alpha, double* x, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(x + i, _mm256_mul_pd(va, _mm256_loadu_pd(x + i)));
  }
  for (; i < n; ++i) x[i] *= alpha;
}

void gemv_avx2(const double* a, std::size_t rows, std::size_t cols,
               const double* x, double* y, bool accumulate) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double v = dot_avx2(a + r * cols, x, cols);
    y[r] = accumulate ? y[r] + v : v;
  }
}

void gemv_t_avx2(const double* a, std::size_t rows, std::size_t cols,
                 const double* x, double* y, bool accumulate) {
  if (!accumulate) {
    for (std::size_t c = 0; c < cols; ++c) y[c] = 0.0;
  }
  for (std::size_t r = 0; r < rows; ++r) {
    axpy_avx2(x[r], a + r * cols, y, cols);
  }
}

void ger_avx2(double* a, std::size_t rows, std::size_t cols, double alpha,
              const double* x, const double* y) {
  for (std::size_t r = 0; r < rows; ++r) {
    axpy_avx2(alpha * x[r], y, a + r * cols, cols);
  }
}

}  // namespace

const KernelTable& avx2_table() {
  static const KernelTable table{dot_avx2, axpy_avx2, scal_avx2,
                                 gemv_avx2, gemv_t_avx2, ger_avx2};
  return table;
}

}  // namespace emem::kernels::detail

#endif  // EMEM_HAVE_AVX2
