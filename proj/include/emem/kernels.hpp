#pragma once

// Dense double-precision primitives used by the encoder and the tree head.
// Every primitive has a scalar reference implementation and, on x86-64, an
// AVX2+FMA variant selected at runtime. Both variants reduce in a fixed
// order, so repeated calls on the same machine are bitwise reproducible.

#include <cstddef>
#include <string>
#include <vector>

namespace emem::kernels {

enum class Backend {
  kAuto,    // probe the CPU, prefer AVX2 when available
  kScalar,  // force the reference implementation
  kAvx2,    // force AVX2 (throws if the CPU lacks it)
};

// Selects the backend for all subsequent kernel calls. Honors the
// EMEM_KERNELS environment variable ("scalar" or "avx2") on first use.
void set_backend(Backend backend);
Backend active_backend();
std::string active_backend_name();
bool avx2_available();

// y dot x over n elements.
double dot(const double* a, const double* b, std::size_t n);

// y += alpha * x
void axpy(double alpha, const double* x, double* y, std::size_t n);

// x *= alpha
void scal(double alpha, double* x, std::size_t n);

// Row-major A (rows x cols): y = A x, or y += A x when accumulate is set.
void gemv(const double* a, std::size_t rows, std::size_t cols,
          const double* x, double* y, bool accumulate = false);

// Row-major A (rows x cols): y = A^T x (length cols), x has length rows.
void gemv_t(const double* a, std::size_t rows, std::size_t cols,
            const double* x, double* y, bool accumulate = false);

// Rank-one update, row-major: A += alpha * x y^T  (x: rows, y: cols).
void ger(double* a, std::size_t rows, std::size_t cols, double alpha,
         const double* x, const double* y);

// ---- helpers built on the primitives above ----

double norm2(const double* x, std::size_t n);

// Clamped to [-1, 1]. Callers must guarantee nonzero norms.
double cosine(const double* a, const double* b, std::size_t n);

// Numerically stable (max-shifted) softmax.
void softmax_inplace(double* x, std::size_t n);
void log_softmax(const double* x, double* out, std::size_t n);

void tanh_vec(const double* x, double* y, std::size_t n);

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  return dot(a.data(), b.data(), a.size());
}
inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  return cosine(a.data(), b.data(), a.size());
}

}  // namespace emem::kernels
