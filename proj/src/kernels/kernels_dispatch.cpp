#include "emem/kernels.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <stdexcept>
#include <string>

#include "kernels_internal.hpp"

namespace emem::kernels {
namespace {

bool cpu_has_avx2() {
#if defined(EMEM_HAVE_AVX2) && (defined(__GNUC__) || defined(__clang__))
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

struct Dispatch {
  const detail::KernelTable* table;
  Backend backend;
};

Dispatch resolve(Backend requested) {
  if (requested == Backend::kAuto) {
    if (const char* env = std::getenv("EMEM_KERNELS")) {
      const std::string v(env);
      if (v == "scalar") requested = Backend::kScalar;
      else if (v == "avx2") requested = Backend::kAvx2;
    }
  }
  if (requested == Backend::kAuto) {
    requested = cpu_has_avx2() ? Backend::kAvx2 : Backend::kScalar;
  }
#if defined(EMEM_HAVE_AVX2)
  if (requested == Backend::kAvx2) {
    if (!cpu_has_avx2()) throw std::runtime_error("kernels: AVX2 requested but not supported by this CPU");
    return {&detail::avx2_table(), Backend::kAvx2};
  }
#else
  if (requested == Backend::kAvx2) {
    throw std::runtime_error("kernels: AVX2 backend not compiled in");
  }
#endif
  return {&detail::scalar_table(), Backend::kScalar};
}

Dispatch& current() {
  static Dispatch d = resolve(Backend::kAuto);
  return d;
}

}  // namespace

void set_backend(Backend backend) { current() = resolve(backend); }

Backend active_backend() { return current().backend; }

std::string active_backend_name() {
  return current().backend == Backend::kAvx2 ? "avx2" : "scalar";
}

bool avx2_available() { return cpu_has_avx2(); }

double dot(const double* a, const double* b, std::size_t n) {
  return current().table->dot(a, b, n);
}

void axpy(double alpha, const double* x, double* y, std::size_t n) {
  current().table->axpy(alpha, x, y, n);
}

void scal(double alpha, double* x, std::size_t n) {
  current().table->scal(alpha, x, n);
}

void gemv(const double* a, std::size_t rows, std::size_t cols,
          const double* x, double* y, bool accumulate) {
  current().table->gemv(a, rows, cols, x, y, accumulate);
}

void gemv_t(const double* a, std::size_t rows, std::size_t cols,
            const double* x, double* y, bool accumulate) {
  current().table->gemv_t(a, rows, cols, x, y, accumulate);
}

void ger(double* a, std::size_t rows, std::size_t cols, double alpha,
         const double* x, const double* y) {
  current().table->ger(a, rows, cols, alpha, x, y);
}

double norm2(const double* x, std::size_t n) { return std::sqrt(dot(x, x, n)); }

double cosine(const double* a, const double* b, std::size_t n) {
  const double na = norm2(a, n);
  const double nb = norm2(b, n);
  const double c = dot(a, b, n) / (na * nb);
  return std::clamp(c, -1.0, 1.0);
}

void softmax_inplace(double* x, std::size_t n) {
  double mx = x[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = std::exp(x[i] - mx);
    sum += x[i];
  }
  scal(1.0 / sum, x, n);
}

void log_softmax(const double* x, double* out, std::size_t n) {
  double mx = x[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) sum += std::exp(x[i] - mx);
  const double lse = mx + std::log(sum);
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] - lse;
}

void tanh_vec(const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = std::tanh(x[i]);
}

}  // namespace emem::kernels
