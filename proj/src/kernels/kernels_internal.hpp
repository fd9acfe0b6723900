#pragma once

#include <cstddef>

namespace emem::kernels::detail {

struct KernelTable {
  double (*dot)(const double*, const double*, std::size_t);
  void (*axpy)(double, const double*, double*, std::size_t);
  void (*scal)(double, double*, std::size_t);
  void (*gemv)(const double*, std::size_t, std::size_t, const double*, double*, bool);
  void (*gemv_t)(const double*, std::size_t, std::size_t, const double*, double*, bool);
  void (*ger)(double*, std::size_t, std::size_t, double, const double*, const double*);
};

const KernelTable& scalar_table();

#if defined(EMEM_HAVE_AVX2)
const KernelTable& avx2_table();
#endif

}  // namespace emem::kernels::detail
