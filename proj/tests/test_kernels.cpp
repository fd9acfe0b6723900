#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "emem/kernels.hpp"
#include "emem/rng.hpp"

using namespace emem;
namespace k = emem::kernels;

namespace {

std::vector<double> random_vec(Rng& rng, std::size_t n, double scale = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(-scale, scale);
  return v;
}

// extended-precision dot as a reference for both backends
double dot_ref(const std::vector<double>& a, const std::vector<double>& b) {
  long double acc = 0.0L;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<long double>(a[i]) * b[i];
  return static_cast<double>(acc);
}

struct BackendGuard {
  ~BackendGuard() { k::set_backend(k::Backend::kAuto); }
};

}  // namespace

TEST_CASE("scalar and avx2 dot agree with an extended-precision reference") {
  BackendGuard guard;
  Rng rng(42);
  for (std::size_t n : {1u, 3u, 4u, 7u, 8u, 17u, 64u, 255u, 1000u}) {
    const auto a = random_vec(rng, n);
    const auto b = random_vec(rng, n);
    const double ref = dot_ref(a, b);
    k::set_backend(k::Backend::kScalar);
    const double s = k::dot(a.data(), b.data(), n);
    CHECK(s == doctest::Approx(ref).epsilon(1e-12));
    if (k::avx2_available()) {
      k::set_backend(k::Backend::kAvx2);
      const double v = k::dot(a.data(), b.data(), n);
      CHECK(v == doctest::Approx(ref).epsilon(1e-12));
    }
  }
}

TEST_CASE("backends agree on axpy, scal, gemv, gemv_t, ger") {
  if (!k::avx2_available()) return;
  BackendGuard guard;
  Rng rng(7);
  const std::size_t rows = 37, cols = 53;
  const auto a0 = random_vec(rng, rows * cols);
  const auto x = random_vec(rng, cols);
  const auto xr = random_vec(rng, rows);
  const auto y0 = random_vec(rng, cols);

  auto run_all = [&](k::Backend backend) {
    k::set_backend(backend);
    std::vector<double> out;
    std::vector<double> y = y0;
    k::axpy(1.37, x.data(), y.data(), cols);
    out.insert(out.end(), y.begin(), y.end());
    y = y0;
    k::scal(-0.77, y.data(), cols);
    out.insert(out.end(), y.begin(), y.end());
    std::vector<double> g(rows, 1.0);
    k::gemv(a0.data(), rows, cols, x.data(), g.data(), /*accumulate=*/true);
    out.insert(out.end(), g.begin(), g.end());
    std::vector<double> gt(cols);
    k::gemv_t(a0.data(), rows, cols, xr.data(), gt.data());
    out.insert(out.end(), gt.begin(), gt.end());
    std::vector<double> a = a0;
    k::ger(a.data(), rows, cols, 0.31, xr.data(), x.data());
    out.insert(out.end(), a.begin(), a.end());
    return out;
  };

  const auto rs = run_all(k::Backend::kScalar);
  const auto rv = run_all(k::Backend::kAvx2);
  REQUIRE(rs.size() == rv.size());
  for (std::size_t i = 0; i < rs.size(); ++i) {
    CHECK(rs[i] == doctest::Approx(rv[i]).epsilon(1e-12));
  }
}

TEST_CASE("softmax normalizes and matches log_softmax") {
  Rng rng(3);
  for (int it = 0; it < 20; ++it) {
    const std::size_t n = 2 + it % 13;
    auto x = random_vec(rng, n, 30.0);
    std::vector<double> lp(n);
    k::log_softmax(x.data(), lp.data(), n);
    auto p = x;
    k::softmax_inplace(p.data(), n);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(p[i] > 0.0);
      CHECK(p[i] < 1.0 + 1e-15);
      CHECK(p[i] == doctest::Approx(std::exp(lp[i])).epsilon(1e-12));
      sum += p[i];
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("cosine clamps to [-1, 1] and is exact on crafted vectors") {
  std::vector<double> a{3.0, 4.0};
  std::vector<double> b{-4.0, 3.0};
  CHECK(k::cosine(a, b) == doctest::Approx(0.0));
  CHECK(k::cosine(a, a) <= 1.0);
  CHECK(k::cosine(a, a) == doctest::Approx(1.0));
  std::vector<double> c{-3.0, -4.0};
  CHECK(k::cosine(a, c) >= -1.0);
  CHECK(k::cosine(a, c) == doctest::Approx(-1.0));
}

TEST_CASE("norm2 agrees with the dot product") {
  Rng rng(9);
  const auto v = random_vec(rng, 129, 5.0);
  CHECK(k::norm2(v.data(), v.size()) ==
        doctest::Approx(std::sqrt(dot_ref(v, v))).epsilon(1e-12));
}

TEST_CASE("backend selection is reported and reversible") {
  BackendGuard guard;
  k::set_backend(k::Backend::kScalar);
  CHECK(k::active_backend_name() == "scalar");
  if (k::avx2_available()) {
    k::set_backend(k::Backend::kAvx2);
    CHECK(k::active_backend_name() == "avx2");
  }
  k::set_backend(k::Backend::kAuto);
  CHECK((k::active_backend_name() == "scalar" || k::active_backend_name() == "avx2"));
}
