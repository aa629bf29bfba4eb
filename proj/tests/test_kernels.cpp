#include <doctest.h>

#include <array>
#include <cmath>
#include <random>
#include <vector>

#include "unicombine/kernels.hpp"

using namespace unicombine::kernels;

namespace {

std::vector<double> random_vec(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> d;
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

// Triple loop in index form, no shared code with the kernels.
std::vector<double> naive(const std::vector<double>& a, const std::vector<double>& b, int m,
                          int k, int n, bool ta, bool tb) {
  std::vector<double> c(static_cast<std::size_t>(m * n), 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double s = 0;
      for (int p = 0; p < k; ++p) {
        const double av = ta ? a[p * m + i] : a[i * k + p];
        const double bv = tb ? b[j * k + p] : b[p * n + j];
        s += av * bv;
      }
      c[i * n + j] = s;
    }
  return c;
}

double max_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("gemm variants agree with a triple loop, serial and parallel") {
  std::mt19937_64 rng(11);
  for (auto [m, k, n] : {std::array{1, 1, 1}, std::array{4, 5, 6}, std::array{7, 13, 3},
                         std::array{65, 33, 129}}) {
    const auto a = random_vec(static_cast<std::size_t>(m * k), rng);
    const auto b = random_vec(static_cast<std::size_t>(k * n), rng);
    std::vector<double> c(static_cast<std::size_t>(m * n));

    gemm_nn(a.data(), b.data(), c.data(), m, k, n, false);
    CHECK(max_diff(c, naive(a, b, m, k, n, false, false)) < 1e-10);
    gemm_nn_serial(a.data(), b.data(), c.data(), m, k, n, false);
    CHECK(max_diff(c, naive(a, b, m, k, n, false, false)) < 1e-10);

    gemm_nt(a.data(), b.data(), c.data(), m, k, n, false);
    CHECK(max_diff(c, naive(a, b, m, k, n, false, true)) < 1e-10);
    gemm_nt_serial(a.data(), b.data(), c.data(), m, k, n, false);
    CHECK(max_diff(c, naive(a, b, m, k, n, false, true)) < 1e-10);

    gemm_tn(a.data(), b.data(), c.data(), m, k, n, false);
    CHECK(max_diff(c, naive(a, b, m, k, n, true, false)) < 1e-10);
    gemm_tn_serial(a.data(), b.data(), c.data(), m, k, n, false);
    CHECK(max_diff(c, naive(a, b, m, k, n, true, false)) < 1e-10);
  }
}

TEST_CASE("accumulate adds onto the existing output") {
  std::mt19937_64 rng(3);
  const int m = 5, k = 4, n = 6;
  const auto a = random_vec(m * k, rng), b = random_vec(k * n, rng);
  std::vector<double> c(m * n, 1.0);
  gemm_nn(a.data(), b.data(), c.data(), m, k, n, true);
  auto ref = naive(a, b, m, k, n, false, false);
  for (auto& v : ref) v += 1.0;
  CHECK(max_diff(c, ref) < 1e-12);
}

TEST_CASE("parallel float kernels are bitwise equal to their serial references") {
  std::mt19937_64 rng(5);
  std::normal_distribution<float> d;
  const int m = 96, k = 64, n = 80;
  std::vector<float> a(m * k), b(k * n), bt(n * k), c1(m * n), c2(m * n);
  for (auto& v : a) v = d(rng);
  for (auto& v : b) v = d(rng);
  for (auto& v : bt) v = d(rng);
  gemm_nn(a.data(), b.data(), c1.data(), m, k, n, false);
  gemm_nn_serial(a.data(), b.data(), c2.data(), m, k, n, false);
  for (int i = 0; i < m * n; ++i) CHECK(std::abs(c1[i] - c2[i]) <= 1e-4f * (1 + std::abs(c2[i])));
  softmax_rows(a.data(), c1.data(), m, k, 0.5f);
  softmax_rows_serial(a.data(), c2.data(), m, k, 0.5f);
  for (int i = 0; i < m * k; ++i) CHECK(std::abs(c1[i] - c2[i]) < 1e-6f);
}

TEST_CASE("softmax rows sum to one and survive large logits") {
  std::vector<double> x{1000, 0, 5, 5, 5, 5};
  std::vector<double> out(6);
  softmax_rows(x.data(), out.data(), 1, 2, 1.0);
  CHECK(out[0] == doctest::Approx(1.0));
  CHECK(out[1] == doctest::Approx(0.0));
  softmax_rows(x.data() + 2, out.data(), 1, 4, 3.0);
  for (int i = 0; i < 4; ++i) CHECK(out[i] == doctest::Approx(0.25));
  CHECK(max_threads() >= 1);
}
