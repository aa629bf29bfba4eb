#include <doctest.h>

#include <cmath>
#include <random>

#include "test_support.hpp"
#include "unicombine/tensor.hpp"

using namespace unicombine;
using testing::contract;

namespace {

using T = Tensor<double>;
constexpr double kStep = 1e-5;
constexpr double kTol = 1e-4;
constexpr int kTrials = 5;

T rnd(Shape s, std::mt19937_64& rng, double std = 1.0) { return T::randn(std::move(s), rng, std); }

// Grad-checks `op` on kTrials random inputs of the given shape.
void check_unary(const char* name, Shape shape, const std::function<T(const T&)>& op,
                 std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  for (int trial = 0; trial < kTrials; ++trial) {
    auto x = rnd(shape, rng);
    const double err = grad_check([&](const T& v) { return contract(op(v), 77 + trial); }, x, kStep);
    INFO(name << " trial " << trial);
    CHECK(err < kTol);
  }
}

}  // namespace

TEST_CASE("shape bookkeeping") {
  CHECK(shape_numel({}) == 1);
  CHECK(shape_numel({2, 3, 4}) == 24);
  CHECK_THROWS_AS(shape_numel({2, 0}), DimensionError);
  CHECK_THROWS_AS(T::from({2, 2}, {1, 2, 3}), DimensionError);
  auto t = T::zeros({3, 4});
  CHECK(t.numel() == 12);
  CHECK(t.rows() == 3);
  CHECK(t.cols() == 4);
  CHECK_FALSE(t.has_grad());
  CHECK(t.grad().size() == 12);
}

TEST_CASE("matmul examples") {
  auto id = T::from({2, 2}, {1, 0, 0, 1});
  auto m = T::from({2, 2}, {1, 2, 3, 4});
  CHECK(matmul(id, m).values() == m.values());
  std::mt19937_64 rng(2);
  auto z = matmul(T::zeros({2, 3}), rnd({3, 4}, rng));
  CHECK(z.shape() == Shape{2, 4});
  for (double v : z.values()) CHECK(v == 0.0);

  auto a = rnd({4, 5}, rng), b = rnd({5, 6}, rng);
  auto c = matmul(a, b);
  double worst = 0;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 6; ++j) {
      double s = 0;
      for (int p = 0; p < 5; ++p) s += a.at(i, p) * b.at(p, j);
      worst = std::max(worst, std::abs(s - c.at(i, j)));
    }
  CHECK(worst < 1e-6);
  CHECK_THROWS_AS(matmul(a, a), DimensionError);
}

TEST_CASE("matmul associativity in single precision") {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 10; ++trial) {
    auto a = Tensor<float>::randn({6, 7}, rng), b = Tensor<float>::randn({7, 5}, rng),
         c = Tensor<float>::randn({5, 4}, rng);
    auto l = matmul(matmul(a, b), c), r = matmul(a, matmul(b, c));
    CHECK(max_abs_diff(l.data(), r.data()) < 1e-4);
  }
}

TEST_CASE("softmax examples and row sums") {
  auto s = softmax_scaled(T::from({1, 4}, {5, 5, 5, 5}), 2.0);
  for (double v : s.values()) CHECK(v == doctest::Approx(0.25));
  auto big = softmax_scaled(T::from({1, 2}, {1000, 0}), 1.0);
  CHECK(big.values()[0] == doctest::Approx(1.0));
  CHECK(big.values()[1] == doctest::Approx(0.0));
  check_finite(big, "softmax");

  std::mt19937_64 rng(4);
  auto x = Tensor<float>::randn({8, 8}, rng, 3.0f);
  auto y = softmax_scaled(x, 0.7f);
  for (int r = 0; r < 8; ++r) {
    double total = 0;
    for (int c = 0; c < 8; ++c) {
      double ref_den = 0;
      for (int k = 0; k < 8; ++k) ref_den += std::exp(0.7 * (x.at(r, k) - x.at(r, c)));
      CHECK(std::abs(y.at(r, c) - 1.0 / ref_den) < 1e-6);
      total += y.at(r, c);
    }
    CHECK(std::abs(total - 1.0) < 1e-6);
  }
  CHECK_THROWS_AS(softmax_scaled(x, 0.0f), ContractError);
}

TEST_CASE("backward examples") {
  std::mt19937_64 rng(6);
  auto x = rnd({3, 4}, rng);
  x.set_requires_grad();
  {
    Graph<double> g;
    GraphScope<double> s(g);
    g.backward(sum(x));
  }
  for (double v : x.grad()) CHECK(v == 1.0);
  x.zero_grad();
  {
    Graph<double> g;
    GraphScope<double> s(g);
    auto loss = scale(sum(mul(x, x)), 0.5);
    g.backward(loss);
    std::vector<double> once(x.grad().begin(), x.grad().end());
    for (std::size_t i = 0; i < once.size(); ++i) CHECK(once[i] == doctest::Approx(x.values()[i]));
    // Repeated calls accumulate.
    g.backward(loss);
    for (std::size_t i = 0; i < once.size(); ++i) CHECK(x.grad()[i] == doctest::Approx(2 * once[i]));
    CHECK_THROWS_AS(g.backward(x), ContractError);
  }
}

TEST_CASE("backward visits every node once and honors no-grad scopes") {
  std::mt19937_64 rng(7);
  auto x = rnd({2, 2}, rng);
  x.set_requires_grad();
  Graph<double> g;
  {
    GraphScope<double> s(g);
    auto y = add(x, x);
    {
      NoGradScope<double> off;
      auto untracked = mul(x, x);
      CHECK(untracked.node_id() == -1);
    }
    g.backward(sum(y));
  }
  CHECK(g.size() == 2);
  for (double v : x.grad()) CHECK(v == 2.0);
}

TEST_CASE("composite loss through matmul, softmax and layer norm") {
  std::mt19937_64 rng(8);
  auto w = rnd({5, 6}, rng);
  for (int trial = 0; trial < kTrials; ++trial) {
    auto x = rnd({4, 5}, rng);
    auto f = [&](const T& v) {
      auto h = layer_norm(softmax_scaled(matmul(v, w), 0.8));
      return contract(h, 9);
    };
    CHECK(grad_check(f, x, kStep) < kTol);
  }
}

TEST_CASE("shared subexpressions sum their path gradients") {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < kTrials; ++trial) {
    auto x = rnd({3, 3}, rng);
    auto f = [](const T& v) {
      auto h = silu(v);
      return contract(add(mul(h, h), matmul(h, transpose(h))), 3);
    };
    CHECK(grad_check(f, x, kStep) < kTol);
  }
}

TEST_CASE("every primitive passes the finite-difference check") {
  std::mt19937_64 rng(12);
  const auto b46 = rnd({4, 6}, rng), b64 = rnd({6, 4}, rng), v6 = rnd({6}, rng),
             w36 = rnd({3, 6}, rng), bias3 = rnd({3}, rng), same = rnd({4, 6}, rng);

  check_unary("matmul lhs", {3, 4}, [&](const T& x) { return matmul(x, b46); });
  check_unary("matmul rhs", {6, 4}, [&](const T& x) { return matmul(b46, x); });
  check_unary("matmul_nt lhs", {3, 6}, [&](const T& x) { return matmul_nt(x, b46); });
  check_unary("matmul_nt rhs", {5, 6}, [&](const T& x) { return matmul_nt(b46, x); });
  check_unary("linear x", {4, 6}, [&](const T& x) { return linear(x, w36, bias3); });
  check_unary("linear w", {3, 6}, [&](const T& w) { return linear(b46, w, bias3); });
  check_unary("linear b", {3}, [&](const T& b) { return linear(b46, w36, b); });
  check_unary("transpose", {3, 5}, [](const T& x) { return transpose(x); });
  check_unary("add", {4, 6}, [&](const T& x) { return add(x, same); });
  check_unary("sub lhs", {4, 6}, [&](const T& x) { return sub(x, same); });
  check_unary("sub rhs", {4, 6}, [&](const T& x) { return sub(same, x); });
  check_unary("mul", {4, 6}, [&](const T& x) { return mul(x, same); });
  check_unary("mul self", {4, 6}, [](const T& x) { return mul(x, x); });
  check_unary("scale", {4, 6}, [](const T& x) { return scale(x, -1.7); });
  check_unary("add_scalar", {4, 6}, [](const T& x) { return add_scalar(x, 0.3); });
  check_unary("add_rowvec x", {4, 6}, [&](const T& x) { return add_rowvec(x, v6); });
  check_unary("add_rowvec v", {6}, [&](const T& v) { return add_rowvec(same, v); });
  check_unary("mul_rowvec x", {4, 6}, [&](const T& x) { return mul_rowvec(x, v6); });
  check_unary("mul_rowvec v", {6}, [&](const T& v) { return mul_rowvec(same, v); });
  check_unary("silu", {4, 6}, [](const T& x) { return silu(x); });
  check_unary("gelu", {4, 6}, [](const T& x) { return gelu(x); });
  check_unary("softmax", {4, 6}, [](const T& x) { return softmax_scaled(x, 0.6); });
  check_unary("layer_norm", {4, 6}, [](const T& x) { return layer_norm(x); });
  check_unary("sum", {4, 6}, [](const T& x) { return scale(sum(mul(x, x)), 0.5); });
  check_unary("mean", {4, 6}, [](const T& x) { return mean(mul(x, x)); });
  check_unary("mean_square", {4, 6}, [](const T& x) { return mean_square(x); });
  check_unary("reshape", {4, 6}, [](const T& x) { return reshape(x, {2, 12}); });
  check_unary("slice_rows", {5, 3}, [](const T& x) { return slice_rows(x, 1, 4); });
  check_unary("slice_rows 3-D", {4, 2, 3}, [](const T& x) { return slice_rows(x, 2, 4); });
  check_unary("slice_cols", {3, 5}, [](const T& x) { return slice_cols(x, 1, 3); });
  check_unary("concat_rows", {2, 6}, [&](const T& x) { return concat_rows<double>({x, same, x}); });
  check_unary("concat_cols", {4, 2}, [&](const T& x) { return concat_cols<double>({x, same, x}); });
  const std::vector<std::int64_t> idx{5, 0, 0, 3, 2, 5, 1, 4};
  check_unary("gather", {2, 3}, [&](const T& x) { return gather<double>(x, idx, {2, 4}); });
  const std::vector<std::int64_t> ids{2, 0, 2, 1};
  check_unary("gather_rows", {3, 4}, [&](const T& x) { return gather_rows<double>(x, ids); });
  const auto cos = T::uniform({3, 2}, rng, -1, 1), sin = T::uniform({3, 2}, rng, -1, 1);
  check_unary("rope", {3, 8}, [&](const T& x) { return rope(x, cos, sin, 2); });
}

TEST_CASE("grad_check contracts") {
  std::mt19937_64 rng(13);
  auto x = rnd({3, 3}, rng);
  auto sq = [](const T& v) { return sum(mul(v, v)); };
  CHECK(grad_check(sq, x, 1e-5) < 1e-8);
  CHECK_THROWS_AS(grad_check(sq, x, 0.0), ContractError);
  auto bad = [](const T& v) { return sum(scale(v, std::numeric_limits<double>::infinity())); };
  CHECK_THROWS_AS(grad_check(bad, x, 1e-5), NumericError);
}

TEST_CASE("layout helpers reject bad arguments") {
  std::mt19937_64 rng(14);
  auto x = rnd({3, 4}, rng);
  CHECK_THROWS_AS(slice_rows(x, 2, 5), DimensionError);
  CHECK_THROWS_AS(concat_rows<double>({x, rnd({3, 5}, rng)}), DimensionError);
  const std::vector<std::int64_t> bad{7};
  CHECK_THROWS_AS(gather_rows<double>(x, bad), ContractError);
  CHECK_THROWS_AS(reshape(x, {5, 2}), DimensionError);
}
