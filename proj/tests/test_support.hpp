#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "unicombine/tensor.hpp"

namespace testing {

using unicombine::Graph;
using unicombine::GraphScope;
using unicombine::NoGradScope;
using unicombine::Tensor;

// Fixed random projection that turns any tensor into a scalar.
inline Tensor<double> contract(const Tensor<double>& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto w = Tensor<double>::randn(y.shape(), rng);
  return unicombine::sum(unicombine::mul(y, w));
}

// Central-difference check of d(loss)/d(param) for a parameter that already
// tracks gradients, on up to `coords` evenly spread coordinates.
inline double param_grad_check(const std::function<Tensor<double>()>& loss_fn,
                               Tensor<double> param, double step, std::size_t coords) {
  param.zero_grad();
  {
    Graph<double> g;
    GraphScope<double> s(g);
    auto loss = loss_fn();
    g.backward(loss);
  }
  std::vector<double> analytic(param.grad().begin(), param.grad().end());
  param.zero_grad();
  NoGradScope<double> off;
  const std::size_t n = param.values().size();
  const std::size_t stride = std::max<std::size_t>(1, n / coords);
  std::vector<double> num, ana;
  for (std::size_t i = 0; i < n; i += stride) {
    const double orig = param.values()[i];
    param.values()[i] = orig + step;
    const double up = loss_fn().item();
    param.values()[i] = orig - step;
    const double down = loss_fn().item();
    param.values()[i] = orig;
    num.push_back((up - down) / (2 * step));
    ana.push_back(analytic[i]);
  }
  double gmax = 0;
  for (double v : num) gmax = std::max(gmax, std::abs(v));
  const double floor = std::max(1e-2 * gmax, 1e-12);
  double worst = 0;
  for (std::size_t i = 0; i < num.size(); ++i)
    worst = std::max(worst, std::abs(num[i] - ana[i]) /
                                std::max({std::abs(num[i]), std::abs(ana[i]), floor}));
  return worst;
}

}  // namespace testing
