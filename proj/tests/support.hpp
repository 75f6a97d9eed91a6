#pragma once

#include <cstdint>
#include <functional>
#include <random>

#include "deq/function.hpp"
#include "deq/tensor.hpp"

namespace deq::testing {

inline Tensor random_tensor(const Shape& shape, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-scale, scale);
  Tensor t(shape);
  for (double& v : t.data()) v = u(rng);
  return t;
}

inline ParamSet random_params(const DifferentiableFn& f, std::uint64_t seed, double scale) {
  ParamSet p;
  for (const ParamInfo& info : f.param_layout()) p.add(info.name, random_tensor(info.shape, seed++, scale));
  return p;
}

/// Central difference of a scalar function along every coordinate of `at`.
inline Tensor numeric_gradient(const std::function<double(const Tensor&)>& fn, const Tensor& at,
                               double h = 1e-6) {
  Tensor g(at.shape());
  Tensor probe = at;
  for (std::size_t i = 0; i < at.size(); ++i) {
    const double keep = probe[i];
    probe[i] = keep + h;
    const double up = fn(probe);
    probe[i] = keep - h;
    const double down = fn(probe);
    probe[i] = keep;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

}  // namespace deq::testing
