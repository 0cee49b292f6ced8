#pragma once

#include <random>

#include "remotenet/tensor.hpp"

namespace testing_util {

template <typename T>
remotenet::Tensor<T> random_tensor(remotenet::Shape shape, unsigned seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  remotenet::Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(u(rng));
  return t;
}

template <typename T>
double max_diff(const remotenet::Tensor<T>& a, const remotenet::Tensor<T>& b) {
  double m = 0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

}  // namespace testing_util
