#pragma once

#include <random>
#include <vector>

#include "hsa_lab/numerics/ops.hpp"

namespace hsa_lab::testing {

template <class T>
Tensor<T> random_tensor(std::mt19937_64& rng, Shape shape, bool requires_grad = true, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  std::vector<T> data(numel(shape));
  for (auto& x : data) x = static_cast<T>(nd(rng));
  return Tensor<T>::from(std::move(shape), std::move(data), requires_grad);
}

/// Projects an output onto fixed random weights so every element matters.
template <class T>
Tensor<T> probe_loss(const Tensor<T>& out, const Tensor<T>& weights) {
  return sum(mul(out, weights));
}

inline std::vector<double> to_vec(std::span<const double> s) { return {s.begin(), s.end()}; }

}  // namespace hsa_lab::testing
