#pragma once

// Shared helpers for the test binaries: randomized tensors with controlled
// scale and a gap-guaranteed variant for max-pool gradient checks.

#include "gridsight/rng.hpp"
#include "gridsight/tensor.hpp"

namespace gridsight::testutil {

template <typename T>
Tensor<T> random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  auto t = Tensor<T>::zeros(std::move(shape));
  for (T& v : t.data()) v = T(rng.uniform(lo, hi));
  return t;
}

// Random values with pairwise gaps well above 2h, so a +-h probe cannot flip
// a max-pool argmax.
template <typename T>
Tensor<T> random_tensor_gapped(Rng& rng, Shape shape, double gap = 1e-3) {
  auto t = Tensor<T>::zeros(std::move(shape));
  auto d = t.data();
  for (size_t i = 0; i < d.size(); ++i)
    d[i] = T(rng.uniform(-1.0, 1.0) + double(i) * gap * 7.0);
  // shuffle positions so the ramp carries no spatial structure
  for (size_t i = d.size(); i > 1; --i) {
    size_t j = size_t(rng.bits() % i);
    std::swap(d[i - 1], d[j]);
  }
  return t;
}

}  // namespace gridsight::testutil
