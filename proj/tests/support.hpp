#pragma once

#include <doctest.h>

#include "perldiff/autograd.hpp"
#include "perldiff/params.hpp"
#include "perldiff/rng.hpp"

namespace perldiff::test {

inline Tensor random_tensor(Dims dims, CounterRng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(dims));
  for (double& v : t.storage()) v = rng.uniform(lo, hi);
  return t;
}

inline void require_finite(const Tensor& t) { REQUIRE(t.all_finite()); }

}  // namespace perldiff::test
