#pragma once

#include "vni/core.hpp"
#include "vni/vecfeat.hpp"

#include <random>
#include <vector>

namespace vni::test {

inline PointCloud random_cloud(Rng& rng, Index n, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  PointCloud c;
  c.pts.resize(n, 3);
  for (Index i = 0; i < n; ++i)
    for (int d = 0; d < 3; ++d) c.pts(i, d) = dist(rng);
  return c;
}

template <typename S>
S rel_err(const Mat<S>& got, const Mat<S>& want) {
  return (got - want).norm() / (want.norm() + S(1e-30));
}

template <typename S>
S rel_err(const VecFeat<S>& got, const VecFeat<S>& want) {
  return (got.data - want.data).norm() / (want.data.norm() + S(1e-30));
}

}  // namespace vni::test
