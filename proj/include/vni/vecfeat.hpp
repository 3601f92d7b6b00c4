#pragma once

#include "vni/common.hpp"
#include "vni/core.hpp"

namespace vni {

/// N points with c vector-valued channels. Stored as one N x 3c matrix whose
/// column blocks hold the x, y and z components: data = [X | Y | Z], each
/// block N x c. Row i is therefore a flat 3c-dim view of point i's feature.
template <typename S>
struct VecFeat {
  Index n = 0;
  Index c = 0;
  Mat<S> data;

  VecFeat() = default;
  VecFeat(Index n_, Index c_) : n(n_), c(c_) { data.setZero(n, 3 * c); }

  auto comp(int d) { return data.middleCols(d * c, c); }
  auto comp(int d) const { return data.middleCols(d * c, c); }

  static VecFeat zeros(Index n, Index c) { return VecFeat(n, c); }

  /// Component d of the vector at (point, channel).
  S at(Index point, Index channel, int d) const { return data(point, d * c + channel); }
  S& at(Index point, Index channel, int d) { return data(point, d * c + channel); }

  S norm() const { return data.norm(); }
};

template <typename S>
VecFeat<S> from_cloud(const PointCloud& cloud) {
  VecFeat<S> f(cloud.size(), 1);
  for (int d = 0; d < 3; ++d) f.data.col(d) = cloud.pts.col(d).template cast<S>();
  return f;
}

/// Applies v' = v * R to every per-channel vector.
template <typename S>
VecFeat<S> rotated(const VecFeat<S>& f, const Rotation& r) {
  const Eigen::Matrix3d& m = r.m;
  VecFeat<S> out(f.n, f.c);
  for (int d = 0; d < 3; ++d) {
    out.comp(d) = f.comp(0) * static_cast<S>(m(0, d)) + f.comp(1) * static_cast<S>(m(1, d)) +
                  f.comp(2) * static_cast<S>(m(2, d));
  }
  return out;
}

template <typename S>
VecFeat<S> permuted(const VecFeat<S>& f, const std::vector<Index>& perm) {
  VecFeat<S> out(f.n, f.c);
  for (Index i = 0; i < f.n; ++i) out.data.row(i) = f.data.row(perm[i]);
  return out;
}

/// Channel-wise vector norms, an N x c matrix.
template <typename S>
Mat<S> channel_norms(const VecFeat<S>& f) {
  return (f.comp(0).array().square() + f.comp(1).array().square() + f.comp(2).array().square())
      .sqrt()
      .matrix();
}

/// Channel-wise dot products <a, b>, an N x c matrix.
template <typename S>
Mat<S> channel_dots(const VecFeat<S>& a, const VecFeat<S>& b) {
  return (a.comp(0).array() * b.comp(0).array() + a.comp(1).array() * b.comp(1).array() +
          a.comp(2).array() * b.comp(2).array())
      .matrix();
}

template <typename S>
VecFeat<S> random_feat(Rng& rng, Index n, Index c, S lo = S(-1), S hi = S(1)) {
  std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
  VecFeat<S> f(n, c);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < 3 * c; ++j) f.data(i, j) = static_cast<S>(dist(rng));
  return f;
}

}  // namespace vni
