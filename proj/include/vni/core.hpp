#pragma once

#include "vni/common.hpp"

#include <cstdint>

namespace vni {

using Vec3 = Eigen::Vector3d;

/// Row-major list of 3D points. Points act as row vectors: a rotation R is
/// applied on the right, x' = x * R.
struct PointCloud {
  Eigen::Matrix<double, Eigen::Dynamic, 3> pts;

  Index size() const { return pts.rows(); }
  Vec3 point(Index i) const { return pts.row(i).transpose(); }
};

struct Rotation {
  Eigen::Matrix3d m = Eigen::Matrix3d::Identity();

  Rotation transposed() const { return Rotation{m.transpose()}; }
};

/// m * m^T = I and det(m) = +1, both within tol.
bool is_rotation(const Rotation& r, double tol = 1e-12);

enum class RotationMode { kZAxis, kSo3 };

/// Exact k-nearest-neighbor graph. neighbors(i, :) holds the k indices in
/// ascending distance from point i (ties broken by ascending index, i itself
/// excluded); centroids.row(i) is the mean of those k neighbor points.
struct KnnGraph {
  int k = 0;
  Eigen::MatrixXi neighbors;                          // N x k
  Eigen::Matrix<double, Eigen::Dynamic, 3> centroids;  // N x 3

  /// Degenerate graph where every point is its own single neighbor; used by
  /// the no-neighborhood ablation of the invariant layer.
  static KnnGraph self_graph(Index n);
};

Vec3 cross3(const Vec3& a, const Vec3& b);

/// Brute-force exact kNN. Throws std::invalid_argument when k >= N or k < 1.
KnnGraph knn(const PointCloud& cloud, int k);

/// Deterministic in the seed. kZAxis draws a yaw angle uniform in [0, 2pi);
/// kSo3 draws a Haar-uniform rotation via a normalized Gaussian quaternion.
Rotation sample_rotation(std::uint64_t seed, RotationMode mode);

PointCloud apply_rotation(const PointCloud& cloud, const Rotation& r);

/// Subtracts the centroid, then scales uniformly so every coordinate lies in
/// [-1, 1]. A cloud of identical points maps to all zeros.
PointCloud normalize_cloud(const PointCloud& cloud);

}  // namespace vni
