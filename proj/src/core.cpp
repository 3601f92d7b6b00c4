#include "vni/core.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

namespace vni {

bool is_rotation(const Rotation& r, double tol) {
  const Eigen::Matrix3d gram = r.m * r.m.transpose();
  const double ortho_err = (gram - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
  return ortho_err <= tol && std::abs(r.m.determinant() - 1.0) <= tol;
}

KnnGraph KnnGraph::self_graph(Index n) {
  KnnGraph g;
  g.k = 1;
  g.neighbors.resize(n, 1);
  for (Index i = 0; i < n; ++i) g.neighbors(i, 0) = static_cast<int>(i);
  g.centroids.setZero(n, 3);
  return g;
}

Vec3 cross3(const Vec3& a, const Vec3& b) {
  return Vec3(a.y() * b.z() - a.z() * b.y(),
              a.z() * b.x() - a.x() * b.z(),
              a.x() * b.y() - a.y() * b.x());
}

KnnGraph knn(const PointCloud& cloud, int k) {
  const Index n = cloud.size();
  if (k < 1 || k >= n) {
    throw std::invalid_argument("knn: k must satisfy 1 <= k < N, got k=" + std::to_string(k) +
                                " with N=" + std::to_string(n));
  }

  KnnGraph graph;
  graph.k = k;
  graph.neighbors.resize(n, k);
  graph.centroids.resize(n, 3);

  std::vector<std::pair<double, int>> cand;
  cand.reserve(static_cast<std::size_t>(n) - 1);
  for (Index i = 0; i < n; ++i) {
    cand.clear();
    for (Index j = 0; j < n; ++j) {
      if (j == i) continue;
      const double d2 = (cloud.pts.row(j) - cloud.pts.row(i)).squaredNorm();
      cand.emplace_back(d2, static_cast<int>(j));
    }
    // (distance, index) pairs: equal distances resolve to the lower index.
    std::partial_sort(cand.begin(), cand.begin() + k, cand.end());
    Eigen::RowVector3d centroid = Eigen::RowVector3d::Zero();
    for (int jj = 0; jj < k; ++jj) {
      graph.neighbors(i, jj) = cand[jj].second;
      centroid += cloud.pts.row(cand[jj].second);
    }
    graph.centroids.row(i) = centroid / k;
  }
  return graph;
}

Rotation sample_rotation(std::uint64_t seed, RotationMode mode) {
  Rng rng(seed);
  Rotation r;
  if (mode == RotationMode::kZAxis) {
    std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
    const double t = angle(rng);
    const double c = std::cos(t), s = std::sin(t);
    r.m << c, s, 0.0, -s, c, 0.0, 0.0, 0.0, 1.0;
  } else {
    std::normal_distribution<double> gauss(0.0, 1.0);
    Eigen::Vector4d q;
    do {
      q << gauss(rng), gauss(rng), gauss(rng), gauss(rng);
    } while (q.norm() < 1e-12);
    q.normalize();
    const double w = q(0), x = q(1), y = q(2), z = q(3);
    r.m << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  }
  return r;
}

PointCloud apply_rotation(const PointCloud& cloud, const Rotation& r) {
  PointCloud out;
  out.pts = cloud.pts * r.m;
  return out;
}

PointCloud normalize_cloud(const PointCloud& cloud) {
  if (cloud.size() < 1) throw std::invalid_argument("normalize_cloud: empty cloud");
  PointCloud out;
  const Eigen::RowVector3d centroid = cloud.pts.colwise().mean();
  out.pts = cloud.pts.rowwise() - centroid;
  const double scale = out.pts.cwiseAbs().maxCoeff();
  if (scale > 0.0) {
    out.pts /= scale;
  } else {
    out.pts.setZero();
  }
  return out;
}

}  // namespace vni
