#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "test_util.hpp"
#include "vni/core.hpp"

#include <algorithm>
#include <numeric>

using namespace vni;

namespace {

// Independent kNN oracle: stable sort of all other indices by (distance, index).
std::vector<int> knn_oracle(const PointCloud& cloud, Index i, int k) {
  std::vector<int> idx;
  for (Index j = 0; j < cloud.size(); ++j)
    if (j != i) idx.push_back(static_cast<int>(j));
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    const double da = (cloud.pts.row(a) - cloud.pts.row(i)).squaredNorm();
    const double db = (cloud.pts.row(b) - cloud.pts.row(i)).squaredNorm();
    if (da != db) return da < db;
    return a < b;
  });
  idx.resize(k);
  return idx;
}

Eigen::MatrixXd pairwise_distances(const PointCloud& c) {
  const Index n = c.size();
  Eigen::MatrixXd d(n, n);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j) d(i, j) = (c.pts.row(i) - c.pts.row(j)).norm();
  return d;
}

}  // namespace

TEST_CASE("cross3 canonical values") {
  CHECK(cross3({1, 0, 0}, {0, 1, 0}) == Vec3(0, 0, 1));
  // fused multiply-add contraction leaves ~1 ulp on the parallel case
  const Vec3 a(0.3, -1.2, 2.5);
  CHECK(cross3(a, a).norm() < 1e-15);
}

TEST_CASE("cross3 commutes with rotation") {
  Rng rng(42);
  std::uniform_real_distribution<double> dist(-2.0, 2.0);
  for (int t = 0; t < 100; ++t) {
    const Vec3 a(dist(rng), dist(rng), dist(rng));
    const Vec3 b(dist(rng), dist(rng), dist(rng));
    const Rotation r = sample_rotation(1000 + t, RotationMode::kSo3);
    // row-vector convention: a' = a R  <=>  column a' = R^T a
    const Vec3 lhs = cross3(r.m.transpose() * a, r.m.transpose() * b);
    const Vec3 rhs = r.m.transpose() * cross3(a, b);
    CHECK((lhs - rhs).norm() < 1e-12);
  }
}

TEST_CASE("knn collinear hand case") {
  PointCloud c;
  c.pts.resize(3, 3);
  c.pts << 0, 0, 0, 1, 0, 0, 3, 0, 0;
  const KnnGraph g = knn(c, 1);
  CHECK(g.neighbors(0, 0) == 1);
  CHECK(g.neighbors(1, 0) == 0);
  CHECK(g.neighbors(2, 0) == 1);
}

TEST_CASE("knn two point cloud") {
  PointCloud c;
  c.pts.resize(2, 3);
  c.pts << 0, 0, 0, 0.5, 0.25, -0.5;
  const KnnGraph g = knn(c, 1);
  CHECK(g.neighbors(0, 0) == 1);
  CHECK(g.neighbors(1, 0) == 0);
  CHECK((g.centroids.row(0) - c.pts.row(1)).norm() == 0.0);
  CHECK((g.centroids.row(1) - c.pts.row(0)).norm() == 0.0);
}

TEST_CASE("knn matches the stable-sort oracle") {
  Rng rng(7);
  const PointCloud c = test::random_cloud(rng, 60);
  const KnnGraph g = knn(c, 5);
  for (Index i = 0; i < c.size(); ++i) {
    const auto want = knn_oracle(c, i, 5);
    for (int jj = 0; jj < 5; ++jj) CHECK(g.neighbors(i, jj) == want[jj]);
  }
}

TEST_CASE("knn neighbor distances are non-decreasing and centroids are means") {
  Rng rng(8);
  const PointCloud c = test::random_cloud(rng, 40);
  const KnnGraph g = knn(c, 7);
  for (Index i = 0; i < c.size(); ++i) {
    double prev = -1.0;
    Eigen::RowVector3d mean = Eigen::RowVector3d::Zero();
    for (int jj = 0; jj < g.k; ++jj) {
      const double d = (c.pts.row(g.neighbors(i, jj)) - c.pts.row(i)).norm();
      CHECK(d >= prev);
      prev = d;
      CHECK(g.neighbors(i, jj) != static_cast<int>(i));
      mean += c.pts.row(g.neighbors(i, jj));
    }
    CHECK((g.centroids.row(i) - mean / g.k).norm() < 1e-14);
  }
}

TEST_CASE("knn index lists survive rotation in generic position") {
  Rng rng(9);
  const PointCloud c = test::random_cloud(rng, 50);
  const KnnGraph g = knn(c, 6);
  for (int t = 0; t < 10; ++t) {
    const KnnGraph gr = knn(apply_rotation(c, sample_rotation(t, RotationMode::kSo3)), 6);
    CHECK(g.neighbors == gr.neighbors);
  }
}

TEST_CASE("knn rejects k >= N") {
  Rng rng(10);
  const PointCloud c = test::random_cloud(rng, 4);
  CHECK_THROWS_AS(knn(c, 4), std::invalid_argument);
  CHECK_THROWS_AS(knn(c, 0), std::invalid_argument);
}

TEST_CASE("sample_rotation group membership") {
  for (int seed = 0; seed < 50; ++seed) {
    CHECK(is_rotation(sample_rotation(seed, RotationMode::kSo3)));
    CHECK(is_rotation(sample_rotation(seed, RotationMode::kZAxis)));
  }
}

TEST_CASE("sample_rotation z-axis fixes the third axis") {
  for (int seed = 0; seed < 20; ++seed) {
    const Rotation r = sample_rotation(seed, RotationMode::kZAxis);
    CHECK(std::abs(r.m(2, 2) - 1.0) < 1e-15);
    CHECK(std::abs(r.m(0, 2)) < 1e-15);
    CHECK(std::abs(r.m(1, 2)) < 1e-15);
    CHECK(std::abs(r.m(2, 0)) < 1e-15);
    CHECK(std::abs(r.m(2, 1)) < 1e-15);
  }
}

TEST_CASE("sample_rotation so3 Monte-Carlo uniformity") {
  Vec3 mean = Vec3::Zero();
  const Vec3 e1(1, 0, 0);
  for (int seed = 0; seed < 10000; ++seed) {
    mean += sample_rotation(seed, RotationMode::kSo3).m.transpose() * e1;
  }
  CHECK((mean / 10000.0).norm() < 0.05);
}

TEST_CASE("sample_rotation is a pure function of the seed") {
  const Rotation a = sample_rotation(123456, RotationMode::kSo3);
  const Rotation b = sample_rotation(123456, RotationMode::kSo3);
  CHECK(a.m == b.m);
}

TEST_CASE("apply_rotation identity and inverse") {
  Rng rng(11);
  const PointCloud c = test::random_cloud(rng, 30);
  CHECK((apply_rotation(c, Rotation{}).pts - c.pts).norm() == 0.0);
  const Rotation r = sample_rotation(3, RotationMode::kSo3);
  const PointCloud back = apply_rotation(apply_rotation(c, r), r.transposed());
  CHECK((back.pts - c.pts).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("apply_rotation preserves the pairwise distance matrix") {
  Rng rng(12);
  const PointCloud c = test::random_cloud(rng, 25);
  const Eigen::MatrixXd base = pairwise_distances(c);
  for (int t = 0; t < 5; ++t) {
    const PointCloud cr = apply_rotation(c, sample_rotation(50 + t, RotationMode::kSo3));
    CHECK((pairwise_distances(cr) - base).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("normalize_cloud hand case") {
  PointCloud c;
  c.pts.resize(2, 3);
  c.pts << 0, 0, 0, 2, 0, 0;
  const PointCloud n = normalize_cloud(c);
  CHECK(n.pts(0, 0) == -1.0);
  CHECK(n.pts(1, 0) == 1.0);
  CHECK(n.pts.col(1).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("normalize_cloud keeps an already-normalized symmetric cloud") {
  PointCloud c;
  c.pts.resize(2, 3);
  c.pts << -1, 0.5, 0, 1, -0.5, 0;
  const PointCloud n = normalize_cloud(c);
  CHECK((n.pts - c.pts).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("normalize_cloud degenerate cases") {
  PointCloud single;
  single.pts.resize(1, 3);
  single.pts << 4.0, -2.0, 7.0;
  CHECK(normalize_cloud(single).pts.cwiseAbs().maxCoeff() == 0.0);

  PointCloud same;
  same.pts.resize(3, 3);
  same.pts << 1, 1, 1, 1, 1, 1, 1, 1, 1;
  CHECK(normalize_cloud(same).pts.cwiseAbs().maxCoeff() == 0.0);

  Rng rng(13);
  const PointCloud c = test::random_cloud(rng, 20, -40.0, 40.0);
  const PointCloud n = normalize_cloud(c);
  CHECK(n.pts.cwiseAbs().maxCoeff() <= 1.0);
}
