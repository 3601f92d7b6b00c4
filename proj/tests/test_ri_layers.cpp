#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "test_util.hpp"
#include "vni/ri_layers.hpp"

using namespace vni;

TEST_CASE("euclidean_distance basics") {
  Rng rng(1);
  const VecFeat<double> f = random_feat<double>(rng, 6, 3);
  CHECK(euclidean_distance(f, f).cwiseAbs().maxCoeff() == 0.0);

  VecFeat<double> a(1, 1), b(1, 1);
  a.at(0, 0, 0) = 1.0;
  CHECK(euclidean_distance(a, b)(0, 0) == 1.0);

  VecFeat<double> wrong(2, 3);
  CHECK_THROWS_AS(euclidean_distance(f, wrong), std::invalid_argument);
}

TEST_CASE("euclidean_distance isometry under rotation") {
  Rng rng(2);
  for (int t = 0; t < 100; ++t) {
    const VecFeat<double> f1 = random_feat<double>(rng, 5, 4);
    const VecFeat<double> f2 = random_feat<double>(rng, 5, 4);
    const Rotation r = sample_rotation(t, RotationMode::kSo3);
    const Mat<double> base = euclidean_distance(f1, f2);
    const Mat<double> rot = euclidean_distance(rotated(f1, r), rotated(f2, r));
    CHECK((base - rot).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("cosine_distance canonical angles") {
  VecFeat<double> f3(1, 3), fo(1, 1);
  fo.at(0, 0, 0) = 2.0;                       // orientation along +x
  f3.at(0, 0, 0) = 0.5;                       // parallel
  f3.at(0, 1, 0) = -3.0;                      // antiparallel
  f3.at(0, 2, 1) = 1.0;                       // orthogonal
  const Mat<double> d = cosine_distance(f3, fo);
  CHECK(d(0, 0) == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(d(0, 1) == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(d(0, 2) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("cosine_distance zero-norm convention") {
  VecFeat<double> f3(1, 2), fo(1, 1);
  f3.at(0, 0, 0) = 1.0;  // channel 1 left at zero
  fo.at(0, 0, 1) = 1.0;
  const Mat<double> d = cosine_distance(f3, fo);
  CHECK(d(0, 1) == 1.0);  // zero feature vector
  VecFeat<double> fo_zero(1, 1);
  CHECK(cosine_distance(f3, fo_zero)(0, 0) == 1.0);  // zero orientation
}

TEST_CASE("ri_neighborhood singleton graph matches the pointwise distances") {
  Rng rng(3);
  const Index n = 8, c = 5;
  const VecFeat<double> f1 = random_feat<double>(rng, n, c);
  const VecFeat<double> f2 = random_feat<double>(rng, n, c);
  const VecFeat<double> f3 = random_feat<double>(rng, n, c);
  const VecFeat<double> fo = random_feat<double>(rng, n, 1);
  const KnnGraph self = KnnGraph::self_graph(n);
  const Mat<double> out = ri_neighborhood(f1, f2, f3, fo, self);
  const Mat<double> euc = euclidean_distance(f1, f2);
  const Mat<double> cos = cosine_distance(f3, fo);
  CHECK((out.leftCols(c) - euc).cwiseAbs().maxCoeff() == 0.0);
  CHECK((out.rightCols(c) - cos).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("ri_neighborhood k=2 enumeration oracle") {
  // two points, each the other's neighborhood plus itself via a hand graph
  const Index n = 3, c = 2;
  Rng rng(4);
  const VecFeat<double> f1 = random_feat<double>(rng, n, c);
  const VecFeat<double> f2 = random_feat<double>(rng, n, c);
  const VecFeat<double> f3 = random_feat<double>(rng, n, c);
  const VecFeat<double> fo = random_feat<double>(rng, n, 1);
  KnnGraph g;
  g.k = 2;
  g.neighbors.resize(n, 2);
  g.neighbors << 1, 2, 0, 2, 0, 1;
  g.centroids.setZero(n, 3);

  const Mat<double> out = ri_neighborhood(f1, f2, f3, fo, g);

  // explicit enumeration over the two neighbors, column-wise max
  for (Index i = 0; i < n; ++i) {
    for (Index ch = 0; ch < c; ++ch) {
      double best_euc = -1, best_cos = -1;
      for (int jj = 0; jj < 2; ++jj) {
        const Index j = g.neighbors(i, jj);
        double e = 0;
        for (int d = 0; d < 3; ++d) {
          const double diff = f1.at(i, ch, d) - f2.at(j, ch, d);
          e += diff * diff;
        }
        best_euc = std::max(best_euc, std::sqrt(e));
        double dot = 0, na = 0, nb = 0;
        for (int d = 0; d < 3; ++d) {
          dot += f3.at(j, ch, d) * fo.at(i, 0, d);
          na += f3.at(j, ch, d) * f3.at(j, ch, d);
          nb += fo.at(i, 0, d) * fo.at(i, 0, d);
        }
        best_cos = std::max(best_cos, 1.0 - dot / std::sqrt(na * nb));
      }
      CHECK(out(i, ch) == doctest::Approx(best_euc).epsilon(1e-14));
      CHECK(out(i, c + ch) == doctest::Approx(best_cos).epsilon(1e-14));
    }
  }
}

TEST_CASE("ri_neighborhood full invariance") {
  Rng rng(5);
  const Index n = 20, c = 4;
  const PointCloud cloud = test::random_cloud(rng, n);
  const VecFeat<double> f1 = random_feat<double>(rng, n, c);
  const VecFeat<double> f2 = random_feat<double>(rng, n, c);
  const VecFeat<double> f3 = random_feat<double>(rng, n, c);
  const VecFeat<double> fo = random_feat<double>(rng, n, 1);
  const Mat<double> base = ri_neighborhood(f1, f2, f3, fo, knn(cloud, 5));
  for (int t = 0; t < 100; ++t) {
    const Rotation r = sample_rotation(900 + t, RotationMode::kSo3);
    const Mat<double> rot =
        ri_neighborhood(rotated(f1, r), rotated(f2, r), rotated(f3, r), rotated(fo, r),
                        knn(apply_rotation(cloud, r), 5));
    CHECK((rot - base).norm() / (base.norm() + 1e-30) < 1e-10);
  }
}

TEST_CASE("ri_neighborhood ranges") {
  Rng rng(6);
  const Index n = 15, c = 6;
  const PointCloud cloud = test::random_cloud(rng, n);
  const Mat<double> out =
      ri_neighborhood(random_feat<double>(rng, n, c), random_feat<double>(rng, n, c),
                      random_feat<double>(rng, n, c), random_feat<double>(rng, n, 1),
                      knn(cloud, 4));
  CHECK(out.leftCols(c).minCoeff() >= 0.0);
  CHECK(out.rightCols(c).minCoeff() >= 0.0);
  CHECK(out.rightCols(c).maxCoeff() <= 2.0);
}

TEST_CASE("ri_neighborhood aggregation is monotone in the neighborhood") {
  Rng rng(7);
  const Index n = 12, c = 3;
  const VecFeat<double> f1 = random_feat<double>(rng, n, c);
  const VecFeat<double> f2 = random_feat<double>(rng, n, c);
  const VecFeat<double> f3 = random_feat<double>(rng, n, c);
  const VecFeat<double> fo = random_feat<double>(rng, n, 1);
  const PointCloud cloud = test::random_cloud(rng, n);
  const KnnGraph small = knn(cloud, 3);
  const KnnGraph big = knn(cloud, 5);  // supersets of the k=3 lists
  const Mat<double> a = ri_neighborhood(f1, f2, f3, fo, small);
  const Mat<double> b = ri_neighborhood(f1, f2, f3, fo, big);
  CHECK(((b - a).array() >= -1e-15).all());
}

TEST_CASE("ri_neighborhood swapped pairing stays invariant") {
  Rng rng(8);
  const Index n = 10, c = 3;
  const PointCloud cloud = test::random_cloud(rng, n);
  const VecFeat<double> f1 = random_feat<double>(rng, n, c);
  const VecFeat<double> f2 = random_feat<double>(rng, n, c);
  const VecFeat<double> f3 = random_feat<double>(rng, n, c);
  const VecFeat<double> fo = random_feat<double>(rng, n, 1);
  RiOptions opt;
  opt.swap_pair = true;
  const Mat<double> base = ri_neighborhood(f1, f2, f3, fo, knn(cloud, 4), opt);
  const Rotation r = sample_rotation(31, RotationMode::kSo3);
  const Mat<double> rot =
      ri_neighborhood(rotated(f1, r), rotated(f2, r), rotated(f3, r), rotated(fo, r),
                      knn(apply_rotation(cloud, r), 4), opt);
  CHECK((rot - base).norm() / base.norm() < 1e-10);
}
