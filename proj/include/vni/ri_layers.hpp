#pragma once

#include "vni/vn_layers.hpp"

namespace vni {

// Norms below this are treated as zero when forming cosine distances; the
// undefined angle maps to distance 1.
inline constexpr double kCosEps = 1e-12;

/// |f1[i1] - f2[i2]| for one channel. Shared by the pointwise op and the
/// neighborhood aggregation so the two paths agree bitwise.
template <typename S>
S pair_euclidean(const VecFeat<S>& f1, Index i1, const VecFeat<S>& f2, Index i2, Index ch) {
  S s = S(0);
  for (int d = 0; d < 3; ++d) {
    const S diff = f1.at(i1, ch, d) - f2.at(i2, ch, d);
    s += diff * diff;
  }
  return std::sqrt(s);
}

/// 1 - cos(f3[i3] channel ch, fo[io]); a zero-length side yields 1.
template <typename S>
S pair_cosine(const VecFeat<S>& f3, Index i3, const VecFeat<S>& fo, Index io, Index ch) {
  const S eps = static_cast<S>(kCosEps);
  S dot = S(0), na2 = S(0), nb2 = S(0);
  for (int d = 0; d < 3; ++d) {
    const S a = f3.at(i3, ch, d);
    const S b = fo.at(io, 0, d);
    dot += a * b;
    na2 += a * a;
    nb2 += b * b;
  }
  const S na = std::sqrt(na2);
  const S nb = std::sqrt(nb2);
  if (na < eps || nb < eps) return S(1);
  return S(1) - std::clamp(dot / (na * nb), S(-1), S(1));
}

/// Per point and channel: |f1 - f2| over the 3-dim, an N x C matrix.
template <typename S>
Mat<S> euclidean_distance(const VecFeat<S>& f1, const VecFeat<S>& f2) {
  if (f1.n != f2.n || f1.c != f2.c) {
    throw std::invalid_argument("euclidean_distance: shape mismatch");
  }
  Mat<S> out(f1.n, f1.c);
  for (Index i = 0; i < f1.n; ++i)
    for (Index c = 0; c < f1.c; ++c) out(i, c) = pair_euclidean(f1, i, f2, i, c);
  return out;
}

/// Per point and channel: 1 - cos(f3_c, f_o). Either vector below kCosEps in
/// norm yields distance 1.
template <typename S>
Mat<S> cosine_distance(const VecFeat<S>& f3, const VecFeat<S>& fo) {
  if (f3.n != fo.n || fo.c != 1) {
    throw std::invalid_argument("cosine_distance: orientation must be N x 1 over the same points");
  }
  Mat<S> out(f3.n, f3.c);
  for (Index i = 0; i < f3.n; ++i)
    for (Index c = 0; c < f3.c; ++c) out(i, c) = pair_cosine(f3, i, fo, i, c);
  return out;
}

struct RiOptions {
  bool use_d_euc = true;
  bool use_d_cos = true;
  // Swaps which of (center, neighbor) provides each side of both distances.
  bool swap_pair = false;
};

struct RiCache {
  Eigen::MatrixXi argmax;  // n x out_cols, winning neighbor slot per column
};

/// Neighborhood rotation-invariant features: for each point i and neighbor
/// j in the graph, the Euclidean distance pairs f1 at the center with f2 at
/// the neighbor, and the cosine distance pairs the neighbor's f3 channels
/// with the center's orientation. Each output column independently keeps its
/// maximum over the neighborhood. Output is N x (2C | C) with d_euc columns
/// first.
template <typename S>
Mat<S> ri_neighborhood(const VecFeat<S>& f1, const VecFeat<S>& f2, const VecFeat<S>& f3,
                       const VecFeat<S>& fo, const KnnGraph& graph,
                       const RiOptions& opt = RiOptions{}, RiCache* cache = nullptr,
                       Mat<S>* runner_up = nullptr) {
  const Index n = f1.n, c = f1.c;
  if (f2.n != n || f3.n != n || fo.n != n || f2.c != c || f3.c != c || fo.c != 1) {
    throw std::invalid_argument("ri_neighborhood: inconsistent feature shapes");
  }
  if (graph.neighbors.rows() != n) {
    throw std::invalid_argument("ri_neighborhood: graph does not match feature point count");
  }
  if (!opt.use_d_euc && !opt.use_d_cos) {
    throw std::invalid_argument("ri_neighborhood: at least one distance must be enabled");
  }
  const int k = graph.k;
  const Index cols = (opt.use_d_euc ? c : 0) + (opt.use_d_cos ? c : 0);

  Mat<S> out(n, cols);
  if (cache) cache->argmax.resize(n, cols);
  if (runner_up) runner_up->setConstant(n, cols, -std::numeric_limits<S>::max());

  for (Index i = 0; i < n; ++i) {
    for (Index ch = 0; ch < c; ++ch) {
      if (opt.use_d_euc) {
        S best = S(0), second = -std::numeric_limits<S>::max();
        int best_j = 0;
        for (int jj = 0; jj < k; ++jj) {
          const Index j = graph.neighbors(i, jj);
          const S s = opt.swap_pair ? pair_euclidean(f1, j, f2, i, ch)
                                    : pair_euclidean(f1, i, f2, j, ch);
          if (jj == 0 || s > best) {
            second = jj == 0 ? second : best;
            best = s;
            best_j = jj;
          } else if (s > second) {
            second = s;
          }
        }
        out(i, ch) = best;
        if (cache) cache->argmax(i, ch) = best_j;
        if (runner_up) (*runner_up)(i, ch) = second;
      }
      if (opt.use_d_cos) {
        const Index col = (opt.use_d_euc ? c : 0) + ch;
        S best = S(0), second = -std::numeric_limits<S>::max();
        int best_j = 0;
        for (int jj = 0; jj < k; ++jj) {
          const Index j = graph.neighbors(i, jj);
          const S dist = opt.swap_pair ? pair_cosine(f3, i, fo, j, ch)
                                       : pair_cosine(f3, j, fo, i, ch);
          if (jj == 0 || dist > best) {
            second = jj == 0 ? second : best;
            best = dist;
            best_j = jj;
          } else if (dist > second) {
            second = dist;
          }
        }
        out(i, col) = best;
        if (cache) cache->argmax(i, col) = best_j;
        if (runner_up) (*runner_up)(i, col) = second;
      }
    }
  }
  return out;
}

/// Reverse pass of ri_neighborhood; accumulates into the feature gradients.
template <typename S>
void ri_neighborhood_backward(const VecFeat<S>& f1, const VecFeat<S>& f2, const VecFeat<S>& f3,
                              const VecFeat<S>& fo, const KnnGraph& graph, const RiOptions& opt,
                              const RiCache& cache, const Mat<S>& gout, VecFeat<S>& gf1,
                              VecFeat<S>& gf2, VecFeat<S>& gf3, VecFeat<S>& gfo) {
  const Index n = f1.n, c = f1.c;
  const S eps = static_cast<S>(kCosEps);

  for (Index i = 0; i < n; ++i) {
    for (Index ch = 0; ch < c; ++ch) {
      if (opt.use_d_euc) {
        const S g = gout(i, ch);
        if (g != S(0)) {
          const Index j = graph.neighbors(i, cache.argmax(i, ch));
          const Index ci = opt.swap_pair ? j : i;
          const Index cj = opt.swap_pair ? i : j;
          S diff[3];
          S norm2 = S(0);
          for (int d = 0; d < 3; ++d) {
            diff[d] = f1.at(ci, ch, d) - f2.at(cj, ch, d);
            norm2 += diff[d] * diff[d];
          }
          const S norm = std::sqrt(norm2);
          if (norm > S(0)) {
            for (int d = 0; d < 3; ++d) {
              const S gd = g * diff[d] / norm;
              gf1.at(ci, ch, d) += gd;
              gf2.at(cj, ch, d) -= gd;
            }
          }
        }
      }
      if (opt.use_d_cos) {
        const Index col = (opt.use_d_euc ? c : 0) + ch;
        const S g = gout(i, col);
        if (g == S(0)) continue;
        const Index j = graph.neighbors(i, cache.argmax(i, col));
        const Index fi = opt.swap_pair ? i : j;
        const Index oi = opt.swap_pair ? j : i;
        S a[3] = {f3.at(fi, ch, 0), f3.at(fi, ch, 1), f3.at(fi, ch, 2)};
        S b[3] = {fo.at(oi, 0, 0), fo.at(oi, 0, 1), fo.at(oi, 0, 2)};
        const S na = std::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2]);
        const S nb = std::sqrt(b[0] * b[0] + b[1] * b[1] + b[2] * b[2]);
        if (na < eps || nb < eps) continue;  // constant branch
        const S dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        for (int d = 0; d < 3; ++d) {
          // d(1 - dot/(na nb))/da and /db
          const S ga = -(b[d] / (na * nb) - dot * a[d] / (na * na * na * nb));
          const S gb = -(a[d] / (na * nb) - dot * b[d] / (nb * nb * nb * na));
          gf3.at(fi, ch, d) += g * ga;
          gfo.at(oi, 0, d) += g * gb;
        }
      }
    }
  }
}

}  // namespace vni
