#pragma once

#include "vni/vecfeat.hpp"

#include <vector>

namespace vni {

// Offsets splitting the point axis of a concatenated batch; seg[0] = 0,
// seg.back() = total rows. Statistics-bearing ops (batch norm) span the whole
// batch, everything per-cloud (attention, pooling, graphs) works per segment.
using Segments = std::vector<Index>;

inline Segments single_segment(Index n) { return Segments{0, n}; }

// Direction vectors shorter than this are treated as zero in vn_relu.
inline constexpr double kDirEps = 1e-12;

// ---------------------------------------------------------------------------
// VN-Linear

template <typename S>
struct VnLinearParams {
  Mat<S> w;  // c_out x c_in, bias-free

  static VnLinearParams identity(Index c) {
    return VnLinearParams{Mat<S>::Identity(c, c)};
  }
};

template <typename S>
VecFeat<S> vn_linear(const VecFeat<S>& v, const VnLinearParams<S>& p) {
  if (p.w.cols() != v.c) {
    throw std::invalid_argument("vn_linear: weight expects " + std::to_string(p.w.cols()) +
                                " channels, feature has " + std::to_string(v.c));
  }
  VecFeat<S> out(v.n, p.w.rows());
  for (int d = 0; d < 3; ++d) out.comp(d).noalias() = v.comp(d) * p.w.transpose();
  return out;
}

template <typename S>
VecFeat<S> vn_linear_backward(const VecFeat<S>& v, const VnLinearParams<S>& p,
                              const VecFeat<S>& gout, VnLinearParams<S>& gp) {
  VecFeat<S> gin(v.n, v.c);
  for (int d = 0; d < 3; ++d) {
    gin.comp(d).noalias() = gout.comp(d) * p.w;
    gp.w.noalias() += gout.comp(d).transpose() * v.comp(d);
  }
  return gin;
}

// ---------------------------------------------------------------------------
// VN-ReLU
//
// Per output channel, a feature map q = Wq v and a direction k = Wu v are
// taken from the same input. The output keeps q where <q,k> >= 0 and
// otherwise removes the component of q along k. With a shared direction map,
// wu has a single row used for every output channel.

template <typename S>
struct VnReluParams {
  Mat<S> wq;  // c_out x c_in
  Mat<S> wu;  // c_out x c_in, or 1 x c_in when shared

  bool shared_dir() const { return wu.rows() == 1 && wq.rows() != 1; }
};

template <typename S>
struct VnReluCache {
  VecFeat<S> q;       // n x c_out
  VecFeat<S> k;       // n x c_out or n x 1 when shared
  Mat<S> dot;         // n x c_out, <q, k>
  Mat<S> k2;          // n x (c_out or 1), |k|^2
};

template <typename S>
VecFeat<S> vn_relu(const VecFeat<S>& v, const VnReluParams<S>& p,
                   VnReluCache<S>* cache = nullptr) {
  const VecFeat<S> q = vn_linear(v, VnLinearParams<S>{p.wq});
  const VecFeat<S> k = vn_linear(v, VnLinearParams<S>{p.wu});
  const bool shared = p.shared_dir();

  Mat<S> k2 = (k.comp(0).array().square() + k.comp(1).array().square() +
               k.comp(2).array().square())
                  .matrix();
  Mat<S> dot(q.n, q.c);
  if (shared) {
    dot = (q.comp(0).array().colwise() * k.comp(0).col(0).array() +
           q.comp(1).array().colwise() * k.comp(1).col(0).array() +
           q.comp(2).array().colwise() * k.comp(2).col(0).array())
              .matrix();
  } else {
    dot = channel_dots(q, k);
  }

  const S k2_eps = static_cast<S>(kDirEps) * static_cast<S>(kDirEps);
  VecFeat<S> out = q;
  for (Index i = 0; i < q.n; ++i) {
    for (Index c = 0; c < q.c; ++c) {
      const Index kc = shared ? 0 : c;
      const S kk = k2(i, kc);
      if (kk < k2_eps || dot(i, c) >= S(0)) continue;
      const S a = dot(i, c) / kk;
      for (int d = 0; d < 3; ++d) out.at(i, c, d) -= a * k.at(i, kc, d);
    }
  }
  if (cache) *cache = VnReluCache<S>{q, k, std::move(dot), std::move(k2)};
  return out;
}

template <typename S>
VecFeat<S> vn_relu_backward(const VecFeat<S>& v, const VnReluParams<S>& p,
                            const VnReluCache<S>& cache, const VecFeat<S>& gout,
                            VnReluParams<S>& gp) {
  const bool shared = p.shared_dir();
  const S k2_eps = static_cast<S>(kDirEps) * static_cast<S>(kDirEps);
  VecFeat<S> gq(cache.q.n, cache.q.c);
  VecFeat<S> gk(cache.k.n, cache.k.c);
  gk.data.setZero();

  for (Index i = 0; i < cache.q.n; ++i) {
    for (Index c = 0; c < cache.q.c; ++c) {
      const Index kc = shared ? 0 : c;
      const S kk = cache.k2(i, kc);
      if (kk < k2_eps || cache.dot(i, c) >= S(0)) {
        for (int d = 0; d < 3; ++d) gq.at(i, c, d) = gout.at(i, c, d);
        continue;
      }
      const S a = cache.dot(i, c) / kk;
      S gk_dot = S(0);
      for (int d = 0; d < 3; ++d) gk_dot += gout.at(i, c, d) * cache.k.at(i, kc, d);
      for (int d = 0; d < 3; ++d) {
        const S g = gout.at(i, c, d);
        const S kd = cache.k.at(i, kc, d);
        const S qd = cache.q.at(i, c, d);
        gq.at(i, c, d) = g - (gk_dot / kk) * kd;
        gk.at(i, kc, d) += -(gk_dot / kk) * qd + (S(2) * a * gk_dot / kk) * kd - a * g;
      }
    }
  }

  VnLinearParams<S> gwq{Mat<S>::Zero(p.wq.rows(), p.wq.cols())};
  VnLinearParams<S> gwu{Mat<S>::Zero(p.wu.rows(), p.wu.cols())};
  VecFeat<S> gin = vn_linear_backward(v, VnLinearParams<S>{p.wq}, gq, gwq);
  const VecFeat<S> gin_k = vn_linear_backward(v, VnLinearParams<S>{p.wu}, gk, gwu);
  gin.data += gin_k.data;
  gp.wq += gwq.w;
  gp.wu += gwu.w;
  return gin;
}

// ---------------------------------------------------------------------------
// VN-BatchNorm
//
// Standard batch normalization applied to per-channel vector norms, then each
// vector is rescaled by BN(|v|)/(|v| + eps). Zero vectors stay zero.

template <typename S>
struct VnBatchNormState {
  Mat<S> gamma, beta;              // c x 1, trainable
  Mat<S> running_mean, running_var;  // c x 1, statistics over norms
  S epsilon = static_cast<S>(1e-5);
  S momentum = static_cast<S>(0.1);

  static VnBatchNormState init(Index c) {
    VnBatchNormState s;
    s.gamma = Mat<S>::Ones(c, 1);
    s.beta = Mat<S>::Zero(c, 1);
    s.running_mean = Mat<S>::Zero(c, 1);
    s.running_var = Mat<S>::Ones(c, 1);
    return s;
  }
};

template <typename S>
struct VnBnStatUpdate {
  Vec<S> mean, var;  // unbiased batch statistics of the norms
  Index count = 0;
};

template <typename S>
struct VnBnCache {
  Mat<S> norms;  // n x c
  Vec<S> mean, var;  // statistics used for normalization
  Mat<S> nhat;   // normalized norms
  Mat<S> scale;  // BN(|v|) / (|v| + eps)
  bool training = false;
};

template <typename S>
VecFeat<S> vn_batch_norm_forward(const VecFeat<S>& v, const VnBatchNormState<S>& state,
                                 bool training, VnBnCache<S>* cache = nullptr,
                                 VnBnStatUpdate<S>* stat = nullptr) {
  if (v.n < 1) throw std::invalid_argument("vn_batch_norm: empty batch");
  const Index c = v.c;
  Mat<S> norms = channel_norms(v);

  Vec<S> mean(c), var(c);
  if (training) {
    mean = norms.colwise().mean().transpose();
    var = (norms.rowwise() - mean.transpose()).array().square().colwise().mean().transpose().matrix();
    if (stat) {
      stat->mean = mean;
      stat->count = v.n;
      stat->var = v.n > 1 ? Vec<S>(var * static_cast<S>(v.n) / static_cast<S>(v.n - 1)) : var;
    }
  } else {
    mean = state.running_mean.col(0);
    var = state.running_var.col(0);
  }

  const Eigen::Array<S, 1, Eigen::Dynamic> invstd =
      (var.transpose().array() + state.epsilon).sqrt().inverse();
  Mat<S> nhat = ((norms.rowwise() - mean.transpose()).array().rowwise() * invstd).matrix();
  Mat<S> bn = ((nhat.array().rowwise() * state.gamma.col(0).transpose().array()).rowwise() +
               state.beta.col(0).transpose().array())
                  .matrix();
  Mat<S> scale = (bn.array() / (norms.array() + state.epsilon)).matrix();

  VecFeat<S> out(v.n, c);
  for (int d = 0; d < 3; ++d) out.comp(d) = v.comp(d).cwiseProduct(scale);
  if (cache) *cache = VnBnCache<S>{std::move(norms), mean, var, std::move(nhat), std::move(scale), training};
  return out;
}

template <typename S>
void apply_stat_update(VnBatchNormState<S>& state, const VnBnStatUpdate<S>& stat) {
  const S m = state.momentum;
  state.running_mean.col(0) = (S(1) - m) * state.running_mean.col(0) + m * stat.mean;
  state.running_var.col(0) = (S(1) - m) * state.running_var.col(0) + m * stat.var;
}

/// Batch form of the public op: shared statistics across all clouds in the
/// batch; mutates running statistics when training.
template <typename S>
std::vector<VecFeat<S>> vn_batch_norm(const std::vector<VecFeat<S>>& batch,
                                      VnBatchNormState<S>& state, bool training) {
  if (batch.empty()) throw std::invalid_argument("vn_batch_norm: empty batch");
  const Index c = batch.front().c;
  Index total = 0;
  for (const auto& f : batch) {
    if (f.c != c) throw std::invalid_argument("vn_batch_norm: inconsistent channel counts");
    total += f.n;
  }
  VecFeat<S> cat(total, c);
  Index at = 0;
  for (const auto& f : batch) {
    cat.data.middleRows(at, f.n) = f.data;
    at += f.n;
  }
  VnBnStatUpdate<S> stat;
  VecFeat<S> out =
      vn_batch_norm_forward<S>(cat, state, training, nullptr, training ? &stat : nullptr);
  if (training) apply_stat_update(state, stat);

  std::vector<VecFeat<S>> res;
  res.reserve(batch.size());
  at = 0;
  for (const auto& f : batch) {
    VecFeat<S> piece(f.n, c);
    piece.data = out.data.middleRows(at, f.n);
    at += f.n;
    res.push_back(std::move(piece));
  }
  return res;
}

template <typename S>
VecFeat<S> vn_batch_norm_backward(const VecFeat<S>& v, const VnBatchNormState<S>& state,
                                  const VnBnCache<S>& cache, const VecFeat<S>& gout,
                                  VnBatchNormState<S>& gstate) {
  const Index n = v.n, c = v.c;
  Mat<S> gscale = Mat<S>::Zero(n, c);
  VecFeat<S> gin(n, c);
  for (int d = 0; d < 3; ++d) {
    gscale += gout.comp(d).cwiseProduct(v.comp(d));
    gin.comp(d) = gout.comp(d).cwiseProduct(cache.scale);
  }

  Mat<S> denom = (cache.norms.array() + state.epsilon).matrix();
  Mat<S> gbn = (gscale.array() / denom.array()).matrix();
  // scale = bn / (n + eps) also feeds the norm through the denominator
  Mat<S> gnorm = -(gscale.array() * cache.scale.array() / denom.array()).matrix();

  gstate.gamma.col(0) += (gbn.array() * cache.nhat.array()).colwise().sum().transpose().matrix();
  gstate.beta.col(0) += gbn.colwise().sum().transpose();

  Mat<S> gnhat = (gbn.array().rowwise() * state.gamma.col(0).transpose().array()).matrix();
  const Eigen::Array<S, 1, Eigen::Dynamic> inv =
      (cache.var.transpose().array() + state.epsilon).sqrt().inverse();
  if (cache.training) {
    const Eigen::Array<S, 1, Eigen::Dynamic> mg = gnhat.colwise().mean().array();
    const Eigen::Array<S, 1, Eigen::Dynamic> mgx =
        (gnhat.array() * cache.nhat.array()).colwise().mean();
    gnorm += (((gnhat.array() - (cache.nhat.array().rowwise() * mgx)).rowwise() - mg).rowwise() *
              inv)
                 .matrix();
  } else {
    gnorm += (gnhat.array().rowwise() * inv).matrix();
  }

  for (Index i = 0; i < n; ++i) {
    for (Index ch = 0; ch < c; ++ch) {
      const S nm = cache.norms(i, ch);
      if (nm <= S(0)) continue;
      const S f = gnorm(i, ch) / nm;
      for (int d = 0; d < 3; ++d) gin.at(i, ch, d) += f * v.at(i, ch, d);
    }
  }
  return gin;
}

// ---------------------------------------------------------------------------
// VN-Block: linear -> batch norm -> relu

template <typename S>
struct VnBlockParams {
  VnLinearParams<S> lin;
  VnBatchNormState<S> bn;
  VnReluParams<S> relu;

  Index out_channels() const { return relu.wq.rows(); }
};

template <typename S>
struct VnBlockCache {
  VecFeat<S> lin_out;
  VnBnCache<S> bn;
  VecFeat<S> bn_out;
  VnReluCache<S> relu;
};

template <typename S>
VecFeat<S> vn_block_forward(const VecFeat<S>& x, const VnBlockParams<S>& p, bool training,
                            VnBlockCache<S>* cache = nullptr, VnBnStatUpdate<S>* stat = nullptr) {
  VecFeat<S> lin_out = vn_linear(x, p.lin);
  VnBnCache<S> bn_cache;
  VecFeat<S> bn_out =
      vn_batch_norm_forward(lin_out, p.bn, training, cache ? &bn_cache : nullptr, stat);
  VnReluCache<S> relu_cache;
  VecFeat<S> out = vn_relu(bn_out, p.relu, cache ? &relu_cache : nullptr);
  if (cache) {
    cache->lin_out = std::move(lin_out);
    cache->bn = std::move(bn_cache);
    cache->bn_out = std::move(bn_out);
    cache->relu = std::move(relu_cache);
  }
  return out;
}

template <typename S>
VecFeat<S> vn_block_backward(const VecFeat<S>& x, const VnBlockParams<S>& p,
                             const VnBlockCache<S>& cache, const VecFeat<S>& gout,
                             VnBlockParams<S>& gp) {
  VecFeat<S> g_bn_out = vn_relu_backward(cache.bn_out, p.relu, cache.relu, gout, gp.relu);
  VecFeat<S> g_lin_out =
      vn_batch_norm_backward(cache.lin_out, p.bn, cache.bn, g_bn_out, gp.bn);
  return vn_linear_backward(x, p.lin, g_lin_out, gp.lin);
}

// ---------------------------------------------------------------------------
// VN max pooling over a neighborhood
//
// A direction per channel comes from a learned map of the neighbor mean; each
// channel keeps the neighbor whose vector scores highest against it. The
// selection index is rotation-invariant, so the pooled output co-rotates with
// the input. Gradients flow only to the selected vectors.

template <typename S>
VecFeat<S> vn_max_pool(const VecFeat<S>& neigh, const VnLinearParams<S>& dir_params,
                       bool norm_select = false, std::vector<int>* selection = nullptr) {
  const Index k = neigh.n, c = neigh.c;
  if (k < 1) throw std::invalid_argument("vn_max_pool: empty neighborhood");

  Mat<S> score(k, c);
  if (norm_select) {
    score = channel_norms(neigh);
  } else {
    VecFeat<S> mean(1, c);
    for (int d = 0; d < 3; ++d) mean.comp(d) = neigh.comp(d).colwise().mean();
    const VecFeat<S> dir = vn_linear(mean, dir_params);
    score.setZero();
    for (int d = 0; d < 3; ++d)
      score += (neigh.comp(d).array().rowwise() * dir.comp(d).row(0).array()).matrix();
  }

  VecFeat<S> out(1, c);
  if (selection) selection->assign(c, 0);
  for (Index ch = 0; ch < c; ++ch) {
    Index best = 0;
    for (Index j = 1; j < k; ++j)
      if (score(j, ch) > score(best, ch)) best = j;
    for (int d = 0; d < 3; ++d) out.at(0, ch, d) = neigh.at(best, ch, d);
    if (selection) (*selection)[ch] = static_cast<int>(best);
  }
  return out;
}

// ---------------------------------------------------------------------------
// RE-EdgeConv
//
// Local equivariant features per (point, neighbor) edge, mapped through a
// VN-Block and max-pooled over each point's k edges.

enum class EdgeFeatureMode { kDim3, kDim5 };

inline int edge_feature_channels(EdgeFeatureMode mode) {
  return mode == EdgeFeatureMode::kDim3 ? 3 : 5;
}

template <typename S>
struct EdgeConvParams {
  VnBlockParams<S> block;
  VnLinearParams<S> dir;  // max-pool direction map, c x c
};

/// Edge feature rows ordered point-major: row i*k + jj belongs to point i and
/// its jj-th neighbor. Channels: x_i, x_i - x_j, x_i x x_j, and in kDim5 mode
/// additionally x_c - x_j, x_i - x_c with x_c the neighbor centroid.
template <typename S>
VecFeat<S> edge_features(const PointCloud& cloud, const KnnGraph& graph, EdgeFeatureMode mode) {
  const Index n = cloud.size();
  const int k = graph.k;
  const int ch = edge_feature_channels(mode);
  VecFeat<S> e(n * k, ch);
  for (Index i = 0; i < n; ++i) {
    const Vec3 xi = cloud.point(i);
    const Vec3 xc = graph.centroids.row(i).transpose();
    for (int jj = 0; jj < k; ++jj) {
      const Index row = i * k + jj;
      const Vec3 xj = cloud.point(graph.neighbors(i, jj));
      const Vec3 cr = cross3(xi, xj);
      for (int d = 0; d < 3; ++d) {
        e.at(row, 0, d) = static_cast<S>(xi(d));
        e.at(row, 1, d) = static_cast<S>(xi(d) - xj(d));
        e.at(row, 2, d) = static_cast<S>(cr(d));
        if (mode == EdgeFeatureMode::kDim5) {
          e.at(row, 3, d) = static_cast<S>(xc(d) - xj(d));
          e.at(row, 4, d) = static_cast<S>(xi(d) - xc(d));
        }
      }
    }
  }
  return e;
}

struct EdgePoolCache {
  Eigen::MatrixXi sel;  // n x c, winning edge row per (point, channel)
};

/// Selection scores for point-major edge rows: learned-direction inner
/// products by default, channel norms when norm_select is set.
template <typename S>
Mat<S> edge_pool_scores(const VecFeat<S>& edges, Index n_points, int k,
                        const VnLinearParams<S>& dir_params, bool norm_select) {
  const Index c = edges.c;
  if (norm_select) return channel_norms(edges);
  Mat<S> score(edges.n, c);
  VecFeat<S> mean(n_points, c);
  for (Index i = 0; i < n_points; ++i)
    mean.data.row(i) = edges.data.middleRows(i * k, k).colwise().mean();
  const VecFeat<S> dir = vn_linear(mean, dir_params);
  for (Index i = 0; i < n_points; ++i) {
    auto rows = score.middleRows(i * k, k);
    rows.setZero();
    for (int d = 0; d < 3; ++d)
      rows += (edges.comp(d).middleRows(i * k, k).array().rowwise() * dir.comp(d).row(i).array())
                  .matrix();
  }
  return score;
}

/// Max-pools point-major edge rows back to one row per point.
template <typename S>
VecFeat<S> edge_max_pool(const VecFeat<S>& edges, Index n_points, int k,
                         const VnLinearParams<S>& dir_params, bool norm_select,
                         EdgePoolCache* cache = nullptr) {
  const Index c = edges.c;
  const Mat<S> score = edge_pool_scores(edges, n_points, k, dir_params, norm_select);

  VecFeat<S> out(n_points, c);
  if (cache) cache->sel.resize(n_points, c);
  for (Index i = 0; i < n_points; ++i) {
    for (Index ch = 0; ch < c; ++ch) {
      Index best = i * k;
      for (int jj = 1; jj < k; ++jj)
        if (score(i * k + jj, ch) > score(best, ch)) best = i * k + jj;
      for (int d = 0; d < 3; ++d) out.at(i, ch, d) = edges.at(best, ch, d);
      if (cache) cache->sel(i, ch) = static_cast<int>(best);
    }
  }
  return out;
}

/// Smallest best-vs-runner-up score gap over all (point, channel) slots;
/// +infinity when k == 1.
template <typename S>
S edge_pool_min_gap(const VecFeat<S>& edges, Index n_points, int k,
                    const VnLinearParams<S>& dir_params, bool norm_select) {
  if (k < 2) return std::numeric_limits<S>::max();
  const Mat<S> score = edge_pool_scores(edges, n_points, k, dir_params, norm_select);
  S gap = std::numeric_limits<S>::max();
  for (Index i = 0; i < n_points; ++i) {
    for (Index ch = 0; ch < edges.c; ++ch) {
      S best = score(i * k, ch), second = -std::numeric_limits<S>::max();
      for (int jj = 1; jj < k; ++jj) {
        const S s = score(i * k + jj, ch);
        if (s > best) {
          second = best;
          best = s;
        } else if (s > second) {
          second = s;
        }
      }
      gap = std::min(gap, best - second);
    }
  }
  return gap;
}

template <typename S>
VecFeat<S> edge_max_pool_backward(const VecFeat<S>& gout, Index n_edges, const EdgePoolCache& cache) {
  const Index c = gout.c;
  VecFeat<S> gedges(n_edges, c);
  for (Index i = 0; i < gout.n; ++i)
    for (Index ch = 0; ch < c; ++ch)
      for (int d = 0; d < 3; ++d) gedges.at(cache.sel(i, ch), ch, d) += gout.at(i, ch, d);
  return gedges;
}

template <typename S>
struct ReEdgeConvCache {
  VecFeat<S> edge_in;
  VnBlockCache<S> block;
  VecFeat<S> block_out;
  EdgePoolCache pool;
};

/// Single-cloud RE-EdgeConv. Batched training goes through the model, which
/// concatenates edge rows of all clouds before the block so the batch norm
/// statistics span the batch.
template <typename S>
VecFeat<S> re_edge_conv(const PointCloud& cloud, const KnnGraph& graph,
                        const EdgeConvParams<S>& p, EdgeFeatureMode mode,
                        bool norm_select = false, bool training = false,
                        ReEdgeConvCache<S>* cache = nullptr,
                        VnBnStatUpdate<S>* stat = nullptr) {
  VecFeat<S> e = edge_features<S>(cloud, graph, mode);
  VnBlockCache<S> block_cache;
  VecFeat<S> h = vn_block_forward(e, p.block, training, cache ? &block_cache : nullptr, stat);
  EdgePoolCache pool_cache;
  VecFeat<S> out =
      edge_max_pool(h, cloud.size(), graph.k, p.dir, norm_select, cache ? &pool_cache : nullptr);
  if (cache) {
    cache->edge_in = std::move(e);
    cache->block = std::move(block_cache);
    cache->block_out = std::move(h);
    cache->pool = std::move(pool_cache);
  }
  return out;
}

// ---------------------------------------------------------------------------
// RE-Attention
//
// Scores are inner products of flattened 3c-dim features scaled by
// 1/sqrt(3c); they cancel any common rotation, so the attended output stays
// equivariant. The attended features reduce to a single orientation channel
// through a final 1 x c map.

template <typename S>
struct ReAttentionParams {
  VnLinearParams<S> wq, wk, wv;  // c x c
  VnLinearParams<S> wo;          // 1 x c
};

template <typename S>
struct ReAttentionCache {
  VecFeat<S> q, k, v;
  std::vector<Mat<S>> softmax;  // one row-stochastic matrix per segment
  VecFeat<S> attended;
};

template <typename S>
VecFeat<S> re_attention_forward(const VecFeat<S>& f, const ReAttentionParams<S>& p,
                                const Segments& seg, ReAttentionCache<S>* cache = nullptr) {
  const VecFeat<S> q = vn_linear(f, p.wq);
  const VecFeat<S> k = vn_linear(f, p.wk);
  const VecFeat<S> v = vn_linear(f, p.wv);
  const S scale = S(1) / std::sqrt(static_cast<S>(3 * f.c));

  VecFeat<S> attended(f.n, f.c);
  std::vector<Mat<S>> softmaxes;
  for (std::size_t b = 0; b + 1 < seg.size(); ++b) {
    const Index lo = seg[b], nb = seg[b + 1] - lo;
    auto qb = q.data.middleRows(lo, nb);
    auto kb = k.data.middleRows(lo, nb);
    auto vb = v.data.middleRows(lo, nb);
    if (cache) {
      Mat<S> s = (qb * kb.transpose()) * scale;
      for (Index i = 0; i < nb; ++i) {
        auto row = s.row(i).array();
        row -= row.maxCoeff();
        row = row.exp();
        row /= row.sum();
      }
      attended.data.middleRows(lo, nb).noalias() = s * vb;
      softmaxes.push_back(std::move(s));
    } else {
      // Row-chunked so the n x n score matrix never fully materializes.
      const Index chunk = 512;
      for (Index r0 = 0; r0 < nb; r0 += chunk) {
        const Index rows = std::min(chunk, nb - r0);
        Mat<S> s = (qb.middleRows(r0, rows) * kb.transpose()) * scale;
        for (Index i = 0; i < rows; ++i) {
          auto row = s.row(i).array();
          row -= row.maxCoeff();
          row = row.exp();
          row /= row.sum();
        }
        attended.data.middleRows(lo + r0, rows).noalias() = s * vb;
      }
    }
  }
  VecFeat<S> fo = vn_linear(attended, p.wo);
  if (cache) {
    cache->q = q;
    cache->k = k;
    cache->v = v;
    cache->softmax = std::move(softmaxes);
    cache->attended = std::move(attended);
  }
  return fo;
}

/// Spec surface: single cloud, orientation channel per point.
template <typename S>
VecFeat<S> re_attention(const VecFeat<S>& f, const ReAttentionParams<S>& p) {
  return re_attention_forward(f, p, single_segment(f.n));
}

template <typename S>
VecFeat<S> re_attention_backward(const VecFeat<S>& f, const ReAttentionParams<S>& p,
                                 const Segments& seg, const ReAttentionCache<S>& cache,
                                 const VecFeat<S>& gout, ReAttentionParams<S>& gp) {
  const S scale = S(1) / std::sqrt(static_cast<S>(3 * f.c));

  VecFeat<S> g_att = vn_linear_backward(cache.attended, p.wo, gout, gp.wo);

  VecFeat<S> gq(f.n, f.c), gk(f.n, f.c), gv(f.n, f.c);
  for (std::size_t b = 0; b + 1 < seg.size(); ++b) {
    const Index lo = seg[b], nb = seg[b + 1] - lo;
    const Mat<S>& sm = cache.softmax[b];
    auto ga = g_att.data.middleRows(lo, nb);
    auto vb = cache.v.data.middleRows(lo, nb);
    Mat<S> gsm = ga * vb.transpose();
    gv.data.middleRows(lo, nb).noalias() = sm.transpose() * ga;
    Mat<S> gs(nb, nb);
    for (Index i = 0; i < nb; ++i) {
      const S dotv = gsm.row(i).dot(sm.row(i));
      gs.row(i) = (gsm.row(i).array() - dotv) * sm.row(i).array();
    }
    gq.data.middleRows(lo, nb).noalias() = (gs * cache.k.data.middleRows(lo, nb)) * scale;
    gk.data.middleRows(lo, nb).noalias() =
        (gs.transpose() * cache.q.data.middleRows(lo, nb)) * scale;
  }

  VecFeat<S> gin = vn_linear_backward(f, p.wq, gq, gp.wq);
  gin.data += vn_linear_backward(f, p.wk, gk, gp.wk).data;
  gin.data += vn_linear_backward(f, p.wv, gv, gp.wv).data;
  return gin;
}

// ---------------------------------------------------------------------------
// RE-Module: two parallel VN-Blocks, a third block on their sum, and the
// attention-derived orientation channel.

template <typename S>
struct ReModuleParams {
  VnBlockParams<S> block_a, block_b, block_c;
  ReAttentionParams<S> attention;
};

template <typename S>
struct ReModuleOutputs {
  VecFeat<S> f1, f2, f3;
  VecFeat<S> fo;  // n x 1 orientation
};

template <typename S>
struct ReModuleCache {
  VnBlockCache<S> a, b, c;
  VecFeat<S> sum;
  ReAttentionCache<S> att;
  bool attention_used = true;
  bool fo_computed = true;
};

template <typename S>
struct ReModuleStatUpdate {
  VnBnStatUpdate<S> a, b, c;
};

/// When use_attention is false the orientation falls back to the channel mean
/// of f3, which keeps the output equivariant with zero extra parameters.
/// want_fo=false skips the orientation entirely (first module in the model).
template <typename S>
ReModuleOutputs<S> re_module_forward(const VecFeat<S>& x, const ReModuleParams<S>& p,
                                     const Segments& seg, bool training, bool use_attention,
                                     ReModuleCache<S>* cache = nullptr,
                                     ReModuleStatUpdate<S>* stat = nullptr, bool want_fo = true) {
  ReModuleOutputs<S> out;
  out.f1 = vn_block_forward(x, p.block_a, training, cache ? &cache->a : nullptr,
                            stat ? &stat->a : nullptr);
  out.f2 = vn_block_forward(x, p.block_b, training, cache ? &cache->b : nullptr,
                            stat ? &stat->b : nullptr);
  VecFeat<S> sum(x.n, out.f1.c);
  sum.data = out.f1.data + out.f2.data;
  out.f3 = vn_block_forward(sum, p.block_c, training, cache ? &cache->c : nullptr,
                            stat ? &stat->c : nullptr);

  if (want_fo) {
    if (use_attention) {
      out.fo = re_attention_forward(out.f3, p.attention, seg, cache ? &cache->att : nullptr);
    } else {
      out.fo = VecFeat<S>(x.n, 1);
      for (int d = 0; d < 3; ++d) out.fo.comp(d) = out.f3.comp(d).rowwise().mean();
    }
  }
  if (cache) {
    cache->sum = std::move(sum);
    cache->attention_used = use_attention;
    cache->fo_computed = want_fo;
  }
  return out;
}

/// Spec surface: single cloud, inference statistics, attention on.
template <typename S>
ReModuleOutputs<S> re_module(const VecFeat<S>& x, const ReModuleParams<S>& p) {
  return re_module_forward(x, p, single_segment(x.n), /*training=*/false, /*use_attention=*/true);
}

template <typename S>
VecFeat<S> re_module_backward(const VecFeat<S>& x, const ReModuleParams<S>& p,
                              const Segments& seg, const ReModuleCache<S>& cache,
                              const ReModuleOutputs<S>& out, const VecFeat<S>& gf1,
                              const VecFeat<S>& gf2, const VecFeat<S>& gf3_in,
                              const VecFeat<S>& gfo, ReModuleParams<S>& gp) {
  VecFeat<S> gf3 = gf3_in;
  if (cache.fo_computed && gfo.n > 0) {
    if (cache.attention_used) {
      gf3.data += re_attention_backward(out.f3, p.attention, seg, cache.att, gfo, gp.attention).data;
    } else {
      const S inv_c = S(1) / static_cast<S>(out.f3.c);
      for (int d = 0; d < 3; ++d)
        gf3.comp(d) += (gfo.comp(d) * Mat<S>::Ones(1, out.f3.c)) * inv_c;
    }
  }
  VecFeat<S> gsum = vn_block_backward(cache.sum, p.block_c, cache.c, gf3, gp.block_c);
  VecFeat<S> ga = gsum;
  ga.data += gf1.data;
  VecFeat<S> gb = std::move(gsum);
  gb.data += gf2.data;
  VecFeat<S> gx = vn_block_backward(x, p.block_a, cache.a, ga, gp.block_a);
  gx.data += vn_block_backward(x, p.block_b, cache.b, gb, gp.block_b).data;
  return gx;
}

}  // namespace vni
