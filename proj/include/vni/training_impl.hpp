#pragma once

#include "vni/training.hpp"

namespace vni {

/// Hash of every discrete decision taken in a cached forward: relu branch
/// signs, max-pool selections, invariant-max argmaxes, rectifier masks and
/// clamp masks. Two forwards with equal signatures saw the same piecewise-
/// smooth region, which is what a finite-difference probe needs.
template <typename S>
std::size_t branch_signature(const ModelCache<S>& cache) {
  std::size_t h = 1469598103934665603ULL;
  const auto mix = [&h](std::size_t v) {
    h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  };
  const auto mix_signs = [&](const Mat<S>& m, S threshold) {
    for (Index i = 0; i < m.size(); ++i) mix(m.data()[i] >= threshold ? 1u : 2u);
  };
  const auto mix_relu = [&](const VnReluCache<S>& rc) {
    const S k2_eps = static_cast<S>(kDirEps) * static_cast<S>(kDirEps);
    for (Index i = 0; i < rc.dot.rows(); ++i) {
      for (Index ch = 0; ch < rc.dot.cols(); ++ch) {
        const Index kc = rc.k2.cols() == 1 ? 0 : ch;
        const bool pass = rc.k2(i, kc) < k2_eps || rc.dot(i, ch) >= S(0);
        mix(pass ? 1u : 2u);
      }
    }
  };
  mix_relu(cache.edge_block.relu);
  for (const ReModuleCache<S>* mod : {&cache.mod1_cache, &cache.mod2_cache}) {
    mix_relu(mod->a.relu);
    mix_relu(mod->b.relu);
    mix_relu(mod->c.relu);
  }
  for (const auto& pool : cache.edge_pool) {
    for (Index i = 0; i < pool.sel.size(); ++i)
      mix(static_cast<std::size_t>(pool.sel.data()[i]) + 3u);
  }
  for (const auto& ri : cache.ri) {
    for (Index i = 0; i < ri.argmax.size(); ++i)
      mix(static_cast<std::size_t>(ri.argmax.data()[i]) + 3u);
  }
  for (const auto& lc : cache.mlp) mix_signs(lc.pre_act, S(0));
  mix_signs(cache.mlp_out, S(1e-6));
  return h;
}

template <typename S>
BranchMargins<S> branch_margins(const ModelParams<S>& params, const ModelConfig& cfg,
                                const ModelCache<S>& cache) {
  BranchMargins<S> m;

  const auto scan_relu = [&](const VnReluCache<S>& rc) {
    if (rc.dot.size() > 0) m.relu_dot = std::min(m.relu_dot, rc.dot.cwiseAbs().minCoeff());
  };
  scan_relu(cache.edge_block.relu);
  for (const ReModuleCache<S>* mod : {&cache.mod1_cache, &cache.mod2_cache}) {
    scan_relu(mod->a.relu);
    scan_relu(mod->b.relu);
    scan_relu(mod->c.relu);
  }

  for (const auto& lc : cache.mlp) {
    if (lc.pre_act.size() > 0)
      m.mlp_pre_act = std::min(m.mlp_pre_act, lc.pre_act.cwiseAbs().minCoeff());
  }
  // Entries rectified to exactly zero are pinned there (the rectifier margin
  // guards their sign changes), so only strictly positive entries can drift
  // across the clamp floor.
  for (Index i = 0; i < cache.mlp_out.size(); ++i) {
    const S x = cache.mlp_out.data()[i];
    if (x > S(0)) m.gem_clamp = std::min(m.gem_clamp, std::abs(x - S(1e-6)));
  }

  const Index b = static_cast<Index>(cache.clouds.size());
  const Index c = cfg.c_equi;
  for (Index i = 0; i < b; ++i) {
    VecFeat<S> piece(cache.eseg[i + 1] - cache.eseg[i], c);
    piece.data = cache.edge_block_out.data.middleRows(cache.eseg[i], piece.n);
    m.pool_gap = std::min(
        m.pool_gap, edge_pool_min_gap(piece, cache.clouds[i].size(), cfg.k_edgeconv,
                                      params.edgeconv.dir, cfg.maxpool_norm_select));
  }

  RiOptions ri_opt{cfg.use_d_euc, cfg.use_d_cos, cfg.ri_swap_pair};
  for (Index i = 0; i < b; ++i) {
    if (cache.graphs_ri[i].k < 2) continue;
    const Index lo = cache.seg[i], n_i = cache.seg[i + 1] - lo;
    VecFeat<S> f1(n_i, c), f2(n_i, c), f3(n_i, c), fo(n_i, 1);
    f1.data = cache.mod2_out.f1.data.middleRows(lo, n_i);
    f2.data = cache.mod2_out.f2.data.middleRows(lo, n_i);
    f3.data = cache.mod2_out.f3.data.middleRows(lo, n_i);
    if (cfg.use_d_cos) fo.data = cache.mod2_out.fo.data.middleRows(lo, n_i);
    Mat<S> second;
    Mat<S> best = ri_neighborhood(f1, f2, f3, fo, cache.graphs_ri[i], ri_opt, nullptr, &second);
    m.ri_gap = std::min(m.ri_gap, (best - second).minCoeff());
  }
  return m;
}

}  // namespace vni
