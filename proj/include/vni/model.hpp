#pragma once

#include "vni/config.hpp"
#include "vni/ri_layers.hpp"
#include "vni/vn_layers.hpp"

#include <functional>
#include <string>
#include <vector>

namespace vni {

// ---------------------------------------------------------------------------
// Configuration

struct ModelConfig {
  int c_equi = 64;
  std::vector<int> mlp_dims = {512, 1024, 1024};
  int desc_dim = 256;
  int k_edgeconv = 20;
  int k_ri = 20;
  EdgeFeatureMode edgeconv_mode = EdgeFeatureMode::kDim5;
  bool use_d_euc = true;
  bool use_d_cos = true;
  bool use_attention = true;
  bool use_neighborhood = true;
  bool use_vnn_inv_stub = false;  // ablation placeholder, rejected when enabled
  double gem_p_init = 3.0;
  bool l2_normalize_descriptor = false;
  bool maxpool_norm_select = false;
  bool relu_shared_dir = false;
  bool ri_swap_pair = false;
  // Strided point subsample applied before the network; 0 keeps all points.
  int n_points = 0;

  int ri_dim() const { return ((use_d_euc ? 1 : 0) + (use_d_cos ? 1 : 0)) * c_equi; }
  int min_points() const { return std::max(k_edgeconv, use_neighborhood ? k_ri : 1) + 1; }

  void validate() const;
  KvConfig to_kv() const;
  static ModelConfig from_kv(const KvConfig& kv);
};

// ---------------------------------------------------------------------------
// Scalar batch norm for the shared MLP head (per-unit statistics).

template <typename S>
struct ScalarBnCache {
  Mat<S> xhat;
  Vec<S> mean, var;
  bool training = false;
};

template <typename S>
Mat<S> scalar_bn_forward(const Mat<S>& x, const VnBatchNormState<S>& state, bool training,
                         ScalarBnCache<S>* cache = nullptr, VnBnStatUpdate<S>* stat = nullptr) {
  const Index m = x.rows(), d = x.cols();
  if (m < 1) throw std::invalid_argument("scalar_bn: empty batch");
  Vec<S> mean(d), var(d);
  if (training) {
    mean = x.colwise().mean().transpose();
    var = (x.rowwise() - mean.transpose()).array().square().colwise().mean().transpose().matrix();
    if (stat) {
      stat->mean = mean;
      stat->count = m;
      stat->var = m > 1 ? Vec<S>(var * static_cast<S>(m) / static_cast<S>(m - 1)) : var;
    }
  } else {
    mean = state.running_mean.col(0);
    var = state.running_var.col(0);
  }
  const Eigen::Array<S, 1, Eigen::Dynamic> invstd =
      (var.transpose().array() + state.epsilon).sqrt().inverse();
  Mat<S> xhat = ((x.rowwise() - mean.transpose()).array().rowwise() * invstd).matrix();
  Mat<S> out = ((xhat.array().rowwise() * state.gamma.col(0).transpose().array()).rowwise() +
                state.beta.col(0).transpose().array())
                   .matrix();
  if (cache) *cache = ScalarBnCache<S>{std::move(xhat), mean, var, training};
  return out;
}

template <typename S>
Mat<S> scalar_bn_backward(const VnBatchNormState<S>& state, const ScalarBnCache<S>& cache,
                          const Mat<S>& gout, VnBatchNormState<S>& gstate) {
  gstate.gamma.col(0) += (gout.array() * cache.xhat.array()).colwise().sum().transpose().matrix();
  gstate.beta.col(0) += gout.colwise().sum().transpose();
  Mat<S> gxhat = (gout.array().rowwise() * state.gamma.col(0).transpose().array()).matrix();
  const Eigen::Array<S, 1, Eigen::Dynamic> inv =
      (cache.var.transpose().array() + state.epsilon).sqrt().inverse();
  if (cache.training) {
    const Eigen::Array<S, 1, Eigen::Dynamic> mg = gxhat.colwise().mean().array();
    const Eigen::Array<S, 1, Eigen::Dynamic> mgx =
        (gxhat.array() * cache.xhat.array()).colwise().mean();
    return (((gxhat.array() - (cache.xhat.array().rowwise() * mgx)).rowwise() - mg).rowwise() *
            inv)
        .matrix();
  }
  return (gxhat.array().rowwise() * inv).matrix();
}

// ---------------------------------------------------------------------------
// Parameters

template <typename S>
struct MlpLayerParams {
  Mat<S> w;  // d_out x d_in
  Mat<S> b;  // d_out x 1
  VnBatchNormState<S> bn;
};

template <typename S>
struct GemParams {
  Mat<S> p;       // 1 x 1 trainable exponent
  Mat<S> proj_w;  // desc_dim x mlp_out
  Mat<S> proj_b;  // desc_dim x 1
};

template <typename S>
struct ModelParams {
  EdgeConvParams<S> edgeconv;
  ReModuleParams<S> module1, module2;
  std::vector<MlpLayerParams<S>> mlp;
  GemParams<S> gem;
};

/// Gradients mirror the parameter structure; batch-norm running statistics
/// stay zero there.
template <typename S>
using Gradients = ModelParams<S>;

template <typename S>
ModelParams<S> init_params(const ModelConfig& cfg, std::uint64_t seed);

template <typename S>
Gradients<S> zero_gradients(const ModelConfig& cfg);

/// Calls f(name, tensor, trainable) for every tensor in a fixed order.
/// Running statistics visit with trainable=false.
template <typename ParamsT, typename F>
void visit_tensors(ParamsT& params, F&& f);

template <typename S>
long long param_count(const ModelParams<S>& params);

struct ParamCountEntry {
  std::string name;
  long long count;
};

template <typename S>
std::vector<ParamCountEntry> param_breakdown(const ModelParams<S>& params);

template <typename TO, typename FROM>
ModelParams<TO> cast_params(const ModelParams<FROM>& src, const ModelConfig& cfg);

// ---------------------------------------------------------------------------
// Forward / backward

enum class RunMode { kInfer, kTrain };

template <typename S>
struct MlpLayerCache {
  Mat<S> input;
  Mat<S> lin_out;
  ScalarBnCache<S> bn;
  Mat<S> pre_act;  // BN output plus bias, before the rectifier
};

template <typename S>
struct GemCache {
  Mat<S> clamped;  // M x D
  Mat<S> powed;    // clamped^p
  Mat<S> m;        // B x D, per-segment means of clamped^p
  Mat<S> y;        // B x D, pooled values
  Mat<S> pre_norm; // B x desc_dim before optional normalization
  Vec<S> norms;    // descriptor norms when normalizing
};

template <typename S>
struct ModelStatUpdates {
  VnBnStatUpdate<S> edge;
  ReModuleStatUpdate<S> mod1, mod2;
  std::vector<VnBnStatUpdate<S>> mlp;
};

template <typename S>
void apply_model_stats(ModelParams<S>& params, const ModelStatUpdates<S>& stats) {
  apply_stat_update(params.edgeconv.block.bn, stats.edge);
  apply_stat_update(params.module1.block_a.bn, stats.mod1.a);
  apply_stat_update(params.module1.block_b.bn, stats.mod1.b);
  apply_stat_update(params.module1.block_c.bn, stats.mod1.c);
  apply_stat_update(params.module2.block_a.bn, stats.mod2.a);
  apply_stat_update(params.module2.block_b.bn, stats.mod2.b);
  apply_stat_update(params.module2.block_c.bn, stats.mod2.c);
  for (std::size_t i = 0; i < params.mlp.size(); ++i) {
    apply_stat_update(params.mlp[i].bn, stats.mlp[i]);
  }
}

template <typename S>
struct ModelCache {
  Segments seg;   // point offsets per cloud
  Segments eseg;  // edge row offsets per cloud
  std::vector<PointCloud> clouds;  // after subsampling
  std::vector<KnnGraph> graphs_edge, graphs_ri;
  VecFeat<S> edge_in;
  VnBlockCache<S> edge_block;
  VecFeat<S> edge_block_out;
  std::vector<EdgePoolCache> edge_pool;
  VecFeat<S> edge_out;
  ReModuleCache<S> mod1_cache, mod2_cache;
  ReModuleOutputs<S> mod1_out, mod2_out;
  VecFeat<S> mod2_in;
  std::vector<RiCache> ri;
  Mat<S> ri_out;
  std::vector<MlpLayerCache<S>> mlp;
  Mat<S> mlp_out;
  GemCache<S> gem;
  Mat<S> desc;  // B x desc_dim
};

/// Spec surface: generalized-mean pooling of an N x D feature block with
/// clamp floor 1e-6, one value per column.
template <typename S>
Vec<S> gem_pool(const Mat<S>& features, S p) {
  const Mat<S> clamped = features.cwiseMax(static_cast<S>(1e-6));
  const Mat<S> powed = clamped.array().pow(p).matrix();
  Vec<S> mean = powed.colwise().mean().transpose();
  return mean.array().pow(S(1) / p).matrix();
}

/// Intermediate stage captures for feature dumps; cheap compared to a full
/// training cache.
template <typename S>
struct StageTaps {
  VecFeat<S> equi;  // module 2's F3
  Mat<S> ri;        // invariant features, N x ri_dim
};

template <typename S>
Mat<S> forward_batch(const std::vector<PointCloud>& clouds, const ModelParams<S>& params,
                     const ModelConfig& cfg, RunMode mode, ModelCache<S>* cache = nullptr,
                     ModelStatUpdates<S>* stats = nullptr, StageTaps<S>* taps = nullptr);

/// Spec surface: one cloud to one descriptor.
template <typename S>
Vec<S> forward(const PointCloud& cloud, const ModelParams<S>& params, const ModelConfig& cfg,
               RunMode mode = RunMode::kInfer) {
  Mat<S> desc = forward_batch<S>({cloud}, params, cfg, mode);
  return desc.row(0).transpose();
}

/// Reverse pass over a cached batch forward; ddesc is B x desc_dim.
template <typename S>
Gradients<S> backward_batch(const ModelParams<S>& params, const ModelConfig& cfg,
                            const ModelCache<S>& cache, const Mat<S>& ddesc);

// ---------------------------------------------------------------------------
// Checkpoints: magic "VNIP", u32 version, length-prefixed config text, then
// named f64 tensors (u32 name length, name, u32 rank, u32 dims, f64 values),
// everything little-endian.

void save_checkpoint(const std::string& path, const ModelParams<double>& params,
                     const ModelConfig& cfg);

struct Checkpoint {
  ModelConfig config;
  ModelParams<double> params;
};

Checkpoint load_checkpoint(const std::string& path);

// ---------------------------------------------------------------------------
// Implementation

inline void ModelConfig::validate() const {
  if (c_equi < 1) throw std::invalid_argument("config: c_equi must be >= 1");
  if (desc_dim < 1) throw std::invalid_argument("config: desc_dim must be >= 1");
  if (k_edgeconv < 1 || k_ri < 1) throw std::invalid_argument("config: neighborhood sizes must be >= 1");
  if (mlp_dims.empty()) throw std::invalid_argument("config: mlp_dims must be non-empty");
  for (int d : mlp_dims)
    if (d < 1) throw std::invalid_argument("config: mlp_dims entries must be >= 1");
  if (!use_d_euc && !use_d_cos)
    throw std::invalid_argument("config: at least one of use_d_euc/use_d_cos must be enabled");
  if (gem_p_init < 1.0) throw std::invalid_argument("config: gem_p_init must be >= 1");
  if (use_vnn_inv_stub)
    throw std::invalid_argument("config: the coordinate-system invariant layer is an ablation "
                                "placeholder and is not implemented");
  if (n_points < 0) throw std::invalid_argument("config: n_points must be >= 0");
  if (n_points > 0 && n_points < min_points())
    throw std::invalid_argument("config: n_points must be at least " + std::to_string(min_points()));
}

inline KvConfig ModelConfig::to_kv() const {
  KvConfig kv;
  kv.set_int("c_equi", c_equi);
  kv.set_int_list("mlp_dims", mlp_dims);
  kv.set_int("desc_dim", desc_dim);
  kv.set_int("k_edgeconv", k_edgeconv);
  kv.set_int("k_ri", k_ri);
  kv.set("edgeconv_mode", edgeconv_mode == EdgeFeatureMode::kDim5 ? "dim5" : "dim3");
  kv.set_bool("use_d_euc", use_d_euc);
  kv.set_bool("use_d_cos", use_d_cos);
  kv.set_bool("use_attention", use_attention);
  kv.set_bool("use_neighborhood", use_neighborhood);
  kv.set_bool("use_vnn_inv_stub", use_vnn_inv_stub);
  kv.set_double("gem_p_init", gem_p_init);
  kv.set_bool("l2_normalize_descriptor", l2_normalize_descriptor);
  kv.set_bool("maxpool_norm_select", maxpool_norm_select);
  kv.set_bool("relu_shared_dir", relu_shared_dir);
  kv.set_bool("ri_swap_pair", ri_swap_pair);
  kv.set_int("n_points", n_points);
  return kv;
}

inline ModelConfig ModelConfig::from_kv(const KvConfig& kv) {
  ModelConfig c;
  c.c_equi = kv.get_int("c_equi", c.c_equi);
  c.mlp_dims = kv.get_int_list("mlp_dims", c.mlp_dims);
  c.desc_dim = kv.get_int("desc_dim", c.desc_dim);
  c.k_edgeconv = kv.get_int("k_edgeconv", c.k_edgeconv);
  c.k_ri = kv.get_int("k_ri", c.k_ri);
  const std::string mode = kv.get_string("edgeconv_mode", "dim5");
  if (mode == "dim5") {
    c.edgeconv_mode = EdgeFeatureMode::kDim5;
  } else if (mode == "dim3") {
    c.edgeconv_mode = EdgeFeatureMode::kDim3;
  } else {
    throw ValidationError("config: edgeconv_mode must be dim3 or dim5, got '" + mode + "'");
  }
  c.use_d_euc = kv.get_bool("use_d_euc", c.use_d_euc);
  c.use_d_cos = kv.get_bool("use_d_cos", c.use_d_cos);
  c.use_attention = kv.get_bool("use_attention", c.use_attention);
  c.use_neighborhood = kv.get_bool("use_neighborhood", c.use_neighborhood);
  c.use_vnn_inv_stub = kv.get_bool("use_vnn_inv_stub", c.use_vnn_inv_stub);
  c.gem_p_init = kv.get_double("gem_p_init", c.gem_p_init);
  c.l2_normalize_descriptor = kv.get_bool("l2_normalize_descriptor", c.l2_normalize_descriptor);
  c.maxpool_norm_select = kv.get_bool("maxpool_norm_select", c.maxpool_norm_select);
  c.relu_shared_dir = kv.get_bool("relu_shared_dir", c.relu_shared_dir);
  c.ri_swap_pair = kv.get_bool("ri_swap_pair", c.ri_swap_pair);
  c.n_points = kv.get_int("n_points", c.n_points);
  return c;
}

namespace detail {

template <typename S>
Mat<S> init_linear(Rng& rng, Index rows, Index cols) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(cols));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Mat<S> w(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) w(i, j) = static_cast<S>(dist(rng));
  return w;
}

template <typename S>
VnBlockParams<S> init_block(Rng& rng, Index c_in, Index c_out, bool shared_dir) {
  VnBlockParams<S> p;
  p.lin.w = init_linear<S>(rng, c_out, c_in);
  p.bn = VnBatchNormState<S>::init(c_out);
  p.relu.wq = init_linear<S>(rng, c_out, c_out);
  p.relu.wu = init_linear<S>(rng, shared_dir ? 1 : c_out, c_out);
  return p;
}

template <typename S>
ReModuleParams<S> init_module(Rng& rng, Index c, bool shared_dir) {
  ReModuleParams<S> p;
  p.block_a = init_block<S>(rng, c, c, shared_dir);
  p.block_b = init_block<S>(rng, c, c, shared_dir);
  p.block_c = init_block<S>(rng, c, c, shared_dir);
  p.attention.wq.w = init_linear<S>(rng, c, c);
  p.attention.wk.w = init_linear<S>(rng, c, c);
  p.attention.wv.w = init_linear<S>(rng, c, c);
  p.attention.wo.w = init_linear<S>(rng, 1, c);
  return p;
}

template <typename BnT, typename F>
void visit_bn(const std::string& prefix, BnT& bn, F&& f) {
  f(prefix + ".gamma", bn.gamma, true);
  f(prefix + ".beta", bn.beta, true);
  f(prefix + ".running_mean", bn.running_mean, false);
  f(prefix + ".running_var", bn.running_var, false);
}

template <typename BlockT, typename F>
void visit_block(const std::string& prefix, BlockT& b, F&& f) {
  f(prefix + ".lin.w", b.lin.w, true);
  visit_bn(prefix + ".bn", b.bn, f);
  f(prefix + ".relu.wq", b.relu.wq, true);
  f(prefix + ".relu.wu", b.relu.wu, true);
}

template <typename ModuleT, typename F>
void visit_module(const std::string& prefix, ModuleT& m, F&& f) {
  visit_block(prefix + ".block_a", m.block_a, f);
  visit_block(prefix + ".block_b", m.block_b, f);
  visit_block(prefix + ".block_c", m.block_c, f);
  f(prefix + ".att.wq", m.attention.wq.w, true);
  f(prefix + ".att.wk", m.attention.wk.w, true);
  f(prefix + ".att.wv", m.attention.wv.w, true);
  f(prefix + ".att.wo", m.attention.wo.w, true);
}

}  // namespace detail

template <typename S>
ModelParams<S> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  ModelParams<S> p;
  const Index c = cfg.c_equi;
  p.edgeconv.block =
      detail::init_block<S>(rng, edge_feature_channels(cfg.edgeconv_mode), c, cfg.relu_shared_dir);
  p.edgeconv.dir.w = detail::init_linear<S>(rng, c, c);
  p.module1 = detail::init_module<S>(rng, c, cfg.relu_shared_dir);
  p.module2 = detail::init_module<S>(rng, c, cfg.relu_shared_dir);

  Index d_in = cfg.ri_dim();
  for (int d_out : cfg.mlp_dims) {
    MlpLayerParams<S> layer;
    layer.w = detail::init_linear<S>(rng, d_out, d_in);
    layer.b = Mat<S>::Zero(d_out, 1);
    layer.bn = VnBatchNormState<S>::init(d_out);
    p.mlp.push_back(std::move(layer));
    d_in = d_out;
  }
  p.gem.p = Mat<S>::Constant(1, 1, static_cast<S>(cfg.gem_p_init));
  p.gem.proj_w = detail::init_linear<S>(rng, cfg.desc_dim, cfg.mlp_dims.back());
  p.gem.proj_b = Mat<S>::Zero(cfg.desc_dim, 1);
  return p;
}

template <typename S>
Gradients<S> zero_gradients(const ModelConfig& cfg) {
  Gradients<S> g = init_params<S>(cfg, 0);
  visit_tensors(g, [](const std::string&, auto& t, bool) { t.setZero(); });
  return g;
}

template <typename ParamsT, typename F>
void visit_tensors(ParamsT& params, F&& f) {
  f("edgeconv.block.lin.w", params.edgeconv.block.lin.w, true);
  detail::visit_bn("edgeconv.block.bn", params.edgeconv.block.bn, f);
  f("edgeconv.block.relu.wq", params.edgeconv.block.relu.wq, true);
  f("edgeconv.block.relu.wu", params.edgeconv.block.relu.wu, true);
  f("edgeconv.dir.w", params.edgeconv.dir.w, true);
  detail::visit_module("module1", params.module1, f);
  detail::visit_module("module2", params.module2, f);
  for (std::size_t i = 0; i < params.mlp.size(); ++i) {
    const std::string prefix = "mlp." + std::to_string(i);
    f(prefix + ".w", params.mlp[i].w, true);
    f(prefix + ".b", params.mlp[i].b, true);
    detail::visit_bn(prefix + ".bn", params.mlp[i].bn, f);
  }
  f("gem.p", params.gem.p, true);
  f("gem.proj.w", params.gem.proj_w, true);
  f("gem.proj.b", params.gem.proj_b, true);
}

template <typename S>
long long param_count(const ModelParams<S>& params) {
  long long total = 0;
  visit_tensors(params, [&](const std::string&, auto& t, bool trainable) {
    if (trainable) total += static_cast<long long>(t.size());
  });
  return total;
}

template <typename S>
std::vector<ParamCountEntry> param_breakdown(const ModelParams<S>& params) {
  std::vector<ParamCountEntry> out;
  visit_tensors(params, [&](const std::string& name, auto& t, bool trainable) {
    if (trainable) out.push_back({name, static_cast<long long>(t.size())});
  });
  return out;
}

template <typename TO, typename FROM>
ModelParams<TO> cast_params(const ModelParams<FROM>& src, const ModelConfig& cfg) {
  ModelParams<TO> dst = init_params<TO>(cfg, 0);
  std::vector<const Mat<FROM>*> tensors;
  visit_tensors(src, [&](const std::string&, auto& t, bool) { tensors.push_back(&t); });
  std::size_t at = 0;
  visit_tensors(dst, [&](const std::string&, auto& t, bool) {
    t = tensors[at++]->template cast<TO>();
  });
  return dst;
}

// ---------------------------------------------------------------------------

namespace detail {

inline PointCloud subsample(const PointCloud& cloud, int target) {
  if (target <= 0 || cloud.size() <= target) return cloud;
  PointCloud out;
  out.pts.resize(target, 3);
  for (int i = 0; i < target; ++i) {
    const Index src = static_cast<Index>((static_cast<long long>(i) * cloud.size()) / target);
    out.pts.row(i) = cloud.pts.row(src);
  }
  return out;
}

}  // namespace detail

template <typename S>
Mat<S> forward_batch(const std::vector<PointCloud>& clouds_in, const ModelParams<S>& params,
                     const ModelConfig& cfg, RunMode mode, ModelCache<S>* cache,
                     ModelStatUpdates<S>* stats, StageTaps<S>* taps) {
  cfg.validate();
  if (clouds_in.empty()) throw std::invalid_argument("forward: empty batch");
  const bool training = mode == RunMode::kTrain;

  std::vector<PointCloud> clouds;
  clouds.reserve(clouds_in.size());
  for (const auto& c : clouds_in) clouds.push_back(detail::subsample(c, cfg.n_points));
  for (const auto& c : clouds) {
    if (c.size() < cfg.min_points()) {
      throw std::invalid_argument("forward: cloud with " + std::to_string(c.size()) +
                                  " points is smaller than the required " +
                                  std::to_string(cfg.min_points()));
    }
  }

  const Index b = static_cast<Index>(clouds.size());
  Segments seg(b + 1, 0), eseg(b + 1, 0);
  for (Index i = 0; i < b; ++i) {
    seg[i + 1] = seg[i] + clouds[i].size();
    eseg[i + 1] = eseg[i] + clouds[i].size() * cfg.k_edgeconv;
  }
  const Index n_total = seg.back();
  const Index c = cfg.c_equi;

  std::vector<KnnGraph> graphs_edge, graphs_ri;
  for (const auto& cl : clouds) {
    graphs_edge.push_back(knn(cl, cfg.k_edgeconv));
    if (!cfg.use_neighborhood) {
      graphs_ri.push_back(KnnGraph::self_graph(cl.size()));
    } else if (cfg.k_ri == cfg.k_edgeconv) {
      graphs_ri.push_back(graphs_edge.back());
    } else {
      graphs_ri.push_back(knn(cl, cfg.k_ri));
    }
  }

  // RE-EdgeConv. Training keeps the whole edge set so batch-norm statistics
  // span the batch; inference streams per-cloud chunks to bound memory.
  VecFeat<S> edge_out(n_total, c);
  if (training || cache) {
    const int ch = edge_feature_channels(cfg.edgeconv_mode);
    VecFeat<S> edge_in(eseg.back(), ch);
    for (Index i = 0; i < b; ++i) {
      edge_in.data.middleRows(eseg[i], eseg[i + 1] - eseg[i]) =
          edge_features<S>(clouds[i], graphs_edge[i], cfg.edgeconv_mode).data;
    }
    VnBlockCache<S> block_cache;
    VecFeat<S> block_out =
        vn_block_forward(edge_in, params.edgeconv.block, training, cache ? &block_cache : nullptr,
                         stats ? &stats->edge : nullptr);
    std::vector<EdgePoolCache> pools(b);
    for (Index i = 0; i < b; ++i) {
      VecFeat<S> piece(eseg[i + 1] - eseg[i], c);
      piece.data = block_out.data.middleRows(eseg[i], piece.n);
      VecFeat<S> pooled = edge_max_pool(piece, clouds[i].size(), cfg.k_edgeconv,
                                        params.edgeconv.dir, cfg.maxpool_norm_select,
                                        cache ? &pools[i] : nullptr);
      edge_out.data.middleRows(seg[i], pooled.n) = pooled.data;
    }
    if (cache) {
      cache->edge_in = std::move(edge_in);
      cache->edge_block = std::move(block_cache);
      cache->edge_block_out = std::move(block_out);
      cache->edge_pool = std::move(pools);
    }
  } else {
    const Index chunk_points = 512;
    for (Index i = 0; i < b; ++i) {
      const Index n_i = clouds[i].size();
      for (Index p0 = 0; p0 < n_i; p0 += chunk_points) {
        const Index pts = std::min(chunk_points, n_i - p0);
        // Edge features for this point range only; neighbors still come from
        // the full cloud.
        VecFeat<S> e(pts * cfg.k_edgeconv, edge_feature_channels(cfg.edgeconv_mode));
        for (Index ii = 0; ii < pts; ++ii) {
          const Index pi = p0 + ii;
          const Vec3 xi = clouds[i].point(pi);
          const Vec3 xc = graphs_edge[i].centroids.row(pi).transpose();
          for (int jj = 0; jj < cfg.k_edgeconv; ++jj) {
            const Index row = ii * cfg.k_edgeconv + jj;
            const Vec3 xj = clouds[i].point(graphs_edge[i].neighbors(pi, jj));
            const Vec3 cr = cross3(xi, xj);
            for (int d = 0; d < 3; ++d) {
              e.at(row, 0, d) = static_cast<S>(xi(d));
              e.at(row, 1, d) = static_cast<S>(xi(d) - xj(d));
              e.at(row, 2, d) = static_cast<S>(cr(d));
              if (cfg.edgeconv_mode == EdgeFeatureMode::kDim5) {
                e.at(row, 3, d) = static_cast<S>(xc(d) - xj(d));
                e.at(row, 4, d) = static_cast<S>(xi(d) - xc(d));
              }
            }
          }
        }
        VecFeat<S> h = vn_block_forward(e, params.edgeconv.block, false);
        VecFeat<S> pooled = edge_max_pool(h, pts, cfg.k_edgeconv, params.edgeconv.dir,
                                          cfg.maxpool_norm_select);
        edge_out.data.middleRows(seg[i] + p0, pts) = pooled.data;
      }
    }
  }

  // Two dense RE-Modules; the second consumes F3 of the first plus the
  // EdgeConv output, and only the second feeds the invariant layer.
  ReModuleOutputs<S> mod1 = re_module_forward(edge_out, params.module1, seg, training,
                                              cfg.use_attention, cache ? &cache->mod1_cache : nullptr,
                                              stats ? &stats->mod1 : nullptr, /*want_fo=*/false);
  VecFeat<S> mod2_in(n_total, c);
  mod2_in.data = mod1.f3.data + edge_out.data;
  ReModuleOutputs<S> mod2 = re_module_forward(mod2_in, params.module2, seg, training,
                                              cfg.use_attention, cache ? &cache->mod2_cache : nullptr,
                                              stats ? &stats->mod2 : nullptr,
                                              /*want_fo=*/cfg.use_d_cos);

  // Rotation-invariant neighborhood features.
  RiOptions ri_opt{cfg.use_d_euc, cfg.use_d_cos, cfg.ri_swap_pair};
  Mat<S> ri_out(n_total, cfg.ri_dim());
  std::vector<RiCache> ri_caches(b);
  for (Index i = 0; i < b; ++i) {
    const Index lo = seg[i], n_i = seg[i + 1] - lo;
    VecFeat<S> f1(n_i, c), f2(n_i, c), f3(n_i, c), fo(n_i, 1);
    f1.data = mod2.f1.data.middleRows(lo, n_i);
    f2.data = mod2.f2.data.middleRows(lo, n_i);
    f3.data = mod2.f3.data.middleRows(lo, n_i);
    if (cfg.use_d_cos) {
      fo.data = mod2.fo.data.middleRows(lo, n_i);
    } else {
      fo.data.setZero();
    }
    ri_out.middleRows(lo, n_i) =
        ri_neighborhood(f1, f2, f3, fo, graphs_ri[i], ri_opt, cache ? &ri_caches[i] : nullptr);
  }

  if (taps) {
    taps->equi = mod2.f3;
    taps->ri = ri_out;
  }

  // Shared MLP head. The bias sits after the normalization, where it is not
  // cancelled by the batch statistics.
  Mat<S> x = ri_out;
  std::vector<MlpLayerCache<S>> mlp_caches;
  if (stats) stats->mlp.resize(params.mlp.size());
  for (std::size_t li = 0; li < params.mlp.size(); ++li) {
    const auto& layer = params.mlp[li];
    MlpLayerCache<S> lc;
    Mat<S> lin = x * layer.w.transpose();
    Mat<S> bn = scalar_bn_forward(lin, layer.bn, training, cache ? &lc.bn : nullptr,
                                  stats ? &stats->mlp[li] : nullptr);
    Mat<S> pre = bn.rowwise() + layer.b.col(0).transpose();
    Mat<S> act = pre.cwiseMax(S(0));
    if (cache) {
      lc.input = std::move(x);
      lc.lin_out = std::move(lin);
      lc.pre_act = std::move(pre);
      mlp_caches.push_back(std::move(lc));
    }
    x = std::move(act);
  }

  // GeM pooling per cloud, then the projection to the descriptor width.
  const S p = params.gem.p(0, 0);
  const Index mlp_out_dim = x.cols();
  Mat<S> clamped = x.cwiseMax(static_cast<S>(1e-6));
  Mat<S> powed = clamped.array().pow(p).matrix();
  Mat<S> m(b, mlp_out_dim), y(b, mlp_out_dim);
  for (Index i = 0; i < b; ++i) {
    m.row(i) = powed.middleRows(seg[i], seg[i + 1] - seg[i]).colwise().mean();
    y.row(i) = m.row(i).array().pow(S(1) / p);
  }
  Mat<S> desc = (y * params.gem.proj_w.transpose()).rowwise() + params.gem.proj_b.col(0).transpose();

  Vec<S> desc_norms;
  Mat<S> pre_norm;
  if (cfg.l2_normalize_descriptor) {
    pre_norm = desc;
    desc_norms = desc.rowwise().norm();
    for (Index i = 0; i < b; ++i) {
      const S nn = desc_norms(i);
      if (nn > S(0)) desc.row(i) /= nn;
    }
  }

  if (cache) {
    cache->seg = seg;
    cache->eseg = eseg;
    cache->clouds = std::move(clouds);
    cache->graphs_edge = std::move(graphs_edge);
    cache->graphs_ri = std::move(graphs_ri);
    cache->edge_out = std::move(edge_out);
    cache->mod1_out = std::move(mod1);
    cache->mod2_in = std::move(mod2_in);
    cache->mod2_out = std::move(mod2);
    cache->ri = std::move(ri_caches);
    cache->ri_out = std::move(ri_out);
    cache->mlp = std::move(mlp_caches);
    cache->mlp_out = std::move(x);
    cache->gem = GemCache<S>{std::move(clamped), std::move(powed), std::move(m), std::move(y),
                             std::move(pre_norm), std::move(desc_norms)};
    cache->desc = desc;
  }
  return desc;
}

template <typename S>
Gradients<S> backward_batch(const ModelParams<S>& params, const ModelConfig& cfg,
                            const ModelCache<S>& cache, const Mat<S>& ddesc_in) {
  Gradients<S> g = zero_gradients<S>(cfg);
  const Index b = static_cast<Index>(cache.clouds.size());
  const Index c = cfg.c_equi;
  const Segments& seg = cache.seg;

  Mat<S> ddesc = ddesc_in;
  if (cfg.l2_normalize_descriptor) {
    for (Index i = 0; i < b; ++i) {
      const S nn = cache.gem.norms(i);
      if (nn <= S(0)) continue;
      const Eigen::Matrix<S, 1, Eigen::Dynamic> yhat = cache.gem.pre_norm.row(i) / nn;
      ddesc.row(i) = (ddesc.row(i) - (ddesc.row(i).dot(yhat)) * yhat) / nn;
    }
  }

  // Projection.
  g.gem.proj_w += ddesc.transpose() * cache.gem.y;
  g.gem.proj_b.col(0) += ddesc.colwise().sum().transpose();
  Mat<S> gy = ddesc * params.gem.proj_w;

  // GeM pooling.
  const S p = params.gem.p(0, 0);
  Mat<S> gmlp = Mat<S>::Zero(cache.mlp_out.rows(), cache.mlp_out.cols());
  S gp = S(0);
  for (Index i = 0; i < b; ++i) {
    const Index lo = seg[i], n_i = seg[i + 1] - lo;
    const auto cl = cache.gem.clamped.middleRows(lo, n_i).array();
    const auto pw = cache.gem.powed.middleRows(lo, n_i).array();
    const auto yrow = cache.gem.y.row(i).array();
    const auto mrow = cache.gem.m.row(i).array();
    const auto grow = gy.row(i).array();
    // dy/dc = y^(1-p) c^(p-1) / n
    Eigen::Array<S, 1, Eigen::Dynamic> coef = grow * yrow.pow(S(1) - p) / static_cast<S>(n_i);
    gmlp.middleRows(lo, n_i) +=
        ((pw / cl).rowwise() * coef).matrix();  // c^(p-1) = c^p / c, c >= 1e-6
    // dy/dp = y * (-ln m / p^2 + mean(c^p ln c) / (p m))
    const Eigen::Array<S, 1, Eigen::Dynamic> mean_pow_log =
        (pw * cl.log()).colwise().mean();
    gp += (grow * yrow * (-mrow.log() / (p * p) + mean_pow_log / (p * mrow))).sum();
  }
  g.gem.p(0, 0) += gp;
  // Clamp: only entries above the floor pass gradient.
  gmlp = (cache.mlp_out.array() > S(1e-6)).select(gmlp, S(0));

  // MLP head in reverse.
  Mat<S> gx = std::move(gmlp);
  for (std::size_t li = params.mlp.size(); li-- > 0;) {
    const auto& layer = params.mlp[li];
    const auto& lc = cache.mlp[li];
    Mat<S> gpre = (lc.pre_act.array() > S(0)).select(gx, S(0));
    g.mlp[li].b.col(0) += gpre.colwise().sum().transpose();
    Mat<S> glin = scalar_bn_backward(layer.bn, lc.bn, gpre, g.mlp[li].bn);
    g.mlp[li].w += glin.transpose() * lc.input;
    gx = glin * layer.w;
  }

  // Invariant layer.
  VecFeat<S> gf1(seg.back(), c), gf2(seg.back(), c), gf3(seg.back(), c), gfo(seg.back(), 1);
  RiOptions ri_opt{cfg.use_d_euc, cfg.use_d_cos, cfg.ri_swap_pair};
  for (Index i = 0; i < b; ++i) {
    const Index lo = seg[i], n_i = seg[i + 1] - lo;
    VecFeat<S> f1(n_i, c), f2(n_i, c), f3(n_i, c), fo(n_i, 1);
    f1.data = cache.mod2_out.f1.data.middleRows(lo, n_i);
    f2.data = cache.mod2_out.f2.data.middleRows(lo, n_i);
    f3.data = cache.mod2_out.f3.data.middleRows(lo, n_i);
    if (cfg.use_d_cos) fo.data = cache.mod2_out.fo.data.middleRows(lo, n_i);
    VecFeat<S> pgf1(n_i, c), pgf2(n_i, c), pgf3(n_i, c), pgfo(n_i, 1);
    ri_neighborhood_backward(f1, f2, f3, fo, cache.graphs_ri[i], ri_opt, cache.ri[i],
                             Mat<S>(gx.middleRows(lo, n_i)), pgf1, pgf2, pgf3, pgfo);
    gf1.data.middleRows(lo, n_i) = pgf1.data;
    gf2.data.middleRows(lo, n_i) = pgf2.data;
    gf3.data.middleRows(lo, n_i) = pgf3.data;
    gfo.data.middleRows(lo, n_i) = pgfo.data;
  }

  // Module 2, then the dense skip into module 1 and EdgeConv.
  VecFeat<S> gfo_arg = cfg.use_d_cos ? gfo : VecFeat<S>(0, 1);
  VecFeat<S> gmod2_in = re_module_backward(cache.mod2_in, params.module2, seg, cache.mod2_cache,
                                           cache.mod2_out, gf1, gf2, gf3, gfo_arg, g.module2);

  VecFeat<S> zero_c(seg.back(), c);
  VecFeat<S> gedge = re_module_backward(cache.edge_out, params.module1, seg, cache.mod1_cache,
                                        cache.mod1_out, zero_c, zero_c, gmod2_in,
                                        VecFeat<S>(0, 1), g.module1);
  gedge.data += gmod2_in.data;

  // EdgeConv.
  VecFeat<S> gblock_out(cache.eseg.back(), c);
  for (Index i = 0; i < b; ++i) {
    const Index lo = seg[i], n_i = seg[i + 1] - lo;
    VecFeat<S> gpooled(n_i, c);
    gpooled.data = gedge.data.middleRows(lo, n_i);
    VecFeat<S> gpiece =
        edge_max_pool_backward(gpooled, cache.eseg[i + 1] - cache.eseg[i], cache.edge_pool[i]);
    gblock_out.data.middleRows(cache.eseg[i], gpiece.n) = gpiece.data;
  }
  vn_block_backward(cache.edge_in, params.edgeconv.block, cache.edge_block, gblock_out,
                    g.edgeconv.block);
  // The pooling direction map takes no gradient: the selection index is the
  // only path and it is piecewise constant.
  return g;
}

}  // namespace vni
