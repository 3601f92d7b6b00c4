#include "vni/eval.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <iomanip>

namespace vni {

ExtractResult extract_all(const DatasetIndex& index, const ModelParams<double>& params,
                          const ModelConfig& cfg, std::optional<std::uint64_t> rotation_seed_base,
                          RotationMode rotation_mode) {
  ExtractResult res;
  std::vector<Eigen::VectorXd> rows;
  for (const auto& rec : index.records) {
    try {
      PointCloud cloud = load_frame(rec.path);
      if (rotation_seed_base) {
        cloud = apply_rotation(
            cloud, sample_rotation(*rotation_seed_base + static_cast<std::uint64_t>(rec.id),
                                   rotation_mode));
      }
      const Eigen::VectorXd desc = forward<double>(cloud, params, cfg, RunMode::kInfer);
      DbEntry entry;
      entry.id = static_cast<std::uint32_t>(rec.id);
      entry.northing = rec.northing;
      entry.easting = rec.easting;
      entry.descriptor = desc.cast<float>();
      res.db.entries.push_back(std::move(entry));
      rows.push_back(desc);
    } catch (const std::exception& e) {
      res.failures.push_back({rec.id, rec.path, e.what()});
    }
  }
  res.descriptors.resize(static_cast<Index>(rows.size()), rows.empty() ? 0 : rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i) res.descriptors.row(static_cast<Index>(i)) = rows[i];
  return res;
}

Eigen::VectorXf raw_coordinate_descriptor(const PointCloud& cloud, int dim) {
  Eigen::VectorXf out = Eigen::VectorXf::Zero(dim);
  Index at = 0;
  for (Index i = 0; i < cloud.size() && at < dim; ++i) {
    for (int d = 0; d < 3 && at < dim; ++d) out(at++) = static_cast<float>(cloud.pts(i, d));
  }
  return out;
}

ExtractResult extract_all_raw_control(const DatasetIndex& index, int dim,
                                      std::optional<std::uint64_t> rotation_seed_base,
                                      RotationMode rotation_mode) {
  ExtractResult res;
  std::vector<Eigen::VectorXf> rows;
  for (const auto& rec : index.records) {
    try {
      PointCloud cloud = load_frame(rec.path);
      if (rotation_seed_base) {
        cloud = apply_rotation(
            cloud, sample_rotation(*rotation_seed_base + static_cast<std::uint64_t>(rec.id),
                                   rotation_mode));
      }
      DbEntry entry;
      entry.id = static_cast<std::uint32_t>(rec.id);
      entry.northing = rec.northing;
      entry.easting = rec.easting;
      entry.descriptor = raw_coordinate_descriptor(cloud, dim);
      res.db.entries.push_back(std::move(entry));
      rows.push_back(entry.descriptor);
    } catch (const std::exception& e) {
      res.failures.push_back({rec.id, rec.path, e.what()});
    }
  }
  res.descriptors.resize(static_cast<Index>(rows.size()), dim);
  for (std::size_t i = 0; i < rows.size(); ++i)
    res.descriptors.row(static_cast<Index>(i)) = rows[i].cast<double>();
  return res;
}

RecallReport recall(const DescriptorDB& queries, const DescriptorDB& refs, double eval_radius) {
  if (queries.entries.empty() || refs.entries.empty()) {
    throw std::invalid_argument("recall: query and reference sets must be non-empty");
  }
  if (queries.dim() != refs.dim()) {
    throw std::invalid_argument("recall: descriptor dimensions differ");
  }
  RecallReport rep;
  rep.reference_count = static_cast<Index>(refs.entries.size());
  rep.top_pct_k = static_cast<int>(
      std::ceil(0.01 * static_cast<double>(refs.entries.size())));

  Index hits1 = 0, hits_pct = 0;
  for (const auto& q : queries.entries) {
    // ground truth: references within the eval radius in the plane
    std::vector<bool> in_range(refs.entries.size());
    bool any = false;
    for (std::size_t r = 0; r < refs.entries.size(); ++r) {
      const double dn = refs.entries[r].northing - q.northing;
      const double de = refs.entries[r].easting - q.easting;
      in_range[r] = std::sqrt(dn * dn + de * de) <= eval_radius;
      any = any || in_range[r];
    }
    if (!any) {
      ++rep.queries_excluded;
      continue;
    }

    std::vector<std::size_t> order(refs.entries.size());
    for (std::size_t r = 0; r < order.size(); ++r) order[r] = r;
    std::vector<double> dist(refs.entries.size());
    for (std::size_t r = 0; r < order.size(); ++r) {
      dist[r] = (refs.entries[r].descriptor.cast<double>() - q.descriptor.cast<double>()).norm();
    }
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if (dist[a] != dist[b]) return dist[a] < dist[b];
      return refs.entries[a].id < refs.entries[b].id;
    });

    ++rep.queries_evaluated;
    rep.query_ids.push_back(q.id);
    rep.top1_ids.push_back(refs.entries[order[0]].id);
    const bool hit1 = in_range[order[0]];
    rep.top1_hit.push_back(hit1);
    if (hit1) ++hits1;
    bool hit_pct = false;
    for (int r = 0; r < rep.top_pct_k && r < static_cast<int>(order.size()); ++r) {
      hit_pct = hit_pct || in_range[order[static_cast<std::size_t>(r)]];
    }
    if (hit_pct) ++hits_pct;
  }
  if (rep.queries_evaluated > 0) {
    rep.ar_at_1 = static_cast<double>(hits1) / static_cast<double>(rep.queries_evaluated);
    rep.ar_at_1pct = static_cast<double>(hits_pct) / static_cast<double>(rep.queries_evaluated);
  }
  return rep;
}

StressReport rotation_stress(const DatasetIndex& queries, const DatasetIndex& refs,
                             const ModelParams<double>& params, const ModelConfig& cfg,
                             RotationMode mode, int trials, std::uint64_t seed) {
  StressReport rep;
  rep.mode = mode;
  rep.trials = trials;

  const ExtractResult ref_ex = extract_all(refs, params, cfg);
  const ExtractResult base = extract_all(queries, params, cfg);
  if (!base.failures.empty() || !ref_ex.failures.empty()) {
    throw ValidationError("rotation_stress: frame extraction failed");
  }
  rep.base_recall = recall(base.db, ref_ex.db);

  for (int t = 0; t < trials; ++t) {
    const std::uint64_t trial_seed = seed + static_cast<std::uint64_t>(t) * 1000003ULL;
    const ExtractResult rot = extract_all(queries, params, cfg, trial_seed, mode);
    if (rot.db.entries.size() != base.db.entries.size()) {
      throw ValidationError("rotation_stress: rotated extraction lost frames");
    }
    double residual = 0.0;
    for (Index i = 0; i < base.descriptors.rows(); ++i) {
      const double rel = (rot.descriptors.row(i) - base.descriptors.row(i)).norm() /
                         (base.descriptors.row(i).norm() + 1e-30);
      residual = std::max(residual, rel);
    }
    rep.max_residual = std::max(rep.max_residual, residual);
    rep.per_trial.push_back({t, trial_seed, residual});

    const RecallReport rot_recall = recall(rot.db, ref_ex.db);
    rep.ar1_delta = std::max(rep.ar1_delta, std::abs(rot_recall.ar_at_1 - rep.base_recall.ar_at_1));
    rep.ar1pct_delta =
        std::max(rep.ar1pct_delta, std::abs(rot_recall.ar_at_1pct - rep.base_recall.ar_at_1pct));
    rep.rankings_identical =
        rep.rankings_identical && rot_recall.top1_ids == rep.base_recall.top1_ids;
  }
  return rep;
}

void write_stress_jsonl(const StressReport& report, std::ostream& out) {
  for (const auto& t : report.per_trial) {
    nlohmann::json j{{"trial", t.trial}, {"seed", t.seed}, {"residual", t.residual}};
    out << j.dump() << "\n";
  }
  nlohmann::json summary{{"mode", report.mode == RotationMode::kSo3 ? "so3" : "z_axis"},
                         {"trials", report.trials},
                         {"max_residual", report.max_residual},
                         {"ar1_base", report.base_recall.ar_at_1},
                         {"ar1pct_base", report.base_recall.ar_at_1pct},
                         {"ar1_delta", report.ar1_delta},
                         {"ar1pct_delta", report.ar1pct_delta},
                         {"rankings_identical", report.rankings_identical}};
  out << summary.dump() << "\n";
}

// ---------------------------------------------------------------------------

namespace {

struct CheckSizes {
  Index n = 64;
  Index c = 8;
  int k = 8;
};

template <typename S>
double layer_residual(const std::string& target, std::uint64_t seed, int trial) {
  const CheckSizes sz;
  Rng rng(seed * 1000003ULL + static_cast<std::uint64_t>(trial));
  const Rotation rot = sample_rotation(seed * 7919ULL + static_cast<std::uint64_t>(trial) + 1,
                                       RotationMode::kSo3);

  const auto rel = [](const VecFeat<S>& got, const VecFeat<S>& want) {
    return static_cast<double>((got.data - want.data).norm() /
                               (want.data.norm() + S(1e-30)));
  };

  if (target == "vn_linear") {
    const VecFeat<S> v = random_feat<S>(rng, sz.n, sz.c);
    const VnLinearParams<S> p{detail::init_linear<S>(rng, sz.c + 2, sz.c)};
    return rel(vn_linear(rotated(v, rot), p), rotated(vn_linear(v, p), rot));
  }
  if (target == "vn_relu") {
    const VecFeat<S> v = random_feat<S>(rng, sz.n, sz.c);
    const VnReluParams<S> p{detail::init_linear<S>(rng, sz.c, sz.c),
                            detail::init_linear<S>(rng, sz.c, sz.c)};
    return rel(vn_relu(rotated(v, rot), p), rotated(vn_relu(v, p), rot));
  }
  if (target == "vn_batchnorm") {
    const VecFeat<S> v = random_feat<S>(rng, sz.n, sz.c);
    auto state = VnBatchNormState<S>::init(sz.c);
    for (Index i = 0; i < sz.c; ++i) {
      state.gamma(i, 0) = S(0.5) + S(0.1) * static_cast<S>(i);
      state.beta(i, 0) = S(0.05) * static_cast<S>(i);
    }
    return rel(vn_batch_norm_forward(rotated(v, rot), state, true),
               rotated(vn_batch_norm_forward(v, state, true), rot));
  }
  if (target == "vn_maxpool") {
    const VecFeat<S> v = random_feat<S>(rng, sz.k, sz.c);
    const VnLinearParams<S> dir{detail::init_linear<S>(rng, sz.c, sz.c)};
    return rel(vn_max_pool(rotated(v, rot), dir), rotated(vn_max_pool(v, dir), rot));
  }
  if (target == "re_edgeconv") {
    PointCloud cloud;
    cloud.pts.resize(sz.n, 3);
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    for (Index i = 0; i < sz.n; ++i)
      for (int d = 0; d < 3; ++d) cloud.pts(i, d) = dist(rng);
    ModelConfig cfg;
    cfg.c_equi = static_cast<int>(sz.c);
    ModelParams<double> seed_params = init_params<double>(cfg, seed + trial);
    EdgeConvParams<S> p;
    p.block.lin.w = seed_params.edgeconv.block.lin.w.template cast<S>();
    p.block.bn = VnBatchNormState<S>::init(sz.c);
    p.block.relu.wq = seed_params.edgeconv.block.relu.wq.template cast<S>();
    p.block.relu.wu = seed_params.edgeconv.block.relu.wu.template cast<S>();
    p.dir.w = seed_params.edgeconv.dir.w.template cast<S>();
    const PointCloud rotated_cloud = apply_rotation(cloud, rot);
    const VecFeat<S> base =
        re_edge_conv(cloud, knn(cloud, sz.k), p, EdgeFeatureMode::kDim5);
    const VecFeat<S> rot_out =
        re_edge_conv(rotated_cloud, knn(rotated_cloud, sz.k), p, EdgeFeatureMode::kDim5);
    return rel(rot_out, rotated(base, rot));
  }
  if (target == "re_attention") {
    const VecFeat<S> v = random_feat<S>(rng, sz.n, sz.c);
    const ReAttentionParams<S> p{{detail::init_linear<S>(rng, sz.c, sz.c)},
                                 {detail::init_linear<S>(rng, sz.c, sz.c)},
                                 {detail::init_linear<S>(rng, sz.c, sz.c)},
                                 {detail::init_linear<S>(rng, 1, sz.c)}};
    return rel(re_attention(rotated(v, rot), p), rotated(re_attention(v, p), rot));
  }
  if (target == "re_module") {
    const VecFeat<S> v = random_feat<S>(rng, sz.n, sz.c);
    ModelConfig cfg;
    cfg.c_equi = static_cast<int>(sz.c);
    const ModelParams<double> seed_params = init_params<double>(cfg, seed + trial);
    const ModelParams<S> cast = cast_params<S>(seed_params, cfg);
    const ReModuleOutputs<S> base = re_module(v, cast.module1);
    const ReModuleOutputs<S> rot_out = re_module(rotated(v, rot), cast.module1);
    double res = rel(rot_out.f1, rotated(base.f1, rot));
    res = std::max(res, rel(rot_out.f2, rotated(base.f2, rot)));
    res = std::max(res, rel(rot_out.f3, rotated(base.f3, rot)));
    res = std::max(res, rel(rot_out.fo, rotated(base.fo, rot)));
    return res;
  }
  if (target == "ri_euclidean") {
    const VecFeat<S> a = random_feat<S>(rng, sz.n, sz.c);
    const VecFeat<S> b2 = random_feat<S>(rng, sz.n, sz.c);
    const Mat<S> base = euclidean_distance(a, b2);
    const Mat<S> rot_out = euclidean_distance(rotated(a, rot), rotated(b2, rot));
    return static_cast<double>((rot_out - base).norm() / (base.norm() + S(1e-30)));
  }
  if (target == "ri_cosine") {
    const VecFeat<S> a = random_feat<S>(rng, sz.n, sz.c);
    const VecFeat<S> o = random_feat<S>(rng, sz.n, 1);
    const Mat<S> base = cosine_distance(a, o);
    const Mat<S> rot_out = cosine_distance(rotated(a, rot), rotated(o, rot));
    return static_cast<double>((rot_out - base).norm() / (base.norm() + S(1e-30)));
  }
  if (target == "ri_neighborhood") {
    PointCloud cloud;
    cloud.pts.resize(sz.n, 3);
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    for (Index i = 0; i < sz.n; ++i)
      for (int d = 0; d < 3; ++d) cloud.pts(i, d) = dist(rng);
    const KnnGraph g = knn(cloud, sz.k);
    const KnnGraph g_rot = knn(apply_rotation(cloud, rot), sz.k);
    const VecFeat<S> f1 = random_feat<S>(rng, sz.n, sz.c);
    const VecFeat<S> f2 = random_feat<S>(rng, sz.n, sz.c);
    const VecFeat<S> f3 = random_feat<S>(rng, sz.n, sz.c);
    const VecFeat<S> fo = random_feat<S>(rng, sz.n, 1);
    const Mat<S> base = ri_neighborhood(f1, f2, f3, fo, g);
    const Mat<S> rot_out = ri_neighborhood(rotated(f1, rot), rotated(f2, rot), rotated(f3, rot),
                                           rotated(fo, rot), g_rot);
    return static_cast<double>((rot_out - base).norm() / (base.norm() + S(1e-30)));
  }
  if (target == "model") {
    ModelConfig cfg;
    cfg.c_equi = 16;
    cfg.mlp_dims = {32, 64};
    cfg.desc_dim = 32;
    cfg.k_edgeconv = sz.k;
    cfg.k_ri = sz.k;
    PointCloud cloud;
    cloud.pts.resize(128, 3);
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    for (Index i = 0; i < 128; ++i)
      for (int d = 0; d < 3; ++d) cloud.pts(i, d) = dist(rng);
    const ModelParams<double> pd = init_params<double>(cfg, seed + trial);
    const ModelParams<S> p = cast_params<S>(pd, cfg);
    const Vec<S> base = forward<S>(cloud, p, cfg);
    const Vec<S> rot_out = forward<S>(apply_rotation(cloud, rot), p, cfg);
    return static_cast<double>((rot_out - base).norm() / (base.norm() + S(1e-30)));
  }
  throw std::invalid_argument("check_equivariance: unknown target '" + target + "'");
}

}  // namespace

std::vector<std::string> conformance_targets() {
  return {"vn_linear",    "vn_relu",      "vn_batchnorm",    "vn_maxpool", "re_edgeconv",
          "re_attention", "re_module",    "ri_euclidean",    "ri_cosine",  "ri_neighborhood",
          "model"};
}

ConformanceReport check_equivariance(const std::string& target, int trials, Precision precision,
                                     std::uint64_t seed) {
  ConformanceReport rep;
  rep.target = target;
  rep.trials = trials;
  if (precision == Precision::kF64) {
    rep.tolerance = 1e-10;
  } else {
    rep.tolerance = target == "model" ? 1e-3 : 1e-4;
  }
  for (int t = 0; t < trials; ++t) {
    const double r = precision == Precision::kF64 ? layer_residual<double>(target, seed, t)
                                                  : layer_residual<float>(target, seed, t);
    rep.max_residual = std::max(rep.max_residual, r);
  }
  rep.pass = rep.max_residual < rep.tolerance;
  return rep;
}

void dump_features(const PointCloud& cloud, const ModelParams<double>& params,
                   const ModelConfig& cfg, DumpStage stage, const std::string& out_path) {
  std::ofstream out(out_path);
  if (!out) throw FormatError("cannot open dump output: " + out_path);
  out << std::setprecision(17);

  if (stage == DumpStage::kDescriptor) {
    const Eigen::VectorXd desc = forward<double>(cloud, params, cfg, RunMode::kInfer);
    for (Index i = 0; i < desc.size(); ++i) out << (i ? "," : "") << desc(i);
    out << "\n";
    return;
  }

  StageTaps<double> taps;
  forward_batch<double>({cloud}, params, cfg, RunMode::kInfer, nullptr, nullptr, &taps);
  if (stage == DumpStage::kRi) {
    for (Index i = 0; i < taps.ri.rows(); ++i) {
      for (Index j = 0; j < taps.ri.cols(); ++j) out << (j ? "," : "") << taps.ri(i, j);
      out << "\n";
    }
  } else {
    for (Index i = 0; i < taps.equi.n; ++i) {
      for (Index j = 0; j < taps.equi.data.cols(); ++j)
        out << (j ? "," : "") << taps.equi.data(i, j);
      out << "\n";
    }
  }
}

}  // namespace vni
