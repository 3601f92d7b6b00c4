#pragma once

#include "vni/data.hpp"
#include "vni/model.hpp"

#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace vni {

// ---------------------------------------------------------------------------
// Triplet loss (squared Euclidean descriptor distances)

template <typename S>
S triplet_loss(S d_ap, S d_an, S margin) {
  return std::max(d_ap - d_an + margin, S(0));
}

struct Triplet {
  Index anchor, positive, negative;
};

struct MiningResult {
  std::vector<Triplet> triplets;  // zero-loss triplets are dropped
  Index anchors_without_positive = 0;
  Index anchors_total = 0;
};

/// Batch-hard mining: per anchor, the farthest in-batch positive and the
/// nearest in-batch non-positive (self excluded), both by squared Euclidean
/// distance. Anchors whose hinge is zero are dropped; anchors without any
/// in-batch positive are skipped and counted.
template <typename S>
MiningResult batch_hard_mine(const Mat<S>& descriptors,
                             const Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>& positive_mask,
                             S margin) {
  const Index b = descriptors.rows();
  if (positive_mask.rows() != b || positive_mask.cols() != b) {
    throw std::invalid_argument("batch_hard_mine: mask must be BxB");
  }
  Mat<S> d2(b, b);
  for (Index i = 0; i < b; ++i)
    for (Index j = 0; j < b; ++j) d2(i, j) = (descriptors.row(i) - descriptors.row(j)).squaredNorm();

  MiningResult res;
  res.anchors_total = b;
  for (Index a = 0; a < b; ++a) {
    Index hardest_pos = -1, hardest_neg = -1;
    for (Index j = 0; j < b; ++j) {
      if (j == a) continue;
      if (positive_mask(a, j)) {
        if (hardest_pos < 0 || d2(a, j) > d2(a, hardest_pos)) hardest_pos = j;
      } else {
        if (hardest_neg < 0 || d2(a, j) < d2(a, hardest_neg)) hardest_neg = j;
      }
    }
    if (hardest_pos < 0) {
      ++res.anchors_without_positive;
      continue;
    }
    if (hardest_neg < 0) continue;  // no candidate negative in batch
    if (triplet_loss(d2(a, hardest_pos), d2(a, hardest_neg), margin) > S(0)) {
      res.triplets.push_back({a, hardest_pos, hardest_neg});
    }
  }
  return res;
}

/// Mean triplet loss over the list and its gradient w.r.t. the descriptors.
/// Hinges exactly at zero contribute zero gradient.
template <typename S>
S triplet_loss_batch(const Mat<S>& descriptors, const std::vector<Triplet>& triplets, S margin,
                     Mat<S>* ddesc = nullptr) {
  if (ddesc) ddesc->setZero(descriptors.rows(), descriptors.cols());
  if (triplets.empty()) return S(0);
  S total = S(0);
  const S inv = S(1) / static_cast<S>(triplets.size());
  for (const Triplet& t : triplets) {
    const auto xa = descriptors.row(t.anchor);
    const auto xp = descriptors.row(t.positive);
    const auto xn = descriptors.row(t.negative);
    const S d_ap = (xa - xp).squaredNorm();
    const S d_an = (xa - xn).squaredNorm();
    const S hinge = triplet_loss(d_ap, d_an, margin);
    total += hinge;
    if (ddesc && hinge > S(0)) {
      ddesc->row(t.anchor) += inv * (S(2) * (xa - xp) - S(2) * (xa - xn));
      ddesc->row(t.positive) += inv * (S(-2) * (xa - xp));
      ddesc->row(t.negative) += inv * (S(2) * (xa - xn));
    }
  }
  return total * inv;
}

/// Spec surface: loss and parameter gradients for a cached batch forward and
/// a fixed triplet list.
template <typename S>
std::pair<S, Gradients<S>> backward(const ModelParams<S>& params, const ModelConfig& cfg,
                                    const ModelCache<S>& cache,
                                    const std::vector<Triplet>& triplets, S margin) {
  Mat<S> ddesc;
  const S loss = triplet_loss_batch(cache.desc, triplets, margin, &ddesc);
  return {loss, backward_batch(params, cfg, cache, ddesc)};
}

// ---------------------------------------------------------------------------
// Optimizer (adaptive moments with bias correction)

struct OptimHyper {
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename S>
struct OptimState {
  std::vector<Mat<S>> m, v;  // one slot per trainable tensor, visit order
  long long step = 0;
  OptimHyper hyper;

  static OptimState init(const ModelConfig& cfg, const OptimHyper& hyper) {
    OptimState st;
    st.hyper = hyper;
    ModelParams<S> shape = init_params<S>(cfg, 0);
    visit_tensors(shape, [&](const std::string&, const Mat<S>& t, bool trainable) {
      if (!trainable) return;
      st.m.push_back(Mat<S>::Zero(t.rows(), t.cols()));
      st.v.push_back(Mat<S>::Zero(t.rows(), t.cols()));
    });
    return st;
  }
};

template <typename S>
void optimizer_step(ModelParams<S>& params, const Gradients<S>& grads, OptimState<S>& state,
                    double lr_override = -1.0) {
  const double lr = lr_override >= 0.0 ? lr_override : state.hyper.lr;
  const S b1 = static_cast<S>(state.hyper.beta1);
  const S b2 = static_cast<S>(state.hyper.beta2);
  const S eps = static_cast<S>(state.hyper.eps);
  ++state.step;
  const S bc1 = S(1) - std::pow(b1, static_cast<S>(state.step));
  const S bc2 = S(1) - std::pow(b2, static_cast<S>(state.step));

  std::vector<const Mat<S>*> gslots;
  visit_tensors(grads, [&](const std::string&, const Mat<S>& t, bool trainable) {
    if (trainable) gslots.push_back(&t);
  });
  std::size_t slot = 0;
  visit_tensors(params, [&](const std::string&, Mat<S>& t, bool trainable) {
    if (!trainable) return;
    const Mat<S>& g = *gslots[slot];
    Mat<S>& m = state.m[slot];
    Mat<S>& v = state.v[slot];
    m = b1 * m + (S(1) - b1) * g;
    v = (b2 * v.array() + (S(1) - b2) * g.array().square()).matrix();
    t.array() -=
        static_cast<S>(lr) * (m.array() / bc1) / ((v.array() / bc2).sqrt() + eps);
    ++slot;
  });
}

/// Step decay: base_lr * 0.1^(number of milestones <= epoch).
inline double lr_schedule(int epoch, double base_lr,
                          const std::vector<int>& milestones = {20, 30}, double decay = 0.1) {
  if (epoch < 0) throw std::invalid_argument("lr_schedule: epoch must be >= 0");
  double lr = base_lr;
  for (int m : milestones)
    if (epoch >= m) lr *= decay;
  return lr;
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainConfig {
  double margin = 0.5;
  double base_lr = 0.01;
  int epochs = 40;
  std::vector<int> milestones = {20, 30};
  double lr_decay = 0.1;
  int cells_per_batch = 4;
  int frames_per_cell = 2;
  std::uint64_t seed = 1;
  OptimHyper optim;

  static TrainConfig from_kv(const KvConfig& kv);
  KvConfig to_kv() const;
};

struct EpochStats {
  double mean_loss = 0.0;
  double active_fraction = 0.0;
  int steps = 0;
};

struct TrainResult {
  ModelParams<double> params;
  std::vector<EpochStats> epochs;
};

/// Batch-hard triplet training over a dataset index. Location cells are the
/// connected components of the <=10 m positive graph; each batch draws
/// cells_per_batch cells with frames_per_cell frames each. Log lines are
/// "epoch,step,lr,loss,active_triplets". No rotation augmentation is applied.
TrainResult train_loop(const DatasetIndex& index, const ModelConfig& model_cfg,
                       const TrainConfig& train_cfg, std::ostream* log = nullptr,
                       const std::string& checkpoint_path = "");

// ---------------------------------------------------------------------------
// Branch-margin audit
//
// Finite-difference validation needs every discrete branch (relu half-space
// tests, rectifier signs, clamp floors, argmax selections) to sit a safe
// margin away from its boundary at the base point; this reports the minima.

template <typename S>
struct BranchMargins {
  S relu_dot = std::numeric_limits<S>::max();      // |<q,k>| over all vn_relu sites
  S mlp_pre_act = std::numeric_limits<S>::max();   // |pre-activation| in the MLP
  S gem_clamp = std::numeric_limits<S>::max();     // |x - floor| at the pooling clamp
  S pool_gap = std::numeric_limits<S>::max();      // best-vs-runner-up max-pool score gap
  S ri_gap = std::numeric_limits<S>::max();        // best-vs-runner-up invariant-max gap

  S overall() const {
    return std::min({relu_dot, mlp_pre_act, gem_clamp, pool_gap, ri_gap});
  }
};

template <typename S>
BranchMargins<S> branch_margins(const ModelParams<S>& params, const ModelConfig& cfg,
                                const ModelCache<S>& cache);

}  // namespace vni

#include "vni/training_impl.hpp"
