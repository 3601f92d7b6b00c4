#include "vni/training.hpp"

#include <algorithm>
#include <numeric>

namespace vni {

TrainConfig TrainConfig::from_kv(const KvConfig& kv) {
  TrainConfig c;
  c.margin = kv.get_double("margin", c.margin);
  c.base_lr = kv.get_double("lr", c.base_lr);
  c.epochs = kv.get_int("epochs", c.epochs);
  c.milestones = kv.get_int_list("lr_milestones", c.milestones);
  c.lr_decay = kv.get_double("lr_decay", c.lr_decay);
  c.cells_per_batch = kv.get_int("cells_per_batch", c.cells_per_batch);
  c.frames_per_cell = kv.get_int("frames_per_cell", c.frames_per_cell);
  c.seed = static_cast<std::uint64_t>(kv.get_int("train_seed", static_cast<int>(c.seed)));
  c.optim.beta1 = kv.get_double("adam_beta1", c.optim.beta1);
  c.optim.beta2 = kv.get_double("adam_beta2", c.optim.beta2);
  c.optim.eps = kv.get_double("adam_eps", c.optim.eps);
  return c;
}

KvConfig TrainConfig::to_kv() const {
  KvConfig kv;
  kv.set_double("margin", margin);
  kv.set_double("lr", base_lr);
  kv.set_int("epochs", epochs);
  kv.set_int_list("lr_milestones", milestones);
  kv.set_double("lr_decay", lr_decay);
  kv.set_int("cells_per_batch", cells_per_batch);
  kv.set_int("frames_per_cell", frames_per_cell);
  kv.set_int("train_seed", static_cast<long long>(seed));
  kv.set_double("adam_beta1", optim.beta1);
  kv.set_double("adam_beta2", optim.beta2);
  kv.set_double("adam_eps", optim.eps);
  return kv;
}

namespace {

// Location cells: connected components of the positive (<= 10 m) graph.
std::vector<std::vector<int>> location_cells(const DatasetIndex& index) {
  const int n = static_cast<int>(index.records.size());
  std::vector<int> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  std::function<int(int)> find = [&](int x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  for (int i = 0; i < n; ++i) {
    const auto [pos, neg] = positives_negatives(index, i);
    for (int j : pos) parent[find(i)] = find(j);
  }
  std::vector<std::vector<int>> cells(n);
  for (int i = 0; i < n; ++i) cells[find(i)].push_back(i);
  std::vector<std::vector<int>> out;
  for (auto& cell : cells)
    if (!cell.empty()) out.push_back(std::move(cell));
  return out;
}

}  // namespace

TrainResult train_loop(const DatasetIndex& index, const ModelConfig& model_cfg,
                       const TrainConfig& train_cfg, std::ostream* log,
                       const std::string& checkpoint_path) {
  if (index.records.empty()) throw std::invalid_argument("train_loop: empty dataset");
  model_cfg.validate();
  if (train_cfg.frames_per_cell < 2) {
    throw std::invalid_argument("train_loop: frames_per_cell must be >= 2 so every anchor has an "
                                "in-batch positive");
  }

  std::vector<std::vector<int>> cells;
  for (auto& cell : location_cells(index)) {
    if (static_cast<int>(cell.size()) >= train_cfg.frames_per_cell) cells.push_back(std::move(cell));
  }
  if (cells.size() < 2) {
    throw std::invalid_argument("train_loop: need at least two location cells with " +
                                std::to_string(train_cfg.frames_per_cell) + " frames each");
  }

  // Frames are small enough at desk scale to keep resident.
  std::vector<PointCloud> frames(index.records.size());
  for (const auto& rec : index.records) frames[rec.id] = load_frame(rec.path);

  Rng rng(train_cfg.seed);
  ModelParams<double> params = init_params<double>(model_cfg, train_cfg.seed);
  OptimState<double> optim = OptimState<double>::init(model_cfg, train_cfg.optim);

  TrainResult result;
  long long global_step = 0;
  for (int epoch = 0; epoch < train_cfg.epochs; ++epoch) {
    const double lr = lr_schedule(epoch, train_cfg.base_lr, train_cfg.milestones,
                                  train_cfg.lr_decay);
    std::shuffle(cells.begin(), cells.end(), rng);

    EpochStats stats;
    double loss_sum = 0.0, active_sum = 0.0;
    for (std::size_t c0 = 0; c0 + 1 < cells.size(); c0 += train_cfg.cells_per_batch) {
      const std::size_t c1 = std::min(c0 + train_cfg.cells_per_batch, cells.size());
      if (c1 - c0 < 2) break;  // a single cell has no in-batch negatives

      std::vector<int> batch_ids;
      for (std::size_t ci = c0; ci < c1; ++ci) {
        std::vector<int> cell = cells[ci];
        std::shuffle(cell.begin(), cell.end(), rng);
        cell.resize(train_cfg.frames_per_cell);
        batch_ids.insert(batch_ids.end(), cell.begin(), cell.end());
      }

      const Index b = static_cast<Index>(batch_ids.size());
      std::vector<PointCloud> clouds;
      clouds.reserve(b);
      for (int id : batch_ids) clouds.push_back(frames[id]);

      Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> positive_mask(b, b);
      for (Index i = 0; i < b; ++i) {
        const FrameRecord& ri = index.records[batch_ids[i]];
        for (Index j = 0; j < b; ++j) {
          const FrameRecord& rj = index.records[batch_ids[j]];
          const double dn = ri.northing - rj.northing;
          const double de = ri.easting - rj.easting;
          positive_mask(i, j) = i != j && std::sqrt(dn * dn + de * de) <= index.thresholds.positive;
        }
      }

      ModelCache<double> cache;
      ModelStatUpdates<double> stat_updates;
      forward_batch(clouds, params, model_cfg, RunMode::kTrain, &cache, &stat_updates);
      const MiningResult mined = batch_hard_mine(cache.desc, positive_mask, train_cfg.margin);

      double loss = 0.0;
      if (!mined.triplets.empty()) {
        auto [batch_loss, grads] = backward(params, model_cfg, cache, mined.triplets,
                                            train_cfg.margin);
        loss = batch_loss;
        optimizer_step(params, grads, optim, lr);
      }
      apply_model_stats(params, stat_updates);

      const double active = static_cast<double>(mined.triplets.size()) /
                            static_cast<double>(mined.anchors_total);
      loss_sum += loss;
      active_sum += active;
      ++stats.steps;
      if (log) {
        (*log) << epoch << "," << global_step << "," << lr << "," << loss << ","
               << mined.triplets.size() << "\n";
      }
      ++global_step;
    }
    if (stats.steps > 0) {
      stats.mean_loss = loss_sum / stats.steps;
      stats.active_fraction = active_sum / stats.steps;
    }
    result.epochs.push_back(stats);
  }

  result.params = std::move(params);
  if (!checkpoint_path.empty()) save_checkpoint(checkpoint_path, result.params, model_cfg);
  return result;
}

}  // namespace vni
