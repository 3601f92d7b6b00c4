#pragma once

#include "vni/data.hpp"
#include "vni/model.hpp"

#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace vni {

struct ExtractFailure {
  int id = 0;
  std::string path;
  std::string reason;
};

struct ExtractResult {
  DescriptorDB db;                 // f32 storage, one entry per readable frame
  Mat<double> descriptors;         // full-precision copies, row per db entry
  std::vector<ExtractFailure> failures;
};

/// Runs inference per frame and collects one database entry per record.
/// Unreadable frames are recorded and skipped. An optional fixed rotation
/// seed rotates each frame before extraction (used by the stress harness);
/// seed_base != nullopt applies sample_rotation(seed_base + id, mode).
ExtractResult extract_all(const DatasetIndex& index, const ModelParams<double>& params,
                          const ModelConfig& cfg,
                          std::optional<std::uint64_t> rotation_seed_base = std::nullopt,
                          RotationMode rotation_mode = RotationMode::kSo3);

/// Non-invariant control: the first ceil(dim/3) points' coordinates flattened
/// (x, y, z per point) and truncated to dim values.
Eigen::VectorXf raw_coordinate_descriptor(const PointCloud& cloud, int dim);

ExtractResult extract_all_raw_control(const DatasetIndex& index, int dim,
                                      std::optional<std::uint64_t> rotation_seed_base = std::nullopt,
                                      RotationMode rotation_mode = RotationMode::kSo3);

// ---------------------------------------------------------------------------
// Retrieval metrics

struct RecallReport {
  double ar_at_1 = 0.0;
  double ar_at_1pct = 0.0;
  std::vector<std::uint32_t> query_ids;
  std::vector<std::uint32_t> top1_ids;     // nearest reference per evaluated query
  std::vector<bool> top1_hit;
  Index queries_evaluated = 0;
  Index queries_excluded = 0;  // no ground-truth reference within the radius
  Index reference_count = 0;
  int top_pct_k = 0;           // ceil(1% of reference count)
};

/// Ranks references by descriptor Euclidean distance. AR@1 counts queries
/// whose nearest reference lies within eval_radius meters of the query's
/// position; AR@1% uses the top ceil(1% of references). Queries without any
/// in-range reference are excluded from the denominator.
RecallReport recall(const DescriptorDB& queries, const DescriptorDB& refs,
                    double eval_radius = 25.0);

// ---------------------------------------------------------------------------
// Rotation stress

struct StressTrial {
  int trial = 0;
  std::uint64_t seed = 0;
  double residual = 0.0;  // max relative descriptor deviation in the trial
};

struct StressReport {
  RotationMode mode = RotationMode::kSo3;
  int trials = 0;
  double max_residual = 0.0;
  RecallReport base_recall;
  double ar1_delta = 0.0;     // worst |rotated - base| over trials
  double ar1pct_delta = 0.0;
  bool rankings_identical = true;  // top-1 ids matched the base run in every trial
  std::vector<StressTrial> per_trial;
};

/// Rotates every query frame with a fresh per-frame rotation each trial,
/// re-extracts and compares descriptors and recall against the unrotated run.
StressReport rotation_stress(const DatasetIndex& queries, const DatasetIndex& refs,
                             const ModelParams<double>& params, const ModelConfig& cfg,
                             RotationMode mode, int trials, std::uint64_t seed);

void write_stress_jsonl(const StressReport& report, std::ostream& out);

// ---------------------------------------------------------------------------
// Conformance checks

enum class Precision { kF32, kF64 };

struct ConformanceReport {
  std::string target;
  int trials = 0;
  double max_residual = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

/// Equivariance predicate for the vector-neuron targets, invariance for the
/// distance layers and the whole model. Unknown targets throw
/// std::invalid_argument.
ConformanceReport check_equivariance(const std::string& target, int trials, Precision precision,
                                     std::uint64_t seed = 0);

std::vector<std::string> conformance_targets();

// ---------------------------------------------------------------------------
// Feature dumps

enum class DumpStage { kEqui, kRi, kDescriptor };

/// Writes per-point rows as CSV: the equivariant stage dumps module 2's F3
/// flattened to 3C columns, the invariant stage the N x ri_dim features, and
/// the descriptor stage a single row.
void dump_features(const PointCloud& cloud, const ModelParams<double>& params,
                   const ModelConfig& cfg, DumpStage stage, const std::string& out_path);

}  // namespace vni
