#pragma once

#include "vni/config.hpp"
#include "vni/core.hpp"

#include <string>
#include <vector>

namespace vni {

// Frame files store exactly this many points as f64 little-endian xyz triples.
inline constexpr int kFramePoints = 4096;
inline constexpr std::size_t kFrameBytes = kFramePoints * 3 * sizeof(double);

struct FrameRecord {
  int id = 0;
  std::string path;
  double northing = 0.0;
  double easting = 0.0;
};

struct DatasetThresholds {
  double positive = 10.0;  // meters
  double negative = 50.0;
  double eval = 25.0;
};

struct DatasetIndex {
  std::vector<FrameRecord> records;
  DatasetThresholds thresholds;
};

/// Reads a 4096-point frame; throws FormatError on a wrong byte count and
/// ValidationError when a coordinate leaves [-1.001, 1.001].
PointCloud load_frame(const std::string& path);

void save_frame(const std::string& path, const PointCloud& cloud);

/// Text index, one "path,northing,easting" record per line; ids are assigned
/// sequentially. Malformed lines report their line number.
DatasetIndex load_index(const std::string& path);

void save_index(const std::string& path, const DatasetIndex& index);

/// Planar-distance label sets for an anchor: ids within 10 m (self excluded)
/// and ids beyond 50 m. The 10-50 m band lands in neither set.
std::pair<std::vector<int>, std::vector<int>> positives_negatives(const DatasetIndex& index,
                                                                  int anchor_id);

// ---------------------------------------------------------------------------
// Synthetic scenes
//
// Each scene is a fixed Gaussian-cluster layout sampled once; every frame of
// the scene re-jitters the same base points (order preserved) and is
// normalized before saving. Scene centers sit on a >= 60 m grid and frames of
// one scene stay within 5 m of the center, so the 10/50 m protocol labels
// scenes exactly.

struct GenConfig {
  int scenes = 50;
  int frames_per_scene = 6;
  int clusters = 8;
  double jitter_sigma = 0.01;
  std::uint64_t seed = 0;
  bool rotate_frames = false;  // independent SO(3) rotation per frame before saving
  double scene_spacing = 100.0;
  double frame_spread = 2.5;

  static GenConfig from_kv(const KvConfig& kv);
  KvConfig to_kv() const;
};

struct GenResult {
  std::string all_index;    // every frame
  std::string train_index;  // frames 0..F-3 of each scene
  std::string ref_index;    // frame F-2 of each scene
  std::string query_index;  // frame F-1 of each scene
};

GenResult gen_synthetic(const GenConfig& cfg, const std::string& out_dir);

// ---------------------------------------------------------------------------
// Descriptor database: magic "VNDB", u16 version, u32 count, u16 dim, then
// per entry id u32, northing f64, easting f64, descriptor dim x f32. All
// little-endian.

struct DbEntry {
  std::uint32_t id = 0;
  double northing = 0.0;
  double easting = 0.0;
  Eigen::VectorXf descriptor;
};

struct DescriptorDB {
  std::vector<DbEntry> entries;

  int dim() const { return entries.empty() ? 0 : static_cast<int>(entries.front().descriptor.size()); }
};

void save_db(const DescriptorDB& db, const std::string& path);
DescriptorDB load_db(const std::string& path);

}  // namespace vni
