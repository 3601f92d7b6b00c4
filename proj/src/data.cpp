#include "vni/data.hpp"

#include "vni/binio.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

namespace fs = std::filesystem;

namespace vni {

PointCloud load_frame(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open frame: " + path);
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  if (size != kFrameBytes) {
    throw FormatError("frame " + path + ": expected " + std::to_string(kFrameBytes) +
                      " bytes, got " + std::to_string(size));
  }
  in.seekg(0);
  PointCloud cloud;
  cloud.pts.resize(kFramePoints, 3);
  for (int i = 0; i < kFramePoints; ++i) {
    for (int d = 0; d < 3; ++d) {
      const double v = binio::read_le<double>(in, "frame coordinates");
      if (!(v >= -1.001 && v <= 1.001)) {
        throw ValidationError("frame " + path + ": coordinate " + std::to_string(v) +
                              " at point " + std::to_string(i) + " is outside [-1.001, 1.001]");
      }
      cloud.pts(i, d) = v;
    }
  }
  return cloud;
}

void save_frame(const std::string& path, const PointCloud& cloud) {
  if (cloud.size() != kFramePoints) {
    throw std::invalid_argument("save_frame: cloud must have exactly " +
                                std::to_string(kFramePoints) + " points, got " +
                                std::to_string(cloud.size()));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open frame for writing: " + path);
  for (int i = 0; i < kFramePoints; ++i)
    for (int d = 0; d < 3; ++d) binio::write_le<double>(out, cloud.pts(i, d));
  if (!out) throw FormatError("write failure on frame: " + path);
}

DatasetIndex load_index(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open index: " + path);
  const fs::path base = fs::path(path).parent_path();
  DatasetIndex index;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::string p, n, e;
    if (!std::getline(ss, p, ',') || !std::getline(ss, n, ',') || !std::getline(ss, e, ',')) {
      throw ValidationError("index " + path + " line " + std::to_string(lineno) +
                            ": expected path,northing,easting");
    }
    FrameRecord rec;
    rec.id = static_cast<int>(index.records.size());
    // relative frame paths resolve against the index file's directory
    rec.path = fs::path(p).is_absolute() ? p : (base / p).string();
    try {
      rec.northing = std::stod(n);
      rec.easting = std::stod(e);
    } catch (const std::exception&) {
      throw ValidationError("index " + path + " line " + std::to_string(lineno) +
                            ": non-numeric coordinate");
    }
    index.records.push_back(std::move(rec));
  }
  return index;
}

void save_index(const std::string& path, const DatasetIndex& index) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open index for writing: " + path);
  out << std::setprecision(17);
  for (const auto& rec : index.records) {
    out << rec.path << "," << rec.northing << "," << rec.easting << "\n";
  }
}

std::pair<std::vector<int>, std::vector<int>> positives_negatives(const DatasetIndex& index,
                                                                  int anchor_id) {
  if (anchor_id < 0 || anchor_id >= static_cast<int>(index.records.size())) {
    throw std::invalid_argument("positives_negatives: anchor id " + std::to_string(anchor_id) +
                                " is not in the index");
  }
  const FrameRecord& a = index.records[anchor_id];
  std::vector<int> pos, neg;
  for (const auto& r : index.records) {
    if (r.id == anchor_id) continue;
    const double dn = r.northing - a.northing;
    const double de = r.easting - a.easting;
    const double d = std::sqrt(dn * dn + de * de);
    if (d <= index.thresholds.positive) {
      pos.push_back(r.id);
    } else if (d > index.thresholds.negative) {
      neg.push_back(r.id);
    }
  }
  return {pos, neg};
}

GenConfig GenConfig::from_kv(const KvConfig& kv) {
  GenConfig c;
  c.scenes = kv.get_int("scenes", c.scenes);
  c.frames_per_scene = kv.get_int("frames_per_scene", c.frames_per_scene);
  c.clusters = kv.get_int("clusters", c.clusters);
  c.jitter_sigma = kv.get_double("jitter_sigma", c.jitter_sigma);
  c.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<int>(c.seed)));
  c.rotate_frames = kv.get_bool("rotate_frames", c.rotate_frames);
  c.scene_spacing = kv.get_double("scene_spacing", c.scene_spacing);
  c.frame_spread = kv.get_double("frame_spread", c.frame_spread);
  return c;
}

KvConfig GenConfig::to_kv() const {
  KvConfig kv;
  kv.set_int("scenes", scenes);
  kv.set_int("frames_per_scene", frames_per_scene);
  kv.set_int("clusters", clusters);
  kv.set_double("jitter_sigma", jitter_sigma);
  kv.set_int("seed", static_cast<long long>(seed));
  kv.set_bool("rotate_frames", rotate_frames);
  kv.set_double("scene_spacing", scene_spacing);
  kv.set_double("frame_spread", frame_spread);
  return kv;
}

GenResult gen_synthetic(const GenConfig& cfg, const std::string& out_dir) {
  if (cfg.scenes < 1 || cfg.frames_per_scene < 3) {
    throw std::invalid_argument("gen_synthetic: need >= 1 scene and >= 3 frames per scene");
  }
  fs::create_directories(fs::path(out_dir) / "frames");

  Rng rng(cfg.seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  DatasetIndex all, train, ref, query;
  const int grid = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(cfg.scenes))));

  for (int s = 0; s < cfg.scenes; ++s) {
    // Fixed cluster layout, sampled once per scene.
    Eigen::MatrixXd centers(cfg.clusters, 3);
    Eigen::VectorXd spreads(cfg.clusters);
    for (int c = 0; c < cfg.clusters; ++c) {
      for (int d = 0; d < 3; ++d) centers(c, d) = 0.8 * unit(rng);
      spreads(c) = 0.04 + 0.08 * std::abs(unit(rng));
    }
    Eigen::MatrixXd base(kFramePoints, 3);
    for (int i = 0; i < kFramePoints; ++i) {
      const int c = i % cfg.clusters;
      for (int d = 0; d < 3; ++d) base(i, d) = centers(c, d) + spreads(c) * gauss(rng);
    }

    const double scene_n = (s / grid) * cfg.scene_spacing;
    const double scene_e = (s % grid) * cfg.scene_spacing;

    for (int f = 0; f < cfg.frames_per_scene; ++f) {
      PointCloud cloud;
      cloud.pts = base;
      for (int i = 0; i < kFramePoints; ++i)
        for (int d = 0; d < 3; ++d) cloud.pts(i, d) += cfg.jitter_sigma * gauss(rng);
      if (cfg.rotate_frames) {
        const std::uint64_t rot_seed = rng();
        cloud = apply_rotation(cloud, sample_rotation(rot_seed, RotationMode::kSo3));
      }
      cloud = normalize_cloud(cloud);

      std::ostringstream name;
      name << "frames/frame_" << std::setfill('0') << std::setw(3) << s << "_" << std::setw(2) << f
           << ".bin";
      const std::string rel = name.str();
      save_frame((fs::path(out_dir) / rel).string(), cloud);

      std::uniform_real_distribution<double> spread(-cfg.frame_spread, cfg.frame_spread);
      FrameRecord rec;
      rec.path = rel;
      rec.northing = scene_n + spread(rng);
      rec.easting = scene_e + spread(rng);

      rec.id = static_cast<int>(all.records.size());
      all.records.push_back(rec);
      if (f < cfg.frames_per_scene - 2) {
        rec.id = static_cast<int>(train.records.size());
        train.records.push_back(rec);
      } else if (f == cfg.frames_per_scene - 2) {
        rec.id = static_cast<int>(ref.records.size());
        ref.records.push_back(rec);
      } else {
        rec.id = static_cast<int>(query.records.size());
        query.records.push_back(rec);
      }
    }
  }

  GenResult res;
  res.all_index = (fs::path(out_dir) / "all.csv").string();
  res.train_index = (fs::path(out_dir) / "train.csv").string();
  res.ref_index = (fs::path(out_dir) / "eval_ref.csv").string();
  res.query_index = (fs::path(out_dir) / "eval_query.csv").string();
  save_index(res.all_index, all);
  save_index(res.train_index, train);
  save_index(res.ref_index, ref);
  save_index(res.query_index, query);

  std::ofstream cfg_out(fs::path(out_dir) / "gen.cfg");
  cfg_out << cfg.to_kv().serialize();
  return res;
}

namespace {
constexpr char kDbMagic[] = "VNDB";
constexpr std::uint16_t kDbVersion = 1;
}  // namespace

void save_db(const DescriptorDB& db, const std::string& path) {
  const int dim = db.dim();
  for (const auto& e : db.entries) {
    if (e.descriptor.size() != dim) {
      throw std::invalid_argument("save_db: inconsistent descriptor dimensions");
    }
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open descriptor db for writing: " + path);
  out.write(kDbMagic, 4);
  binio::write_le<std::uint16_t>(out, kDbVersion);
  binio::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(db.entries.size()));
  binio::write_le<std::uint16_t>(out, static_cast<std::uint16_t>(dim));
  for (const auto& e : db.entries) {
    binio::write_le<std::uint32_t>(out, e.id);
    binio::write_le<double>(out, e.northing);
    binio::write_le<double>(out, e.easting);
    for (int i = 0; i < dim; ++i) binio::write_le<float>(out, e.descriptor(i));
  }
  if (!out) throw FormatError("write failure on descriptor db: " + path);
}

DescriptorDB load_db(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open descriptor db: " + path);
  binio::expect_magic(in, kDbMagic, "descriptor db");
  const auto version = binio::read_le<std::uint16_t>(in, "db version");
  if (version != kDbVersion) {
    throw FormatError("descriptor db: unsupported version " + std::to_string(version));
  }
  const auto count = binio::read_le<std::uint32_t>(in, "db count");
  const auto dim = binio::read_le<std::uint16_t>(in, "db dim");
  DescriptorDB db;
  db.entries.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    DbEntry e;
    e.id = binio::read_le<std::uint32_t>(in, "db entry id");
    e.northing = binio::read_le<double>(in, "db entry northing");
    e.easting = binio::read_le<double>(in, "db entry easting");
    e.descriptor.resize(dim);
    for (int d = 0; d < dim; ++d) e.descriptor(d) = binio::read_le<float>(in, "db descriptor");
    db.entries.push_back(std::move(e));
  }
  char extra;
  if (in.read(&extra, 1)) {
    throw FormatError("descriptor db: trailing bytes after " + std::to_string(count) + " entries");
  }
  return db;
}

}  // namespace vni
