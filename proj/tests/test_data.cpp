#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "test_util.hpp"
#include "vni/data.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>

using namespace vni;
namespace fs = std::filesystem;

namespace {

std::string temp_file(const std::string& name) {
  return (fs::temp_directory_path() / name).string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("load_frame parses an all-zero frame") {
  const std::string path = temp_file("vni_zero_frame.bin");
  {
    std::ofstream out(path, std::ios::binary);
    const std::vector<char> zeros(kFrameBytes, 0);
    out.write(zeros.data(), zeros.size());
  }
  const PointCloud c = load_frame(path);
  CHECK(c.size() == kFramePoints);
  CHECK(c.pts.cwiseAbs().maxCoeff() == 0.0);
  std::remove(path.c_str());
}

TEST_CASE("frame round trip is bitwise") {
  Rng rng(1);
  PointCloud c = test::random_cloud(rng, kFramePoints);
  c = normalize_cloud(c);
  const std::string path = temp_file("vni_rt_frame.bin");
  save_frame(path, c);
  const PointCloud back = load_frame(path);
  CHECK(back.pts == c.pts);
  std::remove(path.c_str());
}

TEST_CASE("load_frame reports wrong sizes with byte counts") {
  const std::string path = temp_file("vni_short_frame.bin");
  {
    std::ofstream out(path, std::ios::binary);
    const std::vector<char> bytes(kFrameBytes - 1, 0);
    out.write(bytes.data(), bytes.size());
  }
  try {
    load_frame(path);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    CHECK(msg.find(std::to_string(kFrameBytes)) != std::string::npos);
    CHECK(msg.find(std::to_string(kFrameBytes - 1)) != std::string::npos);
  }
  std::remove(path.c_str());
}

TEST_CASE("load_frame rejects out-of-range coordinates") {
  const std::string path = temp_file("vni_oor_frame.bin");
  Rng rng(2);
  PointCloud c = normalize_cloud(test::random_cloud(rng, kFramePoints));
  save_frame(path, c);
  {
    // overwrite the first coordinate with 2.0
    std::fstream out(path, std::ios::binary | std::ios::in | std::ios::out);
    const double bad = 2.0;
    out.write(reinterpret_cast<const char*>(&bad), sizeof(bad));
  }
  CHECK_THROWS_AS(load_frame(path), ValidationError);
  std::remove(path.c_str());
}

TEST_CASE("load_index parses records and resolves relative paths") {
  const std::string path = temp_file("vni_index.csv");
  {
    std::ofstream out(path);
    out << "frames/a.bin,100.5,200.25\n";
    out << "/abs/b.bin,-3,4\n";
    out << "frames/c.bin,0,0\n";
  }
  const DatasetIndex idx = load_index(path);
  REQUIRE(idx.records.size() == 3);
  CHECK(idx.records[0].id == 0);
  CHECK(idx.records[1].id == 1);
  CHECK(idx.records[2].id == 2);
  CHECK(idx.records[0].northing == 100.5);
  CHECK(idx.records[0].easting == 200.25);
  CHECK(idx.records[1].path == "/abs/b.bin");
  CHECK(idx.records[0].path.find("frames/a.bin") != std::string::npos);
  std::remove(path.c_str());
}

TEST_CASE("load_index reports malformed lines with their number") {
  const std::string path = temp_file("vni_bad_index.csv");
  {
    std::ofstream out(path);
    out << "frames/a.bin,1,2\n";
    out << "frames/b.bin,3\n";  // two fields
  }
  try {
    load_index(path);
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
  std::remove(path.c_str());
}

TEST_CASE("load_index accepts an empty file") {
  const std::string path = temp_file("vni_empty_index.csv");
  { std::ofstream out(path); }
  CHECK(load_index(path).records.empty());
  std::remove(path.c_str());
}

TEST_CASE("positives_negatives thresholds and band exclusion") {
  DatasetIndex idx;
  idx.records = {{0, "a", 0, 0}, {1, "b", 0, 6}, {2, "c", 0, 30}, {3, "d", 0, 60}};
  const auto [pos, neg] = positives_negatives(idx, 0);
  CHECK(pos == std::vector<int>{1});
  CHECK(neg == std::vector<int>{3});  // id 2 sits in the 10-50 m band

  // symmetric relation
  for (int i = 0; i < 4; ++i) {
    const auto pi = positives_negatives(idx, i).first;
    for (int j : pi) {
      const auto pj = positives_negatives(idx, j).first;
      CHECK(std::find(pj.begin(), pj.end(), i) != pj.end());
    }
  }

  DatasetIndex lone;
  lone.records = {{0, "a", 0, 0}};
  const auto [p2, n2] = positives_negatives(lone, 0);
  CHECK(p2.empty());
  CHECK(n2.empty());

  CHECK_THROWS_AS(positives_negatives(idx, 99), std::invalid_argument);
}

TEST_CASE("gen_synthetic determinism and format closure") {
  const std::string dir_a = temp_file("vni_gen_a");
  const std::string dir_b = temp_file("vni_gen_b");
  fs::remove_all(dir_a);
  fs::remove_all(dir_b);
  GenConfig cfg;
  cfg.scenes = 3;
  cfg.frames_per_scene = 4;
  cfg.clusters = 3;
  cfg.seed = 9;
  const GenResult a = gen_synthetic(cfg, dir_a);
  const GenResult b = gen_synthetic(cfg, dir_b);

  // identical bytes for every generated file
  std::vector<fs::path> files_a;
  for (const auto& p : fs::recursive_directory_iterator(dir_a)) {
    if (p.is_regular_file()) files_a.push_back(fs::relative(p.path(), dir_a));
  }
  CHECK(files_a.size() == 3 * 4 + 5);  // frames + 4 indexes + gen.cfg
  for (const auto& rel : files_a) {
    CHECK(slurp((fs::path(dir_a) / rel).string()) == slurp((fs::path(dir_b) / rel).string()));
  }

  // every frame loads and validates
  const DatasetIndex all = load_index(a.all_index);
  REQUIRE(all.records.size() == 12);
  for (const auto& rec : all.records) {
    const PointCloud c = load_frame(rec.path);
    CHECK(c.pts.cwiseAbs().maxCoeff() <= 1.0);
  }

  // intended labels: same-scene frames mutually positive, cross-scene mutually negative
  for (const auto& rec : all.records) {
    const auto [pos, neg] = positives_negatives(all, rec.id);
    CHECK(pos.size() == 3);
    CHECK(neg.size() == 8);
    for (int j : pos) CHECK(j / 4 == rec.id / 4);
    for (int j : neg) CHECK(j / 4 != rec.id / 4);
  }

  // splits: train gets frames 0..F-3, ref F-2, query F-1
  CHECK(load_index(b.train_index).records.size() == 3 * 2);
  CHECK(load_index(b.ref_index).records.size() == 3);
  CHECK(load_index(b.query_index).records.size() == 3);

  fs::remove_all(dir_a);
  fs::remove_all(dir_b);
}

TEST_CASE("descriptor db round trip") {
  DescriptorDB db;
  Rng rng(3);
  std::uniform_real_distribution<double> dist(-1, 1);
  for (int i = 0; i < 5; ++i) {
    DbEntry e;
    e.id = static_cast<std::uint32_t>(i * 7);
    e.northing = dist(rng) * 1000;
    e.easting = dist(rng) * 1000;
    e.descriptor.resize(16);
    for (int d = 0; d < 16; ++d) e.descriptor(d) = static_cast<float>(dist(rng));
    db.entries.push_back(e);
  }
  const std::string path = temp_file("vni_db.vndb");
  save_db(db, path);
  const DescriptorDB back = load_db(path);
  REQUIRE(back.entries.size() == db.entries.size());
  for (std::size_t i = 0; i < db.entries.size(); ++i) {
    CHECK(back.entries[i].id == db.entries[i].id);
    CHECK(back.entries[i].northing == db.entries[i].northing);
    CHECK(back.entries[i].easting == db.entries[i].easting);
    CHECK(back.entries[i].descriptor == db.entries[i].descriptor);
  }
  std::remove(path.c_str());
}

TEST_CASE("empty descriptor db is a 12-byte header") {
  const std::string path = temp_file("vni_empty_db.vndb");
  save_db(DescriptorDB{}, path);
  CHECK(fs::file_size(path) == 12);
  CHECK(load_db(path).entries.empty());
  std::remove(path.c_str());
}

TEST_CASE("descriptor db format errors") {
  const std::string path = temp_file("vni_bad_db.vndb");
  {
    std::ofstream out(path, std::ios::binary);
    out << "XXDB@@@@@@@@";
  }
  try {
    load_db(path);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("VNDB") != std::string::npos);
  }

  DescriptorDB db;
  DbEntry e;
  e.descriptor.resize(4);
  e.descriptor.setZero();
  db.entries.push_back(e);
  save_db(db, path);
  fs::resize_file(path, fs::file_size(path) - 3);
  CHECK_THROWS_AS(load_db(path), FormatError);
  std::remove(path.c_str());
}
