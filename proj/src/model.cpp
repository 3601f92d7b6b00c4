#include "vni/model.hpp"

#include "vni/binio.hpp"

#include <fstream>
#include <map>

namespace vni {

namespace {
constexpr char kMagic[] = "VNIP";
constexpr std::uint32_t kVersion = 1;
}  // namespace

void save_checkpoint(const std::string& path, const ModelParams<double>& params,
                     const ModelConfig& cfg) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open checkpoint for writing: " + path);
  out.write(kMagic, 4);
  binio::write_le<std::uint32_t>(out, kVersion);
  binio::write_string(out, cfg.to_kv().serialize());

  std::uint32_t count = 0;
  visit_tensors(params, [&](const std::string&, auto&, bool) { ++count; });
  binio::write_le<std::uint32_t>(out, count);

  visit_tensors(params, [&](const std::string& name, const Mat<double>& t, bool) {
    binio::write_string(out, name);
    binio::write_le<std::uint32_t>(out, 2);
    binio::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rows()));
    binio::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.cols()));
    for (Index i = 0; i < t.rows(); ++i)
      for (Index j = 0; j < t.cols(); ++j) binio::write_le<double>(out, t(i, j));
  });
  if (!out) throw FormatError("write failure on checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint: " + path);
  binio::expect_magic(in, kMagic, "checkpoint");
  const auto version = binio::read_le<std::uint32_t>(in, "checkpoint version");
  if (version != kVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  }
  const std::string cfg_text = binio::read_string(in, "checkpoint config");

  Checkpoint ck;
  ck.config = ModelConfig::from_kv(KvConfig::parse(cfg_text));
  ck.params = init_params<double>(ck.config, 0);

  std::map<std::string, Mat<double>*> slots;
  visit_tensors(ck.params,
                [&](const std::string& name, Mat<double>& t, bool) { slots[name] = &t; });

  const auto count = binio::read_le<std::uint32_t>(in, "checkpoint tensor count");
  std::size_t filled = 0;
  for (std::uint32_t ti = 0; ti < count; ++ti) {
    const std::string name = binio::read_string(in, "tensor name");
    const auto rank = binio::read_le<std::uint32_t>(in, "tensor rank");
    if (rank != 2) {
      throw FormatError("checkpoint tensor '" + name + "': expected rank 2, got " +
                        std::to_string(rank));
    }
    const auto rows = binio::read_le<std::uint32_t>(in, "tensor rows");
    const auto cols = binio::read_le<std::uint32_t>(in, "tensor cols");
    const auto it = slots.find(name);
    if (it == slots.end()) throw FormatError("checkpoint: unknown tensor '" + name + "'");
    Mat<double>& t = *it->second;
    if (t.rows() != static_cast<Index>(rows) || t.cols() != static_cast<Index>(cols)) {
      throw FormatError("checkpoint tensor '" + name + "': shape " + std::to_string(rows) + "x" +
                        std::to_string(cols) + " does not match the configured " +
                        std::to_string(t.rows()) + "x" + std::to_string(t.cols()));
    }
    for (Index i = 0; i < t.rows(); ++i)
      for (Index j = 0; j < t.cols(); ++j) t(i, j) = binio::read_le<double>(in, "tensor values");
    ++filled;
  }
  if (filled != slots.size()) {
    throw FormatError("checkpoint: expected " + std::to_string(slots.size()) + " tensors, found " +
                      std::to_string(filled));
  }
  return ck;
}

}  // namespace vni
