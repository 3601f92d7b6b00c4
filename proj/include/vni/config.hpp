#pragma once

#include "vni/common.hpp"

#include <map>
#include <sstream>
#include <vector>

namespace vni {

/// Flat "key=value" text store used by config files, generator configs and
/// checkpoint headers. Lines starting with '#' and blank lines are ignored.
class KvConfig {
 public:
  KvConfig() = default;

  static KvConfig parse(const std::string& text);
  static KvConfig load(const std::string& path);

  bool has(const std::string& key) const { return kv_.count(key) > 0; }
  void set(const std::string& key, const std::string& value) { kv_[key] = value; }

  std::string get_string(const std::string& key, const std::string& fallback) const;
  int get_int(const std::string& key, int fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<int> get_int_list(const std::string& key, const std::vector<int>& fallback) const;

  void set_int(const std::string& key, long long v) { kv_[key] = std::to_string(v); }
  void set_double(const std::string& key, double v);
  void set_bool(const std::string& key, bool v) { kv_[key] = v ? "true" : "false"; }
  void set_int_list(const std::string& key, const std::vector<int>& v);

  /// Overlay: entries of other replace entries of *this.
  void merge(const KvConfig& other);

  std::string serialize() const;
  const std::map<std::string, std::string>& entries() const { return kv_; }

 private:
  std::map<std::string, std::string> kv_;
};

}  // namespace vni
