#include "vni/config.hpp"

#include <fstream>
#include <iomanip>

namespace vni {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

KvConfig KvConfig::parse(const std::string& text) {
  KvConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ValidationError("config line " + std::to_string(lineno) + ": expected key=value, got '" +
                            t + "'");
    }
    cfg.kv_[trim(t.substr(0, eq))] = trim(t.substr(eq + 1));
  }
  return cfg;
}

KvConfig KvConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse(buf.str());
}

std::string KvConfig::get_string(const std::string& key, const std::string& fallback) const {
  const auto it = kv_.find(key);
  return it == kv_.end() ? fallback : it->second;
}

int KvConfig::get_int(const std::string& key, int fallback) const {
  const auto it = kv_.find(key);
  if (it == kv_.end()) return fallback;
  try {
    return std::stoi(it->second);
  } catch (const std::exception&) {
    throw ValidationError("config key '" + key + "': expected integer, got '" + it->second + "'");
  }
}

double KvConfig::get_double(const std::string& key, double fallback) const {
  const auto it = kv_.find(key);
  if (it == kv_.end()) return fallback;
  try {
    return std::stod(it->second);
  } catch (const std::exception&) {
    throw ValidationError("config key '" + key + "': expected number, got '" + it->second + "'");
  }
}

bool KvConfig::get_bool(const std::string& key, bool fallback) const {
  const auto it = kv_.find(key);
  if (it == kv_.end()) return fallback;
  const std::string& v = it->second;
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ValidationError("config key '" + key + "': expected boolean, got '" + v + "'");
}

std::vector<int> KvConfig::get_int_list(const std::string& key,
                                        const std::vector<int>& fallback) const {
  const auto it = kv_.find(key);
  if (it == kv_.end()) return fallback;
  std::vector<int> out;
  std::istringstream ss(it->second);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stoi(item));
    } catch (const std::exception&) {
      throw ValidationError("config key '" + key + "': expected comma-separated integers, got '" +
                            it->second + "'");
    }
  }
  return out;
}

void KvConfig::set_double(const std::string& key, double v) {
  std::ostringstream ss;
  ss << std::setprecision(17) << v;
  kv_[key] = ss.str();
}

void KvConfig::set_int_list(const std::string& key, const std::vector<int>& v) {
  std::ostringstream ss;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) ss << ',';
    ss << v[i];
  }
  kv_[key] = ss.str();
}

void KvConfig::merge(const KvConfig& other) {
  for (const auto& [k, v] : other.kv_) kv_[k] = v;
}

std::string KvConfig::serialize() const {
  std::ostringstream ss;
  for (const auto& [k, v] : kv_) ss << k << "=" << v << "\n";
  return ss.str();
}

}  // namespace vni
