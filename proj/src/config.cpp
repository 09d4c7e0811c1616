#include "lab/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace lab {

namespace {
std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}
}  // namespace

KvMap KvMap::parse(const std::string& text) {
  KvMap kv;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    if (kv.values_.count(key))
      throw ConfigError("config: duplicate key '" + key + "'");
    kv.values_[key] = value;
  }
  return kv;
}

KvMap KvMap::parse_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config: cannot open '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse(ss.str());
}

std::string KvMap::emit() const {
  std::ostringstream os;
  for (const auto& [k, v] : values_) os << k << " = " << v << "\n";
  return os.str();
}

void KvMap::set(const std::string& key, const std::string& value) {
  values_[key] = value;
}

void KvMap::set_int(const std::string& key, long v) { values_[key] = std::to_string(v); }

void KvMap::set_real(const std::string& key, real v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  values_[key] = buf;
}

std::string KvMap::get_str(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("config: missing key '" + key + "'");
  used_[key] = true;
  return it->second;
}

std::string KvMap::get_str(const std::string& key, const std::string& fallback) const {
  used_[key] = true;
  auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

long KvMap::get_int(const std::string& key) const {
  const std::string s = get_str(key);
  try {
    size_t pos = 0;
    const long v = std::stol(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' is not an integer: '" + s + "'");
  }
}

long KvMap::get_int(const std::string& key, long fallback) const {
  used_[key] = true;
  return values_.count(key) ? get_int(key) : fallback;
}

real KvMap::get_real(const std::string& key) const {
  const std::string s = get_str(key);
  try {
    size_t pos = 0;
    const real v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' is not a number: '" + s + "'");
  }
}

real KvMap::get_real(const std::string& key, real fallback) const {
  used_[key] = true;
  return values_.count(key) ? get_real(key) : fallback;
}

std::vector<std::string> KvMap::get_str_list(
    const std::string& key, const std::vector<std::string>& fallback) const {
  used_[key] = true;
  if (!values_.count(key)) return fallback;
  std::vector<std::string> out;
  std::istringstream is(values_.at(key));
  std::string item;
  while (std::getline(is, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<long> KvMap::get_int_list(const std::string& key,
                                      const std::vector<long>& fallback) const {
  used_[key] = true;
  if (!values_.count(key)) return fallback;
  std::vector<long> out;
  for (const std::string& s : get_str_list(key, {})) {
    try {
      out.push_back(std::stol(s));
    } catch (const std::exception&) {
      throw ConfigError("config: key '" + key + "' has non-integer item '" + s + "'");
    }
  }
  return out;
}

std::vector<std::string> KvMap::unused_keys() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : values_)
    if (!used_.count(k)) out.push_back(k);
  return out;
}

std::string config_hash(const KvMap& kv) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a(kv.emit())));
  return buf;
}

}  // namespace lab
