#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "lab/tensor.hpp"

namespace lab {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Flat `key = value` text, one pair per line, '#' starts a comment.
class KvMap {
 public:
  static KvMap parse(const std::string& text);
  static KvMap parse_file(const std::string& path);
  std::string emit() const;  // sorted by key, one pair per line

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, const std::string& value);
  void set_int(const std::string& key, long v);
  void set_real(const std::string& key, real v);

  std::string get_str(const std::string& key) const;
  std::string get_str(const std::string& key, const std::string& fallback) const;
  long get_int(const std::string& key) const;
  long get_int(const std::string& key, long fallback) const;
  real get_real(const std::string& key) const;
  real get_real(const std::string& key, real fallback) const;
  std::vector<long> get_int_list(const std::string& key,
                                 const std::vector<long>& fallback) const;
  std::vector<std::string> get_str_list(const std::string& key,
                                        const std::vector<std::string>& fallback) const;

  const std::map<std::string, std::string>& entries() const { return values_; }
  // Keys consumed by any getter so far; used to reject unknown keys.
  std::vector<std::string> unused_keys() const;

 private:
  std::map<std::string, std::string> values_;
  mutable std::map<std::string, bool> used_;
};

// FNV-1a over the canonical emitted text; stamped into report rows.
std::string config_hash(const KvMap& kv);

}  // namespace lab
