// Flat `key = value` configuration files.
//
// Grammar: one entry per line, `key = value`; keys are [A-Za-z0-9_.-]+;
// values run to end of line and are trimmed; blank lines and lines starting
// with '#' are ignored.

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace tsa {

class KvConfig {
 public:
  static KvConfig parse_file(const std::string& path);
  static KvConfig parse_text(const std::string& text);

  bool has(const std::string& key) const;
  std::string get(const std::string& key) const;  // throws if missing
  std::string get_or(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key) const;
  double get_double_or(const std::string& key, double fallback) const;
  std::int64_t get_int(const std::string& key) const;
  std::int64_t get_int_or(const std::string& key, std::int64_t fallback) const;
  bool get_bool_or(const std::string& key, bool fallback) const;

  void set(const std::string& key, const std::string& value);
  const std::map<std::string, std::string>& entries() const { return kv_; }

  // Canonical serialization: sorted keys, `key = value` per line.
  std::string text() const;

 private:
  std::map<std::string, std::string> kv_;
};

std::vector<std::string> split(const std::string& s, char sep);
std::string trim(const std::string& s);

}  // namespace tsa
