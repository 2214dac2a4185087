#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace koff {

// Flat key=value configuration. Lines are UTF-8; '#' starts a comment.
// Lookups are recorded so callers can reject keys nobody consumed.
class Config {
 public:
  static Config parse(const std::string& text, const std::string& origin = "<string>");
  static Config load(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  // "key=value" override, as given on the command line.
  void apply_override(const std::string& assignment);
  void merge(const Config& other);

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  std::string get_string(const std::string& key, const std::string& fallback) const;
  long long get_int(const std::string& key, long long fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<double> get_doubles(const std::string& key, std::vector<double> fallback) const;

  std::vector<std::string> unused_keys() const;
  // Throws ConfigError naming every key that no getter consumed.
  void require_all_used() const;

  std::string dump() const;
  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  const std::string* find(const std::string& key) const;

  std::map<std::string, std::string> values_;
  mutable std::set<std::string> used_;
};

}  // namespace koff
