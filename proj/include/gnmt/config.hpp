#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <string>

namespace gnmt {

/// Flat key=value settings. Blank lines and lines starting with '#' are
/// ignored; whitespace around keys and values is trimmed.
class Config {
 public:
  /// Every key a config file may contain.
  static const std::set<std::string>& known_keys();

  /// Throws ConfigError for unknown or repeated keys and malformed lines.
  static Config parse(std::istream& in, const std::string& name = "config");
  static Config load(const std::string& path);

  /// Overrides or adds a value; the key must be known.
  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const { return values_.count(key) != 0; }
  std::optional<std::string> get(const std::string& key) const;

  /// Required lookups throw UsageError naming the missing key.
  std::string require(const std::string& key) const;

  std::string get_string(const std::string& key, const std::string& fallback) const;
  std::size_t get_size(const std::string& key, std::size_t fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;

  const std::map<std::string, std::string>& values() const { return values_; }

  /// Sorted key=value lines; parse(write(c)) == c.
  void write(std::ostream& out) const;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace gnmt
