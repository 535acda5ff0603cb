#pragma once

// Flat `key = value` text used by config files, manifests, and the config
// block embedded in dataset/checkpoint headers.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <type_traits>

namespace dystream {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class KeyValues {
 public:
  static KeyValues parse(const std::string& text);
  static KeyValues load(const std::filesystem::path& path);
  std::string format() const;
  void save(const std::filesystem::path& path) const;

  bool has(const std::string& key) const { return map_.contains(key); }
  const std::string& raw(const std::string& key) const;
  void set(const std::string& key, const std::string& value) { map_[key] = value; }
  void set(const std::string& key, double value);
  void set(const std::string& key, std::uint64_t value);
  static_assert(std::is_same_v<std::size_t, std::uint64_t>);
  void set(const std::string& key, bool value) { map_[key] = value ? "true" : "false"; }
  void set(const std::string& key, int value) { set(key, static_cast<std::uint64_t>(value)); }

  // Overwrite `out` only when the key is present.
  void read(const std::string& key, double& out) const;
  void read(const std::string& key, std::uint64_t& out) const;
  void read(const std::string& key, bool& out) const;
  void read(const std::string& key, std::string& out) const;

  void merge(const KeyValues& other);
  const std::map<std::string, std::string>& entries() const { return map_; }

 private:
  std::map<std::string, std::string> map_;
};

// Shortest text that parses back to exactly the same double.
std::string format_double(double v);

}  // namespace dystream
