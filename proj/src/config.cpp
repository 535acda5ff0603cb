#include "dystream/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace dystream {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

KeyValues KeyValues::parse(const std::string& text) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    kv.map_[key] = trim(line.substr(eq + 1));
  }
  return kv;
}

KeyValues KeyValues::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string KeyValues::format() const {
  std::string out;
  for (const auto& [k, v] : map_) out += k + "=" + v + "\n";
  return out;
}

void KeyValues::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << format();
  if (!out) throw ConfigError("write failed for " + path.string());
}

const std::string& KeyValues::raw(const std::string& key) const {
  auto it = map_.find(key);
  if (it == map_.end()) throw ConfigError("missing key " + key);
  return it->second;
}

void KeyValues::set(const std::string& key, double value) { map_[key] = format_double(value); }

void KeyValues::set(const std::string& key, std::uint64_t value) { map_[key] = std::to_string(value); }

void KeyValues::read(const std::string& key, double& out) const {
  if (!has(key)) return;
  const std::string& s = raw(key);
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0') throw ConfigError(key + ": not a number: " + s);
  out = v;
}

void KeyValues::read(const std::string& key, std::uint64_t& out) const {
  if (!has(key)) return;
  const std::string& s = raw(key);
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size())
    throw ConfigError(key + ": not a nonnegative integer: " + s);
  out = v;
}

void KeyValues::read(const std::string& key, bool& out) const {
  if (!has(key)) return;
  const std::string& s = raw(key);
  if (s == "true" || s == "1") out = true;
  else if (s == "false" || s == "0") out = false;
  else throw ConfigError(key + ": not a boolean: " + s);
}

void KeyValues::read(const std::string& key, std::string& out) const {
  if (has(key)) out = raw(key);
}

void KeyValues::merge(const KeyValues& other) {
  for (const auto& [k, v] : other.map_) map_[k] = v;
}

}  // namespace dystream
