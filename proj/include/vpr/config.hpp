#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "vpr/training.hpp"

namespace vpr {

// Minimal TOML-style key/value config: [section] headers, key = value lines,
// # comments. Values are stored as strings and parsed on access.
class Config {
 public:
  static Config parse_file(const std::string& path);
  static Config parse_string(const std::string& text);

  void set(const std::string& key, const std::string& value) { kv_[key] = value; }
  bool has(const std::string& key) const { return kv_.count(key) != 0; }

  std::string get_str(const std::string& key, const std::string& fallback) const;
  double get_num(const std::string& key, double fallback) const;
  int get_int(const std::string& key, int fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  // FNV-1a over the sorted canonical "key=value" lines.
  uint64_t hash() const;
  std::string canonical() const;

  void apply(EncoderConfig& cfg) const;
  void apply(RerankerConfig& cfg) const;
  void apply(AblationFlags& flags) const;
  void apply(TrainConfig& cfg) const;  // also applies the nested configs

 private:
  std::map<std::string, std::string> kv_;
};

}  // namespace vpr
