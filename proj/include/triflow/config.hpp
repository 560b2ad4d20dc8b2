#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace triflow {

// Flat key=value configuration with dotted section names (model.d_feat=64).
// Lines are trimmed; '#' starts a comment; later assignments win. The point
// of the format is exact echo-back: what the run used is what gets logged.
class KeyValueConfig {
 public:
  static KeyValueConfig parse_file(const std::string& path);
  static KeyValueConfig parse_text(const std::string& text);

  void set(const std::string& key, const std::string& value);
  // One "key=value" token, e.g. from a --set flag; throws on malformed input.
  void apply_override(const std::string& assignment);

  bool has(const std::string& key) const;
  const std::string& get(const std::string& key) const;  // throws when absent
  std::string get_or(const std::string& key, const std::string& fallback) const;
  int get_int(const std::string& key, int fallback) const;
  std::int64_t get_i64(const std::string& key, std::int64_t fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;  // true/false/1/0

  // Insertion-ordered view (first assignment fixes the position).
  const std::vector<std::pair<std::string, std::string>>& items() const { return items_; }

  // Canonical text: sorted key=value lines, one per key.
  std::string echo() const;

 private:
  std::vector<std::pair<std::string, std::string>> items_;
};

}  // namespace triflow
