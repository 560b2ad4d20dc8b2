#include "triflow/config.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace triflow {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error("config: " + msg); }

std::string trim(const std::string& s) {
  size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

}  // namespace

KeyValueConfig KeyValueConfig::parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("cannot open '" + path + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_text(buffer.str());
}

KeyValueConfig KeyValueConfig::parse_text(const std::string& text) {
  KeyValueConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      fail("line " + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
    const auto key = trim(line.substr(0, eq));
    if (key.empty()) fail("line " + std::to_string(lineno) + ": empty key in '" + line + "'");
    cfg.set(key, trim(line.substr(eq + 1)));
  }
  return cfg;
}

void KeyValueConfig::set(const std::string& key, const std::string& value) {
  for (auto& [k, v] : items_)
    if (k == key) {
      v = value;
      return;
    }
  items_.emplace_back(key, value);
}

void KeyValueConfig::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    fail("override must look like key=value, got '" + assignment + "'");
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

bool KeyValueConfig::has(const std::string& key) const {
  for (const auto& [k, v] : items_)
    if (k == key) return true;
  return false;
}

const std::string& KeyValueConfig::get(const std::string& key) const {
  for (const auto& [k, v] : items_)
    if (k == key) return v;
  fail("missing key '" + key + "'");
}

std::string KeyValueConfig::get_or(const std::string& key, const std::string& fallback) const {
  return has(key) ? get(key) : fallback;
}

int KeyValueConfig::get_int(const std::string& key, int fallback) const {
  if (!has(key)) return fallback;
  try {
    size_t used = 0;
    const int v = std::stoi(get(key), &used);
    if (used != get(key).size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    fail("key '" + key + "': expected an integer, got '" + get(key) + "'");
  }
}

std::int64_t KeyValueConfig::get_i64(const std::string& key, std::int64_t fallback) const {
  if (!has(key)) return fallback;
  try {
    size_t used = 0;
    const std::int64_t v = std::stoll(get(key), &used);
    if (used != get(key).size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    fail("key '" + key + "': expected an integer, got '" + get(key) + "'");
  }
}

std::uint64_t KeyValueConfig::get_u64(const std::string& key, std::uint64_t fallback) const {
  if (!has(key)) return fallback;
  try {
    size_t used = 0;
    const std::uint64_t v = std::stoull(get(key), &used);
    if (used != get(key).size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    fail("key '" + key + "': expected an unsigned integer, got '" + get(key) + "'");
  }
}

double KeyValueConfig::get_double(const std::string& key, double fallback) const {
  if (!has(key)) return fallback;
  try {
    size_t used = 0;
    const double v = std::stod(get(key), &used);
    if (used != get(key).size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    fail("key '" + key + "': expected a number, got '" + get(key) + "'");
  }
}

bool KeyValueConfig::get_bool(const std::string& key, bool fallback) const {
  if (!has(key)) return fallback;
  const auto& v = get(key);
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  fail("key '" + key + "': expected true/false/1/0, got '" + v + "'");
}

std::string KeyValueConfig::echo() const {
  auto sorted = items_;
  std::sort(sorted.begin(), sorted.end());
  std::string out;
  for (const auto& [k, v] : sorted) {
    out += k;
    out += '=';
    out += v;
    out += '\n';
  }
  return out;
}

}  // namespace triflow
