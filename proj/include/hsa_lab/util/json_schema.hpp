#pragma once

// Strict JSON field access: missing required fields and unknown fields are
// rejected with the full dotted path of the offending field.

#include <set>
#include <stdexcept>
#include <string>

#include "json.hpp"

namespace hsa_lab {

using json = nlohmann::json;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class JsonReader {
 public:
  JsonReader(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError(where() + "expected an object");
  }

  template <class T>
  T required(const std::string& key) {
    seen_.insert(key);
    if (!obj_.contains(key)) throw ConfigError("missing required field '" + field(key) + "'");
    return convert<T>(key);
  }

  template <class T>
  T optional(const std::string& key, T fallback) {
    seen_.insert(key);
    if (!obj_.contains(key)) return fallback;
    return convert<T>(key);
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return obj_.contains(key);
  }
  const json& raw(const std::string& key) {
    seen_.insert(key);
    return obj_.at(key);
  }
  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  /// Call after every field has been read.
  void reject_unknown() const {
    for (const auto& [k, v] : obj_.items()) {
      if (!seen_.count(k)) throw ConfigError("unknown field '" + field(k) + "'");
    }
  }

 private:
  template <class T>
  T convert(const std::string& key) {
    try {
      return obj_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError("field '" + field(key) + "' has the wrong type: " + obj_.at(key).dump());
    }
  }
  std::string where() const { return path_.empty() ? "" : "'" + path_ + "': "; }

  const json& obj_;
  std::string path_;
  std::set<std::string> seen_;
};

/// FNV-1a 64 of a byte string.
inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 1469598103934665603ull) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xf];
  return s;
}

}  // namespace hsa_lab
