#pragma once

#include <json.hpp>
#include <set>
#include <string>

#include "controlvae/common.hpp"

CONTROLVAE_NAMESPACE_BEGIN

// Reads optional fields out of a JSON object and rejects keys nobody asked
// for once finish() is called.
class ConfigReader {
 public:
  ConfigReader(const nlohmann::json& j, std::string section)
      : j_(j), section_(std::move(section)) {
    if (!j_.is_object()) throw ConfigError(section_ + ": expected an object");
  }

  template <class T>
  ConfigReader& get(const char* key, T& field) {
    seen_.insert(key);
    if (!j_.contains(key)) return *this;
    try {
      field = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(section_ + "." + key + ": " + e.what());
    }
    return *this;
  }

  bool has(const char* key) {
    seen_.insert(key);
    return j_.contains(key);
  }
  const nlohmann::json& at(const char* key) const { return j_.at(key); }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) {
        throw ConfigError("unknown config key '" + section_ + "." + it.key() + "'");
      }
    }
  }

 private:
  const nlohmann::json& j_;
  std::string section_;
  std::set<std::string> seen_;
};

CONTROLVAE_NAMESPACE_END
