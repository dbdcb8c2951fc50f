#pragma once

#include <initializer_list>
#include <string>

#include <json.hpp>

#include "nmroute/errors.hpp"

namespace nmr::jsonutil {

using nlohmann::json;

inline void require_object(const json& j, const std::string& what) {
  if (!j.is_object()) throw ConfigError(what + ": expected a JSON object");
}

inline void reject_unknown(const json& j, std::initializer_list<const char*> known,
                           const std::string& what) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok = ok || it.key() == k;
    if (!ok) throw ConfigError(what + ": unknown key '" + it.key() + "'");
  }
}

// Reads j[key] into out when present; type mismatches become ConfigError.
template <typename V>
void read(const json& j, const char* key, V& out, const std::string& what) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->template get<V>();
  } catch (const json::exception& e) {
    throw ConfigError(what + "." + key + ": " + e.what());
  }
}

}  // namespace nmr::jsonutil
