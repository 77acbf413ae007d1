#pragma once

#include <filesystem>
#include <set>
#include <string>

#include "json.hpp"
#include "orderlab/common.h"

namespace orderlab {

using Json = nlohmann::json;

// Reads a JSON object while tracking consumed keys; finish() rejects any key
// nobody asked for. Type mismatches and missing required keys also raise
// ConfigInvalid with the dotted path of the offending field.
class StrictObject {
 public:
  StrictObject(const Json& j, std::string path);

  bool has(const std::string& key) const;

  template <typename T>
  T get(const std::string& key, const T& fallback) {
    used_.insert(key);
    auto it = obj_.find(key);
    if (it == obj_.end() || it->is_null()) return fallback;
    return convert<T>(*it, key);
  }

  template <typename T>
  T require(const std::string& key) {
    used_.insert(key);
    auto it = obj_.find(key);
    if (it == obj_.end()) fail(ErrorCode::kConfigInvalid, "missing required key '" + where(key) + "'");
    return convert<T>(*it, key);
  }

  // Sub-object view; an absent key yields an empty object.
  StrictObject child(const std::string& key);
  const Json& raw(const std::string& key);

  void finish() const;
  std::string where(const std::string& key) const;

 private:
  template <typename T>
  T convert(const Json& v, const std::string& key) const {
    try {
      return v.get<T>();
    } catch (const Json::exception& e) {
      fail(ErrorCode::kConfigInvalid, "bad value for '" + where(key) + "': " + e.what());
    }
  }

  const Json& obj_;
  std::string path_;
  std::set<std::string> used_;
  static const Json kEmpty;
};

Json read_json_file(const std::filesystem::path& path);
void write_json_file(const std::filesystem::path& path, const Json& j);
void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace orderlab
