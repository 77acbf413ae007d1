#include "orderlab/json_config.h"

#include <fstream>
#include <sstream>

namespace orderlab {

const Json StrictObject::kEmpty = Json::object();

StrictObject::StrictObject(const Json& j, std::string path) : obj_(j), path_(std::move(path)) {
  if (!obj_.is_object()) {
    fail(ErrorCode::kConfigInvalid, "expected an object at '" + (path_.empty() ? "<root>" : path_) + "'");
  }
}

bool StrictObject::has(const std::string& key) const { return obj_.contains(key); }

StrictObject StrictObject::child(const std::string& key) {
  used_.insert(key);
  auto it = obj_.find(key);
  if (it == obj_.end() || it->is_null()) return StrictObject(kEmpty, where(key));
  return StrictObject(*it, where(key));
}

const Json& StrictObject::raw(const std::string& key) {
  used_.insert(key);
  auto it = obj_.find(key);
  if (it == obj_.end()) fail(ErrorCode::kConfigInvalid, "missing required key '" + where(key) + "'");
  return *it;
}

void StrictObject::finish() const {
  for (auto it = obj_.begin(); it != obj_.end(); ++it) {
    if (!used_.count(it.key())) {
      fail(ErrorCode::kConfigInvalid, "unknown key '" + where(it.key()) + "'");
    }
  }
}

std::string StrictObject::where(const std::string& key) const {
  return path_.empty() ? key : path_ + "." + key;
}

Json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kMissingArtifact, "cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    fail(ErrorCode::kConfigInvalid, path.string() + ": " + e.what());
  }
}

void write_json_file(const std::filesystem::path& path, const Json& j) {
  write_text_file(path, j.dump(2) + "\n");
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::kInvalidArgument, "cannot write " + path.string());
  out << text;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kMissingArtifact, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace orderlab
