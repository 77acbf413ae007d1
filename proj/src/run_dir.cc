#include "orderlab/run_dir.h"

#include <cstdlib>

#include "orderlab/capture.h"

namespace orderlab {

RunDir::RunDir(std::filesystem::path root) : root_(std::move(root)) {}

std::filesystem::path RunDir::acts(const std::string& checkpoint, int prompt_id) const {
  return activation_path(root_, checkpoint, prompt_id);
}

std::string RunDir::relative(const std::filesystem::path& p) const {
  return std::filesystem::path(p).lexically_relative(root_).generic_string();
}

std::filesystem::path default_run_root() {
  if (const char* env = std::getenv("ORDERLAB_RUN_ROOT"); env != nullptr && *env != '\0') return env;
  return "runs";
}

}  // namespace orderlab
