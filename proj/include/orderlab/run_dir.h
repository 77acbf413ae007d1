#pragma once

#include <filesystem>
#include <string>

namespace orderlab {

// Layout: config.json, corpus/, ckpt/, acts/, reports/, report.json.
class RunDir {
 public:
  explicit RunDir(std::filesystem::path root);

  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path config() const { return root_ / "config.json"; }
  std::filesystem::path corpus() const { return root_ / "corpus"; }
  std::filesystem::path checkpoint(const std::string& name) const { return root_ / "ckpt" / (name + ".ckpt"); }
  std::filesystem::path acts(const std::string& checkpoint, int prompt_id) const;
  std::filesystem::path reports() const { return root_ / "reports"; }
  std::filesystem::path report_file(const std::string& name) const { return root_ / "reports" / name; }
  std::filesystem::path run_report() const { return root_ / "report.json"; }

  // Path relative to the run root, with forward slashes.
  std::string relative(const std::filesystem::path& p) const;
  std::filesystem::path resolve(const std::string& relative) const { return root_ / relative; }

 private:
  std::filesystem::path root_;
};

// ORDERLAB_RUN_ROOT when set, otherwise ./runs.
std::filesystem::path default_run_root();

}  // namespace orderlab
