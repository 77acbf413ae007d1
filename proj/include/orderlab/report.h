#pragma once

#include <map>
#include <string>
#include <vector>

#include "orderlab/json_config.h"
#include "orderlab/run_dir.h"

namespace orderlab {

// Collects reported scalars together with the rule that recomputes each one
// from a file in the run directory.
class Tracer {
 public:
  explicit Tracer(const RunDir& dir) : dir_(dir) {}

  // Maximum of a CSV column.
  void csv_max(const std::string& name, double value, const std::filesystem::path& file, const std::string& column);
  // Value of a CSV column in the single row matching every (column, value) filter.
  void csv_cell(const std::string& name, double value, const std::filesystem::path& file, const std::string& column,
                const std::map<std::string, std::string>& where);
  // Kendall tau of px against stage over projection rows of one run.
  void kendall(const std::string& name, double value, const std::filesystem::path& file, const std::string& run);
  // Number at a JSON pointer.
  void json(const std::string& name, double value, const std::filesystem::path& file, const std::string& pointer);

  const Json& scalars() const { return scalars_; }

 private:
  void add(const std::string& name, double value, Json source);

  const RunDir& dir_;
  Json scalars_ = Json::object();
};

double recompute_scalar(const RunDir& dir, const Json& source);

struct TraceCheck {
  std::string name;
  double reported = 0.0;
  double recomputed = 0.0;
  bool match = false;
};

// Re-derives every scalar listed in report.json from the persisted artifacts.
std::vector<TraceCheck> check_traceability(const RunDir& dir);
Json trace_checks_to_json(const std::vector<TraceCheck>& checks);

}  // namespace orderlab
