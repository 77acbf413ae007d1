#include "orderlab/report.h"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "orderlab/geometry.h"

namespace orderlab {

namespace {

struct Csv {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  size_t column(const std::string& name, const std::string& file) const {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) fail(ErrorCode::kMissingArtifact, file + ": no column '" + name + "'");
    return static_cast<size_t>(it - header.begin());
  }
};

Csv read_csv(const std::filesystem::path& path) {
  std::istringstream in(read_text_file(path));
  Csv csv;
  std::string line;
  if (!std::getline(in, line)) fail(ErrorCode::kMissingArtifact, path.string() + ": empty CSV");
  csv.header = split_fields(line);
  while (std::getline(in, line)) {
    if (!line.empty()) csv.rows.push_back(split_fields(line));
  }
  return csv;
}

}  // namespace

void Tracer::add(const std::string& name, double value, Json source) {
  if (scalars_.contains(name)) fail(ErrorCode::kInvalidArgument, "scalar '" + name + "' reported twice");
  scalars_[name] = Json{{"value", value}, {"source", std::move(source)}};
}

void Tracer::csv_max(const std::string& name, double value, const std::filesystem::path& file,
                     const std::string& column) {
  add(name, value, {{"rule", "csv_max"}, {"file", dir_.relative(file)}, {"column", column}});
}

void Tracer::csv_cell(const std::string& name, double value, const std::filesystem::path& file,
                      const std::string& column, const std::map<std::string, std::string>& where) {
  add(name, value, {{"rule", "csv_cell"}, {"file", dir_.relative(file)}, {"column", column}, {"where", where}});
}

void Tracer::kendall(const std::string& name, double value, const std::filesystem::path& file,
                     const std::string& run) {
  add(name, value, {{"rule", "kendall"}, {"file", dir_.relative(file)}, {"run", run}});
}

void Tracer::json(const std::string& name, double value, const std::filesystem::path& file,
                  const std::string& pointer) {
  add(name, value, {{"rule", "json"}, {"file", dir_.relative(file)}, {"pointer", pointer}});
}

double recompute_scalar(const RunDir& dir, const Json& source) {
  const auto rule = source.at("rule").get<std::string>();
  const auto rel = source.at("file").get<std::string>();
  const auto path = dir.resolve(rel);
  if (rule == "csv_max" || rule == "csv_cell") {
    const Csv csv = read_csv(path);
    const size_t col = csv.column(source.at("column").get<std::string>(), rel);
    std::vector<std::pair<size_t, std::string>> filters;
    if (rule == "csv_cell") {
      for (const auto& [k, v] : source.at("where").items()) filters.emplace_back(csv.column(k, rel), v.get<std::string>());
    }
    double best = -std::numeric_limits<double>::infinity();
    int matches = 0;
    double found = 0.0;
    for (const auto& row : csv.rows) {
      if (row.size() != csv.header.size()) fail(ErrorCode::kMissingArtifact, rel + ": ragged CSV row");
      const double v = std::stod(row[col]);
      if (rule == "csv_max") {
        best = std::max(best, v);
        continue;
      }
      const bool ok = std::all_of(filters.begin(), filters.end(), [&](const auto& f) { return row[f.first] == f.second; });
      if (ok) {
        found = v;
        ++matches;
      }
    }
    if (rule == "csv_max") {
      if (csv.rows.empty()) fail(ErrorCode::kMissingArtifact, rel + ": no rows");
      return best;
    }
    if (matches != 1) fail(ErrorCode::kMissingArtifact, rel + ": filter matched " + std::to_string(matches) + " rows");
    return found;
  }
  if (rule == "kendall") {
    const auto run = source.at("run").get<std::string>();
    std::vector<double> px, stage;
    for (const auto& r : read_projection_csv(path)) {
      if (r.run != run) continue;
      px.push_back(r.px);
      stage.push_back(r.stage);
    }
    return kendall_tau(px, stage);
  }
  if (rule == "json") {
    const Json j = read_json_file(path);
    const Json::json_pointer ptr(source.at("pointer").get<std::string>());
    if (!j.contains(ptr)) fail(ErrorCode::kMissingArtifact, rel + ": no value at " + ptr.to_string());
    return j.at(ptr).get<double>();
  }
  fail(ErrorCode::kInvalidArgument, "unknown trace rule '" + rule + "'");
}

std::vector<TraceCheck> check_traceability(const RunDir& dir) {
  const Json report = read_json_file(dir.run_report());
  std::vector<TraceCheck> out;
  for (const auto& [name, entry] : report.at("scalars").items()) {
    TraceCheck c;
    c.name = name;
    c.reported = entry.at("value").get<double>();
    c.recomputed = recompute_scalar(dir, entry.at("source"));
    c.match = c.reported == c.recomputed ||
              std::abs(c.reported - c.recomputed) <= 1e-12 * std::max(1.0, std::abs(c.reported));
    out.push_back(c);
  }
  return out;
}

Json trace_checks_to_json(const std::vector<TraceCheck>& checks) {
  Json out = Json::array();
  for (const auto& c : checks) {
    out.push_back({{"name", c.name}, {"reported", c.reported}, {"recomputed", c.recomputed}, {"match", c.match}});
  }
  return out;
}

}  // namespace orderlab
