#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "orderlab/experiments.h"
#include "orderlab/oracle.h"
#include "orderlab/report.h"

using namespace orderlab;

namespace {

struct Options {
  std::string config;
  std::string run_dir;
  std::optional<uint64_t> seed;
  int threads = 0;
  int verbosity = 0;
};

Json load_config(const Options& o, bool required) {
  Json j = Json::object();
  if (!o.config.empty()) {
    j = read_json_file(o.config);
  } else if (required) {
    fail(ErrorCode::kConfigInvalid, "--config is required for this subcommand");
  }
  if (!j.is_object()) fail(ErrorCode::kConfigInvalid, o.config + ": top level must be an object");
  if (o.seed) j["seed"] = *o.seed;
  return j;
}

std::filesystem::path run_root(const Options& o, const std::string& label) {
  if (!o.run_dir.empty()) return o.run_dir;
  return default_run_root() / label;
}

int exit_code(ErrorCode c) {
  switch (c) {
    case ErrorCode::kMissingArtifact: return 2;
    case ErrorCode::kConfigInvalid: return 3;
    default: return 1;
  }
}

void emit(const Json& j) { std::cout << j.dump(2) << '\n'; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"orderlab: training-order probing toolkit"};
  app.require_subcommand(1);
  Options opt;
  app.add_option("--threads", opt.threads, "Worker thread cap (0 = hardware)");
  app.add_flag("-v,--verbose", opt.verbosity, "More output on stderr");

  std::map<std::string, CLI::App*> subs;
  const std::vector<std::pair<std::string, std::string>> names = {
      {"gen-data", "Generate the staged QA corpus"},
      {"train", "Sequentially fine-tune on every stage"},
      {"capture", "Capture residual-stream activations of test prompts"},
      {"probe", "Train the layer x token probe grid"},
      {"geometry", "Centroid projection on the diff-mean axis"},
      {"balance", "Statistic-balanced vs random-downsampled probes"},
      {"experiment", "Run a full experiment variant"},
      {"oracle-verify", "Check the analysis pipeline on planted signals"},
      {"report", "Recompute every reported scalar from the run directory"},
  };
  for (const auto& [name, help] : names) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("-c,--config", opt.config, "JSON config file");
    sub->add_option("-r,--run-dir", opt.run_dir, "Run directory");
    sub->add_option("--seed", opt.seed, "Override the top-level seed");
    sub->fallthrough();
    subs[name] = sub;
  }
  CLI11_PARSE(app, argc, argv);
  if (opt.threads > 0) set_max_threads(opt.threads);

  try {
    if (subs["experiment"]->parsed()) {
      const auto cfg = parse_experiment_config(load_config(opt, true));
      const auto root = run_root(opt, cfg.run_label);
      if (opt.verbosity > 0) std::cerr << "running " << experiment_variant_name(cfg.variant) << " in " << root << '\n';
      const auto r = run_experiment(cfg, root);
      emit({{"run_dir", root.string()},
            {"report", (root / "report.json").string()},
            {"n_scalars", r.report.at("scalars").size()},
            {"wall_seconds", r.wall_seconds}});
      return 0;
    }
    if (subs["oracle-verify"]->parsed()) {
      StrictObject obj(load_config(opt, false), "");
      const auto seed = obj.get<uint64_t>("seed", 1);
      const auto persist = obj.get<bool>("write_activations", true);
      obj.finish();
      const auto root = run_root(opt, "oracle");
      const auto rows = verify_pipeline(default_verify_cases(), seed, persist ? root : std::filesystem::path{});
      const Json table = verify_to_json(rows);
      write_json_file(root / "reports" / "oracle_verify.json", table);
      bool ok = true;
      for (const auto& r : rows) ok = ok && r.pass;
      emit({{"pass", ok}, {"checks", table}});
      return ok ? 0 : 1;
    }
    if (subs["report"]->parsed()) {
      const RunDir dir(run_root(opt, "run"));
      const auto checks = check_traceability(dir);
      bool ok = true;
      for (const auto& c : checks) ok = ok && c.match;
      emit({{"pass", ok}, {"checks", trace_checks_to_json(checks)}});
      return ok ? 0 : 1;
    }
    const RunDir dir(run_root(opt, "run"));
    Json out;
    if (subs["gen-data"]->parsed()) out = step_gen_data(load_config(opt, false), dir);
    if (subs["train"]->parsed()) out = step_train(load_config(opt, false), dir);
    if (subs["capture"]->parsed()) out = step_capture(load_config(opt, false), dir);
    if (subs["probe"]->parsed()) out = step_probe(load_config(opt, false), dir);
    if (subs["geometry"]->parsed()) out = step_geometry(load_config(opt, false), dir);
    if (subs["balance"]->parsed()) out = step_balance(load_config(opt, false), dir);
    emit(out);
    return 0;
  } catch (const Error& e) {
    std::cerr << Json{{"error", e.name()}, {"message", e.what()}}.dump() << '\n';
    return exit_code(e.code());
  } catch (const std::exception& e) {
    std::cerr << Json{{"error", "Internal"}, {"message", e.what()}}.dump() << '\n';
    return 1;
  }
}
