#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "orderlab/experiments.h"
#include "orderlab/report.h"

using namespace orderlab;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Corpus small_corpus(int m) {
  DataConfig cfg;
  cfg.n_entities = 120;
  cfg.n_stages = m;
  cfg.seed = 4;
  return build_corpus(cfg);
}

Json tiny_run_config() {
  return Json{{"variant", "six_stage"},
              {"seed", 5},
              {"data", {{"n_entities", 180}, {"test_prompts", {1, 2}}}},
              {"model", {{"n_layers", 2}, {"d_model", 32}, {"n_heads", 2}, {"d_ff", 64}}},
              {"train", {{"epochs", 1}}},
              {"probe", {{"n_splits", 2}}},
              {"analysis",
               {{"washout_epochs", 2},
                {"stage_report_epochs", 1},
                {"balance_bins", {3}},
                {"forward_max_per_class", 4}}}};
}

}  // namespace

TEST_CASE("config parsing: variant defaults, seeds, strictness") {
  const auto six = parse_experiment_config(Json{{"seed", 9}});
  CHECK(six.variant == ExperimentVariant::kSixStage);
  CHECK(six.data.n_entities == 2400);
  CHECK(six.data.n_stages == 6);
  CHECK(six.data.seed == 9);
  CHECK(six.train.seed == 9);
  CHECK(six.probe.seed == 9);
  CHECK(six.train.epochs == 5);
  CHECK(six.analysis.washout_epochs == 30);

  const auto two = parse_experiment_config(Json{{"variant", "two_stage"}});
  CHECK(two.data.n_stages == 2);

  const auto dense = parse_experiment_config(Json{{"variant", "single_epoch_dense"}});
  CHECK(dense.data.samples_per_entity == 20);
  CHECK(dense.data.variant == Variant::kNatural);
  CHECK(dense.train.epochs == 1);

  const auto extra = parse_experiment_config(Json{{"variant", "extra_epochs"}, {"analysis", {{"extra_stage", 2}}}});
  CHECK(extra.analysis.extra_stage == 2);
  CHECK(extra.analysis.extra_epochs == 15);

  const auto sanity = parse_experiment_config(Json{{"variant", "sanity"}, {"analysis", {{"sanity", "untrained"}}}});
  CHECK(sanity.analysis.sanity == SanityMode::kUntrained);

  const auto round = parse_experiment_config(to_json(six));
  CHECK(to_json(round) == to_json(six));

  for (const Json& bad : {Json{{"variant", "seven_stage"}}, Json{{"unknown", 1}}, Json{{"data", {{"n_entitys", 5}}}},
                          Json{{"model", {{"depth", 2}}}}, Json{{"variant", "reexposure"}, {"analysis", {{"reexposure_stage", 0}}}},
                          Json{{"analysis", {{"balance_conditions", {"vibes"}}}}}}) {
    try {
      parse_experiment_config(bad);
      FAIL("expected ConfigInvalid for " << bad.dump());
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kConfigInvalid);
    }
  }
}

TEST_CASE("stage-report dataset") {
  const auto corpus = small_corpus(2);
  const auto data = make_stage_report_dataset(corpus, default_letter_map(2));
  const int a = corpus.vocab.id("A"), b = corpus.vocab.id("B");
  std::set<int> train_entities;
  for (const auto& s : data.train) {
    CHECK((s.answer_tokens.front() == a || s.answer_tokens.front() == b));
    CHECK(s.answer_tokens.front() == (s.stage == 1 ? a : b));
    CHECK(s.probe_split == ProbeSplit::kTrain);
    train_entities.insert(s.entity_id);
  }
  for (const auto& s : data.eval) CHECK(train_entities.count(s.entity_id) == 0);
  CHECK(data.train.size() + data.eval.size() == 120u);

  const auto six = make_stage_report_dataset(small_corpus(6), default_letter_map(6));
  std::set<int> letters;
  for (const auto& s : six.train) letters.insert(s.answer_tokens.front());
  CHECK(letters.size() == 6u);
  CHECK(default_letter_map(6).at(6) == "F");
}

TEST_CASE("datapoint-level dataset") {
  const auto corpus = small_corpus(2);
  const auto sets = make_datapoint_level_dataset(corpus, {1, 2, 1, 2, 2, 1});
  REQUIRE(sets.size() == 2u);
  std::map<int, int> per_entity_1, per_entity_2;
  for (const auto& s : sets[0]) {
    per_entity_1[s.entity_id]++;
  }
  for (const auto& s : sets[1]) per_entity_2[s.entity_id]++;
  CHECK(per_entity_1.size() == 120u);
  for (const auto& [e, n] : per_entity_1) CHECK(n == 3);
  for (const auto& [e, n] : per_entity_2) CHECK(n == 3);
  std::set<int> e1, e2;
  for (const auto& [e, n] : per_entity_1) e1.insert(e);
  for (const auto& [e, n] : per_entity_2) e2.insert(e);
  CHECK(e1 == e2);
  for (const auto& s : sets[0]) CHECK((kind_of_template(s.template_id) == 0 || kind_of_template(s.template_id) == 2 ||
                                       kind_of_template(s.template_id) == 5));
}

TEST_CASE("tiny six-stage run is traceable and deterministic") {
  const auto root = std::filesystem::temp_directory_path() / "orderlab_tiny_run";
  std::filesystem::remove_all(root);
  const auto cfg = parse_experiment_config(tiny_run_config());
  run_experiment(cfg, root / "a");
  run_experiment(cfg, root / "b");

  const RunDir dir(root / "a");
  for (const char* f : {"config.json", "report.json", "reports/projection_final.csv", "reports/pairwise_final.json",
                        "reports/washout_curve.csv", "reports/stage_report.json", "reports/balance.json",
                        "reports/probe_seen_unseen_p1.csv", "ckpt/D6.ckpt", "acts/final/1.actv"}) {
    CHECK_MESSAGE(std::filesystem::exists(dir.resolve(f)), f);
  }
  const auto checks = check_traceability(dir);
  CHECK(checks.size() > 20u);
  for (const auto& c : checks) {
    INFO(c.name);
    CHECK(c.match);
  }
  CHECK(slurp(root / "a" / "report.json") == slurp(root / "b" / "report.json"));
  CHECK(slurp(root / "a" / "reports" / "projection_final.csv") == slurp(root / "b" / "reports" / "projection_final.csv"));

  const Json washout = read_json_file(dir.report_file("washout.json"));
  CHECK(washout.at("probe_retraining_events").get<int>() == 2);
  std::filesystem::remove_all(root);
}

TEST_CASE("step functions chain through the run directory") {
  const auto root = std::filesystem::temp_directory_path() / "orderlab_steps";
  std::filesystem::remove_all(root);
  const RunDir dir(root);
  step_gen_data({{"data", {{"n_entities", 60}, {"n_stages", 2}, {"test_prompts", {1}}}}}, dir);
  step_train({{"seed", 2}, {"model", {{"n_layers", 1}, {"d_model", 16}, {"n_heads", 2}, {"d_ff", 32}}}, {"train", {{"epochs", 1}}}}, dir);
  step_capture({{"checkpoint", "final"}}, dir);
  const auto probe = step_probe({{"checkpoint", "final"}, {"prompt", 1}, {"probe", {{"n_splits", 2}}}}, dir);
  CHECK(std::filesystem::exists(dir.resolve(probe.at("file").get<std::string>())));
  const auto geo = step_geometry({{"checkpoint", "final"}, {"prompts", {1}}}, dir);
  CHECK(geo.at("tau").contains("p1"));
  const auto bal = step_balance({{"checkpoint", "final"}, {"n_bins", 3}}, dir);
  CHECK(bal.contains("result"));
  try {
    step_probe({{"checkpoint", "nope"}}, dir);
    FAIL("expected MissingArtifact");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kMissingArtifact);
  }
  std::filesystem::remove_all(root);
}
