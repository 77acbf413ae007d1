#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "orderlab/controls.h"
#include "orderlab/datagen.h"
#include "orderlab/json_config.h"
#include "orderlab/model.h"
#include "orderlab/probes.h"
#include "orderlab/run_dir.h"

namespace orderlab {

enum class ExperimentVariant {
  kSixStage,
  kTwoStage,
  kCheckpointTrajectory,
  kReexposure,
  kExtraEpochs,
  kWashout,
  kSingleEpochDense,
  kDatapointLevel,
  kStageReport,
  kSanity,
};

std::string_view experiment_variant_name(ExperimentVariant v);
ExperimentVariant parse_experiment_variant(std::string_view s);

enum class SanityMode { kNone, kMixedFromStart, kUntrained, kShuffledLabels };
std::string_view sanity_mode_name(SanityMode m);

// Which analyses run; every variant starts from its own defaults and the
// "analysis" object of the config overrides them field by field.
struct AnalysisConfig {
  int layer = -1;  // negative counts from the end
  int token = -1;
  bool pairwise = true;
  bool seen_unseen = true;
  bool balance = true;
  std::vector<int> balance_bins = {3, 5, 15};
  BinStrategy balance_strategy = BinStrategy::kEqualWidth;
  std::vector<std::string> balance_conditions = {"activation", "logit", "backward", "forward"};
  int forward_max_per_class = 100;
  bool stage_report = true;
  int stage_report_epochs = 3;
  int washout_epochs = 30;
  bool trajectory = false;
  int reexposure_stage = 0;  // 0 = none
  int extra_stage = 0;       // 0 = none
  int extra_epochs = 15;
  SanityMode sanity = SanityMode::kNone;
  int datapoint_entities = 600;
};

struct ExperimentConfig {
  ExperimentVariant variant = ExperimentVariant::kSixStage;
  uint64_t seed = 1;
  std::string run_label = "run";
  DataConfig data;
  Json model = Json::object();  // ModelConfig fields; vocab size comes from the corpus
  TrainConfig train;
  ProbeOptions probe;
  AnalysisConfig analysis;
};

// Applies the variant defaults, then the user's values; unknown keys are rejected.
ExperimentConfig parse_experiment_config(const Json& j);
Json to_json(const ExperimentConfig& c);

struct StageReportData {
  std::vector<QASample> train;  // probe-train aliases of every trained stage
  std::vector<QASample> eval;   // probe-test aliases
};

// letter_map: stage -> answer letter ("A", "B", ...).
StageReportData make_stage_report_dataset(const Corpus& corpus, const std::map<int, std::string>& letter_map);
std::map<int, std::string> default_letter_map(int m);

// kind_stage[k] is the stage (1 or 2) whose dataset asks question kind k. Every
// trained entity appears in both datasets.
std::vector<std::vector<QASample>> make_datapoint_level_dataset(const Corpus& corpus,
                                                                const std::array<int, kNumAttributes>& kind_stage);

// Accuracy of the greedy first answer token against each sample's first answer token.
double answer_accuracy(const Model& model, const std::vector<QASample>& samples);

struct RunReport {
  Json report;             // contents of report.json
  double wall_seconds = 0.0;
};

RunReport run_experiment(const ExperimentConfig& config, const std::filesystem::path& run_dir);

// ------------------------------------------------ single-step pipeline pieces

// Each takes its own JSON config and reads prerequisites from the run directory.
Json step_gen_data(const Json& config, const RunDir& dir);
Json step_train(const Json& config, const RunDir& dir);
Json step_capture(const Json& config, const RunDir& dir);
Json step_probe(const Json& config, const RunDir& dir);
Json step_geometry(const Json& config, const RunDir& dir);
Json step_balance(const Json& config, const RunDir& dir);

}  // namespace orderlab
