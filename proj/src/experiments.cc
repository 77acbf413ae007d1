#include "orderlab/experiments.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "orderlab/capture.h"
#include "orderlab/geometry.h"
#include "orderlab/report.h"

namespace orderlab {

namespace {

constexpr std::array<std::pair<ExperimentVariant, std::string_view>, 10> kVariantNames{{
    {ExperimentVariant::kSixStage, "six_stage"},
    {ExperimentVariant::kTwoStage, "two_stage"},
    {ExperimentVariant::kCheckpointTrajectory, "checkpoint_trajectory"},
    {ExperimentVariant::kReexposure, "reexposure"},
    {ExperimentVariant::kExtraEpochs, "extra_epochs"},
    {ExperimentVariant::kWashout, "washout"},
    {ExperimentVariant::kSingleEpochDense, "single_epoch_dense"},
    {ExperimentVariant::kDatapointLevel, "datapoint_level"},
    {ExperimentVariant::kStageReport, "stage_report"},
    {ExperimentVariant::kSanity, "sanity"},
}};

constexpr std::array<std::pair<SanityMode, std::string_view>, 4> kSanityNames{{
    {SanityMode::kNone, "none"},
    {SanityMode::kMixedFromStart, "mixed_from_start"},
    {SanityMode::kUntrained, "untrained"},
    {SanityMode::kShuffledLabels, "shuffled_labels"},
}};

SanityMode parse_sanity_mode(std::string_view s) {
  for (const auto& [m, name] : kSanityNames) {
    if (name == s) return m;
  }
  fail(ErrorCode::kConfigInvalid, "unknown sanity mode '" + std::string(s) + "'");
}

const std::set<std::string> kConditions = {"activation", "logit", "backward", "forward"};

Json variant_defaults(ExperimentVariant v) {
  Json data = Json::object(), train = Json::object(), analysis = Json::object();
  const Json quiet = {{"washout_epochs", 0}, {"stage_report", false}, {"balance", false}, {"seen_unseen", false}};
  switch (v) {
    case ExperimentVariant::kSixStage:
      break;
    case ExperimentVariant::kTwoStage:
      data["n_stages"] = 2;
      analysis = {{"washout_epochs", 0}, {"stage_report", false}};
      break;
    case ExperimentVariant::kCheckpointTrajectory:
      analysis = quiet;
      analysis["trajectory"] = true;
      break;
    case ExperimentVariant::kReexposure:
      analysis = quiet;
      analysis["reexposure_stage"] = 1;
      break;
    case ExperimentVariant::kExtraEpochs:
      analysis = quiet;
      analysis["extra_stage"] = 3;
      break;
    case ExperimentVariant::kWashout:
      analysis = quiet;
      analysis["washout_epochs"] = 30;
      break;
    case ExperimentVariant::kSingleEpochDense:
      data = {{"variant", "natural"}, {"samples_per_entity", 20}};
      train["epochs"] = 1;
      analysis = quiet;
      break;
    case ExperimentVariant::kDatapointLevel:
      data["n_stages"] = 2;
      analysis = quiet;
      analysis["pairwise"] = false;
      break;
    case ExperimentVariant::kStageReport:
      data["n_stages"] = 2;
      analysis = quiet;
      analysis["stage_report"] = true;
      analysis["pairwise"] = false;
      break;
    case ExperimentVariant::kSanity:
      data["test_prompts"] = {1};
      data["n_entities"] = 6000;
      analysis = quiet;
      analysis["pairwise"] = false;
      analysis["sanity"] = "shuffled_labels";
      break;
  }
  return Json{{"data", data}, {"train", train}, {"analysis", analysis}};
}

AnalysisConfig parse_analysis(StrictObject o) {
  AnalysisConfig a;
  a.layer = o.get<int>("layer", a.layer);
  a.token = o.get<int>("token", a.token);
  a.pairwise = o.get<bool>("pairwise", a.pairwise);
  a.seen_unseen = o.get<bool>("seen_unseen", a.seen_unseen);
  a.balance = o.get<bool>("balance", a.balance);
  a.balance_bins = o.get<std::vector<int>>("balance_bins", a.balance_bins);
  try {
    a.balance_strategy = parse_bin_strategy(o.get<std::string>("balance_strategy", "uniform"));
  } catch (const Error& e) {
    fail(ErrorCode::kConfigInvalid, e.what());
  }
  a.balance_conditions = o.get<std::vector<std::string>>("balance_conditions", a.balance_conditions);
  a.forward_max_per_class = o.get<int>("forward_max_per_class", a.forward_max_per_class);
  a.stage_report = o.get<bool>("stage_report", a.stage_report);
  a.stage_report_epochs = o.get<int>("stage_report_epochs", a.stage_report_epochs);
  a.washout_epochs = o.get<int>("washout_epochs", a.washout_epochs);
  a.trajectory = o.get<bool>("trajectory", a.trajectory);
  a.reexposure_stage = o.get<int>("reexposure_stage", a.reexposure_stage);
  a.extra_stage = o.get<int>("extra_stage", a.extra_stage);
  a.extra_epochs = o.get<int>("extra_epochs", a.extra_epochs);
  a.sanity = parse_sanity_mode(o.get<std::string>("sanity", "none"));
  a.datapoint_entities = o.get<int>("datapoint_entities", a.datapoint_entities);
  o.finish();
  for (int n : a.balance_bins) {
    if (n < 2) fail(ErrorCode::kConfigInvalid, "analysis.balance_bins entries must be >= 2");
  }
  for (const auto& c : a.balance_conditions) {
    if (!kConditions.count(c)) fail(ErrorCode::kConfigInvalid, "unknown balance condition '" + c + "'");
  }
  if (a.forward_max_per_class < 1) fail(ErrorCode::kConfigInvalid, "analysis.forward_max_per_class must be >= 1");
  if (a.stage_report_epochs < 0 || a.washout_epochs < 0 || a.extra_epochs < 0) {
    fail(ErrorCode::kConfigInvalid, "analysis epoch counts must be >= 0");
  }
  if (a.datapoint_entities < 2) fail(ErrorCode::kConfigInvalid, "analysis.datapoint_entities must be >= 2");
  return a;
}

Json to_json(const AnalysisConfig& a) {
  return Json{{"layer", a.layer},
              {"token", a.token},
              {"pairwise", a.pairwise},
              {"seen_unseen", a.seen_unseen},
              {"balance", a.balance},
              {"balance_bins", a.balance_bins},
              {"balance_strategy", bin_strategy_name(a.balance_strategy)},
              {"balance_conditions", a.balance_conditions},
              {"forward_max_per_class", a.forward_max_per_class},
              {"stage_report", a.stage_report},
              {"stage_report_epochs", a.stage_report_epochs},
              {"washout_epochs", a.washout_epochs},
              {"trajectory", a.trajectory},
              {"reexposure_stage", a.reexposure_stage},
              {"extra_stage", a.extra_stage},
              {"extra_epochs", a.extra_epochs},
              {"sanity", sanity_mode_name(a.sanity)},
              {"datapoint_entities", a.datapoint_entities}};
}

std::string pkey(int prompt) { return "p" + std::to_string(prompt); }

int resolve_index(int requested, int size, const std::string& what) {
  const int idx = requested < 0 ? size + requested : requested;
  if (idx < 0 || idx >= size) {
    fail(ErrorCode::kConfigInvalid, what + " " + std::to_string(requested) + " out of range for size " +
                                        std::to_string(size));
  }
  return idx;
}

std::vector<int> iota_from(int first, int last) {
  std::vector<int> v;
  for (int i = first; i <= last; ++i) v.push_back(i);
  return v;
}

// Rows whose label is set get a permutation of the set labels.
void shuffle_labels(std::vector<int>& labels, uint64_t seed) {
  std::vector<size_t> rows;
  std::vector<int> vals;
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= 0) {
      rows.push_back(i);
      vals.push_back(labels[i]);
    }
  }
  std::mt19937_64 rng(seed);
  std::shuffle(vals.begin(), vals.end(), rng);
  for (size_t k = 0; k < rows.size(); ++k) labels[rows[k]] = vals[k];
}

// Fixed y axis when the centroids leave no spread off x.
Axis2D axis_with_fallback(const Eigen::VectorXd& x, const std::vector<Eigen::VectorXd>& points, bool* degenerate) {
  *degenerate = false;
  try {
    return make_axis2d(x, points);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kDegenerateSpread) throw;
  }
  *degenerate = true;
  Axis2D axis;
  axis.x = x.normalized();
  axis.y = Eigen::VectorXd::Zero(x.size());
  return axis;
}

struct Geometry {
  Axis2D axis;
  bool degenerate_y = false;
  std::map<int, CentroidSet> cents;
  std::map<int, double> tau;
};

std::string probe_file_name(const std::string& ckpt, int prompt, const std::string& suffix = "") {
  return "probe_" + ckpt + "_" + pkey(prompt) + suffix + ".csv";
}

Eigen::MatrixXd gather_rows(const Eigen::MatrixXd& M, const std::vector<int>& rows) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), M.cols());
  for (size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = M.row(rows[i]);
  return out;
}

template <typename T>
std::vector<T> gather(const std::vector<T>& v, const std::vector<int>& rows) {
  std::vector<T> out;
  out.reserve(rows.size());
  for (int r : rows) out.push_back(v[static_cast<size_t>(r)]);
  return out;
}

struct StatBlock {
  std::vector<std::string> names;
  std::vector<int> rows;  // sample rows of the tensor the block covers
  Eigen::MatrixXd values;
};

StatBlock logit_block(const Model& model, const std::vector<QASample>& prompts, const std::vector<int>& rows,
                      int token) {
  StatBlock b{logit_stat_names(), rows, Eigen::MatrixXd(static_cast<Eigen::Index>(rows.size()), kNumLogitStats)};
  for (size_t start = 0; start < rows.size(); start += 64) {
    const size_t end = std::min(rows.size(), start + 64);
    std::vector<std::vector<int>> seqs;
    for (size_t i = start; i < end; ++i) seqs.push_back(prompts[static_cast<size_t>(rows[i])].prompt_tokens);
    const auto logits = model.sequence_logits(seqs);
    for (size_t i = start; i < end; ++i) {
      const auto st = logit_stats(logits[i - start].row(token).transpose());
      for (int k = 0; k < kNumLogitStats; ++k) b.values(static_cast<Eigen::Index>(i), k) = st[static_cast<size_t>(k)];
    }
  }
  return b;
}

StatBlock backward_block(const Model& model, const std::vector<QASample>& prompts, const std::vector<int>& rows,
                         int token) {
  StatBlock b{backward_stat_names(), rows, Eigen::MatrixXd(static_cast<Eigen::Index>(rows.size()), 4)};
  for (size_t i = 0; i < rows.size(); ++i) {
    const auto s = backward_stats(model, prompts[static_cast<size_t>(rows[i])].prompt_tokens, token);
    b.values.row(static_cast<Eigen::Index>(i)) << s.mean_loglik, s.cumulative_entropy, s.min_entropy, s.max_entropy;
  }
  return b;
}

StatBlock forward_block(const Model& model, const std::vector<QASample>& prompts, const std::vector<int>& rows,
                        int token, int end_token, uint64_t seed) {
  ForwardGenOptions opt;
  opt.end_token = end_token;
  StatBlock b;
  b.rows = rows;
  for (size_t i = 0; i < rows.size(); ++i) {
    const auto& s = prompts[static_cast<size_t>(rows[i])];
    opt.seed = derive_seed(seed, static_cast<uint64_t>(s.entity_id));
    const auto st = forward_gen_stats(model, s.prompt_tokens, token, opt);
    const auto vals = st.values();
    if (i == 0) {
      b.names = st.names(opt.horizons);
      b.values.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(vals.size()));
    }
    for (size_t k = 0; k < vals.size(); ++k) b.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = vals[k];
  }
  return b;
}

// Up to `cap` rows per class, drawn without replacement.
std::vector<int> cap_per_class(const std::vector<int>& labels, int cap, uint64_t seed) {
  std::array<std::vector<int>, 2> by_class;
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 0 || labels[i] == 1) by_class[static_cast<size_t>(labels[i])].push_back(static_cast<int>(i));
  }
  std::mt19937_64 rng(seed);
  std::vector<int> out;
  for (auto& rows : by_class) {
    std::shuffle(rows.begin(), rows.end(), rng);
    rows.resize(std::min(rows.size(), static_cast<size_t>(cap)));
    out.insert(out.end(), rows.begin(), rows.end());
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<int> labelled_rows(const std::vector<int>& labels) {
  std::vector<int> out;
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= 0) out.push_back(static_cast<int>(i));
  }
  return out;
}

StatTable to_stat_table(const StatBlock& b, const ActivationTensor& acts, int token) {
  StatTable t;
  t.names = b.names;
  t.values = b.values;
  for (int r : b.rows) {
    t.sample.push_back(acts.index[static_cast<size_t>(r)].entity_id);
    t.position.push_back(token);
  }
  return t;
}

Json compare_entry(const Eigen::MatrixXd& X, const StatBlock& block, const std::vector<int>& labels,
                   const std::vector<int>& groups, int n_bins, BinStrategy strategy, const ProbeOptions& probe,
                   uint64_t seed) {
  CompareOptions opt;
  opt.n_bins = n_bins;
  opt.strategy = strategy;
  opt.n_splits = probe.n_splits;
  opt.split_ratio = probe.split_ratio;
  opt.C = probe.C;
  opt.seed = seed;
  Json entry = {{"n_bins", n_bins}, {"strategy", bin_strategy_name(strategy)}};
  try {
    const auto r = balanced_probe_compare(gather_rows(X, block.rows), block.values, block.names,
                                          gather(labels, block.rows), gather(groups, block.rows), opt);
    entry.update(to_json(r));
    entry["empty"] = false;
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kEmptyResult) throw;
    entry["empty"] = true;
  }
  return entry;
}

using Clock = std::chrono::steady_clock;

class Runner {
 public:
  Runner(const ExperimentConfig& config, const std::filesystem::path& root)
      : cfg_(config), dir_(root), tracer_(dir_) {}

  RunReport run();

 private:
  void phase(const std::string& name, const std::function<void()>& fn);
  int token_for(int prompt) const;
  std::vector<int> prompts() const { return cfg_.data.test_prompts; }

  void save(const Checkpoint& ckpt, const std::string& name);
  void record_stage(const StageResult& r, size_t n_samples);
  Checkpoint train_schedule();
  std::map<int, ActivationTensor> capture(const Model& model, const std::string& ckpt);
  std::map<int, ProbeReport> probe_order(const std::map<int, ActivationTensor>& acts, const std::string& ckpt);
  Geometry geometry(const std::string& tag, const std::map<int, ActivationTensor>& acts,
                    const std::map<int, ProbeReport>* probes);
  void pairwise(const ActivationTensor& acts, const std::string& ckpt);
  void seen_unseen(const std::map<int, ActivationTensor>& acts);
  void balance(const Model& model, const ActivationTensor& acts);
  void stage_report(const Checkpoint& final_ckpt);
  void washout(const Checkpoint& final_ckpt, const Geometry& geo);
  void trajectory(const Geometry& final_geo);
  void reexposure(const Geometry& final_geo);
  void extra_epochs(const Geometry& final_geo);
  void datapoint_level(const Model& model);
  void sanity(const std::map<int, ActivationTensor>& acts);
  std::vector<ProjectionRow> project_rows(const std::string& run, const CentroidSet& cents, const Axis2D& axis,
                                          int token) const;

  const ExperimentConfig& cfg_;
  RunDir dir_;
  Tracer tracer_;
  Corpus corpus_;
  ModelConfig mcfg_;
  int m_ = 0;
  int layer_ = 0;
  Json training_ = Json::array();
  Json timing_ = Json::object();
  std::vector<std::string> stage_labels_;
  std::vector<Checkpoint> stage_ckpts_;
  std::vector<std::vector<QASample>> datapoint_sets_;
  std::array<int, kNumAttributes> kind_stage_{};
};

void Runner::phase(const std::string& name, const std::function<void()>& fn) {
  const auto t0 = Clock::now();
  try {
    fn();
  } catch (const Error& e) {
    const std::string prefix = std::string(e.name()) + ": ";
    std::string msg = e.what();
    if (msg.rfind(prefix, 0) == 0) msg = msg.substr(prefix.size());
    throw Error(e.code(), name + ": " + msg);
  }
  timing_[name] = std::chrono::duration<double>(Clock::now() - t0).count();
}

int Runner::token_for(int prompt) const {
  const auto& samples = corpus_.test_prompts.at(prompt);
  const int len = static_cast<int>(samples.front().prompt_tokens.size());
  return resolve_index(cfg_.analysis.token, len, "analysis.token");
}

void Runner::save(const Checkpoint& ckpt, const std::string& name) { save_checkpoint(ckpt, dir_.checkpoint(name)); }

void Runner::record_stage(const StageResult& r, size_t n_samples) {
  const size_t i = training_.size();
  training_.push_back({{"label", r.label},
                       {"epochs", r.epochs},
                       {"steps", r.steps},
                       {"n_samples", n_samples},
                       {"epoch_mean_loss", r.epoch_mean_loss}});
  if (!r.epoch_mean_loss.empty()) {
    tracer_.json("loss." + r.label + ".final", r.epoch_mean_loss.back(), dir_.report_file("training.json"),
                 "/stages/" + std::to_string(i) + "/epoch_mean_loss/" + std::to_string(r.epoch_mean_loss.size() - 1));
  }
}

Checkpoint Runner::train_schedule() {
  Checkpoint ckpt = init_model(mcfg_, derive_seed(cfg_.seed, "init"));
  const auto& a = cfg_.analysis;
  const auto run_stage = [&](const std::vector<QASample>& data, int epochs, const std::string& label) {
    TrainConfig t = cfg_.train;
    t.epochs = epochs;
    record_stage(train_stage(ckpt, data, t, label), data.size());
    save(ckpt, label);
    stage_labels_.push_back(label);
    stage_ckpts_.push_back(ckpt);
  };
  if (cfg_.variant == ExperimentVariant::kDatapointLevel) {
    std::array<int, kNumAttributes> kinds{};
    std::iota(kinds.begin(), kinds.end(), 0);
    std::mt19937_64 rng(derive_seed(cfg_.seed, "datapoint_kinds"));
    std::shuffle(kinds.begin(), kinds.end(), rng);
    for (int i = 0; i < kNumAttributes; ++i) kind_stage_[static_cast<size_t>(kinds[static_cast<size_t>(i)])] = i < 3 ? 1 : 2;
    datapoint_sets_ = make_datapoint_level_dataset(corpus_, kind_stage_);
    run_stage(datapoint_sets_[0], cfg_.train.epochs, "D1");
    run_stage(datapoint_sets_[1], cfg_.train.epochs, "D2");
  } else if (a.sanity == SanityMode::kUntrained) {
    save(ckpt, "init");
  } else if (a.sanity == SanityMode::kMixedFromStart) {
    std::vector<QASample> all;
    for (const auto& s : corpus_.stages) all.insert(all.end(), s.begin(), s.end());
    run_stage(all, cfg_.train.epochs, "mixed");
  } else {
    for (int i = 1; i <= m_; ++i) {
      const int epochs = i == a.extra_stage ? a.extra_epochs : cfg_.train.epochs;
      run_stage(corpus_.stages[static_cast<size_t>(i - 1)], epochs, "D" + std::to_string(i));
    }
    if (a.reexposure_stage > 0) {
      const int k = a.reexposure_stage;
      run_stage(corpus_.stages[static_cast<size_t>(k - 1)], cfg_.train.epochs, "D" + std::to_string(k) + "_re");
    }
  }
  save(ckpt, "final");
  write_json_file(dir_.report_file("training.json"),
                  {{"model", to_json(mcfg_)}, {"train", to_json(cfg_.train)}, {"stages", training_}});
  return ckpt;
}

std::map<int, ActivationTensor> Runner::capture(const Model& model, const std::string& ckpt) {
  std::map<int, ActivationTensor> out;
  const std::string fp = fingerprint(model);
  for (int p : prompts()) {
    const auto path = dir_.acts(ckpt, p);
    write_activations(capture_activations(model, corpus_.test_prompts.at(p), p), path);
    auto loaded = read_activations(path, fp);
    if (loaded.fingerprint_mismatch) fail(ErrorCode::kCorruptTensorFile, path.string() + ": fingerprint mismatch");
    out.emplace(p, std::move(loaded.tensor));
  }
  return out;
}

std::map<int, ProbeReport> Runner::probe_order(const std::map<int, ActivationTensor>& acts, const std::string& ckpt) {
  std::map<int, ProbeReport> out;
  const std::string def = "D1-vs-D" + std::to_string(m_);
  for (const auto& [p, t] : acts) {
    auto labels = stage_pair_labels(t, 1, m_);
    if (cfg_.analysis.sanity == SanityMode::kShuffledLabels) shuffle_labels(labels, derive_seed(cfg_.seed, "shuffle"));
    const auto report = probe_grid(t, labels, entity_groups(t), cfg_.probe, def);
    const auto file = dir_.report_file(probe_file_name(ckpt, p));
    write_probe_csv(file, report);
    const std::string name = "probe." + ckpt + "." + pkey(p);
    tracer_.csv_max(name + ".max", report.max_accuracy(), file, "acc_mean");
    const int tok = token_for(p);
    tracer_.csv_cell(name + ".cell", report.cell(layer_, tok).acc_mean, file, "acc_mean",
                     {{"layer", std::to_string(layer_)}, {"token", std::to_string(tok)}});
    out.emplace(p, report);
  }
  return out;
}

std::vector<ProjectionRow> Runner::project_rows(const std::string& run, const CentroidSet& cents, const Axis2D& axis,
                                                int token) const {
  std::vector<ProjectionRow> rows;
  const auto xy = project(cents.centroids, axis);
  for (size_t i = 0; i < xy.size(); ++i) {
    rows.push_back({run, cents.groups[i], layer_, token, xy[i].first, xy[i].second});
  }
  return rows;
}

Geometry Runner::geometry(const std::string& tag, const std::map<int, ActivationTensor>& acts,
                          const std::map<int, ProbeReport>* probes) {
  Geometry g;
  std::vector<VectorPair> pairs;
  std::vector<Eigen::VectorXd> points;
  for (const auto& [p, t] : acts) {
    g.cents[p] = stage_centroids(t, layer_, token_for(p), m_);
    pairs.emplace_back(g.cents[p].of(m_), g.cents[p].of(1));
    points.insert(points.end(), g.cents[p].centroids.begin(), g.cents[p].centroids.end());
  }
  g.axis = axis_with_fallback(diffmean_axis(pairs), points, &g.degenerate_y);

  const auto csv = dir_.report_file("projection_" + tag + ".csv");
  std::vector<ProjectionRow> rows;
  Json j = {{"layer", layer_}, {"m", m_}, {"degenerate_y", g.degenerate_y}};
  Json tokens = Json::object(), taus = Json::object(), coll = Json::object();
  for (const auto& [p, c] : g.cents) {
    const std::string run = tag + "/" + pkey(p);
    const auto r = project_rows(run, c, g.axis, token_for(p));
    std::vector<double> px;
    for (const auto& row : r) px.push_back(row.px);
    rows.insert(rows.end(), r.begin(), r.end());
    g.tau[p] = ordering_score(px, iota_from(1, m_));
    tokens[pkey(p)] = token_for(p);
    taus[pkey(p)] = g.tau[p];
    if (m_ >= 3) coll[pkey(p)] = collinearity_residual(c.centroids);
  }
  write_projection_csv(csv, rows);
  for (const auto& [p, tau] : g.tau) tracer_.kendall("geometry." + tag + "." + pkey(p) + ".tau", tau, csv, tag + "/" + pkey(p));
  j["token"] = tokens;
  j["tau"] = taus;
  j["collinearity"] = coll;

  // Spread and clustering of the individual samples for the first prompt.
  const auto& [p0, t0] = *acts.begin();
  const Eigen::MatrixXd cell = t0.slice(layer_, token_for(p0));
  std::vector<Eigen::MatrixXd> groups;
  for (int s = 1; s <= m_; ++s) {
    std::vector<int> rows_s;
    for (int r = 0; r < t0.n_samples; ++r) {
      if (t0.index[static_cast<size_t>(r)].stage == s) rows_s.push_back(r);
    }
    groups.push_back(gather_rows(cell, rows_s));
  }
  const auto pc = pca(cell, std::min<int>(5, static_cast<int>(cell.cols())));
  j["pca_prompt"] = p0;
  j["pca_explained_ratio"] = std::vector<double>(pc.explained_ratio.data(), pc.explained_ratio.data() + pc.explained_ratio.size());
  const auto cs = cosine_stats(groups);
  j["cosine_within"] = std::vector<double>(cs.within.data(), cs.within.data() + cs.within.size());
  Json between = Json::array();
  for (Eigen::Index a = 0; a < cs.between.rows(); ++a) {
    Json row = Json::array();
    for (Eigen::Index b = 0; b < cs.between.cols(); ++b) row.push_back(cs.between(a, b));
    between.push_back(row);
  }
  j["cosine_between"] = between;
  if (probes != nullptr && probes->size() >= 2) {
    std::vector<Eigen::VectorXd> dirs;
    for (const auto& [p, rep] : *probes) dirs.push_back(rep.cell(layer_, token_for(p)).direction);
    const auto M = probe_cosine_matrix(dirs);
    Json mj = Json::array();
    for (Eigen::Index a = 0; a < M.rows(); ++a) {
      Json row = Json::array();
      for (Eigen::Index b = 0; b < M.cols(); ++b) row.push_back(M(a, b));
      mj.push_back(row);
    }
    j["probe_cosine"] = mj;
  }
  const auto file = dir_.report_file("geometry_" + tag + ".json");
  write_json_file(file, j);
  for (const auto& [p, c] : g.cents) {
    if (m_ < 3) break;
    tracer_.json("geometry." + tag + "." + pkey(p) + ".collinearity", coll[pkey(p)].get<double>(), file,
                 "/collinearity/" + pkey(p));
  }
  tracer_.json("geometry." + tag + ".pca_ratio_1", pc.explained_ratio(0), file, "/pca_explained_ratio/0");
  return g;
}

void Runner::pairwise(const ActivationTensor& acts, const std::string& ckpt) {
  const int p = acts.index.front().prompt_id;
  const int tok = token_for(p);
  const auto grid = pairwise_stage_grid(acts, m_, layer_, tok, cfg_.probe);
  Json by_distance = Json::array();
  for (int d = 1; d < m_; ++d) {
    double sum = 0.0;
    for (int i = 0; i + d < m_; ++i) sum += grid(i, i + d);
    by_distance.push_back(sum / (m_ - d));
  }
  const auto file = dir_.report_file("pairwise_" + ckpt + ".json");
  write_json_file(file, {{"prompt", p}, {"layer", layer_}, {"token", tok}, {"matrix", pairwise_to_json(grid)},
                         {"mean_by_distance", by_distance}});
  tracer_.json("pairwise." + ckpt + ".d1_dm", grid(0, m_ - 1), file, "/matrix/0/" + std::to_string(m_ - 1));
  for (int d = 1; d < m_; ++d) {
    tracer_.json("pairwise." + ckpt + ".distance_" + std::to_string(d), by_distance[static_cast<size_t>(d - 1)].get<double>(),
                 file, "/mean_by_distance/" + std::to_string(d - 1));
  }
}

void Runner::seen_unseen(const std::map<int, ActivationTensor>& acts) {
  for (const auto& [p, t] : acts) {
    std::vector<int> fresh, trained;
    for (int r = 0; r < t.n_samples; ++r) (t.index[static_cast<size_t>(r)].stage == 0 ? fresh : trained).push_back(r);
    if (fresh.empty()) return;
    std::mt19937_64 rng(derive_seed(cfg_.seed, "seen_unseen"));
    std::shuffle(trained.begin(), trained.end(), rng);
    trained.resize(std::min(trained.size(), fresh.size()));
    std::vector<int> labels(static_cast<size_t>(t.n_samples), -1);
    for (int r : fresh) labels[static_cast<size_t>(r)] = 1;
    for (int r : trained) labels[static_cast<size_t>(r)] = 0;
    const auto report = probe_grid(t, labels, entity_groups(t), cfg_.probe, "unseen-vs-seen");
    const auto file = dir_.report_file(probe_file_name("seen_unseen", p));
    write_probe_csv(file, report);
    const int tok = token_for(p);
    tracer_.csv_max("seen_unseen." + pkey(p) + ".max", report.max_accuracy(), file, "acc_mean");
    tracer_.csv_cell("seen_unseen." + pkey(p) + ".cell", report.cell(layer_, tok).acc_mean, file, "acc_mean",
                     {{"layer", std::to_string(layer_)}, {"token", std::to_string(tok)}});
  }
}

void Runner::balance(const Model& model, const ActivationTensor& acts) {
  const auto& a = cfg_.analysis;
  const int p = acts.index.front().prompt_id;
  const int tok = token_for(p);
  const auto& samples = corpus_.test_prompts.at(p);
  const auto labels = stage_pair_labels(acts, 1, m_);
  const auto groups = entity_groups(acts);
  const auto rows = labelled_rows(labels);
  const Eigen::MatrixXd X = acts.slice(layer_, tok);
  Json conds = Json::object();
  const auto file = dir_.report_file("balance.json");
  std::vector<std::pair<std::string, std::string>> traced;
  for (const auto& cond : a.balance_conditions) {
    StatBlock block;
    if (cond == "activation") {
      const auto table = activation_stat_table(acts, layer_, tok);
      block = {table.names, rows, gather_rows(table.values, rows)};
    } else if (cond == "logit") {
      block = logit_block(model, samples, rows, tok);
    } else if (cond == "backward") {
      block = backward_block(model, samples, rows, tok);
    } else {
      const auto sub = cap_per_class(labels, a.forward_max_per_class, derive_seed(cfg_.seed, "forward_rows"));
      block = forward_block(model, samples, sub, tok, corpus_.vocab.eos(), derive_seed(cfg_.seed, "forward_gen"));
    }
    write_stats_csv(dir_.report_file("stats_" + cond + ".csv"), to_stat_table(block, acts, tok));
    Json results = Json::array();
    for (int n : a.balance_bins) {
      results.push_back(compare_entry(X, block, labels, groups, n, a.balance_strategy, cfg_.probe,
                                      derive_seed(cfg_.seed, "balance_" + cond + "_" + std::to_string(n))));
    }
    conds[cond] = {{"statistics", block.names}, {"n_rows", block.rows.size()}, {"results", results}};
  }
  const Json j = {{"prompt", p}, {"layer", layer_}, {"token", tok}, {"label_def", "D1-vs-D" + std::to_string(m_)},
                  {"conditions", conds}};
  write_json_file(file, j);
  for (const auto& [cond, c] : conds.items()) {
    const auto& results = c.at("results");
    for (size_t i = 0; i < results.size(); ++i) {
      if (results[i].at("empty").get<bool>()) continue;
      const std::string base = "balance." + cond + ".n" + std::to_string(results[i].at("n_bins").get<int>());
      const std::string ptr = "/conditions/" + cond + "/results/" + std::to_string(i);
      for (const char* k : {"balanced", "random", "full"}) {
        tracer_.json(base + "." + k, results[i].at(k).get<double>(), file, ptr + "/" + k);
      }
    }
  }
}

void Runner::stage_report(const Checkpoint& final_ckpt) {
  const auto letters = default_letter_map(m_);
  const auto data = make_stage_report_dataset(corpus_, letters);
  Checkpoint ckpt = final_ckpt;
  TrainConfig t = cfg_.train;
  t.epochs = cfg_.analysis.stage_report_epochs;
  const auto r = train_stage(ckpt, data.train, t, "stage_report");
  save(ckpt, "stage_report");
  Json per_stage = Json::object();
  for (int s = 1; s <= m_; ++s) {
    std::vector<QASample> sub;
    for (const auto& q : data.eval) {
      if (q.stage == s) sub.push_back(q);
    }
    if (!sub.empty()) per_stage["D" + std::to_string(s)] = answer_accuracy(ckpt.model, sub);
  }
  const double acc = answer_accuracy(ckpt.model, data.eval);
  Json letter_json = Json::object();
  for (const auto& [s, l] : letters) letter_json["D" + std::to_string(s)] = l;
  const auto file = dir_.report_file("stage_report.json");
  write_json_file(file, {{"epochs", t.epochs},
                         {"train", to_json(t)},
                         {"letters", letter_json},
                         {"n_train", data.train.size()},
                         {"n_eval", data.eval.size()},
                         {"epoch_mean_loss", r.epoch_mean_loss},
                         {"accuracy", acc},
                         {"per_stage", per_stage},
                         {"chance", 1.0 / m_},
                         {"reference_accuracy_1b", 0.798}});
  tracer_.json("stage_report.accuracy", acc, file, "/accuracy");
}

void Runner::washout(const Checkpoint& final_ckpt, const Geometry& geo) {
  const int W = cfg_.analysis.washout_epochs;
  const int p0 = prompts().front();
  const int tok = token_for(p0);
  const auto& samples = corpus_.test_prompts.at(p0);
  std::vector<QASample> mixed;
  for (const auto& s : corpus_.stages) mixed.insert(mixed.end(), s.begin(), s.end());
  std::filesystem::create_directories(dir_.report_file("washout"));

  std::vector<ProjectionRow> proj;
  std::ostringstream curve;
  curve << "epoch,cell_acc,max_acc,tau\n";
  int events = 0;
  const auto score = [&](int epoch, const ActivationTensor& acts, bool retrain) {
    const auto cents = stage_centroids(acts, layer_, tok, m_);
    const std::string run = "washout/e" + std::to_string(epoch);
    const auto rows = project_rows(run, cents, geo.axis, tok);
    proj.insert(proj.end(), rows.begin(), rows.end());
    std::vector<double> px;
    for (const auto& r : rows) px.push_back(r.px);
    ProbeReport report;
    const auto file = dir_.report_file("washout/" + std::string(epoch < 10 ? "epoch_0" : "epoch_") + std::to_string(epoch) + ".csv");
    if (retrain) {
      report = probe_grid(acts, stage_pair_labels(acts, 1, m_), entity_groups(acts), cfg_.probe,
                          "D1-vs-D" + std::to_string(m_));
      write_probe_csv(file, report);
      ++events;
    } else {
      report = read_probe_csv(dir_.report_file(probe_file_name("final", p0)));
    }
    curve << epoch << ',' << format_double(report.cell(layer_, tok).acc_mean) << ','
          << format_double(report.max_accuracy()) << ',' << format_double(ordering_score(px, iota_from(1, m_)))
          << '\n';
  };
  {
    const auto acts = read_activations(dir_.acts("final", p0)).tensor;
    score(0, acts, false);
  }
  Checkpoint ckpt = final_ckpt;
  TrainConfig t = cfg_.train;
  t.epochs = W;
  const auto r = train_stage(ckpt, mixed, t, "washout", [&](int epoch, const Model& model) {
    score(epoch, capture_activations(model, samples, p0), true);
  });
  record_stage(r, mixed.size());
  save(ckpt, "washout");
  const auto curve_file = dir_.report_file("washout_curve.csv");
  write_text_file(curve_file, curve.str());
  const auto proj_file = dir_.report_file("washout_projection.csv");
  write_projection_csv(proj_file, proj);
  const auto info = dir_.report_file("washout.json");
  write_json_file(info, {{"epochs", W}, {"probe_retraining_events", events}, {"mixed_samples", mixed.size()},
                         {"prompt", p0}, {"layer", layer_}, {"token", tok}, {"axis", "final"},
                         {"epoch_mean_loss", r.epoch_mean_loss}});
  tracer_.json("washout.events", events, info, "/probe_retraining_events");
  if (W > 0) {
    const auto last = read_probe_csv(dir_.report_file("washout/" + std::string(W < 10 ? "epoch_0" : "epoch_") +
                                                      std::to_string(W) + ".csv"));
    tracer_.csv_cell("washout.final.cell_acc", last.cell(layer_, tok).acc_mean, curve_file, "cell_acc",
                     {{"epoch", std::to_string(W)}});
    tracer_.csv_cell("washout.final.max_acc", last.max_accuracy(), curve_file, "max_acc", {{"epoch", std::to_string(W)}});
    std::vector<double> px;
    std::vector<double> st;
    for (const auto& row : proj) {
      if (row.run != "washout/e" + std::to_string(W)) continue;
      px.push_back(row.px);
      st.push_back(row.stage);
    }
    tracer_.kendall("washout.final.tau", kendall_tau(px, st), proj_file, "washout/e" + std::to_string(W));
  }
  tracer_.csv_cell("washout.start.cell_acc",
                   read_probe_csv(dir_.report_file(probe_file_name("final", p0))).cell(layer_, tok).acc_mean,
                   curve_file, "cell_acc", {{"epoch", "0"}});
}

void Runner::trajectory(const Geometry& final_geo) {
  std::vector<ProjectionRow> rows;
  std::map<int, std::vector<VectorPair>> pairs;  // per prompt: (unseen, seen) at intermediate checkpoints
  for (size_t k = 0; k < stage_ckpts_.size(); ++k) {
    const std::string& label = stage_labels_[k];
    const auto acts = capture(stage_ckpts_[k].model, label);
    for (const auto& [p, t] : acts) {
      const auto cents = stage_centroids(t, layer_, token_for(p), m_);
      const auto r = project_rows(label + "/" + pkey(p), cents, final_geo.axis, token_for(p));
      rows.insert(rows.end(), r.begin(), r.end());
      if (static_cast<int>(k) + 1 < m_) pairs[p].emplace_back(cents.of(m_), cents.of(1));
    }
  }
  const auto traj_file = dir_.report_file("projection_trajectory.csv");
  write_projection_csv(traj_file, rows);

  std::vector<VectorPair> all;
  for (const auto& [p, v] : pairs) all.insert(all.end(), v.begin(), v.end());
  Json j = {{"checkpoints", stage_labels_}, {"layer", layer_}};
  if (all.empty()) {
    write_json_file(dir_.report_file("trajectory.json"), j);
    return;
  }
  const Eigen::VectorXd su = seen_unseen_axis(all);
  Axis2D axis{su, final_geo.axis.y - final_geo.axis.y.dot(su) * su};
  if (axis.y.norm() > 0) axis.y.normalize();
  std::vector<ProjectionRow> su_rows;
  Json taus = Json::object();
  const auto su_file = dir_.report_file("projection_seen_unseen.csv");
  for (const auto& [p, c] : final_geo.cents) {
    const std::string run = "final/" + pkey(p);
    const auto r = project_rows(run, c, axis, token_for(p));
    su_rows.insert(su_rows.end(), r.begin(), r.end());
    std::vector<double> px;
    for (const auto& row : r) px.push_back(row.px);
    taus[pkey(p)] = ordering_score(px, iota_from(1, m_));
  }
  write_projection_csv(su_file, su_rows);
  j["seen_unseen_tau"] = taus;
  j["cosine_with_final_axis"] = su.dot(final_geo.axis.x);
  const auto file = dir_.report_file("trajectory.json");
  write_json_file(file, j);
  for (const auto& [p, tau] : taus.items()) {
    tracer_.kendall("trajectory.seen_unseen." + p + ".tau", tau.get<double>(), su_file, "final/" + p);
  }
  tracer_.json("trajectory.cosine_with_final_axis", j["cosine_with_final_axis"].get<double>(), file,
               "/cosine_with_final_axis");
}

// Rank of `stage` by px, 1 = rightmost.
int rank_of(const std::vector<ProjectionRow>& rows, int stage) {
  double target = 0.0;
  for (const auto& r : rows) {
    if (r.stage == stage) target = r.px;
  }
  int rank = 1;
  for (const auto& r : rows) {
    if (r.stage != stage && r.px > target) ++rank;
  }
  return rank;
}

void Runner::reexposure(const Geometry& final_geo) {
  const int k = cfg_.analysis.reexposure_stage;
  const std::string before = "D" + std::to_string(m_);
  const auto it = std::find(stage_labels_.begin(), stage_labels_.end(), before);
  const auto& ckpt = stage_ckpts_[static_cast<size_t>(it - stage_labels_.begin())];
  const auto acts = capture(ckpt.model, before);
  const auto geo = geometry(before, acts, nullptr);
  std::vector<ProjectionRow> rows;
  Json ranks = Json::object();
  for (const auto& [p, c] : geo.cents) {
    const auto r0 = project_rows(before + "/" + pkey(p), c, geo.axis, token_for(p));
    const auto r1 = project_rows("final/" + pkey(p), final_geo.cents.at(p), geo.axis, token_for(p));
    rows.insert(rows.end(), r0.begin(), r0.end());
    rows.insert(rows.end(), r1.begin(), r1.end());
    ranks[pkey(p)] = {{"before", rank_of(r0, k)}, {"after", rank_of(r1, k)}};
  }
  write_projection_csv(dir_.report_file("projection_reexposure.csv"), rows);
  const auto file = dir_.report_file("reexposure.json");
  write_json_file(file, {{"stage", k}, {"axis", before}, {"rank_rightmost_is_1", ranks}});
  for (const auto& [p, r] : ranks.items()) {
    tracer_.json("reexposure." + p + ".rank_after", r.at("after").get<double>(), file,
                 "/rank_rightmost_is_1/" + p + "/after");
  }
}

void Runner::extra_epochs(const Geometry& final_geo) {
  const int k = cfg_.analysis.extra_stage;
  Json ranks = Json::object();
  for (const auto& [p, c] : final_geo.cents) {
    ranks[pkey(p)] = rank_of(project_rows("final", c, final_geo.axis, token_for(p)), k);
  }
  const auto file = dir_.report_file("extra_epochs.json");
  write_json_file(file, {{"stage", k}, {"epochs", cfg_.analysis.extra_epochs}, {"rank_rightmost_is_1", ranks}});
  for (const auto& [p, r] : ranks.items()) {
    tracer_.json("extra_epochs." + p + ".rank", r.get<double>(), file, "/rank_rightmost_is_1/" + p);
  }
}

// Probes the training questions themselves, aligned on their last tokens. Each
// question kind is one group so held-out kinds are never seen by the probe.
void Runner::datapoint_level(const Model& model) {
  std::vector<int> entities(static_cast<size_t>(corpus_.n_trained()));
  std::iota(entities.begin(), entities.end(), 0);
  std::mt19937_64 rng(derive_seed(cfg_.seed, "datapoint_entities"));
  std::shuffle(entities.begin(), entities.end(), rng);
  entities.resize(std::min(entities.size(), static_cast<size_t>(cfg_.analysis.datapoint_entities)));
  const std::set<int> chosen(entities.begin(), entities.end());
  std::vector<const QASample*> picked;
  for (const auto& set : datapoint_sets_) {
    for (const auto& s : set) {
      if (chosen.count(s.entity_id)) picked.push_back(&s);
    }
  }
  size_t K = picked.front()->prompt_tokens.size();
  for (const auto* s : picked) K = std::min(K, s->prompt_tokens.size());

  ActivationTensor acts;
  acts.n_samples = static_cast<int>(picked.size());
  acts.n_layers = mcfg_.n_layers;
  acts.n_tokens = static_cast<int>(K);
  acts.d_model = mcfg_.d_model;
  acts.fingerprint = fingerprint(model);
  acts.data.resize(static_cast<size_t>(acts.n_samples) * acts.n_layers * acts.n_tokens * acts.d_model);
  for (size_t start = 0; start < picked.size(); start += 64) {
    const size_t end = std::min(picked.size(), start + 64);
    std::vector<std::vector<int>> seqs;
    for (size_t i = start; i < end; ++i) seqs.push_back(picked[i]->prompt_tokens);
    const auto batch = make_batch(seqs, corpus_.vocab.pad());
    const auto out = model.forward(batch, false, true);
    for (size_t i = start; i < end; ++i) {
      const size_t b = i - start;
      const int len = batch.lengths[b];
      for (int l = 0; l < acts.n_layers; ++l) {
        for (int t = 0; t < acts.n_tokens; ++t) {
          const auto src = static_cast<Eigen::Index>(b * static_cast<size_t>(batch.length)) + len - acts.n_tokens + t;
          float* dst = acts.data.data() + acts.offset(static_cast<int>(i), l, t);
          for (int d = 0; d < acts.d_model; ++d) dst[d] = out.activations[static_cast<size_t>(l)](src, d);
        }
      }
    }
  }
  std::vector<int> labels, groups;
  for (const auto* s : picked) {
    acts.index.push_back({s->entity_id, s->stage, s->probe_split, kind_of_template(s->template_id)});
    labels.push_back(s->stage - 1);
    groups.push_back(kind_of_template(s->template_id));
  }
  const auto path = dir_.root() / "acts" / "final" / "datapoint.actv";
  write_activations(acts, path);
  acts = read_activations(path).tensor;
  const auto report = probe_grid(acts, labels, groups, cfg_.probe, "kind-in-D1-vs-kind-in-D2");
  const auto file = dir_.report_file("probe_datapoint.csv");
  write_probe_csv(file, report);
  tracer_.csv_max("datapoint.max", report.max_accuracy(), file, "acc_mean");
  const int tok = resolve_index(cfg_.analysis.token, acts.n_tokens, "analysis.token");
  tracer_.csv_cell("datapoint.cell", report.cell(layer_, tok).acc_mean, file, "acc_mean",
                   {{"layer", std::to_string(layer_)}, {"token", std::to_string(tok)}});
  write_json_file(dir_.report_file("datapoint.json"),
                  {{"kind_stage", kind_stage_}, {"aligned_tokens", K}, {"n_entities", entities.size()},
                   {"n_samples", picked.size()}, {"reference_accuracy_1b", 0.6}});
}

void Runner::sanity(const std::map<int, ActivationTensor>& acts) {
  const auto file = dir_.report_file("sanity.json");
  Json maxes = Json::object();
  for (const auto& [p, t] : acts) {
    (void)t;
    maxes[pkey(p)] = read_probe_csv(dir_.report_file(probe_file_name("final", p))).max_accuracy();
  }
  write_json_file(file, {{"mode", sanity_mode_name(cfg_.analysis.sanity)}, {"grid_max", maxes},
                         {"reference_accuracy", 0.5}});
}

RunReport Runner::run() {
  const auto t0 = Clock::now();
  const auto& a = cfg_.analysis;
  std::filesystem::create_directories(dir_.reports());
  write_json_file(dir_.config(), to_json(cfg_));
  phase("data", [&] {
    corpus_ = build_corpus(cfg_.data);
    write_corpus(corpus_, dir_.corpus());
  });
  m_ = corpus_.plan.m;
  mcfg_ = parse_model_config(StrictObject(cfg_.model, "model"), corpus_.vocab.size());
  size_t longest = 0;
  for (const auto& st : corpus_.stages) {
    for (const auto& s : st) longest = std::max(longest, s.prompt_tokens.size() + s.answer_tokens.size());
  }
  for (const auto& [p, st] : corpus_.test_prompts) {
    for (const auto& s : st) longest = std::max(longest, s.prompt_tokens.size() + 2);
  }
  if (longest > static_cast<size_t>(mcfg_.max_context)) {
    fail(ErrorCode::kConfigInvalid, "model.max_context " + std::to_string(mcfg_.max_context) +
                                        " shorter than the longest sequence (" + std::to_string(longest) + ")");
  }
  layer_ = resolve_index(a.layer, mcfg_.n_layers, "analysis.layer");

  Checkpoint final_ckpt;
  phase("train", [&] { final_ckpt = train_schedule(); });

  if (cfg_.variant == ExperimentVariant::kDatapointLevel) {
    phase("datapoint_level", [&] { datapoint_level(final_ckpt.model); });
  } else {
    std::map<int, ActivationTensor> acts;
    std::map<int, ProbeReport> probes;
    Geometry geo;
    phase("capture", [&] { acts = capture(final_ckpt.model, "final"); });
    phase("probe", [&] { probes = probe_order(acts, "final"); });
    if (a.sanity != SanityMode::kNone) {
      phase("sanity", [&] { sanity(acts); });
    } else {
      phase("geometry", [&] { geo = geometry("final", acts, &probes); });
      if (a.pairwise) phase("pairwise", [&] { pairwise(acts.begin()->second, "final"); });
      if (a.seen_unseen) phase("seen_unseen", [&] { seen_unseen(acts); });
      if (a.balance) phase("balance", [&] { balance(final_ckpt.model, acts.begin()->second); });
      acts.clear();
      if (a.trajectory) phase("trajectory", [&] { trajectory(geo); });
      if (a.reexposure_stage > 0) phase("reexposure", [&] { reexposure(geo); });
      if (a.extra_stage > 0) phase("extra_epochs", [&] { extra_epochs(geo); });
      if (a.stage_report) phase("stage_report", [&] { stage_report(final_ckpt); });
      if (a.washout_epochs > 0) phase("washout", [&] { washout(final_ckpt, geo); });
      if (a.washout_epochs > 0) {
        write_json_file(dir_.report_file("training.json"),
                        {{"model", to_json(mcfg_)}, {"train", to_json(cfg_.train)}, {"stages", training_}});
      }
    }
  }

  RunReport out;
  out.wall_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  write_json_file(dir_.report_file("timing.json"), {{"phases", timing_}, {"total_seconds", out.wall_seconds}});

  std::vector<std::string> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir_.root())) {
    if (e.is_regular_file() && e.path() != dir_.run_report()) files.push_back(dir_.relative(e.path()));
  }
  std::sort(files.begin(), files.end());
  out.report = {{"variant", experiment_variant_name(cfg_.variant)},
                {"config", to_json(cfg_)},
                {"model", to_json(mcfg_)},
                {"training", training_},
                {"scalars", tracer_.scalars()},
                {"timing_file", "reports/timing.json"},
                {"artifacts", files}};
  write_json_file(dir_.run_report(), out.report);
  return out;
}

}  // namespace

std::string_view experiment_variant_name(ExperimentVariant v) {
  for (const auto& [e, name] : kVariantNames) {
    if (e == v) return name;
  }
  return "unknown";
}

ExperimentVariant parse_experiment_variant(std::string_view s) {
  for (const auto& [e, name] : kVariantNames) {
    if (name == s) return e;
  }
  fail(ErrorCode::kConfigInvalid, "unknown experiment variant '" + std::string(s) + "'");
}

std::string_view sanity_mode_name(SanityMode m) {
  for (const auto& [e, name] : kSanityNames) {
    if (e == m) return name;
  }
  return "unknown";
}

ExperimentConfig parse_experiment_config(const Json& j) {
  if (!j.is_object()) fail(ErrorCode::kConfigInvalid, "experiment config must be a JSON object");
  ExperimentConfig c;
  const auto vit = j.find("variant");
  if (vit != j.end()) {
    if (!vit->is_string()) fail(ErrorCode::kConfigInvalid, "variant must be a string");
    c.variant = parse_experiment_variant(vit->get<std::string>());
  }
  Json merged = variant_defaults(c.variant);
  merged.merge_patch(j);
  StrictObject root(merged, "");
  root.get<std::string>("variant", "");
  c.seed = root.get<uint64_t>("seed", c.seed);
  c.run_label = root.get<std::string>("run_label", c.run_label);

  // One top-level seed feeds every component unless a section sets its own.
  const auto section = [&](const std::string& key) {
    Json s = merged.contains(key) && merged[key].is_object() ? merged[key] : Json::object();
    if (merged.contains(key) && !merged[key].is_object() && !merged[key].is_null()) {
      fail(ErrorCode::kConfigInvalid, "'" + key + "' must be an object");
    }
    root.child(key);
    return s;
  };
  Json data = section("data");
  if (!data.contains("seed")) data["seed"] = c.seed;
  c.data = parse_data_config(StrictObject(data, "data"));
  c.model = section("model");
  parse_model_config(StrictObject(c.model, "model"), 2);
  Json train = section("train");
  if (!train.contains("seed")) train["seed"] = c.seed;
  c.train = parse_train_config(StrictObject(train, "train"));
  Json probe = section("probe");
  if (!probe.contains("seed")) probe["seed"] = c.seed;
  c.probe = parse_probe_options(StrictObject(probe, "probe"));
  c.analysis = parse_analysis(StrictObject(section("analysis"), "analysis"));
  root.finish();

  const auto& a = c.analysis;
  const int m = c.data.n_stages;
  if (a.reexposure_stage < 0 || a.reexposure_stage > m) fail(ErrorCode::kConfigInvalid, "analysis.reexposure_stage out of range");
  if (a.extra_stage < 0 || a.extra_stage > m) fail(ErrorCode::kConfigInvalid, "analysis.extra_stage out of range");
  if (c.variant == ExperimentVariant::kReexposure && a.reexposure_stage == 0) {
    fail(ErrorCode::kConfigInvalid, "reexposure needs analysis.reexposure_stage >= 1");
  }
  if (c.variant == ExperimentVariant::kExtraEpochs && a.extra_stage == 0) {
    fail(ErrorCode::kConfigInvalid, "extra_epochs needs analysis.extra_stage >= 1");
  }
  if (c.variant == ExperimentVariant::kWashout && a.washout_epochs == 0) {
    fail(ErrorCode::kConfigInvalid, "washout needs analysis.washout_epochs >= 1");
  }
  if (c.variant == ExperimentVariant::kSanity && a.sanity == SanityMode::kNone) {
    fail(ErrorCode::kConfigInvalid, "sanity needs analysis.sanity to name a mode");
  }
  if (c.variant != ExperimentVariant::kSanity && a.sanity != SanityMode::kNone) {
    fail(ErrorCode::kConfigInvalid, "analysis.sanity is only valid for the sanity variant");
  }
  if (c.variant == ExperimentVariant::kDatapointLevel && m != 2) {
    fail(ErrorCode::kConfigInvalid, "datapoint_level needs exactly two stages");
  }
  if (a.stage_report && m > 26) fail(ErrorCode::kConfigInvalid, "stage report supports at most 26 stages");
  return c;
}

Json to_json(const ExperimentConfig& c) {
  return Json{{"variant", experiment_variant_name(c.variant)},
              {"seed", c.seed},
              {"run_label", c.run_label},
              {"data", to_json(c.data)},
              {"model", c.model},
              {"train", to_json(c.train)},
              {"probe", to_json(c.probe)},
              {"analysis", to_json(c.analysis)}};
}

std::map<int, std::string> default_letter_map(int m) {
  std::map<int, std::string> out;
  for (int s = 1; s <= m; ++s) out[s] = std::string(1, static_cast<char>('A' + s - 1));
  return out;
}

StageReportData make_stage_report_dataset(const Corpus& corpus, const std::map<int, std::string>& letter_map) {
  StageReportData out;
  const int n = static_cast<int>(corpus.entities.size());
  for (int e = 0; e < n; ++e) {
    const int stage = corpus.plan.stage_of[static_cast<size_t>(e)];
    if (stage == 0) continue;
    const auto it = letter_map.find(stage);
    if (it == letter_map.end()) {
      fail(ErrorCode::kInvalidArgument, "letter map has no entry for stage " + std::to_string(stage));
    }
    QASample s = render_sample(corpus.entities[static_cast<size_t>(e)], corpus.aliases[static_cast<size_t>(e)],
                               corpus.plan, corpus.vocab, stage_report_template(), kStageReportTemplate, -1,
                               corpus.config.variant);
    s.answer_tokens = {corpus.vocab.id(it->second), corpus.vocab.eos()};
    (s.probe_split == ProbeSplit::kTrain ? out.train : out.eval).push_back(std::move(s));
  }
  return out;
}

std::vector<std::vector<QASample>> make_datapoint_level_dataset(const Corpus& corpus,
                                                                const std::array<int, kNumAttributes>& kind_stage) {
  for (int s : kind_stage) {
    if (s != 1 && s != 2) fail(ErrorCode::kInvalidArgument, "kind_stage entries must be 1 or 2");
  }
  std::vector<std::vector<QASample>> out(2);
  const auto& templates = synthetic_templates();
  for (int e = 0; e < corpus.n_trained(); ++e) {
    for (int k = 0; k < kNumAttributes; ++k) {
      QASample s = render_sample(corpus.entities[static_cast<size_t>(e)], corpus.aliases[static_cast<size_t>(e)],
                                 corpus.plan, corpus.vocab, templates[static_cast<size_t>(k)], k, k, Variant::kSynthetic);
      s.stage = kind_stage[static_cast<size_t>(k)];
      out[static_cast<size_t>(s.stage - 1)].push_back(std::move(s));
    }
  }
  return out;
}

double answer_accuracy(const Model& model, const std::vector<QASample>& samples) {
  if (samples.empty()) fail(ErrorCode::kEmptyEval, "no samples to score");
  std::map<size_t, std::vector<const QASample*>> by_length;
  for (const auto& s : samples) by_length[s.prompt_tokens.size()].push_back(&s);
  long correct = 0;
  for (const auto& [len, group] : by_length) {
    for (size_t start = 0; start < group.size(); start += 64) {
      const size_t end = std::min(group.size(), start + 64);
      std::vector<std::vector<int>> seqs;
      for (size_t i = start; i < end; ++i) seqs.push_back(group[i]->prompt_tokens);
      const auto logits = model.sequence_logits(seqs);
      for (size_t i = start; i < end; ++i) {
        const auto& L = logits[i - start];
        Eigen::Index arg = 0;
        L.row(L.rows() - 1).maxCoeff(&arg);
        if (static_cast<int>(arg) == group[i]->answer_tokens.front()) ++correct;
      }
    }
  }
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

RunReport run_experiment(const ExperimentConfig& config, const std::filesystem::path& run_dir) {
  Runner runner(config, run_dir);
  return runner.run();
}

// ------------------------------------------------------------------ steps

namespace {

void archive_config(const RunDir& dir, const std::string& step, const Json& config) {
  write_json_file(dir.root() / "configs" / (step + ".json"), config);
}

Json probe_summary(const ProbeReport& r, const std::string& file) {
  const auto& b = r.best();
  return {{"file", file}, {"max_accuracy", b.acc_mean}, {"best_layer", b.layer}, {"best_token", b.token}};
}

}  // namespace

Json step_gen_data(const Json& config, const RunDir& dir) {
  StrictObject root(config, "");
  const auto data = parse_data_config(root.child("data"));
  root.finish();
  archive_config(dir, "gen-data", config);
  const auto corpus = build_corpus(data);
  write_corpus(corpus, dir.corpus());
  return {{"corpus", dir.relative(dir.corpus())},
          {"vocab_size", corpus.vocab.size()},
          {"stage_sizes", corpus.plan.stage_sizes()},
          {"n_entities", corpus.entities.size()}};
}

Json step_train(const Json& config, const RunDir& dir) {
  StrictObject root(config, "");
  const uint64_t seed = root.get<uint64_t>("seed", 1);
  const Json model_json = root.has("model") ? root.raw("model") : Json::object();
  Json train_json = root.has("train") ? root.raw("train") : Json::object();
  if (!train_json.contains("seed")) train_json["seed"] = seed;
  root.finish();
  const auto train = parse_train_config(StrictObject(train_json, "train"));
  archive_config(dir, "train", config);
  const Corpus corpus = read_corpus(dir.corpus());
  const auto mcfg = parse_model_config(StrictObject(model_json, "model"), corpus.vocab.size());
  std::vector<int> epochs(corpus.stages.size(), train.epochs);
  const auto result = sequential_finetune(init_model(mcfg, derive_seed(seed, "init")), corpus.stages, epochs, train);
  Json stages = Json::array();
  for (size_t i = 0; i < result.stages.size(); ++i) {
    const auto& r = result.stages[i];
    save_checkpoint(result.checkpoints[i], dir.checkpoint(r.label));
    stages.push_back({{"label", r.label},
                      {"epochs", r.epochs},
                      {"steps", r.steps},
                      {"n_samples", corpus.stages[i].size()},
                      {"epoch_mean_loss", r.epoch_mean_loss}});
  }
  save_checkpoint(result.final_model, dir.checkpoint("final"));
  const Json report = {{"model", to_json(mcfg)}, {"train", to_json(train)}, {"stages", stages}};
  write_json_file(dir.report_file("training.json"), report);
  return report;
}

Json step_capture(const Json& config, const RunDir& dir) {
  StrictObject root(config, "");
  const auto name = root.get<std::string>("checkpoint", "final");
  auto prompts = root.get<std::vector<int>>("prompts", {});
  const int batch = root.get<int>("batch_size", 64);
  root.finish();
  archive_config(dir, "capture", config);
  const Corpus corpus = read_corpus(dir.corpus());
  if (prompts.empty()) prompts = corpus.config.test_prompts;
  const auto ckpt = load_checkpoint(dir.checkpoint(name));
  Json files = Json::array();
  for (int p : prompts) {
    const auto it = corpus.test_prompts.find(p);
    if (it == corpus.test_prompts.end()) fail(ErrorCode::kMissingArtifact, "corpus has no test prompt " + std::to_string(p));
    const auto path = dir.acts(name, p);
    write_activations(capture_activations(ckpt.model, it->second, p, batch), path);
    files.push_back(dir.relative(path));
  }
  return {{"checkpoint", name}, {"files", files}, {"fingerprint", fingerprint(ckpt.model)}};
}

Json step_probe(const Json& config, const RunDir& dir) {
  StrictObject root(config, "");
  const auto name = root.get<std::string>("checkpoint", "final");
  const int prompt = root.get<int>("prompt", 1);
  const int a = root.get<int>("stage_a", 1);
  int b = root.get<int>("stage_b", 0);
  const bool shuffle = root.get<bool>("shuffle_labels", false);
  const auto opts = parse_probe_options(root.child("probe"));
  root.finish();
  archive_config(dir, "probe", config);
  const auto acts = read_activations(dir.acts(name, prompt)).tensor;
  if (b == 0) {
    for (const auto& s : acts.index) b = std::max(b, s.stage);
  }
  auto labels = stage_pair_labels(acts, a, b);
  if (shuffle) shuffle_labels(labels, derive_seed(opts.seed, "shuffle"));
  const std::string def = "D" + std::to_string(a) + "-vs-D" + std::to_string(b);
  const auto report = probe_grid(acts, labels, entity_groups(acts), opts, def);
  const auto file = dir.report_file(probe_file_name(name, prompt, "_" + def));
  write_probe_csv(file, report);
  return probe_summary(report, dir.relative(file));
}

Json step_geometry(const Json& config, const RunDir& dir) {
  StrictObject root(config, "");
  const auto name = root.get<std::string>("checkpoint", "final");
  const auto prompts = root.get<std::vector<int>>("prompts", {1});
  const int layer_req = root.get<int>("layer", -1);
  const int token_req = root.get<int>("token", -1);
  root.finish();
  archive_config(dir, "geometry", config);
  std::vector<VectorPair> pairs;
  std::vector<Eigen::VectorXd> points;
  std::map<int, CentroidSet> cents;
  std::map<int, std::pair<int, int>> cell;
  for (int p : prompts) {
    const auto acts = read_activations(dir.acts(name, p)).tensor;
    int m = 0;
    for (const auto& s : acts.index) m = std::max(m, s.stage);
    const int layer = resolve_index(layer_req, acts.n_layers, "layer");
    const int token = resolve_index(token_req, acts.n_tokens, "token");
    cell[p] = {layer, token};
    cents[p] = stage_centroids(acts, layer, token, m);
    pairs.emplace_back(cents[p].of(m), cents[p].of(1));
    points.insert(points.end(), cents[p].centroids.begin(), cents[p].centroids.end());
  }
  bool degenerate = false;
  const auto axis = axis_with_fallback(diffmean_axis(pairs), points, &degenerate);
  std::vector<ProjectionRow> rows;
  Json taus = Json::object();
  for (const auto& [p, c] : cents) {
    const auto xy = project(c.centroids, axis);
    std::vector<double> px;
    for (size_t i = 0; i < xy.size(); ++i) {
      rows.push_back({name + "/" + pkey(p), c.groups[i], cell[p].first, cell[p].second, xy[i].first, xy[i].second});
      px.push_back(xy[i].first);
    }
    taus[pkey(p)] = ordering_score(px, c.groups);
  }
  const auto file = dir.report_file("projection_" + name + ".csv");
  write_projection_csv(file, rows);
  return {{"file", dir.relative(file)}, {"tau", taus}, {"degenerate_y", degenerate}};
}

Json step_balance(const Json& config, const RunDir& dir) {
  StrictObject root(config, "");
  const auto name = root.get<std::string>("checkpoint", "final");
  const int prompt = root.get<int>("prompt", 1);
  const int layer_req = root.get<int>("layer", -1);
  const int token_req = root.get<int>("token", -1);
  const int a = root.get<int>("stage_a", 1);
  int b = root.get<int>("stage_b", 0);
  const int n_bins = root.get<int>("n_bins", 15);
  const auto strategy = parse_bin_strategy(root.get<std::string>("strategy", "uniform"));
  const auto statistics = root.get<std::string>("statistics", "activation");
  const auto probe = parse_probe_options(root.child("probe"));
  root.finish();
  if (statistics != "activation" && statistics != "logit" && statistics != "backward") {
    fail(ErrorCode::kConfigInvalid, "statistics must be activation, logit or backward");
  }
  archive_config(dir, "balance", config);
  const auto acts = read_activations(dir.acts(name, prompt)).tensor;
  if (b == 0) {
    for (const auto& s : acts.index) b = std::max(b, s.stage);
  }
  const int layer = resolve_index(layer_req, acts.n_layers, "layer");
  const int token = resolve_index(token_req, acts.n_tokens, "token");
  const auto labels = stage_pair_labels(acts, a, b);
  const auto rows = labelled_rows(labels);
  StatBlock block;
  if (statistics == "activation") {
    const auto table = activation_stat_table(acts, layer, token);
    block = {table.names, rows, gather_rows(table.values, rows)};
  } else {
    const Corpus corpus = read_corpus(dir.corpus());
    const auto ckpt = load_checkpoint(dir.checkpoint(name));
    const auto& samples = corpus.test_prompts.at(prompt);
    block = statistics == "logit" ? logit_block(ckpt.model, samples, rows, token)
                                  : backward_block(ckpt.model, samples, rows, token);
  }
  const Json entry = compare_entry(acts.slice(layer, token), block, labels, entity_groups(acts), n_bins, strategy,
                                   probe, derive_seed(probe.seed, "balance"));
  const auto file = dir.report_file("balance_" + name + "_" + pkey(prompt) + "_" + statistics + ".json");
  const Json out = {{"file", dir.relative(file)}, {"statistics", block.names}, {"layer", layer},
                    {"token", token}, {"result", entry}};
  write_json_file(file, out);
  return out;
}

}  // namespace orderlab
