// Acceptance gate. Prints one PASS/FAIL line per criterion; exit status is the
// number of failed criteria. Usage: orderlab_acceptance [--work-dir DIR] [N ...]

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "orderlab/controls.h"
#include "orderlab/experiments.h"
#include "orderlab/geometry.h"
#include "orderlab/oracle.h"
#include "orderlab/probes.h"
#include "orderlab/report.h"

using namespace orderlab;

namespace {

// ---------------------------------------------------------------- tolerances
constexpr double kC1TauRequired = 1.0;
constexpr double kC1CollinearityMax = 0.05;
constexpr double kC1CosineMin = 0.99;
constexpr double kC1SecondsMax = 30.0;

constexpr double kC2Tolerance = 0.03;
constexpr double kC2SecondsMax = 300.0;

constexpr double kC3GridMaxMax = 0.55;
constexpr double kC3SecondsMax = 900.0;

constexpr double kC4SecondsMax = 60.0;

constexpr double kC5BalancedMax = 0.55;
constexpr double kC5RandomMin = 0.9;
constexpr double kC5OrthogonalGapMax = 0.03;
constexpr double kC5SecondsMax = 120.0;

constexpr double kC6GradRelErrMax = 1e-4;
constexpr double kC6StatAbsErrMax = 1e-10;
constexpr double kC6SolverGapMax = 1e-8;

constexpr double kC7SecondsMax = 1800.0;
constexpr double kC7SeenUnseenMin = 0.8;

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

// FNV-1a over the file bytes.
std::string file_hash(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  uint64_t h = 1469598103934665603ull;
  char c;
  while (in.get(c)) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::vector<double> centroid_px(const CentroidSet& c, const Eigen::VectorXd& axis) {
  std::vector<double> px;
  for (const auto& v : c.centroids) px.push_back(v.dot(axis));
  return px;
}

// ---------------------------------------------------------------- 1
Outcome geometry_recovery() {
  const auto t0 = Clock::now();
  PlantedSpec spec;
  spec.m = 6;
  spec.n_per_stage = 500;
  spec.noise_sigma = 0.1;
  spec.spacing = 10 * spec.noise_sigma;
  const auto planted = plant_signal(spec, 1);
  const auto c = stage_centroids(planted.acts, spec.signal_layer, spec.signal_token, spec.m);
  const auto axis = diffmean_axis({{c.of(spec.m), c.of(1)}});
  const double tau = ordering_score(centroid_px(c, axis), {1, 2, 3, 4, 5, 6});
  const double col = collinearity_residual(c.centroids);
  const double cos = std::abs(axis.dot(planted.direction));
  const double secs = seconds_since(t0);
  return {tau == kC1TauRequired && col <= kC1CollinearityMax && cos >= kC1CosineMin && secs <= kC1SecondsMax,
          "tau=" + fmt(tau) + " collinearity=" + fmt(col) + " |cos|=" + fmt(cos) + " t=" + fmt(secs) + "s"};
}

// ---------------------------------------------------------------- 2
Outcome probe_recovery() {
  const auto t0 = Clock::now();
  bool ok = true;
  std::string detail;
  for (double ratio : {0.0, 1.0, 2.0, 4.0}) {
    PlantedSpec spec;
    spec.m = 2;
    spec.n_per_stage = 2000;
    spec.noise_sigma = 1.0;
    spec.spacing = ratio * spec.noise_sigma;
    spec.n_layers = 1;
    spec.n_tokens = 1;
    spec.signal_layer = 0;
    spec.signal_token = 0;
    double sum = 0.0;
    for (uint64_t seed = 0; seed < 20; ++seed) {
      const auto p = plant_signal(spec, seed);
      const auto r = probe_grid(p.acts, stage_pair_labels(p.acts, 1, 2), entity_groups(p.acts),
                                ProbeOptions{1, 0.8, 0.1, seed}, "D1-vs-D2");
      sum += r.cells[0].acc_mean;
    }
    const double mean = sum / 20.0;
    const double bayes = normal_cdf(ratio / 2.0);
    ok = ok && std::abs(mean - bayes) <= kC2Tolerance;
    detail += "s/sigma=" + fmt(ratio) + ": " + fmt(mean) + " vs " + fmt(bayes) + "; ";
  }
  const double secs = seconds_since(t0);
  return {ok && secs <= kC2SecondsMax, detail + "t=" + fmt(secs) + "s"};
}

// ---------------------------------------------------------------- 3
Outcome null_checks(const std::filesystem::path& work) {
  const auto t0 = Clock::now();
  bool ok = true;
  std::string detail;
  for (const char* mode : {"shuffled_labels", "untrained", "mixed_from_start"}) {
    const auto cfg = parse_experiment_config(Json{{"variant", "sanity"}, {"seed", 1}, {"analysis", {{"sanity", mode}}}});
    const auto root = work / (std::string("sanity_") + mode);
    std::filesystem::remove_all(root);
    run_experiment(cfg, root);
    const Json s = read_json_file(root / "reports" / "sanity.json");
    double worst = 0.0;
    for (const auto& [k, v] : s.at("grid_max").items()) worst = std::max(worst, v.get<double>());
    ok = ok && worst <= kC3GridMaxMax;
    detail += std::string(mode) + "=" + fmt(worst) + " ";
  }
  const double secs = seconds_since(t0);
  return {ok && secs <= kC3SecondsMax, detail + "t=" + fmt(secs) + "s"};
}

// ---------------------------------------------------------------- 4
// Integer-valued statistics so joint bins collide even at k = 7; class 1 is
// shifted so that balancing has something to remove.
Eigen::MatrixXd discrete_stats(int n, int k, const std::vector<int>& labels, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 0.8);
  Eigen::MatrixXd s(n, k);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < k; ++c) s(r, c) = std::round(g(rng) + 0.5 * labels[static_cast<size_t>(r)]);
  }
  return s;
}

Outcome balancing_correctness() {
  const auto t0 = Clock::now();
  bool ok = true;
  std::string detail;
  const int n = 20000;
  std::vector<int> labels(n);
  for (int i = 0; i < n; ++i) labels[static_cast<size_t>(i)] = i % 2;
  for (int k : {1, 6, 7}) {
    const auto stats = discrete_stats(n, k, labels, static_cast<uint64_t>(k));
    std::vector<std::string> names;
    for (int c = 0; c < k; ++c) names.push_back("s" + std::to_string(c));
    for (int N : {5, 15, 75}) {
      for (BinStrategy strat : {BinStrategy::kEqualWidth, BinStrategy::kQuantile}) {
        const auto spec = make_bin_spec(stats, names, N, strat);
        const auto sub = balance_subsample(stats, labels, spec, 3);
        // Recount from the kept rows, not from the subset's own bookkeeping.
        std::map<std::vector<int>, std::array<int, 2>> joint;
        std::vector<std::map<int, std::array<int, 2>>> marginal(static_cast<size_t>(k));
        for (int r : sub.indices) {
          const auto key = spec.bin_of(stats.row(r));
          const int y = labels[static_cast<size_t>(r)];
          joint[key][static_cast<size_t>(y)]++;
          for (int c = 0; c < k; ++c) marginal[static_cast<size_t>(c)][key[static_cast<size_t>(c)]][static_cast<size_t>(y)]++;
        }
        bool equal = !sub.indices.empty();
        for (const auto& [key, cnt] : joint) equal = equal && cnt[0] == cnt[1];
        for (const auto& m : marginal) {
          for (const auto& [bin, cnt] : m) equal = equal && cnt[0] == cnt[1];
        }
        // Every bin holding both classes in the full data must survive.
        std::map<std::vector<int>, std::array<int, 2>> full;
        for (int r = 0; r < n; ++r) full[spec.bin_of(stats.row(r))][static_cast<size_t>(labels[static_cast<size_t>(r)])]++;
        int both = 0;
        for (const auto& [key, cnt] : full) both += (cnt[0] > 0 && cnt[1] > 0) ? 1 : 0;
        equal = equal && static_cast<int>(joint.size()) == both;
        if (!equal) {
          ok = false;
          detail += "k=" + std::to_string(k) + ",N=" + std::to_string(N) + "," +
                    std::string(bin_strategy_name(strat)) + " unequal; ";
        }
      }
    }
  }
  const double secs = seconds_since(t0);
  return {ok && secs <= kC4SecondsMax, (detail.empty() ? std::string("18 configurations equal; ") : detail) +
                                           "t=" + fmt(secs) + "s"};
}

// ---------------------------------------------------------------- 5
Outcome balancing_discriminates() {
  const auto t0 = Clock::now();
  double balanced = 0.0, random = 0.0;
  const int seeds = 5;
  for (int s = 0; s < seeds; ++s) {
    const auto norm = plant_norm_signal(2000, 32, 0.95, static_cast<uint64_t>(100 + s));
    Eigen::MatrixXd norms(norm.X.rows(), 1);
    for (Eigen::Index r = 0; r < norm.X.rows(); ++r) norms(r, 0) = norm.X.row(r).norm();
    CompareOptions opt;
    opt.n_bins = 5;
    opt.n_splits = 3;
    opt.seed = static_cast<uint64_t>(s);
    const auto r = balanced_probe_compare(norm.X, norms, {"l2_norm"}, norm.labels, norm.groups, opt);
    balanced += r.balanced / seeds;
    random += r.random / seeds;
  }

  const auto orth = plant_orthogonal_signal(2000, 32, 1.5, 7);
  Eigen::MatrixXd stats(orth.X.rows(), kNumActivationStats);
  for (Eigen::Index r = 0; r < orth.X.rows(); ++r) {
    const auto st = activation_stats(orth.X.row(r).transpose());
    for (int k = 0; k < kNumActivationStats; ++k) stats(r, k) = st[static_cast<size_t>(k)];
  }
  CompareOptions opt;
  opt.n_bins = 3;
  opt.n_splits = 3;
  opt.seed = 1;
  const auto o = balanced_probe_compare(orth.X, stats, activation_stat_names(), orth.labels, orth.groups, opt);
  const double gap = std::abs(o.balanced - o.random);
  const double secs = seconds_since(t0);
  return {balanced <= kC5BalancedMax && random >= kC5RandomMin && gap <= kC5OrthogonalGapMax && secs <= kC5SecondsMax,
          "norm-only balanced=" + fmt(balanced) + " random=" + fmt(random) + "; orthogonal balanced=" +
              fmt(o.balanced) + " random=" + fmt(o.random) + " t=" + fmt(secs) + "s"};
}

// ---------------------------------------------------------------- 6
double gradient_rel_error() {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 16;
  c.vocab_size = 13;
  c.max_context = 10;
  const auto model = Transformer<double>::init(c, 3);
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> tok(2, c.vocab_size - 1);
  std::vector<std::vector<int>> seqs;
  for (int len : {7, 5, 9}) {
    std::vector<int> s;
    for (int t = 0; t < len; ++t) s.push_back(tok(rng));
    seqs.push_back(s);
  }
  const auto batch = make_batch(seqs, 0);
  std::vector<int> targets(batch.tokens.size(), -1);
  for (int i = 0; i < batch.batch; ++i) {
    for (int t = 0; t + 1 < batch.lengths[static_cast<size_t>(i)]; ++t) {
      targets[static_cast<size_t>(i * batch.length + t)] = batch.tokens[static_cast<size_t>(i * batch.length + t + 1)];
    }
  }
  ParamVector<double> grad;
  model.loss_and_grad(batch, targets, &grad);
  std::uniform_int_distribution<size_t> pick(0, grad.size() - 1);
  const double h = 1e-5;
  double worst = 0.0;
  for (int k = 0; k < 200; ++k) {
    const size_t i = pick(rng);
    auto plus = model, minus = model;
    plus.params()[i] += h;
    minus.params()[i] -= h;
    const double fd =
        (plus.loss_and_grad(batch, targets, nullptr) - minus.loss_and_grad(batch, targets, nullptr)) / (2 * h);
    worst = std::max(worst, std::abs(fd - grad[i]) / std::max({std::abs(fd), std::abs(grad[i]), 1e-6}));
  }
  return worst;
}

double stat_formula_error() {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> g(0.0, 1.0);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    Eigen::VectorXd v(37);
    for (auto& x : v) x = g(rng) * 2.0 + 0.3;
    const double n = static_cast<double>(v.size());
    double mean = 0, mx = v(0), ss = 0;
    for (double x : v) {
      mean += x / n;
      mx = std::max(mx, x);
      ss += x * x;
    }
    double m2 = 0, m3 = 0, m4 = 0;
    for (double x : v) {
      m2 += std::pow(x - mean, 2) / n;
      m3 += std::pow(x - mean, 3) / n;
      m4 += std::pow(x - mean, 4) / n;
    }
    const std::array<double, kNumActivationStats> want{std::sqrt(ss), mx, mean, std::sqrt(m2),
                                                       m3 / std::pow(m2, 1.5), m4 / (m2 * m2)};
    const auto got = activation_stats(v);
    for (size_t k = 0; k < want.size(); ++k) worst = std::max(worst, std::abs(got[k] - want[k]));

    // Logit statistics: entropy of the softmax, max logit, logsumexp.
    double lse = 0;
    for (double x : v) lse += std::exp(x);
    lse = std::log(lse);
    double ent = 0;
    for (double x : v) ent -= std::exp(x - lse) * (x - lse);
    const auto lg = logit_stats(v);
    worst = std::max({worst, std::abs(lg[0] - ent), std::abs(lg[1] - mx), std::abs(lg[2] - lse),
                      std::abs(lg[3] - mean), std::abs(lg[4] - std::sqrt(m2))});
  }
  return worst;
}

bool pca_ratios_non_increasing() {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::MatrixXd rows(400, 20);
  for (Eigen::Index r = 0; r < rows.rows(); ++r) {
    for (Eigen::Index c = 0; c < rows.cols(); ++c) rows(r, c) = g(rng) * (1.0 + 0.2 * static_cast<double>(c % 7));
  }
  const auto p = pca(rows, 10);
  for (Eigen::Index i = 1; i < p.explained_ratio.size(); ++i) {
    if (p.explained_ratio(i) > p.explained_ratio(i - 1)) return false;
  }
  return true;
}

double solver_gap() {
  std::mt19937_64 rng(13);
  std::normal_distribution<double> g(0.0, 1.0);
  const int n = 600, d = 16;
  Eigen::MatrixXd X(n, d);
  std::vector<int> y(n);
  for (int r = 0; r < n; ++r) {
    y[static_cast<size_t>(r)] = r % 2;
    for (int c = 0; c < d; ++c) X(r, c) = g(rng) + (c == 0 ? 1.0 * y[static_cast<size_t>(r)] : 0.0);
  }
  const double l2 = l2_from_C(0.1, y.size());
  const auto a = train_probe(X, y, l2, 1);
  SolverOptions rnd;
  rnd.random_init = true;
  const auto b = train_probe(X, y, l2, 2, rnd);
  return std::abs(probe_objective(a, X, y) - probe_objective(b, X, y));
}

Outcome numerical_core() {
  const double grad = gradient_rel_error();
  const double stat = stat_formula_error();
  const bool pca_ok = pca_ratios_non_increasing();
  const double gap = solver_gap();
  return {grad <= kC6GradRelErrMax && stat <= kC6StatAbsErrMax && pca_ok && gap <= kC6SolverGapMax,
          "grad rel err=" + fmt(grad) + " stat err=" + fmt(stat) + " pca non-increasing=" + (pca_ok ? "yes" : "no") +
              " solver gap=" + fmt(gap)};
}

// ---------------------------------------------------------------- 7
double max_scalar_with_prefix(const Json& scalars, const std::string& prefix, const std::string& suffix) {
  double best = -1.0;
  for (const auto& [name, entry] : scalars.items()) {
    if (name.rfind(prefix, 0) == 0 && name.size() >= suffix.size() &&
        name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0) {
      best = std::max(best, entry.at("value").get<double>());
    }
  }
  return best;
}

Outcome end_to_end(const std::filesystem::path& work) {
  const auto t0 = Clock::now();
  const auto cfg = parse_experiment_config(Json{{"variant", "six_stage"}, {"seed", 1}});
  const auto root = work / "six_stage";
  std::filesystem::remove_all(root);
  const auto r = run_experiment(cfg, root);
  const double secs = seconds_since(t0);
  bool artifacts = true;
  std::string missing;
  for (const char* f : {"reports/projection_final.csv", "reports/pairwise_final.json", "reports/washout_curve.csv",
                        "reports/stage_report.json"}) {
    if (!std::filesystem::exists(root / f)) {
      artifacts = false;
      missing += std::string(f) + " ";
    }
  }
  const Json& scalars = r.report.at("scalars");
  const double seen = max_scalar_with_prefix(scalars, "seen_unseen.", ".max");
  const double order = max_scalar_with_prefix(scalars, "probe.final.", ".max");
  const Json sr = read_json_file(root / "reports" / "stage_report.json");
  bool traced = true;
  for (const auto& c : check_traceability(RunDir(root))) traced = traced && c.match;
  return {secs <= kC7SecondsMax && artifacts && traced && seen >= kC7SeenUnseenMin,
          "seen-vs-unseen=" + fmt(seen) + " D1-vs-D6 max=" + fmt(order) + " (reported only) stage-report acc=" +
              fmt(sr.at("accuracy").get<double>()) + " traceable=" + (traced ? "yes" : "no") +
              (missing.empty() ? "" : " missing: " + missing) + " t=" + fmt(secs) + "s"};
}

// ---------------------------------------------------------------- 8
std::map<std::string, std::string> hash_tree(const std::filesystem::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : std::filesystem::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    const auto rel = std::filesystem::relative(e.path(), root).string();
    if (rel == "reports/timing.json") continue;  // wall-clock only
    out[rel] = file_hash(e.path());
  }
  return out;
}

Outcome determinism(const std::filesystem::path& work) {
  const Json base{{"variant", "six_stage"},
                  {"seed", 3},
                  {"data", {{"n_entities", 360}}},
                  {"train", {{"epochs", 2}}},
                  {"analysis", {{"washout_epochs", 2}, {"stage_report_epochs", 1}, {"forward_max_per_class", 10}}}};
  const auto cfg = parse_experiment_config(base);
  std::map<std::string, std::string> hashes[2];
  for (int i = 0; i < 2; ++i) {
    const auto root = work / ("determinism_" + std::to_string(i));
    std::filesystem::remove_all(root);
    run_experiment(cfg, root);
    hashes[i] = hash_tree(root);
  }
  int differing = 0;
  std::string first;
  for (const auto& [f, h] : hashes[0]) {
    const auto it = hashes[1].find(f);
    if (it == hashes[1].end() || it->second != h) {
      if (differing++ == 0) first = f;
    }
  }
  const bool same_files = hashes[0].size() == hashes[1].size();
  const std::string report_hash = hashes[0].count("report.json") ? hashes[0].at("report.json") : "none";
  return {differing == 0 && same_files && report_hash != "none",
          std::to_string(hashes[0].size()) + " files compared, " + std::to_string(differing) + " differ" +
              (first.empty() ? "" : " (first: " + first + ")") + ", report.json " + report_hash};
}

}  // namespace

int main(int argc, char** argv) {
  std::filesystem::path work = std::filesystem::current_path() / "acceptance_runs";
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--work-dir" && i + 1 < argc) {
      work = argv[++i];
    } else {
      wanted.insert(std::stoi(a));
    }
  }
  std::filesystem::create_directories(work);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"oracle recovery (geometry)", geometry_recovery},
      {"oracle recovery (probes)", probe_recovery},
      {"null checks", [&] { return null_checks(work); }},
      {"balancing correctness", balancing_correctness},
      {"balancing discriminates mechanisms", balancing_discriminates},
      {"numerical core", numerical_core},
      {"end-to-end six-stage run", [&] { return end_to_end(work); }},
      {"determinism", [&] { return determinism(work); }},
  };
  int failed = 0;
  for (size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!wanted.empty() && !wanted.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw ") + e.what()};
    }
    failed += o.pass ? 0 : 1;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << ": " << criteria[i].first << " | " << o.detail
              << std::endl;
  }
  return failed;
}
