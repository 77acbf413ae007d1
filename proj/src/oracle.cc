#include "orderlab/oracle.h"

#include <cmath>
#include <random>

#include "orderlab/controls.h"
#include "orderlab/geometry.h"
#include "orderlab/probes.h"

namespace orderlab {

namespace {

Eigen::VectorXd random_unit(int dim, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd v(dim);
  for (int i = 0; i < dim; ++i) v(i) = normal(rng);
  return v.normalized();
}

}  // namespace

PlantedSpec parse_planted_spec(StrictObject obj) {
  PlantedSpec s;
  s.m = obj.get<int>("m", s.m);
  s.n_per_stage = obj.get<int>("n_per_stage", s.n_per_stage);
  s.dim = obj.get<int>("dim", s.dim);
  s.spacing = obj.get<double>("spacing", s.spacing);
  s.noise_sigma = obj.get<double>("noise_sigma", s.noise_sigma);
  s.curvature = obj.get<double>("curvature", s.curvature);
  s.n_layers = obj.get<int>("n_layers", s.n_layers);
  s.n_tokens = obj.get<int>("n_tokens", s.n_tokens);
  s.signal_layer = obj.get<int>("signal_layer", s.signal_layer);
  s.signal_token = obj.get<int>("signal_token", s.signal_token);
  obj.finish();
  if (s.m < 2 || s.n_per_stage < 1 || s.dim < 2 || s.spacing < 0 || s.noise_sigma < 0 || s.curvature < 0 ||
      s.n_layers < 1 || s.n_tokens < 1 || s.signal_layer < 0 || s.signal_layer >= s.n_layers || s.signal_token < 0 ||
      s.signal_token >= s.n_tokens) {
    fail(ErrorCode::kConfigInvalid, "invalid planted spec");
  }
  return s;
}

Json to_json(const PlantedSpec& s) {
  return Json{{"m", s.m},
              {"n_per_stage", s.n_per_stage},
              {"dim", s.dim},
              {"spacing", s.spacing},
              {"noise_sigma", s.noise_sigma},
              {"curvature", s.curvature},
              {"n_layers", s.n_layers},
              {"n_tokens", s.n_tokens},
              {"signal_layer", s.signal_layer},
              {"signal_token", s.signal_token}};
}

PlantedData plant_signal(const PlantedSpec& spec, uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, "planted"));
  PlantedData out;
  out.direction = random_unit(spec.dim, rng);
  Eigen::VectorXd bend = random_unit(spec.dim, rng);
  bend -= bend.dot(out.direction) * out.direction;
  bend.normalize();
  const double center = 0.5 * (spec.m + 1);
  for (int i = 1; i <= spec.m; ++i) {
    const double t = i - center;
    out.means.push_back(t * spec.spacing * out.direction + spec.curvature * t * t * bend);
  }

  auto& acts = out.acts;
  acts.n_samples = spec.m * spec.n_per_stage;
  acts.n_layers = spec.n_layers;
  acts.n_tokens = spec.n_tokens;
  acts.d_model = spec.dim;
  acts.fingerprint = "planted-" + hex64(seed);
  acts.data.resize(static_cast<size_t>(acts.n_samples) * acts.n_layers * acts.n_tokens * acts.d_model);
  const int n_train = static_cast<int>(std::floor(0.8 * spec.n_per_stage + 1e-9));
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int s = 0; s < acts.n_samples; ++s) {
    const int stage = s / spec.n_per_stage + 1;
    const int within = s % spec.n_per_stage;
    acts.index.push_back({s, stage, within < n_train ? ProbeSplit::kTrain : ProbeSplit::kTest, 0});
    for (int l = 0; l < acts.n_layers; ++l) {
      for (int t = 0; t < acts.n_tokens; ++t) {
        float* dst = acts.data.data() + acts.offset(s, l, t);
        const bool signal = l == spec.signal_layer && t == spec.signal_token;
        for (int k = 0; k < spec.dim; ++k) {
          const double mu = signal ? out.means[static_cast<size_t>(stage - 1)](k) : 0.0;
          dst[k] = static_cast<float>(mu + spec.noise_sigma * normal(rng));
        }
      }
    }
  }
  return out;
}

LabeledRows plant_norm_signal(int n_per_class, int dim, double p_high, uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, "norm_signal"));
  const Eigen::VectorXd mu = random_unit(dim, rng);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const double lift = std::sqrt(static_cast<double>(dim));
  constexpr double kLow = 1.0, kHigh = 2.5;
  LabeledRows out;
  out.X.resize(2 * n_per_class, dim);
  for (int r = 0; r < 2 * n_per_class; ++r) {
    const int label = r % 2;
    Eigen::VectorXd u(dim);
    for (int k = 0; k < dim; ++k) u(k) = normal(rng);
    u = (u + lift * mu).normalized();
    const double p = label == 1 ? p_high : 1.0 - p_high;
    const double level = unif(rng) < p ? kHigh : kLow;
    out.X.row(r) = (level * u).transpose();
    out.labels.push_back(label);
    out.groups.push_back(r);
  }
  return out;
}

LabeledRows plant_orthogonal_signal(int n_per_class, int dim, double separation, uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, "orthogonal_signal"));
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd mu(dim);
  for (int k = 0; k < dim; ++k) mu(k) = normal(rng);
  const Eigen::VectorXd mu_rev = mu.reverse();
  // Scale so the two means sit `separation` noise units apart.
  const double gap = (mu - mu_rev).norm();
  mu *= separation / gap;
  const Eigen::VectorXd mu1 = mu.reverse();
  LabeledRows out;
  out.X.resize(2 * n_per_class, dim);
  for (int r = 0; r < 2 * n_per_class; ++r) {
    const int label = r % 2;
    const Eigen::VectorXd& m = label == 1 ? mu1 : mu;
    for (int k = 0; k < dim; ++k) out.X(r, k) = m(k) + normal(rng);
    out.labels.push_back(label);
    out.groups.push_back(r);
  }
  return out;
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

std::vector<VerifyCase> default_verify_cases() {
  std::vector<VerifyCase> cases;
  PlantedSpec strong;
  strong.spacing = 1.0;
  strong.noise_sigma = 0.1;
  cases.push_back({"strong", strong, VerifyCase::Kind::kStrong});
  PlantedSpec zero = strong;
  zero.spacing = 0.0;
  cases.push_back({"zero", zero, VerifyCase::Kind::kZero});
  PlantedSpec norm = strong;
  norm.n_per_stage = 2000;
  cases.push_back({"norm_only", norm, VerifyCase::Kind::kNormOnly});
  return cases;
}

std::vector<VerifyRow> verify_pipeline(const std::vector<VerifyCase>& cases, uint64_t seed,
                                       const std::filesystem::path& out_dir) {
  std::vector<VerifyRow> rows;
  for (const auto& c : cases) {
    const uint64_t case_seed = derive_seed(seed, c.name);
    const auto add = [&](const std::string& check, double value, const std::string& expectation, bool pass) {
      rows.push_back({c.name, check, value, expectation, pass});
    };
    if (c.kind == VerifyCase::Kind::kNormOnly) {
      const auto data = plant_norm_signal(c.spec.n_per_stage, c.spec.dim, 0.95, case_seed);
      CompareOptions opt;
      opt.n_bins = 5;
      opt.n_splits = 5;
      opt.seed = case_seed;
      Eigen::MatrixXd norms(data.X.rows(), 1);
      for (Eigen::Index r = 0; r < data.X.rows(); ++r) norms(r, 0) = data.X.row(r).norm();
      const auto cmp = balanced_probe_compare(data.X, norms, {"l2_norm"}, data.labels, data.groups, opt);
      add("balanced_accuracy", cmp.balanced, "<= 0.55", cmp.balanced <= 0.55);
      add("random_accuracy", cmp.random, ">= 0.9", cmp.random >= 0.9);
      continue;
    }
    PlantedData planted = plant_signal(c.spec, case_seed);
    ActivationTensor acts = std::move(planted.acts);
    if (!out_dir.empty()) {
      const auto path = out_dir / "acts" / c.name / "0.actv";
      write_activations(acts, path);
      acts = read_activations(path).tensor;
    }
    const int m = c.spec.m;
    const auto cents = stage_centroids(acts, c.spec.signal_layer, c.spec.signal_token, m);
    Eigen::VectorXd axis;
    bool axis_ok = true;
    try {
      axis = diffmean_axis({{cents.of(m), cents.of(1)}});
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kZeroVector) throw;
      axis_ok = false;
    }
    std::vector<double> px;
    std::vector<int> order;
    if (axis_ok) {
      for (int i = 1; i <= m; ++i) {
        px.push_back(cents.of(i).dot(axis));
        order.push_back(i);
      }
    }
    const double tau = axis_ok ? ordering_score(px, order) : 0.0;
    const double cosine = axis_ok ? std::abs(axis.dot(planted.direction)) : 0.0;
    const auto probe = probe_grid(acts, stage_pair_labels(acts, 1, m), entity_groups(acts), ProbeOptions{5, 0.8, 0.1, case_seed},
                                  "D1-vs-D" + std::to_string(m));
    const auto& signal = probe.cell(c.spec.signal_layer, c.spec.signal_token);
    double off_max = 0.0;
    for (const auto& cell : probe.cells) {
      if (cell.layer != c.spec.signal_layer || cell.token != c.spec.signal_token) off_max = std::max(off_max, cell.acc_mean);
    }
    const auto stats = activation_stat_table(acts, c.spec.signal_layer, c.spec.signal_token);
    const auto labels = stage_pair_labels(acts, 1, m);
    const auto spec = make_bin_spec(stats.values, stats.names, 3, BinStrategy::kQuantile);
    bool equal = true;
    try {
      const auto bal = balance_subsample(stats.values, labels, spec, case_seed);
      for (const auto& [key, counts] : bal.kept) equal = equal && counts[0] == counts[1];
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kEmptyResult) throw;
    }
    add("balanced_bins_equal", equal ? 1.0 : 0.0, "== 1", equal);
    if (c.kind == VerifyCase::Kind::kStrong) {
      add("ordering_tau", tau, "== 1", tau == 1.0);
      const double coll = collinearity_residual(cents.centroids);
      add("collinearity_residual", coll, "<= 0.05", coll <= 0.05);
      add("axis_cosine", cosine, ">= 0.99", cosine >= 0.99);
      add("signal_cell_accuracy", signal.acc_mean, ">= 0.99", signal.acc_mean >= 0.99);
      add("off_signal_max_accuracy", off_max, "<= 0.6", off_max <= 0.6);
    } else {
      add("axis_cosine", cosine, "< 0.5", cosine < 0.5);
      add("grid_max_accuracy", probe.max_accuracy(), "<= 0.6", probe.max_accuracy() <= 0.6);
    }
  }
  return rows;
}

Json verify_to_json(const std::vector<VerifyRow>& rows) {
  Json out = Json::array();
  for (const auto& r : rows) {
    out.push_back({{"spec", r.spec}, {"check", r.check}, {"value", r.value}, {"expect", r.expectation}, {"pass", r.pass}});
  }
  return out;
}

}  // namespace orderlab
