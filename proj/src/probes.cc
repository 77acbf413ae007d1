#include "orderlab/probes.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <random>
#include <sstream>

namespace orderlab {

namespace {

double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

double objective(const Eigen::MatrixXd& Xt, const Eigen::VectorXd& y, const Eigen::VectorXd& theta, double l2) {
  const Eigen::VectorXd z = Xt * theta;
  double loss = 0.0;
  for (Eigen::Index i = 0; i < z.size(); ++i) loss += softplus(z(i)) - y(i) * z(i);
  const auto d = theta.size() - 1;
  return loss / static_cast<double>(z.size()) + 0.5 * l2 * theta.head(d).squaredNorm();
}

Eigen::MatrixXd with_bias_column(const Eigen::MatrixXd& X) {
  Eigen::MatrixXd Xt(X.rows(), X.cols() + 1);
  Xt.leftCols(X.cols()) = X;
  Xt.col(X.cols()).setOnes();
  return Xt;
}

void check_inputs(const Eigen::MatrixXd& X, const std::vector<int>& y) {
  if (static_cast<size_t>(X.rows()) != y.size()) fail(ErrorCode::kInvalidArgument, "label count differs from rows");
  if (!X.allFinite()) fail(ErrorCode::kNonFiniteFeature, "probe features contain NaN or Inf");
  bool has0 = false, has1 = false;
  for (int v : y) {
    if (v != 0 && v != 1) fail(ErrorCode::kInvalidArgument, "probe labels must be 0 or 1");
    (v ? has1 : has0) = true;
  }
  if (!has0 || !has1) fail(ErrorCode::kSingleClass, "probe training data contains a single class");
}

double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

}  // namespace

ProbeModel train_probe(const Eigen::MatrixXd& X, const std::vector<int>& y, double l2, uint64_t seed,
                       const SolverOptions& options) {
  check_inputs(X, y);
  if (l2 < 0) fail(ErrorCode::kInvalidArgument, "l2 must be non-negative");
  const auto n = X.rows(), d = X.cols();
  const Eigen::MatrixXd Xt = with_bias_column(X);
  Eigen::VectorXd yv(n);
  for (Eigen::Index i = 0; i < n; ++i) yv(i) = y[static_cast<size_t>(i)];
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(d + 1);
  if (options.random_init) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (Eigen::Index i = 0; i <= d; ++i) theta(i) = normal(rng);
  }
  Eigen::VectorXd reg = Eigen::VectorXd::Constant(d + 1, l2);
  reg(d) = 0.0;

  ProbeModel out;
  out.l2 = l2;
  double f = objective(Xt, yv, theta, l2);
  for (int it = 0; it < options.max_iterations; ++it) {
    const Eigen::VectorXd z = Xt * theta;
    const Eigen::VectorXd p = (1.0 / (1.0 + (-z.array()).exp())).matrix();
    Eigen::VectorXd g = Xt.transpose() * (p - yv) / static_cast<double>(n);
    g += reg.cwiseProduct(theta);
    out.grad_norm = g.norm();
    out.iterations = it;
    if (out.grad_norm <= options.tolerance) {
      out.converged = true;
      break;
    }
    const Eigen::VectorXd w = (p.array() * (1.0 - p.array())).sqrt().matrix();
    const Eigen::MatrixXd Xw = Xt.array().colwise() * w.array();
    Eigen::MatrixXd H = Xw.transpose() * Xw / static_cast<double>(n);
    H.diagonal() += reg + Eigen::VectorXd::Constant(d + 1, 1e-12);
    Eigen::VectorXd step = H.ldlt().solve(g);
    double slope = g.dot(step);
    if (!step.allFinite() || slope <= 0) {
      step = g;
      slope = g.squaredNorm();
    }
    double t = 1.0;
    double f_new = objective(Xt, yv, theta - step, l2);
    while (f_new > f - 1e-4 * t * slope && t > 1e-12) {
      t *= 0.5;
      f_new = objective(Xt, yv, theta - t * step, l2);
    }
    if (!(f_new <= f)) break;  // no further decrease representable
    theta -= t * step;
    f = f_new;
    out.iterations = it + 1;
  }
  out.weights = theta.head(d);
  out.bias = theta(d);
  return out;
}

double probe_objective(const ProbeModel& probe, const Eigen::MatrixXd& X, const std::vector<int>& y) {
  Eigen::VectorXd theta(probe.weights.size() + 1);
  theta.head(probe.weights.size()) = probe.weights;
  theta(probe.weights.size()) = probe.bias;
  Eigen::VectorXd yv(X.rows());
  for (Eigen::Index i = 0; i < X.rows(); ++i) yv(i) = y[static_cast<size_t>(i)];
  return objective(with_bias_column(X), yv, theta, probe.l2);
}

double eval_probe(const ProbeModel& probe, const Eigen::MatrixXd& X, const std::vector<int>& y) {
  if (X.rows() == 0) fail(ErrorCode::kEmptyEval, "no rows to evaluate");
  if (static_cast<size_t>(X.rows()) != y.size()) fail(ErrorCode::kInvalidArgument, "label count differs from rows");
  const Eigen::VectorXd z = (X * probe.weights).array() + probe.bias;
  int correct = 0;
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    if ((z(i) > 0 ? 1 : 0) == y[static_cast<size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(z.size());
}

std::vector<RowSplit> group_splits(const std::vector<int>& group_of_row, const std::vector<int>& label_of_row,
                                   int n_splits, double ratio, uint64_t seed) {
  if (group_of_row.size() != label_of_row.size()) fail(ErrorCode::kInvalidArgument, "group/label length mismatch");
  if (!(ratio > 0 && ratio < 1)) fail(ErrorCode::kInvalidArgument, "split ratio must lie in (0, 1)");
  std::map<int, int> label_of_group;
  std::map<int, std::vector<int>> rows_of_group;
  for (size_t r = 0; r < group_of_row.size(); ++r) {
    const int lab = label_of_row[r];
    if (lab < 0) continue;
    const int g = group_of_row[r];
    auto [it, inserted] = label_of_group.emplace(g, lab);
    if (!inserted && it->second != lab) {
      fail(ErrorCode::kInvalidArgument, "group " + std::to_string(g) + " carries more than one label");
    }
    rows_of_group[g].push_back(static_cast<int>(r));
  }
  std::map<int, std::vector<int>> groups_of_class;
  for (const auto& [g, lab] : label_of_group) groups_of_class[lab].push_back(g);

  std::vector<RowSplit> splits;
  for (int s = 0; s < n_splits; ++s) {
    std::mt19937_64 rng(derive_seed(seed, static_cast<uint64_t>(s)));
    RowSplit split;
    for (auto [lab, groups] : groups_of_class) {
      std::shuffle(groups.begin(), groups.end(), rng);
      const auto n_train = static_cast<size_t>(std::floor(ratio * static_cast<double>(groups.size()) + 1e-9));
      for (size_t i = 0; i < groups.size(); ++i) {
        auto& dst = i < n_train ? split.train : split.test;
        const auto& rows = rows_of_group[groups[i]];
        dst.insert(dst.end(), rows.begin(), rows.end());
      }
    }
    std::sort(split.train.begin(), split.train.end());
    std::sort(split.test.begin(), split.test.end());
    splits.push_back(std::move(split));
  }
  return splits;
}

ProbeOptions parse_probe_options(StrictObject obj) {
  ProbeOptions o;
  o.n_splits = obj.get<int>("n_splits", o.n_splits);
  o.split_ratio = obj.get<double>("split_ratio", o.split_ratio);
  o.C = obj.get<double>("C", o.C);
  o.seed = obj.get<uint64_t>("seed", o.seed);
  obj.finish();
  if (o.n_splits < 1) fail(ErrorCode::kConfigInvalid, "probe n_splits must be >= 1");
  if (!(o.split_ratio > 0 && o.split_ratio < 1)) fail(ErrorCode::kConfigInvalid, "probe split_ratio must lie in (0, 1)");
  if (o.C <= 0) fail(ErrorCode::kConfigInvalid, "probe C must be positive");
  return o;
}

Json to_json(const ProbeOptions& o) {
  return Json{{"n_splits", o.n_splits}, {"split_ratio", o.split_ratio}, {"C", o.C}, {"seed", o.seed}};
}

const ProbeCell& ProbeReport::best() const {
  if (cells.empty()) fail(ErrorCode::kEmptyResult, "probe report has no cells");
  const ProbeCell* out = &cells.front();
  for (const auto& c : cells) {
    if (c.acc_mean > out->acc_mean) out = &c;
  }
  return *out;
}

ProbeReport probe_grid(const ActivationTensor& acts, const std::vector<int>& labels, const std::vector<int>& groups,
                       const ProbeOptions& options, const std::string& label_def) {
  if (labels.size() != static_cast<size_t>(acts.n_samples) || groups.size() != labels.size()) {
    fail(ErrorCode::kInvalidArgument, "labels/groups must have one entry per sample");
  }
  const auto splits = group_splits(groups, labels, options.n_splits, options.split_ratio, options.seed);
  for (const auto& s : splits) {
    std::vector<int> inter;
    std::vector<int> gtrain, gtest;
    for (int r : s.train) gtrain.push_back(groups[static_cast<size_t>(r)]);
    for (int r : s.test) gtest.push_back(groups[static_cast<size_t>(r)]);
    std::sort(gtrain.begin(), gtrain.end());
    std::sort(gtest.begin(), gtest.end());
    std::set_intersection(gtrain.begin(), gtrain.end(), gtest.begin(), gtest.end(), std::back_inserter(inter));
    if (!inter.empty()) fail(ErrorCode::kInvalidArgument, "probe split leaks groups between train and test");
    if (s.test.empty()) fail(ErrorCode::kEmptyEval, "probe split has an empty test side");
  }
  ProbeReport report;
  report.n_layers = acts.n_layers;
  report.n_tokens = acts.n_tokens;
  report.label_def = label_def;
  report.cells.resize(static_cast<size_t>(acts.n_layers) * static_cast<size_t>(acts.n_tokens));
  parallel_for(report.cells.size(), [&](size_t ci) {
    const int layer = static_cast<int>(ci) / acts.n_tokens;
    const int token = static_cast<int>(ci) % acts.n_tokens;
    ProbeCell& cell = report.cells[ci];
    cell.layer = layer;
    cell.token = token;
    const uint64_t cell_seed = derive_seed(derive_seed(options.seed, static_cast<uint64_t>(layer)),
                                           static_cast<uint64_t>(token));
    for (size_t s = 0; s < splits.size(); ++s) {
      const auto& split = splits[s];
      std::vector<int> ytr, yte;
      for (int r : split.train) ytr.push_back(labels[static_cast<size_t>(r)]);
      for (int r : split.test) yte.push_back(labels[static_cast<size_t>(r)]);
      const Eigen::MatrixXd Xtr = acts.slice(layer, token, split.train);
      const auto probe = train_probe(Xtr, ytr, l2_from_C(options.C, split.train.size()),
                                     derive_seed(cell_seed, static_cast<uint64_t>(s)));
      cell.accuracies.push_back(eval_probe(probe, acts.slice(layer, token, split.test), yte));
      if (s == 0) {
        const double norm = probe.weights.norm();
        cell.direction = norm > 0 ? Eigen::VectorXd(probe.weights / norm) : probe.weights;
        cell.n_train = static_cast<int>(split.train.size());
        cell.n_test = static_cast<int>(split.test.size());
      }
    }
    double sum = 0.0;
    for (double a : cell.accuracies) sum += a;
    cell.acc_mean = sum / static_cast<double>(cell.accuracies.size());
    cell.acc_std = sample_std(cell.accuracies);
  });
  return report;
}

std::vector<int> stage_pair_labels(const ActivationTensor& acts, int stage_a, int stage_b) {
  std::vector<int> labels;
  labels.reserve(acts.index.size());
  for (const auto& s : acts.index) labels.push_back(s.stage == stage_a ? 0 : s.stage == stage_b ? 1 : -1);
  return labels;
}

std::vector<int> entity_groups(const ActivationTensor& acts) {
  std::vector<int> groups;
  groups.reserve(acts.index.size());
  for (const auto& s : acts.index) groups.push_back(s.entity_id);
  return groups;
}

Eigen::MatrixXd pairwise_stage_grid(const ActivationTensor& acts, int m, int layer, int token,
                                    const ProbeOptions& options) {
  if (m < 2) fail(ErrorCode::kInvalidArgument, "pairwise_stage_grid needs m >= 2");
  Eigen::MatrixXd grid = Eigen::MatrixXd::Constant(m, m, std::numeric_limits<double>::quiet_NaN());
  // Only the requested cell is probed.
  ActivationTensor cell;
  cell.n_samples = acts.n_samples;
  cell.n_layers = 1;
  cell.n_tokens = 1;
  cell.d_model = acts.d_model;
  cell.index = acts.index;
  cell.data.resize(static_cast<size_t>(acts.n_samples) * static_cast<size_t>(acts.d_model));
  for (int s = 0; s < acts.n_samples; ++s) {
    std::copy_n(acts.data.begin() + static_cast<std::ptrdiff_t>(acts.offset(s, layer, token)), acts.d_model,
                cell.data.begin() + static_cast<std::ptrdiff_t>(cell.offset(s, 0, 0)));
  }
  const auto groups = entity_groups(cell);
  for (int i = 1; i <= m; ++i) {
    for (int j = i + 1; j <= m; ++j) {
      const auto report = probe_grid(cell, stage_pair_labels(cell, i, j), groups, options,
                                     "D" + std::to_string(i) + "-vs-D" + std::to_string(j));
      grid(i - 1, j - 1) = report.cells.front().acc_mean;
    }
  }
  return grid;
}

void write_probe_csv(const std::filesystem::path& path, const ProbeReport& report) {
  std::ostringstream out;
  out << "layer,token,acc_mean,acc_std,n_train,n_test,label_def\n";
  for (const auto& c : report.cells) {
    out << c.layer << ',' << c.token << ',' << format_double(c.acc_mean) << ',' << format_double(c.acc_std) << ','
        << c.n_train << ',' << c.n_test << ',' << report.label_def << '\n';
  }
  write_text_file(path, out.str());
}

ProbeReport read_probe_csv(const std::filesystem::path& path) {
  std::istringstream in(read_text_file(path));
  std::string line;
  std::getline(in, line);
  ProbeReport report;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_fields(line);
    if (f.size() != 7) fail(ErrorCode::kInvalidArgument, path.string() + ": malformed probe row");
    ProbeCell c;
    c.layer = std::stoi(f[0]);
    c.token = std::stoi(f[1]);
    c.acc_mean = std::stod(f[2]);
    c.acc_std = std::stod(f[3]);
    c.n_train = std::stoi(f[4]);
    c.n_test = std::stoi(f[5]);
    report.label_def = f[6];
    report.n_layers = std::max(report.n_layers, c.layer + 1);
    report.n_tokens = std::max(report.n_tokens, c.token + 1);
    report.cells.push_back(std::move(c));
  }
  return report;
}

Json pairwise_to_json(const Eigen::MatrixXd& grid) {
  Json rows = Json::array();
  for (Eigen::Index i = 0; i < grid.rows(); ++i) {
    Json row = Json::array();
    for (Eigen::Index j = 0; j < grid.cols(); ++j) {
      if (std::isnan(grid(i, j))) {
        row.push_back(nullptr);
      } else {
        row.push_back(grid(i, j));
      }
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace orderlab
