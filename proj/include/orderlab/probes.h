#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "orderlab/capture.h"
#include "orderlab/json_config.h"

namespace orderlab {

struct ProbeModel {
  Eigen::VectorXd weights;
  double bias = 0.0;
  double l2 = 0.0;
  int iterations = 0;
  double grad_norm = 0.0;
  bool converged = false;
};

// Penalty on the mean loss matching inverse regularization strength C over n rows.
inline double l2_from_C(double C, size_t n) { return 1.0 / (C * static_cast<double>(n)); }

struct SolverOptions {
  double tolerance = 1e-6;
  int max_iterations = 1000;
  bool random_init = false;  // start from N(0, 1) weights drawn from the seed instead of zeros
};

// Minimizes mean logistic loss + (l2/2)|w|^2 (bias unpenalized) by damped Newton.
ProbeModel train_probe(const Eigen::MatrixXd& X, const std::vector<int>& y, double l2, uint64_t seed,
                       const SolverOptions& options = {});
double probe_objective(const ProbeModel& probe, const Eigen::MatrixXd& X, const std::vector<int>& y);
double eval_probe(const ProbeModel& probe, const Eigen::MatrixXd& X, const std::vector<int>& y);

struct RowSplit {
  std::vector<int> train;
  std::vector<int> test;
};

// Random group-level splits stratified by class. Every row of a group lands on
// the same side; rows with a negative label are left out.
std::vector<RowSplit> group_splits(const std::vector<int>& group_of_row, const std::vector<int>& label_of_row,
                                   int n_splits, double ratio, uint64_t seed);

struct ProbeOptions {
  int n_splits = 5;
  double split_ratio = 0.8;
  double C = 0.1;
  uint64_t seed = 0;
};

ProbeOptions parse_probe_options(StrictObject obj);
Json to_json(const ProbeOptions& o);

struct ProbeCell {
  int layer = 0;
  int token = 0;
  double acc_mean = 0.0;
  double acc_std = 0.0;
  int n_train = 0;
  int n_test = 0;
  std::vector<double> accuracies;  // one per split
  Eigen::VectorXd direction;       // unit weight vector of the first split
};

struct ProbeReport {
  int n_layers = 0;
  int n_tokens = 0;
  std::string label_def;
  std::vector<ProbeCell> cells;  // layer-major

  const ProbeCell& cell(int layer, int token) const {
    return cells.at(static_cast<size_t>(layer) * static_cast<size_t>(n_tokens) + static_cast<size_t>(token));
  }
  const ProbeCell& best() const;
  double max_accuracy() const { return best().acc_mean; }
};

// One probe per (layer, token, split); the same splits are shared by every cell.
ProbeReport probe_grid(const ActivationTensor& acts, const std::vector<int>& labels, const std::vector<int>& groups,
                       const ProbeOptions& options, const std::string& label_def);

// Labels stage a -> 0, stage b -> 1, everything else excluded; groups are entities.
std::vector<int> stage_pair_labels(const ActivationTensor& acts, int stage_a, int stage_b);
std::vector<int> entity_groups(const ActivationTensor& acts);

// m x m matrix; entry (i-1, j-1) for i < j holds the D_i vs D_j accuracy at one cell,
// other entries are NaN.
Eigen::MatrixXd pairwise_stage_grid(const ActivationTensor& acts, int m, int layer, int token,
                                    const ProbeOptions& options);

void write_probe_csv(const std::filesystem::path& path, const ProbeReport& report);
ProbeReport read_probe_csv(const std::filesystem::path& path);
Json pairwise_to_json(const Eigen::MatrixXd& grid);

}  // namespace orderlab
