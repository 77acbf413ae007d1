#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "orderlab/capture.h"

namespace orderlab {

struct CentroidSet {
  std::vector<int> groups;                 // group labels in ascending order (stages 1..m)
  std::vector<Eigen::VectorXd> centroids;  // parallel to groups
  std::vector<int> counts;
  int layer = -1;
  int token = -1;
  int prompt_id = -1;
  std::string run;

  const Eigen::VectorXd& of(int group) const;
};

// Mean row per requested group. Rows whose label is not requested are ignored.
CentroidSet centroids(const Eigen::MatrixXd& rows, const std::vector<int>& labels, const std::vector<int>& wanted);
// Stage centroids 1..m of one (layer, token) cell.
CentroidSet stage_centroids(const ActivationTensor& acts, int layer, int token, int m);

struct Axis2D {
  Eigen::VectorXd x;
  Eigen::VectorXd y;
};

using VectorPair = std::pair<Eigen::VectorXd, Eigen::VectorXd>;

// normalize(mean(a - b)) over the pairs.
Eigen::VectorXd diffmean_axis(const std::vector<VectorPair>& pairs);
// First principal direction of the centroids after removing their x component.
Eigen::VectorXd residual_pc_axis(const std::vector<Eigen::VectorXd>& points, const Eigen::VectorXd& x);
Axis2D make_axis2d(const Eigen::VectorXd& x, const std::vector<Eigen::VectorXd>& points);

std::vector<std::pair<double, double>> project(const std::vector<Eigen::VectorXd>& vectors, const Axis2D& axis);

// Kendall tau-b between two score lists.
double kendall_tau(const std::vector<double>& a, const std::vector<double>& b);
double ordering_score(const std::vector<double>& px, const std::vector<int>& true_order);

// sqrt(residual variance off the principal line / total variance).
double collinearity_residual(const std::vector<Eigen::VectorXd>& points);

// diffmean over (unseen, seen) centroid pairs.
Eigen::VectorXd seen_unseen_axis(const std::vector<VectorPair>& unseen_seen);

struct PcaResult {
  Eigen::MatrixXd components;  // k x dim, orthonormal rows
  Eigen::VectorXd explained_ratio;
  Eigen::VectorXd eigenvalues;
};

PcaResult pca(const Eigen::MatrixXd& rows, int k);

struct CosineStats {
  Eigen::VectorXd within;   // per group, self-pairs excluded
  Eigen::MatrixXd between;  // group x group mean cosine; diagonal equals within
};

CosineStats cosine_stats(const std::vector<Eigen::MatrixXd>& groups);
Eigen::MatrixXd probe_cosine_matrix(const std::vector<Eigen::VectorXd>& directions);

struct ProjectionRow {
  std::string run;
  int stage = 0;
  int layer = 0;
  int token = 0;
  double px = 0.0;
  double py = 0.0;
};

void write_projection_csv(const std::filesystem::path& path, const std::vector<ProjectionRow>& rows);
std::vector<ProjectionRow> read_projection_csv(const std::filesystem::path& path);

}  // namespace orderlab
