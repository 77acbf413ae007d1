#include "orderlab/geometry.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace orderlab {

const Eigen::VectorXd& CentroidSet::of(int group) const {
  for (size_t i = 0; i < groups.size(); ++i) {
    if (groups[i] == group) return centroids[i];
  }
  fail(ErrorCode::kEmptyGroup, "no centroid for group " + std::to_string(group));
}

CentroidSet centroids(const Eigen::MatrixXd& rows, const std::vector<int>& labels, const std::vector<int>& wanted) {
  if (labels.size() != static_cast<size_t>(rows.rows())) {
    fail(ErrorCode::kInvalidArgument, "label count does not match row count");
  }
  CentroidSet out;
  out.groups = wanted;
  std::sort(out.groups.begin(), out.groups.end());
  for (int g : out.groups) {
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(rows.cols());
    int n = 0;
    for (Eigen::Index r = 0; r < rows.rows(); ++r) {
      if (labels[static_cast<size_t>(r)] == g) {
        sum += rows.row(r).transpose();
        ++n;
      }
    }
    if (n == 0) fail(ErrorCode::kEmptyGroup, "group " + std::to_string(g) + " has no samples");
    out.centroids.push_back(sum / n);
    out.counts.push_back(n);
  }
  return out;
}

CentroidSet stage_centroids(const ActivationTensor& acts, int layer, int token, int m) {
  std::vector<int> labels;
  for (const auto& s : acts.index) labels.push_back(s.stage);
  std::vector<int> wanted;
  for (int i = 1; i <= m; ++i) wanted.push_back(i);
  auto out = centroids(acts.slice(layer, token), labels, wanted);
  out.layer = layer;
  out.token = token;
  out.prompt_id = acts.index.empty() ? -1 : acts.index.front().prompt_id;
  return out;
}

Eigen::VectorXd diffmean_axis(const std::vector<VectorPair>& pairs) {
  if (pairs.empty()) fail(ErrorCode::kInvalidArgument, "diffmean_axis needs at least one pair");
  const auto dim = pairs.front().first.size();
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(dim);
  double scale = 0.0;
  for (const auto& [a, b] : pairs) {
    if (a.size() != dim || b.size() != dim) fail(ErrorCode::kInvalidArgument, "pair dimensions differ");
    sum += a - b;
    scale = std::max({scale, a.norm(), b.norm()});
  }
  const Eigen::VectorXd mean = sum / static_cast<double>(pairs.size());
  const double norm = mean.norm();
  if (norm <= 1e-12 * std::max(1.0, scale)) fail(ErrorCode::kZeroVector, "mean difference is numerically zero");
  return mean / norm;
}

Eigen::VectorXd residual_pc_axis(const std::vector<Eigen::VectorXd>& points, const Eigen::VectorXd& x) {
  if (points.size() < 2) fail(ErrorCode::kInvalidArgument, "residual_pc_axis needs at least two centroids");
  const auto dim = x.size();
  Eigen::MatrixXd r(static_cast<Eigen::Index>(points.size()), dim);
  double scale = 0.0;
  for (size_t i = 0; i < points.size(); ++i) {
    const Eigen::VectorXd& p = points[i];
    r.row(static_cast<Eigen::Index>(i)) = (p - p.dot(x) * x).transpose();
    scale = std::max(scale, p.norm());
  }
  r.rowwise() -= r.colwise().mean();
  if (r.norm() <= 1e-10 * std::max(1.0, scale)) {
    fail(ErrorCode::kDegenerateSpread, "centroids have no spread off the x axis");
  }
  // Top right-singular vector of the centered residuals.
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(r, Eigen::ComputeThinV);
  Eigen::VectorXd y = svd.matrixV().col(0);
  y -= y.dot(x) * x;
  y.normalize();
  Eigen::Index arg = 0;
  y.cwiseAbs().maxCoeff(&arg);
  if (y(arg) < 0) y = -y;
  return y;
}

Axis2D make_axis2d(const Eigen::VectorXd& x, const std::vector<Eigen::VectorXd>& points) {
  Axis2D axis;
  axis.x = x.normalized();
  axis.y = residual_pc_axis(points, axis.x);
  return axis;
}

std::vector<std::pair<double, double>> project(const std::vector<Eigen::VectorXd>& vectors, const Axis2D& axis) {
  std::vector<std::pair<double, double>> out;
  out.reserve(vectors.size());
  for (const auto& v : vectors) out.emplace_back(v.dot(axis.x), v.dot(axis.y));
  return out;
}

double kendall_tau(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) fail(ErrorCode::kInvalidArgument, "kendall_tau inputs differ in length");
  if (a.size() < 2) fail(ErrorCode::kInvalidArgument, "kendall_tau needs at least two items");
  long concordant = 0, discordant = 0, ties_a = 0, ties_b = 0;
  const size_t n = a.size();
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = i + 1; j < n; ++j) {
      const double da = a[i] - a[j], db = b[i] - b[j];
      if (da == 0) ++ties_a;
      if (db == 0) ++ties_b;
      if (da == 0 || db == 0) continue;
      if ((da > 0) == (db > 0)) {
        ++concordant;
      } else {
        ++discordant;
      }
    }
  }
  const double n0 = static_cast<double>(n * (n - 1) / 2);
  const double denom = std::sqrt((n0 - static_cast<double>(ties_a)) * (n0 - static_cast<double>(ties_b)));
  return denom > 0 ? static_cast<double>(concordant - discordant) / denom : 0.0;
}

double ordering_score(const std::vector<double>& px, const std::vector<int>& true_order) {
  return kendall_tau(px, std::vector<double>(true_order.begin(), true_order.end()));
}

double collinearity_residual(const std::vector<Eigen::VectorXd>& points) {
  if (points.size() < 3) fail(ErrorCode::kInvalidArgument, "collinearity_residual needs at least three centroids");
  Eigen::MatrixXd r(static_cast<Eigen::Index>(points.size()), points.front().size());
  for (size_t i = 0; i < points.size(); ++i) r.row(static_cast<Eigen::Index>(i)) = points[i].transpose();
  r.rowwise() -= r.colwise().mean();
  const double total = r.squaredNorm();
  if (total <= 0) return 0.0;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(r);
  const double top = svd.singularValues()(0) * svd.singularValues()(0);
  return std::sqrt(std::max(0.0, total - top) / total);
}

Eigen::VectorXd seen_unseen_axis(const std::vector<VectorPair>& unseen_seen) { return diffmean_axis(unseen_seen); }

PcaResult pca(const Eigen::MatrixXd& rows, int k) {
  const auto n = rows.rows(), dim = rows.cols();
  if (k < 1 || k > std::min<Eigen::Index>(n, dim)) {
    fail(ErrorCode::kInvalidArgument, "pca needs 1 <= k <= min(rows, dim)");
  }
  Eigen::MatrixXd centered = rows.rowwise() - rows.colwise().mean();
  const Eigen::MatrixXd cov = centered.transpose() * centered / std::max<double>(1.0, static_cast<double>(n - 1));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  const Eigen::VectorXd vals = eig.eigenvalues().cwiseMax(0.0);
  const double total = vals.sum();
  PcaResult out;
  out.components.resize(k, dim);
  out.explained_ratio.resize(k);
  out.eigenvalues.resize(k);
  for (int i = 0; i < k; ++i) {
    const auto col = dim - 1 - i;
    Eigen::VectorXd v = eig.eigenvectors().col(col);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    out.components.row(i) = v.transpose();
    out.eigenvalues(i) = vals(col);
    out.explained_ratio(i) = total > 0 ? vals(col) / total : 0.0;
  }
  return out;
}

CosineStats cosine_stats(const std::vector<Eigen::MatrixXd>& groups) {
  const auto g = static_cast<Eigen::Index>(groups.size());
  if (g == 0) fail(ErrorCode::kInvalidArgument, "cosine_stats needs at least one group");
  std::vector<Eigen::MatrixXd> unit;
  for (const auto& m : groups) {
    if (m.rows() == 0) fail(ErrorCode::kEmptyGroup, "empty group in cosine_stats");
    Eigen::MatrixXd u = m;
    for (Eigen::Index r = 0; r < u.rows(); ++r) {
      const double n = u.row(r).norm();
      if (n == 0) fail(ErrorCode::kZeroVector, "zero vector in cosine_stats");
      u.row(r) /= n;
    }
    unit.push_back(std::move(u));
  }
  CosineStats out;
  out.within = Eigen::VectorXd::Zero(g);
  out.between = Eigen::MatrixXd::Zero(g, g);
  for (Eigen::Index a = 0; a < g; ++a) {
    for (Eigen::Index b = a; b < g; ++b) {
      const Eigen::MatrixXd sims = unit[static_cast<size_t>(a)] * unit[static_cast<size_t>(b)].transpose();
      double mean = 0.0;
      if (a == b) {
        const auto n = sims.rows();
        // Singleton groups have no distinct pairs; their only similarity is with themselves.
        mean = n > 1 ? (sims.sum() - sims.trace()) / static_cast<double>(n * (n - 1)) : 1.0;
        out.within(a) = mean;
      } else {
        mean = sims.mean();
      }
      out.between(a, b) = mean;
      out.between(b, a) = mean;
    }
  }
  return out;
}

Eigen::MatrixXd probe_cosine_matrix(const std::vector<Eigen::VectorXd>& directions) {
  if (directions.size() < 2) fail(ErrorCode::kInvalidArgument, "probe_cosine_matrix needs at least two probes");
  const auto n = static_cast<Eigen::Index>(directions.size());
  Eigen::MatrixXd u(n, directions.front().size());
  for (Eigen::Index i = 0; i < n; ++i) {
    const double norm = directions[static_cast<size_t>(i)].norm();
    if (norm == 0) fail(ErrorCode::kZeroVector, "zero probe direction");
    u.row(i) = directions[static_cast<size_t>(i)].transpose() / norm;
  }
  return u * u.transpose();
}

void write_projection_csv(const std::filesystem::path& path, const std::vector<ProjectionRow>& rows) {
  std::ostringstream out;
  out << "run,stage,layer,token,px,py\n";
  for (const auto& r : rows) {
    out << r.run << ',' << r.stage << ',' << r.layer << ',' << r.token << ',' << format_double(r.px) << ','
        << format_double(r.py) << '\n';
  }
  write_text_file(path, out.str());
}

std::vector<ProjectionRow> read_projection_csv(const std::filesystem::path& path) {
  std::istringstream in(read_text_file(path));
  std::string line;
  std::getline(in, line);
  std::vector<ProjectionRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_fields(line);
    if (f.size() != 6) fail(ErrorCode::kInvalidArgument, path.string() + ": malformed projection row");
    rows.push_back({f[0], std::stoi(f[1]), std::stoi(f[2]), std::stoi(f[3]), std::stod(f[4]), std::stod(f[5])});
  }
  return rows;
}

}  // namespace orderlab
