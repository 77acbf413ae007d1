#include <cmath>
#include <random>

#include "doctest.h"
#include "orderlab/geometry.h"
#include "orderlab/oracle.h"

using namespace orderlab;

namespace {

// Tau-b straight from the pair definition.
double brute_tau_b(const std::vector<double>& a, const std::vector<double>& b) {
  double conc = 0, disc = 0, ties_a = 0, ties_b = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    for (size_t j = i + 1; j < a.size(); ++j) {
      const double da = a[i] - a[j], db = b[i] - b[j];
      if (da == 0 && db == 0) continue;
      if (da == 0) {
        ties_a++;
      } else if (db == 0) {
        ties_b++;
      } else if (da * db > 0) {
        conc++;
      } else {
        disc++;
      }
    }
  }
  return (conc - disc) / std::sqrt((conc + disc + ties_a) * (conc + disc + ties_b));
}

Eigen::VectorXd vec(std::initializer_list<double> v) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

}  // namespace

TEST_CASE("centroids of one and two samples") {
  Eigen::MatrixXd rows(3, 2);
  rows << 1, 2, 3, 4, 5, 8;
  const auto c = centroids(rows, {1, 2, 2}, {1, 2});
  CHECK(c.of(1) == vec({1, 2}));
  CHECK(c.of(2).isApprox(vec({4, 6})));
  try {
    centroids(rows, {1, 1, 1}, {1, 2});
    FAIL("expected EmptyGroup");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kEmptyGroup);
  }
}

TEST_CASE("planted centroids sit within 5 sigma / sqrt(n) of the planted means") {
  PlantedSpec spec;
  spec.noise_sigma = 0.1;
  const auto planted = plant_signal(spec, 4);
  const auto c = stage_centroids(planted.acts, spec.signal_layer, spec.signal_token, spec.m);
  const double tol = 5 * spec.noise_sigma / std::sqrt(static_cast<double>(spec.n_per_stage));
  for (int i = 1; i <= spec.m; ++i) {
    const Eigen::VectorXd diff = c.of(i) - planted.means[static_cast<size_t>(i - 1)];
    CHECK(diff.cwiseAbs().maxCoeff() <= tol);
  }
}

TEST_CASE("diffmean axis") {
  const auto a = vec({3, 0, 4}), b = vec({0, 0, 0});
  CHECK(diffmean_axis({{a, b}}).isApprox(vec({0.6, 0, 0.8})));
  try {
    diffmean_axis({{a, a}});
    FAIL("expected ZeroVector");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kZeroVector);
  }
  // Eight pairs average before normalizing.
  std::vector<VectorPair> pairs;
  for (int k = 0; k < 8; ++k) pairs.emplace_back(vec({1.0 + k, 1, 0}), vec({0, 0, 0}));
  const Eigen::VectorXd mean = vec({4.5, 1, 0});
  CHECK(diffmean_axis(pairs).isApprox(mean.normalized()));
}

TEST_CASE("residual principal component") {
  const auto x = vec({1, 0, 0});
  try {
    residual_pc_axis({vec({0, 1, 1}), vec({2, 1, 1}), vec({5, 1, 1})}, x);
    FAIL("expected DegenerateSpread");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kDegenerateSpread);
  }
  // Plane spanned by x and (0, 1, 1)/sqrt2.
  const Eigen::VectorXd u = vec({0, 1, 1}).normalized();
  std::vector<Eigen::VectorXd> pts;
  for (int i = 0; i < 5; ++i) pts.push_back(i * x + (i * i - 2.0) * u);
  const auto y = residual_pc_axis(pts, x);
  CHECK(std::abs(y.dot(u)) >= 0.999);
  CHECK(std::abs(y.dot(x)) <= 1e-6);
}

TEST_CASE("projection") {
  const Axis2D axis{vec({1, 0, 0}), vec({0, 1, 0})};
  const auto p = project({axis.x, axis.y, vec({2, 3, 7}), vec({2.5, 3, 7})}, axis);
  CHECK(p[0] == std::make_pair(1.0, 0.0));
  CHECK(p[1] == std::make_pair(0.0, 1.0));
  CHECK(p[3].first - p[2].first == doctest::Approx(0.5));
}

TEST_CASE("kendall tau") {
  CHECK(ordering_score({1, 2, 3, 4, 5, 6}, {1, 2, 3, 4, 5, 6}) == 1.0);
  CHECK(ordering_score({6, 5, 4, 3, 2, 1}, {1, 2, 3, 4, 5, 6}) == -1.0);
  // One adjacent swap flips one of 15 pairs: (14 - 1) / 15.
  const std::vector<double> swapped{1, 2, 4, 3, 5, 6};
  CHECK(ordering_score(swapped, {1, 2, 3, 4, 5, 6}) == doctest::Approx(13.0 / 15.0));
  CHECK(kendall_tau(swapped, {1, 2, 3, 4, 5, 6}) == doctest::Approx(brute_tau_b(swapped, {1, 2, 3, 4, 5, 6})));

  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> d(0, 4);
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<double> a, b;
    for (int i = 0; i < 12; ++i) {
      a.push_back(d(rng));
      b.push_back(d(rng));
    }
    CHECK(kendall_tau(a, b) == doctest::Approx(brute_tau_b(a, b)).epsilon(1e-12));
  }
}

TEST_CASE("collinearity residual") {
  std::vector<Eigen::VectorXd> line;
  for (int i = 0; i < 6; ++i) line.push_back(vec({1.0 * i, 2.0 * i, -1.0 * i}));
  CHECK(collinearity_residual(line) <= 1e-12);

  // Equilateral triangle: both in-plane variances are equal, so the residual
  // fraction of squared spread is 1/2.
  const double h = std::sqrt(3.0) / 2;
  const std::vector<Eigen::VectorXd> tri{vec({0, 0}), vec({1, 0}), vec({0.5, h})};
  CHECK(collinearity_residual(tri) == doctest::Approx(std::sqrt(0.5)).epsilon(1e-12));

  PlantedSpec spec;
  spec.curvature = 0.0;
  double prev = 1e9;
  for (double sigma : {0.4, 0.1, 0.02}) {
    spec.noise_sigma = sigma;
    const auto planted = plant_signal(spec, 12);
    const auto c = stage_centroids(planted.acts, spec.signal_layer, spec.signal_token, spec.m);
    const double r = collinearity_residual(c.centroids);
    CHECK(r < prev);
    prev = r;
  }
}

TEST_CASE("seen/unseen axis") {
  CHECK(seen_unseen_axis({{vec({2, 0}), vec({0, 0})}}).isApprox(vec({1, 0})));
  try {
    seen_unseen_axis({{vec({1, 1}), vec({1, 1})}});
    FAIL("expected ZeroVector");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kZeroVector);
  }
}

TEST_CASE("PCA") {
  Eigen::MatrixXd rank1(50, 4);
  for (int i = 0; i < 50; ++i) rank1.row(i) = (i - 20.0) * vec({1, 2, 3, 4}).transpose();
  CHECK(pca(rank1, 2).explained_ratio(0) == doctest::Approx(1.0).epsilon(1e-12));

  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0, 1);
  Eigen::MatrixXd iso(10000, 10);
  for (Eigen::Index i = 0; i < iso.size(); ++i) iso.data()[i] = n(rng);
  const auto r = pca(iso, 10);
  for (int k = 0; k < 10; ++k) CHECK(std::abs(r.explained_ratio(k) - 0.1) <= 0.02);
  for (int k = 1; k < 10; ++k) CHECK(r.explained_ratio(k) <= r.explained_ratio(k - 1));
  const Eigen::MatrixXd gram = r.components * r.components.transpose();
  CHECK((gram - Eigen::MatrixXd::Identity(10, 10)).cwiseAbs().maxCoeff() <= 1e-6);

  // Eigenvalues agree with the sample covariance computed directly.
  const Eigen::MatrixXd centered = iso.rowwise() - iso.colwise().mean();
  const Eigen::MatrixXd cov = centered.transpose() * centered / (iso.rows() - 1);
  CHECK(r.eigenvalues.sum() == doctest::Approx(cov.trace()).epsilon(1e-10));
}

TEST_CASE("cosine statistics") {
  Eigen::MatrixXd same(3, 2);
  same << 1, 1, 1, 1, 1, 1;
  const auto s = cosine_stats({same, same});
  CHECK(s.within(0) == doctest::Approx(1.0));
  CHECK(s.between(0, 1) == doctest::Approx(1.0));

  Eigen::MatrixXd ga(2, 2), gb(2, 2);
  ga << 1, 0, 2, 0;
  gb << 0, 1, 0, 3;
  CHECK(cosine_stats({ga, gb}).between(0, 1) == doctest::Approx(0.0));

  // Directions from unrelated random probes are close to orthogonal.
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0, 1);
  std::vector<Eigen::VectorXd> dirs;
  for (int k = 0; k < 4; ++k) {
    Eigen::VectorXd v(128);
    for (int i = 0; i < 128; ++i) v(i) = n(rng);
    dirs.push_back(v.normalized());
  }
  const auto M = probe_cosine_matrix(dirs);
  for (int a = 0; a < 4; ++a) {
    for (int b = 0; b < 4; ++b) {
      if (a != b) CHECK(std::abs(M(a, b)) < 0.35);
    }
  }
}

TEST_CASE("projection CSV round trip") {
  const std::vector<ProjectionRow> rows{{"final/p1", 1, 3, 10, -0.25, 1e-17}, {"final/p1", 2, 3, 10, 0.1, 3.0}};
  const auto path = std::filesystem::temp_directory_path() / "orderlab_proj.csv";
  write_projection_csv(path, rows);
  const auto back = read_projection_csv(path);
  REQUIRE(back.size() == 2u);
  CHECK(back[0].run == "final/p1");
  CHECK(back[0].py == 1e-17);
  CHECK(back[1].px == 0.1);
  std::filesystem::remove(path);
}
