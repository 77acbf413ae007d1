#include <cmath>
#include <random>

#include "doctest.h"
#include "orderlab/controls.h"
#include "orderlab/oracle.h"

using namespace orderlab;

namespace {

class UniformModel : public LogitSource {
 public:
  explicit UniformModel(int vocab) : vocab_(vocab) {}
  int vocab_size() const override { return vocab_; }
  std::vector<Eigen::MatrixXd> sequence_logits(const std::vector<std::vector<int>>& seqs) const override {
    std::vector<Eigen::MatrixXd> out;
    for (const auto& s : seqs) out.push_back(Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(s.size()), vocab_));
    return out;
  }

 private:
  int vocab_;
};

class RepeatModel : public LogitSource {
 public:
  int vocab_size() const override { return 6; }
  std::vector<Eigen::MatrixXd> sequence_logits(const std::vector<std::vector<int>>& seqs) const override {
    std::vector<Eigen::MatrixXd> out;
    for (const auto& s : seqs) {
      Eigen::MatrixXd m = Eigen::MatrixXd::Constant(static_cast<Eigen::Index>(s.size()), 6, -1e9);
      m.col(3).setZero();
      out.push_back(m);
    }
    return out;
  }
};

// Moments written out term by term.
struct Direct {
  double mean = 0, sd = 0, skew = 0, kurt = 0;
  explicit Direct(const std::vector<double>& v) {
    const double n = static_cast<double>(v.size());
    for (double x : v) mean += x / n;
    double m2 = 0, m3 = 0, m4 = 0;
    for (double x : v) {
      m2 += std::pow(x - mean, 2) / n;
      m3 += std::pow(x - mean, 3) / n;
      m4 += std::pow(x - mean, 4) / n;
    }
    sd = std::sqrt(m2);
    skew = m3 / std::pow(m2, 1.5);
    kurt = m4 / (m2 * m2);
  }
};

Eigen::VectorXd vec(const std::vector<double>& v) { return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())); }

}  // namespace

TEST_CASE("activation statistics against direct definitions") {
  const auto c = activation_stats(Eigen::VectorXd::Constant(16, 2.5));
  CHECK(c[0] == doctest::Approx(2.5 * 4.0).epsilon(1e-12));
  CHECK(c[1] == 2.5);
  CHECK(c[2] == doctest::Approx(2.5));
  CHECK(c[3] == 0.0);
  CHECK(c[4] == 0.0);
  CHECK(c[5] == 0.0);

  const std::vector<double> v{1, 2, 3, 4};
  const auto s = activation_stats(vec(v));
  const Direct d(v);
  CHECK(std::abs(s[0] - std::sqrt(30.0)) <= 1e-10);
  CHECK(s[1] == 4.0);
  CHECK(std::abs(s[2] - d.mean) <= 1e-10);
  CHECK(std::abs(s[3] - d.sd) <= 1e-10);
  CHECK(std::abs(s[4] - d.skew) <= 1e-10);
  CHECK(std::abs(s[5] - d.kurt) <= 1e-10);
  CHECK(std::abs(s[5] - 1.64) <= 1e-10);  // (2*1.5^4 + 2*0.5^4)/4 / 1.25^2

  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0, 2);
  std::vector<double> sym;
  for (int i = 0; i < 20; ++i) {
    const double x = n(rng);
    sym.push_back(x);
    sym.push_back(-x);
  }
  CHECK(std::abs(activation_stats(vec(sym))[4]) <= 1e-12);

  std::vector<double> rnd;
  for (int i = 0; i < 128; ++i) rnd.push_back(n(rng) + 0.3 * i);
  const auto r = activation_stats(vec(rnd));
  const Direct dr(rnd);
  CHECK(std::abs(r[3] - dr.sd) <= 1e-10);
  CHECK(std::abs(r[4] - dr.skew) <= 1e-10);
  CHECK(std::abs(r[5] - dr.kurt) <= 1e-10);
}

TEST_CASE("logit statistics") {
  const auto u = logit_stats(Eigen::VectorXd::Zero(50));
  CHECK(std::abs(u[0] - std::log(50.0)) <= 1e-12);

  Eigen::VectorXd peaked = Eigen::VectorXd::Zero(10);
  peaked(3) = 60.0;
  CHECK(logit_stats(peaked)[0] < 1e-20);

  const auto z = logit_stats(vec({0.0, std::log(3.0)}));
  CHECK(std::abs(z[0] - (std::log(4.0) - 0.75 * std::log(3.0))) <= 1e-12);
  CHECK(std::abs(z[2] - std::log(4.0)) <= 1e-12);
  CHECK(std::abs(z[1] - std::log(3.0)) <= 1e-15);
}

TEST_CASE("backward statistics") {
  const UniformModel uni(20);
  const std::vector<int> prompt{1, 4, 7, 2, 9};
  const auto first = backward_stats(uni, prompt, 1);
  CHECK(std::abs(first.mean_loglik + std::log(20.0)) <= 1e-12);
  CHECK(std::abs(first.cumulative_entropy - std::log(20.0)) <= 1e-12);
  CHECK(first.min_entropy == first.max_entropy);

  const auto model = Model::init([] {
    ModelConfig c;
    c.n_layers = 1;
    c.d_model = 16;
    c.n_heads = 2;
    c.d_ff = 32;
    c.vocab_size = 12;
    return c;
  }(), 4);
  const auto all = backward_stats_all(model, {2, 5, 3, 8, 1, 6});
  for (size_t i = 1; i < all.size(); ++i) {
    CHECK(all[i].cumulative_entropy >= all[i - 1].cumulative_entropy);
    CHECK(all[i].min_entropy <= all[i - 1].min_entropy);
    CHECK(all[i].max_entropy >= all[i - 1].max_entropy);
  }
}

TEST_CASE("forward-generation statistics") {
  ForwardGenOptions opt;
  opt.n_samples = 20;
  opt.max_tokens = 10;
  opt.seed = 3;
  const auto uni = forward_gen_stats(UniformModel(16), {1, 2, 3}, 2, opt);
  CHECK(std::abs(uni.horizon_entropy[0] - std::log(16.0)) <= 1e-12);
  CHECK(std::abs(uni.horizon_perplexity[0] - 16.0) <= 1e-9);

  const auto rep = forward_gen_stats(RepeatModel(), {1, 2, 3}, 2, opt);
  CHECK(rep.pairwise_jaccard == 1.0);
  CHECK(rep.distinct_bigram == doctest::Approx(1.0 / 9.0));
  CHECK(rep.distinct_trigram == doctest::Approx(1.0 / 8.0));
  CHECK(rep.token_entropy == 0.0);

  opt.n_samples = 1;
  const auto single = forward_gen_stats(UniformModel(16), {1, 2}, 1, opt);
  CHECK(single.jaccard_undefined);
  CHECK(single.pairwise_jaccard == 1.0);
  CHECK(single.values().size() == single.names(opt.horizons).size());
}

TEST_CASE("bin edges") {
  Eigen::MatrixXd s(5, 2);
  s << 0, 7, 1, 7, 2, 7, 3, 7, 4, 7;
  const auto w = make_bin_spec(s, {"a", "b"}, 4, BinStrategy::kEqualWidth);
  CHECK(w.edges[0] == std::vector<double>{0, 1, 2, 3, 4});
  CHECK(w.edges[1] == std::vector<double>{7, 8});
  CHECK(w.bin_of(s.row(4)) == std::vector<int>{3, 0});
  CHECK(w.bin_of(Eigen::RowVector2d(100, -5)) == std::vector<int>{3, 0});

  Eigen::MatrixXd q(6, 1);
  q << 0, 0, 0, 0, 1, 10;
  const auto qs = make_bin_spec(q, {"a"}, 3, BinStrategy::kQuantile);
  // Type-7 quantiles at 1/3 and 2/3 are 0 and 0 + (2/3*5 - 3) = 1/3.
  CHECK(qs.edges[0].size() == 3u);
  CHECK(qs.edges[0][1] == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("balancing equalizes every occupied bin") {
  // k = 1, N = 2: class 0 counts [3, 1], class 1 counts [1, 3].
  Eigen::MatrixXd s(8, 1);
  s << 0, 0, 0, 1, 0, 1, 1, 1;
  const std::vector<int> y{0, 0, 0, 0, 1, 1, 1, 1};
  const auto spec = make_bin_spec(s, {"x"}, 2, BinStrategy::kEqualWidth);
  const auto b = balance_subsample(s, y, spec, 1);
  CHECK(b.indices.size() == 4u);
  CHECK(b.per_class() == 2);
  for (const auto& [key, counts] : b.kept) CHECK(counts == std::array<int, 2>{1, 1});

  const auto again = balance_subsample(s, y, spec, 1);
  CHECK(again.indices == b.indices);

  Eigen::MatrixXd sep(4, 1);
  sep << 0, 0, 1, 1;
  try {
    balance_subsample(sep, {0, 0, 1, 1}, make_bin_spec(sep, {"x"}, 2, BinStrategy::kEqualWidth), 1);
    FAIL("expected EmptyResult");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kEmptyResult);
  }

  // Identically distributed classes keep almost everything.
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0, 1);
  Eigen::MatrixXd g(2000, 1);
  std::vector<int> gy;
  for (int i = 0; i < 2000; ++i) {
    g(i, 0) = n(rng);
    gy.push_back(i % 2);
  }
  const auto gb = balance_subsample(g, gy, make_bin_spec(g, {"x"}, 5, BinStrategy::kQuantile), 2);
  CHECK(gb.indices.size() >= 1800u);
}

TEST_CASE("random downsampling") {
  std::vector<int> y(20);
  for (int i = 0; i < 20; ++i) y[static_cast<size_t>(i)] = i % 2;
  const auto r = random_downsample(y, 4, 3);
  CHECK(r.size() == 8u);
  int ones = 0;
  for (int i : r) ones += y[static_cast<size_t>(i)];
  CHECK(ones == 4);
  CHECK(random_downsample(y, 4, 3) == r);
  auto full = random_downsample(y, 10, 3);
  CHECK(full.size() == 20u);
  try {
    random_downsample(y, 11, 3);
    FAIL("expected TargetTooLarge");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kTargetTooLarge);
  }
}

TEST_CASE("balanced comparison separates statistic-borne from orthogonal signal") {
  const auto norm = plant_norm_signal(2000, 32, 0.95, 4);
  Eigen::MatrixXd norms(norm.X.rows(), 1);
  for (Eigen::Index r = 0; r < norm.X.rows(); ++r) norms(r, 0) = norm.X.row(r).norm();
  CompareOptions opt;
  opt.n_bins = 5;
  opt.n_splits = 3;
  opt.seed = 1;
  const auto nr = balanced_probe_compare(norm.X, norms, {"l2_norm"}, norm.labels, norm.groups, opt);
  CHECK(nr.random >= 0.9);
  CHECK(nr.balanced <= 0.55);

  const auto orth = plant_orthogonal_signal(2000, 32, 1.5, 4);
  Eigen::MatrixXd stats(orth.X.rows(), kNumActivationStats);
  for (Eigen::Index r = 0; r < orth.X.rows(); ++r) {
    const auto st = activation_stats(orth.X.row(r).transpose());
    for (int k = 0; k < kNumActivationStats; ++k) stats(r, k) = st[static_cast<size_t>(k)];
  }
  opt.n_bins = 3;
  const auto orr = balanced_probe_compare(orth.X, stats, activation_stat_names(), orth.labels, orth.groups, opt);
  CHECK(std::abs(orr.balanced - orr.random) <= 0.03);
}
