#include "orderlab/controls.h"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <sstream>

namespace orderlab {

const std::vector<std::string>& activation_stat_names() {
  static const std::vector<std::string> names = {"l2_norm", "max", "mean", "std", "skewness", "kurtosis"};
  return names;
}

const std::vector<std::string>& logit_stat_names() {
  static const std::vector<std::string> names = {"entropy", "max_logit", "logsumexp", "mean",
                                                 "std",     "skewness",  "kurtosis"};
  return names;
}

const std::vector<std::string>& backward_stat_names() {
  static const std::vector<std::string> names = {"prev_mean_loglik", "prev_cum_entropy", "prev_min_entropy",
                                                 "prev_max_entropy"};
  return names;
}

namespace {

// mean, std, skewness, kurtosis with the degenerate policy applied.
std::array<double, 4> moments(const Eigen::Ref<const Eigen::VectorXd>& v) {
  const double n = static_cast<double>(v.size());
  const double mean = v.mean();
  const Eigen::ArrayXd c = v.array() - mean;
  const double m2 = c.square().sum() / n;
  const double m3 = c.cube().sum() / n;
  const double m4 = c.square().square().sum() / n;
  const double sd = std::sqrt(m2);
  if (sd == 0) return {mean, 0.0, 0.0, 0.0};
  return {mean, sd, m3 / (sd * sd * sd), m4 / (m2 * m2)};
}

double entropy_of_counts(const std::map<int, int>& counts, int total) {
  double h = 0.0;
  for (const auto& [tok, c] : counts) {
    const double p = static_cast<double>(c) / total;
    h -= p * std::log(p);
  }
  return h;
}

template <int N>
double distinct_ngram_ratio(const std::vector<Continuation>& conts) {
  double sum = 0.0;
  int counted = 0;
  for (const auto& c : conts) {
    if (c.tokens.size() < static_cast<size_t>(N)) continue;
    std::set<std::array<int, N>> uniq;
    const size_t total = c.tokens.size() - N + 1;
    for (size_t i = 0; i < total; ++i) {
      std::array<int, N> g;
      for (int k = 0; k < N; ++k) g[static_cast<size_t>(k)] = c.tokens[i + static_cast<size_t>(k)];
      uniq.insert(g);
    }
    sum += static_cast<double>(uniq.size()) / static_cast<double>(total);
    ++counted;
  }
  return counted > 0 ? sum / counted : 1.0;
}

}  // namespace

std::array<double, kNumActivationStats> activation_stats(const Eigen::Ref<const Eigen::VectorXd>& v) {
  if (v.size() < 2) fail(ErrorCode::kInvalidArgument, "activation_stats needs at least two dimensions");
  const auto m = moments(v);
  return {v.norm(), v.maxCoeff(), m[0], m[1], m[2], m[3]};
}

std::array<double, kNumLogitStats> logit_stats(const Eigen::Ref<const Eigen::VectorXd>& z) {
  if (z.size() < 1 || !z.allFinite()) fail(ErrorCode::kNonFiniteFeature, "logits must be finite and nonempty");
  const double mx = z.maxCoeff();
  const Eigen::ArrayXd e = (z.array() - mx).exp();
  const double s = e.sum();
  const double lse = mx + std::log(s);
  const Eigen::ArrayXd logp = z.array() - lse;
  const double entropy = -((e / s) * logp).sum();
  const auto m = moments(z);
  return {entropy, mx, lse, m[0], m[1], m[2], m[3]};
}

std::vector<BackwardStats> backward_stats_all(const LogitSource& model, const std::vector<int>& prompt) {
  if (prompt.size() < 2) fail(ErrorCode::kInvalidArgument, "backward statistics need at least two tokens");
  const Eigen::MatrixXd logits = model.sequence_logits({prompt}).front();
  std::vector<BackwardStats> out;
  double loglik_sum = 0.0, ent_sum = 0.0, ent_min = 0.0, ent_max = 0.0;
  for (size_t p = 1; p < prompt.size(); ++p) {
    const auto row = logits.row(static_cast<Eigen::Index>(p - 1)).transpose();
    const auto st = logit_stats(row);
    const double lse = st[2];
    loglik_sum += row(prompt[p]) - lse;
    const double h = st[0];
    ent_sum += h;
    ent_min = p == 1 ? h : std::min(ent_min, h);
    ent_max = p == 1 ? h : std::max(ent_max, h);
    out.push_back({loglik_sum / static_cast<double>(p), ent_sum, ent_min, ent_max});
  }
  return out;
}

BackwardStats backward_stats(const LogitSource& model, const std::vector<int>& prompt, int position) {
  if (position < 1 || static_cast<size_t>(position) >= prompt.size()) {
    fail(ErrorCode::kInvalidArgument, "backward_stats position must lie in [1, len)");
  }
  const std::vector<int> prefix(prompt.begin(), prompt.begin() + position + 1);
  return backward_stats_all(model, prefix).back();
}

std::vector<std::string> ForwardGenStats::names(const std::vector<int>& horizons) const {
  std::vector<std::string> out;
  for (int h : horizons) out.push_back("gen_entropy_h" + std::to_string(h));
  for (int h : horizons) out.push_back("gen_perplexity_h" + std::to_string(h));
  for (const char* n : {"distinct_bigram", "distinct_trigram", "pairwise_jaccard", "token_entropy", "vocab_fraction",
                        "length_mean", "length_std"}) {
    out.emplace_back(n);
  }
  return out;
}

std::vector<double> ForwardGenStats::values() const {
  std::vector<double> out = horizon_entropy;
  out.insert(out.end(), horizon_perplexity.begin(), horizon_perplexity.end());
  for (double v : {distinct_bigram, distinct_trigram, pairwise_jaccard, token_entropy, vocab_fraction, length_mean,
                   length_std}) {
    out.push_back(v);
  }
  return out;
}

ForwardGenStats summarize_continuations(const std::vector<Continuation>& conts, int vocab_size,
                                        const std::vector<int>& horizons) {
  ForwardGenStats st;
  for (int h : horizons) {
    double ent_sum = 0.0, nll_sum = 0.0;
    int ent_n = 0, nll_n = 0;
    for (const auto& c : conts) {
      const size_t steps = std::min(c.step_entropy.size(), static_cast<size_t>(h));
      for (size_t i = 0; i < steps; ++i) {
        ent_sum += c.step_entropy[i];
        nll_sum -= c.step_logprob[i];
      }
      ent_n += static_cast<int>(steps);
      nll_n += static_cast<int>(steps);
    }
    st.horizon_entropy.push_back(ent_n > 0 ? ent_sum / ent_n : 0.0);
    st.horizon_perplexity.push_back(nll_n > 0 ? std::exp(nll_sum / nll_n) : 1.0);
  }
  st.distinct_bigram = distinct_ngram_ratio<2>(conts);
  st.distinct_trigram = distinct_ngram_ratio<3>(conts);

  std::vector<std::set<int>> sets;
  for (const auto& c : conts) sets.emplace_back(c.tokens.begin(), c.tokens.end());
  if (sets.size() < 2) {
    st.pairwise_jaccard = 1.0;
    st.jaccard_undefined = true;
  } else {
    double sum = 0.0;
    int pairs = 0;
    for (size_t i = 0; i < sets.size(); ++i) {
      for (size_t j = i + 1; j < sets.size(); ++j) {
        std::vector<int> inter, uni;
        std::set_intersection(sets[i].begin(), sets[i].end(), sets[j].begin(), sets[j].end(),
                              std::back_inserter(inter));
        std::set_union(sets[i].begin(), sets[i].end(), sets[j].begin(), sets[j].end(), std::back_inserter(uni));
        sum += uni.empty() ? 1.0 : static_cast<double>(inter.size()) / static_cast<double>(uni.size());
        ++pairs;
      }
    }
    st.pairwise_jaccard = sum / pairs;
  }

  std::map<int, int> counts;
  int total = 0;
  for (const auto& c : conts) {
    for (int t : c.tokens) {
      ++counts[t];
      ++total;
    }
  }
  st.token_entropy = total > 0 ? entropy_of_counts(counts, total) : 0.0;
  st.vocab_fraction = static_cast<double>(counts.size()) / static_cast<double>(vocab_size);
  if (!conts.empty()) {
    Eigen::VectorXd lens(static_cast<Eigen::Index>(conts.size()));
    for (size_t i = 0; i < conts.size(); ++i) lens(static_cast<Eigen::Index>(i)) = static_cast<double>(conts[i].tokens.size());
    st.length_mean = lens.mean();
    st.length_std = std::sqrt((lens.array() - st.length_mean).square().mean());
  }
  return st;
}

ForwardGenStats forward_gen_stats(const LogitSource& model, const std::vector<int>& prompt, int position,
                                  const ForwardGenOptions& options) {
  if (position < 0 || static_cast<size_t>(position) >= prompt.size()) {
    fail(ErrorCode::kInvalidArgument, "forward_gen_stats position out of range");
  }
  GenerateOptions g;
  g.temperature = options.temperature;
  g.max_new_tokens = options.max_tokens;
  g.n_samples = options.n_samples;
  g.seed = options.seed;
  g.end_token = options.end_token;
  const std::vector<int> prefix(prompt.begin(), prompt.begin() + position + 1);
  return summarize_continuations(generate(model, prefix, g), model.vocab_size(), options.horizons);
}

Eigen::MatrixXd StatTable::columns(const std::vector<std::string>& wanted) const {
  Eigen::MatrixXd out(values.rows(), static_cast<Eigen::Index>(wanted.size()));
  for (size_t w = 0; w < wanted.size(); ++w) {
    const auto it = std::find(names.begin(), names.end(), wanted[w]);
    if (it == names.end()) fail(ErrorCode::kInvalidArgument, "unknown statistic '" + wanted[w] + "'");
    out.col(static_cast<Eigen::Index>(w)) = values.col(it - names.begin());
  }
  return out;
}

StatTable activation_stat_table(const ActivationTensor& acts, int layer, int token) {
  StatTable t;
  t.names = activation_stat_names();
  const Eigen::MatrixXd X = acts.slice(layer, token);
  t.values.resize(X.rows(), kNumActivationStats);
  for (Eigen::Index r = 0; r < X.rows(); ++r) {
    const auto st = activation_stats(X.row(r).transpose());
    for (int k = 0; k < kNumActivationStats; ++k) t.values(r, k) = st[static_cast<size_t>(k)];
    t.sample.push_back(static_cast<int>(r));
    t.position.push_back(token);
  }
  return t;
}

void write_stats_csv(const std::filesystem::path& path, const StatTable& table) {
  std::ostringstream out;
  out << "sample,position";
  for (const auto& n : table.names) out << ',' << n;
  out << '\n';
  for (Eigen::Index r = 0; r < table.values.rows(); ++r) {
    out << table.sample[static_cast<size_t>(r)] << ',' << table.position[static_cast<size_t>(r)];
    for (Eigen::Index k = 0; k < table.values.cols(); ++k) out << ',' << format_double(table.values(r, k));
    out << '\n';
  }
  write_text_file(path, out.str());
}

std::string_view bin_strategy_name(BinStrategy s) { return s == BinStrategy::kEqualWidth ? "uniform" : "quantile"; }

BinStrategy parse_bin_strategy(std::string_view s) {
  if (s == "uniform" || s == "equal_width") return BinStrategy::kEqualWidth;
  if (s == "quantile" || s == "equal_count") return BinStrategy::kQuantile;
  fail(ErrorCode::kConfigInvalid, "unknown binning strategy '" + std::string(s) + "'");
}

std::vector<int> BinSpec::bin_of(const Eigen::Ref<const Eigen::RowVectorXd>& row) const {
  std::vector<int> key(edges.size());
  for (size_t k = 0; k < edges.size(); ++k) {
    const auto& e = edges[k];
    const auto pos = std::upper_bound(e.begin(), e.end(), row(static_cast<Eigen::Index>(k))) - e.begin() - 1;
    const auto last = static_cast<std::ptrdiff_t>(e.size()) - 2;
    key[k] = static_cast<int>(std::clamp<std::ptrdiff_t>(pos, 0, last));
  }
  return key;
}

BinSpec make_bin_spec(const Eigen::MatrixXd& stats, const std::vector<std::string>& names, int n_bins,
                      BinStrategy strategy) {
  if (n_bins < 2) fail(ErrorCode::kInvalidArgument, "a bin spec needs N >= 2");
  if (stats.cols() < 1 || static_cast<size_t>(stats.cols()) != names.size()) {
    fail(ErrorCode::kInvalidArgument, "statistic names do not match the stats columns");
  }
  if (stats.rows() == 0) fail(ErrorCode::kInvalidArgument, "no rows to bin");
  if (!stats.allFinite()) fail(ErrorCode::kNonFiniteFeature, "statistics contain NaN or Inf");
  BinSpec spec;
  spec.names = names;
  spec.n_bins = n_bins;
  spec.strategy = strategy;
  for (Eigen::Index k = 0; k < stats.cols(); ++k) {
    std::vector<double> col(stats.col(k).data(), stats.col(k).data() + stats.rows());
    std::sort(col.begin(), col.end());
    const double lo = col.front(), hi = col.back();
    std::vector<double> edges;
    if (hi > lo) {
      for (int i = 0; i <= n_bins; ++i) {
        const double q = static_cast<double>(i) / n_bins;
        double e;
        if (strategy == BinStrategy::kEqualWidth) {
          e = i == n_bins ? hi : lo + (hi - lo) * q;
        } else {
          const double pos = q * static_cast<double>(col.size() - 1);
          const auto lo_i = static_cast<size_t>(std::floor(pos));
          const auto hi_i = std::min(col.size() - 1, lo_i + 1);
          e = col[lo_i] + (pos - static_cast<double>(lo_i)) * (col[hi_i] - col[lo_i]);
        }
        if (edges.empty() || e > edges.back()) edges.push_back(e);
      }
    }
    if (edges.size() < 2) edges = {lo, lo + 1.0};
    spec.edges.push_back(std::move(edges));
  }
  return spec;
}

BalancedSubset balance_subsample(const Eigen::MatrixXd& stats, const std::vector<int>& labels, const BinSpec& spec,
                                 uint64_t seed) {
  if (static_cast<size_t>(stats.rows()) != labels.size()) {
    fail(ErrorCode::kInvalidArgument, "label count differs from stats rows");
  }
  if (static_cast<size_t>(stats.cols()) != spec.edges.size() || spec.edges.empty()) {
    fail(ErrorCode::kInvalidArgument, "bin spec dimension differs from stats columns");
  }
  std::map<std::vector<int>, std::array<std::vector<int>, 2>> bins;
  for (Eigen::Index r = 0; r < stats.rows(); ++r) {
    const int lab = labels[static_cast<size_t>(r)];
    if (lab != 0 && lab != 1) continue;
    bins[spec.bin_of(stats.row(r))][static_cast<size_t>(lab)].push_back(static_cast<int>(r));
  }
  BalancedSubset out;
  out.bins_occupied = static_cast<int>(bins.size());
  std::mt19937_64 rng(seed);
  for (auto& [key, members] : bins) {
    const size_t keep = std::min(members[0].size(), members[1].size());
    if (keep == 0) {
      ++out.bins_dropped;
      continue;
    }
    for (auto& rows : members) {
      std::shuffle(rows.begin(), rows.end(), rng);
      out.indices.insert(out.indices.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(keep));
    }
    out.kept[key] = {static_cast<int>(keep), static_cast<int>(keep)};
  }
  if (out.indices.empty()) fail(ErrorCode::kEmptyResult, "no bin contains both classes");
  std::sort(out.indices.begin(), out.indices.end());
  return out;
}

std::vector<int> random_downsample(const std::vector<int>& labels, int target_per_class, uint64_t seed) {
  std::array<std::vector<int>, 2> rows;
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 0 || labels[i] == 1) rows[static_cast<size_t>(labels[i])].push_back(static_cast<int>(i));
  }
  std::mt19937_64 rng(seed);
  std::vector<int> out;
  for (auto& r : rows) {
    if (target_per_class > static_cast<int>(r.size()) || target_per_class < 0) {
      fail(ErrorCode::kTargetTooLarge, "target " + std::to_string(target_per_class) + " exceeds class size " +
                                           std::to_string(r.size()));
    }
    std::shuffle(r.begin(), r.end(), rng);
    out.insert(out.end(), r.begin(), r.begin() + target_per_class);
  }
  std::sort(out.begin(), out.end());
  return out;
}

Json balance_to_json(const BalancedSubset& subset, const BinSpec& spec) {
  Json bins = Json::array();
  for (const auto& [key, counts] : subset.kept) bins.push_back({{"bin", key}, {"class0", counts[0]}, {"class1", counts[1]}});
  return Json{{"statistics", spec.names},
              {"n_bins", spec.n_bins},
              {"strategy", bin_strategy_name(spec.strategy)},
              {"edges", spec.edges},
              {"bins_occupied", subset.bins_occupied},
              {"bins_dropped", subset.bins_dropped},
              {"retained", bins},
              {"indices", subset.indices}};
}

CompareResult balanced_probe_compare(const Eigen::MatrixXd& X, const Eigen::MatrixXd& stats,
                                     const std::vector<std::string>& stat_names, const std::vector<int>& labels,
                                     const std::vector<int>& groups, const CompareOptions& options) {
  if (X.rows() != stats.rows() || static_cast<size_t>(X.rows()) != labels.size() || labels.size() != groups.size()) {
    fail(ErrorCode::kInvalidArgument, "features, statistics, labels and groups must have equal row counts");
  }
  const auto splits = group_splits(groups, labels, options.n_splits, options.split_ratio, options.seed);
  CompareResult out;
  long n_bal = 0;
  for (size_t s = 0; s < splits.size(); ++s) {
    const auto& split = splits[s];
    const uint64_t split_seed = derive_seed(options.seed, "compare" + std::to_string(s));
    const auto gather = [&](const std::vector<int>& rows, Eigen::MatrixXd& Xo, std::vector<int>& yo) {
      Xo.resize(static_cast<Eigen::Index>(rows.size()), X.cols());
      yo.clear();
      for (size_t i = 0; i < rows.size(); ++i) {
        Xo.row(static_cast<Eigen::Index>(i)) = X.row(rows[i]);
        yo.push_back(labels[static_cast<size_t>(rows[i])]);
      }
    };
    Eigen::MatrixXd Xte, Xtr;
    std::vector<int> yte, ytr;
    gather(split.test, Xte, yte);
    gather(split.train, Xtr, ytr);
    Eigen::MatrixXd Str(static_cast<Eigen::Index>(split.train.size()), stats.cols());
    for (size_t i = 0; i < split.train.size(); ++i) Str.row(static_cast<Eigen::Index>(i)) = stats.row(split.train[i]);

    const auto fit_score = [&](const std::vector<int>& local_rows, uint64_t seed) {
      Eigen::MatrixXd Xs(static_cast<Eigen::Index>(local_rows.size()), X.cols());
      std::vector<int> ys;
      for (size_t i = 0; i < local_rows.size(); ++i) {
        Xs.row(static_cast<Eigen::Index>(i)) = Xtr.row(local_rows[i]);
        ys.push_back(ytr[static_cast<size_t>(local_rows[i])]);
      }
      const auto probe = train_probe(Xs, ys, l2_from_C(options.C, local_rows.size()), seed);
      return eval_probe(probe, Xte, yte);
    };

    const BinSpec spec = make_bin_spec(Str, stat_names, options.n_bins, options.strategy);
    const auto balanced = balance_subsample(Str, ytr, spec, derive_seed(split_seed, "balance"));
    const auto random_rows = random_downsample(ytr, balanced.per_class(), derive_seed(split_seed, "random"));
    std::vector<int> all_rows(split.train.size());
    for (size_t i = 0; i < all_rows.size(); ++i) all_rows[i] = static_cast<int>(i);

    out.balanced += fit_score(balanced.indices, derive_seed(split_seed, "probe_balanced"));
    out.random += fit_score(random_rows, derive_seed(split_seed, "probe_random"));
    out.full += fit_score(all_rows, derive_seed(split_seed, "probe_full"));
    n_bal += static_cast<long>(balanced.indices.size());
    out.n_full = static_cast<int>(split.train.size());
    out.n_test = static_cast<int>(split.test.size());
  }
  const double k = static_cast<double>(splits.size());
  out.balanced /= k;
  out.random /= k;
  out.full /= k;
  out.n_balanced = static_cast<int>(n_bal / static_cast<long>(splits.size()));
  return out;
}

CompareResult balanced_probe_compare(const ActivationTensor& acts, const std::vector<int>& labels, int layer,
                                     int token, const CompareOptions& options) {
  const auto table = activation_stat_table(acts, layer, token);
  return balanced_probe_compare(acts.slice(layer, token), table.values, table.names, labels, entity_groups(acts),
                                options);
}

Json to_json(const CompareResult& r) {
  return Json{{"balanced", r.balanced}, {"random", r.random},   {"full", r.full},
              {"n_balanced", r.n_balanced}, {"n_full", r.n_full}, {"n_test", r.n_test}};
}

}  // namespace orderlab
