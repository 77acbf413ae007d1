#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "orderlab/capture.h"
#include "orderlab/json_config.h"
#include "orderlab/model.h"
#include "orderlab/probes.h"

namespace orderlab {

// ---------------------------------------------------------------- statistics

inline constexpr int kNumActivationStats = 6;
inline constexpr int kNumLogitStats = 7;

const std::vector<std::string>& activation_stat_names();  // l2_norm max mean std skewness kurtosis
const std::vector<std::string>& logit_stat_names();       // entropy max_logit logsumexp mean std skewness kurtosis

// Population moments; kurtosis is non-excess. A zero std gives skewness = kurtosis = 0.
std::array<double, kNumActivationStats> activation_stats(const Eigen::Ref<const Eigen::VectorXd>& v);
std::array<double, kNumLogitStats> logit_stats(const Eigen::Ref<const Eigen::VectorXd>& z);

struct BackwardStats {
  double mean_loglik = 0.0;       // over realized tokens 1..position
  double cumulative_entropy = 0.0;
  double min_entropy = 0.0;
  double max_entropy = 0.0;
};

const std::vector<std::string>& backward_stat_names();
// Uses the predictive distributions at positions 0..position-1.
BackwardStats backward_stats(const LogitSource& model, const std::vector<int>& prompt, int position);
// Same for every position 1..len-1 from a single forward pass; entry p-1 is position p.
std::vector<BackwardStats> backward_stats_all(const LogitSource& model, const std::vector<int>& prompt);

struct ForwardGenOptions {
  int n_samples = 20;
  double temperature = 1.0;
  int max_tokens = 10;
  uint64_t seed = 0;
  int end_token = -1;
  std::vector<int> horizons = {3, 5, 10};
};

struct ForwardGenStats {
  std::vector<double> horizon_entropy;     // mean step entropy within each horizon
  std::vector<double> horizon_perplexity;  // exp(mean NLL of sampled tokens) within each horizon
  double distinct_bigram = 1.0;
  double distinct_trigram = 1.0;
  double pairwise_jaccard = 1.0;
  bool jaccard_undefined = false;  // fewer than two continuations; value set to 1.0
  double token_entropy = 0.0;      // unigram entropy of all generated tokens pooled
  double vocab_fraction = 0.0;     // distinct generated tokens / vocab size
  double length_mean = 0.0;
  double length_std = 0.0;

  std::vector<std::string> names(const std::vector<int>& horizons) const;
  std::vector<double> values() const;
};

// Continues prompt[0..position] and summarizes the continuations.
ForwardGenStats forward_gen_stats(const LogitSource& model, const std::vector<int>& prompt, int position,
                                  const ForwardGenOptions& options);
ForwardGenStats summarize_continuations(const std::vector<Continuation>& conts, int vocab_size,
                                        const std::vector<int>& horizons);

struct StatTable {
  std::vector<std::string> names;
  std::vector<int> sample;
  std::vector<int> position;
  Eigen::MatrixXd values;  // one row per (sample, position)

  Eigen::MatrixXd columns(const std::vector<std::string>& wanted) const;
};

// Activation statistics of one (layer, token) cell, one row per sample.
StatTable activation_stat_table(const ActivationTensor& acts, int layer, int token);
void write_stats_csv(const std::filesystem::path& path, const StatTable& table);

// ---------------------------------------------------------------- balancing

enum class BinStrategy { kEqualWidth, kQuantile };
std::string_view bin_strategy_name(BinStrategy s);
BinStrategy parse_bin_strategy(std::string_view s);

struct BinSpec {
  std::vector<std::string> names;
  int n_bins = 0;
  BinStrategy strategy = BinStrategy::kEqualWidth;
  std::vector<std::vector<double>> edges;  // per dim, strictly increasing

  std::vector<int> bin_of(const Eigen::Ref<const Eigen::RowVectorXd>& row) const;
};

// Edges come from the pooled rows of both classes. Quantile edges that coincide
// are merged; a constant column gets the single bin [v, v + 1].
BinSpec make_bin_spec(const Eigen::MatrixXd& stats, const std::vector<std::string>& names, int n_bins,
                      BinStrategy strategy);

struct BalancedSubset {
  std::vector<int> indices;                              // sorted row indices
  std::map<std::vector<int>, std::array<int, 2>> kept;   // per occupied bin with both classes
  int bins_occupied = 0;
  int bins_dropped = 0;

  int per_class() const { return static_cast<int>(indices.size()) / 2; }
};

// Within every joint bin keeps min(a, b) rows of each class, chosen at random;
// single-class bins are dropped.
BalancedSubset balance_subsample(const Eigen::MatrixXd& stats, const std::vector<int>& labels, const BinSpec& spec,
                                 uint64_t seed);
std::vector<int> random_downsample(const std::vector<int>& labels, int target_per_class, uint64_t seed);
Json balance_to_json(const BalancedSubset& subset, const BinSpec& spec);

struct CompareOptions {
  int n_bins = 15;
  BinStrategy strategy = BinStrategy::kEqualWidth;
  int n_splits = 1;  // accuracies are averaged over this many group splits
  double split_ratio = 0.8;
  double C = 0.1;
  uint64_t seed = 0;
};

struct CompareResult {
  double balanced = 0.0;
  double random = 0.0;
  double full = 0.0;
  int n_balanced = 0;  // rows in the balanced training set (mean over splits, rounded down)
  int n_full = 0;
  int n_test = 0;
};

// Held-out rows are fixed per split before subsampling; the balanced, random
// and full probes are all scored on them.
CompareResult balanced_probe_compare(const Eigen::MatrixXd& X, const Eigen::MatrixXd& stats,
                                     const std::vector<std::string>& stat_names, const std::vector<int>& labels,
                                     const std::vector<int>& groups, const CompareOptions& options);
// Balances on the six activation statistics of the probed cell.
CompareResult balanced_probe_compare(const ActivationTensor& acts, const std::vector<int>& labels, int layer,
                                     int token, const CompareOptions& options);

Json to_json(const CompareResult& r);

}  // namespace orderlab
