#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "orderlab/capture.h"
#include "orderlab/json_config.h"

namespace orderlab {

struct PlantedSpec {
  int m = 6;
  int n_per_stage = 500;
  int dim = 64;
  double spacing = 1.0;      // distance between adjacent planted means
  double noise_sigma = 0.1;
  double curvature = 0.0;    // quadratic bend along a second hidden direction
  int n_layers = 2;
  int n_tokens = 3;
  int signal_layer = 1;
  int signal_token = 2;
};

PlantedSpec parse_planted_spec(StrictObject obj);
Json to_json(const PlantedSpec& s);

struct PlantedData {
  ActivationTensor acts;
  Eigen::VectorXd direction;          // unit vector along which means increase with stage
  std::vector<Eigen::VectorXd> means; // stage 1..m
};

// Stage-i rows at the signal cell ~ N(mu_i, sigma^2 I) with mu_i equally spaced along
// the hidden direction (stage m furthest along it); every other cell is N(0, sigma^2 I).
PlantedData plant_signal(const PlantedSpec& spec, uint64_t seed);

// Sample rows with a binary label.
struct LabeledRows {
  Eigen::MatrixXd X;
  std::vector<int> labels;
  std::vector<int> groups;
};

// Class shows only in the vector norm: x = level * u with u drawn independently of the
// class and level in {low, high}; the high level has probability p_high for class 1
// and 1 - p_high for class 0.
LabeledRows plant_norm_signal(int n_per_class, int dim, double p_high, uint64_t seed);
// The two class means are coordinate permutations of each other, so every
// permutation-invariant statistic has the same distribution in both classes.
LabeledRows plant_orthogonal_signal(int n_per_class, int dim, double separation, uint64_t seed);

// Standard normal CDF.
double normal_cdf(double x);

struct VerifyRow {
  std::string spec;
  std::string check;
  double value = 0.0;
  std::string expectation;
  bool pass = false;
};

struct VerifyCase {
  std::string name;
  PlantedSpec spec;
  enum class Kind { kStrong, kZero, kNormOnly } kind = Kind::kStrong;
};

std::vector<VerifyCase> default_verify_cases();

// Runs centroids -> axis -> projection -> ordering -> probes -> balancing on each
// planted case. With out_dir set, each planted tensor goes through an ACTV write
// and read before analysis.
std::vector<VerifyRow> verify_pipeline(const std::vector<VerifyCase>& cases, uint64_t seed,
                                       const std::filesystem::path& out_dir = {});
Json verify_to_json(const std::vector<VerifyRow>& rows);

}  // namespace orderlab
