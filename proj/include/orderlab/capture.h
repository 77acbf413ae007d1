#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "orderlab/datagen.h"
#include "orderlab/model.h"

namespace orderlab {

struct SampleIndex {
  int entity_id = 0;
  int stage = 0;  // 0 = never trained on
  ProbeSplit probe_split = ProbeSplit::kTrain;
  int prompt_id = 0;
};

// Post-block residual activations, laid out [sample][layer][token][dim].
struct ActivationTensor {
  int n_samples = 0;
  int n_layers = 0;
  int n_tokens = 0;
  int d_model = 0;
  std::vector<float> data;
  std::vector<SampleIndex> index;
  std::string fingerprint;

  size_t offset(int sample, int layer, int token) const {
    return ((static_cast<size_t>(sample) * n_layers + layer) * n_tokens + token) * static_cast<size_t>(d_model);
  }
  // [n_samples x d_model], rows in index order.
  Eigen::MatrixXd slice(int layer, int token) const;
  // Same cell restricted to the given sample rows.
  Eigen::MatrixXd slice(int layer, int token, const std::vector<int>& rows) const;
};

ActivationTensor capture_activations(const Model& model, const std::vector<QASample>& prompts, int prompt_id,
                                     int batch_size = 64);

void write_activations(const ActivationTensor& acts, const std::filesystem::path& path);

struct LoadedActivations {
  ActivationTensor tensor;
  bool fingerprint_mismatch = false;
};

// expected_fingerprint empty skips the comparison.
LoadedActivations read_activations(const std::filesystem::path& path, const std::string& expected_fingerprint = "");

std::filesystem::path index_path(const std::filesystem::path& actv_path);
std::filesystem::path activation_path(const std::filesystem::path& run_dir, const std::string& checkpoint,
                                      int prompt_id);

}  // namespace orderlab
