#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "orderlab/datagen.h"
#include "orderlab/json_config.h"

namespace orderlab {

struct ModelConfig {
  int n_layers = 4;
  int d_model = 128;
  int n_heads = 4;
  int d_ff = 512;
  int vocab_size = 0;
  int max_context = 48;

  void validate() const;
  // V*d + C*d + L*(4d + 4d^2 + 4d + 2*d*f + f + d) + 2d + d*V
  size_t parameter_count() const;
};

ModelConfig parse_model_config(StrictObject obj, int vocab_size);
Json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const Json& j);

struct ParamInfo {
  std::string name;
  int rows = 0;
  int cols = 0;
  size_t offset = 0;
  size_t size() const { return static_cast<size_t>(rows) * static_cast<size_t>(cols); }
};

// Every parameter tensor lives in one flat buffer in this order.
std::vector<ParamInfo> parameter_layout(const ModelConfig& config);

// Right-padded token batch; row b*length + t holds sequence b, position t.
struct TokenBatch {
  int batch = 0;
  int length = 0;
  std::vector<int> tokens;
  std::vector<int> lengths;
};

TokenBatch make_batch(const std::vector<std::vector<int>>& sequences, int pad_token);

// Anything that can score sequences; the model and the test stubs implement it.
class LogitSource {
 public:
  virtual ~LogitSource() = default;
  virtual int vocab_size() const = 0;
  // One [len_i x vocab] matrix per sequence; row t predicts token t+1.
  virtual std::vector<Eigen::MatrixXd> sequence_logits(const std::vector<std::vector<int>>& sequences) const = 0;
};

// Eigen-aligned so vectorized kernels see the same alignment on every run.
template <typename Scalar>
using ParamVector = std::vector<Scalar, Eigen::aligned_allocator<Scalar>>;

// Pre-LayerNorm decoder-only transformer with learned absolute positions and a
// hand-written backward pass. Scalar is float for real runs and double for
// finite-difference checks.
template <typename Scalar>
class Transformer : public LogitSource {
 public:
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  struct ForwardOutput {
    Matrix logits;                     // [batch*length, vocab] when requested
    std::vector<Matrix> activations;   // per block: residual stream [batch*length, d_model]
  };

  Transformer() = default;
  Transformer(ModelConfig config, ParamVector<Scalar> params);

  // Normal(0, 0.02) for embeddings and input projections, Normal(0, 0.02/sqrt(2L))
  // for the two residual output projections, zeros for biases, unit LN gains.
  static Transformer init(const ModelConfig& config, uint64_t seed);

  const ModelConfig& config() const { return config_; }
  const ParamVector<Scalar>& params() const { return params_; }
  ParamVector<Scalar>& params() { return params_; }

  ForwardOutput forward(const TokenBatch& batch, bool want_logits, bool want_activations) const;

  // Mean cross-entropy over positions whose target is >= 0 (targets has one
  // entry per batch row). Writes d(loss)/d(params) into grad when non-null.
  double loss_and_grad(const TokenBatch& batch, const std::vector<int>& targets, ParamVector<Scalar>* grad) const;

  int vocab_size() const override { return config_.vocab_size; }
  std::vector<Eigen::MatrixXd> sequence_logits(const std::vector<std::vector<int>>& sequences) const override;

 private:
  struct Cache;
  void run_forward(const TokenBatch& batch, Cache& cache, bool keep_for_backward) const;

  ModelConfig config_;
  ParamVector<Scalar> params_;
  std::vector<ParamInfo> layout_;
};

extern template class Transformer<float>;
extern template class Transformer<double>;

using Model = Transformer<float>;

template <typename To, typename From>
Transformer<To> cast_model(const Transformer<From>& m) {
  ParamVector<To> p(m.params().begin(), m.params().end());
  return Transformer<To>(m.config(), std::move(p));
}

// ------------------------------------------------------------------ training

enum class LossMask { kAnswerOnly, kAllTokens };

struct TrainConfig {
  double learning_rate = 1e-3;
  int batch_size = 32;
  int epochs = 5;
  double weight_decay = 0.0;
  LossMask loss_mask = LossMask::kAnswerOnly;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;  // global-norm clip; 0 disables
  uint64_t seed = 0;
};

TrainConfig parse_train_config(StrictObject obj);
Json to_json(const TrainConfig& c);

struct HistoryEntry {
  std::string label;
  int epochs = 0;
  Json settings = Json::object();
};

struct Checkpoint {
  Model model;
  std::vector<HistoryEntry> history;
};

Checkpoint init_model(const ModelConfig& config, uint64_t seed);

struct StageResult {
  std::string label;
  int epochs = 0;
  int steps = 0;
  std::vector<double> epoch_mean_loss;
};

// Inputs are prompt+answer minus the last token; targets the sequence shifted by one.
void build_training_batch(const std::vector<const QASample*>& samples, LossMask mask, int pad_token,
                          TokenBatch& batch, std::vector<int>& targets);

// Called after every completed epoch (1-based) with the current parameters.
using EpochCallback = std::function<void(int epoch, const Model& model)>;

// Fresh Adam state per call; data order reshuffled every epoch from
// derive_seed(config.seed, label).
StageResult train_stage(Checkpoint& ckpt, const std::vector<QASample>& samples, const TrainConfig& config,
                        const std::string& label, const EpochCallback& on_epoch = {});

struct SequentialResult {
  Checkpoint final_model;
  std::vector<Checkpoint> checkpoints;  // one after every stage
  std::vector<StageResult> stages;
};

SequentialResult sequential_finetune(Checkpoint start, const std::vector<std::vector<QASample>>& stage_datasets,
                                     const std::vector<int>& epochs_per_stage, const TrainConfig& config,
                                     const std::vector<std::string>& labels = {});

// Mean loss over samples without updating anything.
double evaluate_loss(const Model& model, const std::vector<QASample>& samples, LossMask mask, int batch_size = 64);

// ---------------------------------------------------------------- generation

struct GenerateOptions {
  double temperature = 1.0;  // 0 means greedy argmax
  int max_new_tokens = 10;
  int n_samples = 20;
  uint64_t seed = 0;
  int end_token = -1;        // generation of this token stops a continuation
};

struct Continuation {
  std::vector<int> tokens;            // generated tokens, end token excluded
  std::vector<double> step_entropy;   // entropy of the sampling distribution at each step
  std::vector<double> step_logprob;   // log-probability of the sampled token
  bool ended = false;
};

std::vector<Continuation> generate(const LogitSource& model, const std::vector<int>& prompt,
                                   const GenerateOptions& options);

// ---------------------------------------------------------------- checkpoints

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
// Stable identity of (config, parameters).
std::string fingerprint(const Model& model);

}  // namespace orderlab
