#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "orderlab/model.h"

namespace orderlab {

TrainConfig parse_train_config(StrictObject obj) {
  TrainConfig c;
  const auto opt = obj.get<std::string>("optimizer", "adam");
  if (opt != "adam") fail(ErrorCode::kConfigInvalid, "optimizer must be adam, got '" + opt + "'");
  c.learning_rate = obj.get<double>("learning_rate", c.learning_rate);
  c.batch_size = obj.get<int>("batch_size", c.batch_size);
  c.epochs = obj.get<int>("epochs", c.epochs);
  c.weight_decay = obj.get<double>("weight_decay", c.weight_decay);
  const auto mask = obj.get<std::string>("loss_mask", "answer_only");
  if (mask == "answer_only") {
    c.loss_mask = LossMask::kAnswerOnly;
  } else if (mask == "all_tokens") {
    c.loss_mask = LossMask::kAllTokens;
  } else {
    fail(ErrorCode::kConfigInvalid, "loss_mask must be answer_only or all_tokens, got '" + mask + "'");
  }
  c.beta1 = obj.get<double>("beta1", c.beta1);
  c.beta2 = obj.get<double>("beta2", c.beta2);
  c.adam_eps = obj.get<double>("adam_eps", c.adam_eps);
  c.grad_clip = obj.get<double>("grad_clip", c.grad_clip);
  c.seed = obj.get<uint64_t>("seed", c.seed);
  obj.finish();
  if (c.learning_rate <= 0) fail(ErrorCode::kConfigInvalid, "learning_rate must be positive");
  if (c.batch_size < 1) fail(ErrorCode::kConfigInvalid, "batch_size must be >= 1");
  if (c.epochs < 0) fail(ErrorCode::kConfigInvalid, "epochs must be >= 0");
  return c;
}

Json to_json(const TrainConfig& c) {
  return Json{{"optimizer", "adam"},
              {"learning_rate", c.learning_rate},
              {"batch_size", c.batch_size},
              {"epochs", c.epochs},
              {"weight_decay", c.weight_decay},
              {"loss_mask", c.loss_mask == LossMask::kAnswerOnly ? "answer_only" : "all_tokens"},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"adam_eps", c.adam_eps},
              {"grad_clip", c.grad_clip},
              {"seed", c.seed}};
}

Checkpoint init_model(const ModelConfig& config, uint64_t seed) {
  return Checkpoint{Model::init(config, seed), {}};
}

void build_training_batch(const std::vector<const QASample*>& samples, LossMask mask, int pad_token,
                          TokenBatch& batch, std::vector<int>& targets) {
  std::vector<std::vector<int>> inputs;
  inputs.reserve(samples.size());
  for (const auto* s : samples) {
    std::vector<int> seq = s->prompt_tokens;
    seq.insert(seq.end(), s->answer_tokens.begin(), s->answer_tokens.end());
    if (seq.size() < 2) fail(ErrorCode::kInvalidArgument, "training sequence shorter than two tokens");
    seq.pop_back();
    inputs.push_back(std::move(seq));
  }
  batch = make_batch(inputs, pad_token);
  targets.assign(batch.tokens.size(), -1);
  for (size_t b = 0; b < samples.size(); ++b) {
    const auto* s = samples[b];
    const int plen = static_cast<int>(s->prompt_tokens.size());
    const int len = batch.lengths[b];
    for (int t = 0; t < len; ++t) {
      const int next = t + 1;
      if (mask == LossMask::kAnswerOnly && next < plen) continue;
      const int tok = next < plen ? s->prompt_tokens[static_cast<size_t>(next)]
                                  : s->answer_tokens[static_cast<size_t>(next - plen)];
      targets[b * static_cast<size_t>(batch.length) + static_cast<size_t>(t)] = tok;
    }
  }
}

StageResult train_stage(Checkpoint& ckpt, const std::vector<QASample>& samples, const TrainConfig& config,
                        const std::string& label, const EpochCallback& on_epoch) {
  StageResult result;
  result.label = label;
  result.epochs = config.epochs;
  Json settings = to_json(config);
  settings["n_samples"] = samples.size();
  ckpt.history.push_back({label, config.epochs, settings});
  if (config.epochs == 0) return result;
  if (samples.empty()) fail(ErrorCode::kInvalidArgument, "stage '" + label + "' has no samples");

  Model& model = ckpt.model;
  auto& params = model.params();
  const size_t P = params.size();
  std::vector<float> m(P, 0.0f), v(P, 0.0f);
  ParamVector<float> grad;
  std::vector<size_t> order(samples.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::mt19937_64 rng(derive_seed(config.seed, label));
  TokenBatch batch;
  std::vector<int> targets;
  std::vector<const QASample*> chunk;
  const double b1 = config.beta1, b2 = config.beta2;
  long step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    int n_batches = 0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(config.batch_size)) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(config.batch_size));
      chunk.clear();
      for (size_t i = start; i < end; ++i) chunk.push_back(&samples[order[i]]);
      build_training_batch(chunk, config.loss_mask, 0, batch, targets);
      const double loss = model.loss_and_grad(batch, targets, &grad);
      if (!std::isfinite(loss)) {
        fail(ErrorCode::kNonFiniteLoss, "stage '" + label + "' epoch " + std::to_string(epoch) + " step " +
                                            std::to_string(step) + ": loss " + std::to_string(loss));
      }
      double norm2 = 0.0;
      for (float g : grad) norm2 += static_cast<double>(g) * g;
      if (!std::isfinite(norm2)) {
        fail(ErrorCode::kNonFiniteLoss, "stage '" + label + "' step " + std::to_string(step) + ": gradient not finite");
      }
      const double clip =
          (config.grad_clip > 0 && std::sqrt(norm2) > config.grad_clip) ? config.grad_clip / std::sqrt(norm2) : 1.0;
      ++step;
      const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step));
      const float lr_t = static_cast<float>(config.learning_rate * std::sqrt(bc2) / bc1);
      const float eps_t = static_cast<float>(config.adam_eps * std::sqrt(bc2));
      const float decay = static_cast<float>(config.learning_rate * config.weight_decay);
      const float fb1 = static_cast<float>(b1), fb2 = static_cast<float>(b2), fclip = static_cast<float>(clip);
      for (size_t i = 0; i < P; ++i) {
        const float g = grad[i] * fclip;
        m[i] = fb1 * m[i] + (1.0f - fb1) * g;
        v[i] = fb2 * v[i] + (1.0f - fb2) * g * g;
        params[i] -= lr_t * m[i] / (std::sqrt(v[i]) + eps_t) + decay * params[i];
      }
      loss_sum += loss;
      ++n_batches;
    }
    result.epoch_mean_loss.push_back(loss_sum / n_batches);
    if (on_epoch) on_epoch(epoch + 1, model);
  }
  result.steps = static_cast<int>(step);
  return result;
}

SequentialResult sequential_finetune(Checkpoint start, const std::vector<std::vector<QASample>>& stage_datasets,
                                     const std::vector<int>& epochs_per_stage, const TrainConfig& config,
                                     const std::vector<std::string>& labels) {
  if (stage_datasets.size() != epochs_per_stage.size()) {
    fail(ErrorCode::kInvalidArgument, "stage_datasets and epochs_per_stage lengths differ");
  }
  if (!labels.empty() && labels.size() != stage_datasets.size()) {
    fail(ErrorCode::kInvalidArgument, "labels length differs from stage count");
  }
  SequentialResult out;
  out.final_model = std::move(start);
  for (size_t i = 0; i < stage_datasets.size(); ++i) {
    TrainConfig stage_config = config;
    stage_config.epochs = epochs_per_stage[i];
    const std::string label = labels.empty() ? "D" + std::to_string(i + 1) : labels[i];
    out.stages.push_back(train_stage(out.final_model, stage_datasets[i], stage_config, label));
    out.checkpoints.push_back(out.final_model);
  }
  return out;
}

double evaluate_loss(const Model& model, const std::vector<QASample>& samples, LossMask mask, int batch_size) {
  if (samples.empty()) fail(ErrorCode::kEmptyEval, "no samples to evaluate");
  double total = 0.0;
  long count = 0;
  TokenBatch batch;
  std::vector<int> targets;
  std::vector<const QASample*> chunk;
  for (size_t start = 0; start < samples.size(); start += static_cast<size_t>(batch_size)) {
    const size_t end = std::min(samples.size(), start + static_cast<size_t>(batch_size));
    chunk.clear();
    for (size_t i = start; i < end; ++i) chunk.push_back(&samples[i]);
    build_training_batch(chunk, mask, 0, batch, targets);
    const long n = std::count_if(targets.begin(), targets.end(), [](int t) { return t >= 0; });
    total += model.loss_and_grad(batch, targets, nullptr) * static_cast<double>(n);
    count += n;
  }
  return count > 0 ? total / static_cast<double>(count) : 0.0;
}

std::vector<Continuation> generate(const LogitSource& model, const std::vector<int>& prompt,
                                   const GenerateOptions& options) {
  if (options.temperature < 0) fail(ErrorCode::kInvalidArgument, "temperature must be >= 0");
  if (options.n_samples < 1 || options.max_new_tokens < 0) {
    fail(ErrorCode::kInvalidArgument, "n_samples must be >= 1 and max_new_tokens >= 0");
  }
  const size_t n = static_cast<size_t>(options.n_samples);
  std::vector<Continuation> out(n);
  std::vector<std::vector<int>> seqs(n, prompt);
  std::vector<std::mt19937_64> rngs;
  for (size_t i = 0; i < n; ++i) rngs.emplace_back(derive_seed(options.seed, static_cast<uint64_t>(i)));
  const double inv_t = options.temperature > 0 ? 1.0 / options.temperature : 1.0;
  for (int step = 0; step < options.max_new_tokens; ++step) {
    std::vector<size_t> active;
    std::vector<std::vector<int>> batch;
    for (size_t i = 0; i < n; ++i) {
      if (!out[i].ended) {
        active.push_back(i);
        batch.push_back(seqs[i]);
      }
    }
    if (active.empty()) break;
    const auto logits = model.sequence_logits(batch);
    for (size_t a = 0; a < active.size(); ++a) {
      const size_t i = active[a];
      const auto& L = logits[a];
      Eigen::VectorXd z = L.row(L.rows() - 1).transpose() * inv_t;
      const double mx = z.maxCoeff();
      Eigen::VectorXd p = (z.array() - mx).exp();
      const double sum = p.sum();
      p /= sum;
      const Eigen::VectorXd logp = (z.array() - mx - std::log(sum)).matrix();
      double entropy = 0.0;
      for (Eigen::Index k = 0; k < p.size(); ++k) {
        if (p(k) > 0) entropy -= p(k) * logp(k);
      }
      int tok = 0;
      if (options.temperature == 0) {
        z.maxCoeff(&tok);
      } else {
        const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rngs[i]);
        double acc = 0.0;
        tok = static_cast<int>(p.size()) - 1;
        for (Eigen::Index k = 0; k < p.size(); ++k) {
          acc += p(k);
          if (u < acc) {
            tok = static_cast<int>(k);
            break;
          }
        }
      }
      out[i].step_entropy.push_back(entropy);
      out[i].step_logprob.push_back(logp(tok));
      if (tok == options.end_token) {
        out[i].ended = true;
        continue;
      }
      out[i].tokens.push_back(tok);
      seqs[i].push_back(tok);
    }
  }
  return out;
}

}  // namespace orderlab
