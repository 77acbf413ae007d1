#include <cmath>
#include <fstream>
#include <random>

#include "doctest.h"
#include "orderlab/model.h"

using namespace orderlab;

namespace {

ModelConfig micro(int vocab = 13) {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 16;
  c.vocab_size = vocab;
  c.max_context = 10;
  return c;
}

TokenBatch random_batch(int vocab, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> tok(2, vocab - 1);
  std::vector<std::vector<int>> seqs;
  for (int len : {7, 5, 9}) {
    std::vector<int> s;
    for (int t = 0; t < len; ++t) s.push_back(tok(rng));
    seqs.push_back(s);
  }
  return make_batch(seqs, 0);
}

std::vector<int> next_token_targets(const TokenBatch& b) {
  std::vector<int> targets(b.tokens.size(), -1);
  for (int i = 0; i < b.batch; ++i) {
    for (int t = 0; t + 1 < b.lengths[static_cast<size_t>(i)]; ++t) {
      targets[static_cast<size_t>(i * b.length + t)] = b.tokens[static_cast<size_t>(i * b.length + t + 1)];
    }
  }
  return targets;
}

// Always puts all mass on one token.
class OneHotModel : public LogitSource {
 public:
  OneHotModel(int vocab, int hot) : vocab_(vocab), hot_(hot) {}
  int vocab_size() const override { return vocab_; }
  std::vector<Eigen::MatrixXd> sequence_logits(const std::vector<std::vector<int>>& seqs) const override {
    std::vector<Eigen::MatrixXd> out;
    for (const auto& s : seqs) {
      Eigen::MatrixXd m = Eigen::MatrixXd::Constant(static_cast<Eigen::Index>(s.size()), vocab_, -1e9);
      m.col(hot_).setZero();
      out.push_back(m);
    }
    return out;
  }

 private:
  int vocab_, hot_;
};

std::vector<QASample> tiny_dataset(int n, uint64_t seed) {
  DataConfig cfg;
  cfg.n_entities = n / 4;
  cfg.n_stages = 2;
  cfg.alias_alphabet = 20;
  cfg.seed = seed;
  const auto corpus = build_corpus(cfg);
  std::vector<QASample> all;
  for (const auto& st : corpus.stages) all.insert(all.end(), st.begin(), st.end());
  return all;
}

}  // namespace

TEST_CASE("init is deterministic and matches the closed-form parameter count") {
  const auto c = micro();
  const auto a = Model::init(c, 5), b = Model::init(c, 5), other = Model::init(c, 6);
  CHECK(a.params() == b.params());
  CHECK(a.params() != other.params());
  const size_t V = 13, C = 10, L = 2, d = 8, f = 16;
  const size_t expected = V * d + C * d + L * (2 * d + d * 3 * d + 3 * d + d * d + d + 2 * d + d * f + f + f * d + d) +
                          2 * d + d * V;
  CHECK(a.params().size() == expected);
  CHECK(c.parameter_count() == expected);
  ModelConfig big;
  big.vocab_size = 300;
  CHECK(Model::init(big, 1).params().size() == big.parameter_count());
}

TEST_CASE("gradient matches central finite differences") {
  const auto c = micro();
  const auto model = Transformer<double>::init(c, 3);
  const auto batch = random_batch(c.vocab_size, 4);
  const auto targets = next_token_targets(batch);
  ParamVector<double> grad;
  model.loss_and_grad(batch, targets, &grad);
  REQUIRE(grad.size() == model.params().size());

  std::mt19937_64 rng(8);
  std::uniform_int_distribution<size_t> pick(0, grad.size() - 1);
  const double h = 1e-5;
  double worst = 0.0;
  for (int k = 0; k < 100; ++k) {
    const size_t i = pick(rng);
    auto plus = model, minus = model;
    plus.params()[i] += h;
    minus.params()[i] -= h;
    const double fd = (plus.loss_and_grad(batch, targets, nullptr) - minus.loss_and_grad(batch, targets, nullptr)) / (2 * h);
    const double denom = std::max({std::abs(fd), std::abs(grad[i]), 1e-6});
    worst = std::max(worst, std::abs(fd - grad[i]) / denom);
  }
  CHECK(worst <= 1e-4);
}

TEST_CASE("forward: shapes, causality, determinism") {
  const auto c = micro();
  const auto model = Model::init(c, 1);
  auto batch = random_batch(c.vocab_size, 2);
  const auto out = model.forward(batch, true, true);
  CHECK(out.logits.rows() == batch.batch * batch.length);
  CHECK(out.logits.cols() == c.vocab_size);
  REQUIRE(out.activations.size() == 2u);
  CHECK(out.activations[0].rows() == batch.batch * batch.length);
  CHECK(out.activations[0].cols() == c.d_model);

  const auto again = model.forward(batch, true, true);
  CHECK(out.logits == again.logits);

  // Changing token 3 of the first sequence leaves earlier positions untouched.
  auto changed = batch;
  changed.tokens[3] = changed.tokens[3] == 2 ? 3 : 2;
  const auto out2 = model.forward(changed, true, true);
  for (int t = 0; t < batch.length; ++t) {
    const bool same = out.logits.row(t) == out2.logits.row(t);
    CHECK(same == (t < 3));
  }
}

TEST_CASE("training: zero epochs is a no-op, loss falls on a tiny config") {
  auto data = tiny_dataset(200, 3);
  const Vocabulary vocab(20);
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 32;
  c.n_heads = 2;
  c.d_ff = 64;
  c.vocab_size = vocab.size();
  TrainConfig t;
  t.epochs = 0;
  auto ckpt = init_model(c, 1);
  const auto before = ckpt.model.params();
  train_stage(ckpt, data, t, "noop");
  CHECK(ckpt.model.params() == before);

  t.epochs = 5;
  const auto r = train_stage(ckpt, data, t, "tiny");
  REQUIRE(r.epoch_mean_loss.size() == 5u);
  CHECK(r.epoch_mean_loss.back() < r.epoch_mean_loss.front());
}

TEST_CASE("sequential fine-tuning records one checkpoint per stage") {
  const auto data = tiny_dataset(48, 5);
  const Vocabulary vocab(20);
  ModelConfig c = micro(vocab.size());
  c.max_context = 24;
  TrainConfig t;
  const std::vector<std::vector<QASample>> stages(6, std::vector<QASample>(data.begin(), data.begin() + 8));
  const auto res = sequential_finetune(init_model(c, 2), stages, {1, 1, 3, 1, 1, 1}, t);
  REQUIRE(res.checkpoints.size() == 6u);
  REQUIRE(res.final_model.history.size() == 6u);
  for (int i = 0; i < 6; ++i) {
    CHECK(res.final_model.history[static_cast<size_t>(i)].label == "D" + std::to_string(i + 1));
    CHECK(res.final_model.history[static_cast<size_t>(i)].epochs == (i == 2 ? 3 : 1));
  }
  const auto one = sequential_finetune(init_model(c, 2), {stages[0]}, {1}, t);
  auto direct = init_model(c, 2);
  t.epochs = 1;
  train_stage(direct, stages[0], t, "D1");
  auto direct2 = init_model(c, 2);
  train_stage(direct2, stages[0], t, "D1");
  CHECK(direct2.model.params() == direct.model.params());
  CHECK(one.final_model.model.params() == direct.model.params());
}

TEST_CASE("generation: greedy is repeatable, one-hot stub always emits its token") {
  const OneHotModel stub(7, 4);
  GenerateOptions g;
  g.n_samples = 5;
  g.max_new_tokens = 6;
  for (const auto& cont : generate(stub, {1, 2}, g)) CHECK(cont.tokens == std::vector<int>(6, 4));

  const auto model = Model::init(micro(), 9);
  g.temperature = 0.0;
  const auto a = generate(model, {2, 3, 4}, g), b = generate(model, {2, 3, 4}, g);
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].tokens == b[i].tokens);
    CHECK(a[i].tokens == a[0].tokens);
  }
}

TEST_CASE("checkpoint round trip and corruption") {
  auto ckpt = init_model(micro(), 4);
  ckpt.history.push_back({"D1", 5, Json{{"note", "kept verbatim"}}});
  const auto path = std::filesystem::temp_directory_path() / "orderlab_test.ckpt";
  save_checkpoint(ckpt, path);
  const auto back = load_checkpoint(path);
  CHECK(back.model.params() == ckpt.model.params());
  REQUIRE(back.history.size() == 1u);
  CHECK(back.history[0].label == "D1");
  CHECK(back.history[0].settings == ckpt.history[0].settings);
  const auto batch = random_batch(13, 1);
  CHECK(back.model.forward(batch, true, false).logits == ckpt.model.forward(batch, true, false).logits);

  const auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size - 5);
  try {
    load_checkpoint(path);
    FAIL("expected CorruptCheckpoint");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kCorruptCheckpoint);
  }
  std::filesystem::remove(path);
}
