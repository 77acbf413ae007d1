#include <cmath>
#include <random>

#include "orderlab/model.h"

namespace orderlab {

void ModelConfig::validate() const {
  if (n_layers < 1 || d_model < 1 || n_heads < 1 || d_ff < 1 || vocab_size < 1 || max_context < 1) {
    fail(ErrorCode::kConfigInvalid, "model dimensions must be positive");
  }
  if (d_model % n_heads != 0) fail(ErrorCode::kConfigInvalid, "d_model must be divisible by n_heads");
}

size_t ModelConfig::parameter_count() const {
  const size_t V = static_cast<size_t>(vocab_size), C = static_cast<size_t>(max_context);
  const size_t L = static_cast<size_t>(n_layers), d = static_cast<size_t>(d_model), f = static_cast<size_t>(d_ff);
  return V * d + C * d + L * (4 * d + 4 * d * d + 4 * d + 2 * d * f + f + d) + 2 * d + d * V;
}

ModelConfig parse_model_config(StrictObject obj, int vocab_size) {
  ModelConfig c;
  c.n_layers = obj.get<int>("n_layers", c.n_layers);
  c.d_model = obj.get<int>("d_model", c.d_model);
  c.n_heads = obj.get<int>("n_heads", c.n_heads);
  c.d_ff = obj.get<int>("d_ff", c.d_ff);
  c.max_context = obj.get<int>("max_context", c.max_context);
  c.vocab_size = vocab_size;
  obj.finish();
  c.validate();
  return c;
}

Json to_json(const ModelConfig& c) {
  return Json{{"n_layers", c.n_layers}, {"d_model", c.d_model},       {"n_heads", c.n_heads},
              {"d_ff", c.d_ff},         {"vocab_size", c.vocab_size}, {"max_context", c.max_context}};
}

ModelConfig model_config_from_json(const Json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_context = j.at("max_context").get<int>();
  c.validate();
  return c;
}

std::vector<ParamInfo> parameter_layout(const ModelConfig& c) {
  std::vector<ParamInfo> out;
  size_t offset = 0;
  auto add = [&](std::string name, int rows, int cols) {
    out.push_back({std::move(name), rows, cols, offset});
    offset += out.back().size();
  };
  const int d = c.d_model, f = c.d_ff;
  add("tok_emb", c.vocab_size, d);
  add("pos_emb", c.max_context, d);
  for (int l = 0; l < c.n_layers; ++l) {
    const std::string p = "block" + std::to_string(l) + ".";
    add(p + "ln1_g", 1, d);
    add(p + "ln1_b", 1, d);
    add(p + "attn_w", d, 3 * d);
    add(p + "attn_b", 1, 3 * d);
    add(p + "proj_w", d, d);
    add(p + "proj_b", 1, d);
    add(p + "ln2_g", 1, d);
    add(p + "ln2_b", 1, d);
    add(p + "fc_w", d, f);
    add(p + "fc_b", 1, f);
    add(p + "out_w", f, d);
    add(p + "out_b", 1, d);
  }
  add("lnf_g", 1, d);
  add("lnf_b", 1, d);
  add("unembed", d, c.vocab_size);
  return out;
}

TokenBatch make_batch(const std::vector<std::vector<int>>& sequences, int pad_token) {
  TokenBatch b;
  b.batch = static_cast<int>(sequences.size());
  for (const auto& s : sequences) b.length = std::max(b.length, static_cast<int>(s.size()));
  b.tokens.assign(static_cast<size_t>(b.batch) * static_cast<size_t>(b.length), pad_token);
  for (int i = 0; i < b.batch; ++i) {
    const auto& s = sequences[static_cast<size_t>(i)];
    std::copy(s.begin(), s.end(), b.tokens.begin() + static_cast<std::ptrdiff_t>(i) * b.length);
    b.lengths.push_back(static_cast<int>(s.size()));
  }
  return b;
}

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kGeluK = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluC = 0.044715;

// Per-layer parameter offsets, resolved once from the layout.
struct BlockSlots {
  size_t ln1_g, ln1_b, attn_w, attn_b, proj_w, proj_b, ln2_g, ln2_b, fc_w, fc_b, out_w, out_b;
};

}  // namespace

template <typename Scalar>
struct Transformer<Scalar>::Cache {
  using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  struct Layer {
    Matrix x_in, xhat1, a1, qkv, att, x_mid, xhat2, a2, h_pre, h_act, out;
    Vec rstd1, rstd2;
    std::vector<Matrix> probs;
  };
  int B = 0, T = 0, N = 0;
  std::vector<int> tokens;
  std::vector<Layer> layers;
  Matrix xhatf, z;
  Vec rstdf;
};

namespace {

template <typename Matrix, typename Vec, typename Scalar>
void ln_forward(const Matrix& x, const Scalar* g, const Scalar* b, Matrix& xhat, Vec& rstd, Matrix& y) {
  using RowMap = Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>;
  const auto N = x.rows(), D = x.cols();
  RowMap gm(g, D), bm(b, D);
  xhat.resize(N, D);
  y.resize(N, D);
  rstd.resize(N);
  for (Eigen::Index i = 0; i < N; ++i) {
    const Scalar mean = x.row(i).mean();
    auto centered = (x.row(i).array() - mean).matrix();
    const Scalar var = centered.squaredNorm() / static_cast<Scalar>(D);
    const Scalar r = Scalar(1) / std::sqrt(var + static_cast<Scalar>(kLnEps));
    rstd(i) = r;
    xhat.row(i) = centered * r;
    y.row(i) = xhat.row(i).cwiseProduct(gm) + bm;
  }
}

// Accumulates into dx, dg and db.
template <typename Matrix, typename Vec, typename Scalar>
void ln_backward(const Matrix& dy, const Matrix& xhat, const Vec& rstd, const Scalar* g, Scalar* dg, Scalar* db,
                 Matrix& dx) {
  using RowMapC = Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>;
  using RowMap = Eigen::Map<Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>;
  const auto N = dy.rows(), D = dy.cols();
  RowMapC gm(g, D);
  RowMap dgm(dg, D), dbm(db, D);
  for (Eigen::Index i = 0; i < N; ++i) {
    const auto dxhat = dy.row(i).cwiseProduct(gm).eval();
    const Scalar m1 = dxhat.mean();
    const Scalar m2 = dxhat.cwiseProduct(xhat.row(i)).mean();
    dx.row(i).array() += rstd(i) * (dxhat.array() - m1 - xhat.row(i).array() * m2);
  }
  dgm.noalias() += dy.cwiseProduct(xhat).colwise().sum();
  dbm.noalias() += dy.colwise().sum();
}

}  // namespace

template <typename Scalar>
Transformer<Scalar>::Transformer(ModelConfig config, ParamVector<Scalar> params)
    : config_(config), params_(std::move(params)), layout_(parameter_layout(config)) {
  config_.validate();
  if (params_.size() != config_.parameter_count()) {
    fail(ErrorCode::kInvalidArgument, "parameter buffer size " + std::to_string(params_.size()) +
                                          " does not match config (" +
                                          std::to_string(config_.parameter_count()) + ")");
  }
}

template <typename Scalar>
Transformer<Scalar> Transformer<Scalar>::init(const ModelConfig& config, uint64_t seed) {
  config.validate();
  const auto layout = parameter_layout(config);
  ParamVector<Scalar> params(config.parameter_count(), Scalar(0));
  std::mt19937_64 rng(seed);
  const double base_std = 0.02;
  const double resid_std = base_std / std::sqrt(2.0 * config.n_layers);
  for (const auto& p : layout) {
    const auto ends_with = [&](const char* suffix) {
      const std::string s(suffix);
      return p.name.size() >= s.size() && p.name.compare(p.name.size() - s.size(), s.size(), s) == 0;
    };
    if (ends_with("_g")) {
      std::fill_n(params.begin() + static_cast<std::ptrdiff_t>(p.offset), p.size(), Scalar(1));
    } else if (ends_with("_b")) {
      continue;
    } else {
      std::normal_distribution<double> normal(0.0, (ends_with("proj_w") || ends_with("out_w")) ? resid_std : base_std);
      for (size_t i = 0; i < p.size(); ++i) params[p.offset + i] = static_cast<Scalar>(normal(rng));
    }
  }
  return Transformer(config, std::move(params));
}

template <typename Scalar>
void Transformer<Scalar>::run_forward(const TokenBatch& batch, Cache& cache, bool /*keep_for_backward*/) const {
  using MatMap = Eigen::Map<const Matrix>;
  using RowMap = Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>;
  const auto& c = config_;
  const int B = batch.batch, T = batch.length, N = B * T, d = c.d_model, H = c.n_heads, hd = d / H, f = c.d_ff;
  if (T > c.max_context) {
    fail(ErrorCode::kInvalidArgument, "sequence length " + std::to_string(T) + " exceeds max_context " +
                                          std::to_string(c.max_context));
  }
  for (int tok : batch.tokens) {
    if (tok < 0 || tok >= c.vocab_size) fail(ErrorCode::kTokenOutOfRange, "token id " + std::to_string(tok));
  }
  const Scalar* P = params_.data();
  size_t li = 0;
  const auto next = [&]() { return P + layout_[li++].offset; };
  MatMap tok_emb(next(), c.vocab_size, d);
  MatMap pos_emb(next(), c.max_context, d);

  cache.B = B;
  cache.T = T;
  cache.N = N;
  cache.tokens = batch.tokens;
  cache.layers.resize(static_cast<size_t>(c.n_layers));

  Matrix x(N, d);
  for (int b = 0; b < B; ++b) {
    for (int t = 0; t < T; ++t) {
      const int r = b * T + t;
      x.row(r) = tok_emb.row(batch.tokens[static_cast<size_t>(r)]) + pos_emb.row(t);
    }
  }
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(hd));
  for (int l = 0; l < c.n_layers; ++l) {
    auto& L = cache.layers[static_cast<size_t>(l)];
    const Scalar* ln1_g = next();
    const Scalar* ln1_b = next();
    MatMap attn_w(next(), d, 3 * d);
    RowMap attn_b(next(), 3 * d);
    MatMap proj_w(next(), d, d);
    RowMap proj_b(next(), d);
    const Scalar* ln2_g = next();
    const Scalar* ln2_b = next();
    MatMap fc_w(next(), d, f);
    RowMap fc_b(next(), f);
    MatMap out_w(next(), f, d);
    RowMap out_b(next(), d);

    L.x_in = x;
    ln_forward(L.x_in, ln1_g, ln1_b, L.xhat1, L.rstd1, L.a1);
    L.qkv.resize(N, 3 * d);
    L.qkv.noalias() = L.a1 * attn_w;
    L.qkv.rowwise() += attn_b;
    L.att.setZero(N, d);
    L.probs.resize(static_cast<size_t>(B * H));
    for (int b = 0; b < B; ++b) {
      for (int h = 0; h < H; ++h) {
        const auto Q = L.qkv.block(b * T, h * hd, T, hd);
        const auto K = L.qkv.block(b * T, d + h * hd, T, hd);
        const auto V = L.qkv.block(b * T, 2 * d + h * hd, T, hd);
        Matrix& S = L.probs[static_cast<size_t>(b * H + h)];
        S.resize(T, T);
        S.noalias() = Q * K.transpose();
        for (int i = 0; i < T; ++i) {
          Scalar mx = S(i, 0) * scale;
          for (int j = 1; j <= i; ++j) mx = std::max(mx, S(i, j) * scale);
          Scalar sum = 0;
          for (int j = 0; j <= i; ++j) {
            const Scalar e = std::exp(S(i, j) * scale - mx);
            S(i, j) = e;
            sum += e;
          }
          const Scalar inv = Scalar(1) / sum;
          for (int j = 0; j <= i; ++j) S(i, j) *= inv;
          for (int j = i + 1; j < T; ++j) S(i, j) = 0;
        }
        L.att.block(b * T, h * hd, T, hd).noalias() = S * V;
      }
    }
    L.x_mid = L.x_in;
    L.x_mid.noalias() += L.att * proj_w;
    L.x_mid.rowwise() += proj_b;

    ln_forward(L.x_mid, ln2_g, ln2_b, L.xhat2, L.rstd2, L.a2);
    L.h_pre.resize(N, f);
    L.h_pre.noalias() = L.a2 * fc_w;
    L.h_pre.rowwise() += fc_b;
    {
      const auto xa = L.h_pre.array();
      const auto inner = (xa + static_cast<Scalar>(kGeluC) * xa.cube()) * static_cast<Scalar>(kGeluK);
      L.h_act = (Scalar(0.5) * xa * (Scalar(1) + inner.tanh())).matrix();
    }
    x = L.x_mid;
    x.noalias() += L.h_act * out_w;
    x.rowwise() += out_b;
    L.out = x;
  }
  const Scalar* lnf_g = next();
  const Scalar* lnf_b = next();
  ln_forward(x, lnf_g, lnf_b, cache.xhatf, cache.rstdf, cache.z);
}

template <typename Scalar>
typename Transformer<Scalar>::ForwardOutput Transformer<Scalar>::forward(const TokenBatch& batch, bool want_logits,
                                                                          bool want_activations) const {
  Cache cache;
  run_forward(batch, cache, false);
  ForwardOutput out;
  if (want_logits) {
    Eigen::Map<const Matrix> unembed(params_.data() + layout_.back().offset, config_.d_model, config_.vocab_size);
    out.logits.resize(cache.N, config_.vocab_size);
    out.logits.noalias() = cache.z * unembed;
  }
  if (want_activations) {
    for (auto& L : cache.layers) out.activations.push_back(std::move(L.out));
  }
  return out;
}

template <typename Scalar>
double Transformer<Scalar>::loss_and_grad(const TokenBatch& batch, const std::vector<int>& targets,
                                          ParamVector<Scalar>* grad) const {
  using MatMap = Eigen::Map<const Matrix>;
  using GradMap = Eigen::Map<Matrix>;
  using GradRow = Eigen::Map<Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>;
  const auto& c = config_;
  if (targets.size() != batch.tokens.size()) fail(ErrorCode::kInvalidArgument, "targets/batch size mismatch");
  Cache cache;
  run_forward(batch, cache, true);
  const int N = cache.N, T = cache.T, B = cache.B, d = c.d_model, H = c.n_heads, hd = d / H, f = c.d_ff;
  const int V = c.vocab_size;

  std::vector<int> rows;
  for (int r = 0; r < N; ++r) {
    const int tgt = targets[static_cast<size_t>(r)];
    if (tgt >= V) fail(ErrorCode::kTokenOutOfRange, "target id " + std::to_string(tgt));
    if (tgt >= 0) rows.push_back(r);
  }
  if (grad) grad->assign(params_.size(), Scalar(0));
  const int M = static_cast<int>(rows.size());
  if (M == 0) return 0.0;

  const Scalar* P = params_.data();
  const size_t unembed_off = layout_.back().offset;
  MatMap unembed(P + unembed_off, d, V);
  Matrix zs(M, d);
  for (int i = 0; i < M; ++i) zs.row(i) = cache.z.row(rows[static_cast<size_t>(i)]);
  Matrix dlogits(M, V);
  dlogits.noalias() = zs * unembed;
  double loss = 0.0;
  const Scalar invM = Scalar(1) / static_cast<Scalar>(M);
  for (int i = 0; i < M; ++i) {
    auto row = dlogits.row(i);
    const Scalar mx = row.maxCoeff();
    const Scalar lse = mx + std::log((row.array() - mx).exp().sum());
    const int tgt = targets[static_cast<size_t>(rows[static_cast<size_t>(i)])];
    loss += static_cast<double>(lse - row(tgt));
    row = ((row.array() - lse).exp() * invM).matrix();
    row(tgt) -= invM;
  }
  loss /= M;
  if (!grad) return loss;

  Scalar* G = grad->data();
  GradMap(G + unembed_off, d, V).noalias() += zs.transpose() * dlogits;
  Matrix dz = Matrix::Zero(N, d);
  {
    Matrix dzs(M, d);
    dzs.noalias() = dlogits * unembed.transpose();
    for (int i = 0; i < M; ++i) dz.row(rows[static_cast<size_t>(i)]) = dzs.row(i);
  }
  const size_t lnf_off = layout_[layout_.size() - 3].offset;
  const size_t lnfb_off = layout_[layout_.size() - 2].offset;
  Matrix dx = Matrix::Zero(N, d);
  ln_backward(dz, cache.xhatf, cache.rstdf, P + lnf_off, G + lnf_off, G + lnfb_off, dx);

  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(hd));
  for (int l = c.n_layers - 1; l >= 0; --l) {
    const auto& L = cache.layers[static_cast<size_t>(l)];
    const size_t base = 2 + static_cast<size_t>(l) * 12;
    const auto off = [&](size_t k) { return layout_[base + k].offset; };
    MatMap attn_w(P + off(2), d, 3 * d);
    MatMap proj_w(P + off(4), d, d);
    MatMap fc_w(P + off(8), d, f);
    MatMap out_w(P + off(10), f, d);

    // x_out = x_mid + gelu(a2 W1 + b1) W2 + b2
    GradMap(G + off(10), f, d).noalias() += L.h_act.transpose() * dx;
    GradRow(G + off(11), d).noalias() += dx.colwise().sum();
    Matrix dh(N, f);
    dh.noalias() = dx * out_w.transpose();
    {
      const auto xa = L.h_pre.array();
      const auto inner = (xa + static_cast<Scalar>(kGeluC) * xa.cube()) * static_cast<Scalar>(kGeluK);
      const auto th = inner.tanh().eval();
      const auto deriv = Scalar(0.5) * (Scalar(1) + th) +
                         Scalar(0.5) * xa * (Scalar(1) - th.square()) * static_cast<Scalar>(kGeluK) *
                             (Scalar(1) + static_cast<Scalar>(3 * kGeluC) * xa.square());
      dh.array() *= deriv;
    }
    GradMap(G + off(8), d, f).noalias() += L.a2.transpose() * dh;
    GradRow(G + off(9), f).noalias() += dh.colwise().sum();
    Matrix da2(N, d);
    da2.noalias() = dh * fc_w.transpose();
    Matrix dmid = dx;
    ln_backward(da2, L.xhat2, L.rstd2, P + off(6), G + off(6), G + off(7), dmid);

    // x_mid = x_in + att Wo + bo
    GradMap(G + off(4), d, d).noalias() += L.att.transpose() * dmid;
    GradRow(G + off(5), d).noalias() += dmid.colwise().sum();
    Matrix datt(N, d);
    datt.noalias() = dmid * proj_w.transpose();
    Matrix dqkv = Matrix::Zero(N, 3 * d);
    for (int b = 0; b < B; ++b) {
      for (int h = 0; h < H; ++h) {
        const Matrix& S = L.probs[static_cast<size_t>(b * H + h)];
        const auto Q = L.qkv.block(b * T, h * hd, T, hd);
        const auto K = L.qkv.block(b * T, d + h * hd, T, hd);
        const auto Vv = L.qkv.block(b * T, 2 * d + h * hd, T, hd);
        const auto dO = datt.block(b * T, h * hd, T, hd);
        Matrix dP(T, T);
        dP.noalias() = dO * Vv.transpose();
        dqkv.block(b * T, 2 * d + h * hd, T, hd).noalias() = S.transpose() * dO;
        Matrix dS = S.cwiseProduct(dP);
        const auto rowdot = dS.rowwise().sum().eval();
        dS.noalias() -= (S.array().colwise() * rowdot.array()).matrix();
        dS *= scale;
        dqkv.block(b * T, h * hd, T, hd).noalias() = dS * K;
        dqkv.block(b * T, d + h * hd, T, hd).noalias() = dS.transpose() * Q;
      }
    }
    GradMap(G + off(2), d, 3 * d).noalias() += L.a1.transpose() * dqkv;
    GradRow(G + off(3), 3 * d).noalias() += dqkv.colwise().sum();
    Matrix da1(N, d);
    da1.noalias() = dqkv * attn_w.transpose();
    Matrix din = dmid;
    ln_backward(da1, L.xhat1, L.rstd1, P + off(0), G + off(0), G + off(1), din);
    dx = std::move(din);
  }
  GradMap dtok(G + layout_[0].offset, V, d);
  GradMap dpos(G + layout_[1].offset, c.max_context, d);
  for (int b = 0; b < B; ++b) {
    for (int t = 0; t < T; ++t) {
      const int r = b * T + t;
      dtok.row(cache.tokens[static_cast<size_t>(r)]) += dx.row(r);
      dpos.row(t) += dx.row(r);
    }
  }
  return loss;
}

template <typename Scalar>
std::vector<Eigen::MatrixXd> Transformer<Scalar>::sequence_logits(
    const std::vector<std::vector<int>>& sequences) const {
  std::vector<Eigen::MatrixXd> out;
  out.reserve(sequences.size());
  if (sequences.empty()) return out;
  const auto batch = make_batch(sequences, 0);
  const auto fwd = forward(batch, true, false);
  for (int b = 0; b < batch.batch; ++b) {
    const int len = batch.lengths[static_cast<size_t>(b)];
    out.push_back(fwd.logits.block(b * batch.length, 0, len, config_.vocab_size).template cast<double>());
  }
  return out;
}

template class Transformer<float>;
template class Transformer<double>;

}  // namespace orderlab
