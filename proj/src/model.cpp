// SPDX-License-Identifier: Apache-2.0

#include "mpq/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "mpq/parallel.hpp"
#include "mpq/rng.hpp"

namespace mpq {

void ModelConfig::validate() const {
  if (n_layers < 1) throw DomainError("n_layers must be >= 1");
  if (vocab_size < 2) throw DomainError("vocab_size must be >= 2");
  if (d_model < 1 || n_heads < 1 || d_ff < 1 || max_seq_len < 1)
    throw DomainError("model dimensions must be >= 1");
  if (d_model % n_heads != 0) throw DomainError("d_model must be divisible by n_heads");
  if (task == TaskKind::classification && n_classes < 2)
    throw DomainError("classification needs n_classes >= 2");
}

std::size_t ModelConfig::head_outputs() const {
  return task == TaskKind::classification ? n_classes : vocab_size;
}

bool is_layer_matrix(LayerParam p) {
  return std::find(kLayerMatrices.begin(), kLayerMatrices.end(), p) != kLayerMatrices.end();
}

std::string layer_param_name(std::size_t layer, LayerParam p) {
  return "layer." + std::to_string(layer) + "." +
         std::string(kLayerParamNames[static_cast<std::size_t>(p)]);
}

std::vector<std::pair<std::string, std::vector<std::size_t>>> parameter_layout(const ModelConfig& c) {
  c.validate();
  const std::size_t d = c.d_model;
  std::vector<std::pair<std::string, std::vector<std::size_t>>> out;
  out.emplace_back("embed.tok", std::vector<std::size_t>{c.vocab_size, d});
  out.emplace_back("embed.pos", std::vector<std::size_t>{c.max_seq_len, d});
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    for (std::size_t i = 0; i < kParamsPerLayer; ++i) {
      const auto p = static_cast<LayerParam>(i);
      std::vector<std::size_t> shape;
      switch (p) {
        case LayerParam::attn_q:
        case LayerParam::attn_k:
        case LayerParam::attn_v:
        case LayerParam::attn_out:
          shape = {d, d};
          break;
        case LayerParam::ffn_in:
          shape = {c.d_ff, d};
          break;
        case LayerParam::ffn_out:
          shape = {d, c.d_ff};
          break;
        default:
          shape = {d};
      }
      out.emplace_back(layer_param_name(l, p), std::move(shape));
    }
  }
  out.emplace_back("final_ln.g", std::vector<std::size_t>{d});
  out.emplace_back("final_ln.b", std::vector<std::size_t>{d});
  out.emplace_back("head.w", std::vector<std::size_t>{c.head_outputs(), d});
  out.emplace_back("head.b", std::vector<std::size_t>{c.head_outputs()});
  return out;
}

template <typename T>
BasicTransformer<T>::BasicTransformer(ModelConfig config) : config_(config) {
  for (auto& [name, shape] : parameter_layout(config_)) {
    const bool gain = name.ends_with("ln1.g") || name.ends_with("ln2.g") || name == "final_ln.g";
    params_.push_back({name, BasicTensor<T>(shape, gain ? T(1) : T(0))});
  }
}

template <typename T>
BasicTransformer<T> BasicTransformer<T>::initialized(ModelConfig config, Rng& rng) {
  BasicTransformer m(config);
  for (auto& [name, value] : m.params_) {
    if (value.rank() != 2) continue;  // gains stay 1, biases 0
    double std_dev = 1.0 / std::sqrt(static_cast<double>(value.cols()));
    if (name.starts_with("embed.")) std_dev = 1.0;
    for (auto& v : value.data()) v = static_cast<T>(rng.normal() * std_dev);
  }
  return m;
}

template <typename T>
std::size_t BasicTransformer<T>::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (params_[i].name == name) return i;
  throw DomainError("unknown parameter '" + std::string(name) + "'");
}

template <typename T>
BasicTensor<T>& BasicTransformer<T>::param(std::string_view name) {
  return params_[index_of(name)].value;
}

template <typename T>
const BasicTensor<T>& BasicTransformer<T>::param(std::string_view name) const {
  return params_[index_of(name)].value;
}

template class BasicTransformer<float>;
template class BasicTransformer<double>;

void check_compatible(const ModelConfig& config, const Batch& batch) {
  if (batch.batch_size == 0 || batch.seq_len == 0) throw DimensionError("empty batch");
  if (batch.seq_len > config.max_seq_len)
    throw DimensionError("sequence length " + std::to_string(batch.seq_len) + " exceeds max_seq_len " +
                         std::to_string(config.max_seq_len));
  if (batch.tokens.size() != batch.batch_size * batch.seq_len)
    throw DimensionError("batch token count mismatch");
  for (auto t : batch.tokens)
    if (t < 0 || static_cast<std::size_t>(t) >= config.vocab_size)
      throw DimensionError("token id " + std::to_string(t) + " outside model vocabulary");
  const std::size_t want =
      config.task == TaskKind::classification ? batch.batch_size : batch.batch_size * batch.seq_len;
  if (batch.targets.size() != want) throw DimensionError("batch targets do not match the model task");
  for (auto t : batch.targets)
    if (t < 0 || static_cast<std::size_t>(t) >= config.head_outputs())
      throw DimensionError("target id " + std::to_string(t) + " outside head range");
}

void check_compatible(const ModelConfig& config, const Dataset& data) {
  if (data.task != config.task) throw DimensionError("dataset task does not match model task");
  for (const auto& b : data.batches) check_compatible(config, b);
}

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

template <typename T>
using Mat = BasicTensor<T>;

// y = x W^T with W stored (out x in).
template <typename T>
Mat<T> linear(const Mat<T>& x, const Mat<T>& w) {
  return matmul(x, w.transposed());
}

// dW += dy^T x ; returns dx = dy W.
template <typename T>
Mat<T> linear_backward(const Mat<T>& dy, const Mat<T>& x, const Mat<T>& w, Mat<T>& dw) {
  const std::size_t n = dy.rows(), out = dy.cols(), in = x.cols();
  for (std::size_t r = 0; r < n; ++r) {
    const T* xr = x.row(r).data();
    for (std::size_t o = 0; o < out; ++o) {
      const T s = dy.at(r, o);
      if (s == T(0)) continue;
      T* dwr = dw.row(o).data();
      for (std::size_t k = 0; k < in; ++k) dwr[k] += s * xr[k];
    }
  }
  return matmul(dy, w);
}

template <typename T>
struct NormCache {
  Mat<T> xhat;
  std::vector<T> rstd;
};

template <typename T>
Mat<T> layer_norm(const Mat<T>& x, const Mat<T>& g, const Mat<T>& b, NormCache<T>* cache) {
  const std::size_t n = x.rows(), d = x.cols();
  Mat<T> y({n, d});
  if (cache) {
    cache->xhat = Mat<T>({n, d});
    cache->rstd.assign(n, T(0));
  }
  for (std::size_t r = 0; r < n; ++r) {
    const T* xr = x.row(r).data();
    T mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<T>(d);
    const T rstd = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
    for (std::size_t j = 0; j < d; ++j) {
      const T xh = (xr[j] - mean) * rstd;
      y.at(r, j) = g[j] * xh + b[j];
      if (cache) cache->xhat.at(r, j) = xh;
    }
    if (cache) cache->rstd[r] = rstd;
  }
  return y;
}

// Accumulates dg, db; returns dx.
template <typename T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const NormCache<T>& cache, const Mat<T>& g, Mat<T>& dg,
                           Mat<T>& db) {
  const std::size_t n = dy.rows(), d = dy.cols();
  Mat<T> dx({n, d});
  std::vector<T> dxhat(d);
  for (std::size_t r = 0; r < n; ++r) {
    T mean_dxhat = 0, mean_dxhat_xhat = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const T dyj = dy.at(r, j);
      const T xh = cache.xhat.at(r, j);
      dg[j] += dyj * xh;
      db[j] += dyj;
      dxhat[j] = dyj * g[j];
      mean_dxhat += dxhat[j];
      mean_dxhat_xhat += dxhat[j] * xh;
    }
    mean_dxhat /= static_cast<T>(d);
    mean_dxhat_xhat /= static_cast<T>(d);
    for (std::size_t j = 0; j < d; ++j)
      dx.at(r, j) = cache.rstd[r] * (dxhat[j] - mean_dxhat - cache.xhat.at(r, j) * mean_dxhat_xhat);
  }
  return dx;
}

template <typename T>
T gelu(T u) {
  const T inner = static_cast<T>(kGeluC) * (u + T(0.044715) * u * u * u);
  return T(0.5) * u * (T(1) + std::tanh(inner));
}

template <typename T>
T gelu_grad(T u) {
  const T inner = static_cast<T>(kGeluC) * (u + T(0.044715) * u * u * u);
  const T th = std::tanh(inner);
  const T dinner = static_cast<T>(kGeluC) * (T(1) + T(3) * T(0.044715) * u * u);
  return T(0.5) * (T(1) + th) + T(0.5) * u * (T(1) - th * th) * dinner;
}

template <typename T>
struct BlockCache {
  NormCache<T> ln1, ln2;
  Mat<T> h1, q, k, v, att, h2, u, act;
  std::vector<T> probs;  // (batch, head, t, s)
};

template <typename T>
struct ForwardCache {
  std::vector<BlockCache<T>> blocks;
  NormCache<T> final_ln;
  Mat<T> features;  // pooled (classification) or normalized states (LM) fed to the head
};

template <typename T>
Mat<T> attention(const ModelConfig& c, const Batch& batch, const Mat<T>& q, const Mat<T>& k,
                 const Mat<T>& v, std::vector<T>& probs) {
  const std::size_t B = batch.batch_size, S = batch.seq_len, H = c.n_heads;
  const std::size_t dh = c.d_model / H;
  const bool causal = c.task == TaskKind::language_model;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  probs.assign(B * H * S * S, T(0));
  Mat<T> out({B * S, c.d_model});
  std::vector<T> row(S);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t off = h * dh;
      for (std::size_t t = 0; t < S; ++t) {
        const std::size_t limit = causal ? t + 1 : S;
        const T* qt = q.row(b * S + t).data() + off;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t s = 0; s < limit; ++s) {
          const T* ks = k.row(b * S + s).data() + off;
          T dot = 0;
          for (std::size_t j = 0; j < dh; ++j) dot += qt[j] * ks[j];
          row[s] = dot * scale;
          mx = std::max(mx, row[s]);
        }
        T sum = 0;
        for (std::size_t s = 0; s < limit; ++s) {
          row[s] = std::exp(row[s] - mx);
          sum += row[s];
        }
        T* p = probs.data() + ((b * H + h) * S + t) * S;
        T* ot = out.row(b * S + t).data() + off;
        for (std::size_t s = 0; s < limit; ++s) {
          p[s] = row[s] / sum;
          const T* vs = v.row(b * S + s).data() + off;
          for (std::size_t j = 0; j < dh; ++j) ot[j] += p[s] * vs[j];
        }
      }
    }
  }
  return out;
}

template <typename T>
void attention_backward(const ModelConfig& c, const Batch& batch, const BlockCache<T>& bc,
                        const Mat<T>& datt, Mat<T>& dq, Mat<T>& dk, Mat<T>& dv) {
  const std::size_t B = batch.batch_size, S = batch.seq_len, H = c.n_heads;
  const std::size_t dh = c.d_model / H;
  const bool causal = c.task == TaskKind::language_model;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<T> dp(S);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t off = h * dh;
      for (std::size_t t = 0; t < S; ++t) {
        const std::size_t limit = causal ? t + 1 : S;
        const T* p = bc.probs.data() + ((b * H + h) * S + t) * S;
        const T* dat = datt.row(b * S + t).data() + off;
        T weighted = 0;
        for (std::size_t s = 0; s < limit; ++s) {
          const T* vs = bc.v.row(b * S + s).data() + off;
          T* dvs = dv.row(b * S + s).data() + off;
          T acc = 0;
          for (std::size_t j = 0; j < dh; ++j) {
            acc += dat[j] * vs[j];
            dvs[j] += p[s] * dat[j];
          }
          dp[s] = acc;
          weighted += p[s] * acc;
        }
        const T* qt = bc.q.row(b * S + t).data() + off;
        T* dqt = dq.row(b * S + t).data() + off;
        for (std::size_t s = 0; s < limit; ++s) {
          const T ds = p[s] * (dp[s] - weighted) * scale;
          if (ds == T(0)) continue;
          const T* ks = bc.k.row(b * S + s).data() + off;
          T* dks = dk.row(b * S + s).data() + off;
          for (std::size_t j = 0; j < dh; ++j) {
            dqt[j] += ds * ks[j];
            dks[j] += ds * qt[j];
          }
        }
      }
    }
  }
}

template <typename T>
Mat<T> embed(const BasicTransformer<T>& m, const Batch& batch) {
  const std::size_t d = m.config().d_model, S = batch.seq_len;
  Mat<T> x({batch.batch_size * S, d});
  for (std::size_t b = 0; b < batch.batch_size; ++b) {
    for (std::size_t t = 0; t < S; ++t) {
      const auto tok = m.tok_embedding().row(static_cast<std::size_t>(batch.token(b, t)));
      const auto pos = m.pos_embedding().row(t);
      auto xr = x.row(b * S + t);
      for (std::size_t j = 0; j < d; ++j) xr[j] = tok[j] + pos[j];
    }
  }
  return x;
}

template <typename T>
Mat<T> block_forward(const BasicTransformer<T>& m, std::size_t l, const Batch& batch, const Mat<T>& x,
                     BlockCache<T>* cache) {
  const ModelConfig& c = m.config();
  BlockCache<T> local;
  BlockCache<T>& bc = cache ? *cache : local;
  bc.h1 = layer_norm(x, m.layer(l, LayerParam::ln1_g), m.layer(l, LayerParam::ln1_b), &bc.ln1);
  bc.q = linear(bc.h1, m.layer(l, LayerParam::attn_q));
  bc.k = linear(bc.h1, m.layer(l, LayerParam::attn_k));
  bc.v = linear(bc.h1, m.layer(l, LayerParam::attn_v));
  bc.att = attention(c, batch, bc.q, bc.k, bc.v, bc.probs);
  Mat<T> x1 = linear(bc.att, m.layer(l, LayerParam::attn_out));
  for (std::size_t i = 0; i < x1.size(); ++i) x1[i] += x[i];
  bc.h2 = layer_norm(x1, m.layer(l, LayerParam::ln2_g), m.layer(l, LayerParam::ln2_b), &bc.ln2);
  bc.u = linear(bc.h2, m.layer(l, LayerParam::ffn_in));
  bc.act = bc.u;
  for (auto& e : bc.act.data()) e = gelu(e);
  Mat<T> x2 = linear(bc.act, m.layer(l, LayerParam::ffn_out));
  for (std::size_t i = 0; i < x2.size(); ++i) x2[i] += x1[i];
  return x2;
}

template <typename T>
Mat<T> head_impl(const BasicTransformer<T>& m, const Mat<T>& hidden, const Batch& batch,
                 ForwardCache<T>* cache) {
  const ModelConfig& c = m.config();
  const std::size_t B = batch.batch_size, S = batch.seq_len, d = c.d_model;
  if (hidden.rank() != 2 || hidden.rows() != B * S || hidden.cols() != d)
    throw DimensionError("hidden state shape does not match batch");
  NormCache<T> local;
  Mat<T> hf = layer_norm(hidden, m.final_gain(), m.final_bias(), cache ? &cache->final_ln : &local);
  Mat<T> features;
  if (c.task == TaskKind::classification) {
    features = Mat<T>({B, d});
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t t = 0; t < S; ++t)
        for (std::size_t j = 0; j < d; ++j) features.at(b, j) += hf.at(b * S + t, j);
      for (std::size_t j = 0; j < d; ++j) features.at(b, j) /= static_cast<T>(S);
    }
  } else {
    features = std::move(hf);
  }
  Mat<T> logits = linear(features, m.head_weight());
  const auto& hb = m.head_bias();
  for (std::size_t r = 0; r < logits.rows(); ++r)
    for (std::size_t o = 0; o < logits.cols(); ++o) logits.at(r, o) += hb[o];
  if (cache) cache->features = std::move(features);
  return logits;
}

template <typename T>
ForwardResult<T> forward_impl(const BasicTransformer<T>& m, const Batch& batch, bool capture,
                              ForwardCache<T>* cache) {
  check_compatible(m.config(), batch);
  const std::size_t L = m.config().n_layers;
  ForwardResult<T> out;
  Mat<T> x = embed(m, batch);
  if (cache) cache->blocks.resize(L);
  for (std::size_t l = 0; l < L; ++l) {
    x = block_forward(m, l, batch, x, cache ? &cache->blocks[l] : nullptr);
    if (capture) out.layer_outputs.push_back(x);
  }
  out.logits = head_impl(m, x, batch, cache);
  return out;
}

}  // namespace

template <typename T>
ForwardResult<T> forward(const BasicTransformer<T>& model, const Batch& batch, bool capture) {
  return forward_impl<T>(model, batch, capture, nullptr);
}

template <typename T>
BasicTensor<T> head_forward(const BasicTransformer<T>& model, const BasicTensor<T>& hidden,
                            const Batch& batch) {
  return head_impl<T>(model, hidden, batch, nullptr);
}

template <typename T>
std::pair<double, std::size_t> loss_sum(const BasicTensor<T>& logits, const Batch& batch, TaskKind task) {
  const std::size_t rows = logits.rows(), cols = logits.cols();
  const std::size_t want = task == TaskKind::classification ? batch.batch_size : batch.batch_size * batch.seq_len;
  if (rows != want || batch.targets.size() != want) throw DimensionError("logits do not match batch targets");
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const auto row = logits.row(r);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < cols; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double sum = 0.0;
    for (std::size_t j = 0; j < cols; ++j) sum += std::exp(static_cast<double>(row[j]) - mx);
    const auto target = static_cast<std::size_t>(batch.targets[r]);
    total += mx + std::log(sum) - static_cast<double>(row[target]);
  }
  return {total, rows};
}

template <typename T>
double loss(const BasicTensor<T>& logits, const Batch& batch, TaskKind task) {
  const auto [sum, n] = loss_sum(logits, batch, task);
  return sum / static_cast<double>(n);
}

template <typename T>
Gradients<T> backward(const BasicTransformer<T>& m, const Batch& batch) {
  const ModelConfig& c = m.config();
  ForwardCache<T> cache;
  const ForwardResult<T> fwd = forward_impl<T>(m, batch, false, &cache);

  Gradients<T> g;
  g.grads.reserve(m.num_params());
  for (const auto& p : m.params()) g.grads.emplace_back(p.value.shape());
  auto grad = [&](std::size_t idx) -> Mat<T>& { return g.grads[idx]; };
  const std::size_t n_params = m.num_params();

  // d loss / d logits = (softmax - onehot) / count
  const Mat<T>& logits = fwd.logits;
  const std::size_t rows = logits.rows(), cols = logits.cols();
  Mat<T> dlogits({rows, cols});
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const auto row = logits.row(r);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < cols; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double sum = 0.0;
    for (std::size_t j = 0; j < cols; ++j) sum += std::exp(static_cast<double>(row[j]) - mx);
    const auto target = static_cast<std::size_t>(batch.targets[r]);
    total += mx + std::log(sum) - static_cast<double>(row[target]);
    for (std::size_t j = 0; j < cols; ++j) {
      double p = std::exp(static_cast<double>(row[j]) - mx) / sum;
      if (j == target) p -= 1.0;
      dlogits.at(r, j) = static_cast<T>(p / static_cast<double>(rows));
    }
  }
  g.loss = total / static_cast<double>(rows);
  g.logits = fwd.logits;

  Mat<T>& dhead_b = grad(n_params - 1);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < cols; ++j) dhead_b[j] += dlogits.at(r, j);
  Mat<T> dfeatures = linear_backward(dlogits, cache.features, m.head_weight(), grad(n_params - 2));

  const std::size_t B = batch.batch_size, S = batch.seq_len, d = c.d_model;
  Mat<T> dhf;
  if (c.task == TaskKind::classification) {
    dhf = Mat<T>({B * S, d});
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < S; ++t)
        for (std::size_t j = 0; j < d; ++j) dhf.at(b * S + t, j) = dfeatures.at(b, j) / static_cast<T>(S);
  } else {
    dhf = std::move(dfeatures);
  }
  Mat<T> dx = layer_norm_backward(dhf, cache.final_ln, m.final_gain(), grad(n_params - 4), grad(n_params - 3));

  for (std::size_t l = c.n_layers; l-- > 0;) {
    const BlockCache<T>& bc = cache.blocks[l];
    auto gi = [&](LayerParam p) -> Mat<T>& { return grad(BasicTransformer<T>::layer_index(l, p)); };

    // FFN branch
    Mat<T> dact = linear_backward(dx, bc.act, m.layer(l, LayerParam::ffn_out), gi(LayerParam::ffn_out));
    for (std::size_t i = 0; i < dact.size(); ++i) dact[i] *= gelu_grad(bc.u[i]);
    Mat<T> dh2 = linear_backward(dact, bc.h2, m.layer(l, LayerParam::ffn_in), gi(LayerParam::ffn_in));
    Mat<T> dln2 = layer_norm_backward(dh2, bc.ln2, m.layer(l, LayerParam::ln2_g), gi(LayerParam::ln2_g),
                                      gi(LayerParam::ln2_b));
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dln2[i];  // dx is now d x1

    // attention branch
    Mat<T> datt = linear_backward(dx, bc.att, m.layer(l, LayerParam::attn_out), gi(LayerParam::attn_out));
    Mat<T> dq({B * S, d}), dk({B * S, d}), dv({B * S, d});
    attention_backward(c, batch, bc, datt, dq, dk, dv);
    Mat<T> dh1 = linear_backward(dq, bc.h1, m.layer(l, LayerParam::attn_q), gi(LayerParam::attn_q));
    Mat<T> dh1k = linear_backward(dk, bc.h1, m.layer(l, LayerParam::attn_k), gi(LayerParam::attn_k));
    Mat<T> dh1v = linear_backward(dv, bc.h1, m.layer(l, LayerParam::attn_v), gi(LayerParam::attn_v));
    for (std::size_t i = 0; i < dh1.size(); ++i) dh1[i] += dh1k[i] + dh1v[i];
    Mat<T> dln1 = layer_norm_backward(dh1, bc.ln1, m.layer(l, LayerParam::ln1_g), gi(LayerParam::ln1_g),
                                      gi(LayerParam::ln1_b));
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dln1[i];
  }

  Mat<T>& dtok = grad(0);
  Mat<T>& dpos = grad(1);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < S; ++t) {
      const auto tok = static_cast<std::size_t>(batch.token(b, t));
      const auto dr = dx.row(b * S + t);
      for (std::size_t j = 0; j < d; ++j) {
        dtok.at(tok, j) += dr[j];
        dpos.at(t, j) += dr[j];
      }
    }
  }
  return g;
}

template ForwardResult<float> forward(const TransformerModel&, const Batch&, bool);
template ForwardResult<double> forward(const TransformerModelF64&, const Batch&, bool);
template Tensor head_forward(const TransformerModel&, const Tensor&, const Batch&);
template TensorF64 head_forward(const TransformerModelF64&, const TensorF64&, const Batch&);
template double loss(const Tensor&, const Batch&, TaskKind);
template double loss(const TensorF64&, const Batch&, TaskKind);
template std::pair<double, std::size_t> loss_sum(const Tensor&, const Batch&, TaskKind);
template std::pair<double, std::size_t> loss_sum(const TensorF64&, const Batch&, TaskKind);
template Gradients<float> backward(const TransformerModel&, const Batch&);
template Gradients<double> backward(const TransformerModelF64&, const Batch&);

namespace {

struct BatchEval {
  double loss_sum = 0.0;
  std::size_t loss_terms = 0;
  std::size_t correct = 0;
};

BatchEval eval_batch(const TransformerModel& model, const Batch& batch) {
  const auto fwd = forward(model, batch, false);
  BatchEval e;
  std::tie(e.loss_sum, e.loss_terms) = loss_sum(fwd.logits, batch, model.config().task);
  if (model.config().task == TaskKind::classification) {
    for (std::size_t r = 0; r < batch.batch_size; ++r) {
      const auto row = fwd.logits.row(r);
      const auto pred = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
      if (pred == static_cast<std::size_t>(batch.targets[r])) ++e.correct;
    }
  }
  return e;
}

}  // namespace

EvalResult evaluate(const TransformerModel& model, const Dataset& data, std::size_t workers) {
  check_compatible(model.config(), data);
  if (data.batches.empty()) throw DomainError("evaluate on an empty dataset");
  std::vector<BatchEval> per_batch(data.batches.size());
  parallel_for(data.batches.size(), workers, [&](std::size_t i) { per_batch[i] = eval_batch(model, data.batches[i]); });
  EvalResult r;
  r.task = model.config().task;
  double total = 0.0;
  std::size_t terms = 0, correct = 0, samples = 0;
  for (std::size_t i = 0; i < per_batch.size(); ++i) {
    total += per_batch[i].loss_sum;
    terms += per_batch[i].loss_terms;
    correct += per_batch[i].correct;
    samples += data.batches[i].batch_size;
  }
  r.n_samples = samples;
  r.mean_loss = total / static_cast<double>(terms);
  if (r.task == TaskKind::classification) {
    r.accuracy = static_cast<double>(correct) / static_cast<double>(samples);
  } else {
    r.perplexity = std::exp(r.mean_loss);
  }
  return r;
}

}  // namespace mpq
