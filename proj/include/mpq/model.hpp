// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "mpq/dataset.hpp"
#include "mpq/tensor.hpp"

namespace mpq {

class Rng;

struct ModelConfig {
  std::size_t n_layers = 1;
  std::size_t d_model = 8;
  std::size_t n_heads = 1;
  std::size_t d_ff = 16;
  std::size_t vocab_size = 16;
  std::size_t max_seq_len = 16;
  TaskKind task = TaskKind::classification;
  std::size_t n_classes = 2;  // ignored for language models

  // Throws DomainError on an inconsistent configuration.
  void validate() const;
  // Width of the output head: n_classes or vocab_size.
  std::size_t head_outputs() const;

  bool operator==(const ModelConfig&) const = default;
};

// Per-layer parameters, in storage order. The first entry (attn.q) is the
// "first parameter" of a layer.
enum class LayerParam : std::size_t {
  attn_q = 0,
  attn_k,
  attn_v,
  attn_out,
  ln1_g,
  ln1_b,
  ffn_in,
  ffn_out,
  ln2_g,
  ln2_b,
};
inline constexpr std::size_t kParamsPerLayer = 10;
inline constexpr std::array<std::string_view, kParamsPerLayer> kLayerParamNames = {
    "attn.q", "attn.k", "attn.v", "attn.out", "ln1.g", "ln1.b", "ffn.in", "ffn.out", "ln2.g", "ln2.b"};
// The weight matrices of a layer: what quantization and pruning act on.
inline constexpr std::array<LayerParam, 6> kLayerMatrices = {
    LayerParam::attn_q, LayerParam::attn_k,  LayerParam::attn_v,
    LayerParam::attn_out, LayerParam::ffn_in, LayerParam::ffn_out};

bool is_layer_matrix(LayerParam p);

// Parameter naming:
//   embed.tok, embed.pos, layer.{i}.{component}, final_ln.g, final_ln.b, head.w, head.b
// Linear weights are stored (out_features x in_features).
std::string layer_param_name(std::size_t layer, LayerParam p);

template <typename T>
struct NamedTensor {
  std::string name;
  BasicTensor<T> value;
  bool operator==(const NamedTensor&) const = default;
};

template <typename T>
class BasicTransformer {
 public:
  // Zero weights, unit layer-norm gains.
  explicit BasicTransformer(ModelConfig config);
  // Gaussian initialization scaled by fan-in.
  static BasicTransformer initialized(ModelConfig config, Rng& rng);

  const ModelConfig& config() const noexcept { return config_; }

  std::size_t num_params() const noexcept { return params_.size(); }
  const std::vector<NamedTensor<T>>& params() const noexcept { return params_; }
  std::vector<NamedTensor<T>>& params() noexcept { return params_; }

  BasicTensor<T>& param(std::string_view name);
  const BasicTensor<T>& param(std::string_view name) const;
  std::size_t index_of(std::string_view name) const;

  BasicTensor<T>& layer(std::size_t l, LayerParam p) { return params_[layer_index(l, p)].value; }
  const BasicTensor<T>& layer(std::size_t l, LayerParam p) const {
    return params_[layer_index(l, p)].value;
  }
  static std::size_t layer_index(std::size_t l, LayerParam p) {
    return 2 + l * kParamsPerLayer + static_cast<std::size_t>(p);
  }

  const BasicTensor<T>& tok_embedding() const { return params_[0].value; }
  const BasicTensor<T>& pos_embedding() const { return params_[1].value; }
  const BasicTensor<T>& final_gain() const { return params_[params_.size() - 4].value; }
  const BasicTensor<T>& final_bias() const { return params_[params_.size() - 3].value; }
  const BasicTensor<T>& head_weight() const { return params_[params_.size() - 2].value; }
  const BasicTensor<T>& head_bias() const { return params_[params_.size() - 1].value; }

  template <typename U>
  BasicTransformer<U> cast() const {
    BasicTransformer<U> out(config_);
    for (std::size_t i = 0; i < params_.size(); ++i)
      out.params()[i].value = params_[i].value.template cast<U>();
    return out;
  }

  bool operator==(const BasicTransformer&) const = default;

 private:
  ModelConfig config_;
  std::vector<NamedTensor<T>> params_;
};

using TransformerModel = BasicTransformer<float>;
using TransformerModelF64 = BasicTransformer<double>;

// Canonical shapes for a configuration, in parameter order.
std::vector<std::pair<std::string, std::vector<std::size_t>>> parameter_layout(const ModelConfig& config);

template <typename T>
struct ForwardResult {
  // (batch x n_classes) for classification, (batch*seq x vocab) for language models.
  BasicTensor<T> logits;
  // Post-residual hidden state of each block, (batch*seq x d_model), when captured.
  std::vector<BasicTensor<T>> layer_outputs;
};

// Pre-norm blocks: x += Attn(LN1(x)); x += FFN(LN2(x)). Attention is
// bidirectional for classification and causal for language modeling; the
// classifier mean-pools the final normalized states.
template <typename T>
ForwardResult<T> forward(const BasicTransformer<T>& model, const Batch& batch, bool capture = false);

// Final layer norm + pooling + head applied to a (batch*seq x d_model) hidden state.
template <typename T>
BasicTensor<T> head_forward(const BasicTransformer<T>& model, const BasicTensor<T>& hidden,
                            const Batch& batch);

// Mean cross-entropy over examples (classification) or token positions
// (language model), via a stable log-sum-exp in double precision.
template <typename T>
double loss(const BasicTensor<T>& logits, const Batch& batch, TaskKind task);

// Summed (not mean) cross-entropy and the number of terms it covers.
template <typename T>
std::pair<double, std::size_t> loss_sum(const BasicTensor<T>& logits, const Batch& batch, TaskKind task);

template <typename T>
struct Gradients {
  std::vector<BasicTensor<T>> grads;  // aligned with model.params()
  double loss = 0.0;
  BasicTensor<T> logits;
};

template <typename T>
Gradients<T> backward(const BasicTransformer<T>& model, const Batch& batch);

struct EvalResult {
  TaskKind task = TaskKind::classification;
  double accuracy = 0.0;     // classification
  double perplexity = 0.0;   // language model
  double mean_loss = 0.0;    // per example (classification) or per token (LM)
  std::size_t n_samples = 0;

  // accuracy or perplexity, whichever applies
  double metric() const { return task == TaskKind::classification ? accuracy : perplexity; }
};

// Accuracy is the per-example fraction correct (batch-size weighted).
// `workers` > 1 evaluates batches concurrently; results are reduced in batch order.
EvalResult evaluate(const TransformerModel& model, const Dataset& data, std::size_t workers = 1);

// Checks that every batch fits the model (vocabulary, sequence length, task).
void check_compatible(const ModelConfig& config, const Dataset& data);
void check_compatible(const ModelConfig& config, const Batch& batch);

}  // namespace mpq
