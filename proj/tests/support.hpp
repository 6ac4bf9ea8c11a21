// SPDX-License-Identifier: Apache-2.0
//
// Shared fixtures for the unit tests: seeded generators and a small trained model.

#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "mpq/dataset.hpp"
#include "mpq/model.hpp"
#include "mpq/rng.hpp"
#include "mpq/synthetic.hpp"
#include "mpq/train.hpp"

namespace mpq::test {

inline Tensor random_tensor(Rng& rng, std::vector<std::size_t> shape, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (float& v : t.data()) v = static_cast<float>(lo + (hi - lo) * rng.uniform());
  return t;
}

inline TensorF64 random_f64(Rng& rng, std::size_t rows, std::size_t cols) {
  TensorF64 t({rows, cols});
  for (double& v : t.data()) v = rng.normal();
  return t;
}

inline std::size_t random_between(Rng& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng.below(hi - lo + 1));
}

inline ModelConfig tiny_config(std::size_t layers = 2, std::size_t d_model = 8, TaskKind task = TaskKind::classification) {
  ModelConfig c;
  c.n_layers = layers;
  c.d_model = d_model;
  c.n_heads = 2;
  c.d_ff = 2 * d_model;
  c.vocab_size = 16;
  c.max_seq_len = 8;
  c.task = task;
  c.n_classes = task == TaskKind::classification ? 2 : 0;
  return c;
}

struct Trained {
  TransformerModel model;
  Dataset train;
  Dataset eval;
};

// A small counting-task classifier: quick to train, big enough to have
// layer-dependent behaviour. Seed 7 throughout unless stated.
inline Trained desk_classifier(std::uint64_t seed = 7, std::size_t layers = 4, std::size_t epochs = 3) {
  Rng data_rng(seed);
  Dataset train_set = gen_classification(data_rng, 768, 12, 16, 32);
  Dataset eval_set = gen_classification(data_rng, 256, 12, 16, 32);
  ModelConfig c;
  c.n_layers = layers;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 32;
  c.vocab_size = 16;
  c.max_seq_len = 12;
  Rng init(seed + 1);
  TransformerModel m = TransformerModel::initialized(c, init);
  TrainOptions opts;
  opts.epochs = epochs;
  Rng train_rng(seed + 2);
  train(m, train_set, opts, train_rng);
  return Trained{std::move(m), std::move(train_set), std::move(eval_set)};
}

inline Trained desk_lm(std::uint64_t seed = 11, std::size_t layers = 2, std::size_t epochs = 2) {
  Rng data_rng(seed);
  Dataset all = gen_lm(data_rng, 12 * 160 + 1, 12, 12, 16);
  auto ex = examples_of(all);
  std::vector<Example> tr(ex.begin(), ex.begin() + 128), ev(ex.begin() + 128, ex.end());
  Dataset train_set = make_dataset(TaskKind::language_model, 12, 0, tr, 16);
  Dataset eval_set = make_dataset(TaskKind::language_model, 12, 0, ev, 16);
  ModelConfig c = tiny_config(layers, 16, TaskKind::language_model);
  c.vocab_size = 12;
  c.max_seq_len = 12;
  Rng init(seed + 1);
  TransformerModel m = TransformerModel::initialized(c, init);
  TrainOptions opts;
  opts.epochs = epochs;
  Rng train_rng(seed + 2);
  train(m, train_set, opts, train_rng);
  return Trained{std::move(m), std::move(train_set), std::move(eval_set)};
}

}  // namespace mpq::test
