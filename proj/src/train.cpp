// SPDX-License-Identifier: Apache-2.0

#include "mpq/train.hpp"

#include <algorithm>
#include <cmath>

#include "mpq/rng.hpp"

namespace mpq {

namespace {

std::vector<Batch> shuffled_batches(const std::vector<Example>& examples, const Dataset& data,
                                    std::size_t batch_size, Rng& rng) {
  std::vector<std::size_t> order(examples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  std::vector<Example> permuted;
  permuted.reserve(order.size());
  for (auto i : order) permuted.push_back(examples[i]);
  return make_dataset(data.task, data.vocab_size, data.n_classes, permuted, batch_size).batches;
}

}  // namespace

TrainLog train(TransformerModel& model, const Dataset& data, const TrainOptions& options, Rng& rng) {
  check_compatible(model.config(), data);
  if (data.n_samples == 0) throw TrainingError("training set is empty");
  const auto examples = examples_of(data);
  const std::size_t n_params = model.num_params();
  std::vector<std::vector<float>> m1(n_params), m2(n_params);
  for (std::size_t i = 0; i < n_params; ++i) {
    m1[i].assign(model.params()[i].value.size(), 0.0f);
    m2[i].assign(model.params()[i].value.size(), 0.0f);
  }

  TrainLog log;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    const auto batches = shuffled_batches(examples, data, options.batch_size, rng);
    double loss_total = 0.0;
    std::size_t correct = 0, seen = 0;
    for (const auto& batch : batches) {
      auto g = backward(model, batch);
      if (!std::isfinite(g.loss)) {
        throw TrainingError("loss diverged at epoch " + std::to_string(epoch) + " step " + std::to_string(step));
      }
      loss_total += g.loss;
      if (data.task == TaskKind::classification) {
        // accuracy of the pre-update parameters on this minibatch
        const auto& logits = g.logits;
        for (std::size_t r = 0; r < batch.batch_size; ++r) {
          const auto row = logits.row(r);
          const auto pred = std::max_element(row.begin(), row.end()) - row.begin();
          if (pred == batch.targets[r]) ++correct;
        }
        seen += batch.batch_size;
      }
      ++step;
      const double bc1 = 1.0 - std::pow(options.beta1, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(options.beta2, static_cast<double>(step));
      for (std::size_t i = 0; i < n_params; ++i) {
        auto p = model.params()[i].value.data();
        const auto gr = g.grads[i].data();
        for (std::size_t j = 0; j < p.size(); ++j) {
          const double gj = gr[j];
          m1[i][j] = static_cast<float>(options.beta1 * m1[i][j] + (1.0 - options.beta1) * gj);
          m2[i][j] = static_cast<float>(options.beta2 * m2[i][j] + (1.0 - options.beta2) * gj * gj);
          const double mhat = m1[i][j] / bc1;
          const double vhat = m2[i][j] / bc2;
          p[j] = static_cast<float>(p[j] - options.lr * mhat / (std::sqrt(vhat) + options.eps));
        }
      }
    }
    EpochLog e;
    e.loss = loss_total / static_cast<double>(batches.size());
    e.metric = data.task == TaskKind::classification ? static_cast<double>(correct) / static_cast<double>(seen)
                                                      : std::exp(e.loss);
    log.epochs.push_back(e);
  }
  return log;
}

}  // namespace mpq
