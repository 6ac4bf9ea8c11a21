// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <vector>

#include "mpq/dataset.hpp"
#include "mpq/model.hpp"

namespace mpq {

class Rng;

struct TrainOptions {
  std::size_t epochs = 10;
  double lr = 3e-3;
  std::size_t batch_size = 32;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool operator==(const TrainOptions&) const = default;
};

struct EpochLog {
  double loss = 0.0;    // mean minibatch loss
  double metric = 0.0;  // running accuracy (classification) or exp(loss) (LM)
};

struct TrainLog {
  std::vector<EpochLog> epochs;
};

// Adam over minibatches re-drawn each epoch by a seeded shuffle of the
// examples. Throws TrainingError if the loss becomes non-finite.
TrainLog train(TransformerModel& model, const Dataset& data, const TrainOptions& options, Rng& rng);

}  // namespace mpq
