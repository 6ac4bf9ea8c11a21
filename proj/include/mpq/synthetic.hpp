// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "mpq/dataset.hpp"

namespace mpq {

class Rng;

struct CountingTask {
  std::int32_t token_a = 7;
  std::int32_t token_b = 3;
};

// 1 iff token_a occurs strictly more often than token_b.
std::int32_t counting_label(std::span<const std::int32_t> tokens, const CountingTask& task = {});

// Balanced binary counting task: each example's label is drawn fair-coin and
// the sequence rejection-sampled to match it.
Dataset gen_classification(Rng& rng, std::size_t n, std::size_t seq_len, std::size_t vocab,
                           std::size_t batch_size, const CountingTask& task = {});

// Order-2 Markov chain over `vocab` symbols. Row (a, b) holds P(next | prev2 = a, prev1 = b).
class MarkovChain {
 public:
  MarkovChain(std::size_t vocab, std::vector<double> transitions);
  // Each row drawn from a symmetric Dirichlet(concentration).
  static MarkovChain dirichlet(Rng& rng, std::size_t vocab, double concentration);

  std::size_t vocab() const noexcept { return vocab_; }
  double prob(std::size_t prev2, std::size_t prev1, std::size_t next) const {
    return p_[(prev2 * vocab_ + prev1) * vocab_ + next];
  }
  // Stationary distribution over the vocab^2 pair states (lazy-chain power iteration).
  std::vector<double> stationary() const;
  // Stationary-weighted mean row entropy, in nats.
  double entropy_rate() const;
  double perplexity_floor() const;
  std::vector<std::int32_t> sample(Rng& rng, std::size_t n_tokens) const;

 private:
  std::size_t vocab_;
  std::vector<double> p_;
};

// Splits a token stream into non-overlapping seq_len windows with next-token
// targets: floor((n - 1) / seq_len) sequences.
Dataset lm_dataset_from_stream(std::span<const std::int32_t> stream, std::size_t vocab, std::size_t seq_len,
                               std::size_t batch_size);

// Corpus sampled from a Dirichlet(concentration) order-2 chain; the chain's
// perplexity floor is stored on the dataset.
Dataset gen_lm(Rng& rng, std::size_t n_tokens, std::size_t vocab, std::size_t seq_len, std::size_t batch_size,
               double concentration = 0.3);

}  // namespace mpq
