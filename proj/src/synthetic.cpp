// SPDX-License-Identifier: Apache-2.0

#include "mpq/synthetic.hpp"

#include <algorithm>
#include <cmath>

#include "mpq/errors.hpp"
#include "mpq/rng.hpp"

namespace mpq {

std::int32_t counting_label(std::span<const std::int32_t> tokens, const CountingTask& task) {
  const auto a = std::count(tokens.begin(), tokens.end(), task.token_a);
  const auto b = std::count(tokens.begin(), tokens.end(), task.token_b);
  return a > b ? 1 : 0;
}

Dataset gen_classification(Rng& rng, std::size_t n, std::size_t seq_len, std::size_t vocab,
                           std::size_t batch_size, const CountingTask& task) {
  if (n == 0 || seq_len == 0) throw DomainError("gen_classification needs n, seq_len >= 1");
  if (vocab < 2 || static_cast<std::size_t>(std::max(task.token_a, task.token_b)) >= vocab)
    throw DomainError("counting tokens must lie inside the vocabulary");
  std::vector<Example> examples;
  examples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto want = static_cast<std::int32_t>(rng.below(2));
    Example e;
    e.tokens.resize(seq_len);
    do {
      for (auto& t : e.tokens) {
        const double u = rng.uniform();
        if (u < 0.25) {
          t = task.token_a;
        } else if (u < 0.5) {
          t = task.token_b;
        } else {
          t = static_cast<std::int32_t>(rng.below(vocab));
        }
      }
    } while (counting_label(e.tokens, task) != want);
    e.targets = {want};
    examples.push_back(std::move(e));
  }
  return make_dataset(TaskKind::classification, vocab, 2, examples, batch_size);
}

MarkovChain::MarkovChain(std::size_t vocab, std::vector<double> transitions)
    : vocab_(vocab), p_(std::move(transitions)) {
  if (vocab_ < 1 || p_.size() != vocab_ * vocab_ * vocab_)
    throw DimensionError("transition table must be vocab^3 entries");
  for (std::size_t row = 0; row < vocab_ * vocab_; ++row) {
    double s = 0.0;
    for (std::size_t j = 0; j < vocab_; ++j) {
      const double v = p_[row * vocab_ + j];
      if (!(v >= 0.0)) throw DomainError("negative transition probability");
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-9) throw DomainError("transition row does not sum to 1");
  }
}

MarkovChain MarkovChain::dirichlet(Rng& rng, std::size_t vocab, double concentration) {
  if (!(concentration > 0.0)) throw DomainError("Dirichlet concentration must be > 0");
  std::vector<double> p(vocab * vocab * vocab);
  for (std::size_t row = 0; row < vocab * vocab; ++row) {
    double s = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) {
      p[row * vocab + j] = rng.gamma(concentration);
      s += p[row * vocab + j];
    }
    if (s <= 0.0) {
      // Every gamma draw underflowed; fall back to a uniform row.
      for (std::size_t j = 0; j < vocab; ++j) p[row * vocab + j] = 1.0 / static_cast<double>(vocab);
      continue;
    }
    for (std::size_t j = 0; j < vocab; ++j) p[row * vocab + j] /= s;
  }
  return MarkovChain(vocab, std::move(p));
}

std::vector<double> MarkovChain::stationary() const {
  const std::size_t V = vocab_, states = V * V;
  std::vector<double> pi(states, 1.0 / static_cast<double>(states)), next(states);
  for (int it = 0; it < 100000; ++it) {
    std::fill(next.begin(), next.end(), 0.0);
    for (std::size_t a = 0; a < V; ++a)
      for (std::size_t b = 0; b < V; ++b) {
        const double w = pi[a * V + b];
        if (w == 0.0) continue;
        const double* row = p_.data() + (a * V + b) * V;
        for (std::size_t c = 0; c < V; ++c) next[b * V + c] += w * row[c];
      }
    double change = 0.0;
    for (std::size_t s = 0; s < states; ++s) {
      const double lazy = 0.5 * pi[s] + 0.5 * next[s];
      change += std::abs(lazy - pi[s]);
      pi[s] = lazy;
    }
    if (change < 1e-14) break;
  }
  return pi;
}

double MarkovChain::entropy_rate() const {
  const std::vector<double> pi = stationary();
  double h = 0.0;
  for (std::size_t s = 0; s < vocab_ * vocab_; ++s) {
    double row_h = 0.0;
    for (std::size_t j = 0; j < vocab_; ++j) {
      const double p = p_[s * vocab_ + j];
      if (p > 0.0) row_h -= p * std::log(p);
    }
    h += pi[s] * row_h;
  }
  return h;
}

double MarkovChain::perplexity_floor() const { return std::exp(entropy_rate()); }

std::vector<std::int32_t> MarkovChain::sample(Rng& rng, std::size_t n_tokens) const {
  std::vector<std::int32_t> out;
  out.reserve(n_tokens);
  std::size_t a = rng.below(vocab_), b = rng.below(vocab_);
  for (std::size_t i = 0; i < n_tokens; ++i) {
    const double* row = p_.data() + (a * vocab_ + b) * vocab_;
    const double u = rng.uniform();
    double cum = 0.0;
    std::size_t c = vocab_ - 1;
    for (std::size_t j = 0; j < vocab_; ++j) {
      cum += row[j];
      if (u < cum) {
        c = j;
        break;
      }
    }
    while (row[c] == 0.0 && c > 0) --c;  // never emit an impossible symbol after rounding
    out.push_back(static_cast<std::int32_t>(c));
    a = b;
    b = c;
  }
  return out;
}

Dataset lm_dataset_from_stream(std::span<const std::int32_t> stream, std::size_t vocab, std::size_t seq_len,
                               std::size_t batch_size) {
  if (seq_len == 0) throw DomainError("seq_len must be >= 1");
  if (stream.size() < seq_len + 1) throw DomainError("token stream shorter than one sequence");
  const std::size_t n_seq = (stream.size() - 1) / seq_len;
  std::vector<Example> examples(n_seq);
  for (std::size_t i = 0; i < n_seq; ++i) {
    const auto start = stream.begin() + static_cast<std::ptrdiff_t>(i * seq_len);
    examples[i].tokens.assign(start, start + static_cast<std::ptrdiff_t>(seq_len));
    examples[i].targets.assign(start + 1, start + 1 + static_cast<std::ptrdiff_t>(seq_len));
  }
  return make_dataset(TaskKind::language_model, vocab, 0, examples, batch_size);
}

Dataset gen_lm(Rng& rng, std::size_t n_tokens, std::size_t vocab, std::size_t seq_len, std::size_t batch_size,
               double concentration) {
  const MarkovChain chain = MarkovChain::dirichlet(rng, vocab, concentration);
  const auto stream = chain.sample(rng, n_tokens);
  Dataset data = lm_dataset_from_stream(stream, vocab, seq_len, batch_size);
  data.perplexity_floor = chain.perplexity_floor();
  return data;
}

}  // namespace mpq
