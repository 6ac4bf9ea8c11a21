// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace mpq {

enum class TaskKind : std::uint8_t { classification = 0, language_model = 1 };

std::string to_string(TaskKind task);
TaskKind task_from_string(const std::string& name);

// batch_size sequences of seq_len tokens, row-major. targets holds one class id
// per sequence (classification) or one next-token id per position (language model).
struct Batch {
  std::size_t batch_size = 0;
  std::size_t seq_len = 0;
  std::vector<std::int32_t> tokens;
  std::vector<std::int32_t> targets;

  std::int32_t token(std::size_t b, std::size_t t) const { return tokens[b * seq_len + t]; }
  bool operator==(const Batch&) const = default;
};

struct Dataset {
  TaskKind task = TaskKind::classification;
  std::size_t vocab_size = 0;
  std::size_t n_classes = 0;  // classification only
  std::vector<Batch> batches;
  std::size_t n_samples = 0;  // == sum of batch sizes
  // Entropy-rate perplexity of the generating chain, for synthetic LM corpora.
  std::optional<double> perplexity_floor;

  bool operator==(const Dataset&) const = default;
};

// Throws DomainError when token or target ids are out of range, or the
// sample count disagrees with the batches.
void validate(const Dataset& data);

// One example (a single row of a batch) with its targets.
struct Example {
  std::vector<std::int32_t> tokens;
  std::vector<std::int32_t> targets;
};

std::vector<Example> examples_of(const Dataset& data);

// Groups consecutive equal-length examples into batches of at most batch_size.
Dataset make_dataset(TaskKind task, std::size_t vocab_size, std::size_t n_classes,
                     const std::vector<Example>& examples, std::size_t batch_size);

}  // namespace mpq
