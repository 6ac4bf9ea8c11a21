// SPDX-License-Identifier: Apache-2.0

#include "mpq/dataset.hpp"

#include "mpq/errors.hpp"

namespace mpq {

std::string to_string(TaskKind task) {
  return task == TaskKind::classification ? "classification" : "lm";
}

TaskKind task_from_string(const std::string& name) {
  if (name == "classification") return TaskKind::classification;
  if (name == "lm" || name == "language_model") return TaskKind::language_model;
  throw ConfigError("unknown task '" + name + "'");
}

void validate(const Dataset& data) {
  std::size_t total = 0;
  for (const auto& b : data.batches) {
    if (b.batch_size == 0 || b.seq_len == 0) throw DomainError("empty batch");
    if (b.tokens.size() != b.batch_size * b.seq_len) throw DomainError("batch token count mismatch");
    const std::size_t want_targets =
        data.task == TaskKind::classification ? b.batch_size : b.batch_size * b.seq_len;
    if (b.targets.size() != want_targets) throw DomainError("batch target count mismatch");
    for (auto t : b.tokens)
      if (t < 0 || static_cast<std::size_t>(t) >= data.vocab_size)
        throw DomainError("token id " + std::to_string(t) + " outside vocabulary");
    const std::size_t target_limit =
        data.task == TaskKind::classification ? data.n_classes : data.vocab_size;
    for (auto t : b.targets)
      if (t < 0 || static_cast<std::size_t>(t) >= target_limit)
        throw DomainError("target id " + std::to_string(t) + " out of range");
    total += b.batch_size;
  }
  if (total != data.n_samples) throw DomainError("n_samples does not match batch sizes");
}

std::vector<Example> examples_of(const Dataset& data) {
  std::vector<Example> out;
  out.reserve(data.n_samples);
  const bool cls = data.task == TaskKind::classification;
  for (const auto& b : data.batches) {
    for (std::size_t i = 0; i < b.batch_size; ++i) {
      Example e;
      e.tokens.assign(b.tokens.begin() + static_cast<std::ptrdiff_t>(i * b.seq_len),
                      b.tokens.begin() + static_cast<std::ptrdiff_t>((i + 1) * b.seq_len));
      if (cls) {
        e.targets = {b.targets[i]};
      } else {
        e.targets.assign(b.targets.begin() + static_cast<std::ptrdiff_t>(i * b.seq_len),
                         b.targets.begin() + static_cast<std::ptrdiff_t>((i + 1) * b.seq_len));
      }
      out.push_back(std::move(e));
    }
  }
  return out;
}

Dataset make_dataset(TaskKind task, std::size_t vocab_size, std::size_t n_classes,
                     const std::vector<Example>& examples, std::size_t batch_size) {
  if (batch_size == 0) throw DomainError("batch_size must be >= 1");
  Dataset data;
  data.task = task;
  data.vocab_size = vocab_size;
  data.n_classes = task == TaskKind::classification ? n_classes : 0;
  for (const auto& e : examples) {
    if (e.tokens.empty()) throw DomainError("empty example");
    const std::size_t seq = e.tokens.size();
    if (data.batches.empty() || data.batches.back().seq_len != seq ||
        data.batches.back().batch_size == batch_size) {
      Batch b;
      b.seq_len = seq;
      data.batches.push_back(std::move(b));
    }
    Batch& b = data.batches.back();
    b.tokens.insert(b.tokens.end(), e.tokens.begin(), e.tokens.end());
    b.targets.insert(b.targets.end(), e.targets.begin(), e.targets.end());
    ++b.batch_size;
    ++data.n_samples;
  }
  validate(data);
  return data;
}

}  // namespace mpq
