// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "mpq/dataset.hpp"
#include "mpq/plan.hpp"
#include "mpq/sensitivity.hpp"

namespace mpq {

using Json = nlohmann::ordered_json;

inline constexpr int kSchemaVersion = 1;
inline constexpr const char* kToolkitVersion = "0.1.0";

// Byte-level tokenizer: ids 0-255 are raw bytes; 256 and 257 are reserved
// specials, so ingested data always uses a vocabulary of 258.
inline constexpr std::size_t kByteVocab = 258;

// Next-token language-model data from a raw byte file: non-overlapping
// seq_len windows, floor((bytes - 1) / seq_len) sequences.
Dataset ingest_text(const std::filesystem::path& path, std::size_t seq_len, std::size_t batch_size);

// Binary classification data from `label<TAB>text` lines, label 0 or 1. Text
// is byte-tokenized and truncated to seq_len; consecutive equal-length
// examples share a batch. Blank lines are skipped. Throws ParseError with
// the 1-based line number on a malformed line.
Dataset ingest_labeled(const std::filesystem::path& path, std::size_t seq_len, std::size_t batch_size);

// Inverse of ingest_labeled for byte-vocabulary classification data.
void export_labeled(const Dataset& data, const std::filesystem::path& path);

Json dataset_to_json(const Dataset& data);
Dataset dataset_from_json(const Json& j);

Json profile_to_json(const SensitivityProfile& profile);
SensitivityProfile profile_from_json(const Json& j);

Json plan_to_json(const PrecisionPlan& plan);
PrecisionPlan plan_from_json(const Json& j);

Json read_json(const std::filesystem::path& path);
// Pretty-printed with a trailing newline.
void write_json(const Json& j, const std::filesystem::path& path);
void write_text(const std::string& text, const std::filesystem::path& path);

}  // namespace mpq
