// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mpq/allocate.hpp"
#include "mpq/io.hpp"
#include "mpq/model_io.hpp"
#include "mpq/quant.hpp"
#include "mpq/sensitivity.hpp"
#include "mpq/train.hpp"

namespace mpq {

// Where a data split comes from when data.source is "files". The format
// follows the extension: .json dataset dump, .txt raw text (language model),
// .tsv label<TAB>text lines (classification).
struct DataConfig {
  std::string source = "synthetic";  // "synthetic" or "files"
  std::size_t vocab_size = 16;       // synthetic only; ingested text uses 258
  std::size_t seq_len = 16;
  std::size_t batch_size = 32;
  std::size_t n_train = 2048;
  std::size_t n_calib = 512;
  std::size_t n_eval = 1024;
  std::string train_path, calib_path, eval_path;
  bool operator==(const DataConfig&) const = default;
};

struct ModelRecipe {
  std::size_t n_layers = 4;
  std::size_t d_model = 32;
  std::size_t n_heads = 4;
  std::size_t d_ff = 64;
  std::string path;  // load an MPQW container instead of training
  bool operator==(const ModelRecipe&) const = default;
};

enum class AllocatorKind { kmeans, budgeted, uniform };

struct AllocatorConfig {
  AllocatorKind kind = AllocatorKind::kmeans;
  std::size_t budget_bytes = 0;  // budgeted
  int bits = 16;                 // uniform
  BudgetSolver solver = BudgetSolver::automatic;

  // "kmeans", "budgeted(<bytes>)" or "uniform(<bits>)"
  std::string label() const;
};

struct RunConfig {
  std::uint64_t seed = 0;
  TaskKind task = TaskKind::classification;
  DataConfig data;
  ModelRecipe model;
  TrainOptions train;
  Method method = Method::cmpq;
  AllocatorConfig allocator;
  AnalysisSettings analysis;  // seed is derived from `seed`, never read from here
  double lambda = 0.01;
  // Inputs for the staged CLI verbs.
  std::string profile_path, plan_path;
  Json echo;  // the configuration as given, with overrides applied
};

// Fails closed: unknown keys, wrong types and missing seeds are ConfigErrors.
RunConfig parse_config(const Json& j);
RunConfig load_config(const std::filesystem::path& path, std::optional<std::uint64_t> seed_override = std::nullopt);

// Seeds of the individual stages, derived from the master seed.
struct StageSeeds {
  std::uint64_t data, init, train, analysis, allocate;
};
StageSeeds stage_seeds(std::uint64_t master);

struct Splits {
  Dataset train, calib, eval;
};

struct Prepared {
  TransformerModel model{ModelConfig{}};
  Splits data;
  std::optional<TrainLog> train_log;
  EvalResult base;  // on the eval split, shared by every later stage
};

Splits make_splits(const RunConfig& config);
TransformerModel obtain_model(const RunConfig& config, const Splits& data, std::optional<TrainLog>* log = nullptr);
Prepared prepare(const RunConfig& config);

SensitivityProfile analyze(const RunConfig& config, const Prepared& prep);
PrecisionPlan allocate(const RunConfig& config, const Prepared& prep, const SensitivityProfile& profile);

struct QuantReport {
  Method method = Method::cmpq;
  std::string allocator;
  SensitivityProfile profile;
  PrecisionPlan plan;
  MemoryReport memory;
  TaskKind task = TaskKind::classification;
  double base_metric = 0.0;
  double quant_metric = 0.0;
  double drop = 0.0;  // accuracy: base - quant; perplexity: quant - base
  SegmentStats segments;
  ObjectiveValue objective;
  double lambda = 0.0;
  Json config_echo;
};

Json report_to_json(const QuantReport& report);

struct RunOutput {
  QuantReport report;
  QuantizedModel quantized;
};

// analyze -> allocate -> apply_plan -> evaluate -> account, on prepared inputs.
RunOutput run_prepared(const RunConfig& config, const Prepared& prep);
// prepare + run_prepared. With an output directory, writes report.json,
// profile.json, plan.json and quantized.mpqw there.
QuantReport run(const RunConfig& config, const std::optional<std::filesystem::path>& out_dir = std::nullopt);

struct CompareRow {
  std::string method;
  std::string allocator;
  std::string metric;  // "accuracy" or "perplexity"
  double base_metric = 0.0;
  double quant_metric = 0.0;
  double drop = 0.0;
  double cr = 0.0;
  double fpr_percent = 0.0;
  std::size_t m_q_bytes = 0;
};

// Rows sorted by method name, then allocator label. Every config must share
// seed, task, data, model and training sections; otherwise ConfigError.
std::vector<CompareRow> compare(const std::vector<RunConfig>& configs);
// {"base": {...}, "runs": [patch, ...]}: each run is the base with the patch merged in.
std::vector<RunConfig> parse_compare(const Json& j, std::optional<std::uint64_t> seed_override = std::nullopt);
Json compare_to_json(const std::vector<CompareRow>& rows);
std::string compare_to_text(const std::vector<CompareRow>& rows);

}  // namespace mpq
