// SPDX-License-Identifier: Apache-2.0

#include "mpq/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <set>
#include <tuple>

#include "mpq/rng.hpp"
#include "mpq/synthetic.hpp"

namespace mpq {

std::string AllocatorConfig::label() const {
  switch (kind) {
    case AllocatorKind::kmeans:
      return "kmeans";
    case AllocatorKind::budgeted:
      return "budgeted(" + std::to_string(budget_bytes) + ")";
    case AllocatorKind::uniform:
      return "uniform(" + std::to_string(bits) + ")";
  }
  return "unknown";
}

// ---- Configuration ---------------------------------------------------------

namespace {

bool non_negative_integer(const Json& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

// Typed, fail-closed access to one JSON object of the config.
class Section {
 public:
  Section(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }

  bool has(const char* key) {
    seen_.insert(key);
    return j_.contains(key);
  }

  std::size_t count(const char* key, std::size_t fallback) {
    if (!has(key)) return fallback;
    const Json& v = j_.at(key);
    if (!non_negative_integer(v)) throw ConfigError(where(key) + " must be a non-negative integer");
    return v.get<std::size_t>();
  }

  std::uint64_t u64(const char* key) {
    if (!has(key)) throw ConfigError(where(key) + " is required");
    const Json& v = j_.at(key);
    if (!non_negative_integer(v)) throw ConfigError(where(key) + " must be a non-negative integer");
    return v.get<std::uint64_t>();
  }

  double number(const char* key, double fallback) {
    if (!has(key)) return fallback;
    const Json& v = j_.at(key);
    if (!v.is_number()) throw ConfigError(where(key) + " must be a number");
    return v.get<double>();
  }

  std::string text(const char* key, const std::string& fallback) {
    if (!has(key)) return fallback;
    const Json& v = j_.at(key);
    if (!v.is_string()) throw ConfigError(where(key) + " must be a string");
    return v.get<std::string>();
  }

  std::vector<double> numbers(const char* key, const std::vector<double>& fallback) {
    if (!has(key)) return fallback;
    const Json& v = j_.at(key);
    if (!v.is_array()) throw ConfigError(where(key) + " must be an array of numbers");
    std::vector<double> out;
    for (const auto& e : v) {
      if (!e.is_number()) throw ConfigError(where(key) + " must be an array of numbers");
      out.push_back(e.get<double>());
    }
    return out;
  }

  const Json* object(const char* key) {
    if (!has(key)) return nullptr;
    return &j_.at(key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError("unknown key " + where(it.key().c_str()));
  }

  std::string where(const char* key = nullptr) const {
    if (!key) return path_.empty() ? "config" : "'" + path_ + "'";
    return "'" + (path_.empty() ? std::string(key) : path_ + "." + key) + "'";
  }

 private:
  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <typename F>
auto translate(F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
}

}  // namespace

RunConfig parse_config(const Json& j) {
  RunConfig c;
  Section top(j, "");
  c.seed = top.u64("seed");
  c.task = translate([&] { return task_from_string(top.text("task", "classification")); });
  c.method = translate([&] { return method_from_string(top.text("method", "cmpq")); });
  c.lambda = top.number("lambda", c.lambda);
  if (!(c.lambda >= 0.0)) throw ConfigError("lambda must be >= 0");

  if (const Json* d = top.object("data")) {
    Section s(*d, "data");
    c.data.source = s.text("source", c.data.source);
    if (c.data.source != "synthetic" && c.data.source != "files")
      throw ConfigError("data.source must be 'synthetic' or 'files'");
    c.data.vocab_size = s.count("vocab_size", c.data.vocab_size);
    c.data.seq_len = s.count("seq_len", c.data.seq_len);
    c.data.batch_size = s.count("batch_size", c.data.batch_size);
    c.data.n_train = s.count("n_train", c.data.n_train);
    c.data.n_calib = s.count("n_calib", c.data.n_calib);
    c.data.n_eval = s.count("n_eval", c.data.n_eval);
    c.data.train_path = s.text("train", "");
    c.data.calib_path = s.text("calib", "");
    c.data.eval_path = s.text("eval", "");
    s.finish();
  }
  if (c.data.seq_len == 0 || c.data.batch_size == 0) throw ConfigError("data.seq_len and data.batch_size must be >= 1");
  if (c.data.source == "synthetic" && (c.data.n_train == 0 || c.data.n_calib == 0 || c.data.n_eval == 0))
    throw ConfigError("synthetic splits need at least one example each");
  if (c.data.source == "files" && c.data.eval_path.empty()) throw ConfigError("data.eval is required for file data");

  if (const Json* m = top.object("model")) {
    Section s(*m, "model");
    c.model.n_layers = s.count("n_layers", c.model.n_layers);
    c.model.d_model = s.count("d_model", c.model.d_model);
    c.model.n_heads = s.count("n_heads", c.model.n_heads);
    c.model.d_ff = s.count("d_ff", c.model.d_ff);
    c.model.path = s.text("path", "");
    s.finish();
  }
  if (c.model.path.empty() && c.data.source == "files" && (c.data.train_path.empty() || c.data.calib_path.empty()))
    throw ConfigError("data.train and data.calib are required when training on file data");

  if (const Json* t = top.object("train")) {
    Section s(*t, "train");
    c.train.epochs = s.count("epochs", c.train.epochs);
    c.train.lr = s.number("lr", c.train.lr);
    c.train.batch_size = s.count("batch_size", c.train.batch_size);
    s.finish();
  }

  if (const Json* a = top.object("allocator")) {
    Section s(*a, "allocator");
    const std::string kind = s.text("kind", "kmeans");
    if (kind == "kmeans") {
      c.allocator.kind = AllocatorKind::kmeans;
    } else if (kind == "budgeted") {
      c.allocator.kind = AllocatorKind::budgeted;
    } else if (kind == "uniform") {
      c.allocator.kind = AllocatorKind::uniform;
    } else {
      throw ConfigError("allocator.kind must be kmeans, budgeted or uniform");
    }
    c.allocator.budget_bytes = s.count("budget_bytes", 0);
    c.allocator.bits = static_cast<int>(s.count("bits", 16));
    const std::string solver = s.text("solver", "auto");
    if (solver == "auto") {
      c.allocator.solver = BudgetSolver::automatic;
    } else if (solver == "exhaustive") {
      c.allocator.solver = BudgetSolver::exhaustive;
    } else if (solver == "dp") {
      c.allocator.solver = BudgetSolver::dp;
    } else {
      throw ConfigError("allocator.solver must be auto, exhaustive or dp");
    }
    s.finish();
    if (c.allocator.kind == AllocatorKind::budgeted && !s.has("budget_bytes"))
      throw ConfigError("allocator.budget_bytes is required for the budgeted allocator");
    if (c.allocator.kind == AllocatorKind::uniform && !is_supported_width(c.allocator.bits))
      throw ConfigError("allocator.bits must be 4, 8 or 16");
  }

  if (const Json* a = top.object("analysis")) {
    Section s(*a, "analysis");
    c.analysis.cca_dim_cap = s.count("cca_dim_cap", c.analysis.cca_dim_cap);
    c.analysis.sparsity_levels = s.numbers("sparsity_levels", c.analysis.sparsity_levels);
    c.analysis.delta = s.number("delta", c.analysis.delta);
    c.analysis.mode = translate([&] { return tdmpq_mode_from_string(s.text("tdmpq_mode", "delta")); });
    c.analysis.workers = s.count("workers", c.analysis.workers);
    s.finish();
  }
  if (c.analysis.cca_dim_cap == 0) throw ConfigError("analysis.cca_dim_cap must be >= 1");
  if (!(c.analysis.delta >= 0.0)) throw ConfigError("analysis.delta must be >= 0");
  for (double v : c.analysis.sparsity_levels)
    if (!(v >= 0.0 && v < 1.0)) throw ConfigError("analysis.sparsity_levels must lie in [0, 1)");

  if (const Json* a = top.object("artifacts")) {
    Section s(*a, "artifacts");
    c.profile_path = s.text("profile", "");
    c.plan_path = s.text("plan", "");
    s.finish();
  }
  top.finish();
  c.echo = j;
  return c;
}

namespace {

void resolve(std::string& path, const std::filesystem::path& base) {
  if (path.empty()) return;
  std::filesystem::path p(path);
  if (p.is_relative()) p = base / p;
  if (!std::filesystem::exists(p)) throw ConfigError("referenced path does not exist: " + p.string());
  path = p.string();
}

void resolve_paths(RunConfig& c, const std::filesystem::path& base) {
  resolve(c.data.train_path, base);
  resolve(c.data.calib_path, base);
  resolve(c.data.eval_path, base);
  resolve(c.model.path, base);
  resolve(c.profile_path, base);
  resolve(c.plan_path, base);
}

Json read_config_json(const std::filesystem::path& path) {
  try {
    return read_json(path);
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
}

}  // namespace

RunConfig load_config(const std::filesystem::path& path, std::optional<std::uint64_t> seed_override) {
  Json j = read_config_json(path);
  if (seed_override && j.is_object()) j["seed"] = *seed_override;
  RunConfig c = parse_config(j);
  resolve_paths(c, path.parent_path());
  return c;
}

StageSeeds stage_seeds(std::uint64_t master) {
  return StageSeeds{derive_seed(master, 1), derive_seed(master, 2), derive_seed(master, 3), derive_seed(master, 4),
                    derive_seed(master, 5)};
}

// ---- Stages ----------------------------------------------------------------

namespace {

template <typename F>
auto stage(const char* name, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

Dataset load_split(const std::string& path, const RunConfig& c) {
  const std::string ext = std::filesystem::path(path).extension().string();
  if (ext == ".json") return dataset_from_json(read_json(path));
  if (ext == ".txt") return ingest_text(path, c.data.seq_len, c.data.batch_size);
  if (ext == ".tsv") return ingest_labeled(path, c.data.seq_len, c.data.batch_size);
  throw ConfigError("cannot tell the format of '" + path + "' (expected .json, .txt or .tsv)");
}

Dataset subset(const Dataset& whole, const std::vector<Example>& examples, std::size_t begin, std::size_t count,
               std::size_t batch_size) {
  std::vector<Example> part(examples.begin() + static_cast<std::ptrdiff_t>(begin),
                            examples.begin() + static_cast<std::ptrdiff_t>(begin + count));
  Dataset d = make_dataset(whole.task, whole.vocab_size, whole.n_classes, part, batch_size);
  d.perplexity_floor = whole.perplexity_floor;
  return d;
}

std::size_t max_seq_len(const Splits& s) {
  std::size_t m = 1;
  for (const Dataset* d : {&s.train, &s.calib, &s.eval})
    for (const auto& b : d->batches) m = std::max(m, b.seq_len);
  return m;
}

}  // namespace

Splits make_splits(const RunConfig& c) {
  Splits s;
  if (c.data.source == "files") {
    s.eval = load_split(c.data.eval_path, c);
    s.calib = c.data.calib_path.empty() ? s.eval : load_split(c.data.calib_path, c);
    s.train = c.data.train_path.empty() ? s.calib : load_split(c.data.train_path, c);
  } else {
    Rng rng(stage_seeds(c.seed).data);
    const std::size_t total = c.data.n_train + c.data.n_calib + c.data.n_eval;
    const Dataset whole = c.task == TaskKind::classification
                              ? gen_classification(rng, total, c.data.seq_len, c.data.vocab_size, c.data.batch_size)
                              : gen_lm(rng, total * c.data.seq_len + 1, c.data.vocab_size, c.data.seq_len,
                                       c.data.batch_size);
    const auto examples = examples_of(whole);
    s.train = subset(whole, examples, 0, c.data.n_train, c.data.batch_size);
    s.calib = subset(whole, examples, c.data.n_train, c.data.n_calib, c.data.batch_size);
    s.eval = subset(whole, examples, c.data.n_train + c.data.n_calib, c.data.n_eval, c.data.batch_size);
  }
  for (const Dataset* d : {&s.train, &s.calib, &s.eval}) {
    if (d->task != c.task) throw ConfigError("data task does not match config task '" + to_string(c.task) + "'");
    if (d->vocab_size != s.eval.vocab_size) throw ConfigError("data splits disagree on vocabulary size");
  }
  return s;
}

TransformerModel obtain_model(const RunConfig& c, const Splits& data, std::optional<TrainLog>* log) {
  if (!c.model.path.empty()) {
    TransformerModel m = model_from_container(load(c.model.path));
    if (m.config().task != c.task) throw ConfigError("model task does not match config task");
    check_compatible(m.config(), data.eval);
    return m;
  }
  ModelConfig mc;
  mc.n_layers = c.model.n_layers;
  mc.d_model = c.model.d_model;
  mc.n_heads = c.model.n_heads;
  mc.d_ff = c.model.d_ff;
  mc.vocab_size = data.train.vocab_size;
  mc.max_seq_len = max_seq_len(data);
  mc.task = c.task;
  mc.n_classes = c.task == TaskKind::classification ? std::max<std::size_t>(2, data.train.n_classes) : 0;
  mc.validate();
  const StageSeeds seeds = stage_seeds(c.seed);
  Rng init(seeds.init);
  TransformerModel m = TransformerModel::initialized(mc, init);
  Rng rng(seeds.train);
  TrainLog tl = train(m, data.train, c.train, rng);
  if (log) *log = std::move(tl);
  return m;
}

Prepared prepare(const RunConfig& c) {
  Prepared p;
  p.data = stage("data", [&] { return make_splits(c); });
  p.model = stage(c.model.path.empty() ? "train" : "load", [&] { return obtain_model(c, p.data, &p.train_log); });
  p.base = stage("base-eval", [&] { return evaluate(p.model, p.data.eval); });
  return p;
}

SensitivityProfile analyze(const RunConfig& c, const Prepared& prep) {
  AnalysisSettings settings = c.analysis;
  settings.seed = stage_seeds(c.seed).analysis;
  switch (c.method) {
    case Method::cmpq:
      return cmpq(prep.model, prep.data.calib, settings);
    case Method::pmpq:
      return pmpq(prep.model, prep.data.eval, settings, prep.base);
    case Method::tdmpq: {
      TransformerModel scratch = prep.model;
      return tdmpq(scratch, prep.data.eval, settings);
    }
  }
  throw DomainError("unknown method");
}

PrecisionPlan allocate(const RunConfig& c, const Prepared& prep, const SensitivityProfile& profile) {
  const std::size_t n_layers = prep.model.config().n_layers;
  if (profile.scores.size() != n_layers) throw DimensionError("profile length does not match the model");
  switch (c.allocator.kind) {
    case AllocatorKind::kmeans: {
      Rng rng(stage_seeds(c.seed).allocate);
      return kmeans_plan(profile.scores, rng);
    }
    case AllocatorKind::budgeted:
      return budgeted_plan(prep.model, profile.scores, c.allocator.budget_bytes, BudgetOptions{c.allocator.solver})
          .plan;
    case AllocatorKind::uniform:
      return PrecisionPlan::uniform(n_layers, c.allocator.bits);
  }
  throw DomainError("unknown allocator");
}

// ---- Report ----------------------------------------------------------------

namespace {

Json optional_number(const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); }

}  // namespace

Json report_to_json(const QuantReport& r) {
  Json j;
  j["schema_version"] = kSchemaVersion;
  j["toolkit_version"] = kToolkitVersion;
  j["task"] = to_string(r.task);
  j["method"] = to_string(r.method);
  j["allocator"] = r.allocator;
  j["metric"] = r.task == TaskKind::classification ? "accuracy" : "perplexity";
  j["sensitivities"] = r.profile.scores;
  j["plan"] = r.plan.bits;
  j["m_o_bytes"] = r.memory.m_o_bytes;
  j["m_q_bytes"] = r.memory.m_q_bytes;
  j["cr"] = r.memory.cr;
  j["fpr_percent"] = r.memory.fpr_percent;
  j["base_metric"] = r.base_metric;
  j["quant_metric"] = r.quant_metric;
  j["drop"] = r.drop;
  Json seg;
  seg["first30"] = optional_number(r.segments.first30);
  seg["mid30"] = optional_number(r.segments.mid30);
  seg["rest"] = optional_number(r.segments.rest);
  seg["sizes"] = {r.segments.first_size, r.segments.mid_size, r.segments.rest_size};
  seg["global_mean"] = r.segments.global_mean;
  seg["deviation"] = "population";
  j["segment_stats"] = seg;
  Json obj;
  obj["lambda"] = r.lambda;
  obj["a"] = r.objective.a;
  obj["b"] = r.objective.b;
  obj["total"] = r.objective.total;
  j["objective"] = obj;
  j["profile"] = profile_to_json(r.profile);
  j["accounting"] = "m_q_bytes counts payloads plus fp32 scale/min metadata; embeddings, norms and head stay fp16";
  j["config"] = r.config_echo;
  return j;
}

RunOutput run_prepared(const RunConfig& c, const Prepared& prep) {
  RunOutput out;
  QuantReport& r = out.report;
  r.method = c.method;
  r.allocator = c.allocator.label();
  r.task = c.task;
  r.lambda = c.lambda;
  r.config_echo = c.echo;
  r.profile = stage("analyze", [&] { return analyze(c, prep); });
  r.plan = stage("allocate", [&] { return allocate(c, prep, r.profile); });
  out.quantized = stage("quantize", [&] { return apply_plan(prep.model, r.plan); });
  stage("evaluate", [&] {
    r.base_metric = prep.base.metric();
    r.quant_metric = evaluate(out.quantized.simulated, prep.data.eval).metric();
    r.drop = c.task == TaskKind::classification ? r.base_metric - r.quant_metric : r.quant_metric - r.base_metric;
    r.objective = objective(prep.model, r.plan, prep.data.calib, c.lambda);
    return 0;
  });
  stage("account", [&] {
    r.memory = memory_report(fp32_container(prep.model), out.quantized.container);
    r.segments = segment_stats(r.profile.scores);
    return 0;
  });
  return out;
}

QuantReport run(const RunConfig& c, const std::optional<std::filesystem::path>& out_dir) {
  const Prepared prep = prepare(c);
  RunOutput out = run_prepared(c, prep);
  if (out_dir) {
    stage("write", [&] {
      write_json(report_to_json(out.report), *out_dir / "report.json");
      write_json(profile_to_json(out.report.profile), *out_dir / "profile.json");
      write_json(plan_to_json(out.report.plan), *out_dir / "plan.json");
      save(out.quantized.container, *out_dir / "quantized.mpqw");
      return 0;
    });
  }
  return out.report;
}

// ---- Compare ---------------------------------------------------------------

std::vector<RunConfig> parse_compare(const Json& j, std::optional<std::uint64_t> seed_override) {
  if (!j.is_object() || !j.contains("base") || !j.contains("runs") || !j.at("runs").is_array())
    throw ConfigError("compare config needs 'base' (object) and 'runs' (array)");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (it.key() != "base" && it.key() != "runs") throw ConfigError("unknown key '" + it.key() + "' in compare config");
  if (j.at("runs").empty()) throw ConfigError("compare needs at least one run");
  std::vector<RunConfig> out;
  for (const auto& patch : j.at("runs")) {
    Json merged = j.at("base");
    merged.merge_patch(patch);
    if (seed_override) merged["seed"] = *seed_override;
    out.push_back(parse_config(merged));
  }
  return out;
}

std::vector<CompareRow> compare(const std::vector<RunConfig>& configs) {
  if (configs.empty()) throw ConfigError("compare needs at least one configuration");
  const RunConfig& first = configs.front();
  for (const auto& c : configs) {
    if (c.seed != first.seed || c.task != first.task || !(c.data == first.data) || !(c.model == first.model) ||
        !(c.train == first.train))
      throw ConfigError("compared runs must share seed, task, data, model and training settings");
  }
  const Prepared prep = prepare(first);
  std::vector<CompareRow> rows;
  for (const auto& c : configs) {
    const QuantReport r = run_prepared(c, prep).report;
    rows.push_back(CompareRow{to_string(r.method), r.allocator,
                              r.task == TaskKind::classification ? "accuracy" : "perplexity", r.base_metric,
                              r.quant_metric, r.drop, r.memory.cr, r.memory.fpr_percent, r.memory.m_q_bytes});
  }
  std::stable_sort(rows.begin(), rows.end(), [](const CompareRow& a, const CompareRow& b) {
    return std::tie(a.method, a.allocator) < std::tie(b.method, b.allocator);
  });
  return rows;
}

Json compare_to_json(const std::vector<CompareRow>& rows) {
  Json j;
  j["schema_version"] = kSchemaVersion;
  j["toolkit_version"] = kToolkitVersion;
  j["rows"] = Json::array();
  for (const auto& r : rows) {
    Json jr;
    jr["method"] = r.method;
    jr["allocator"] = r.allocator;
    jr["metric"] = r.metric;
    jr["base_metric"] = r.base_metric;
    jr["quant_metric"] = r.quant_metric;
    jr["drop"] = r.drop;
    jr["cr"] = r.cr;
    jr["fpr_percent"] = r.fpr_percent;
    jr["m_q_bytes"] = r.m_q_bytes;
    j["rows"].push_back(std::move(jr));
  }
  return j;
}

std::string compare_to_text(const std::vector<CompareRow>& rows) {
  std::vector<std::vector<std::string>> cells{{"method", "allocator", "metric", "base", "quant", "drop", "CR", "FPR%"}};
  char buf[64];
  auto fmt = [&](const char* f, double v) {
    std::snprintf(buf, sizeof buf, f, v);
    return std::string(buf);
  };
  for (const auto& r : rows)
    cells.push_back({r.method, r.allocator, r.metric, fmt("%.4f", r.base_metric), fmt("%.4f", r.quant_metric),
                     fmt("%.4f", r.drop), fmt("%.2fx", r.cr), fmt("%.1f", r.fpr_percent)});
  std::vector<std::size_t> width(cells[0].size(), 0);
  for (const auto& row : cells)
    for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
  std::string out;
  for (const auto& row : cells) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      out += row[i];
      if (i + 1 < row.size()) out += std::string(width[i] - row[i].size() + 2, ' ');
    }
    out += '\n';
  }
  return out;
}

}  // namespace mpq
