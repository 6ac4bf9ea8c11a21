// SPDX-License-Identifier: Apache-2.0

#include "mpq/io.hpp"

#include <fstream>
#include <iterator>

#include "mpq/synthetic.hpp"

namespace mpq {

namespace {

std::string read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

template <typename T>
T field(const Json& j, const char* key) {
  if (!j.contains(key)) throw FormatError(std::string("missing field '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("field '") + key + "': " + e.what());
  }
}

}  // namespace

Dataset ingest_text(const std::filesystem::path& path, std::size_t seq_len, std::size_t batch_size) {
  if (seq_len == 0 || batch_size == 0) throw DomainError("seq_len and batch_size must be >= 1");
  const std::string bytes = read_bytes(path);
  if (bytes.empty()) throw DomainError(path.string() + " is empty");
  if (bytes.size() < seq_len + 1)
    throw DomainError(path.string() + " holds " + std::to_string(bytes.size()) + " bytes, need at least seq_len + 1 = " +
                      std::to_string(seq_len + 1));
  std::vector<std::int32_t> stream(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) stream[i] = static_cast<unsigned char>(bytes[i]);
  return lm_dataset_from_stream(stream, kByteVocab, seq_len, batch_size);
}

Dataset ingest_labeled(const std::filesystem::path& path, std::size_t seq_len, std::size_t batch_size) {
  if (seq_len == 0 || batch_size == 0) throw DomainError("seq_len and batch_size must be >= 1");
  const std::string bytes = read_bytes(path);
  std::vector<Example> examples;
  std::size_t line_no = 0, pos = 0;
  while (pos < bytes.size()) {
    std::size_t end = bytes.find('\n', pos);
    if (end == std::string::npos) end = bytes.size();
    std::string line = bytes.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::size_t tab = line.find('\t');
    if (tab == std::string::npos) throw ParseError("expected 'label<TAB>text'", line_no);
    const std::string label = line.substr(0, tab);
    if (label != "0" && label != "1") throw ParseError("label must be 0 or 1, got '" + label + "'", line_no);
    const std::string text = line.substr(tab + 1);
    if (text.empty()) throw ParseError("empty text", line_no);
    Example ex;
    for (std::size_t i = 0; i < text.size() && i < seq_len; ++i)
      ex.tokens.push_back(static_cast<unsigned char>(text[i]));
    ex.targets = {label == "1" ? 1 : 0};
    examples.push_back(std::move(ex));
  }
  if (examples.empty()) throw DomainError(path.string() + " contains no labeled examples");
  return make_dataset(TaskKind::classification, kByteVocab, 2, examples, batch_size);
}

void export_labeled(const Dataset& data, const std::filesystem::path& path) {
  if (data.task != TaskKind::classification) throw DomainError("export_labeled needs classification data");
  std::string out;
  for (const auto& ex : examples_of(data)) {
    out += std::to_string(ex.targets.at(0));
    out += '\t';
    for (auto t : ex.tokens) {
      if (t < 0 || t > 255 || t == '\n') throw DomainError("token " + std::to_string(t) + " is not a text byte");
      out += static_cast<char>(t);
    }
    out += '\n';
  }
  write_text(out, path);
}

Json dataset_to_json(const Dataset& data) {
  Json j;
  j["schema_version"] = kSchemaVersion;
  j["task"] = to_string(data.task);
  j["vocab_size"] = data.vocab_size;
  j["n_classes"] = data.n_classes;
  j["n_samples"] = data.n_samples;
  if (data.perplexity_floor) j["perplexity_floor"] = *data.perplexity_floor;
  j["batches"] = Json::array();
  for (const auto& b : data.batches) {
    Json jb;
    jb["batch_size"] = b.batch_size;
    jb["seq_len"] = b.seq_len;
    jb["tokens"] = b.tokens;
    jb["targets"] = b.targets;
    j["batches"].push_back(std::move(jb));
  }
  return j;
}

Dataset dataset_from_json(const Json& j) {
  Dataset d;
  d.task = task_from_string(field<std::string>(j, "task"));
  d.vocab_size = field<std::size_t>(j, "vocab_size");
  d.n_classes = field<std::size_t>(j, "n_classes");
  d.n_samples = field<std::size_t>(j, "n_samples");
  if (j.contains("perplexity_floor")) d.perplexity_floor = field<double>(j, "perplexity_floor");
  for (const auto& jb : field<Json>(j, "batches")) {
    Batch b;
    b.batch_size = field<std::size_t>(jb, "batch_size");
    b.seq_len = field<std::size_t>(jb, "seq_len");
    b.tokens = field<std::vector<std::int32_t>>(jb, "tokens");
    b.targets = field<std::vector<std::int32_t>>(jb, "targets");
    d.batches.push_back(std::move(b));
  }
  validate(d);
  return d;
}

Json profile_to_json(const SensitivityProfile& profile) {
  Json j;
  j["schema_version"] = kSchemaVersion;
  j["method"] = to_string(profile.method);
  j["scores"] = profile.scores;
  Json s;
  s["seed"] = profile.settings.seed;
  switch (profile.method) {
    case Method::cmpq:
      s["cca_dim_cap"] = profile.settings.cca_dim_cap;
      s["cca_dims"] = profile.cca_dims;
      break;
    case Method::pmpq:
      s["sparsity_levels"] = profile.settings.sparsity_levels;
      break;
    case Method::tdmpq:
      s["delta"] = profile.settings.delta;
      s["mode"] = to_string(profile.settings.mode);
      break;
  }
  j["settings"] = s;
  j["base_metric"] = profile.base_metric ? Json(*profile.base_metric) : Json(nullptr);
  j["warnings"] = profile.warnings;
  return j;
}

SensitivityProfile profile_from_json(const Json& j) {
  SensitivityProfile p;
  p.method = method_from_string(field<std::string>(j, "method"));
  p.scores = field<std::vector<double>>(j, "scores");
  const Json s = field<Json>(j, "settings");
  p.settings.seed = field<std::uint64_t>(s, "seed");
  if (s.contains("cca_dim_cap")) p.settings.cca_dim_cap = field<std::size_t>(s, "cca_dim_cap");
  if (s.contains("cca_dims")) p.cca_dims = field<std::size_t>(s, "cca_dims");
  if (s.contains("sparsity_levels")) p.settings.sparsity_levels = field<std::vector<double>>(s, "sparsity_levels");
  if (s.contains("delta")) p.settings.delta = field<double>(s, "delta");
  if (s.contains("mode")) p.settings.mode = tdmpq_mode_from_string(field<std::string>(s, "mode"));
  if (j.contains("base_metric") && !j.at("base_metric").is_null()) p.base_metric = field<double>(j, "base_metric");
  if (j.contains("warnings")) p.warnings = field<std::vector<std::string>>(j, "warnings");
  return p;
}

Json plan_to_json(const PrecisionPlan& plan) {
  Json j;
  j["schema_version"] = kSchemaVersion;
  j["provenance"] = to_string(plan.provenance);
  j["bits"] = plan.bits;
  return j;
}

PrecisionPlan plan_from_json(const Json& j) {
  PrecisionPlan p;
  p.provenance = provenance_from_string(field<std::string>(j, "provenance"));
  p.bits = field<std::vector<int>>(j, "bits");
  p.validate(p.bits.size());
  return p;
}

Json read_json(const std::filesystem::path& path) {
  const std::string text = read_bytes(path);
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_json(const Json& j, const std::filesystem::path& path) { write_text(j.dump(2) + "\n", path); }

void write_text(const std::string& text, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace mpq
