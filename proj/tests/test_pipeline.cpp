// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mpq/pipeline.hpp"
#include "support.hpp"

using namespace mpq;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "mpq_test_pipeline" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_file(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  out << bytes;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Json small_config() {
  return Json::parse(R"({
    "seed": 3,
    "task": "classification",
    "data": {"source": "synthetic", "vocab_size": 16, "seq_len": 8, "batch_size": 32,
             "n_train": 256, "n_calib": 64, "n_eval": 128},
    "model": {"n_layers": 3, "d_model": 16, "n_heads": 2, "d_ff": 32},
    "train": {"epochs": 2, "lr": 0.003, "batch_size": 32},
    "method": "cmpq",
    "allocator": {"kind": "kmeans"},
    "lambda": 0.01
  })");
}

RunConfig with(const Json& patch) {
  Json j = small_config();
  j.merge_patch(patch);
  return parse_config(j);
}

}  // namespace

TEST_CASE("ingest_text") {
  const fs::path dir = scratch("text");
  write_file(dir / "ab.txt", "ab");
  const Dataset d = ingest_text(dir / "ab.txt", 1, 8);
  REQUIRE(d.n_samples == 1);
  CHECK(d.vocab_size == kByteVocab);
  CHECK(d.batches[0].tokens == std::vector<std::int32_t>{'a'});
  CHECK(d.batches[0].targets == std::vector<std::int32_t>{'b'});

  write_file(dir / "n.txt", "hello world");
  CHECK(ingest_text(dir / "n.txt", 10, 8).n_samples == 1);
  CHECK(ingest_text(dir / "n.txt", 5, 8).n_samples == 2);
  CHECK(ingest_text(dir / "n.txt", 3, 2) == ingest_text(dir / "n.txt", 3, 2));
  CHECK(ingest_text(dir / "n.txt", 3, 2).batches.size() == 2);

  write_file(dir / "empty.txt", "");
  CHECK_THROWS_AS(ingest_text(dir / "empty.txt", 4, 8), DomainError);
  CHECK_THROWS_AS(ingest_text(dir / "missing.txt", 4, 8), IoError);
}

TEST_CASE("ingest_labeled") {
  const fs::path dir = scratch("labeled");
  write_file(dir / "ok.tsv", "1\tgreat film\n0\tdull\r\n\n");
  const Dataset d = ingest_labeled(dir / "ok.tsv", 6, 8);
  CHECK(d.n_samples == 2);
  const auto ex = examples_of(d);
  CHECK(ex[0].targets == std::vector<std::int32_t>{1});
  CHECK(ex[0].tokens.size() == 6);  // truncated
  CHECK(ex[1].tokens == std::vector<std::int32_t>{'d', 'u', 'l', 'l'});

  write_file(dir / "bad.tsv", "2\tfoo\n");
  try {
    ingest_labeled(dir / "bad.tsv", 6, 8);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line() == 1);
  }
  write_file(dir / "bad3.tsv", "0\ta\n1\tb\nno tab here\n");
  try {
    ingest_labeled(dir / "bad3.tsv", 6, 8);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line() == 3);
  }

  export_labeled(d, dir / "out.tsv");
  const Dataset back = ingest_labeled(dir / "out.tsv", 6, 8);
  const auto ex2 = examples_of(back);
  REQUIRE(ex2.size() == ex.size());
  for (std::size_t i = 0; i < ex.size(); ++i) {
    CHECK(ex2[i].targets == ex[i].targets);
    CHECK(ex2[i].tokens == ex[i].tokens);
  }
}

TEST_CASE("json round-trips of datasets, profiles and plans") {
  Rng rng(1);
  const Dataset d = gen_classification(rng, 50, 5, 16, 16);
  CHECK(dataset_from_json(dataset_to_json(d)) == d);
  const Dataset lm = gen_lm(rng, 81, 8, 8, 4);
  CHECK(dataset_from_json(dataset_to_json(lm)) == lm);

  SensitivityProfile p;
  p.method = Method::tdmpq;
  p.scores = {0.1, 0.25, 1e-9};
  p.settings.delta = 0.02;
  p.settings.seed = 99;
  p.base_metric = 0.75;
  p.warnings = {"w"};
  CHECK(profile_from_json(profile_to_json(p)) == p);

  const PrecisionPlan plan{{16, 8, 4}, PlanProvenance::budgeted};
  CHECK(plan_from_json(plan_to_json(plan)) == plan);
  Json bad = plan_to_json(plan);
  bad["bits"][1] = 5;
  CHECK_THROWS_AS(plan_from_json(bad), Error);
}

TEST_CASE("configuration fails closed") {
  CHECK_NOTHROW(parse_config(small_config()));
  CHECK_THROWS_AS(with({{"colour", "blue"}}), ConfigError);
  CHECK_THROWS_AS(with({{"model", {{"layers", 3}}}}), ConfigError);
  CHECK_THROWS_AS(with({{"method", "hessian"}}), ConfigError);
  CHECK_THROWS_AS(with({{"allocator", {{"kind", "greedy"}}}}), ConfigError);
  CHECK_THROWS_AS(with({{"lambda", "big"}}), ConfigError);
  CHECK_THROWS_AS(with({{"lambda", -0.5}}), ConfigError);
  CHECK_THROWS_AS(with({{"allocator", {{"kind", "uniform"}, {"bits", 6}}}}), ConfigError);
  Json no_seed = small_config();
  no_seed.erase("seed");
  CHECK_THROWS_AS(parse_config(no_seed), ConfigError);

  const RunConfig c = with({{"allocator", {{"kind", "budgeted"}, {"budget_bytes", 9000}}}});
  CHECK(c.allocator.kind == AllocatorKind::budgeted);
  CHECK(c.allocator.budget_bytes == 9000);
  CHECK(c.allocator.label() == "budgeted(9000)");
  CHECK(c.echo["allocator"]["budget_bytes"] == 9000);
}

TEST_CASE("load_config resolves and checks paths") {
  const fs::path dir = scratch("paths");
  write_file(dir / "train.txt", "abcdefghijklmnopqrstuvwxyz");
  Json j = small_config();
  j["task"] = "language_model";
  j["data"] = {{"source", "files"}, {"seq_len", 4}, {"batch_size", 2},
               {"train", "train.txt"}, {"calib", "train.txt"}, {"eval", "train.txt"}};
  write_json(j, dir / "cfg.json");
  const RunConfig c = load_config(dir / "cfg.json", 12);
  CHECK(c.seed == 12);
  CHECK(fs::path(c.data.train_path) == dir / "train.txt");
  const auto splits = make_splits(c);
  CHECK(splits.train.vocab_size == kByteVocab);
  CHECK(splits.eval.n_samples == 6);

  j["data"]["eval"] = "nowhere.txt";
  write_json(j, dir / "cfg2.json");
  CHECK_THROWS_AS(load_config(dir / "cfg2.json"), ConfigError);
}

TEST_CASE("stage seeds are distinct and derived from the master seed") {
  const auto a = stage_seeds(7), b = stage_seeds(7), c = stage_seeds(8);
  CHECK(a.data == b.data);
  CHECK(a.data == derive_seed(7, 1));
  CHECK(a.allocate == derive_seed(7, 5));
  CHECK(a.data != a.init);
  CHECK(a.train != c.train);
}

TEST_CASE("run is deterministic and its report is self-consistent") {
  const RunConfig c = with({{"method", "pmpq"}});
  const fs::path d1 = scratch("run1"), d2 = scratch("run2");
  const QuantReport r = run(c, d1);
  run(c, d2);
  CHECK(read_file(d1 / "report.json") == read_file(d2 / "report.json"));
  CHECK(read_file(d1 / "quantized.mpqw") == read_file(d2 / "quantized.mpqw"));
  CHECK(read_file(d1 / "plan.json") == read_file(d2 / "plan.json"));

  CHECK(std::abs(r.memory.fpr_percent - 100.0 * (1.0 - 1.0 / r.memory.cr)) < 1e-9);
  CHECK(r.drop == r.base_metric - r.quant_metric);
  CHECK(r.memory.cr >= 1.0);
  REQUIRE(r.profile.base_metric.has_value());
  CHECK(*r.profile.base_metric == r.base_metric);  // shared, not re-measured

  const Json j = read_json(d1 / "report.json");
  for (const char* key : {"schema_version", "toolkit_version", "method", "sensitivities", "plan", "m_o_bytes",
                          "m_q_bytes", "cr", "fpr_percent", "base_metric", "quant_metric", "drop", "segment_stats",
                          "config"})
    CHECK_MESSAGE(j.contains(key), key);
  CHECK(j["method"] == "pmpq");
  CHECK(j["sensitivities"].size() == 3);
  CHECK(j["segment_stats"].contains("first30"));
  CHECK(j["segment_stats"]["first30"] == *segment_stats(r.profile.scores).first30);
  CHECK(j["config"]["seed"] == 3);

  // The stored container reproduces the quantized metric.
  const Splits data = make_splits(c);
  const TransformerModel reloaded = model_from_container(load(d1 / "quantized.mpqw"));
  CHECK(std::abs(evaluate(reloaded, data.eval).accuracy - r.quant_metric) < 1e-6);
}

TEST_CASE("uniform 16-bit plan costs almost nothing") {
  const QuantReport r = run(with({{"allocator", {{"kind", "uniform"}, {"bits", 16}}}}));
  CHECK(r.plan.bits == std::vector<int>(3, 16));
  CHECK(std::abs(r.drop) <= 0.01);
  CHECK(r.memory.cr == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("stage errors name the stage") {
  try {
    run(with({{"allocator", {{"kind", "budgeted"}, {"budget_bytes", 100}}}}));
    FAIL("expected StageError");
  } catch (const StageError& e) {
    CHECK(e.stage() == "allocate");
  }
}

TEST_CASE("language-model run reports a perplexity drop") {
  const QuantReport r = run(with({{"task", "language_model"}, {"method", "tdmpq"}, {"data", {{"n_train", 64}, {"n_calib", 16}, {"n_eval", 32}}}}));
  CHECK(r.task == TaskKind::language_model);
  CHECK(r.base_metric >= 1.0);
  CHECK(r.drop == r.quant_metric - r.base_metric);
}

TEST_CASE("compare") {
  const RunConfig base = parse_config(small_config());
  SUBCASE("a config compared with itself gives identical rows") {
    const auto rows = compare({base, base});
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].quant_metric == rows[1].quant_metric);
    CHECK(rows[0].cr == rows[1].cr);
    CHECK(rows[0].m_q_bytes == rows[1].m_q_bytes);
  }
  SUBCASE("rows sort by method, then allocator") {
    Json spec = {{"base", small_config()},
                 {"runs", Json::array({{{"method", "tdmpq"}},
                                       {{"method", "cmpq"}, {"allocator", {{"kind", "uniform"}, {"bits", 8}}}},
                                       {{"method", "cmpq"}}})}};
    const auto rows = compare(parse_compare(spec));
    REQUIRE(rows.size() == 3);
    CHECK(rows[0].method == "cmpq");
    CHECK(rows[0].allocator == "kmeans");
    CHECK(rows[1].allocator == "uniform(8)");
    CHECK(rows[2].method == "tdmpq");
    for (const auto& row : rows) CHECK(row.cr >= 1.0);
    const std::string text = compare_to_text(rows);
    CHECK(text.find("uniform(8)") != std::string::npos);
    CHECK(compare_to_json(rows)["rows"].size() == 3);
  }
  SUBCASE("mismatched data is rejected") {
    RunConfig other = base;
    other.data.n_eval = 64;
    CHECK_THROWS_AS(compare({base, other}), ConfigError);
  }
}
