// SPDX-License-Identifier: Apache-2.0
//
// mpq: mixed-precision quantization pipeline, one verb per stage.

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "mpq/pipeline.hpp"

namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config, "JSON configuration file")->required()->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "override the configuration's master seed");
  cmd->add_option("-o,--out", c.out, "output directory")->capture_default_str();
}

mpq::RunConfig config_of(const Common& c) { return mpq::load_config(c.config, c.seed); }

mpq::Json eval_json(const mpq::EvalResult& e) {
  mpq::Json j;
  j["schema_version"] = mpq::kSchemaVersion;
  j["task"] = mpq::to_string(e.task);
  j["metric"] = e.task == mpq::TaskKind::classification ? "accuracy" : "perplexity";
  j["value"] = e.metric();
  j["mean_loss"] = e.mean_loss;
  j["n_samples"] = e.n_samples;
  return j;
}

void say(const std::string& line) { std::cout << line << '\n'; }

int gen_data(const Common& c) {
  const auto cfg = config_of(c);
  const auto splits = mpq::make_splits(cfg);
  const fs::path out(c.out);
  mpq::write_json(mpq::dataset_to_json(splits.train), out / "train.json");
  mpq::write_json(mpq::dataset_to_json(splits.calib), out / "calib.json");
  mpq::write_json(mpq::dataset_to_json(splits.eval), out / "eval.json");
  say("wrote " + (out / "{train,calib,eval}.json").string());
  return 0;
}

int train_cmd(const Common& c) {
  const auto cfg = config_of(c);
  const auto prep = mpq::prepare(cfg);
  const fs::path out(c.out);
  const auto bytes = mpq::save(mpq::fp32_container(prep.model), out / "model.mpqw");
  mpq::Json log;
  log["schema_version"] = mpq::kSchemaVersion;
  log["epochs"] = mpq::Json::array();
  if (prep.train_log)
    for (const auto& e : prep.train_log->epochs) log["epochs"].push_back({{"loss", e.loss}, {"metric", e.metric}});
  log["eval"] = eval_json(prep.base);
  log["config"] = cfg.echo;
  mpq::write_json(log, out / "train_log.json");
  say("model.mpqw (" + std::to_string(bytes) + " bytes), eval " + std::to_string(prep.base.metric()));
  return 0;
}

int analyze_cmd(const Common& c) {
  const auto cfg = config_of(c);
  const auto prep = mpq::prepare(cfg);
  const auto profile = mpq::analyze(cfg, prep);
  mpq::Json j = mpq::profile_to_json(profile);
  j["config"] = cfg.echo;
  mpq::write_json(j, fs::path(c.out) / "profile.json");
  for (const auto& w : profile.warnings) std::cerr << "warning: " << w << '\n';
  say("wrote " + (fs::path(c.out) / "profile.json").string());
  return 0;
}

int plan_cmd(const Common& c) {
  const auto cfg = config_of(c);
  if (cfg.profile_path.empty()) throw mpq::ConfigError("plan needs artifacts.profile");
  const auto profile = mpq::profile_from_json(mpq::read_json(cfg.profile_path));
  const auto prep = mpq::prepare(cfg);
  const auto plan = mpq::allocate(cfg, prep, profile);
  mpq::Json j = mpq::plan_to_json(plan);
  j["memory_bytes"] = mpq::planned_bytes(prep.model.config(), plan);
  j["seed"] = cfg.seed;
  j["config"] = cfg.echo;
  mpq::write_json(j, fs::path(c.out) / "plan.json");
  say("wrote " + (fs::path(c.out) / "plan.json").string());
  return 0;
}

int quantize_cmd(const Common& c) {
  const auto cfg = config_of(c);
  if (cfg.plan_path.empty()) throw mpq::ConfigError("quantize needs artifacts.plan");
  const auto plan = mpq::plan_from_json(mpq::read_json(cfg.plan_path));
  const auto data = mpq::make_splits(cfg);
  const auto model = mpq::obtain_model(cfg, data);
  const auto q = mpq::apply_plan(model, plan);
  const fs::path out(c.out);
  mpq::save(q.container, out / "quantized.mpqw");
  const auto m = mpq::memory_report(mpq::fp32_container(model), q.container);
  mpq::Json j;
  j["schema_version"] = mpq::kSchemaVersion;
  j["m_o_bytes"] = m.m_o_bytes;
  j["m_q_bytes"] = m.m_q_bytes;
  j["cr"] = m.cr;
  j["fpr_percent"] = m.fpr_percent;
  mpq::write_json(j, out / "memory.json");
  say("quantized.mpqw, CR " + std::to_string(m.cr));
  return 0;
}

int eval_cmd(const Common& c) {
  const auto cfg = config_of(c);
  const auto prep = mpq::prepare(cfg);
  mpq::write_json(eval_json(prep.base), fs::path(c.out) / "eval.json");
  say(std::string(prep.base.task == mpq::TaskKind::classification ? "accuracy " : "perplexity ") +
      std::to_string(prep.base.metric()));
  return 0;
}

int run_cmd(const Common& c) {
  const auto cfg = config_of(c);
  const auto r = mpq::run(cfg, fs::path(c.out));
  say(mpq::to_string(r.method) + " / " + r.allocator + ": base " + std::to_string(r.base_metric) + ", quantized " +
      std::to_string(r.quant_metric) + ", CR " + std::to_string(r.memory.cr));
  return 0;
}

int compare_cmd(const Common& c) {
  const auto configs = mpq::parse_compare(mpq::read_json(c.config), c.seed);
  const auto rows = mpq::compare(configs);
  const fs::path out(c.out);
  mpq::write_json(mpq::compare_to_json(rows), out / "compare.json");
  const std::string table = mpq::compare_to_text(rows);
  mpq::write_text(table, out / "compare.txt");
  std::cout << table;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mpq: per-layer sensitivity analysis and mixed-precision weight quantization"};
  app.require_subcommand(1);
  Common common;
  struct Verb {
    const char* name;
    const char* help;
    int (*fn)(const Common&);
  };
  const Verb verbs[] = {
      {"gen-data", "write synthetic train/calib/eval splits", gen_data},
      {"train", "train (or load) the model and save it as fp32 MPQW", train_cmd},
      {"analyze", "compute a per-layer sensitivity profile", analyze_cmd},
      {"plan", "turn artifacts.profile into a precision plan", plan_cmd},
      {"quantize", "apply artifacts.plan and write the quantized container", quantize_cmd},
      {"eval", "evaluate the model on the eval split", eval_cmd},
      {"run", "full pipeline: analyze, allocate, quantize, evaluate, report", run_cmd},
      {"compare", "run several method/allocator variants on one model", compare_cmd},
  };
  int (*chosen)(const Common&) = nullptr;
  for (const auto& v : verbs) {
    CLI::App* cmd = app.add_subcommand(v.name, v.help);
    add_common(cmd, common);
    cmd->callback([&chosen, fn = v.fn] { chosen = fn; });
  }
  CLI11_PARSE(app, argc, argv);
  try {
    return chosen(common);
  } catch (const mpq::ConfigError& e) {
    std::cerr << "error: config: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
