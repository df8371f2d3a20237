// Copyright 2026 The dsmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "dsmoe/cli.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <set>

#include "CLI11.hpp"
#include "dsmoe/config.hpp"
#include "dsmoe/errors.hpp"
#include "dsmoe/eval.hpp"
#include "dsmoe/gradcheck.hpp"
#include "json.hpp"

namespace dsmoe {

namespace fs = std::filesystem;

namespace {

constexpr const char* kFooter = R"(Artifacts (relative to --out):
  synth     schema.json items.csv train.csv test.csv manifest.json
  train     student.ckpt teacher.ckpt trace.jsonl manifest.json
  eval      report.json recall.csv activation.csv similarity.csv manifest.json
  analyze   similarity.csv activation.csv manifest.json
  sweep     sweep.csv cells/<parameter>-<value>-seed<seed>.json manifest.json
Exit status: 0 success, 1 contract or validation failure, 2 usage error.)";

struct Options {
  std::string config;
  std::string out;
  std::string data;
  std::string checkpoint;
  std::string ks;
  std::string grid;
  std::string size = "tiny";
  std::vector<std::string> ablate;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::size_t seeds = 1;
  std::size_t gradcheck_seeds = 5;
  bool corrupt_backward = false;
};

class Manifest {
 public:
  Manifest(std::string command, const std::vector<std::string>& args)
      : start_(std::chrono::steady_clock::now()) {
    j_["command"] = std::move(command);
    j_["arguments"] = args;
    j_["tool_version"] = kToolVersion;
  }
  void config(const ExperimentConfig& c) { j_["config"] = nlohmann::ordered_json::parse(config_json(c)); }
  void seed(std::uint64_t s) { j_["seed"] = s; }
  void artifact(const std::string& name, const fs::path& path) { artifacts_[name] = path.string(); }
  template <typename T>
  void set(const std::string& key, const T& value) {
    j_[key] = value;
  }
  void write(const fs::path& path) {
    j_["artifacts"] = artifacts_;
    j_["duration_seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    write_text_atomic(path, j_.dump(2) + "\n");
  }

 private:
  std::chrono::steady_clock::time_point start_;
  nlohmann::ordered_json j_;
  nlohmann::ordered_json artifacts_ = nlohmann::ordered_json::object();
};

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) {
    throw IoError("cannot create output directory '" + dir.string() + "'" + (ec ? ": " + ec.message() : ""));
  }
}

ExperimentConfig resolve_config(const Options& o) {
  ExperimentConfig c = o.config.empty() ? ExperimentConfig{} : load_config(o.config);
  if (o.seed) c.train.seed = *o.seed;
  if (o.epochs) c.train.epochs = *o.epochs;
  c.train.validate();
  return c;
}

void check_fingerprints(std::uint64_t checkpoint, std::uint64_t data) {
  if (checkpoint != data) {
    throw ValidationError("schema fingerprint mismatch: checkpoint " + fingerprint_hex(checkpoint) + ", data " +
                          fingerprint_hex(data));
  }
}

int cmd_synth(const Options& o, const std::vector<std::string>& args, std::ostream& out) {
  ExperimentConfig c = o.config.empty() ? ExperimentConfig{} : load_config(o.config);
  if (o.seed) c.data.seed = *o.seed;
  const fs::path dir = o.out;
  ensure_dir(dir);
  Manifest m("synth", args);
  m.config(c);
  m.seed(c.data.seed);
  const SynthData data = synth_generate(c.data);
  write_data_dir(data, dir);
  for (const char* name : {"schema.json", "items.csv", "train.csv", "test.csv"}) m.artifact(name, dir / name);
  m.write(dir / "manifest.json");
  out << "wrote " << data.train.records.size() << " train and " << data.test.records.size()
      << " test records to " << dir.string() << "\n";
  return kExitOk;
}

int cmd_train(const Options& o, const std::vector<std::string>& args, std::ostream& out) {
  std::set<std::string> ablations;
  for (const auto& a : o.ablate) {
    if (!ablations.insert(a).second) throw ArgumentError("--ablate " + a + " given more than once");
  }
  ExperimentConfig c = resolve_config(o);
  if (ablations.count("sap")) c.model.use_sap = false;
  if (ablations.count("dsbn")) c.model.use_dsbn = false;
  if (ablations.count("distill")) c.train.distill_weight = 0.0;
  const SynthData data = load_data_dir(o.data);
  const fs::path dir = o.out;
  ensure_dir(dir);
  Manifest m("train", args);
  m.config(c);
  m.seed(c.train.seed);
  m.set("ablations", std::vector<std::string>(ablations.begin(), ablations.end()));
  m.set("distill_weight", c.train.distill_weight);
  m.set("schema_fingerprint", fingerprint_hex(data.train.schema.fingerprint()));

  DsmoeModel student(data.train.schema, c.model, c.train.seed);
  std::optional<TeacherModel> teacher;
  if (c.train.distill_weight > 0.0) teacher.emplace(data.train.schema, c.model, c.train.seed);
  const TrainResult result = train(student, teacher ? &*teacher : nullptr, data.train, c.train);
  write_trace(result.trace, dir / "trace.jsonl");
  m.artifact("trace", dir / "trace.jsonl");
  save_checkpoint(student, dir / "student.ckpt");
  m.artifact("student_checkpoint", dir / "student.ckpt");
  if (teacher) {
    save_checkpoint(*teacher, dir / "teacher.ckpt");
    m.artifact("teacher_checkpoint", dir / "teacher.ckpt");
  } else {
    std::error_code ec;
    fs::remove(dir / "teacher.ckpt", ec);
  }
  m.set("singleton_fallbacks", result.singleton_fallbacks);
  m.write(dir / "manifest.json");
  for (const auto& e : epoch_means(result.trace)) {
    out << e.phase << " epoch " << e.epoch << " bce " << e.bce << " kd " << e.kd << " total " << e.total << "\n";
  }
  return kExitOk;
}

int cmd_eval(const Options& o, const std::vector<std::string>& args, std::ostream& out) {
  const auto ks = parse_k_list(o.ks);
  const CheckpointInfo info = read_checkpoint_info(o.checkpoint);
  if (info.kind != CheckpointKind::student) throw ValidationError("'" + o.checkpoint + "' is not a student checkpoint");
  const SynthData data = load_data_dir(o.data);
  check_fingerprints(info.fingerprint, data.test.schema.fingerprint());
  DsmoeModel model = load_student(o.checkpoint);
  const EvalReport report = evaluate(model, data.train, data.test, ks);
  const fs::path dir = o.out;
  ensure_dir(dir);
  Manifest m("eval", args);
  write_report(report, dir);
  for (const char* name : {"report.json", "recall.csv", "activation.csv", "similarity.csv"}) m.artifact(name, dir / name);
  m.set("checkpoint", o.checkpoint);
  m.set("data", o.data);
  m.write(dir / "manifest.json");
  const Table t = recall_table(report);
  for (const auto& row : t.rows) {
    out << "scenario " << row[0] << ":";
    for (std::size_t k = 0; k < ks.size(); ++k) out << " " << t.header[3 + k] << " " << row[3 + k];
    out << "\n";
  }
  return kExitOk;
}

int cmd_analyze(const Options& o, const std::vector<std::string>& args, std::ostream& out) {
  const CheckpointInfo info = read_checkpoint_info(o.checkpoint);
  if (info.kind != CheckpointKind::student) throw ValidationError("'" + o.checkpoint + "' is not a student checkpoint");
  const SynthData data = load_data_dir(o.data);
  check_fingerprints(info.fingerprint, data.test.schema.fingerprint());
  const DsmoeModel model = load_student(o.checkpoint);
  const Tensor similarity = bs_similarity(model);
  const Tensor activation = expert_activation_profile(model, data.test);
  const fs::path dir = o.out;
  ensure_dir(dir);
  Manifest m("analyze", args);
  write_table(matrix_table(similarity, "scenario", "scenario"), dir / "similarity.csv");
  write_table(matrix_table(activation, "scenario", "expert"), dir / "activation.csv");
  m.artifact("similarity.csv", dir / "similarity.csv");
  m.artifact("activation.csv", dir / "activation.csv");
  m.write(dir / "manifest.json");
  out << "wrote similarity.csv and activation.csv to " << dir.string() << "\n";
  return kExitOk;
}

int cmd_gradcheck(const Options& o, std::ostream& out) {
  if (o.size != "tiny") throw ArgumentError("--size must be 'tiny'");
  std::vector<std::uint64_t> seeds;
  const std::uint64_t base = o.seed.value_or(0);
  for (std::size_t i = 0; i < o.gradcheck_seeds; ++i) seeds.push_back(base + i);
  fault::set_corrupt_prelu_backward(o.corrupt_backward);
  std::vector<GradcheckOutcome> results;
  try {
    results = gradcheck_tiny(seeds);
  } catch (...) {
    fault::set_corrupt_prelu_backward(false);
    throw;
  }
  fault::set_corrupt_prelu_backward(false);
  double worst = 0.0;
  bool ok = true;
  for (const auto& r : results) {
    char line[256];
    std::snprintf(line, sizeof line, "seed %llu %-8s params %zu scalars %zu max_rel_err %.3e worst %s[%zu] %s\n",
                  static_cast<unsigned long long>(r.seed), r.model.c_str(), r.parameters, r.result.scalars_checked,
                  r.result.max_relative_error, r.worst_parameter.c_str(), r.result.worst_element,
                  r.passed() ? "ok" : "FAIL");
    out << line;
    worst = std::max(worst, r.result.max_relative_error);
    ok = ok && r.passed();
  }
  char summary[128];
  std::snprintf(summary, sizeof summary, "max relative error %.6e (tolerance %.0e): %s\n", worst, kGradcheckTolerance,
                ok ? "PASS" : "FAIL");
  out << summary;
  return ok ? kExitOk : kExitFailure;
}

int cmd_sweep(const Options& o, const std::vector<std::string>& args, std::ostream& out) {
  const ExperimentConfig c = resolve_config(o);
  const SweepGrid grid = parse_grid(o.grid, o.seeds, c.train.seed);
  const auto ks = o.ks.empty() ? c.eval.ks : parse_k_list(o.ks);
  const SynthData data = load_data_dir(o.data);
  const fs::path dir = o.out;
  ensure_dir(dir / "cells");
  const auto cells = sweep(grid, data, c.model, c.train, ks, [&](const SweepCell& cell) {
    Manifest m("sweep-cell", args);
    ExperimentConfig cc = c;
    (grid.parameter == "experts" ? cc.model.experts : cc.model.rank) = cell.value;
    cc.train.seed = cell.seed;
    m.config(cc);
    m.seed(cell.seed);
    m.set("status", cell.ok ? "ok" : "failed");
    if (!cell.ok) m.set("error", cell.error);
    m.write(dir / "cells" /
            (grid.parameter + "-" + std::to_string(cell.value) + "-seed" + std::to_string(cell.seed) + ".json"));
    out << grid.parameter << "=" << cell.value << " seed " << cell.seed << ": " << (cell.ok ? "ok" : cell.error)
        << "\n";
  });
  write_table(sweep_table(grid, cells, data.train.schema.scenario_cardinality(), ks), dir / "sweep.csv");
  Manifest m("sweep", args);
  m.config(c);
  m.seed(c.train.seed);
  m.artifact("sweep.csv", dir / "sweep.csv");
  m.write(dir / "manifest.json");
  std::size_t failed = 0;
  for (const auto& cell : cells) failed += cell.ok ? 0 : 1;
  return failed == cells.size() ? kExitFailure : kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Scenario-adaptive mixture-of-experts two-tower retrieval", "dsmoe"};
  app.footer(kFooter);
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);
  Options o;

  auto* synth = app.add_subcommand("synth", "Generate the synthetic multi-scenario dataset");
  synth->add_option("--config", o.config, "Experiment config (JSON)")->check(CLI::ExistingFile);
  synth->add_option("--out", o.out, "Output directory")->required();
  synth->add_option("--seed", o.seed, "Data seed (overrides data.seed)");

  auto* train_cmd = app.add_subcommand("train", "Train the teacher, then the student");
  train_cmd->add_option("--config", o.config, "Experiment config (JSON)")->check(CLI::ExistingFile);
  train_cmd->add_option("--data", o.data, "Data directory from synth")->required()->check(CLI::ExistingDirectory);
  train_cmd->add_option("--out", o.out, "Output directory")->required();
  train_cmd->add_option("--ablate", o.ablate, "Disable a component: sap, distill or dsbn (repeatable)")
      ->check(CLI::IsMember({"sap", "distill", "dsbn"}))
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  train_cmd->add_option("--seed", o.seed, "Training seed (overrides train.seed)");
  train_cmd->add_option("--epochs", o.epochs, "Epoch budget (overrides train.epochs)");

  auto* eval_cmd = app.add_subcommand("eval", "Per-scenario Recall@K of a student checkpoint");
  eval_cmd->add_option("--checkpoint", o.checkpoint, "Student checkpoint")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--data", o.data, "Data directory")->required()->check(CLI::ExistingDirectory);
  eval_cmd->add_option("--out", o.out, "Output directory")->required();
  eval_cmd->add_option("--k", o.ks, "Comma-separated K list")->default_val("50,100");

  auto* analyze = app.add_subcommand("analyze", "Scenario-vector similarity and expert activation");
  analyze->add_option("--checkpoint", o.checkpoint, "Student checkpoint")->required()->check(CLI::ExistingFile);
  analyze->add_option("--data", o.data, "Data directory")->required()->check(CLI::ExistingDirectory);
  analyze->add_option("--out", o.out, "Output directory")->required();

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient verification");
  grad->add_option("--size", o.size, "Configuration size")->default_val("tiny");
  grad->add_option("--seeds", o.gradcheck_seeds, "Number of seeds")->capture_default_str()->check(CLI::PositiveNumber);
  grad->add_option("--seed", o.seed, "First seed");
  grad->add_flag("--corrupt-backward", o.corrupt_backward, "Break one backward rule (harness self-test)")
      ->group("");

  auto* sweep_cmd = app.add_subcommand("sweep", "Sensitivity sweep over experts or rank");
  sweep_cmd->add_option("--config", o.config, "Experiment config (JSON)")->check(CLI::ExistingFile);
  sweep_cmd->add_option("--data", o.data, "Data directory")->required()->check(CLI::ExistingDirectory);
  sweep_cmd->add_option("--grid", o.grid, "experts=1..8 or rank=1..16")->required();
  sweep_cmd->add_option("--seeds", o.seeds, "Seeds per grid point")->capture_default_str()->check(CLI::PositiveNumber);
  sweep_cmd->add_option("--seed", o.seed, "First seed (overrides train.seed)");
  sweep_cmd->add_option("--epochs", o.epochs, "Epoch budget (overrides train.epochs)");
  sweep_cmd->add_option("--k", o.ks, "Comma-separated K list (default from config)");
  sweep_cmd->add_option("--out", o.out, "Output directory")->required();

  std::vector<std::string> argv_store{"dsmoe"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& a : argv_store) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (synth->parsed()) return cmd_synth(o, args, out);
    if (train_cmd->parsed()) return cmd_train(o, args, out);
    if (eval_cmd->parsed()) return cmd_eval(o, args, out);
    if (analyze->parsed()) return cmd_analyze(o, args, out);
    if (grad->parsed()) return cmd_gradcheck(o, out);
    if (sweep_cmd->parsed()) return cmd_sweep(o, args, out);
  } catch (const ArgumentError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace dsmoe
