// SPDX-License-Identifier: Apache-2.0
//
// cdnet: command-line front end over the C API.
//
// Every subcommand accepts --config FILE plus one flag per config key
// (--data.separation 2, --train.variant decompose, ...). Precedence is
// flags > file > defaults. All outputs land in the run directory (--out)
// together with run_manifest.json and the resolved config.json.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cdnet/cdnet.h"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Exit codes: 0 success, 1 contract or runtime failure, 2 configuration error.
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;

struct Failure {
  cdnet_status status;
  std::string message;
};

void check(cdnet_status s) {
  if (s != CDNET_OK) throw Failure{s, cdnet_last_error()};
}

std::string take(char* s) {
  std::string out = s ? s : "";
  cdnet_string_free(s);
  return out;
}

template <class T, void (*Free)(T*)>
struct Deleter {
  void operator()(T* p) const { Free(p); }
};
using ConfigPtr = std::unique_ptr<cdnet_config, Deleter<cdnet_config, cdnet_config_free>>;
using DatasetPtr = std::unique_ptr<cdnet_dataset, Deleter<cdnet_dataset, cdnet_dataset_free>>;
using ModelPtr = std::unique_ptr<cdnet_model, Deleter<cdnet_model, cdnet_model_free>>;
using ReportPtr = std::unique_ptr<cdnet_report, Deleter<cdnet_report, cdnet_report_free>>;

struct Command {
  std::string name;
  CLI::App* app = nullptr;
  std::string config_path;
  std::string data_path;
  std::string init_path;
  std::string model_path;
  std::map<std::string, std::string> values;  // config key -> flag value
};

void add_config_flags(Command& cmd) {
  cmd.app->add_option("--config", cmd.config_path, "JSON config file (flags override it)");
  const std::size_t n = cdnet_config_field_count();
  for (std::size_t i = 0; i < n; ++i) {
    const char* key = nullptr;
    const char* def = nullptr;
    const char* doc = nullptr;
    check(cdnet_config_field_info(i, &key, &def, &doc));
    std::string names = std::string("--") + key;
    if (std::string(key) == "out_dir") names = "--out,--out_dir";
    cmd.app->add_option(names, cmd.values[key], doc)->default_str(def)->group("Config");
  }
}

ConfigPtr resolve_config(const Command& cmd) {
  cdnet_config* raw = nullptr;
  check(cdnet_config_new(&raw));
  ConfigPtr cfg(raw);
  if (!cmd.config_path.empty()) check(cdnet_config_load(cfg.get(), cmd.config_path.c_str()));
  for (const auto& [key, value] : cmd.values) {
    const std::string flag = key == "out_dir" ? "--out" : "--" + key;
    if (cmd.app->count(flag) > 0) check(cdnet_config_set(cfg.get(), key.c_str(), value.c_str()));
  }
  check(cdnet_config_finalize(cfg.get()));
  return cfg;
}

std::string get(const cdnet_config* cfg, const char* key) {
  char* out = nullptr;
  check(cdnet_config_get(cfg, key, &out));
  return take(out);
}

fs::path prepare_run_dir(const cdnet_config* cfg) {
  const fs::path dir = get(cfg, "out_dir");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Failure{CDNET_ERR_IO, "cannot create run directory " + dir.string() + ": " + ec.message()};
  return dir;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw Failure{CDNET_ERR_IO, "cannot write " + path.string()};
}

void write_manifest(const fs::path& dir, const Command& cmd, const cdnet_config* cfg,
                    const std::vector<std::string>& argv, const json& extra) {
  char* cfg_json = nullptr;
  check(cdnet_config_to_json(cfg, &cfg_json));
  const json config = json::parse(take(cfg_json));
  write_text(dir / "config.json", config.dump(2) + "\n");

  const std::uint64_t master = std::stoull(get(cfg, "seed"));
  json seeds{{"master", master}};
  const char* purposes[] = {"", "data", "init", "pretrain", "finetune", "eval"};
  for (std::uint64_t p = 1; p <= 5; ++p) seeds[purposes[p]] = cdnet_derive_seed(master, p, 0);

  json inputs = json::object();
  json rerun = json::array({"cdnet", cmd.name, "--config", (dir / "config.json").string()});
  if (!cmd.config_path.empty()) inputs["config"] = cmd.config_path;
  for (const auto& [flag, path] : {std::pair<std::string, std::string>{"data", cmd.data_path},
                                   {"init", cmd.init_path},
                                   {"model", cmd.model_path}}) {
    if (path.empty()) continue;
    inputs[flag] = path;
    rerun.push_back("--" + flag);
    rerun.push_back(path);
  }

  json m{{"format", "cdnet-run-manifest v1"},
         {"command", cmd.name},
         {"argv", argv},
         {"rerun", rerun},
         {"version", cdnet_version()},
         {"source_fingerprint", cdnet_source_fingerprint()},
         {"seeds", seeds},
         {"inputs", inputs},
         {"config", config},
         {"outputs", extra}};
  write_text(dir / "run_manifest.json", m.dump(2) + "\n");
}

DatasetPtr dataset_for(const Command& cmd, const cdnet_config* cfg) {
  cdnet_dataset* raw = nullptr;
  if (cmd.data_path.empty()) {
    check(cdnet_dataset_generate(cfg, &raw));
  } else {
    check(cdnet_dataset_load(cmd.data_path.c_str(), &raw));
  }
  return DatasetPtr(raw);
}

ModelPtr load_model(const std::string& path) {
  cdnet_model* raw = nullptr;
  check(cdnet_model_load(path.c_str(), &raw));
  return ModelPtr(raw);
}

std::string model_hash(const cdnet_model* m) {
  char* out = nullptr;
  check(cdnet_model_hash(m, &out));
  return take(out);
}

void history_to_file(const char* line, void* user) { *static_cast<std::ofstream*>(user) << line << '\n'; }

int run(const Command& cmd, const std::vector<std::string>& argv) {
  const ConfigPtr cfg = resolve_config(cmd);
  const fs::path dir = prepare_run_dir(cfg.get());
  json outputs = json::object();

  if (cmd.name == "gen") {
    const auto ds = dataset_for(cmd, cfg.get());
    const fs::path path = dir / "dataset.txt";
    check(cdnet_dataset_save(ds.get(), path.string().c_str()));
    outputs["dataset"] = path.string();
    std::cout << "gen: " << cdnet_dataset_rows(ds.get()) << " rows -> " << path.string() << '\n';
  } else if (cmd.name == "pretrain" || cmd.name == "finetune") {
    const auto ds = dataset_for(cmd, cfg.get());
    std::ofstream history(dir / "history.jsonl", std::ios::binary);
    cdnet_model* raw = nullptr;
    ModelPtr init;
    if (cmd.name == "pretrain") {
      check(cdnet_pretrain(cfg.get(), ds.get(), history_to_file, &history, &raw));
    } else {
      if (!cmd.init_path.empty()) init = load_model(cmd.init_path);
      check(cdnet_finetune(cfg.get(), ds.get(), init.get(), history_to_file, &history, &raw));
    }
    const ModelPtr m(raw);
    const fs::path ckpt = dir / "checkpoint";
    check(cdnet_model_save(m.get(), ckpt.string().c_str()));
    const std::string hash = model_hash(m.get());
    outputs["checkpoint"] = ckpt.string();
    outputs["checkpoint_hash"] = hash;
    outputs["history"] = (dir / "history.jsonl").string();
    std::cout << cmd.name << ": checkpoint " << ckpt.string() << " hash " << hash << '\n';
  } else if (cmd.name == "eval") {
    if (cmd.model_path.empty()) throw Failure{CDNET_ERR_CONFIG, "eval: --model is required"};
    const auto m = load_model(cmd.model_path);
    const auto ds = dataset_for(cmd, cfg.get());
    cdnet_report* raw = nullptr;
    check(cdnet_evaluate(cfg.get(), ds.get(), m.get(), &raw));
    const ReportPtr r(raw);
    char* text = nullptr;
    char* js = nullptr;
    check(cdnet_report_text(r.get(), &text));
    check(cdnet_report_json(r.get(), &js));
    write_text(dir / "report.txt", take(text));
    write_text(dir / "report.json", take(js) + "\n");
    outputs["report"] = (dir / "report.txt").string();
    outputs["checkpoint_hash"] = model_hash(m.get());
    std::printf("eval: mean %.4f +- %.4f over %d tasks\n", cdnet_report_mean(r.get()),
                cdnet_report_ci95(r.get()), cdnet_report_tasks(r.get()));
  } else if (cmd.name == "ablate" || cmd.name == "sweep-j") {
    const auto ds = dataset_for(cmd, cfg.get());
    char* text = nullptr;
    char* js = nullptr;
    const bool ablate = cmd.name == "ablate";
    check(ablate ? cdnet_ablate(cfg.get(), ds.get(), &text, &js) : cdnet_sweep_j(cfg.get(), ds.get(), &text, &js));
    const std::string stem = ablate ? "ablation" : "sweep";
    const std::string table = take(text);
    write_text(dir / (stem + ".txt"), table);
    write_text(dir / (stem + ".json"), take(js) + "\n");
    outputs["table"] = (dir / (stem + ".txt")).string();
    std::cout << table;
  } else if (cmd.name == "gradcheck") {
    double max_err = 0;
    int passed = 0;
    char* js = nullptr;
    check(cdnet_gradcheck(cfg.get(), &max_err, &passed, &js));
    write_text(dir / "gradcheck.json", take(js) + "\n");
    outputs["report"] = (dir / "gradcheck.json").string();
    outputs["passed"] = passed != 0;
    std::printf("gradcheck: max relative error %.3e (tol %s) %s\n", max_err, get(cfg.get(), "gradcheck.tol").c_str(),
                passed ? "PASS" : "FAIL");
    write_manifest(dir, cmd, cfg.get(), argv, outputs);
    return passed ? 0 : kExitFailure;
  }
  write_manifest(dir, cmd, cfg.get(), argv, outputs);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cdnet: cascaded decomposition for cross-domain few-shot classification"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", std::string(cdnet_version()) + " (" + cdnet_source_fingerprint() + ")");
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "suppress structured log lines on stderr");

  const std::vector<std::pair<std::string, std::string>> specs = {
      {"gen", "generate a synthetic dataset and write it to <out>/dataset.txt"},
      {"pretrain", "batch pre-training; writes <out>/checkpoint and history.jsonl"},
      {"finetune", "episodic fine-tuning (pre-trains first unless --init is given)"},
      {"eval", "N-way K-shot evaluation of a checkpoint on the compound classes"},
      {"ablate", "variant x shot accuracy table"},
      {"sweep-j", "accuracy versus the number of cascade steps J"},
      {"gradcheck", "finite-difference check of the fine-tuning gradient"},
  };
  std::vector<std::unique_ptr<Command>> commands;
  try {
    for (const auto& [name, doc] : specs) {
      auto cmd = std::make_unique<Command>();
      cmd->name = name;
      cmd->app = app.add_subcommand(name, doc);
      add_config_flags(*cmd);
      if (name != "gen" && name != "gradcheck") {
        cmd->app->add_option("--data", cmd->data_path, "dataset file from 'gen' (default: generate from config)");
      }
      if (name == "finetune") cmd->app->add_option("--init", cmd->init_path, "pre-trained checkpoint directory");
      if (name == "eval") cmd->app->add_option("--model", cmd->model_path, "checkpoint directory")->required();
      commands.push_back(std::move(cmd));
    }
  } catch (const Failure& f) {
    std::cerr << "error: " << f.message << '\n';
    return kExitFailure;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }
  cdnet_set_logging(quiet ? 0 : 1);

  const std::vector<std::string> args(argv, argv + argc);
  for (const auto& cmd : commands) {
    if (!cmd->app->parsed()) continue;
    try {
      return run(*cmd, args);
    } catch (const Failure& f) {
      std::cerr << "error (" << cdnet_status_name(f.status) << "): " << f.message << '\n';
      return f.status == CDNET_ERR_CONFIG ? kExitConfig : kExitFailure;
    }
  }
  return kExitFailure;
}
